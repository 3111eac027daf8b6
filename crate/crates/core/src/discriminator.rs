//! PatchGAN discriminator: a fully convolutional critic emitting a 2-D map
//! of patch logits. One architecture serves all four critics (global and
//! region, per domain); they never share parameters.

use ndarray::ArrayD;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::generator::{ConfigError, INIT_STD};
use crate::nn::{conv_out_len, gaussian_conv, norm_layer, Batch, Layer, NnError, NormKind, Stack, StackCache};
use crate::scalar::Scalar;

const KERNEL: usize = 4;
const PAD: usize = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// `(filters, stride)` per hidden layer; a final stride-1 convolution to
    /// one channel is always appended.
    pub channel_plan: Vec<(usize, usize)>,
    pub in_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channel_plan: vec![(64, 2), (128, 2), (256, 2), (512, 2), (512, 1)],
            in_channels: 1,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.in_channels == 0 {
            return Err(ConfigError::Channels);
        }
        for &(filters, stride) in &self.channel_plan {
            if filters == 0 {
                return Err(ConfigError::Channels);
            }
            if stride != 1 && stride != 2 {
                return Err(ConfigError::BaseFilters);
            }
        }
        if self.channel_plan.is_empty() {
            return Err(ConfigError::Channels);
        }
        Ok(())
    }

    /// Closed-form score-map size: `n -> floor((n + 2 - 4)/s) + 1` per
    /// convolution, including the final stride-1 output convolution.
    pub fn score_map_hw(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let mut dims = (h, w);
        let strides: Vec<usize> = self
            .channel_plan
            .iter()
            .map(|&(_, s)| s)
            .chain(std::iter::once(1))
            .collect();
        for s in strides {
            let nh = conv_out_len(dims.0, KERNEL, s, PAD).ok_or(NnError::TooSmall {
                h: dims.0,
                w: dims.1,
                k: KERNEL,
                pad: PAD,
            })?;
            let nw = conv_out_len(dims.1, KERNEL, s, PAD).ok_or(NnError::TooSmall {
                h: dims.0,
                w: dims.1,
                k: KERNEL,
                pad: PAD,
            })?;
            dims = (nh, nw);
        }
        Ok(dims)
    }

    /// Receptive field of one output logit in input pixels, by running
    /// `rf <- (rf - 1) * stride + 4` backward through every convolution.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        let strides: Vec<usize> = self
            .channel_plan
            .iter()
            .map(|&(_, s)| s)
            .chain(std::iter::once(1))
            .collect();
        for &s in strides.iter().rev() {
            rf = (rf - 1) * s + KERNEL;
        }
        rf
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<F: Scalar> {
    pub stack: Stack<F>,
    pub config: DiscriminatorConfig,
}

/// Build a PatchGAN critic. Normalization follows the generator's norm tag
/// and is not applied to the first layer.
pub fn build_patch_discriminator<F: Scalar, R: RngCore>(
    config: &DiscriminatorConfig,
    norm: NormKind,
    rng: &mut R,
) -> Result<Discriminator<F>, ConfigError> {
    config.validate()?;
    let slope = F::cast(config.leaky_slope);
    let mut layers: Vec<Layer<F>> = Vec::new();
    let mut in_ch = config.in_channels;
    for (i, &(filters, stride)) in config.channel_plan.iter().enumerate() {
        layers.push(Layer::Conv(gaussian_conv(
            filters, in_ch, KERNEL, stride, PAD, INIT_STD, rng,
        )));
        if i > 0 {
            layers.push(norm_layer(norm, filters));
        }
        layers.push(Layer::LeakyRelu { slope });
        in_ch = filters;
    }
    layers.push(Layer::Conv(gaussian_conv(1, in_ch, KERNEL, 1, PAD, INIT_STD, rng)));
    Ok(Discriminator {
        stack: Stack::new(layers),
        config: config.clone(),
    })
}

impl<F: Scalar> Discriminator<F> {
    /// Eval-mode scoring: a `(n, 1, sh, sw)` map of raw logits, no sigmoid.
    pub fn discriminate(&self, x: &Batch<F>) -> Result<Batch<F>, NnError> {
        let (_, c, _, _) = x.dim();
        if c != self.config.in_channels {
            return Err(NnError::ChannelMismatch {
                got: c,
                expected: self.config.in_channels,
            });
        }
        self.stack.forward_eval(x)
    }

    pub fn forward_train(&mut self, x: &Batch<F>) -> Result<(Batch<F>, StackCache<F>), NnError> {
        let (_, c, _, _) = x.dim();
        if c != self.config.in_channels {
            return Err(NnError::ChannelMismatch {
                got: c,
                expected: self.config.in_channels,
            });
        }
        self.stack.forward_train(x)
    }

    pub fn backward(
        &self,
        dy: Batch<F>,
        cache: &StackCache<F>,
        grads: Option<&mut [ArrayD<F>]>,
    ) -> Batch<F> {
        self.stack.backward(dy, cache, grads)
    }

    pub fn param_array_count(&self) -> usize {
        self.stack.param_array_count()
    }

    pub fn zero_grads(&self) -> Vec<ArrayD<F>> {
        self.stack.zero_grads()
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a [F])) {
        self.stack.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut [F])) {
        self.stack.visit_params_mut(f);
    }

    pub fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Vec<usize>, Vec<F>)>) {
        self.stack.collect_tensors(prefix, out);
    }

    pub fn load_tensors(
        &mut self,
        prefix: &str,
        fetch: &mut impl FnMut(&str, &[usize]) -> Result<Vec<F>, String>,
    ) -> Result<(), String> {
        self.stack.load_tensors(prefix, fetch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream, tags};
    use ndarray::Array4;

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = stream(seed, &[95]);
        let mut a = Array4::<f64>::zeros(shape);
        a.mapv_inplace(|_| standard_normal(&mut rng) * 0.4);
        a
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = DiscriminatorConfig::default();
        let d1: Discriminator<f32> =
            build_patch_discriminator(&cfg, NormKind::Batch, &mut stream(1, &[tags::WEIGHT_INIT]))
                .unwrap();
        let d2: Discriminator<f32> =
            build_patch_discriminator(&cfg, NormKind::Batch, &mut stream(1, &[tags::WEIGHT_INIT]))
                .unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        d1.collect_tensors("d.", &mut a);
        d2.collect_tensors("d.", &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn first_layer_has_no_normalization() {
        let cfg = DiscriminatorConfig::default();
        let d: Discriminator<f32> =
            build_patch_discriminator(&cfg, NormKind::Batch, &mut stream(2, &[tags::WEIGHT_INIT]))
                .unwrap();
        // layer order: conv, leaky, conv, norm, leaky, ...
        assert!(matches!(d.stack.layers[0], Layer::Conv(_)));
        assert!(matches!(d.stack.layers[1], Layer::LeakyRelu { .. }));
        assert_eq!(d.stack.first_norm_index(), Some(3));
    }

    #[test]
    fn six_convolutions_in_the_default_plan() {
        let cfg = DiscriminatorConfig::default();
        let d: Discriminator<f32> =
            build_patch_discriminator(&cfg, NormKind::Batch, &mut stream(3, &[tags::WEIGHT_INIT]))
                .unwrap();
        assert_eq!(d.stack.conv_count(), 6);
    }

    #[test]
    fn score_map_sizes_match_recurrence() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.score_map_hw(256, 256).unwrap(), (14, 14));
        assert_eq!(cfg.score_map_hw(64, 64).unwrap(), (2, 2));
        assert_eq!(cfg.score_map_hw(128, 128).unwrap(), (6, 6));
        assert_eq!(cfg.score_map_hw(192, 192).unwrap(), (10, 10));

        // the actual network agrees with the closed form
        let d: Discriminator<f64> =
            build_patch_discriminator(&cfg, NormKind::Instance, &mut stream(4, &[tags::WEIGHT_INIT]))
                .unwrap();
        for size in [64usize, 128] {
            let x = randn((1, 1, size, size), size as u64);
            let y = d.discriminate(&x).unwrap();
            let want = cfg.score_map_hw(size, size).unwrap();
            assert_eq!(y.dim(), (1, 1, want.0, want.1));
        }
    }

    #[test]
    fn receptive_field_is_142() {
        assert_eq!(DiscriminatorConfig::default().receptive_field(), 142);
    }

    #[test]
    fn too_small_input_is_an_error() {
        let cfg = DiscriminatorConfig::default();
        let d: Discriminator<f64> =
            build_patch_discriminator(&cfg, NormKind::Batch, &mut stream(5, &[tags::WEIGHT_INIT]))
                .unwrap();
        let x = randn((1, 1, 8, 8), 5);
        assert!(matches!(
            d.discriminate(&x),
            Err(NnError::TooSmall { .. })
        ));
        assert!(matches!(
            cfg.score_map_hw(8, 8),
            Err(NnError::TooSmall { .. })
        ));
    }

    #[test]
    fn leaky_negative_slope_is_exactly_point_two() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.leaky_slope, 0.2);
        // single-layer probe: identity-like tap, negative inputs scale by 0.2
        let layer: Layer<f64> = Layer::LeakyRelu { slope: 0.2 };
        let x = Array4::from_elem((1, 1, 2, 2), -3.0);
        let y = layer.forward_eval(&x).unwrap();
        for &v in y.iter() {
            assert_eq!(v, -3.0 * 0.2);
        }
    }

    #[test]
    fn toy_plan_gradients_match_finite_differences() {
        let cfg = DiscriminatorConfig {
            channel_plan: vec![(4, 2), (8, 2)],
            ..DiscriminatorConfig::default()
        };
        let mut d: Discriminator<f64> =
            build_patch_discriminator(&cfg, NormKind::Batch, &mut stream(6, &[tags::WEIGHT_INIT]))
                .unwrap();
        let x = randn((2, 1, 16, 16), 7);
        let dy = randn((2, 1, 3, 3), 8);
        let (y, cache) = d.forward_train(&x).unwrap();
        assert_eq!(y.dim(), (2, 1, 3, 3));
        let mut grads = d.zero_grads();
        let _ = d.backward(dy.clone(), &cache, Some(&mut grads[..]));

        let loss = |d: &Discriminator<f64>, x: &Array4<f64>| -> f64 {
            let mut d = d.clone();
            let (y, _) = d.forward_train(x).unwrap();
            (&y * &dy).sum()
        };
        let h = 1e-5;
        let n = d.param_array_count();
        let mut bad = 0;
        for pi in 0..n {
            let analytic = grads[pi].as_slice().unwrap()[0];
            let mut up_net = d.clone();
            let mut seen = 0;
            up_net.visit_params_mut(&mut |p| {
                if seen == pi {
                    p[0] += h;
                }
                seen += 1;
            });
            let up = loss(&up_net, &x);
            let mut dn_net = d.clone();
            seen = 0;
            dn_net.visit_params_mut(&mut |p| {
                if seen == pi {
                    p[0] -= h;
                }
                seen += 1;
            });
            let dn = loss(&dn_net, &x);
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            if rel > 1e-4 {
                bad += 1;
                eprintln!("param {pi}: fd={fd} analytic={analytic}");
            }
        }
        assert_eq!(bad, 0);
    }
}
