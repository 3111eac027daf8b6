//! The translation generator: a residual auto-encoder main branch plus a
//! single-convolution structure shortcut from the raw input, fused by
//! sum-then-tanh.
//!
//! Layer vocabulary (base filters `b`, `r` residual blocks):
//!
//! ```text
//! main:      7x7 s1 conv(b) - norm - relu          (reflect pad 3)
//!            3x3 s2 conv(2b) - norm - relu
//!            3x3 s2 conv(4b) - norm - relu
//!            r x [ 3x3 conv(4b)-norm-relu-3x3 conv(4b)-norm, skip add ]
//!            3x3 s1/2 convT(2b) - norm - relu
//!            3x3 s1/2 convT(b) - norm - relu
//!            7x7 s1 conv(out)                      (no norm, no activation)
//! structure: 7x7 s1 conv(out), no norm, no activation  (reflect pad 3)
//! fusion:    tanh(main + structure)
//! ```
//!
//! The tanh lives only at the fusion point, so the main branch's final
//! convolution emits raw values that the shortcut can push around.

use ndarray::ArrayD;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::nn::{
    gaussian_conv, gaussian_conv_t, norm_layer, Batch, Layer, NnError, NormKind, Stack, StackCache,
};
use crate::scalar::Scalar;

/// All convolution weights are drawn from N(0, 0.02^2).
pub const INIT_STD: f64 = 0.02;

/// Spatial divisibility required by the two stride-2 downsamplings.
pub const SIZE_DIVISOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    Reflect,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_filters: usize,
    pub n_res_blocks: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: NormKind,
    pub padding_mode: PaddingMode,
    /// ablation switch: without the shortcut the fusion is tanh(main) only
    pub structure_connection: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_filters: 32,
            n_res_blocks: 9,
            in_channels: 1,
            out_channels: 1,
            norm: NormKind::Batch,
            padding_mode: PaddingMode::Reflect,
            structure_connection: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("base_filters must be >= 1")]
    BaseFilters,
    #[error("channel counts must be >= 1")]
    Channels,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.base_filters == 0 {
            return Err(ConfigError::BaseFilters);
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(ConfigError::Channels);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Generator<F: Scalar> {
    pub main: Stack<F>,
    /// shortcut branch; absent when the config disables it
    pub structure: Option<Stack<F>>,
    pub config: GeneratorConfig,
}

#[derive(Debug)]
pub struct GeneratorCache<F: Scalar> {
    main: StackCache<F>,
    structure: Option<StackCache<F>>,
    /// fused tanh output, kept for the backward pass
    y: Batch<F>,
}

/// Build a generator with Gaussian(0, 0.02) weights, zero biases, and
/// identity norm affine parameters. Two builds from identical streams yield
/// identical parameters.
pub fn build_generator<F: Scalar, R: RngCore>(
    config: &GeneratorConfig,
    rng: &mut R,
) -> Result<Generator<F>, ConfigError> {
    config.validate()?;
    let b = config.base_filters;
    let norm = config.norm;
    let mut layers: Vec<Layer<F>> = Vec::new();

    layers.push(Layer::ReflectPad { pad: 3 });
    layers.push(Layer::Conv(gaussian_conv(
        b,
        config.in_channels,
        7,
        1,
        0,
        INIT_STD,
        rng,
    )));
    layers.push(norm_layer(norm, b));
    layers.push(Layer::Relu);

    layers.push(Layer::Conv(gaussian_conv(2 * b, b, 3, 2, 1, INIT_STD, rng)));
    layers.push(norm_layer(norm, 2 * b));
    layers.push(Layer::Relu);

    layers.push(Layer::Conv(gaussian_conv(4 * b, 2 * b, 3, 2, 1, INIT_STD, rng)));
    layers.push(norm_layer(norm, 4 * b));
    layers.push(Layer::Relu);

    for _ in 0..config.n_res_blocks {
        let inner = Stack::new(vec![
            Layer::ReflectPad { pad: 1 },
            Layer::Conv(gaussian_conv(4 * b, 4 * b, 3, 1, 0, INIT_STD, rng)),
            norm_layer(norm, 4 * b),
            Layer::Relu,
            Layer::ReflectPad { pad: 1 },
            Layer::Conv(gaussian_conv(4 * b, 4 * b, 3, 1, 0, INIT_STD, rng)),
            norm_layer(norm, 4 * b),
        ]);
        layers.push(Layer::Residual(inner));
    }

    layers.push(Layer::ConvT(gaussian_conv_t(
        4 * b,
        2 * b,
        3,
        2,
        1,
        1,
        INIT_STD,
        rng,
    )));
    layers.push(norm_layer(norm, 2 * b));
    layers.push(Layer::Relu);

    layers.push(Layer::ConvT(gaussian_conv_t(2 * b, b, 3, 2, 1, 1, INIT_STD, rng)));
    layers.push(norm_layer(norm, b));
    layers.push(Layer::Relu);

    layers.push(Layer::ReflectPad { pad: 3 });
    layers.push(Layer::Conv(gaussian_conv(
        config.out_channels,
        b,
        7,
        1,
        0,
        INIT_STD,
        rng,
    )));

    let structure = config.structure_connection.then(|| {
        Stack::new(vec![
            Layer::ReflectPad { pad: 3 },
            Layer::Conv(gaussian_conv(
                config.out_channels,
                config.in_channels,
                7,
                1,
                0,
                INIT_STD,
                rng,
            )),
        ])
    });

    Ok(Generator {
        main: Stack::new(layers),
        structure,
        config: config.clone(),
    })
}

impl<F: Scalar> Generator<F> {
    fn check_input(&self, x: &Batch<F>) -> Result<(), NnError> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(NnError::ChannelMismatch {
                got: c,
                expected: self.config.in_channels,
            });
        }
        if h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
            return Err(NnError::NotDivisible {
                h,
                w,
                div: SIZE_DIVISOR,
            });
        }
        Ok(())
    }

    /// Eval-mode translation: frozen statistics, no caches.
    pub fn translate(&self, x: &Batch<F>) -> Result<Batch<F>, NnError> {
        self.check_input(x)?;
        let mut pre = self.main.forward_eval(x)?;
        if let Some(structure) = &self.structure {
            pre = pre + &structure.forward_eval(x)?;
        }
        Ok(pre.mapv(|v| v.tanh()))
    }

    /// Train-mode forward, keeping everything the backward pass needs.
    pub fn forward_train(&mut self, x: &Batch<F>) -> Result<(Batch<F>, GeneratorCache<F>), NnError> {
        self.check_input(x)?;
        let (mut pre, main_cache) = self.main.forward_train(x)?;
        let structure_cache = match &mut self.structure {
            Some(structure) => {
                let (s, cache) = structure.forward_train(x)?;
                pre = pre + &s;
                Some(cache)
            }
            None => None,
        };
        let y = pre.mapv(|v| v.tanh());
        Ok((
            y.clone(),
            GeneratorCache {
                main: main_cache,
                structure: structure_cache,
                y,
            },
        ))
    }

    /// Input gradient; parameter gradients accumulate into `grads` when
    /// given (layout from [`Generator::zero_grads`]).
    pub fn backward(
        &self,
        dy: &Batch<F>,
        cache: &GeneratorCache<F>,
        grads: Option<&mut Vec<ArrayD<F>>>,
    ) -> Batch<F> {
        let mut dpre = dy.clone();
        ndarray::Zip::from(&mut dpre)
            .and(&cache.y)
            .for_each(|d, &t| *d = *d * (F::one() - t * t));
        let n_main = self.main.param_array_count();
        match (&self.structure, &cache.structure) {
            (Some(structure), Some(structure_cache)) => match grads {
                Some(gs) => {
                    let (gm, gstruct) = gs.split_at_mut(n_main);
                    let dx_main = self.main.backward(dpre.clone(), &cache.main, Some(gm));
                    let dx_struct = structure.backward(dpre, structure_cache, Some(gstruct));
                    dx_main + &dx_struct
                }
                None => {
                    let dx_main = self.main.backward(dpre.clone(), &cache.main, None);
                    let dx_struct = structure.backward(dpre, structure_cache, None);
                    dx_main + &dx_struct
                }
            },
            _ => match grads {
                Some(gs) => self.main.backward(dpre, &cache.main, Some(gs)),
                None => self.main.backward(dpre, &cache.main, None),
            },
        }
    }

    pub fn param_array_count(&self) -> usize {
        self.main.param_array_count()
            + self.structure.as_ref().map_or(0, Stack::param_array_count)
    }

    pub fn zero_grads(&self) -> Vec<ArrayD<F>> {
        let mut g = self.main.zero_grads();
        if let Some(structure) = &self.structure {
            g.extend(structure.zero_grads());
        }
        g
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a [F])) {
        self.main.visit_params(f);
        if let Some(structure) = &self.structure {
            structure.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut [F])) {
        self.main.visit_params_mut(f);
        if let Some(structure) = &mut self.structure {
            structure.visit_params_mut(f);
        }
    }

    pub fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Vec<usize>, Vec<F>)>) {
        self.main.collect_tensors(&format!("{prefix}main."), out);
        if let Some(structure) = &self.structure {
            structure.collect_tensors(&format!("{prefix}structure."), out);
        }
    }

    pub fn load_tensors(
        &mut self,
        prefix: &str,
        fetch: &mut impl FnMut(&str, &[usize]) -> Result<Vec<F>, String>,
    ) -> Result<(), String> {
        self.main.load_tensors(&format!("{prefix}main."), fetch)?;
        if let Some(structure) = &mut self.structure {
            structure.load_tensors(&format!("{prefix}structure."), fetch)?;
        }
        Ok(())
    }

    /// Convolution layers in the whole network (main + structure).
    pub fn conv_count(&self) -> usize {
        self.main.conv_count() + self.structure.as_ref().map_or(0, Stack::conv_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use crate::rng::{standard_normal, stream, tags};
    use ndarray::Array4;

    fn toy_config() -> GeneratorConfig {
        GeneratorConfig {
            base_filters: 8,
            n_res_blocks: 2,
            norm: NormKind::Batch,
            ..GeneratorConfig::default()
        }
    }

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = stream(seed, &[96]);
        let mut a = Array4::<f64>::zeros(shape);
        a.mapv_inplace(|_| standard_normal(&mut rng) * 0.4);
        a.mapv_inplace(|v| v.clamp(-0.99, 0.99));
        a
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let g1: Generator<f32> =
            build_generator(&toy_config(), &mut stream(3, &[tags::WEIGHT_INIT, 0])).unwrap();
        let g2: Generator<f32> =
            build_generator(&toy_config(), &mut stream(3, &[tags::WEIGHT_INIT, 0])).unwrap();
        let mut t1 = Vec::new();
        let mut t2 = Vec::new();
        g1.collect_tensors("g.", &mut t1);
        g2.collect_tensors("g.", &mut t2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn stem_weight_sample_variance_matches_init_std() {
        // full-size stem: 32 x 1 x 7 x 7 = 1568 draws from N(0, 0.02^2)
        let g: Generator<f64> = build_generator(
            &GeneratorConfig::default(),
            &mut stream(4, &[tags::WEIGHT_INIT, 1]),
        )
        .unwrap();
        let stem = match &g.main.layers[1] {
            Layer::Conv(c) => &c.weight,
            other => panic!("expected stem conv, got {other:?}"),
        };
        assert_eq!(stem.len(), 1568);
        let mean = stem.iter().sum::<f64>() / stem.len() as f64;
        let var = stem.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (stem.len() - 1) as f64;
        assert!(
            (0.0003..=0.0005).contains(&var),
            "sample variance {var} outside the 3-sigma band around 4e-4"
        );
    }

    #[test]
    fn default_config_has_25_convolutions() {
        let g: Generator<f32> = build_generator(
            &GeneratorConfig::default(),
            &mut stream(5, &[tags::WEIGHT_INIT, 2]),
        )
        .unwrap();
        // 1 stem + 2 down + 18 residual + 2 up + 1 output + 1 structure
        assert_eq!(g.main.conv_count(), 24);
        assert_eq!(g.structure.as_ref().unwrap().conv_count(), 1);
        assert_eq!(g.conv_count(), 25);
    }

    #[test]
    fn translate_preserves_spatial_size() {
        let g: Generator<f64> =
            build_generator(&toy_config(), &mut stream(6, &[tags::WEIGHT_INIT, 3])).unwrap();
        for (h, w) in [(64, 64), (64, 128), (256, 256), (192, 64)] {
            let x = randn((1, 1, h, w), h as u64 + w as u64);
            let y = g.translate(&x).unwrap();
            assert_eq!(y.dim(), (1, 1, h, w));
        }
    }

    #[test]
    fn indivisible_size_is_a_shape_error() {
        let g: Generator<f64> =
            build_generator(&toy_config(), &mut stream(7, &[tags::WEIGHT_INIT, 4])).unwrap();
        let x = randn((1, 1, 66, 64), 8);
        match g.translate(&x) {
            Err(NnError::NotDivisible { div, .. }) => assert_eq!(div, 4),
            other => panic!("expected divisibility error, got {other:?}"),
        }
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let g: Generator<f64> =
            build_generator(&toy_config(), &mut stream(8, &[tags::WEIGHT_INIT, 5])).unwrap();
        let x = randn((2, 1, 32, 32), 9);
        let y = g.translate(&x).unwrap();
        for &v in y.iter() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn forced_fusion_reduces_to_tanh_of_input() {
        // zero the main branch's output conv and make the structure conv a
        // Dirac tap: the fusion formula forces y = tanh(x).
        let mut g: Generator<f64> =
            build_generator(&toy_config(), &mut stream(9, &[tags::WEIGHT_INIT, 6])).unwrap();
        let last = g.main.layers.len() - 1;
        if let Layer::Conv(c) = &mut g.main.layers[last] {
            c.weight.fill(0.0);
            c.bias.fill(0.0);
        } else {
            panic!("expected output conv last");
        }
        let structure = g.structure.as_mut().unwrap();
        if let Layer::Conv(c) = &mut structure.layers[1] {
            c.weight.fill(0.0);
            c.weight[[0, 0, 3, 3]] = 1.0; // center tap of the 7x7 kernel
            c.bias.fill(0.0);
        } else {
            panic!("expected structure conv");
        }
        let x = randn((1, 1, 16, 16), 10);
        let y = g.translate(&x).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert_eq!(*a, b.tanh());
        }
    }

    #[test]
    fn toy_64x64_config_keeps_size() {
        let cfg = GeneratorConfig {
            base_filters: 8,
            n_res_blocks: 2,
            ..GeneratorConfig::default()
        };
        let mut g: Generator<f64> =
            build_generator(&cfg, &mut stream(10, &[tags::WEIGHT_INIT, 7])).unwrap();
        let x = randn((2, 1, 64, 64), 11);
        let (y, _) = g.forward_train(&x).unwrap();
        assert_eq!(y.dim(), (2, 1, 64, 64));
    }

    #[test]
    fn shift_equivariance_away_from_borders() {
        // eval mode, batch statistics frozen at their init values
        let g: Generator<f64> =
            build_generator(&toy_config(), &mut stream(12, &[tags::WEIGHT_INIT, 8])).unwrap();
        let base = randn((1, 1, 64, 64), 13);
        let mut shifted = Array4::<f64>::zeros((1, 1, 64, 64));
        for i in 0..64 {
            for j in 0..64 {
                shifted[[0, 0, i, j]] = base[[0, 0, (i + 60) % 64, (j + 60) % 64]];
            }
        }
        let y0 = g.translate(&base).unwrap();
        let y1 = g.translate(&shifted).unwrap();
        let mut worst = 0.0f64;
        for i in 16..48 {
            for j in 16..48 {
                let d = (y1[[0, 0, i, j]] - y0[[0, 0, i - 4, j - 4]]).abs();
                worst = worst.max(d);
            }
        }
        assert!(worst < 1e-5, "worst interior shift error {worst}");
    }

    /// Central-difference check of a smooth scalar loss through the whole
    /// generator (train mode), every parameter array sampled. Step 1e-5:
    /// larger steps perturb the 0.02-scale weights by whole percents and
    /// truncation error alone exceeds the 1e-4 relative tolerance.
    #[test]
    fn scalar_loss_gradients_match_finite_differences() {
        for norm in [NormKind::Batch, NormKind::Instance] {
            let cfg = GeneratorConfig {
                base_filters: 4,
                n_res_blocks: 1,
                norm,
                ..GeneratorConfig::default()
            };
            let g: Generator<f64> =
                build_generator(&cfg, &mut stream(20, &[tags::WEIGHT_INIT, 9])).unwrap();
            let x = randn((2, 1, 8, 8), 21);
            let weight_map = randn((2, 1, 8, 8), 22);
            let loss = |g: &Generator<f64>| -> f64 {
                let mut g2 = g.clone();
                let (y, _) = g2.forward_train(&x).unwrap();
                (&y * &weight_map).sum()
            };
            let mut g2 = g.clone();
            let (_, cache) = g2.forward_train(&x).unwrap();
            let mut grads = g.zero_grads();
            let _ = g.backward(&weight_map, &cache, Some(&mut grads));

            let h = 1e-5;
            let mut srng = stream(23, &[norm as u64]);
            let mut checked = 0usize;
            let mut passed = 0usize;
            for (ai, grad) in grads.iter().enumerate() {
                let len = grad.len();
                for _ in 0..3.min(len) {
                    let coord = crate::rng::uniform_usize(&mut srng, 0, len - 1);
                    let analytic = grad.as_slice().unwrap()[coord];
                    let eval = |d: f64| {
                        let mut gp = g.clone();
                        let mut seen = 0usize;
                        gp.visit_params_mut(&mut |p: &mut [f64]| {
                            if seen == ai {
                                p[coord] += d;
                            }
                            seen += 1;
                        });
                        loss(&gp)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    checked += 1;
                    if (fd - analytic).abs() <= 1e-7 + 1e-4 * fd.abs().max(analytic.abs()) {
                        passed += 1;
                    }
                }
            }
            assert!(
                passed as f64 >= 0.99 * checked as f64,
                "{norm:?}: {passed}/{checked}"
            );
        }
    }

    #[test]
    fn ablated_generator_has_no_shortcut_branch() {
        let cfg = GeneratorConfig {
            base_filters: 4,
            n_res_blocks: 1,
            structure_connection: false,
            ..GeneratorConfig::default()
        };
        let mut g: Generator<f64> =
            build_generator(&cfg, &mut stream(30, &[tags::WEIGHT_INIT, 30])).unwrap();
        assert!(g.structure.is_none());
        let x = randn((1, 1, 16, 16), 31);
        let y = g.translate(&x).unwrap();
        assert_eq!(y.dim(), (1, 1, 16, 16));
        let (yt, cache) = g.forward_train(&x).unwrap();
        let mut grads = g.zero_grads();
        let _ = g.backward(&yt, &cache, Some(&mut grads));
        assert_eq!(grads.len(), g.main.param_array_count());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = GeneratorConfig {
            base_filters: 0,
            ..GeneratorConfig::default()
        };
        assert!(build_generator::<f32, _>(&cfg, &mut stream(1, &[0])).is_err());
    }
}
