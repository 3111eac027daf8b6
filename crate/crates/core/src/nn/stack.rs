//! Layer vocabulary and sequential stacks with hand-rolled backprop.
//!
//! Caches live outside the layers, so one network can run forward several
//! times inside a single objective (the cycle objective applies each
//! generator twice) and every pass keeps its own backward state. Parameter
//! gradients accumulate across passes.

use ndarray::{Array4, ArrayD, IxDyn};

use crate::nn::conv::{Conv2d, ConvTranspose2d};
use crate::nn::norm::{Norm2d, NormCache, NormKind};
use crate::nn::{Batch, NnError};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub enum Layer<F: Scalar> {
    Conv(Conv2d<F>),
    ConvT(ConvTranspose2d<F>),
    Norm(Norm2d<F>),
    Relu,
    LeakyRelu { slope: F },
    Tanh,
    ReflectPad { pad: usize },
    Residual(Stack<F>),
}

#[derive(Debug)]
pub enum LayerCache<F: Scalar> {
    Conv { x: Batch<F> },
    ConvT { x: Batch<F> },
    Norm(NormCache<F>),
    Relu { pos: Array4<bool> },
    LeakyRelu { neg: Array4<bool> },
    Tanh { y: Batch<F> },
    ReflectPad { in_hw: (usize, usize) },
    Residual(StackCache<F>),
}

fn reflect(t: isize, n: usize) -> usize {
    // PyTorch-style reflection without edge repetition; requires pad < n.
    let n = n as isize;
    let r = if t < 0 {
        -t
    } else if t >= n {
        2 * n - 2 - t
    } else {
        t
    };
    r as usize
}

fn reflect_pad<F: Scalar>(x: &Batch<F>, pad: usize) -> Result<Batch<F>, NnError> {
    let (n, c, h, w) = x.dim();
    if pad >= h || pad >= w {
        return Err(NnError::ReflectTooSmall { pad, h, w });
    }
    let mut y = Array4::<F>::zeros((n, c, h + 2 * pad, w + 2 * pad));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..h + 2 * pad {
                let sy = reflect(i as isize - pad as isize, h);
                for j in 0..w + 2 * pad {
                    let sx = reflect(j as isize - pad as isize, w);
                    y[[b, ci, i, j]] = x[[b, ci, sy, sx]];
                }
            }
        }
    }
    Ok(y)
}

fn reflect_pad_backward<F: Scalar>(dy: &Batch<F>, pad: usize, in_hw: (usize, usize)) -> Batch<F> {
    let (n, c, _, _) = dy.dim();
    let (h, w) = in_hw;
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..h + 2 * pad {
                let sy = reflect(i as isize - pad as isize, h);
                for j in 0..w + 2 * pad {
                    let sx = reflect(j as isize - pad as isize, w);
                    dx[[b, ci, sy, sx]] += dy[[b, ci, i, j]];
                }
            }
        }
    }
    dx
}

impl<F: Scalar> Layer<F> {
    pub fn forward_train(&mut self, x: &Batch<F>) -> Result<(Batch<F>, LayerCache<F>), NnError> {
        match self {
            Layer::Conv(conv) => {
                let y = conv.forward(x)?;
                Ok((y, LayerCache::Conv { x: x.clone() }))
            }
            Layer::ConvT(tconv) => {
                let y = tconv.forward(x)?;
                Ok((y, LayerCache::ConvT { x: x.clone() }))
            }
            Layer::Norm(norm) => {
                let (y, cache) = norm.forward_train(x);
                Ok((y, LayerCache::Norm(cache)))
            }
            Layer::Relu => {
                let pos = x.mapv(|v| v > F::zero());
                let y = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
                Ok((y, LayerCache::Relu { pos }))
            }
            Layer::LeakyRelu { slope } => {
                let s = *slope;
                let neg = x.mapv(|v| v < F::zero());
                let y = x.mapv(|v| if v < F::zero() { v * s } else { v });
                Ok((y, LayerCache::LeakyRelu { neg }))
            }
            Layer::Tanh => {
                let y = x.mapv(|v| v.tanh());
                Ok((y.clone(), LayerCache::Tanh { y }))
            }
            Layer::ReflectPad { pad } => {
                let (_, _, h, w) = x.dim();
                let y = reflect_pad(x, *pad)?;
                Ok((y, LayerCache::ReflectPad { in_hw: (h, w) }))
            }
            Layer::Residual(stack) => {
                let (inner, cache) = stack.forward_train(x)?;
                Ok((x + &inner, LayerCache::Residual(cache)))
            }
        }
    }

    pub fn forward_eval(&self, x: &Batch<F>) -> Result<Batch<F>, NnError> {
        match self {
            Layer::Conv(conv) => conv.forward(x),
            Layer::ConvT(tconv) => tconv.forward(x),
            Layer::Norm(norm) => Ok(norm.forward_eval(x)),
            Layer::Relu => Ok(x.mapv(|v| if v > F::zero() { v } else { F::zero() })),
            Layer::LeakyRelu { slope } => {
                let s = *slope;
                Ok(x.mapv(|v| if v < F::zero() { v * s } else { v }))
            }
            Layer::Tanh => Ok(x.mapv(|v| v.tanh())),
            Layer::ReflectPad { pad } => reflect_pad(x, *pad),
            Layer::Residual(stack) => {
                let inner = stack.forward_eval(x)?;
                Ok(x + &inner)
            }
        }
    }

    pub fn backward(
        &self,
        dy: Batch<F>,
        cache: &LayerCache<F>,
        grads: Option<&mut [ArrayD<F>]>,
    ) -> Batch<F> {
        match (self, cache) {
            (Layer::Conv(conv), LayerCache::Conv { x }) => conv.backward(&dy, x, grads),
            (Layer::ConvT(tconv), LayerCache::ConvT { x }) => tconv.backward(&dy, x, grads),
            (Layer::Norm(norm), LayerCache::Norm(cache)) => norm.backward(&dy, cache, grads),
            (Layer::Relu, LayerCache::Relu { pos }) => {
                let mut dx = dy;
                ndarray::Zip::from(&mut dx).and(pos).for_each(|d, &p| {
                    if !p {
                        *d = F::zero();
                    }
                });
                dx
            }
            (Layer::LeakyRelu { slope }, LayerCache::LeakyRelu { neg }) => {
                let s = *slope;
                let mut dx = dy;
                ndarray::Zip::from(&mut dx).and(neg).for_each(|d, &n| {
                    if n {
                        *d = *d * s;
                    }
                });
                dx
            }
            (Layer::Tanh, LayerCache::Tanh { y }) => {
                let mut dx = dy;
                ndarray::Zip::from(&mut dx).and(y).for_each(|d, &t| {
                    *d = *d * (F::one() - t * t);
                });
                dx
            }
            (Layer::ReflectPad { pad }, LayerCache::ReflectPad { in_hw }) => {
                reflect_pad_backward(&dy, *pad, *in_hw)
            }
            (Layer::Residual(stack), LayerCache::Residual(cache)) => {
                let dinner = stack.backward(dy.clone(), cache, grads);
                dy + &dinner
            }
            _ => unreachable!("cache variant does not match layer"),
        }
    }

    /// Number of trainable parameter arrays this layer contributes.
    pub fn param_array_count(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::ConvT(_) | Layer::Norm(_) => 2,
            Layer::Residual(stack) => stack.param_array_count(),
            _ => 0,
        }
    }

    fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a [F])) {
        match self {
            Layer::Conv(c) => {
                f(c.weight.as_slice().unwrap());
                f(c.bias.as_slice().unwrap());
            }
            Layer::ConvT(c) => {
                f(c.weight.as_slice().unwrap());
                f(c.bias.as_slice().unwrap());
            }
            Layer::Norm(n) => {
                f(n.gamma.as_slice().unwrap());
                f(n.beta.as_slice().unwrap());
            }
            Layer::Residual(stack) => stack.visit_params(f),
            _ => {}
        }
    }

    fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut [F])) {
        match self {
            Layer::Conv(c) => {
                f(c.weight.as_slice_mut().unwrap());
                f(c.bias.as_slice_mut().unwrap());
            }
            Layer::ConvT(c) => {
                f(c.weight.as_slice_mut().unwrap());
                f(c.bias.as_slice_mut().unwrap());
            }
            Layer::Norm(n) => {
                f(n.gamma.as_slice_mut().unwrap());
                f(n.beta.as_slice_mut().unwrap());
            }
            Layer::Residual(stack) => stack.visit_params_mut(f),
            _ => {}
        }
    }

    fn param_shapes(&self, out: &mut Vec<Vec<usize>>) {
        match self {
            Layer::Conv(c) => {
                out.push(c.weight.shape().to_vec());
                out.push(c.bias.shape().to_vec());
            }
            Layer::ConvT(c) => {
                out.push(c.weight.shape().to_vec());
                out.push(c.bias.shape().to_vec());
            }
            Layer::Norm(n) => {
                out.push(n.gamma.shape().to_vec());
                out.push(n.beta.shape().to_vec());
            }
            Layer::Residual(stack) => {
                for layer in &stack.layers {
                    layer.param_shapes(out);
                }
            }
            _ => {}
        }
    }

    fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Vec<usize>, Vec<F>)>) {
        let grab = |name: &str, shape: &[usize], data: &[F]| {
            (format!("{prefix}{name}"), shape.to_vec(), data.to_vec())
        };
        match self {
            Layer::Conv(c) => {
                out.push(grab("w", c.weight.shape(), c.weight.as_slice().unwrap()));
                out.push(grab("b", c.bias.shape(), c.bias.as_slice().unwrap()));
            }
            Layer::ConvT(c) => {
                out.push(grab("w", c.weight.shape(), c.weight.as_slice().unwrap()));
                out.push(grab("b", c.bias.shape(), c.bias.as_slice().unwrap()));
            }
            Layer::Norm(n) => {
                out.push(grab("gamma", n.gamma.shape(), n.gamma.as_slice().unwrap()));
                out.push(grab("beta", n.beta.shape(), n.beta.as_slice().unwrap()));
                out.push(grab(
                    "run_mean",
                    n.running_mean.shape(),
                    n.running_mean.as_slice().unwrap(),
                ));
                out.push(grab(
                    "run_var",
                    n.running_var.shape(),
                    n.running_var.as_slice().unwrap(),
                ));
            }
            Layer::Residual(stack) => stack.collect_tensors(&format!("{prefix}res."), out),
            _ => {}
        }
    }

    fn load_tensors(
        &mut self,
        prefix: &str,
        fetch: &mut impl FnMut(&str, &[usize]) -> Result<Vec<F>, String>,
    ) -> Result<(), String> {
        fn fill<F: Scalar, D: ndarray::Dimension>(
            target: &mut ndarray::Array<F, D>,
            name: &str,
            fetch: &mut impl FnMut(&str, &[usize]) -> Result<Vec<F>, String>,
        ) -> Result<(), String> {
            let data = fetch(name, target.shape())?;
            target
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&data);
            Ok(())
        }
        match self {
            Layer::Conv(c) => {
                fill(&mut c.weight, &format!("{prefix}w"), fetch)?;
                fill(&mut c.bias, &format!("{prefix}b"), fetch)?;
            }
            Layer::ConvT(c) => {
                fill(&mut c.weight, &format!("{prefix}w"), fetch)?;
                fill(&mut c.bias, &format!("{prefix}b"), fetch)?;
            }
            Layer::Norm(n) => {
                fill(&mut n.gamma, &format!("{prefix}gamma"), fetch)?;
                fill(&mut n.beta, &format!("{prefix}beta"), fetch)?;
                fill(&mut n.running_mean, &format!("{prefix}run_mean"), fetch)?;
                fill(&mut n.running_var, &format!("{prefix}run_var"), fetch)?;
            }
            Layer::Residual(stack) => stack.load_tensors(&format!("{prefix}res."), fetch)?,
            _ => {}
        }
        Ok(())
    }
}

/// A plain sequential stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Stack<F: Scalar> {
    pub layers: Vec<Layer<F>>,
}

#[derive(Debug)]
pub struct StackCache<F: Scalar>(pub Vec<LayerCache<F>>);

impl<F: Scalar> Stack<F> {
    pub fn new(layers: Vec<Layer<F>>) -> Self {
        Stack { layers }
    }

    pub fn forward_train(&mut self, x: &Batch<F>) -> Result<(Batch<F>, StackCache<F>), NnError> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (next, cache) = layer.forward_train(&cur)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, StackCache(caches)))
    }

    pub fn forward_eval(&self, x: &Batch<F>) -> Result<Batch<F>, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward_eval(&cur)?;
        }
        Ok(cur)
    }

    /// Walks layers in reverse; `grads`, when given, must have exactly
    /// [`Self::param_array_count`] entries in forward visit order and is
    /// accumulated into.
    pub fn backward(
        &self,
        dy: Batch<F>,
        cache: &StackCache<F>,
        mut grads: Option<&mut [ArrayD<F>]>,
    ) -> Batch<F> {
        if let Some(g) = &grads {
            assert_eq!(g.len(), self.param_array_count(), "gradient slot mismatch");
        }
        let mut end = grads.as_ref().map(|g| g.len()).unwrap_or(0);
        let mut d = dy;
        for (layer, lc) in self.layers.iter().zip(cache.0.iter()).rev() {
            let cnt = layer.param_array_count();
            d = match &mut grads {
                Some(g) => {
                    end -= cnt;
                    layer.backward(d, lc, Some(&mut g[end..end + cnt]))
                }
                None => layer.backward(d, lc, None),
            };
        }
        d
    }

    pub fn param_array_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_array_count()).sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.param_shapes(&mut out);
        }
        out
    }

    pub fn zero_grads(&self) -> Vec<ArrayD<F>> {
        self.param_shapes()
            .into_iter()
            .map(|s| ArrayD::zeros(IxDyn(&s)))
            .collect()
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a [F])) {
        for layer in &self.layers {
            layer.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut [F])) {
        for layer in &mut self.layers {
            layer.visit_params_mut(f);
        }
    }

    /// Trainable parameters plus norm running buffers, with stable names.
    pub fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Vec<usize>, Vec<F>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_tensors(&format!("{prefix}{i}."), out);
        }
    }

    pub fn load_tensors(
        &mut self,
        prefix: &str,
        fetch: &mut impl FnMut(&str, &[usize]) -> Result<Vec<F>, String>,
    ) -> Result<(), String> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.load_tensors(&format!("{prefix}{i}."), fetch)?;
        }
        Ok(())
    }

    /// Total number of convolution layers (plain + transposed), recursing
    /// through residual blocks.
    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(_) | Layer::ConvT(_) => 1,
                Layer::Residual(s) => s.conv_count(),
                _ => 0,
            })
            .sum()
    }

    /// Whether a norm layer appears before the first convolution-after-the-
    /// first; used by tests asserting the PatchGAN "no norm on the first
    /// layer" rule.
    pub fn first_norm_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Norm(_)))
    }
}

/// Weight initialization: all convolution kernels drawn from a zero-mean
/// Gaussian with the given standard deviation, biases zero, norm scale one.
pub fn gaussian_conv<F: Scalar, R: rand::RngCore>(
    out_ch: usize,
    in_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    std: f64,
    rng: &mut R,
) -> Conv2d<F> {
    let mut weight = Array4::<F>::zeros((out_ch, in_ch, k, k));
    weight.mapv_inplace(|_| F::cast(crate::rng::standard_normal(rng) * std));
    Conv2d {
        weight,
        bias: ndarray::Array1::zeros(out_ch),
        stride,
        pad,
    }
}

pub fn gaussian_conv_t<F: Scalar, R: rand::RngCore>(
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    std: f64,
    rng: &mut R,
) -> ConvTranspose2d<F> {
    let mut weight = Array4::<F>::zeros((in_ch, out_ch, k, k));
    weight.mapv_inplace(|_| F::cast(crate::rng::standard_normal(rng) * std));
    ConvTranspose2d {
        weight,
        bias: ndarray::Array1::zeros(out_ch),
        stride,
        pad,
        out_pad,
    }
}

pub fn norm_layer<F: Scalar>(kind: NormKind, channels: usize) -> Layer<F> {
    Layer::Norm(Norm2d::new(kind, channels))
}
