//! Residual two-level UNet (and a linear single-conv variant) with explicit
//! forward and backward passes.
//!
//! The network sees `z = (x - offset) / scale` and predicts a residual `r`;
//! the model output is `x + scale * r`. With the final convolution zeroed the
//! model is the identity, bit for bit.

use rand::distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::nn::layers::*;
use crate::rng;
use crate::search::reflect;
use crate::tensor::{Domain, Tensor};

pub const DEFAULT_WIDTH1: usize = 32;
pub const DEFAULT_WIDTH2: usize = 64;
pub const MIN_SPATIAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// conv3-ReLU x2 -> maxpool -> conv3-ReLU x2 -> nearest upsample ->
    /// concat with the first level -> conv3-ReLU x2 -> conv1.
    UNet {
        in_channels: usize,
        width1: usize,
        width2: usize,
    },
    /// One 3x3 convolution, no activation.
    LinearConv { in_channels: usize },
}

impl Architecture {
    pub fn unet(in_channels: usize) -> Self {
        Architecture::UNet {
            in_channels,
            width1: DEFAULT_WIDTH1,
            width2: DEFAULT_WIDTH2,
        }
    }

    pub fn in_channels(&self) -> usize {
        match *self {
            Architecture::UNet { in_channels, .. } | Architecture::LinearConv { in_channels } => {
                in_channels
            }
        }
    }

    pub fn convs(&self) -> Vec<ConvSpec> {
        let conv = |cin, cout, kernel| ConvSpec { cin, cout, kernel };
        match *self {
            Architecture::UNet {
                in_channels: c,
                width1: w1,
                width2: w2,
            } => vec![
                conv(c, w1, 3),
                conv(w1, w1, 3),
                conv(w1, w2, 3),
                conv(w2, w2, 3),
                conv(w2 + w1, w1, 3),
                conv(w1, w1, 3),
                conv(w1, c, 1),
            ],
            Architecture::LinearConv { in_channels: c } => vec![conv(c, c, 3)],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let layers: &[&str] = match self {
            Architecture::UNet { .. } => {
                &["enc1a", "enc1b", "enc2a", "enc2b", "dec1a", "dec1b", "out"]
            }
            Architecture::LinearConv { .. } => &["out"],
        };
        layers
            .iter()
            .flat_map(|l| [format!("{l}.weight"), format!("{l}.bias")])
            .collect()
    }

    /// `[cout, cin, k, k]` for weights, `[cout]` for biases.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.convs()
            .into_iter()
            .flat_map(|c| [vec![c.cout, c.cin, c.kernel, c.kernel], vec![c.cout]])
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Architecture::UNet {
                in_channels,
                width1,
                width2,
            } => in_channels > 0 && width1 > 0 && width2 > 0,
            Architecture::LinearConv { in_channels } => in_channels > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("zero width in {self:?}")))
        }
    }
}

/// Affine map from data units to network units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub offset: f32,
    pub scale: f32,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        offset: 0.0,
        scale: 1.0,
    };

    /// Unit-interval data passes through; Hounsfield data maps the
    /// [-160, 240] soft-tissue window onto [0, 1].
    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Hounsfield => Normalization {
                offset: -160.0,
                scale: 400.0,
            },
            Domain::UnitInterval | Domain::Raw => Self::IDENTITY,
        }
    }
}

/// Frozen ReLU gates and pooling choices of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub relu: Vec<Vec<bool>>,
    pub pool: Vec<u32>,
}

/// Activations kept by [`residual_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    arch: Architecture,
    height: usize,
    width: usize,
    padded: (usize, usize),
    cols: Vec<Vec<T>>,
    relu: Vec<Vec<bool>>,
    pool: Vec<u32>,
}

impl<T> ModelCache<T> {
    pub fn pattern(&self) -> Pattern {
        Pattern {
            relu: self.relu.clone(),
            pool: self.pool.clone(),
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

fn network_forward<T: Scalar>(
    arch: &Architecture,
    params: &[Vec<T>],
    z: &[T],
    h: usize,
    w: usize,
    frozen: Option<&Pattern>,
) -> (Vec<T>, Vec<Vec<T>>, Vec<Vec<bool>>, Vec<u32>) {
    let specs = arch.convs();
    let mut cols = Vec::with_capacity(specs.len());
    let mut relu = Vec::new();
    let gate = |v: &mut Vec<T>, relu: &mut Vec<Vec<bool>>| {
        let idx = relu.len();
        let mask = relu_forward(v, frozen.map(|p| p.relu[idx].as_slice()));
        relu.push(mask);
    };
    let conv = |i: usize, x: &[T], h: usize, w: usize, cols: &mut Vec<Vec<T>>| {
        let (out, c) = conv_forward(specs[i], &params[2 * i], &params[2 * i + 1], x, h, w);
        cols.push(c);
        out
    };
    match *arch {
        Architecture::LinearConv { .. } => {
            let r = conv(0, z, h, w, &mut cols);
            (r, cols, relu, Vec::new())
        }
        Architecture::UNet { width1, width2, .. } => {
            let (h2, w2) = (h / 2, w / 2);
            let mut a = conv(0, z, h, w, &mut cols);
            gate(&mut a, &mut relu);
            let mut e1 = conv(1, &a, h, w, &mut cols);
            gate(&mut e1, &mut relu);
            let (pooled, pool) =
                maxpool2_forward(&e1, width1, h, w, frozen.map(|p| p.pool.as_slice()));
            let mut b = conv(2, &pooled, h2, w2, &mut cols);
            gate(&mut b, &mut relu);
            let mut e2 = conv(3, &b, h2, w2, &mut cols);
            gate(&mut e2, &mut relu);
            let mut cat = upsample2_forward(&e2, width2, h2, w2);
            cat.extend_from_slice(&e1);
            let mut d = conv(4, &cat, h, w, &mut cols);
            gate(&mut d, &mut relu);
            let mut d2 = conv(5, &d, h, w, &mut cols);
            gate(&mut d2, &mut relu);
            let r = conv(6, &d2, h, w, &mut cols);
            (r, cols, relu, pool)
        }
    }
}

fn network_backward<T: Scalar>(
    arch: &Architecture,
    params: &[Vec<T>],
    cache: &ModelCache<T>,
    g_res: Vec<T>,
) -> (Vec<Vec<T>>, Vec<T>) {
    let specs = arch.convs();
    let (h, w) = cache.padded;
    let mut grads: Vec<Vec<T>> = vec![Vec::new(); 2 * specs.len()];
    let back = |i: usize, g: &[T], h: usize, w: usize, grads: &mut Vec<Vec<T>>| {
        let (dw, db, dx) = conv_backward(specs[i], &params[2 * i], &cache.cols[i], g, h, w, true);
        grads[2 * i] = dw;
        grads[2 * i + 1] = db;
        dx.expect("input gradient requested")
    };
    let dz = match *arch {
        Architecture::LinearConv { .. } => back(0, &g_res, h, w, &mut grads),
        Architecture::UNet { width1, width2, .. } => {
            let (h2, w2) = (h / 2, w / 2);
            let mut g = back(6, &g_res, h, w, &mut grads);
            relu_backward(&mut g, &cache.relu[5]);
            let mut g = back(5, &g, h, w, &mut grads);
            relu_backward(&mut g, &cache.relu[4]);
            let g_cat = back(4, &g, h, w, &mut grads);
            let (g_up, g_skip) = g_cat.split_at(width2 * h * w);
            let mut g = upsample2_backward(g_up, width2, h2, w2);
            relu_backward(&mut g, &cache.relu[3]);
            let mut g = back(3, &g, h2, w2, &mut grads);
            relu_backward(&mut g, &cache.relu[2]);
            let g_pool = back(2, &g, h2, w2, &mut grads);
            let mut g = maxpool2_backward(&g_pool, &cache.pool, width1 * h * w);
            for (a, &b) in g.iter_mut().zip(g_skip) {
                *a = *a + b;
            }
            relu_backward(&mut g, &cache.relu[1]);
            let mut g = back(1, &g, h, w, &mut grads);
            relu_backward(&mut g, &cache.relu[0]);
            back(0, &g, h, w, &mut grads)
        }
    };
    (grads, dz)
}

fn check_input(arch: &Architecture, x_len: usize, h: usize, w: usize) -> Result<()> {
    if h < MIN_SPATIAL || w < MIN_SPATIAL {
        return Err(Error::ShapeTooSmall(h, w));
    }
    if x_len != h * w * arch.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "input of {x_len} values is not {h}x{w}x{}",
            arch.in_channels()
        )));
    }
    Ok(())
}

/// Full model forward on an `h x w x C` (channel-last) buffer.
///
/// Odd sizes are reflect-padded to even for pooling and cropped back.
pub fn residual_forward<T: Scalar>(
    arch: &Architecture,
    norm: Normalization,
    params: &[Vec<T>],
    x: &[T],
    h: usize,
    w: usize,
    frozen: Option<&Pattern>,
) -> Result<(Vec<T>, ModelCache<T>)> {
    check_input(arch, x.len(), h, w)?;
    let c = arch.in_channels();
    let (ph, pw) = (h + h % 2, w + w % 2);
    let offset = T::from_f32(norm.offset);
    let scale = T::from_f32(norm.scale);
    let mut z = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize, w);
                z[ch * ph * pw + y * pw + xx] = (x[(sy * w + sx) * c + ch] - offset) / scale;
            }
        }
    }
    let (r, cols, relu, pool) = network_forward(arch, params, &z, ph, pw, frozen);
    let mut out = x.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let i = (y * w + xx) * c + ch;
                out[i] = out[i] + scale * r[ch * ph * pw + y * pw + xx];
            }
        }
    }
    let cache = ModelCache {
        arch: *arch,
        height: h,
        width: w,
        padded: (ph, pw),
        cols,
        relu,
        pool,
    };
    Ok((out, cache))
}

/// Parameter gradients and input gradient given `dL/d(output)`.
pub fn residual_backward<T: Scalar>(
    arch: &Architecture,
    norm: Normalization,
    params: &[Vec<T>],
    cache: &ModelCache<T>,
    grad_out: &[T],
) -> Result<(Vec<Vec<T>>, Vec<T>)> {
    if cache.arch != *arch {
        return Err(Error::ShapeMismatch(
            "forward cache belongs to another architecture".into(),
        ));
    }
    let c = arch.in_channels();
    let (h, w) = (cache.height, cache.width);
    let (ph, pw) = cache.padded;
    if grad_out.len() != h * w * c {
        return Err(Error::ShapeMismatch(format!(
            "output gradient of {} values for a {h}x{w}x{c} output",
            grad_out.len()
        )));
    }
    let scale = T::from_f32(norm.scale);
    let mut g_res = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                g_res[ch * ph * pw + y * pw + xx] = grad_out[(y * w + xx) * c + ch] * scale;
            }
        }
    }
    let (grads, dz) = network_backward(arch, params, cache, g_res);
    let mut dx = grad_out.to_vec();
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize, w);
                let i = (sy * w + sx) * c + ch;
                dx[i] = dx[i] + dz[ch * ph * pw + y * pw + xx] / scale;
            }
        }
    }
    Ok((grads, dx))
}

/// Trained (or freshly initialized) denoiser parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Architecture,
    norm: Normalization,
    params: Vec<Vec<f32>>,
}

pub type Gradients = Vec<Vec<f32>>;

impl DenoiserModel {
    /// He-uniform convolution kernels, zero biases and a zero output
    /// convolution, so a fresh model is the identity map.
    pub fn new(arch: Architecture, norm: Normalization, seed: u64) -> Result<Self> {
        arch.validate()?;
        let specs = arch.convs();
        let last = specs.len() - 1;
        let params = specs
            .iter()
            .enumerate()
            .flat_map(|(i, spec)| {
                let weight = if i == last {
                    vec![0.0; spec.weight_len()]
                } else {
                    he_uniform(spec, seed, i as u64)
                };
                [weight, vec![0.0; spec.cout]]
            })
            .collect();
        Ok(DenoiserModel { arch, norm, params })
    }

    pub fn zeros(arch: Architecture, norm: Normalization) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        Ok(DenoiserModel { arch, norm, params })
    }

    /// Every weight (including the output layer) He-uniform and every bias
    /// uniform in [-0.1, 0.1]; used to exercise all gradient paths.
    pub fn random(arch: Architecture, norm: Normalization, seed: u64) -> Result<Self> {
        arch.validate()?;
        let bias_dist = Uniform::new_inclusive(-0.1f32, 0.1).expect("valid range");
        let params = arch
            .convs()
            .iter()
            .enumerate()
            .flat_map(|(i, spec)| {
                let mut r = rng::stream(rng::mix(seed, 0xB1A5), i as u64);
                let bias = (0..spec.cout).map(|_| bias_dist.sample(&mut r)).collect();
                [he_uniform(spec, seed, i as u64), bias]
            })
            .collect();
        Ok(DenoiserModel { arch, norm, params })
    }

    pub fn from_params(
        arch: Architecture,
        norm: Normalization,
        params: Vec<Vec<f32>>,
    ) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|(s, p)| s.iter().product::<usize>() != p.len())
        {
            return Err(Error::ShapeMismatch(
                "parameters do not fit the architecture".into(),
            ));
        }
        Ok(DenoiserModel { arch, norm, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn params(&self) -> &[Vec<f32>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// All parameters concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<f32> {
        self.params.concat()
    }

    fn image_dims(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (h, w, c) = x.image_shape()?;
        if c != self.arch.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} channels, input has {c}",
                self.arch.in_channels()
            )));
        }
        if h < MIN_SPATIAL || w < MIN_SPATIAL {
            return Err(Error::ShapeTooSmall(h, w));
        }
        Ok((h, w))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ModelCache<f32>)> {
        let (h, w) = self.image_dims(x)?;
        let (out, cache) =
            residual_forward(&self.arch, self.norm, &self.params, x.data(), h, w, None)?;
        Ok((x.map_data(out)?, cache))
    }

    /// Gradients of a scalar loss with respect to every parameter, given
    /// `dL/d(output)` and the cache of the matching forward pass.
    pub fn backward(&self, cache: &ModelCache<f32>, grad_out: &Tensor) -> Result<Gradients> {
        Ok(residual_backward(&self.arch, self.norm, &self.params, cache, grad_out.data())?.0)
    }

    /// Runs the model on raw `h x w x C` data and returns the loss and its
    /// parameter gradients; the loss is taken in network units,
    /// i.e. on `(pred - target) / scale`.
    pub(crate) fn loss_and_grads(
        &self,
        input: &[f32],
        target: &[f32],
        excluded: Option<&[bool]>,
        h: usize,
        w: usize,
        kind: crate::volume::LossKind,
    ) -> Result<(f64, Gradients)> {
        let (out, cache) =
            residual_forward(&self.arch, self.norm, &self.params, input, h, w, None)?;
        let inv = 1.0 / self.norm.scale;
        let pred_n: Vec<f32> = out.iter().map(|v| v * inv).collect();
        let target_n: Vec<f32> = target.iter().map(|v| v * inv).collect();
        let c = self.arch.in_channels();
        let (loss, grad_n) =
            crate::volume::loss_and_grad(&pred_n, &target_n, excluded, c, kind, true)?;
        let grad_out: Vec<f32> = grad_n.into_iter().map(|g| g * inv).collect();
        let (grads, _) = residual_backward(&self.arch, self.norm, &self.params, &cache, &grad_out)?;
        Ok((loss, grads))
    }
}

fn he_uniform(spec: &ConvSpec, seed: u64, layer: u64) -> Vec<f32> {
    let bound = (6.0 / spec.fan_in() as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
    let mut r = rng::stream(seed, layer);
    (0..spec.weight_len())
        .map(|_| dist.sample(&mut r))
        .collect()
}

/// Forward/backward pairing with an explicit cache slot: `backward` consumes
/// the activations of the latest `forward`.
pub struct Session<'a> {
    model: &'a DenoiserModel,
    cache: Option<ModelCache<f32>>,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a DenoiserModel) -> Self {
        Session { model, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, cache) = self.model.forward_cached(x)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Gradients> {
        let cache = self.cache.take().ok_or(Error::MissingForwardCache)?;
        self.model.backward(&cache, grad_out)
    }
}
