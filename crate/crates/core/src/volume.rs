//! Similar-slice pairing for CT volumes.
//!
//! A reference slice `i` is paired with a slice drawn from `[i - k, i + k]`.
//! Pixels whose local mean difference between the two slices exceeds a
//! threshold are flagged dissimilar and left out of the loss.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::search::reflect;
use crate::tensor::{Domain, Tensor};

/// Draws a partner slice uniformly from the clamped window around `i`,
/// never `i` itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceSampler {
    num_slices: usize,
    k: usize,
    seed: u64,
}

impl SliceSampler {
    pub fn new(num_slices: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k >= num_slices {
            return Err(Error::InvalidParameter(format!(
                "slice range k must satisfy 1 <= k < {num_slices}, got {k}"
            )));
        }
        Ok(SliceSampler {
            num_slices,
            k,
            seed,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.num_slices
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Candidate partners of `i`, ascending.
    pub fn candidates(&self, i: usize) -> Vec<usize> {
        let lo = i.saturating_sub(self.k);
        let hi = (i + self.k).min(self.num_slices - 1);
        (lo..=hi).filter(|&j| j != i).collect()
    }

    /// The `draw`-th partner sample for slice `i`; a pure function of `(seed, i, draw)`.
    pub fn sample(&self, i: usize, draw: u64) -> Result<usize> {
        if i >= self.num_slices {
            return Err(Error::IndexOutOfRange {
                index: i,
                k: self.num_slices,
            });
        }
        let lo = i.saturating_sub(self.k);
        let hi = (i + self.k).min(self.num_slices - 1);
        // hi - lo >= 1 because k >= 1 and num_slices >= 2.
        let span = hi - lo;
        let mut r = rng::stream(rng::mix(self.seed, i as u64), draw);
        let pick = lo + r.random_range(0..span);
        Ok(if pick >= i { pick + 1 } else { pick })
    }
}

/// Per-pixel local mean difference between two slices:
/// `d(u, v) = (1/C) sum_c | mean over the s x s window of (x_i - x_j)(., ., c) |`,
/// with reflect padding.
pub fn distance_map(x_i: &Tensor, x_j: &Tensor, s: usize) -> Result<Tensor> {
    x_i.check_same_dims(x_j)?;
    if s == 0 || s.is_multiple_of(2) {
        return Err(Error::EvenPatchSize(s));
    }
    let (h, w, c) = x_i.image_shape()?;
    let r = (s / 2) as isize;
    let diff: Vec<f64> = x_i
        .data()
        .iter()
        .zip(x_j.data())
        .map(|(a, b)| *a as f64 - *b as f64)
        .collect();

    // Separable box sum: rows first, then columns.
    let mut rows = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for dx in -r..=r {
                let sx = reflect(x as isize + dx, w);
                for ch in 0..c {
                    rows[(y * w + x) * c + ch] += diff[(y * w + sx) * c + ch];
                }
            }
        }
    }
    let norm = 1.0 / (s * s) as f64;
    let mut out = vec![0.0f32; h * w];
    let mut acc = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for dy in -r..=r {
                let sy = reflect(y as isize + dy, h);
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a += rows[(sy * w + x) * c + ch];
                }
            }
            let d = acc.iter().map(|a| (a * norm).abs()).sum::<f64>() / c as f64;
            out[y * w + x] = d as f32;
        }
    }
    Tensor::new(vec![h, w], out, x_i.domain())
}

/// Binary map of dissimilar pixels: `true` where `d > threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarMask {
    height: usize,
    width: usize,
    threshold: f32,
    excluded: Vec<bool>,
}

impl DissimilarMask {
    pub fn from_flags(
        height: usize,
        width: usize,
        threshold: f32,
        excluded: Vec<bool>,
    ) -> Result<Self> {
        if excluded.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "mask of {height}x{width} needs {} flags, got {}",
                height * width,
                excluded.len()
            )));
        }
        Ok(DissimilarMask {
            height,
            width,
            threshold,
            excluded,
        })
    }

    /// All pixels included.
    pub fn none(height: usize, width: usize) -> Self {
        DissimilarMask {
            height,
            width,
            threshold: f32::INFINITY,
            excluded: vec![false; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn excluded(&self) -> &[bool] {
        &self.excluded
    }

    pub fn excluded_count(&self) -> usize {
        self.excluded.iter().filter(|&&e| e).count()
    }

    /// 0/1 tensor, 1 marking excluded pixels.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .excluded
            .iter()
            .map(|&e| if e { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.height, self.width], data, Domain::Raw).expect("mask shape is valid")
    }

    pub fn from_tensor(t: &Tensor, threshold: f32) -> Result<Self> {
        let (h, w, c) = t.image_shape()?;
        if c != 1 {
            return Err(Error::InvalidShape("mask must be single-channel".into()));
        }
        Self::from_flags(
            h,
            w,
            threshold,
            t.data().iter().map(|&v| v != 0.0).collect(),
        )
    }
}

pub fn dissimilar_mask(d: &Tensor, d_th: f32) -> Result<DissimilarMask> {
    if !(d_th >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold must be >= 0, got {d_th}"
        )));
    }
    let (h, w, c) = d.image_shape()?;
    if c != 1 {
        return Err(Error::InvalidShape(
            "distance map must be single-channel".into(),
        ));
    }
    DissimilarMask::from_flags(h, w, d_th, d.data().iter().map(|&v| v > d_th).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    L1,
}

/// Mean squared (or absolute) error over the included pixels, every channel
/// of an included pixel counting once.
pub fn masked_loss(
    pred: &Tensor,
    target: &Tensor,
    mask: &DissimilarMask,
    kind: LossKind,
) -> Result<f32> {
    pred.check_same_dims(target)?;
    let (h, w, c) = pred.image_shape()?;
    if (h, w) != mask.shape() {
        return Err(Error::DimMismatch {
            left: vec![h, w],
            right: vec![mask.height, mask.width],
        });
    }
    let (loss, _) = loss_and_grad(
        pred.data(),
        target.data(),
        Some(&mask.excluded),
        c,
        kind,
        false,
    )?;
    Ok(loss as f32)
}

/// Masked loss over flat `H x W x C` buffers, optionally with its gradient
/// with respect to `pred`. L1 uses `sign(0) = 0`.
pub(crate) fn loss_and_grad(
    pred: &[f32],
    target: &[f32],
    excluded: Option<&[bool]>,
    channels: usize,
    kind: LossKind,
    want_grad: bool,
) -> Result<(f64, Vec<f32>)> {
    let pixels = pred.len() / channels;
    let included = excluded.map_or(pixels, |m| m.iter().filter(|&&e| !e).count());
    if included == 0 {
        return Err(Error::AllPixelsExcluded);
    }
    let count = (included * channels) as f64;
    let mut grad = if want_grad {
        vec![0.0f32; pred.len()]
    } else {
        Vec::new()
    };
    let mut total = 0.0f64;
    for p in 0..pixels {
        if excluded.is_some_and(|m| m[p]) {
            continue;
        }
        for i in p * channels..(p + 1) * channels {
            let e = pred[i] as f64 - target[i] as f64;
            match kind {
                LossKind::Mse => {
                    total += e * e;
                    if want_grad {
                        grad[i] = (2.0 * e / count) as f32;
                    }
                }
                LossKind::L1 => {
                    total += e.abs();
                    if want_grad {
                        let sign = if e > 0.0 {
                            1.0
                        } else if e < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        grad[i] = (sign / count) as f32;
                    }
                }
            }
        }
    }
    Ok((total / count, grad))
}
