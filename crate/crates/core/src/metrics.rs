//! Image-quality metrics and the non-local means baseline.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::search::{reflect, Padded};
use crate::tensor::{Domain, Tensor};

/// Display window width used as PSNR peak for Hounsfield data (window [-160, 240]).
pub const HU_DISPLAY_PEAK: f64 = 400.0;

/// Peak value conventionally used for tensors of `domain`.
pub fn default_peak(domain: Domain) -> f64 {
    match domain {
        Domain::Hounsfield => HU_DISPLAY_PEAK,
        Domain::UnitInterval | Domain::Raw => 1.0,
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_dims(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "peak must be > 0, got {peak}"
        )));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filter with reflect padding over one `h x w` plane.
fn gaussian_filter(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + reflect(x as isize + i as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + i as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.check_same_dims(b)?;
    let (h, w, c) = a.image_shape()?;
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a
            .data()
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b
            .data()
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|&v| v as f64)
            .collect();
        let prod =
            |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = gaussian_filter(&pa, h, w, &kernel);
        let mu_b = gaussian_filter(&pb, h, w, &kernel);
        let e_aa = gaussian_filter(&prod(&pa, &pa), h, w, &kernel);
        let e_bb = gaussian_filter(&prod(&pb, &pb), h, w, &kernel);
        let e_ab = gaussian_filter(&prod(&pa, &pb), h, w, &kernel);
        let mut sum = 0.0;
        for i in 0..h * w {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += sum / (h * w) as f64;
    }
    Ok(total / c as f64)
}

/// Non-local means parameters. `h` is in image-value units and scales the
/// per-element mean squared patch difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlmParams {
    pub h: f32,
    pub patch_radius: usize,
    pub search_radius: usize,
}

impl NlmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || self.search_radius == 0 || self.search_radius < self.patch_radius {
            return Err(Error::InvalidParameter(format!(
                "invalid NLM parameters {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for NlmParams {
    fn default() -> Self {
        NlmParams {
            h: 0.1,
            patch_radius: 3,
            search_radius: 10,
        }
    }
}

/// Normalized weights of every in-bounds pixel of the search window of `(u, v)`.
pub fn nlm_weights(
    img: &Tensor,
    p: &NlmParams,
    u: usize,
    v: usize,
) -> Result<Vec<((usize, usize), f64)>> {
    p.validate()?;
    let (h, w, c) = img.image_shape()?;
    if u >= h || v >= w {
        return Err(Error::OutOfBounds(u, v));
    }
    let padded = Padded::new(img.data(), h, w, c, p.patch_radius);
    let mut out = raw_weights(&padded, h, w, c, p, u, v);
    let total: f64 = out.iter().map(|(_, wt)| wt).sum();
    out.iter_mut().for_each(|(_, wt)| *wt /= total);
    Ok(out)
}

fn raw_weights(
    padded: &Padded,
    h: usize,
    w: usize,
    c: usize,
    p: &NlmParams,
    u: usize,
    v: usize,
) -> Vec<((usize, usize), f64)> {
    let s = 2 * p.patch_radius + 1;
    let norm = (s * s * c) as f64;
    let h2 = (p.h as f64).powi(2);
    let (y0, y1) = (
        u.saturating_sub(p.search_radius),
        (u + p.search_radius).min(h - 1),
    );
    let (x0, x1) = (
        v.saturating_sub(p.search_radius),
        (v + p.search_radius).min(w - 1),
    );
    let mut out = Vec::with_capacity((y1 - y0 + 1) * (x1 - x0 + 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = padded.patch_sq_dist((u, v), (y, x)) / norm;
            out.push(((y, x), (-d2 / h2).exp()));
        }
    }
    out
}

/// Weighted average of window pixels, weights `exp(-d^2 / h^2)` with `d^2`
/// the mean squared difference between the two patches.
pub fn nlm_denoise(img: &Tensor, p: &NlmParams) -> Result<Tensor> {
    p.validate()?;
    let (h, w, c) = img.image_shape()?;
    let padded = Padded::new(img.data(), h, w, c, p.patch_radius);
    let src = img.data();
    let out: Vec<f32> = (0..h * w)
        .into_par_iter()
        .flat_map_iter(|px| {
            let (u, v) = (px / w, px % w);
            let weights = raw_weights(&padded, h, w, c, p, u, v);
            let total: f64 = weights.iter().map(|(_, wt)| wt).sum();
            let mut acc = vec![0.0f64; c];
            for ((y, x), wt) in weights {
                let base = (y * w + x) * c;
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a += wt * src[base + ch] as f64;
                }
            }
            acc.into_iter().map(move |a| (a / total) as f32)
        })
        .collect();
    img.map_data(out)
}
