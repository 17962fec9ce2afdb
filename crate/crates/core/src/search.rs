//! Per-pixel k-nearest-neighbour patch search and similar-image pairing.
//!
//! For every reference pixel the whole image is scanned and the `k` pixels
//! whose surrounding `s x s` patches are closest in Euclidean distance are
//! kept (the reference itself excluded). The reference plus its neighbours
//! form the similar set from which training images are assembled pixel by
//! pixel.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{write_file, ByteReader, Tensor};

pub const NEIGHBORS_MAGIC: &[u8; 4] = b"N2SN";

/// Mirror `i` into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`), periodic for offsets larger than the image.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Image copy with a reflected border of `radius` pixels on every side.
pub(crate) struct Padded {
    pub(crate) data: Vec<f32>,
    pub(crate) pw: usize,
    pub(crate) channels: usize,
    pub(crate) radius: usize,
}

impl Padded {
    pub(crate) fn new(data: &[f32], h: usize, w: usize, c: usize, radius: usize) -> Self {
        let ph = h + 2 * radius;
        let pw = w + 2 * radius;
        let mut out = Vec::with_capacity(ph * pw * c);
        for y in 0..ph {
            let sy = reflect(y as isize - radius as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - radius as isize, w);
                let base = (sy * w + sx) * c;
                out.extend_from_slice(&data[base..base + c]);
            }
        }
        Padded {
            data: out,
            pw,
            channels: c,
            radius,
        }
    }

    /// Squared L2 distance between the patches centred at image pixels `a` and `b`.
    #[inline]
    pub(crate) fn patch_sq_dist(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let s = 2 * self.radius + 1;
        let row_len = s * self.channels;
        let mut acc = 0.0f64;
        for dy in 0..s {
            let ra = ((a.0 + dy) * self.pw + a.1) * self.channels;
            let rb = ((b.0 + dy) * self.pw + b.1) * self.channels;
            let pa = &self.data[ra..ra + row_len];
            let pb = &self.data[rb..rb + row_len];
            for (x, y) in pa.iter().zip(pb) {
                let d = *x as f64 - *y as f64;
                acc += d * d;
            }
        }
        acc
    }
}

fn check_patch_size(s: usize) -> Result<usize> {
    if s == 0 || s.is_multiple_of(2) {
        return Err(Error::EvenPatchSize(s));
    }
    Ok(s / 2)
}

/// Euclidean distance between the `s x s` (x C) patches centred at `a` and
/// `b`, with reflect padding at the borders. Coordinates are `(row, col)`.
pub fn patch_distance(img: &Tensor, a: (usize, usize), b: (usize, usize), s: usize) -> Result<f32> {
    let radius = check_patch_size(s)?;
    let (h, w, c) = img.image_shape()?;
    for &(u, v) in &[a, b] {
        if u >= h || v >= w {
            return Err(Error::OutOfBounds(u, v));
        }
    }
    let padded = Padded::new(img.data(), h, w, c, radius);
    Ok(padded.patch_sq_dist(a, b).sqrt() as f32)
}

/// k nearest similar pixels for every pixel of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestImages {
    height: usize,
    width: usize,
    channels: usize,
    k: usize,
    patch_size: usize,
    /// `height * width * k` (row, col) pairs, nearest first per pixel.
    coords: Vec<(u32, u32)>,
    dists: Vec<f32>,
}

impl NearestImages {
    /// Validates and wraps a precomputed neighbour table.
    pub fn from_parts(
        (height, width, channels): (usize, usize, usize),
        k: usize,
        patch_size: usize,
        coords: Vec<(u32, u32)>,
        dists: Vec<f32>,
    ) -> Result<Self> {
        let n = height * width * k;
        if k == 0 || coords.len() != n || dists.len() != n {
            return Err(Error::InvalidShape(format!(
                "neighbour table needs {n} entries, got {} coords / {} dists",
                coords.len(),
                dists.len()
            )));
        }
        check_patch_size(patch_size)?;
        for (p, chunk) in coords.chunks(k).enumerate() {
            let me = ((p / width) as u32, (p % width) as u32);
            for &(u, v) in chunk {
                if u as usize >= height || v as usize >= width {
                    return Err(Error::OutOfBounds(u as usize, v as usize));
                }
                if (u, v) == me {
                    return Err(Error::InvalidShape(format!(
                        "pixel ({}, {}) lists itself as a neighbour",
                        me.0, me.1
                    )));
                }
            }
        }
        Ok(NearestImages {
            height,
            width,
            channels,
            k,
            patch_size,
            coords,
            dists,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Neighbours of pixel `(u, v)`, nearest first.
    pub fn neighbors(&self, u: usize, v: usize) -> &[(u32, u32)] {
        let p = u * self.width + v;
        &self.coords[p * self.k..(p + 1) * self.k]
    }

    pub fn distances(&self, u: usize, v: usize) -> &[f32] {
        let p = u * self.width + v;
        &self.dists[p * self.k..(p + 1) * self.k]
    }

    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }

    pub fn dists(&self) -> &[f32] {
        &self.dists
    }

    fn check_image(&self, img: &Tensor) -> Result<()> {
        let (h, w, c) = img.image_shape()?;
        if (h, w, c) != (self.height, self.width, self.channels) {
            return Err(Error::DimMismatch {
                left: vec![self.height, self.width, self.channels],
                right: vec![h, w, c],
            });
        }
        Ok(())
    }

    /// Serializes to the `N2SN` format:
    /// magic, ndim u8, dims (H, W, C) u32 each, k u32, s u32, then per pixel
    /// `k x (row u32, col u32, dist f32)`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(26 + self.coords.len() * 12);
        out.extend_from_slice(NEIGHBORS_MAGIC);
        out.push(3);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.patch_size as u32).to_le_bytes());
        for (&(u, v), &d) in self.coords.iter().zip(&self.dists) {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != NEIGHBORS_MAGIC {
            return Err(Error::BadMagic {
                found: magic.to_vec(),
            });
        }
        if r.u8()? != 3 {
            return Err(Error::Malformed("neighbour file must have 3 dims".into()));
        }
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let k = r.u32()? as usize;
        let s = r.u32()? as usize;
        let n = h * w * k;
        if r.remaining() != n * 12 {
            return Err(Error::TruncatedPayload {
                expected: n * 12,
                found: r.remaining(),
            });
        }
        let mut coords = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        for _ in 0..n {
            coords.push((r.u32()?, r.u32()?));
            dists.push(r.f32()?);
        }
        Self::from_parts((h, w, c), k, s, coords, dists)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[inline]
fn candidate_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact k-NN over all pixels; ties go to the earlier pixel in row-major order.
pub fn knn_similar_pixels(img: &Tensor, k: usize, s: usize) -> Result<NearestImages> {
    let radius = check_patch_size(s)?;
    let (h, w, c) = img.image_shape()?;
    let n = h * w;
    if k == 0 || k >= n {
        return Err(Error::KTooLarge { k, pixels: n });
    }
    let padded = Padded::new(img.data(), h, w, c, radius);
    let per_pixel: Vec<Vec<(f64, u32)>> = (0..n)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n),
            |cands, p| {
                let a = (p / w, p % w);
                cands.clear();
                for q in (0..n).filter(|&q| q != p) {
                    cands.push((padded.patch_sq_dist(a, (q / w, q % w)), q as u32));
                }
                if k < cands.len() {
                    cands.select_nth_unstable_by(k - 1, candidate_order);
                    cands.truncate(k);
                }
                cands.sort_unstable_by(candidate_order);
                cands.clone()
            },
        )
        .collect();

    let mut coords = Vec::with_capacity(n * k);
    let mut dists = Vec::with_capacity(n * k);
    for best in per_pixel {
        for (d2, q) in best {
            coords.push(((q as usize / w) as u32, (q as usize % w) as u32));
            dists.push(d2.sqrt() as f32);
        }
    }
    Ok(NearestImages {
        height: h,
        width: w,
        channels: c,
        k,
        patch_size: s,
        coords,
        dists,
    })
}

/// The `j`-th nearest image (1-based): every pixel replaced by its `j`-th neighbour.
pub fn materialize_nearest_image(n: &NearestImages, img: &Tensor, j: usize) -> Result<Tensor> {
    n.check_image(img)?;
    if j == 0 || j > n.k {
        return Err(Error::IndexOutOfRange { index: j, k: n.k });
    }
    let c = n.channels;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for p in 0..n.height * n.width {
        let (u, v) = n.coords[p * n.k + j - 1];
        let base = (u as usize * n.width + v as usize) * c;
        out.extend_from_slice(&src[base..base + c]);
    }
    img.map_data(out)
}

/// How an (input, target) pair is drawn from a similar set of `k + 1` images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingMethod {
    /// The noisy image itself as input, a pixel-wise random similar image as target.
    OriginalToRandom,
    RandomToOriginal,
    /// Two fixed nearest images (1-based indices), no randomization.
    SortedPair(usize, usize),
    /// Both sides drawn pixel-wise and independently from the similar set.
    RandomToRandom,
}

impl PairingMethod {
    pub fn validate(&self, k: usize) -> Result<()> {
        if let PairingMethod::SortedPair(a, b) = *self {
            for j in [a, b] {
                if j == 0 || j > k {
                    return Err(Error::IndexOutOfRange { index: j, k });
                }
            }
            if a == b {
                return Err(Error::InvalidParameter(format!(
                    "sorted pairing needs two distinct nearest images, got {a} twice"
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for PairingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PairingMethod::OriginalToRandom => f.write_str("original-random"),
            PairingMethod::RandomToOriginal => f.write_str("random-original"),
            PairingMethod::RandomToRandom => f.write_str("random-random"),
            PairingMethod::SortedPair(a, b) => write!(f, "sorted:{a},{b}"),
        }
    }
}

/// Accepts the names printed by `Display`, the numeric aliases `1`, `2`
/// and `4`, and `sorted:J1,J2`.
impl std::str::FromStr for PairingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "original-random" | "1" => PairingMethod::OriginalToRandom,
            "random-original" | "2" => PairingMethod::RandomToOriginal,
            "random-random" | "4" => PairingMethod::RandomToRandom,
            other => {
                let spec = other.strip_prefix("sorted:").ok_or_else(|| {
                    Error::InvalidParameter(format!("unknown pairing method `{other}`"))
                })?;
                let parsed: Option<Vec<usize>> =
                    spec.split(',').map(|v| v.trim().parse().ok()).collect();
                match parsed.as_deref() {
                    Some(&[j1, j2]) => PairingMethod::SortedPair(j1, j2),
                    _ => {
                        return Err(Error::InvalidParameter(format!(
                            "sorted pairing needs two indices, got `{spec}`"
                        )))
                    }
                }
            }
        })
    }
}

/// Replaces every pixel with a uniformly chosen member of its similar set
/// (the pixel itself or one of its `k` neighbours).
fn random_similar_image(n: &NearestImages, img: &Tensor, rng: &mut rng::Rng) -> Result<Tensor> {
    let c = n.channels;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for p in 0..n.height * n.width {
        let pick = rng.random_range(0..=n.k);
        let q = if pick == 0 {
            p
        } else {
            let (u, v) = n.coords[p * n.k + pick - 1];
            u as usize * n.width + v as usize
        };
        out.extend_from_slice(&src[q * c..(q + 1) * c]);
    }
    img.map_data(out)
}

/// Builds one (input, target) pair; a pure function of its arguments.
pub fn construct_similar_pair(
    n: &NearestImages,
    img: &Tensor,
    method: PairingMethod,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    n.check_image(img)?;
    method.validate(n.k)?;
    let mut first = rng::stream(seed, 0);
    let mut second = rng::stream(seed, 1);
    Ok(match method {
        PairingMethod::OriginalToRandom => (img.clone(), random_similar_image(n, img, &mut first)?),
        PairingMethod::RandomToOriginal => (random_similar_image(n, img, &mut first)?, img.clone()),
        PairingMethod::SortedPair(a, b) => (
            materialize_nearest_image(n, img, a)?,
            materialize_nearest_image(n, img, b)?,
        ),
        PairingMethod::RandomToRandom => (
            random_similar_image(n, img, &mut first)?,
            random_similar_image(n, img, &mut second)?,
        ),
    })
}

/// Number of neighbour coordinates shared by `a` and `b`, summed over pixels.
pub fn neighbor_overlap(a: &NearestImages, b: &NearestImages) -> Result<usize> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::DimMismatch {
            left: vec![a.height, a.width],
            right: vec![b.height, b.width],
        });
    }
    let mut shared = 0;
    for p in 0..a.height * a.width {
        let na = &a.coords[p * a.k..(p + 1) * a.k];
        let nb = &b.coords[p * b.k..(p + 1) * b.k];
        shared += na.iter().filter(|x| nb.contains(x)).count();
    }
    Ok(shared)
}
