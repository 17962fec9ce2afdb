//! Dense f32 tensors plus the `N2ST` binary format and 8/16-bit PGM interop.
//!
//! `N2ST` layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "N2ST"
//! version u32      1
//! dtype   u8       0 = f32
//! ndim    u8       1..=4
//! dims    ndim x u32
//! domain  u8       0 = unit interval, 1 = Hounsfield, 2 = raw
//! payload product(dims) x f32 LE, row-major, last dim fastest
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"N2ST";
pub const TENSOR_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
pub const MAX_ORDER: usize = 4;

/// Value domain of the stored samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    /// Natural images normalized to `[0, 1]`.
    UnitInterval,
    /// CT intensities in Hounsfield units, stored unscaled.
    Hounsfield,
    Raw,
}

impl Domain {
    pub fn code(self) -> u8 {
        match self {
            Domain::UnitInterval => 0,
            Domain::Hounsfield => 1,
            Domain::Raw => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Domain::UnitInterval),
            1 => Ok(Domain::Hounsfield),
            2 => Ok(Domain::Raw),
            other => Err(Error::Malformed(format!("unknown domain code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AxisLabel {
    Height,
    Width,
    Channel,
    Slice,
}

/// Row-major f32 tensor of order 1 to 4.
///
/// Immutable once built; transformations return new tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    domain: Domain,
    labels: Vec<AxisLabel>,
}

fn default_labels(order: usize) -> Vec<AxisLabel> {
    use AxisLabel::*;
    match order {
        1 => vec![Width],
        2 => vec![Height, Width],
        3 => vec![Slice, Height, Width],
        _ => vec![Slice, Height, Width, Channel],
    }
}

impl Tensor {
    /// Builds a tensor with the default axis labels for its order:
    /// `[W]`, `[H, W]`, `[S, H, W]`, `[S, H, W, C]`.
    pub fn new(dims: Vec<usize>, data: Vec<f32>, domain: Domain) -> Result<Self> {
        let labels = default_labels(dims.len());
        Self::with_labels(dims, data, domain, labels)
    }

    pub fn with_labels(
        dims: Vec<usize>,
        data: Vec<f32>,
        domain: Domain,
        labels: Vec<AxisLabel>,
    ) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_ORDER {
            return Err(Error::InvalidShape(format!(
                "tensor order must be 1..={MAX_ORDER}, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "zero-sized dimension in {dims:?}"
            )));
        }
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::InvalidShape(format!(
                "dims {dims:?} need {count} values, got {}",
                data.len()
            )));
        }
        if labels.len() != dims.len() {
            return Err(Error::InvalidShape(format!(
                "{} axis labels for {} dims",
                labels.len(),
                dims.len()
            )));
        }
        if domain == Domain::UnitInterval && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape(
                "non-finite value in unit-interval tensor".into(),
            ));
        }
        Ok(Tensor {
            dims,
            data,
            domain,
            labels,
        })
    }

    pub fn filled(dims: Vec<usize>, value: f32, domain: Domain) -> Result<Self> {
        let count = dims.iter().product();
        Self::new(dims, vec![value; count], domain)
    }

    /// An `H x W` image when `channels == 1`, otherwise `H x W x C`.
    pub fn image(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        domain: Domain,
    ) -> Result<Self> {
        if channels == 1 {
            Self::new(vec![height, width], data, domain)
        } else {
            use AxisLabel::*;
            Self::with_labels(
                vec![height, width, channels],
                data,
                domain,
                vec![Height, Width, Channel],
            )
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn labels(&self) -> &[AxisLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn relabel(mut self, labels: Vec<AxisLabel>) -> Result<Self> {
        if labels.len() != self.dims.len() {
            return Err(Error::InvalidShape(format!(
                "{} axis labels for {} dims",
                labels.len(),
                self.dims.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    /// Same dims, labels and domain, new values.
    pub fn map_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::with_labels(self.dims.clone(), data, self.domain, self.labels.clone())
    }

    /// `(height, width, channels)` when this tensor is a single 2D image.
    pub fn image_shape(&self) -> Result<(usize, usize, usize)> {
        use AxisLabel::*;
        match (self.dims.as_slice(), self.labels.as_slice()) {
            ([h, w], [Height, Width]) => Ok((*h, *w, 1)),
            ([h, w, c], [Height, Width, Channel]) => Ok((*h, *w, *c)),
            _ => Err(Error::InvalidShape(format!(
                "expected an HxW or HxWxC image, got dims {:?} labelled {:?}",
                self.dims, self.labels
            ))),
        }
    }

    /// Number of slices when this tensor is a `S x H x W` or `S x H x W x C` volume.
    pub fn volume_shape(&self) -> Result<(usize, usize, usize, usize)> {
        use AxisLabel::*;
        match (self.dims.as_slice(), self.labels.as_slice()) {
            ([s, h, w], [Slice, Height, Width]) => Ok((*s, *h, *w, 1)),
            ([s, h, w, c], [Slice, Height, Width, Channel]) => Ok((*s, *h, *w, *c)),
            _ => Err(Error::InvalidShape(format!(
                "expected an SxHxW or SxHxWxC volume, got dims {:?} labelled {:?}",
                self.dims, self.labels
            ))),
        }
    }

    /// Slice `index` of a volume as a standalone image.
    pub fn slice(&self, index: usize) -> Result<Tensor> {
        let (s, h, w, c) = self.volume_shape()?;
        if index >= s {
            return Err(Error::IndexOutOfRange { index, k: s });
        }
        let plane = h * w * c;
        let data = self.data[index * plane..(index + 1) * plane].to_vec();
        Tensor::image(h, w, c, data, self.domain)
    }

    /// Stacks equally shaped images into a volume.
    pub fn stack(slices: &[Tensor]) -> Result<Tensor> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero slices".into()))?;
        let (h, w, c) = first.image_shape()?;
        let mut data = Vec::with_capacity(slices.len() * first.len());
        for s in slices {
            if s.image_shape()? != (h, w, c) {
                return Err(Error::DimMismatch {
                    left: first.dims.clone(),
                    right: s.dims.clone(),
                });
            }
            data.extend_from_slice(&s.data);
        }
        if c == 1 {
            Tensor::new(vec![slices.len(), h, w], data, first.domain)
        } else {
            Tensor::new(vec![slices.len(), h, w, c], data, first.domain)
        }
    }

    pub fn check_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                left: self.dims.clone(),
                right: other.dims.clone(),
            });
        }
        Ok(())
    }

    /// Serializes to `N2ST` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.domain.code());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one `N2ST` record from the front of `bytes`, returning the
    /// tensor and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::BadMagic {
                found: magic.to_vec(),
            });
        }
        let version = r.u32()?;
        if version != TENSOR_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let domain = Domain::from_code(r.u8()?)?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed("dims overflow".into()))?;
        let payload_len = count * 4;
        let remaining = r.remaining();
        if remaining < payload_len {
            return Err(Error::TruncatedPayload {
                expected: payload_len,
                found: remaining,
            });
        }
        let data = r
            .take(payload_len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(dims, data, domain)?;
        Ok((t, r.pos))
    }
}

/// Minimal little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn advance(&mut self, n: usize) {
        self.pos += n;
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedPayload {
                expected: n,
                found: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads an `N2ST` tensor or a binary (P5) PGM image, picked by magic bytes.
///
/// PGM samples are mapped to `[0, 1]` by dividing by the header's maxval.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(TENSOR_MAGIC) {
        let (t, used) = Tensor::from_bytes(&bytes)?;
        if used != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after tensor payload",
                bytes.len() - used
            )));
        }
        Ok(t)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else {
        Err(Error::BadMagic {
            found: bytes.iter().take(4).copied().collect(),
        })
    }
}

/// Writes `t` as `N2ST`. Output bytes depend only on the tensor.
pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &t.to_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Parses the P5 header, returning `(width, height, maxval, payload offset)`.
fn pgm_header(bytes: &[u8]) -> Result<(usize, usize, u32, usize)> {
    // Tokens: magic, width, height, maxval; '#' starts a comment. Exactly one
    // whitespace byte separates maxval from the raster.
    let mut tokens = Vec::with_capacity(4);
    let mut i = 0;
    while tokens.len() < 4 && i < bytes.len() {
        match bytes[i] {
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push(&bytes[start..i]);
            }
        }
    }
    if tokens.len() < 4 || i >= bytes.len() {
        return Err(Error::Malformed("incomplete PGM header".into()));
    }
    let num = |t: &[u8]| -> Result<u32> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| Error::Malformed("non-numeric PGM header field".into()))
    };
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Malformed(format!(
            "PGM maxval {maxval} out of range"
        )));
    }
    Ok((w as usize, h as usize, maxval, i + 1))
}

fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, maxval, offset) = pgm_header(bytes)?;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let expected = w * h * sample_bytes;
    let raster = &bytes[offset..];
    if raster.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: raster.len(),
        });
    }
    let scale = maxval as f32;
    let data: Vec<f32> = if sample_bytes == 1 {
        raster[..expected]
            .iter()
            .map(|&v| v as f32 / scale)
            .collect()
    } else {
        // 16-bit PGM samples are big-endian.
        raster[..expected]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / scale)
            .collect()
    };
    Tensor::new(vec![h, w], data, Domain::UnitInterval)
}

/// Exports a single-channel image as an 8-bit binary PGM, clamping to `[0, 1]`.
pub fn save_pgm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = t.image_shape()?;
    if c != 1 {
        return Err(Error::InvalidShape(format!(
            "PGM export needs one channel, got {c}"
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        t.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_file(path.as_ref(), &out)
}
