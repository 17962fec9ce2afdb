//! `N2SM` model checkpoints.
//!
//! ```text
//! magic      "N2SM"
//! version    u32 = 1
//! arch       u8 (0 = UNet, 1 = linear conv), in_channels u32, width1 u32, width2 u32
//! norm       offset f32, scale f32
//! nparams    u32, then each parameter as an N2ST record (raw domain)
//! has_optim  u8; if 1: step u64, total u64, lr0 f32, beta1 f32, beta2 f32,
//!            eps f32, then first and second moments as N2ST records
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::{Architecture, DenoiserModel, Normalization};
use crate::nn::optim::OptimState;
use crate::tensor::{write_file, ByteReader, Domain, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"N2SM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub optim: Option<OptimState>,
}

fn push_tensors(out: &mut Vec<u8>, shapes: &[Vec<usize>], values: &[Vec<f32>]) {
    for (shape, v) in shapes.iter().zip(values) {
        let t = Tensor::new(shape.clone(), v.clone(), Domain::Raw).expect("parameter shape");
        out.extend_from_slice(&t.to_bytes());
    }
}

fn read_tensors(r: &mut ByteReader, shapes: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
    shapes
        .iter()
        .map(|shape| {
            let (t, used) = Tensor::from_bytes(r.rest())?;
            r.advance(used);
            if t.dims() != shape.as_slice() {
                return Err(Error::Malformed(format!(
                    "parameter dims {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            Ok(t.into_data())
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.model.architecture();
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let (kind, c, w1, w2) = match arch {
            Architecture::UNet {
                in_channels,
                width1,
                width2,
            } => (0u8, in_channels, width1, width2),
            Architecture::LinearConv { in_channels } => (1u8, in_channels, 0, 0),
        };
        out.push(kind);
        for v in [c, w1, w2] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let norm = self.model.normalization();
        out.extend_from_slice(&norm.offset.to_le_bytes());
        out.extend_from_slice(&norm.scale.to_le_bytes());
        let shapes = arch.param_shapes();
        out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        push_tensors(&mut out, &shapes, self.model.params());
        match &self.optim {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                out.extend_from_slice(&o.total_steps.to_le_bytes());
                for v in [o.lr0, o.beta1, o.beta2, o.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                push_tensors(&mut out, &shapes, &o.first_moment);
                push_tensors(&mut out, &shapes, &o.second_moment);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                found: magic.to_vec(),
            });
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let kind = r.u8()?;
        let (c, w1, w2) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let arch = match kind {
            0 => Architecture::UNet {
                in_channels: c,
                width1: w1,
                width2: w2,
            },
            1 => Architecture::LinearConv { in_channels: c },
            other => {
                return Err(Error::Malformed(format!(
                    "unknown architecture code {other}"
                )))
            }
        };
        let norm = Normalization {
            offset: r.f32()?,
            scale: r.f32()?,
        };
        let shapes = arch.param_shapes();
        let n = r.u32()? as usize;
        if n != shapes.len() {
            return Err(Error::Malformed(format!(
                "{n} parameter tensors, architecture needs {}",
                shapes.len()
            )));
        }
        let params = read_tensors(&mut r, &shapes)?;
        let model = DenoiserModel::from_params(arch, norm, params)?;
        let optim = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let total_steps = r.u64()?;
                let (lr0, beta1, beta2, eps) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
                let first_moment = read_tensors(&mut r, &shapes)?;
                let second_moment = read_tensors(&mut r, &shapes)?;
                Some(OptimState {
                    first_moment,
                    second_moment,
                    step,
                    lr0,
                    total_steps,
                    beta1,
                    beta2,
                    eps,
                })
            }
            other => return Err(Error::Malformed(format!("bad optimizer flag {other}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::Malformed("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { model, optim })
    }
}

pub fn save_model(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &ckpt.to_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
