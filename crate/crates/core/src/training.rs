//! Training orchestration: supervised (clean targets), paired-noisy targets,
//! similarity-paired targets in 2D, and slice-paired masked targets in
//! volumes; plus augmentation, iterative refinement, the zero-mean
//! discrepancy estimator and tiled inference.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::model::{
    Architecture, DenoiserModel, Gradients, Normalization, DEFAULT_WIDTH1, DEFAULT_WIDTH2,
};
use crate::nn::optim::{adam_step, OptimState, DEFAULT_LR};
use crate::rng;
use crate::search::{construct_similar_pair, knn_similar_pixels, NearestImages, PairingMethod};
use crate::tensor::Tensor;
use crate::volume::{dissimilar_mask, distance_map, DissimilarMask, LossKind, SliceSampler};

const INIT_TAG: u64 = 0x1A17;
const SLICE_TAG: u64 = 0x511CE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Noise2Clean,
    Noise2Noise,
    Noise2Sim2D,
    Noise2SimVolume,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Noise2Clean => "noise2clean",
            TrainMode::Noise2Noise => "noise2noise",
            TrainMode::Noise2Sim2D => "noise2sim",
            TrainMode::Noise2SimVolume => "noise2sim-volume",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "noise2clean" => TrainMode::Noise2Clean,
            "noise2noise" => TrainMode::Noise2Noise,
            "noise2sim" | "noise2sim-2d" => TrainMode::Noise2Sim2D,
            "noise2sim-volume" => TrainMode::Noise2SimVolume,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown training mode `{other}`"
                )))
            }
        })
    }
}

/// Network family to train; channel count is taken from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    UNet {
        width1: usize,
        width2: usize,
    },
    /// One 3x3 convolution plus the global residual.
    Linear,
}

impl Default for ModelKind {
    fn default() -> Self {
        ModelKind::UNet {
            width1: DEFAULT_WIDTH1,
            width2: DEFAULT_WIDTH2,
        }
    }
}

impl ModelKind {
    pub fn architecture(self, in_channels: usize) -> Architecture {
        match self {
            ModelKind::UNet { width1, width2 } => Architecture::UNet {
                in_channels,
                width1,
                width2,
            },
            ModelKind::Linear => Architecture::LinearConv { in_channels },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub loss: LossKind,
    /// Neighbours per pixel (2D) or slice half-window (volume).
    pub k: usize,
    /// Patch size for the neighbour search (2D) or the distance map (volume).
    pub s: usize,
    /// Dissimilarity threshold; volume mode only.
    pub d_th: Option<f32>,
    pub pairing: PairingMethod,
    pub batch: usize,
    pub crop: Option<usize>,
    pub steps: u64,
    pub lr0: f32,
    pub seed: u64,
    /// Random 90-degree rotation and mirroring of every sample.
    pub augment: bool,
    pub model: ModelKind,
}

impl TrainConfig {
    /// Defaults for `mode`: 8 neighbours over 3x3 patches in 2D; two
    /// slices each side, 7x7 windows and a 30 HU threshold for volumes.
    pub fn new(mode: TrainMode, seed: u64) -> Self {
        let volume = mode == TrainMode::Noise2SimVolume;
        TrainConfig {
            mode,
            loss: LossKind::Mse,
            k: if volume { 2 } else { 8 },
            s: if volume { 7 } else { 3 },
            d_th: volume.then_some(30.0),
            pairing: PairingMethod::RandomToRandom,
            batch: 4,
            crop: None,
            steps: 1000,
            lr0: DEFAULT_LR,
            seed,
            augment: true,
            model: ModelKind::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match (self.mode, self.d_th) {
            (TrainMode::Noise2SimVolume, None) => {
                return bad("volume mode needs a dissimilarity threshold".into())
            }
            (TrainMode::Noise2SimVolume, Some(t)) if !(t >= 0.0) => {
                return bad(format!("threshold must be >= 0, got {t}"))
            }
            (mode, Some(_)) if mode != TrainMode::Noise2SimVolume => {
                return bad(format!(
                    "a dissimilarity threshold only applies to volume mode, not {mode}"
                ))
            }
            _ => {}
        }
        if self.s == 0 || self.s.is_multiple_of(2) {
            return Err(Error::EvenPatchSize(self.s));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.mode == TrainMode::Noise2Sim2D {
            self.pairing.validate(self.k)?;
        }
        if self.batch == 0 || self.steps == 0 {
            return bad("batch size and step count must be >= 1".into());
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr0));
        }
        if let ModelKind::UNet { width1, width2 } = self.model {
            if width1 == 0 || width2 == 0 {
                return bad("channel widths must be >= 1".into());
            }
        }
        Ok(())
    }
}

/// Training tensors grouped by role. Images are `H x W (x C)`; in volume
/// mode `noisy` holds `S x H x W (x C)` volumes.
#[derive(Debug, Clone, Default)]
pub struct DatasetHandle {
    pub noisy: Vec<Tensor>,
    pub clean: Option<Vec<Tensor>>,
    pub paired: Option<Vec<Tensor>>,
    pub neighbors: Option<Vec<NearestImages>>,
}

impl DatasetHandle {
    pub fn new(noisy: Vec<Tensor>) -> Self {
        DatasetHandle {
            noisy,
            ..Default::default()
        }
    }

    pub fn with_clean(mut self, clean: Vec<Tensor>) -> Self {
        self.clean = Some(clean);
        self
    }

    pub fn with_paired(mut self, paired: Vec<Tensor>) -> Self {
        self.paired = Some(paired);
        self
    }

    pub fn with_neighbors(mut self, neighbors: Vec<NearestImages>) -> Self {
        self.neighbors = Some(neighbors);
        self
    }

    fn role<'a>(&self, role: Option<&'a Vec<Tensor>>, name: &'static str) -> Result<&'a [Tensor]> {
        let list = role.ok_or(Error::RoleMissing(name))?;
        if list.len() != self.noisy.len() {
            return Err(Error::InvalidParameter(format!(
                "{} {name} tensors for {} noisy ones",
                list.len(),
                self.noisy.len()
            )));
        }
        for (a, b) in self.noisy.iter().zip(list) {
            a.check_same_dims(b)?;
        }
        Ok(list)
    }

    fn check_mode(&self, mode: TrainMode) -> Result<usize> {
        let first = self.noisy.first().ok_or(Error::RoleMissing("noisy"))?;
        let channels = |t: &Tensor| -> Result<usize> {
            if mode == TrainMode::Noise2SimVolume {
                let (s, _, _, c) = t.volume_shape()?;
                if s < 2 {
                    return Err(Error::InvalidShape(
                        "a volume needs at least two slices".into(),
                    ));
                }
                Ok(c)
            } else {
                Ok(t.image_shape()?.2)
            }
        };
        let c = channels(first)?;
        for t in &self.noisy {
            if channels(t)? != c {
                return Err(Error::ShapeMismatch(
                    "all training tensors need the same channel count".into(),
                ));
            }
        }
        match mode {
            TrainMode::Noise2Clean => {
                self.role(self.clean.as_ref(), "clean")?;
            }
            TrainMode::Noise2Noise => {
                self.role(self.paired.as_ref(), "paired")?;
            }
            _ => {}
        }
        Ok(c)
    }
}

/// One training example: network input, regression target and optional
/// exclusion mask, all on the same `H x W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
    pub mask: Option<DissimilarMask>,
}

/// Random `crop x crop` window followed, when `geometric` is set, by a
/// random multiple of 90-degree rotation and an optional horizontal mirror.
/// The same transform is applied to input, target and mask.
pub fn augment(sample: Sample, crop: Option<usize>, geometric: bool, seed: u64) -> Result<Sample> {
    let (h, w, c) = sample.input.image_shape()?;
    sample.input.check_same_dims(&sample.target)?;
    if let Some(m) = &sample.mask {
        if m.shape() != (h, w) {
            return Err(Error::DimMismatch {
                left: vec![h, w],
                right: vec![m.shape().0, m.shape().1],
            });
        }
    }
    if crop.is_none() && !geometric {
        return Ok(sample);
    }
    let mut r = rng::stream(seed, 0);
    let (y0, x0, ch, cw) = match crop {
        Some(size) => {
            if size == 0 || size > h || size > w {
                return Err(Error::CropTooLarge {
                    crop: size,
                    height: h,
                    width: w,
                });
            }
            (
                r.random_range(0..=h - size),
                r.random_range(0..=w - size),
                size,
                size,
            )
        }
        None => (0, 0, h, w),
    };
    let (turns, mirror) = if geometric {
        (r.random_range(0..4u8), r.random_bool(0.5))
    } else {
        (0, false)
    };
    let geo = Geometry {
        y0,
        x0,
        ch,
        cw,
        turns,
        mirror,
    };
    let (oh, ow) = geo.out_shape();
    let move_image = |t: &Tensor| Tensor::image(oh, ow, c, geo.apply(t.data(), w, c), t.domain());
    let mask = match &sample.mask {
        Some(m) => Some(DissimilarMask::from_flags(
            oh,
            ow,
            m.threshold(),
            geo.apply(m.excluded(), w, 1),
        )?),
        None => None,
    };
    Ok(Sample {
        input: move_image(&sample.input)?,
        target: move_image(&sample.target)?,
        mask,
    })
}

struct Geometry {
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
    turns: u8,
    mirror: bool,
}

impl Geometry {
    fn out_shape(&self) -> (usize, usize) {
        if self.turns % 2 == 1 {
            (self.cw, self.ch)
        } else {
            (self.ch, self.cw)
        }
    }

    /// Source pixel (row, col) in the crop for output pixel (y, x).
    fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let (oh, ow) = self.out_shape();
        let x = if self.mirror { ow - 1 - x } else { x };
        // Counter-clockwise quarter turns.
        match self.turns {
            0 => (y, x),
            1 => (x, self.cw - 1 - y),
            2 => (oh - 1 - y, ow - 1 - x),
            _ => (self.ch - 1 - x, y),
        }
    }

    fn apply<T: Copy>(&self, data: &[T], width: usize, c: usize) -> Vec<T> {
        let (oh, ow) = self.out_shape();
        let mut out = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x);
                let base = ((self.y0 + sy) * width + self.x0 + sx) * c;
                out.extend_from_slice(&data[base..base + c]);
            }
        }
        out
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f32,
    /// Mean loss over the samples used this step, in normalized units;
    /// NaN when every sample was skipped.
    pub loss: f64,
    pub skipped: usize,
}

pub fn write_log_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "step,lr,loss,skipped").expect("write to Vec");
    for r in rows {
        writeln!(buf, "{},{:e},{:e},{}", r.step, r.lr, r.loss, r.skipped).expect("write to Vec");
    }
    crate::tensor::write_file(path, &buf)
}

/// Runs `steps` Adam updates, calling `batch_for(step)` for the samples of
/// each step. Gradients of a batch are averaged in sample order, so the
/// trajectory does not depend on the thread count. Samples whose mask
/// excludes every pixel are skipped; more than half skipped is an error.
pub fn fit<F>(
    model: &mut DenoiserModel,
    opt: &mut OptimState,
    loss: LossKind,
    steps: u64,
    mut batch_for: F,
) -> Result<Vec<LogRow>>
where
    F: FnMut(u64) -> Result<Vec<Sample>>,
{
    let mut log = Vec::with_capacity(steps as usize);
    let (mut drawn, mut skipped_total) = (0usize, 0usize);
    for step in 0..steps {
        let batch = batch_for(step)?;
        let results: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .map(|s| {
                let (h, w, _) = s.input.image_shape()?;
                s.input.check_same_dims(&s.target)?;
                let excluded = s.mask.as_ref().map(|m| m.excluded());
                model.loss_and_grads(s.input.data(), s.target.data(), excluded, h, w, loss)
            })
            .collect();
        let mut total: Option<Gradients> = None;
        let (mut used, mut loss_sum, mut skipped) = (0usize, 0.0f64, 0usize);
        for res in results {
            match res {
                Ok((l, g)) => {
                    used += 1;
                    loss_sum += l;
                    match &mut total {
                        None => total = Some(g),
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                            }
                        }
                    }
                }
                Err(Error::AllPixelsExcluded) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let lr = opt.current_lr();
        match total {
            Some(mut g) => {
                let inv = 1.0 / used as f32;
                g.iter_mut().flatten().for_each(|v| *v *= inv);
                adam_step(model, &g, opt)?;
            }
            // Nothing usable: keep the schedule moving without an update.
            None => opt.step += 1,
        }
        drawn += batch.len();
        skipped_total += skipped;
        log.push(LogRow {
            step,
            lr,
            loss: if used > 0 {
                loss_sum / used as f64
            } else {
                f64::NAN
            },
            skipped,
        });
    }
    if 2 * skipped_total > drawn {
        return Err(Error::DegenerateSampleSkipped {
            skipped: skipped_total,
            total: drawn,
        });
    }
    Ok(log)
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: DenoiserModel,
    pub optim: OptimState,
    pub log: Vec<LogRow>,
    /// Samples skipped because every pixel was masked out.
    pub skipped: usize,
}

/// Fresh model for `config` and `data`: channel count and intensity
/// normalization come from the first noisy tensor.
pub fn initial_model(config: &TrainConfig, data: &DatasetHandle) -> Result<DenoiserModel> {
    config.validate()?;
    let c = data.check_mode(config.mode)?;
    let norm = Normalization::for_domain(data.noisy[0].domain());
    DenoiserModel::new(
        config.model.architecture(c),
        norm,
        rng::mix(config.seed, INIT_TAG),
    )
}

pub fn train(config: &TrainConfig, data: &DatasetHandle) -> Result<Trained> {
    train_from(initial_model(config, data)?, config, data)
}

/// Continues training `model` (warm start) with a fresh optimizer.
pub fn train_from(
    mut model: DenoiserModel,
    config: &TrainConfig,
    data: &DatasetHandle,
) -> Result<Trained> {
    config.validate()?;
    let c = data.check_mode(config.mode)?;
    if model.architecture().in_channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} channels, data has {c}",
            model.architecture().in_channels()
        )));
    }
    let neighbors: Vec<NearestImages> = if config.mode == TrainMode::Noise2Sim2D {
        match &data.neighbors {
            Some(n) if n.len() == data.noisy.len() => {
                if let Some(t) = n.iter().find(|t| t.k() != config.k) {
                    return Err(Error::InvalidParameter(format!(
                        "neighbour table holds {} neighbours per pixel, configuration asks for {}",
                        t.k(),
                        config.k
                    )));
                }
                n.clone()
            }
            Some(n) => {
                return Err(Error::InvalidParameter(format!(
                    "{} neighbour tables for {} images",
                    n.len(),
                    data.noisy.len()
                )))
            }
            None => data
                .noisy
                .iter()
                .map(|img| knn_similar_pixels(img, config.k, config.s))
                .collect::<Result<_>>()?,
        }
    } else {
        Vec::new()
    };
    let samplers: Vec<SliceSampler> = if config.mode == TrainMode::Noise2SimVolume {
        data.noisy
            .iter()
            .enumerate()
            .map(|(v, vol)| {
                let slices = vol.volume_shape()?.0;
                SliceSampler::new(
                    slices,
                    config.k.min(slices - 1),
                    rng::mix(config.seed ^ SLICE_TAG, v as u64),
                )
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut opt = OptimState::new(&model, config.lr0, config.steps);
    let source = SampleSource {
        config,
        data,
        neighbors: &neighbors,
        samplers: &samplers,
    };
    let log = fit(&mut model, &mut opt, config.loss, config.steps, |step| {
        source.batch(step)
    })?;
    let skipped = log.iter().map(|r| r.skipped).sum();
    Ok(Trained {
        model,
        optim: opt,
        log,
        skipped,
    })
}

struct SampleSource<'a> {
    config: &'a TrainConfig,
    data: &'a DatasetHandle,
    neighbors: &'a [NearestImages],
    samplers: &'a [SliceSampler],
}

impl SampleSource<'_> {
    fn batch(&self, step: u64) -> Result<Vec<Sample>> {
        (0..self.config.batch)
            .into_par_iter()
            .map(|item| self.sample(step, item))
            .collect()
    }

    fn sample(&self, step: u64, item: usize) -> Result<Sample> {
        let cfg = self.config;
        let item_seed = rng::mix(rng::mix(cfg.seed, step), item as u64);
        let mut r = rng::stream(item_seed, 0);
        let idx = r.random_range(0..self.data.noisy.len());
        let noisy = &self.data.noisy[idx];
        let sample = match cfg.mode {
            TrainMode::Noise2Clean => Sample {
                input: noisy.clone(),
                target: self.data.clean.as_ref().expect("checked role")[idx].clone(),
                mask: None,
            },
            TrainMode::Noise2Noise => Sample {
                input: noisy.clone(),
                target: self.data.paired.as_ref().expect("checked role")[idx].clone(),
                mask: None,
            },
            TrainMode::Noise2Sim2D => {
                let (input, target) = construct_similar_pair(
                    &self.neighbors[idx],
                    noisy,
                    cfg.pairing,
                    rng::mix(item_seed, 1),
                )?;
                Sample {
                    input,
                    target,
                    mask: None,
                }
            }
            TrainMode::Noise2SimVolume => {
                let slices = noisy.volume_shape()?.0;
                let i = r.random_range(0..slices);
                let draw = step * cfg.batch as u64 + item as u64;
                let j = self.samplers[idx].sample(i, draw)?;
                let (x_i, x_j) = (noisy.slice(i)?, noisy.slice(j)?);
                let d = distance_map(&x_i, &x_j, cfg.s)?;
                let mask = dissimilar_mask(&d, cfg.d_th.expect("validated"))?;
                Sample {
                    input: x_i,
                    target: x_j,
                    mask: Some(mask),
                }
            }
        };
        augment(sample, cfg.crop, cfg.augment, rng::mix(item_seed, 2))
    }
}

/// Repeats `rounds` times: denoise the noisy training images with the
/// current model, search neighbours on the denoised images, and retrain
/// (warm start) on pairs whose pixel values still come from the noisy
/// images.
pub fn iterative_refine(
    model: DenoiserModel,
    config: &TrainConfig,
    data: &DatasetHandle,
    rounds: usize,
) -> Result<Trained> {
    if rounds == 0 {
        return Err(Error::InvalidParameter(
            "iterative refinement needs at least one round".into(),
        ));
    }
    if config.mode != TrainMode::Noise2Sim2D {
        return Err(Error::InvalidParameter(format!(
            "iterative refinement applies to 2D similarity training, not {}",
            config.mode
        )));
    }
    let mut model = model;
    let mut last = None;
    for _ in 0..rounds {
        let similarity = data
            .noisy
            .iter()
            .map(|x| denoise(&model, x))
            .collect::<Result<Vec<_>>>()?;
        let trained = refine_round(model, config, data, &similarity)?;
        model = trained.model.clone();
        last = Some(trained);
    }
    Ok(last.expect("rounds >= 1"))
}

/// A single refinement round with neighbours searched on `similarity_images`
/// instead of the noisy images.
pub fn refine_round(
    model: DenoiserModel,
    config: &TrainConfig,
    data: &DatasetHandle,
    similarity_images: &[Tensor],
) -> Result<Trained> {
    if similarity_images.len() != data.noisy.len() {
        return Err(Error::InvalidParameter(format!(
            "{} similarity images for {} noisy ones",
            similarity_images.len(),
            data.noisy.len()
        )));
    }
    let neighbors = similarity_images
        .iter()
        .zip(&data.noisy)
        .map(|(sim, noisy)| {
            sim.check_same_dims(noisy)?;
            knn_similar_pixels(sim, config.k, config.s)
        })
        .collect::<Result<Vec<_>>>()?;
    let data = data.clone().with_neighbors(neighbors);
    train_from(model, config, &data)
}

/// Per-pixel statistics of `x' - x''` over randomly constructed similar pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ZcdEstimate {
    /// Per-image mean difference.
    pub means: Vec<Tensor>,
    /// Per-image sample variance of the difference.
    pub variances: Vec<Tensor>,
    pub min: f32,
    pub max: f32,
    pub draws: usize,
}

const ZCD_BLOCK: usize = 512;

/// Averages `m` independent both-sides-random similar pairs per image.
pub fn estimate_zcd(data: &DatasetHandle, m: usize, seed: u64) -> Result<ZcdEstimate> {
    if m == 0 {
        return Err(Error::InvalidParameter("need at least one draw".into()));
    }
    let neighbors = data
        .neighbors
        .as_ref()
        .ok_or(Error::RoleMissing("neighbors"))?;
    if neighbors.len() != data.noisy.len() || data.noisy.is_empty() {
        return Err(Error::RoleMissing("neighbors"));
    }
    let (mut means, mut variances) = (Vec::new(), Vec::new());
    for (idx, (img, n)) in data.noisy.iter().zip(neighbors).enumerate() {
        let image_seed = rng::mix(seed, idx as u64);
        let len = img.len();
        let blocks: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..m.div_ceil(ZCD_BLOCK))
            .into_par_iter()
            .map(|b| {
                let (mut sum, mut sq) = (vec![0.0f64; len], vec![0.0f64; len]);
                for draw in b * ZCD_BLOCK..((b + 1) * ZCD_BLOCK).min(m) {
                    let (a, c) = construct_similar_pair(
                        n,
                        img,
                        PairingMethod::RandomToRandom,
                        rng::mix(image_seed, draw as u64),
                    )?;
                    for (i, (x, y)) in a.data().iter().zip(c.data()).enumerate() {
                        let d = *x as f64 - *y as f64;
                        sum[i] += d;
                        sq[i] += d * d;
                    }
                }
                Ok((sum, sq))
            })
            .collect();
        let (mut sum, mut sq) = (vec![0.0f64; len], vec![0.0f64; len]);
        for block in blocks {
            let (s, q) = block?;
            sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            sq.iter_mut().zip(&q).for_each(|(a, b)| *a += b);
        }
        let mf = m as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / mf) as f32).collect();
        let var: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                if m > 1 {
                    ((q - s * s / mf) / (mf - 1.0)).max(0.0) as f32
                } else {
                    0.0
                }
            })
            .collect();
        means.push(img.map_data(mean)?.with_domain(crate::tensor::Domain::Raw));
        variances.push(img.map_data(var)?.with_domain(crate::tensor::Domain::Raw));
    }
    let all = means.iter().flat_map(|t| t.data().iter().copied());
    let (min, max) = all.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    Ok(ZcdEstimate {
        means,
        variances,
        min,
        max,
        draws: m,
    })
}

pub const TILE_SIZE: usize = 64;
pub const TILE_MARGIN: usize = 16;

/// Applies `model` to an image or, slice by slice, to a volume, using
/// overlapping tiles of [`TILE_SIZE`] pixels.
pub fn denoise(model: &DenoiserModel, x: &Tensor) -> Result<Tensor> {
    denoise_tiled(model, x, TILE_SIZE, TILE_MARGIN)
}

/// Tiled inference. Tiles start on even rows and columns so pooling
/// windows line up with whole-image inference; each pixel averages the
/// outputs of the tiles in which it lies at least `margin` pixels from a
/// tile border that is not also an image border.
pub fn denoise_tiled(
    model: &DenoiserModel,
    x: &Tensor,
    tile: usize,
    margin: usize,
) -> Result<Tensor> {
    if tile % 2 == 1 || tile <= 2 * margin {
        return Err(Error::InvalidParameter(format!(
            "tile size {tile} must be even and larger than twice the margin {margin}"
        )));
    }
    if let Ok((s, ..)) = x.volume_shape() {
        let slices = (0..s)
            .map(|i| denoise_tiled(model, &x.slice(i)?, tile, margin))
            .collect::<Result<Vec<_>>>()?;
        return Tensor::stack(&slices);
    }
    let (h, w, c) = x.image_shape()?;
    if h <= tile && w <= tile {
        return model.forward(x);
    }
    let rows = tile_spans(h, tile, margin);
    let cols = tile_spans(w, tile, margin);
    let spans: Vec<_> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&q| (r, q)))
        .collect();
    let src = x.data();
    let outputs: Vec<Result<Tensor>> = spans
        .par_iter()
        .map(|&((y0, y1), (x0, x1))| {
            let mut data = Vec::with_capacity((y1 - y0) * (x1 - x0) * c);
            for y in y0..y1 {
                data.extend_from_slice(&src[(y * w + x0) * c..(y * w + x1) * c]);
            }
            model.forward(&Tensor::image(y1 - y0, x1 - x0, c, data, x.domain())?)
        })
        .collect();
    let mut acc = vec![0.0f64; h * w * c];
    let mut count = vec![0u32; h * w];
    let core = |p: usize, (a, b): (usize, usize), n: usize| {
        (a == 0 || p >= a + margin) && (b == n || p + margin < b)
    };
    for (&((y0, y1), (x0, x1)), out) in spans.iter().zip(outputs) {
        let out = out?;
        let tw = x1 - x0;
        for y in y0..y1 {
            if !core(y, (y0, y1), h) {
                continue;
            }
            for xx in x0..x1 {
                if !core(xx, (x0, x1), w) {
                    continue;
                }
                count[y * w + xx] += 1;
                let o = ((y - y0) * tw + xx - x0) * c;
                for ch in 0..c {
                    acc[(y * w + xx) * c + ch] += out.data()[o + ch] as f64;
                }
            }
        }
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let n = count[i / c];
            debug_assert!(n > 0, "pixel not covered by any tile core");
            (a / n as f64) as f32
        })
        .collect();
    x.map_data(data)
}

/// Half-open tile extents along an axis of length `n`.
fn tile_spans(n: usize, tile: usize, margin: usize) -> Vec<(usize, usize)> {
    if n <= tile {
        return vec![(0, n)];
    }
    let stride = tile - 2 * margin;
    let mut spans = Vec::new();
    let mut start = 0;
    while start + tile < n {
        spans.push((start, start + tile));
        start += stride;
    }
    let last = (n - tile) & !1;
    if spans.last().is_some_and(|&(a, _)| a == last) {
        spans.pop();
    }
    spans.push((last, n));
    spans
}
