//! Command-line front end: `simulate`, `search`, `mask`, `train`, `denoise`,
//! `eval` and `estimate-zcd`.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, missing
//! `--seed`, invalid parameter values), 2 on data errors (unreadable or
//! malformed files, incompatible shapes).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use noise2sim::metrics::{default_peak, psnr, ssim};
use noise2sim::nn::{load_model, save_model, Checkpoint};
use noise2sim::search::{knn_similar_pixels, NearestImages};
use noise2sim::tensor::{load_tensor, save_pgm, save_tensor, AxisLabel, Tensor};
use noise2sim::training::{
    self, estimate_zcd, iterative_refine, write_log_csv, DatasetHandle, ModelKind, TrainConfig,
    TrainMode,
};
use noise2sim::volume::{dissimilar_mask, distance_map, LossKind};
use noise2sim::{noise, Error};

mod config;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "noise2sim",
    version,
    about = "Similarity-based self-supervised denoising"
)]
#[command(args_override_self = true)]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat `key = value` file supplying defaults for the subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add synthetic Gaussian or Poisson noise to a clean tensor.
    Simulate(SimulateArgs),
    /// Exact k-nearest-neighbour patch search; writes an N2SN table.
    Search(SearchArgs),
    /// Dissimilarity mask between two slices.
    Mask(MaskArgs),
    /// Train a denoiser on the tensors of a directory.
    Train(TrainArgs),
    /// Apply a trained model.
    Denoise(DenoiseArgs),
    /// Compare two tensors; prints CSV.
    Eval(EvalArgs),
    /// Estimate the mean similar-pair difference per pixel.
    EstimateZcd(ZcdArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseKindArg {
    Gaussian,
    Poisson,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    kind: NoiseKindArg,
    #[arg(long, conflicts_with = "lambda")]
    std: Option<f32>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    seed: u64,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct SearchArgs {
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    s: usize,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct MaskArgs {
    #[arg(long, default_value_t = 7)]
    s: usize,
    #[arg(long, default_value_t = 30.0)]
    dth: f32,
    slice_i: PathBuf,
    slice_j: PathBuf,
    output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Noise2clean,
    Noise2noise,
    Noise2sim,
    Noise2simVolume,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Mse,
    L1,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Unet,
    Linear,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    dth: Option<f32>,
    #[arg(long, value_enum, default_value = "mse")]
    loss: LossArg,
    /// `original-random`, `random-original`, `random-random` or `sorted:J1,J2`.
    #[arg(long, default_value = "random-random")]
    pairing: String,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = noise2sim::nn::DEFAULT_LR)]
    lr: f32,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    augment: bool,
    #[arg(long, value_enum, default_value = "unet")]
    model: ModelArg,
    #[arg(long, default_value_t = noise2sim::nn::model::DEFAULT_WIDTH1)]
    width1: usize,
    #[arg(long, default_value_t = noise2sim::nn::model::DEFAULT_WIDTH2)]
    width2: usize,
    /// Extra refinement rounds after the first training run (2D only).
    #[arg(long, default_value_t = 0)]
    refine: usize,
    /// Training log; defaults to `<output>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    data_dir: PathBuf,
    output: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct DenoiseArgs {
    model: PathBuf,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct EvalArgs {
    /// Comma-separated list of `psnr` and `ssim`.
    #[arg(long, default_value = "psnr,ssim", value_delimiter = ',')]
    metric: Vec<MetricArg>,
    /// Peak signal value; defaults to 1 for unit-interval data and 400 for HU.
    #[arg(long)]
    peak: Option<f64>,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    reference: PathBuf,
    test: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Psnr,
    Ssim,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct ZcdArgs {
    /// Number of random similar pairs.
    #[arg(long, default_value_t = 100_000)]
    m: usize,
    #[arg(long)]
    seed: u64,
    /// Precomputed neighbour table; searched with `--k`/`--s` when absent.
    #[arg(long)]
    neighbors: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    s: usize,
    input: PathBuf,
    output: PathBuf,
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_)
            | Error::EvenPatchSize(_)
            | Error::NegativeStd(_)
            | Error::InvalidLambda(_)
            | Error::CropTooLarge { .. } => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl Failure {
    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) => m,
        }
    }

    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

/// Resolved settings of a run, written to the manifest in order.
#[derive(Default)]
struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn render(&self, command: &str, status: &str) -> String {
        let mut out = String::new();
        writeln!(out, "tool = noise2sim {VERSION}").unwrap();
        writeln!(out, "format_versions = N2ST 1, N2SN 1, N2SM 1").unwrap();
        writeln!(out, "command = {command}").unwrap();
        for (k, v) in &self.entries {
            writeln!(out, "{k} = {v}").unwrap();
        }
        writeln!(out, "status = {status}").unwrap();
        out
    }
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.txt");
    PathBuf::from(name)
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match config::merge_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            1
        }
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => {
                eprintln!("error: cannot start worker pool: {e}");
                2
            }
        },
        None => dispatch(cli.command),
    }
}

fn dispatch(command: Command) -> i32 {
    let mut manifest = Manifest::default();
    let (name, output, result) = match command {
        Command::Simulate(a) => (
            "simulate",
            Some(a.output.clone()),
            simulate(a, &mut manifest),
        ),
        Command::Search(a) => ("search", Some(a.output.clone()), search(a, &mut manifest)),
        Command::Mask(a) => ("mask", Some(a.output.clone()), mask(a, &mut manifest)),
        Command::Train(a) => ("train", Some(a.output.clone()), train(a, &mut manifest)),
        Command::Denoise(a) => ("denoise", Some(a.output.clone()), denoise(a, &mut manifest)),
        Command::Eval(a) => ("eval", a.out.clone(), eval(a, &mut manifest)),
        Command::EstimateZcd(a) => (
            "estimate-zcd",
            Some(a.output.clone()),
            zcd(a, &mut manifest),
        ),
    };
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(f) => format!("failed: {}", f.message()),
    };
    if let Some(out) = output {
        let path = manifest_path(&out);
        if let Err(e) = std::fs::write(&path, manifest.render(name, &status)) {
            eprintln!("warning: cannot write manifest {}: {e}", path.display());
        }
    }
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Writes a tensor as PGM when the path ends in `.pgm`, N2ST otherwise.
fn write_tensor(t: &Tensor, path: &Path) -> Result<(), Failure> {
    let pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if pgm {
        save_pgm(t, path)?;
    } else {
        save_tensor(t, path)?;
    }
    Ok(())
}

fn simulate(a: SimulateArgs, m: &mut Manifest) -> Result<(), Failure> {
    m.set("input", show(&a.input));
    m.set("output", show(&a.output));
    m.set("seed", a.seed);
    let kind = match (a.kind, a.std, a.lambda) {
        (NoiseKindArg::Gaussian, Some(std), None) => {
            m.set("kind", "gaussian");
            m.set("std", std);
            noise::NoiseKind::Gaussian { std }
        }
        (NoiseKindArg::Poisson, None, Some(lambda)) => {
            m.set("kind", "poisson");
            m.set("lambda", lambda);
            noise::NoiseKind::Poisson { lambda }
        }
        (NoiseKindArg::Gaussian, ..) => {
            return Err(Failure::Usage(
                "gaussian noise needs --std (and no --lambda)".into(),
            ))
        }
        (NoiseKindArg::Poisson, ..) => {
            return Err(Failure::Usage(
                "poisson noise needs --lambda (and no --std)".into(),
            ))
        }
    };
    let clean = load_tensor(&a.input)?;
    let noisy = noise::NoiseSpec { kind, seed: a.seed }.apply(&clean)?;
    write_tensor(&noisy, &a.output)
}

fn search(a: SearchArgs, m: &mut Manifest) -> Result<(), Failure> {
    m.set("input", show(&a.input));
    m.set("output", show(&a.output));
    m.set("k", a.k);
    m.set("s", a.s);
    let img = load_tensor(&a.input)?;
    knn_similar_pixels(&img, a.k, a.s)?.save(&a.output)?;
    Ok(())
}

/// Reads a slice; a three-axis tensor is taken as `H x W x C`.
fn load_slice(path: &Path) -> Result<Tensor, Failure> {
    let t = load_tensor(path)?;
    if t.dims().len() == 3 {
        use AxisLabel::*;
        return Ok(t.relabel(vec![Height, Width, Channel])?);
    }
    Ok(t)
}

fn mask(a: MaskArgs, m: &mut Manifest) -> Result<(), Failure> {
    m.set("slice_i", show(&a.slice_i));
    m.set("slice_j", show(&a.slice_j));
    m.set("output", show(&a.output));
    m.set("s", a.s);
    m.set("dth", a.dth);
    let (x_i, x_j) = (load_slice(&a.slice_i)?, load_slice(&a.slice_j)?);
    let d = distance_map(&x_i, &x_j, a.s)?;
    let mask = dissimilar_mask(&d, a.dth)?;
    m.set("excluded_pixels", mask.excluded_count());
    save_tensor(&mask.to_tensor(), &a.output)?;
    Ok(())
}

fn is_tensor_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("n2st") || e.eq_ignore_ascii_case("pgm"))
}

/// Companion file `<stem>.<role>.<ext>` of a noisy tensor, trying both tensor extensions.
fn companion(path: &Path, role: &str) -> Option<PathBuf> {
    let stem = path.file_stem()?.to_str()?;
    ["n2st", "pgm"]
        .iter()
        .map(|ext| path.with_file_name(format!("{stem}.{role}.{ext}")))
        .find(|p| p.is_file())
}

/// Scans a training directory. Noisy inputs are `*.n2st` / `*.pgm`; for a
/// noisy file `x.n2st` the optional companions are `x.clean.*` (clean
/// target), `x.pair.*` (second noisy realization) and `x.n2sn`
/// (precomputed neighbours).
fn load_dataset(dir: &Path, mode: TrainMode) -> Result<(DatasetHandle, Vec<PathBuf>), Failure> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Failure::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut noisy_paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_tensor_file(p))
        .filter(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            !(stem.ends_with(".clean") || stem.ends_with(".pair"))
        })
        .collect();
    noisy_paths.sort();
    if noisy_paths.is_empty() {
        return Err(Failure::Data(format!(
            "no .n2st or .pgm files in {}",
            dir.display()
        )));
    }
    let mut noisy = Vec::new();
    for p in &noisy_paths {
        let t = load_tensor(p)?;
        // Volume mode reads three-axis tensors as slice stacks; 2D modes as H x W x C.
        if mode != TrainMode::Noise2SimVolume && t.dims().len() == 3 {
            use AxisLabel::*;
            noisy.push(t.relabel(vec![Height, Width, Channel])?);
        } else {
            noisy.push(t);
        }
    }
    let role = |name: &str| -> Result<Option<Vec<Tensor>>, Failure> {
        let found: Vec<Option<PathBuf>> = noisy_paths.iter().map(|p| companion(p, name)).collect();
        if found.iter().any(Option::is_none) {
            return Ok(None);
        }
        let mut out = Vec::new();
        for (p, n) in found.into_iter().flatten().zip(&noisy) {
            out.push(load_tensor(&p)?.relabel(n.labels().to_vec())?);
        }
        Ok(Some(out))
    };
    let (clean, paired) = (role("clean")?, role("pair")?);
    let mut data = DatasetHandle::new(noisy);
    data.clean = clean;
    data.paired = paired;
    let tables: Vec<PathBuf> = noisy_paths
        .iter()
        .map(|p| p.with_extension("n2sn"))
        .collect();
    if mode == TrainMode::Noise2Sim2D && tables.iter().all(|p| p.is_file()) {
        data.neighbors = Some(
            tables
                .iter()
                .map(NearestImages::load)
                .collect::<Result<_, _>>()?,
        );
    }
    Ok((data, noisy_paths))
}

fn train(a: TrainArgs, m: &mut Manifest) -> Result<(), Failure> {
    let mode = match a.mode {
        ModeArg::Noise2clean => TrainMode::Noise2Clean,
        ModeArg::Noise2noise => TrainMode::Noise2Noise,
        ModeArg::Noise2sim => TrainMode::Noise2Sim2D,
        ModeArg::Noise2simVolume => TrainMode::Noise2SimVolume,
    };
    let mut cfg = TrainConfig::new(mode, a.seed);
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(s) = a.s {
        cfg.s = s;
    }
    if mode == TrainMode::Noise2SimVolume {
        if let Some(t) = a.dth {
            cfg.d_th = Some(t);
        }
    } else if a.dth.is_some() {
        return Err(Failure::Usage(
            "--dth only applies to --mode noise2sim-volume".into(),
        ));
    }
    cfg.loss = match a.loss {
        LossArg::Mse => LossKind::Mse,
        LossArg::L1 => LossKind::L1,
    };
    cfg.pairing = a
        .pairing
        .parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))?;
    cfg.batch = a.batch;
    cfg.crop = a.crop;
    cfg.steps = a.steps;
    cfg.lr0 = a.lr;
    cfg.augment = a.augment;
    cfg.model = match a.model {
        ModelArg::Unet => ModelKind::UNet {
            width1: a.width1,
            width2: a.width2,
        },
        ModelArg::Linear => ModelKind::Linear,
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut name = a.output.as_os_str().to_owned();
        name.push(".log.csv");
        PathBuf::from(name)
    });

    m.set("data_dir", show(&a.data_dir));
    m.set("output", show(&a.output));
    m.set("log", show(&log_path));
    m.set("mode", mode);
    m.set("seed", cfg.seed);
    m.set("k", cfg.k);
    m.set("s", cfg.s);
    m.set(
        "dth",
        cfg.d_th.map_or("none".to_string(), |t| t.to_string()),
    );
    m.set(
        "loss",
        if cfg.loss == LossKind::Mse {
            "mse"
        } else {
            "l1"
        },
    );
    m.set("pairing", cfg.pairing);
    m.set("batch", cfg.batch);
    m.set(
        "crop",
        cfg.crop.map_or("none".to_string(), |c| c.to_string()),
    );
    m.set("steps", cfg.steps);
    m.set("lr", cfg.lr0);
    m.set("augment", cfg.augment);
    match cfg.model {
        ModelKind::UNet { width1, width2 } => {
            m.set("model", "unet");
            m.set("width1", width1);
            m.set("width2", width2);
        }
        ModelKind::Linear => m.set("model", "linear"),
    }
    m.set("refine", a.refine);
    cfg.validate()?;

    let (data, files) = load_dataset(&a.data_dir, mode)?;
    for (i, f) in files.iter().enumerate() {
        m.set(&format!("input.{i}"), show(f));
    }
    let mut trained = training::train(&cfg, &data)?;
    let mut log = trained.log.clone();
    if a.refine > 0 {
        if mode != TrainMode::Noise2Sim2D {
            return Err(Failure::Usage(
                "--refine applies to --mode noise2sim only".into(),
            ));
        }
        trained = iterative_refine(trained.model, &cfg, &data, a.refine)?;
        let offset = log.len() as u64;
        log.extend(trained.log.iter().map(|r| training::LogRow {
            step: r.step + offset,
            ..*r
        }));
    }
    m.set(
        "skipped_samples",
        log.iter().map(|r| r.skipped).sum::<usize>(),
    );
    m.set("final_loss", log.last().map_or(f64::NAN, |r| r.loss));
    write_log_csv(&log, &log_path)?;
    save_model(
        &Checkpoint {
            model: trained.model,
            optim: Some(trained.optim),
        },
        &a.output,
    )?;
    Ok(())
}

fn denoise(a: DenoiseArgs, m: &mut Manifest) -> Result<(), Failure> {
    m.set("model", show(&a.model));
    m.set("input", show(&a.input));
    m.set("output", show(&a.output));
    m.set("tile", training::TILE_SIZE);
    m.set("tile_margin", training::TILE_MARGIN);
    let ckpt = load_model(&a.model)?;
    let mut x = load_tensor(&a.input)?;
    // A three-axis tensor is a multichannel image when its last axis matches the model.
    if x.dims().len() == 3
        && ckpt.model.architecture().in_channels() == x.dims()[2]
        && x.dims()[2] > 1
    {
        use AxisLabel::*;
        x = x.relabel(vec![Height, Width, Channel])?;
    }
    let out = training::denoise(&ckpt.model, &x)?;
    write_tensor(&out, &a.output)
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn eval(a: EvalArgs, m: &mut Manifest) -> Result<(), Failure> {
    m.set("reference", show(&a.reference));
    m.set("test", show(&a.test));
    let (x, y) = (load_slice(&a.reference)?, load_slice(&a.test)?);
    let peak = a.peak.unwrap_or_else(|| default_peak(x.domain()));
    m.set("peak", peak);
    let names: Vec<&str> = a
        .metric
        .iter()
        .map(|k| match k {
            MetricArg::Psnr => "psnr",
            MetricArg::Ssim => "ssim",
        })
        .collect();
    m.set("metric", names.join(","));
    let mut values = Vec::new();
    for k in &a.metric {
        let v = match k {
            MetricArg::Psnr => psnr(&x, &y, peak)?,
            MetricArg::Ssim => ssim(&x, &y, peak)?,
        };
        values.push(fmt_metric(v));
    }
    let csv = format!("{}\n{}\n", names.join(","), values.join(","));
    print!("{csv}");
    if let Some(out) = &a.out {
        std::fs::write(out, &csv)
            .map_err(|e| Failure::Data(format!("cannot write {}: {e}", out.display())))?;
    }
    Ok(())
}

fn zcd(a: ZcdArgs, m: &mut Manifest) -> Result<(), Failure> {
    m.set("input", show(&a.input));
    m.set("output", show(&a.output));
    m.set("m", a.m);
    m.set("seed", a.seed);
    let img = load_slice(&a.input)?;
    let table = match &a.neighbors {
        Some(p) => {
            m.set("neighbors", show(p));
            NearestImages::load(p)?
        }
        None => {
            m.set("k", a.k);
            m.set("s", a.s);
            knn_similar_pixels(&img, a.k, a.s)?
        }
    };
    let data = DatasetHandle::new(vec![img]).with_neighbors(vec![table]);
    let est = estimate_zcd(&data, a.m, a.seed)?;
    m.set("min", est.min);
    m.set("max", est.max);
    println!("min,max\n{},{}", est.min, est.max);
    save_tensor(&est.means[0], &a.output)?;
    Ok(())
}
