use noise2sim::metrics::psnr;
use noise2sim::nn::{
    load_model, save_model, Architecture, Checkpoint, DenoiserModel, Normalization,
};
use noise2sim::noise::add_gaussian;
use noise2sim::search::{knn_similar_pixels, neighbor_overlap};
use noise2sim::tensor::{Domain, Tensor};
use noise2sim::textures::{texture, texture_set, TextureKind};
use noise2sim::training::*;
use noise2sim::Error;

fn small(mode: TrainMode, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(mode, 21);
    cfg.steps = steps;
    cfg.crop = Some(16);
    cfg.lr0 = 2e-3;
    cfg.model = ModelKind::UNet {
        width1: 6,
        width2: 8,
    };
    cfg
}

fn noisy_textures(sigma: f32) -> (Vec<Tensor>, Vec<Tensor>) {
    let clean: Vec<Tensor> = texture_set(32);
    let noisy = clean
        .iter()
        .enumerate()
        .map(|(i, c)| add_gaussian(c, sigma, 40 + i as u64).unwrap())
        .collect();
    (clean, noisy)
}

/// A volume whose right-hand band changes completely from slice to slice.
fn changing_volume(slices: usize, n: usize) -> Tensor {
    let data = (0..slices * n * n)
        .map(|i| {
            let (z, y, x) = (i / (n * n), i / n % n, i % n);
            let base = 60.0 * ((x as f32) * 0.6).sin() * ((y as f32) * 0.4).cos();
            if x >= n - n / 4 && (y / 3 + z) % 2 == 0 {
                base + 300.0
            } else {
                base
            }
        })
        .collect();
    Tensor::new(vec![slices, n, n], data, Domain::Hounsfield).unwrap()
}

#[test]
fn short_runs_are_reproducible_across_thread_counts() {
    let (_, noisy) = noisy_textures(0.1);
    let data = DatasetHandle::new(noisy);
    let cfg = small(TrainMode::Noise2Sim2D, 10);
    let a = train(&cfg, &data).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| train(&cfg, &data).unwrap());
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log, b.log);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(
        train(&other, &data).unwrap().model.params(),
        a.model.params()
    );
}

fn smoothed_end(log: &[LogRow], window: usize) -> f64 {
    let tail = &log[log.len() - window..];
    tail.iter().map(|r| r.loss).sum::<f64>() / window as f64
}

#[test]
fn training_loss_decreases_in_every_mode() {
    let (clean, noisy) = noisy_textures(0.1);
    let paired: Vec<Tensor> = clean
        .iter()
        .enumerate()
        .map(|(i, c)| add_gaussian(c, 0.1, 90 + i as u64).unwrap())
        .collect();
    let data = DatasetHandle::new(noisy)
        .with_clean(clean)
        .with_paired(paired);
    for mode in [
        TrainMode::Noise2Clean,
        TrainMode::Noise2Noise,
        TrainMode::Noise2Sim2D,
    ] {
        let t = train(&small(mode, 150), &data).unwrap();
        let end = smoothed_end(&t.log, 20);
        assert!(
            end < t.log[0].loss,
            "{mode}: start {} end {end}",
            t.log[0].loss
        );
    }
    let clean_vol = changing_volume(8, 24);
    let vol = add_gaussian(&clean_vol, 20.0, 5).unwrap();
    let mut cfg = small(TrainMode::Noise2SimVolume, 150);
    cfg.batch = 2;
    let t = train(&cfg, &DatasetHandle::new(vec![vol])).unwrap();
    assert!(smoothed_end(&t.log, 20) < t.log[0].loss);
}

#[test]
fn clean_supervision_improves_psnr() {
    let (clean, noisy) = noisy_textures(0.1);
    let data = DatasetHandle::new(noisy.clone()).with_clean(clean.clone());
    let t = train(&small(TrainMode::Noise2Clean, 200), &data).unwrap();
    let before = psnr(&clean[0], &noisy[0], 1.0).unwrap();
    let after = psnr(&clean[0], &denoise(&t.model, &noisy[0]).unwrap(), 1.0).unwrap();
    assert!(after > before + 1.0, "{before:.2} -> {after:.2}");
}

#[test]
fn identity_model_denoises_to_input() {
    let model = DenoiserModel::new(Architecture::unet(1), Normalization::IDENTITY, 3).unwrap();
    let img = add_gaussian(&texture(TextureKind::Rings, 130), 0.1, 1).unwrap();
    assert_eq!(denoise(&model, &img).unwrap(), img);
    let vol = changing_volume(3, 20);
    let hu = DenoiserModel::new(
        Architecture::unet(1),
        Normalization::for_domain(Domain::Hounsfield),
        3,
    )
    .unwrap();
    assert_eq!(denoise(&hu, &vol).unwrap().data(), vol.data());
}

#[test]
fn tiled_inference_matches_whole_image_forward() {
    let arch = Architecture::UNet {
        in_channels: 1,
        width1: 8,
        width2: 8,
    };
    let model = DenoiserModel::random(arch, Normalization::IDENTITY, 12).unwrap();
    let img = add_gaussian(&texture(TextureKind::Weave, 128), 0.1, 2).unwrap();
    let whole = model.forward(&img).unwrap();
    let tiled = denoise(&model, &img).unwrap();
    let worst = whole
        .data()
        .iter()
        .zip(tiled.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-4, "max tiled/untiled difference {worst}");

    // Odd sizes take the padded path in both.
    let odd = Tensor::new(vec![101, 77], img.data()[..101 * 77].to_vec(), Domain::Raw).unwrap();
    let whole = model.forward(&odd).unwrap();
    let tiled = denoise_tiled(&model, &odd, 48, 12).unwrap();
    let worst = whole
        .data()
        .iter()
        .zip(tiled.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-4, "odd-size tiled/untiled difference {worst}");
}

#[test]
fn refinement_with_clean_similarity_is_the_upper_protocol() {
    let (clean, noisy) = noisy_textures(15.0 / 255.0);
    let data = DatasetHandle::new(noisy);
    let cfg = small(TrainMode::Noise2Sim2D, 20);
    let start = initial_model(&cfg, &data).unwrap();
    let refined = refine_round(start.clone(), &cfg, &data, &clean).unwrap();
    let tables = clean
        .iter()
        .map(|c| knn_similar_pixels(c, cfg.k, cfg.s).unwrap())
        .collect();
    let upper = train_from(start, &cfg, &data.clone().with_neighbors(tables)).unwrap();
    assert_eq!(refined, upper);
}

#[test]
fn one_refinement_round_moves_neighbours_toward_clean_ones() {
    let sigma = 15.0 / 255.0;
    let clean = texture(TextureKind::Checker, 48);
    let noisy = add_gaussian(&clean, sigma, 8).unwrap();
    let data = DatasetHandle::new(vec![noisy.clone()]);
    let mut cfg = small(TrainMode::Noise2Sim2D, 300);
    cfg.crop = Some(32);
    cfg.s = 5;
    let trained = train(&cfg, &data).unwrap();
    let reference = knn_similar_pixels(&clean, cfg.k, cfg.s).unwrap();
    let from_noisy = knn_similar_pixels(&noisy, cfg.k, cfg.s).unwrap();
    let denoised = denoise(&trained.model, &noisy).unwrap();
    let from_denoised = knn_similar_pixels(&denoised, cfg.k, cfg.s).unwrap();
    let before = neighbor_overlap(&from_noisy, &reference).unwrap();
    let after = neighbor_overlap(&from_denoised, &reference).unwrap();
    assert!(after > before, "overlap {before} -> {after}");

    let refined = iterative_refine(trained.model.clone(), &cfg, &data, 1).unwrap();
    let manual = refine_round(trained.model, &cfg, &data, &[denoised]).unwrap();
    assert_eq!(refined, manual);
}

#[test]
fn zcd_is_exactly_zero_for_identical_similar_sets() {
    let img = Tensor::filled(vec![10, 10], 0.3, Domain::UnitInterval).unwrap();
    let table = knn_similar_pixels(&img, 4, 3).unwrap();
    let data = DatasetHandle::new(vec![img]).with_neighbors(vec![table]);
    let est = estimate_zcd(&data, 1000, 3).unwrap();
    assert!(est.means[0].data().iter().all(|&v| v == 0.0));
    assert_eq!((est.min, est.max), (0.0, 0.0));
    assert!(estimate_zcd(&data, 0, 3).is_err());
}

#[test]
fn zcd_mean_stays_within_clt_bound() {
    let clean = texture(TextureKind::Stripes, 16);
    let noisy = add_gaussian(&clean, 0.05, 3).unwrap();
    let table = knn_similar_pixels(&noisy, 6, 3).unwrap();
    let data = DatasetHandle::new(vec![noisy]).with_neighbors(vec![table]);
    let m = 4000;
    let est = estimate_zcd(&data, m, 17).unwrap();
    for (mean, var) in est.means[0].data().iter().zip(est.variances[0].data()) {
        let se = (*var as f64 / m as f64).sqrt();
        assert!(
            (*mean as f64).abs() <= 5.0 * se + 1e-7,
            "mean {mean} se {se}"
        );
    }
    // Same seed, same estimate regardless of scheduling.
    assert_eq!(estimate_zcd(&data, m, 17).unwrap(), est);
}

#[test]
fn threshold_that_masks_everything_aborts_the_run() {
    let vol = changing_volume(6, 16);
    let noisy = add_gaussian(&vol, 40.0, 1).unwrap();
    let mut cfg = small(TrainMode::Noise2SimVolume, 5);
    cfg.d_th = Some(0.0);
    cfg.crop = None;
    match train(&cfg, &DatasetHandle::new(vec![noisy])) {
        Err(Error::DegenerateSampleSkipped { skipped, total }) => assert_eq!(skipped, total),
        other => panic!("expected an abort, got {other:?}"),
    }
}

#[test]
fn trained_checkpoint_round_trips_through_a_file() {
    let (_, noisy) = noisy_textures(0.1);
    let t = train(
        &small(TrainMode::Noise2Sim2D, 5),
        &DatasetHandle::new(noisy.clone()),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.n2sm");
    let ckpt = Checkpoint {
        model: t.model.clone(),
        optim: Some(t.optim.clone()),
    };
    save_model(&ckpt, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(
        back.model.forward(&noisy[0]).unwrap(),
        t.model.forward(&noisy[0]).unwrap()
    );
}
