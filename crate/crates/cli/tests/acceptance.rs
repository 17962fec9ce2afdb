//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every line is printed even
//! when all criteria pass. Pass a substring argument to run a subset, e.g.
//! `cargo test --test acceptance -- ablation`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use noise2sim::metrics::{nlm_denoise, psnr, NlmParams};
use noise2sim::nn::model::{residual_backward, residual_forward};
use noise2sim::nn::{Architecture, DenoiserModel, Normalization, OptimState, Pattern};
use noise2sim::noise::add_gaussian;
use noise2sim::search::knn_similar_pixels;
use noise2sim::tensor::{Domain, Tensor};
use noise2sim::textures::texture_set;
use noise2sim::training::{self, fit, DatasetHandle, ModelKind, Sample, TrainConfig, TrainMode};
use noise2sim::volume::{dissimilar_mask, distance_map, DissimilarMask, LossKind, SliceSampler};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp};
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (
            "similar-target-equivalence",
            Duration::from_secs(120),
            similar_target_equivalence,
        ),
        (
            "search-exactness",
            Duration::from_secs(60),
            search_exactness,
        ),
        (
            "gradient-correctness",
            Duration::from_secs(60),
            gradient_correctness,
        ),
        ("mask-oracle", Duration::from_secs(10), mask_oracle),
        ("mask-ablation", Duration::from_secs(600), mask_ablation),
        (
            "denoising-improvement",
            Duration::from_secs(900),
            denoising_improvement,
        ),
        ("zcd-estimator", Duration::from_secs(60), zcd_estimator),
        (
            "slice-sampler-statistics",
            Duration::from_secs(10),
            slice_sampler_statistics,
        ),
        ("determinism", Duration::from_secs(300), determinism),
        ("l1-vs-mse", Duration::from_secs(120), l1_vs_mse),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_budget = elapsed <= *budget;
        let pass = result.pass && in_budget;
        if !pass {
            failed += 1;
        }
        let budget_note = if in_budget {
            String::new()
        } else {
            format!("; over the {}s budget", budget.as_secs())
        };
        println!(
            "{} [{}] {name} ({:.1}s): {}{budget_note}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Least-squares fit of `target - x` on the reflect-padded 3x3 patch of `x`
/// plus a constant, over the pixels in `selected`.
fn least_squares(x: &Tensor, target: &[f32], selected: &[usize]) -> Vec<f64> {
    let (h, w, _) = x.image_shape().unwrap();
    let mut a = DMatrix::<f64>::zeros(selected.len(), 10);
    let mut b = DVector::<f64>::zeros(selected.len());
    for (row, &p) in selected.iter().enumerate() {
        let (u, v) = ((p / w) as isize, (p % w) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let q = mirror(u + dy, h) * w + mirror(v + dx, w);
                a[(row, ((dy + 1) * 3 + dx + 1) as usize)] = x.data()[q] as f64;
            }
        }
        a[(row, 9)] = 1.0;
        b[row] = target[p] as f64 - x.data()[p] as f64;
    }
    let normal = a.transpose() * &a;
    let rhs = a.transpose() * b;
    normal
        .cholesky()
        .expect("full-rank design")
        .solve(&rhs)
        .iter()
        .copied()
        .collect()
}

/// Mirror without repeating the edge sample, by repeated folding.
fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Linear 3x3 model trained on clean targets versus on noisy similar-pixel
/// targets, on a 120x120 image tiled from a 40x40 block of i.i.d. values so
/// that every interior pixel has exactly eight exact duplicates.
fn similar_target_equivalence() -> Outcome {
    let (n, block, sigma, steps, lr) = (120usize, 40usize, 0.1f32, 5000u64, 1e-2f32);
    let mut r = StdRng::seed_from_u64(11);
    let tile: Vec<f32> = (0..block * block)
        .map(|_| r.random_range(0.2..0.8))
        .collect();
    let clean_data = (0..n * n)
        .map(|i| tile[(i / n % block) * block + i % n % block])
        .collect();
    let clean = Tensor::new(vec![n, n], clean_data, Domain::UnitInterval).unwrap();
    let noisy = add_gaussian(&clean, sigma, 12).unwrap();
    let table = knn_similar_pixels(&clean, 8, 3).unwrap();

    // Only block positions whose nine copies are all away from the border.
    let mut pool: Vec<usize> = (0..n * n)
        .filter(|p| {
            let (a, b) = (p / n % block, p % n % block);
            a > 0 && b > 0 && a < block - 1 && b < block - 1
        })
        .collect();
    pool.shuffle(&mut StdRng::seed_from_u64(13));
    for &p in &pool {
        for &(u, v) in table.neighbors(p / n, p % n) {
            assert_eq!(
                clean.data()[u as usize * n + v as usize],
                clean.data()[p],
                "similar pixel is not a duplicate"
            );
        }
    }
    // Similar-pixel target: the noisy value of one random non-self neighbour.
    let mut pick = StdRng::seed_from_u64(14);
    let sim: Vec<f32> = (0..n * n)
        .map(|p| {
            let nb = table.neighbors(p / n, p % n);
            let (u, v) = nb[pick.random_range(0..nb.len())];
            noisy.data()[u as usize * n + v as usize]
        })
        .collect();
    let sim = noisy.map_data(sim).unwrap();

    let train = |target: &Tensor, mask: &DissimilarMask| -> Vec<f64> {
        let arch = Architecture::LinearConv { in_channels: 1 };
        let mut model = DenoiserModel::new(arch, Normalization::IDENTITY, 1).unwrap();
        let mut opt = OptimState::new(&model, lr, steps);
        let sample = Sample {
            input: noisy.clone(),
            target: target.clone(),
            mask: Some(mask.clone()),
        };
        fit(&mut model, &mut opt, LossKind::Mse, steps, |_| {
            Ok(vec![sample.clone()])
        })
        .unwrap();
        model.flat_params().iter().map(|&v| v as f64).collect()
    };

    let mut gaps = Vec::new();
    let mut oracle_err = 0.0f64;
    for count in [100usize, 1_000, 10_000] {
        let selected = &pool[..count];
        let mut excluded = vec![true; n * n];
        selected.iter().for_each(|&p| excluded[p] = false);
        let mask = DissimilarMask::from_flags(n, n, 0.0, excluded).unwrap();
        let theta_c = train(&clean, &mask);
        let theta_s = train(&sim, &mask);
        oracle_err = oracle_err
            .max(max_abs_diff(
                &theta_c,
                &least_squares(&noisy, clean.data(), selected),
            ))
            .max(max_abs_diff(
                &theta_s,
                &least_squares(&noisy, sim.data(), selected),
            ));
        gaps.push(max_abs_diff(&theta_c, &theta_s));
    }
    let pass = gaps[1] < 0.05
        && gaps[2] < 0.02
        && gaps[0] > gaps[1]
        && gaps[1] > gaps[2]
        && oracle_err < 1e-4;
    outcome(
        pass,
        format!(
            "L-inf gap N=1e2: {:.4}, N=1e3: {:.4} (< 0.05), N=1e4: {:.4} (< 0.02); trained vs least squares {:.1e}",
            gaps[0], gaps[1], gaps[2], oracle_err
        ),
    )
}

fn search_exactness() -> Outcome {
    let mut r = StdRng::seed_from_u64(2);
    let mut tie_images = 0;
    for case in 0..200 {
        let h = r.random_range(2..=16usize);
        let w = r.random_range(2..=16usize);
        let c = r.random_range(1..=3usize);
        let s = [1, 3, 5][r.random_range(0..3)];
        let k = r.random_range(1..=8usize.min(h * w - 1));
        // Every other image uses five grey levels so that ties are common.
        let quantized = case % 2 == 0;
        let data: Vec<f32> = (0..h * w * c)
            .map(|_| {
                if quantized {
                    r.random_range(0..5) as f32 / 4.0
                } else {
                    r.random_range(0.0..1.0)
                }
            })
            .collect();
        tie_images += quantized as usize;
        let img = Tensor::image(h, w, c, data.clone(), Domain::UnitInterval).unwrap();
        let table = knn_similar_pixels(&img, k, s).unwrap();
        let rad = (s / 2) as isize;
        for p in 0..h * w {
            let (u, v) = ((p / w) as isize, (p % w) as isize);
            let mut all: Vec<(f64, usize)> = (0..h * w)
                .filter(|&q| q != p)
                .map(|q| {
                    let (y, x) = ((q / w) as isize, (q % w) as isize);
                    let mut d = 0.0f64;
                    for dy in -rad..=rad {
                        for dx in -rad..=rad {
                            let a = (mirror(u + dy, h) * w + mirror(v + dx, w)) * c;
                            let b = (mirror(y + dy, h) * w + mirror(x + dx, w)) * c;
                            for ch in 0..c {
                                let e = data[a + ch] as f64 - data[b + ch] as f64;
                                d += e * e;
                            }
                        }
                    }
                    (d, q)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got = table.neighbors(p / w, p % w);
            let dists = table.distances(p / w, p % w);
            for j in 0..k {
                let (d, q) = all[j];
                if got[j] != ((q / w) as u32, (q % w) as u32)
                    || (dists[j] as f64 - d.sqrt()).abs() > 1e-5
                {
                    return outcome(
                        false,
                        format!("image {case} ({h}x{w}x{c}, k={k}, s={s}) pixel {p}: neighbour {j} differs"),
                    );
                }
            }
        }
    }
    outcome(
        true,
        format!("200 images ({tie_images} with heavy ties) match the brute-force search"),
    )
}

/// Every parameter of a small UNet against central differences (step 1e-3)
/// in double precision. When a ReLU gate or pooling choice flips inside the
/// difference interval, the difference is recomputed with the gates of the
/// unperturbed pass held fixed.
fn gradient_correctness() -> Outcome {
    let arch = Architecture::UNet {
        in_channels: 1,
        width1: 4,
        width2: 8,
    };
    let norm = Normalization::IDENTITY;
    let (h, w, step) = (8usize, 8usize, 1e-3f64);
    let (mut worst, mut checked, mut frozen) = (0.0f64, 0usize, 0usize);
    for seed in 0..10u64 {
        let model = DenoiserModel::random(arch, norm, 100 + seed).unwrap();
        let mut params: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|t| t.iter().map(|&v| v as f64).collect())
            .collect();
        let mut r = StdRng::seed_from_u64(seed);
        let x: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
        let target: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
        let loss = |p: &[Vec<f64>], frozen: Option<&Pattern>| -> (f64, Pattern) {
            let (out, cache) = residual_forward(&arch, norm, p, &x, h, w, frozen).unwrap();
            let l = out
                .iter()
                .zip(&target)
                .map(|(o, t)| 0.5 * (o - t) * (o - t))
                .sum();
            (l, cache.pattern())
        };
        let (out, cache) = residual_forward(&arch, norm, &params, &x, h, w, None).unwrap();
        let g: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
        let (grads, _) = residual_backward(&arch, norm, &params, &cache, &g).unwrap();
        let base = cache.pattern();
        for t in 0..params.len() {
            for i in 0..params[t].len() {
                let v = params[t][i];
                params[t][i] = v + step;
                let (lp, pp) = loss(&params, None);
                params[t][i] = v - step;
                let (lm, pm) = loss(&params, None);
                let mut numeric = (lp - lm) / (2.0 * step);
                if pp != base || pm != base {
                    frozen += 1;
                    params[t][i] = v + step;
                    let lp = loss(&params, Some(&base)).0;
                    params[t][i] = v - step;
                    let lm = loss(&params, Some(&base)).0;
                    numeric = (lp - lm) / (2.0 * step);
                }
                params[t][i] = v;
                let a = grads[t][i];
                let scale = a.abs().max(numeric.abs());
                let rel = if scale < 1e-10 {
                    0.0
                } else {
                    (a - numeric).abs() / scale
                };
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    outcome(
        worst < 1e-3,
        format!("{checked} parameter gradients over 10 inputs, max relative error {worst:.2e} (< 1e-3); {frozen} kink-straddling checks used frozen gates"),
    )
}

fn mask_oracle() -> Outcome {
    let mut r = StdRng::seed_from_u64(4);
    let (h, w, c) = (16usize, 16usize, 3usize);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let s = [1, 3, 5, 7][case % 4];
        let a: Vec<f32> = (0..h * w * c).map(|_| r.random_range(0.0..1.0)).collect();
        let b: Vec<f32> = (0..h * w * c).map(|_| r.random_range(0.0..1.0)).collect();
        let ta = Tensor::image(h, w, c, a.clone(), Domain::UnitInterval).unwrap();
        let tb = Tensor::image(h, w, c, b.clone(), Domain::UnitInterval).unwrap();
        let d = distance_map(&ta, &tb, s).unwrap();
        let rad = (s / 2) as isize;
        let mut expected = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut per_channel = 0.0;
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for dy in -rad..=rad {
                        for dx in -rad..=rad {
                            let q = (mirror(y as isize + dy, h) * w + mirror(x as isize + dx, w))
                                * c
                                + ch;
                            sum += a[q] as f64 - b[q] as f64;
                        }
                    }
                    per_channel += (sum / (s * s) as f64).abs();
                }
                expected[y * w + x] = per_channel / c as f64;
            }
        }
        let got: Vec<f64> = d.data().iter().map(|&v| v as f64).collect();
        worst = worst.max(max_abs_diff(&got, &expected));
        // Thresholds at an attained value, just below it, and at random.
        let at = d.data()[r.random_range(0..h * w)];
        for th in [at, at - 1e-4, r.random_range(0.0..0.3f32)] {
            let m = dissimilar_mask(&d, th).unwrap();
            for (e, &v) in m.excluded().iter().zip(d.data()) {
                if *e != (v > th) {
                    return outcome(
                        false,
                        format!("case {case}: mask disagrees with `d > {th}`"),
                    );
                }
            }
        }
        let exact = dissimilar_mask(&d, at).unwrap();
        if d.data()
            .iter()
            .zip(exact.excluded())
            .any(|(&v, &e)| v == at && e)
        {
            return outcome(
                false,
                "a pixel exactly at the threshold was excluded".into(),
            );
        }
    }
    outcome(
        worst <= 1e-6,
        format!(
            "50 random 16x16x3 pairs: max |d - oracle| {worst:.1e} (<= 1e-6); thresholding strict"
        ),
    )
}

/// Soft-tissue phantom whose right-most fifth holds bright discs that are
/// redrawn independently on every slice.
fn ablation_volume(slices: usize, n: usize, seed: u64) -> Tensor {
    let band = n - n / 5;
    let centre = (n as f32 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(slices * n * n);
    for z in 0..slices {
        let mut r = StdRng::seed_from_u64(seed * 1000 + z as u64);
        let discs: Vec<(f32, f32, f32)> = (0..6)
            .map(|_| {
                (
                    r.random_range(0.0..n as f32),
                    band as f32 + r.random_range(0.0..(n - band) as f32),
                    r.random_range(2.0..5.0),
                )
            })
            .collect();
        for y in 0..n {
            for x in 0..n {
                let (yf, xf) = (y as f32, x as f32);
                let v = if x >= band {
                    let hit = discs
                        .iter()
                        .any(|&(by, bx, rad)| (yf - by).hypot(xf - bx) < rad);
                    if hit {
                        250.0
                    } else {
                        0.0
                    }
                } else if (yf - centre).hypot(xf - centre) < 0.45 * n as f32 {
                    40.0 + 60.0 * (yf / 5.0).sin() * (xf / 7.0).cos()
                } else {
                    -200.0
                };
                data.push(v);
            }
        }
    }
    Tensor::new(vec![slices, n, n], data, Domain::Hounsfield).unwrap()
}

fn mask_ablation() -> Outcome {
    let clean = ablation_volume(32, 64, 5);
    let noisy = add_gaussian(&clean, 20.0, 9).unwrap();
    let noisy_psnr = psnr(&clean, &noisy, 400.0).unwrap();
    let run = |d_th: f32| -> f64 {
        let mut cfg = TrainConfig::new(TrainMode::Noise2SimVolume, 3);
        cfg.steps = 1000;
        cfg.crop = Some(32);
        cfg.lr0 = 2e-3;
        cfg.d_th = Some(d_th);
        cfg.model = ModelKind::UNet {
            width1: 8,
            width2: 16,
        };
        let trained = training::train(&cfg, &DatasetHandle::new(vec![noisy.clone()])).unwrap();
        psnr(
            &clean,
            &training::denoise(&trained.model, &noisy).unwrap(),
            400.0,
        )
        .unwrap()
    };
    let masked = run(30.0);
    // An infinite threshold never excludes a pixel.
    let unmasked = run(f32::INFINITY);
    outcome(
        masked >= unmasked + 0.5,
        format!("masked {masked:.2} dB vs unmasked {unmasked:.2} dB (noisy {noisy_psnr:.2} dB); need +0.5 dB"),
    )
}

fn denoising_improvement() -> Outcome {
    let sigma = 25.0 / 255.0;
    let clean = texture_set(64);
    let noisy: Vec<Tensor> = clean
        .iter()
        .enumerate()
        .map(|(i, c)| add_gaussian(c, sigma, 100 + i as u64).unwrap())
        .collect();
    let mean_psnr = |outs: &[Tensor]| -> f64 {
        clean
            .iter()
            .zip(outs)
            .map(|(c, o)| psnr(c, o, 1.0).unwrap())
            .sum::<f64>()
            / clean.len() as f64
    };
    let noisy_psnr = mean_psnr(&noisy);
    let (mut best_nlm, mut best_h) = (f64::NEG_INFINITY, 0.0);
    for factor in [0.5f32, 0.75, 1.0, 1.5, 2.0] {
        let params = NlmParams {
            h: factor * sigma,
            patch_radius: 3,
            search_radius: 10,
        };
        let outs: Vec<Tensor> = noisy
            .iter()
            .map(|n| nlm_denoise(n, &params).unwrap())
            .collect();
        let v = mean_psnr(&outs);
        if v > best_nlm {
            (best_nlm, best_h) = (v, factor);
        }
    }
    let mut cfg = TrainConfig::new(TrainMode::Noise2Sim2D, 7);
    cfg.steps = 2000;
    cfg.k = 16;
    cfg.s = 7;
    cfg.crop = Some(32);
    cfg.lr0 = 2e-3;
    cfg.model = ModelKind::UNet {
        width1: 16,
        width2: 32,
    };
    let trained = training::train(&cfg, &DatasetHandle::new(noisy.clone())).unwrap();
    let outs: Vec<Tensor> = noisy
        .iter()
        .map(|n| training::denoise(&trained.model, n).unwrap())
        .collect();
    let ours = mean_psnr(&outs);
    outcome(
        ours >= noisy_psnr + 2.0 && ours > best_nlm,
        format!(
            "mean PSNR noisy {noisy_psnr:.2} dB, NLM best (h = {best_h} sigma) {best_nlm:.2} dB, trained {ours:.2} dB"
        ),
    )
}

/// 17x17 image built from a mirror-symmetric period-4 pattern, so that the
/// reflect-padded image is exactly periodic and every pixel's similar pixels
/// (searched on the clean image) are exact duplicates.
fn zcd_estimator() -> Outcome {
    let (n, m) = (17usize, 100_000usize);
    let mut r = StdRng::seed_from_u64(7);
    let levels: Vec<f32> = (0..9).map(|_| r.random_range(0.2..0.8)).collect();
    let fold = |i: usize| [0, 1, 2, 1][i % 4];
    let clean = Tensor::new(
        vec![n, n],
        (0..n * n)
            .map(|i| levels[fold(i / n) * 3 + fold(i % n)])
            .collect(),
        Domain::UnitInterval,
    )
    .unwrap();
    let noisy = add_gaussian(&clean, 10.0 / 255.0, 8).unwrap();
    let table = knn_similar_pixels(&clean, 8, 3).unwrap();
    let data = DatasetHandle::new(vec![noisy]).with_neighbors(vec![table]);
    let est = training::estimate_zcd(&data, m, 5).unwrap();
    let worst = est.min.abs().max(est.max.abs()) as f64;
    let max_se = est.variances[0]
        .data()
        .iter()
        .map(|&v| (v as f64 / m as f64).sqrt())
        .fold(0.0, f64::max);
    outcome(
        worst < 1e-3,
        format!(
            "17x17, M = 1e5: mean difference in [{:.2e}, {:.2e}], max |mean| {worst:.2e} (< 1e-3); largest standard error {max_se:.1e}, bound {:.1} SE",
            est.min,
            est.max,
            1e-3 / max_se
        ),
    )
}

fn slice_sampler_statistics() -> Outcome {
    let (slices, k, draws) = (24usize, 3usize, 10_000u64);
    let sampler = SliceSampler::new(slices, k, 99).unwrap();
    let mut min_p = 1.0f64;
    for i in [0usize, 1, 12, 22, 23] {
        let window: Vec<usize> = (i.saturating_sub(k)..=(i + k).min(slices - 1))
            .filter(|&j| j != i)
            .collect();
        let mut counts = vec![0u64; window.len()];
        for d in 0..draws {
            let j = sampler.sample(i, d).unwrap();
            match window.iter().position(|&c| c == j) {
                Some(pos) => counts[pos] += 1,
                None => return outcome(false, format!("slice {i}: drew {j} outside the window")),
            }
        }
        let expected = draws as f64 / window.len() as f64;
        let stat: f64 = counts
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((window.len() - 1) as f64).unwrap();
        min_p = min_p.min(1.0 - dist.cdf(stat));
    }
    outcome(
        min_p > 0.01,
        format!("chi-square over 1e4 draws for 5 reference slices, smallest p-value {min_p:.3} (> 0.01)"),
    )
}

/// simulate, search, train, denoise and eval inside `dir`, using relative
/// paths so that manifests do not depend on the directory name.
fn pipeline(dir: &Path) -> String {
    std::fs::create_dir_all(dir.join("data")).unwrap();
    let texture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/texture64.pgm");
    std::fs::copy(texture, dir.join("clean.pgm")).unwrap();
    let bin = env!("CARGO_BIN_EXE_noise2sim");
    let run = |args: &[&str]| -> String {
        let out = Command::new(bin)
            .args(args)
            .current_dir(dir)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    run(&[
        "simulate",
        "--kind",
        "gaussian",
        "--std",
        "0.098",
        "--seed",
        "11",
        "clean.pgm",
        "data/tex.n2st",
    ]);
    run(&[
        "search",
        "--k",
        "16",
        "--s",
        "7",
        "data/tex.n2st",
        "data/tex.n2sn",
    ]);
    run(&[
        "train",
        "--mode",
        "noise2sim",
        "--k",
        "16",
        "--s",
        "7",
        "--steps",
        "200",
        "--seed",
        "3",
        "--crop",
        "32",
        "--lr",
        "0.002",
        "--width1",
        "8",
        "--width2",
        "16",
        "data",
        "model.n2sm",
    ]);
    run(&["denoise", "model.n2sm", "data/tex.n2st", "denoised.n2st"]);
    let before = run(&["eval", "--out", "noisy.csv", "clean.pgm", "data/tex.n2st"]);
    let after = run(&[
        "eval",
        "--out",
        "denoised.csv",
        "clean.pgm",
        "denoised.n2st",
    ]);
    format!("{before}{after}")
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out_a = pipeline(a.path());
    let out_b = pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&str> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let psnrs: Vec<f64> = out_a
        .lines()
        .filter_map(|l| l.split(',').next().and_then(|v| v.parse().ok()))
        .collect();
    let improved = psnrs.len() == 2 && psnrs[1] > psnrs[0];
    let manifests = ta
        .iter()
        .filter(|(n, _)| n.ends_with(".manifest.txt"))
        .count();
    outcome(
        ta.len() == tb.len() && differing.is_empty() && out_a == out_b && improved,
        format!(
            "{} files incl. {manifests} manifests byte-identical across two runs (differing: {differing:?}); PSNR {:.2} -> {:.2} dB",
            ta.len(),
            psnrs.first().copied().unwrap_or(f64::NAN),
            psnrs.get(1).copied().unwrap_or(f64::NAN)
        ),
    )
}

/// A constant predictor (linear model fed zeros, so only the bias acts)
/// fitted to `0.5 + 0.1 (E - ln 2)`, `E ~ Exp(1)`: median 0.5, mean
/// `0.5 + 0.1 (1 - ln 2)`.
fn l1_vs_mse() -> Outcome {
    let (n, scale) = (64usize, 0.1f64);
    let count = (n * n) as f64;
    let exp = Exp::new(1.0).unwrap();
    let mut r = StdRng::seed_from_u64(21);
    let ln2 = std::f64::consts::LN_2;
    let target: Vec<f32> = (0..n * n)
        .map(|_| (0.5 + scale * (exp.sample(&mut r) - ln2)) as f32)
        .collect();
    let target = Tensor::new(vec![n, n], target, Domain::UnitInterval).unwrap();
    let zeros = Tensor::filled(vec![n, n], 0.0, Domain::UnitInterval).unwrap();
    let data = DatasetHandle::new(vec![zeros.clone()]).with_clean(vec![target]);
    let fit_constant = |loss: LossKind| -> f64 {
        let mut cfg = TrainConfig::new(TrainMode::Noise2Clean, 4);
        cfg.loss = loss;
        cfg.steps = 3000;
        cfg.batch = 1;
        cfg.lr0 = 1e-2;
        cfg.augment = false;
        cfg.model = ModelKind::Linear;
        let trained = training::train(&cfg, &data).unwrap();
        trained.model.forward(&zeros).unwrap().data()[0] as f64
    };
    let (median, mean) = (0.5, 0.5 + scale * (1.0 - ln2));
    // Standard errors: sigma / sqrt(n) for the mean, 1 / (2 f(median) sqrt(n))
    // for the median, with f(median) = 0.5 / scale for this distribution.
    let se_mean = scale / count.sqrt();
    let se_median = 1.0 / (2.0 * (0.5 / scale) * count.sqrt());
    let l1 = fit_constant(LossKind::L1);
    let l2 = fit_constant(LossKind::Mse);
    let pass = (l1 - median).abs() <= 3.0 * se_median && (l2 - mean).abs() <= 3.0 * se_mean;
    outcome(
        pass,
        format!(
            "L1 fit {l1:.4} vs median {median:.4} (tol {:.4}); MSE fit {l2:.4} vs mean {mean:.4} (tol {:.4})",
            3.0 * se_median,
            3.0 * se_mean
        ),
    )
}
