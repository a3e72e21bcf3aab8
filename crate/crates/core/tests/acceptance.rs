//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Oracles here are written independently of the library code.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use brainstreams::data::{generate_synthetic_dataset, prepare_splits, RoiName, SynthConfig};
use brainstreams::diffusion_prior::{
    ddpm_loss, ddpm_loss_grad, forward_noise, sample, train_unconditional, NoiseSchedule,
    PriorConfig, PriorTrainConfig, ScheduleConfig,
};
use brainstreams::harness::{Experiment, ExperimentConfig, Stream};
use brainstreams::image::Image;
use brainstreams::metrics::{
    evaluate, feature_distance, pixcorr_raw, ssim_raw, two_way_identification, DistanceKind,
    ExtractorSet, MetricConfig, SsimParams,
};
use brainstreams::nn::{
    huber_loss, huber_loss_grad, info_nce_loss, info_nce_loss_grad, mse_loss, mse_loss_grad,
    AdamConfig, MlpBackboneConfig, DEFAULT_NCE_TEMPERATURE,
};
use brainstreams::rng::{gaussian_vec, rng_from_seed};
use brainstreams::stream_high::{predict_h, train_high, HighConfig, ReferenceTextCodec, TextCodec};
use brainstreams::stream_low::{
    compute_target_latent, low_loss, low_loss_grad, predict_l, train_low, BlockProjectionCodec,
    FeatureTeacher, LatentCodec, LowConfig, LowLossWeights, RandomConvTeacher,
};
use brainstreams::stream_mid::{
    compute_target_embedding, mid_loss, mid_loss_grad, predict_m_mlp, train_mid, MidConfig,
    MidLossWeights, PatchStatsEncoder,
};
use brainstreams::training::TrainSchedule;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- oracles

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma).powi(2);
        sbb += (b[i] - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn oracle_gray(im: &Image) -> Vec<f64> {
    let (h, w, c) = im.shape();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(if c == 1 {
                im.at(y, x, 0)
            } else {
                0.2125 * im.at(y, x, 0) + 0.7154 * im.at(y, x, 1) + 0.0721 * im.at(y, x, 2)
            });
        }
    }
    out
}

/// Direct sliding-window SSIM with a 2-D Gaussian window and two-pass
/// weighted moments.
fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    let (h, w, _) = a.shape();
    let (ga, gb) = (oracle_gray(a), oracle_gray(b));
    let k = 11usize;
    let sigma: f64 = 1.5;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let at = |p: &[f64], i: usize, j: usize| p[(y + i) * w + x + j];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    ma += win[i * k + j] * at(&ga, i, j);
                    mb += win[i * k + j] * at(&gb, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (da, db) = (at(&ga, i, j) - ma, at(&gb, i, j) - mb);
                    va += win[i * k + j] * da * da;
                    vb += win[i * k + j] * db * db;
                    cov += win[i * k + j] * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn oracle_two_way(recon: &[Vec<f64>], gt: &[Vec<f64>]) -> f64 {
    let n = recon.len();
    let mut wins = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j && oracle_pearson(&recon[i], &gt[i]) > oracle_pearson(&recon[i], &gt[j]) {
                wins += 1;
            }
        }
    }
    100.0 * wins as f64 / (n * (n - 1)) as f64
}

fn oracle_corr_distance(recon: &[Vec<f64>], gt: &[Vec<f64>]) -> f64 {
    recon
        .iter()
        .zip(gt)
        .map(|(a, b)| 1.0 - oracle_pearson(a, b))
        .sum::<f64>()
        / recon.len() as f64
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Image {
    let data = (0..h * w * c).map(|_| rng.gen::<f64>()).collect();
    Image::new(h, w, c, data).unwrap()
}

/// Central differences along each direction in `dirs`.
fn fd_directional(f: &dyn Fn(&[f64]) -> f64, x: &[f64], dirs: &[Vec<f64>], h: f64) -> Vec<f64> {
    dirs.iter()
        .map(|v| {
            let plus: Vec<f64> = x.iter().zip(v).map(|(a, d)| a + h * d).collect();
            let minus: Vec<f64> = x.iter().zip(v).map(|(a, d)| a - h * d).collect();
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn unit_dirs(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        })
        .collect()
}

fn vec_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(analytic).max(scale(numeric)).max(1e-12)
}

fn project(g: &[f64], dirs: &[Vec<f64>]) -> Vec<f64> {
    dirs.iter()
        .map(|v| g.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

// ------------------------------------------------------------- criteria

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(101);
    let params = SsimParams::default();
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(11..40), rng.gen_range(11..40));
        let c = if rng.gen_bool(0.5) { 1 } else { 3 };
        let a = random_image(&mut rng, h, w, c);
        let b = random_image(&mut rng, h, w, c);
        worst[0] = worst[0].max(rel_err(
            pixcorr_raw(&a, &b).unwrap(),
            oracle_pearson(&a.data, &b.data),
        ));
        worst[1] = worst[1].max(rel_err(
            ssim_raw(&a, &b, &params).unwrap(),
            oracle_ssim(&a, &b),
        ));

        let n = rng.gen_range(2..12);
        let d = rng.gen_range(3..40);
        let gt: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d)).collect();
        let noise = rng.gen_range(0.1..3.0);
        let recon: Vec<Vec<f64>> = gt
            .iter()
            .map(|g| {
                g.iter()
                    .zip(gaussian_vec(&mut rng, d))
                    .map(|(a, z)| a + noise * z)
                    .collect()
            })
            .collect();
        worst[2] = worst[2].max(rel_err(
            two_way_identification(&recon, &gt).unwrap(),
            oracle_two_way(&recon, &gt),
        ));
        worst[3] = worst[3].max(rel_err(
            feature_distance(&recon, &gt, DistanceKind::Correlation).unwrap(),
            oracle_corr_distance(&recon, &gt),
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    check(
        max <= 1e-6 && secs < 30.0,
        format!(
            "50 instances; max rel err pixcorr {:.1e}, ssim {:.1e}, two-way {:.1e}, distance {:.1e}; {secs:.1}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn identity_is_perfect() -> Outcome {
    let ds = generate_synthetic_dataset(&SynthConfig::default(), 4).unwrap();
    let images: Vec<Image> = ds
        .manifest
        .stimuli
        .values()
        .take(8)
        .map(|s| s.image.clone())
        .collect();
    let report = evaluate(
        &images,
        &images,
        &ExtractorSet::reference(2),
        &MetricConfig::default(),
    )
    .unwrap();
    let ok = (report.pixcorr - 1.0).abs() < 1e-9
        && (report.ssim - 1.0).abs() < 1e-9
        && report.twoway.values().all(|p| *p == 100.0)
        && report.dist.values().all(|d| d.abs() < 1e-9);
    check(
        ok,
        format!(
            "pixcorr {:.12}, ssim {:.12}, two-way {:?}, dist {:?}",
            report.pixcorr, report.ssim, report.twoway, report.dist
        ),
    )
}

fn chance_level() -> Outcome {
    let mut rng = rng_from_seed(303);
    let trials = 200;
    let mut total = 0.0;
    for _ in 0..trials {
        let recon: Vec<Vec<f64>> = (0..10).map(|_| gaussian_vec(&mut rng, 64)).collect();
        let gt: Vec<Vec<f64>> = (0..10).map(|_| gaussian_vec(&mut rng, 64)).collect();
        total += two_way_identification(&recon, &gt).unwrap();
    }
    let mean = total / trials as f64;
    check(
        (45.0..=55.0).contains(&mean),
        format!("mean {mean:.2}% over {trials} trials of N=10"),
    )
}

fn gradient_suite() -> Outcome {
    let mut rng = rng_from_seed(404);
    let h = 1e-5;
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let p = gaussian_vec(&mut rng, 12);
    let t = gaussian_vec(&mut rng, 12);
    let f = |x: &[f64]| mse_loss(x, &t).unwrap();
    errs.push((
        "mse",
        vec_rel_err(
            &mse_loss_grad(&p, &t).unwrap().1,
            &fd_directional(&f, &p, &unit_dirs(12), h),
        ),
    ));

    // residuals kept at least 0.1 away from the kink at |r| = delta
    let delta = 1.0;
    let t: Vec<f64> = vec![0.0; 16];
    let p: Vec<f64> = (0..16)
        .map(|i| {
            let mag = if i % 2 == 0 {
                rng.gen_range(0.0..0.9)
            } else {
                rng.gen_range(1.1..3.0)
            };
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let f = |x: &[f64]| huber_loss(x, &t, delta).unwrap();
    errs.push((
        "huber",
        vec_rel_err(
            &huber_loss_grad(&p, &t, delta).unwrap().1,
            &fd_directional(&f, &p, &unit_dirs(16), h),
        ),
    ));

    let (b, d) = (4, 6);
    let p = gaussian_vec(&mut rng, b * d);
    let t = gaussian_vec(&mut rng, b * d);
    let tau = DEFAULT_NCE_TEMPERATURE;
    let g = info_nce_loss_grad(&p, &t, b, tau).unwrap();
    let fp = |x: &[f64]| info_nce_loss(x, &t, b, tau).unwrap();
    let ft = |x: &[f64]| info_nce_loss(&p, x, b, tau).unwrap();
    errs.push((
        "info_nce/pred",
        vec_rel_err(&g.pred, &fd_directional(&fp, &p, &unit_dirs(b * d), h)),
    ));
    errs.push((
        "info_nce/target",
        vec_rel_err(&g.target, &fd_directional(&ft, &t, &unit_dirs(b * d), h)),
    ));

    let x0 = gaussian_vec(&mut rng, 10);
    let xh = gaussian_vec(&mut rng, 10);
    let f = |x: &[f64]| ddpm_loss(x, &x0).unwrap();
    errs.push((
        "ddpm",
        vec_rel_err(
            &ddpm_loss_grad(&xh, &x0).unwrap().1,
            &fd_directional(&f, &xh, &unit_dirs(10), h),
        ),
    ));

    let (b, d) = (3, 5);
    let gt = gaussian_vec(&mut rng, b * d);
    let x0_hat = gaussian_vec(&mut rng, b * d);
    let m_mlp: Vec<f64> = gt
        .iter()
        .map(|v| v + 0.3 * rng.gen_range(-1.0..1.0))
        .collect();
    let w = MidLossWeights::default();
    let g = mid_loss_grad(&x0_hat, &m_mlp, &gt, b, &w, tau, 1.0).unwrap();
    let fx = |x: &[f64]| mid_loss(x, &m_mlp, &gt, b, &w, tau, 1.0).unwrap();
    let fm = |x: &[f64]| mid_loss(&x0_hat, x, &gt, b, &w, tau, 1.0).unwrap();
    errs.push((
        "mid/x0_hat",
        vec_rel_err(
            &g.x0_hat,
            &fd_directional(&fx, &x0_hat, &unit_dirs(b * d), h),
        ),
    ));
    errs.push((
        "mid/m_mlp",
        vec_rel_err(&g.m_mlp, &fd_directional(&fm, &m_mlp, &unit_dirs(b * d), h)),
    ));

    let codec = BlockProjectionCodec;
    let teacher = RandomConvTeacher::new(5, 8);
    let ds = generate_synthetic_dataset(&SynthConfig::default(), 6).unwrap();
    let image = &ds.manifest.stimuli.values().next().unwrap().image;
    let l_gt = compute_target_latent(image, &codec).unwrap();
    let target_feats = teacher.features(&codec.decode(&l_gt).unwrap()).unwrap();
    let l_pred: Vec<f64> = l_gt
        .iter()
        .map(|v| v + 0.2 * rng.gen_range(-1.0..1.0))
        .collect();
    let weights = LowLossWeights::default();
    let (_, g) = low_loss_grad(
        &l_pred,
        &l_gt,
        Some(&target_feats),
        &weights,
        1.0,
        &codec,
        &teacher,
    )
    .unwrap();
    let n = l_pred.len();
    let mut dirs: Vec<Vec<f64>> = (0..48)
        .map(|_| {
            let mut v = vec![0.0; n];
            v[rng.gen_range(0..n)] = 1.0;
            v
        })
        .collect();
    dirs.extend((0..8).map(|_| gaussian_vec(&mut rng, n)));
    let f = |x: &[f64]| {
        low_loss(
            x,
            &l_gt,
            Some(&target_feats),
            &weights,
            1.0,
            &codec,
            &teacher,
        )
        .unwrap()
    };
    errs.push((
        "low",
        vec_rel_err(&project(&g, &dirs), &fd_directional(&f, &l_pred, &dirs, h)),
    ));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let listing: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(worst < 1e-4, listing.join(", "))
}

fn prior_behaviour() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;

    let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let n = 100_000;
    let mut rng = rng_from_seed(505);
    let eps = gaussian_vec(&mut rng, n);
    let mut worst = 0.0f64;
    for t in [0usize, 20, 50, 99] {
        let xt = forward_noise(&vec![0.0; n], t, &eps, &s).unwrap();
        let var = xt.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let mut ab = 1.0;
        for beta in &s.betas()[..=t] {
            ab *= 1.0 - beta;
        }
        worst = worst.max((var / (1.0 - ab) - 1.0).abs());
    }
    ok &= worst < 0.02;
    notes.push(format!("forward variance max rel dev {worst:.4}"));

    let centers = [[-2.0, 1.0], [2.0, -1.0]];
    let sigma = 0.1;
    let data: Vec<Vec<f64>> = (0..512)
        .map(|i| {
            let z = gaussian_vec(&mut rng, 2);
            let c = centers[i % 2];
            vec![c[0] + sigma * z[0], c[1] + sigma * z[1]]
        })
        .collect();
    let config = PriorConfig {
        rows: 1,
        cols: 2,
        hidden: 64,
        time_embed_dim: 16,
        conditional: false,
        clamp: None,
        schedule: ScheduleConfig::default(),
    };
    let train = PriorTrainConfig {
        epochs: 300,
        batch_size: 64,
        adam: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
    };
    let (model, _) = train_unconditional(&data, config, &train, 9).unwrap();
    let near = (0..1000u64)
        .filter(|&seed| {
            let x = sample(&model, None, 100, seed).unwrap();
            centers
                .iter()
                .any(|c| ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt() < 3.0 * sigma)
        })
        .count();
    ok &= near >= 950;
    notes.push(format!("two clusters {near}/1000 within 3 sigma"));

    let target = gaussian_vec(&mut rng, 16);
    let data = vec![target.clone(); 32];
    let config = PriorConfig {
        rows: 1,
        cols: 16,
        hidden: 32,
        time_embed_dim: 16,
        conditional: false,
        clamp: None,
        schedule: ScheduleConfig::default(),
    };
    let train = PriorTrainConfig {
        epochs: 150,
        batch_size: 32,
        adam: AdamConfig {
            lr: 1e-2,
            ..Default::default()
        },
    };
    let (model, _) = train_unconditional(&data, config, &train, 3).unwrap();
    let tnorm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let worst = (0..5u64)
        .map(|seed| {
            let x = sample(&model, None, 100, seed).unwrap();
            x.iter()
                .zip(&target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                / tnorm
        })
        .fold(0.0, f64::max);
    ok &= worst < 0.1;
    notes.push(format!("single embedding max rel err {worst:.3}"));

    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    notes.push(format!("{secs:.1}s"));
    check(ok, notes.join("; "))
}

fn overfit_mlp(hidden: Vec<usize>) -> MlpBackboneConfig {
    MlpBackboneConfig {
        hidden_dims: hidden,
        dropout_rate: 0.0,
        mask_ratio: 0.0,
        ..Default::default()
    }
}

fn overfit_schedule() -> TrainSchedule {
    TrainSchedule {
        epochs: 300,
        batch_size: 1,
        adam: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
    }
}

fn single_sample_overfit() -> Vec<(&'static str, f64)> {
    let ds = generate_synthetic_dataset(&SynthConfig::default(), 7).unwrap();
    let (train, _) = prepare_splits(&ds.manifest);
    let one = &train[..1];
    let stim = &ds.manifest.stimuli[&one[0].stimulus_id];

    let codec = ReferenceTextCodec::new(0, &[], 0.1).unwrap();
    let config = HighConfig {
        mlp: overfit_mlp(vec![64]),
        schedule: overfit_schedule(),
        ..Default::default()
    };
    let (model, _) = train_high(one, &ds.manifest.stimuli, &codec, &config, 1).unwrap();
    let h = predict_h(one[0].roi(RoiName::Ventral).unwrap(), &model).unwrap();
    let high = mse_loss(&h, &codec.encode(&stim.captions[0]).unwrap()).unwrap();

    let enc = PatchStatsEncoder::new(0);
    let mut config = MidConfig {
        mlp: overfit_mlp(vec![16, 8]),
        schedule: overfit_schedule(),
        ..Default::default()
    };
    config.prior.hidden = 8;
    let (model, _) = train_mid(one, &ds.manifest.stimuli, &enc, &config, 4).unwrap();
    let m = predict_m_mlp(one[0].roi(RoiName::Nsdgeneral).unwrap(), &model).unwrap();
    let mid = huber_loss(
        &m,
        &compute_target_embedding(&stim.image, &enc).unwrap(),
        1.0,
    )
    .unwrap();

    let latent = BlockProjectionCodec;
    let teacher = RandomConvTeacher::new(0, 8);
    let mut mlp = overfit_mlp(vec![32]);
    mlp.output_init_scale = 0.1;
    let config = LowConfig {
        mlp,
        schedule: overfit_schedule(),
        ..Default::default()
    };
    let (model, _) = train_low(one, &ds.manifest.stimuli, &latent, &teacher, &config, 2).unwrap();
    let l = predict_l(one[0].roi(RoiName::Early).unwrap(), &model).unwrap();
    let low = huber_loss(
        &l,
        &compute_target_latent(&stim.image, &latent).unwrap(),
        1.0,
    )
    .unwrap();

    vec![("high", high), ("mid", mid), ("low", low)]
}

fn stream_learnability(exp: &Experiment) -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for stream in [Stream::High, Stream::Mid, Stream::Low] {
        let run = exp.train(stream).unwrap();
        let (val, base) = (run.scalars["validation_loss"], run.scalars["baseline_loss"]);
        ok &= val < base;
        notes.push(format!(
            "{} val {val:.4} < baseline {base:.4}",
            stream.name()
        ));
    }
    for (name, loss) in single_sample_overfit() {
        ok &= loss < 1e-3;
        notes.push(format!("{name} overfit {loss:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 600.0;
    notes.push(format!("{secs:.0}s"));
    check(ok, notes.join("; "))
}

fn ablation_ordering(exp: &Experiment) -> Outcome {
    let rows = exp.ablate().unwrap();
    let key = |r: &brainstreams::metrics::MetricReport| {
        let mut v = vec![r.pixcorr, r.ssim];
        v.extend(r.twoway.values());
        v.extend(r.dist.values());
        v
    };
    let mut distinct = true;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            distinct &= key(&rows[i].1) != key(&rows[j].1);
        }
    }
    let pix = |name: &str| {
        rows.iter()
            .find(|(l, _)| l == name)
            .map(|(_, r)| r.pixcorr)
            .unwrap()
    };
    let (low, high) = (pix("low"), pix("high"));
    let listing: Vec<String> = rows
        .iter()
        .map(|(l, r)| format!("{l} {:.3}", r.pixcorr))
        .collect();
    check(
        rows.len() == 7 && distinct && low > high,
        format!(
            "{} rows, pairwise distinct {distinct}; pixcorr {}",
            rows.len(),
            listing.join(", ")
        ),
    )
}

fn run_small_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = dir.join("exp.toml");
    fs::write(
        &cfg,
        "seed = 23\noutput_dir = \"out\"\n\
         [data]\nmanifest = \"data\"\n\
         [data.synth]\nn_train_stimuli = 24\nn_test_stimuli = 4\n\
         [high.schedule]\nepochs = 5\n\
         [mid.schedule]\nepochs = 1\n\
         [low.schedule]\nepochs = 1\n\
         [inference]\nprior_steps = 10\n\
         [metrics]\neval_side = 64\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out = dir.join("out");
    let recon = out.join("recon/high+mid+low");
    let (data, gt) = (dir.join("data"), out.join("gt"));
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--config", c, "--out", data.to_str().unwrap()],
        vec!["train-high", "--config", c],
        vec!["train-mid", "--config", c],
        vec!["train-low", "--config", c],
        vec!["infer", "--config", c],
        vec![
            "evaluate",
            "--recon",
            recon.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
            "--config",
            c,
        ],
    ];
    for args in steps {
        let o = Command::new(env!("CARGO_BIN_EXE_brainstreams"))
            .args(&args)
            .output()
            .unwrap();
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let mut files = Vec::new();
    for sub in [&recon, &gt] {
        let mut names: Vec<_> = fs::read_dir(sub)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            let keep = p.extension().is_some_and(|x| x == "png")
                || p.file_name()
                    .is_some_and(|n| n == "report.json" || n == "captions.json");
            if keep {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = run_small_pipeline(a.path());
    let fb = run_small_pipeline(b.path());
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let has_report = fa.iter().any(|(n, _)| n.ends_with("report.json"));
    check(
        fa.len() == fb.len() && differing.is_empty() && has_report && fa.len() > 2,
        format!(
            "{} files compared, {} differ {differing:?}",
            fa.len(),
            differing.len()
        ),
    )
}

fn property_runner() -> TestRunner {
    TestRunner::new(RunnerConfig {
        cases: 100,
        failure_persistence: None,
        ..RunnerConfig::default()
    })
}

fn data_properties() -> Outcome {
    let mut runner = property_runner();
    let zscore = runner.run(
        &(any::<u64>(), 1usize..4, 2usize..8, 1usize..20),
        |(seed, sessions, per, dim)| {
            let records = common::random_records(seed, sessions, per, dim);
            prop_assert!(common::zscore_drift(&records) <= 1e-6);
            Ok(())
        },
    );
    let mut runner = property_runner();
    let average = runner.run(
        &(any::<u64>(), 1usize..64, 1usize..4, 1usize..5),
        |(seed, len, repeats, stimuli)| {
            prop_assert!(common::average_mask_gap(seed, len, repeats, stimuli) <= 1e-12);
            Ok(())
        },
    );
    let mut runner = property_runner();
    let manifest = runner.run(
        &(any::<u64>(), 1usize..5, 0usize..3, 1usize..3),
        |(seed, n_train, n_test, repeats)| {
            prop_assert!(common::manifest_round_trips(seed, n_train, n_test, repeats));
            Ok(())
        },
    );
    let results = [
        ("zscore", zscore),
        ("average/mask", average),
        ("manifest", manifest),
    ];
    let failures: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "zscore idempotence, averaging/masking commute, manifest round trip: 100 cases each"
                .into()
        } else {
            failures.join("; ")
        },
    )
}

fn run(index: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("[{tag}] {index} {name} ({secs:.1}s): {detail}");
    ok
}

fn main() {
    let mut ok = true;
    ok &= run(
        1,
        "metric implementations match brute-force oracles",
        metric_oracles,
    );
    ok &= run(2, "identical sets score perfectly", identity_is_perfect);
    ok &= run(
        3,
        "two-way identification of random features is at chance",
        chance_level,
    );
    ok &= run(4, "loss gradients match finite differences", gradient_suite);
    ok &= run(5, "diffusion prior fits toy distributions", prior_behaviour);

    let tmp = tempfile::tempdir().unwrap();
    let exp = Experiment::open(ExperimentConfig {
        base_dir: tmp.path().to_path_buf(),
        ..ExperimentConfig::default()
    });
    match exp {
        Ok(exp) => {
            ok &= run(
                6,
                "each stream beats a constant predictor and memorises one sample",
                || stream_learnability(&exp),
            );
            ok &= run(
                7,
                "ablation rows differ and layout guidance beats text alone",
                || ablation_ordering(&exp),
            );
        }
        Err(e) => {
            println!("[FAIL] 6 experiment setup: {e}");
            println!("[FAIL] 7 experiment setup: {e}");
            ok = false;
        }
    }
    ok &= run(8, "repeated runs are byte-identical", determinism);
    ok &= run(9, "data preprocessing invariants", data_properties);
    if !ok {
        std::process::exit(1);
    }
}
