//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line each; exits non-zero if any fails.
//!
//! The toy experiment dominates the runtime (three full training runs).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2sr::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use s2sr::cli::cmd_evaluate;
use s2sr::degrade::{bicubic_baseline, degrade_scene, TrainingTriple};
use s2sr::discriminator::{d_init, BnMode, DiscriminatorConfig, DiscriminatorParams};
use s2sr::generator::{
    init_params, super_resolve_triple, GeneratorConfig, GeneratorInput, GeneratorParams, TileOptions,
};
use s2sr::losses::{
    adversarial_loss_g, adversarial_loss_g_grad, content_loss, content_loss_grad, discriminator_loss,
    discriminator_loss_grad, generator_total_loss, LossWeights,
};
use s2sr::metrics::{
    comparison_table, evaluate, rmse, sam_deg, sre_db, uiq, MetricsOptions, MetricsReport, ReportMeta,
    SRE_CAP_DB,
};
use s2sr::nn::Parameters;
use s2sr::prepare::{load_prepared, prepare_scenes, Role, SplitRatios, MANIFEST_NAME};
use s2sr::raster::{load_band_group, save_band_group, BandGroup, RasterFormat, ScalingMode, LR20_BANDS};
use s2sr::synthetic::synth_scenes;
use s2sr::trainer::{LogRecord, TrainConfig, Trainer};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ---------------------------------------------------------------------------
// metric oracles, written directly from the formulas

fn oracle_rmse(x: ArrayView3<f64>, y: ArrayView3<f64>) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        acc += (a - b).powi(2);
    }
    (acc / x.len() as f64).sqrt()
}

fn oracle_sre(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let n = x.len() as f64;
    let mu = x.sum() / n;
    let mut e = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        e += (a - b).powi(2);
    }
    10.0 * (mu * mu / (e / n)).log10()
}

fn oracle_sam(x: ArrayView3<f64>, y: ArrayView3<f64>) -> f64 {
    let (nb, h, w) = x.dim();
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (mut dot, mut xx, mut yy) = (0.0, 0.0, 0.0);
            for b in 0..nb {
                dot += x[[b, r, c]] * y[[b, r, c]];
                xx += x[[b, r, c]].powi(2);
                yy += y[[b, r, c]].powi(2);
            }
            total += (dot / (xx.sqrt() * yy.sqrt())).clamp(-1.0, 1.0).acos();
        }
    }
    (total / (h * w) as f64) * 180.0 / std::f64::consts::PI
}

fn oracle_uiq(x: ArrayView2<f64>, y: ArrayView2<f64>, win: usize) -> f64 {
    let (h, w) = x.dim();
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0.0;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let xs = x.slice(s![r..r + win, c..c + win]);
            let ys = y.slice(s![r..r + win, c..c + win]);
            let mx = xs.sum() / n;
            let my = ys.sum() / n;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for (a, b) in xs.iter().zip(ys.iter()) {
                vx += (a - mx).powi(2);
                vy += (b - my).powi(2);
                cxy += (a - mx) * (b - my);
            }
            // unbiased estimators; the normalization cancels in the ratio
            let (vx, vy, cxy) = (vx / (n - 1.0), vy / (n - 1.0), cxy / (n - 1.0));
            total += 4.0 * cxy * mx * my / ((vx + vy) * (mx * mx + my * my));
            count += 1.0;
        }
    }
    total / count
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst = [0.0f64; 4];
    let opts = MetricsOptions::default();
    for _ in 0..100 {
        let x = Array3::from_shape_fn((6, 16, 16), |_| r.gen_range(1.0..10000.0));
        let noise: f64 = r.gen_range(1.0..800.0);
        let y = x.mapv(|v: f64| (v + r.gen_range(-noise..noise)).max(0.5));
        worst[0] = worst[0].max(rel_err(rmse(x.view(), y.view()).unwrap(), oracle_rmse(x.view(), y.view())));
        worst[2] = worst[2].max(rel_err(sam_deg(y.view(), x.view()).unwrap(), oracle_sam(y.view(), x.view())));
        for b in 0..6 {
            let (xb, yb) = (x.index_axis(Axis(0), b), y.index_axis(Axis(0), b));
            worst[1] = worst[1].max(rel_err(sre_db(xb, yb).unwrap(), oracle_sre(xb, yb)));
            worst[3] = worst[3].max(rel_err(uiq(xb, yb, 8).unwrap(), oracle_uiq(xb, yb, 8)));
        }
        // the report aggregates the same quantities
        let gx = BandGroup::with_bands(&LR20_BANDS, x.mapv(|v| v as f32), 20.0).unwrap();
        let gy = BandGroup::with_bands(&LR20_BANDS, y.mapv(|v| v as f32), 20.0).unwrap();
        let rep = evaluate(&gy, &gx, &opts, ReportMeta::default()).unwrap();
        let (x32, y32) = (gx.pixels.mapv(f64::from), gy.pixels.mapv(f64::from));
        let band_mean = |f: &dyn Fn(usize) -> f64| (0..6).map(f).sum::<f64>() / 6.0;
        let want_rmse = band_mean(&|b| {
            oracle_rmse(x32.slice(s![b..b + 1, .., ..]), y32.slice(s![b..b + 1, .., ..]))
        });
        worst[0] = worst[0].max(rel_err(rep.aggregate.rmse, want_rmse));
        worst[2] = worst[2].max(rel_err(rep.aggregate.sam_deg, oracle_sam(y32.view(), x32.view())));
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    ensure!(max <= 1e-9, "max relative error {max:.3e} (rmse/sre/sam/uiq {worst:?})");

    // identity cases, exact
    let x = Array3::from_shape_fn((6, 16, 16), |(b, r, c)| 100.0 + (b * 256 + r * 16 + c) as f64);
    ensure!(rmse(x.view(), x.view()).unwrap() == 0.0, "rmse(x, x) != 0");
    ensure!(sam_deg(x.view(), x.view()).unwrap() == 0.0, "sam(x, x) != 0");
    let x0 = x.index_axis(Axis(0), 0);
    ensure!(uiq(x0, x0, 8).unwrap() == 1.0, "uiq(x, x) != 1");
    ensure!(sre_db(x0, x0).unwrap() == SRE_CAP_DB, "sre(x, x) is not the cap");

    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:.1?}");
    Ok(format!("worst rel err {max:.1e}, identities exact, {elapsed:.1?}"))
}

// ---------------------------------------------------------------------------
// skip identity

/// Pixel-center bilinear upsampling with edge clamping.
fn oracle_bilinear(src: ArrayView2<f64>, f: usize) -> ndarray::Array2<f64> {
    let (h, w) = src.dim();
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let c = ((i as f64 + 0.5) / f as f64 - 0.5).max(0.0).min((n - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(n - 1), c - i0 as f64)
    };
    ndarray::Array2::from_shape_fn((h * f, w * f), |(r, c)| {
        let (r0, r1, tr) = coord(r, h);
        let (c0, c1, tc) = coord(c, w);
        let top = src[[r0, c0]] * (1.0 - tc) + src[[r0, c1]] * tc;
        let bot = src[[r1, c0]] * (1.0 - tc) + src[[r1, c1]] * tc;
        top * (1.0 - tr) + bot * tr
    })
}

fn skip_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for mode in [ScalingMode::X2, ScalingMode::X6] {
        let f = mode.factor();
        for i in 0..20u64 {
            let g = init_params::<f32>(&GeneratorConfig::small(mode, 2, 8), i).unwrap();
            let mut r = rng(100 + i);
            let side = 6 * r.gen_range(1..5);
            let mut t = |b: usize, d: usize| {
                Array4::from_shape_fn((2, b, side / d, side / d), |_| r.gen_range(0.0f32..5.0))
            };
            let (lr, lr60, hr) = (t(6, 2), t(3, 6), t(4, 1));
            let out = g
                .forward(&GeneratorInput {
                    lr20: &lr,
                    lr60: (mode == ScalingMode::X6).then_some(&lr60),
                    hr: &hr,
                })
                .unwrap();
            let target = if mode == ScalingMode::X2 { &lr } else { &lr60 };
            for n in 0..2 {
                for b in 0..target.dim().1 {
                    let src = target.slice(s![n, b, .., ..]).mapv(f64::from);
                    let want = oracle_bilinear(src.view(), f);
                    let got = out.slice(s![n, b, .., ..]).mapv(f64::from);
                    ensure!(got.dim() == want.dim(), "{mode}: shape {:?} vs {:?}", got.dim(), want.dim());
                    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    for (a, b) in got.iter().zip(want.iter()) {
                        worst = worst.max((a - b).abs() / scale);
                    }
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "max relative deviation {worst:.2e}");
    Ok(format!("40 inputs (x2, x6), max rel deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// gradient checks
//
// Both networks are piecewise smooth (ReLU, LeakyReLU, the MAE kink), so a
// central difference is only meaningful when no unit switches state inside
// the stencil. Every evaluation therefore also returns the activation
// pattern; a draw where any stencil point changes it is replaced by the next
// draw for the same seed instead of being compared.

const FD_STEP: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;
const MAX_DRAWS: u64 = 50;

fn randomize<P: Parameters<f64>>(p: &mut P, r: &mut ChaCha8Rng, amp: f64) {
    for t in p.tensors_mut().into_iter().filter(|t| t.trainable) {
        for v in t.data.iter_mut() {
            *v += r.gen_range(-amp..amp);
        }
    }
}

enum Fd {
    /// Worst per-tensor relative error and the number of parameters checked.
    Smooth(f64, usize),
    Kinked,
}

/// Per-tensor `||analytic - fd|| / max(||analytic||, ||fd||)`.
fn compare<P: Parameters<f64> + Clone>(
    params: &P,
    analytic: &P,
    eval: &dyn Fn(&P) -> (f64, Vec<bool>),
) -> Result<Fd, String> {
    let base = eval(params).1;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let names: Vec<(String, bool, usize)> = params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.trainable, t.data.len()))
        .collect();
    let grads = analytic.tensors();
    for (ti, (name, trainable, len)) in names.iter().enumerate() {
        if !trainable {
            continue;
        }
        let mut diff = 0.0;
        let (mut na, mut nf) = (0.0, 0.0);
        for j in 0..*len {
            let mut side = [0.0; 2];
            for (k, delta) in [FD_STEP, -FD_STEP].into_iter().enumerate() {
                let mut p = params.clone();
                p.tensors_mut()[ti].data[j] += delta;
                let (loss, pattern) = eval(&p);
                if pattern != base {
                    return Ok(Fd::Kinked);
                }
                side[k] = loss;
            }
            let fd = (side[0] - side[1]) / (2.0 * FD_STEP);
            let a = grads[ti].data[j];
            diff += (a - fd).powi(2);
            na += a * a;
            nf += fd * fd;
            count += 1;
        }
        let scale = na.sqrt().max(nf.sqrt());
        if scale == 0.0 {
            return Err(format!("{name}: gradient identically zero"));
        }
        let rel = diff.sqrt() / scale;
        if rel > GRAD_TOL {
            return Err(format!("{name}: relative error {rel:.2e}"));
        }
        worst = worst.max(rel);
    }
    Ok(Fd::Smooth(worst, count))
}

fn random4(shape: (usize, usize, usize, usize), r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array4<f64> {
    Array4::from_shape_fn(shape, |_| r.gen_range(lo..hi))
}

fn generator_gradient(seed: u64) -> Result<Fd, String> {
    let mut r = rng(seed);
    let mut g = init_params::<f64>(&GeneratorConfig::small(ScalingMode::X2, 2, 8), seed).unwrap();
    randomize(&mut g, &mut r, 0.3);
    let d_cfg = DiscriminatorConfig {
        filters: vec![4],
        strides: vec![2],
        ..DiscriminatorConfig::new(6, 8)
    };
    let mut d = d_init::<f64>(&d_cfg, seed).unwrap();
    randomize(&mut d, &mut r, 0.3);
    let lr = random4((2, 6, 4, 4), &mut r, 0.2, 2.0);
    let hr = random4((2, 4, 8, 8), &mut r, 0.2, 2.0);
    let input = GeneratorInput { lr20: &lr, lr60: None, hr: &hr };
    let sr0 = g.forward(&input).unwrap();
    let gt = sr0.mapv(|v| v + if r.gen_bool(0.5) { 1.0 } else { -1.0 } * r.gen_range(0.1..0.3));
    let weights = LossWeights {
        lambda_adv: 0.5,
        ..LossWeights::default()
    };

    let eval = |p: &GeneratorParams<f64>| {
        let (sr, cache) = p.forward_cached(&input).unwrap();
        let fake = d.forward_cached(&sr, BnMode::Batch).unwrap();
        let loss = generator_total_loss(sr.view(), gt.view(), &fake.probs().to_vec(), &weights).unwrap();
        let mut pattern = cache.activation_pattern();
        pattern.extend(fake.activation_pattern());
        pattern.extend(sr.iter().zip(gt.iter()).map(|(a, b)| a > b));
        (loss, pattern)
    };
    let (sr, cache) = g.forward_cached(&input).unwrap();
    let fake = d.forward_cached(&sr, BnMode::Batch).unwrap();
    let mut d_sr = content_loss_grad(sr.view(), gt.view()).unwrap();
    let adv: Array1<f64> = adversarial_loss_g_grad(&fake.probs().to_vec(), &weights)
        .unwrap()
        .into_iter()
        .map(|v| v * weights.lambda_adv)
        .collect();
    d_sr += &d.input_gradient(&fake, &adv);
    let grads = g.backward(&cache, &d_sr);
    compare(&g, &grads, &eval)
}

fn discriminator_gradient(seed: u64) -> Result<Fd, String> {
    let mut r = rng(seed ^ 0xD);
    let cfg = DiscriminatorConfig {
        filters: vec![8],
        strides: vec![2],
        ..DiscriminatorConfig::new(6, 8)
    };
    let mut d = d_init::<f64>(&cfg, seed).unwrap();
    randomize(&mut d, &mut r, 0.3);
    let real = random4((4, 6, 8, 8), &mut r, 0.0, 2.0);
    let fake = random4((4, 6, 8, 8), &mut r, 0.0, 2.0);
    let eps = LossWeights::default().eps;
    let eval = |p: &DiscriminatorParams<f64>| {
        let cr = p.forward_cached(&real, BnMode::Batch).unwrap();
        let cf = p.forward_cached(&fake, BnMode::Batch).unwrap();
        let loss = discriminator_loss(&cr.probs().to_vec(), &cf.probs().to_vec(), eps).unwrap();
        let mut pattern = cr.activation_pattern();
        pattern.extend(cf.activation_pattern());
        (loss, pattern)
    };
    let cr = d.forward_cached(&real, BnMode::Batch).unwrap();
    let cf = d.forward_cached(&fake, BnMode::Batch).unwrap();
    let (gr, gf) = discriminator_loss_grad(&cr.probs().to_vec(), &cf.probs().to_vec(), eps).unwrap();
    let mut grads = d.zeros_like();
    d.backward(&cr, &Array1::from(gr), &mut grads, false);
    d.backward(&cf, &Array1::from(gf), &mut grads, false);
    compare(&d, &grads, &eval)
}

/// First kink-free draw for `seed`; returns the error, parameter count and
/// number of draws used.
fn smooth_check(seed: u64, check: fn(u64) -> Result<Fd, String>) -> Result<(f64, usize, u64), String> {
    for draw in 0..MAX_DRAWS {
        if let Fd::Smooth(err, n) = check(seed * 1000 + draw)? {
            return Ok((err, n, draw + 1));
        }
    }
    Err(format!("no kink-free point in {MAX_DRAWS} draws"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let (mut wg, mut wd, mut n, mut draws) = (0.0f64, 0.0f64, 0, 0);
    for seed in 0..5 {
        let (e, c, k) = smooth_check(seed, generator_gradient).map_err(|m| format!("generator seed {seed}: {m}"))?;
        wg = wg.max(e);
        n += c;
        draws += k;
        let (e, c, k) =
            smooth_check(seed, discriminator_gradient).map_err(|m| format!("discriminator seed {seed}: {m}"))?;
        wd = wd.max(e);
        n += c;
        draws += k;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:.1?}");
    Ok(format!(
        "5 seeds ({draws} draws for 10 kink-free points), {n} parameters, worst rel err G {wg:.1e} D {wd:.1e}, {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// loss spot checks

fn loss_spot_checks() -> Outcome {
    let w = LossWeights::default();
    let cases = [
        ("log 0.5", adversarial_loss_g(&[0.5], &w).unwrap(), -0.693147),
        ("d=0.5/0.5", discriminator_loss(&[0.5], &[0.5], w.eps).unwrap(), 1.386294),
        ("d=0.9/0.1", discriminator_loss(&[0.9], &[0.1], w.eps).unwrap(), 0.21072),
    ];
    for (name, got, want) in cases {
        ensure!((got - want).abs() <= 1e-6 * 1.0f64.max(want.abs()) || (got - want).abs() <= 1e-5 * 0.5,
            "{name}: {got} vs {want}");
    }
    // the published constants are rounded; compare against the closed forms too
    let exact = [
        adversarial_loss_g(&[0.5], &w).unwrap() - 0.5f64.ln(),
        discriminator_loss(&[0.5], &[0.5], w.eps).unwrap() - 2.0 * 2.0f64.ln(),
        discriminator_loss(&[0.9], &[0.1], w.eps).unwrap() + 2.0 * 0.9f64.ln(),
    ];
    ensure!(exact.iter().all(|e| e.abs() <= 1e-12), "closed forms differ: {exact:?}");
    let c = content_loss(ndarray::arr1(&[1.0, 2.0, 3.0]).view(), ndarray::arr1(&[1.5, 2.0, 1.0]).view()).unwrap();
    ensure!((c - 2.5 / 3.0).abs() <= 1e-12, "content loss {c}");
    Ok(format!(
        "log 0.5 = {:.6}, D(0.5,0.5) = {:.6}, D(0.9,0.1) = {:.5}",
        cases[0].1, cases[1].1, cases[2].1
    ))
}

// ---------------------------------------------------------------------------
// toy experiment

struct ToyData {
    train: Vec<TrainingTriple>,
    test: Vec<TrainingTriple>,
}

fn toy_data(dir: &Path) -> ToyData {
    let scenes = synth_scenes(24, 120, 0).unwrap();
    let split = SplitRatios {
        train: 18.0,
        validation: 0.0,
        test: 6.0,
    };
    prepare_scenes(&scenes, ScalingMode::X2, 0.5, &split, 0, dir, RasterFormat::Raw).unwrap();
    let manifest = dir.join(MANIFEST_NAME);
    ToyData {
        train: load_prepared(&manifest, Role::Train).unwrap().1,
        test: load_prepared(&manifest, Role::Test).unwrap().1,
    }
}

fn toy_config(ablation: bool) -> (GeneratorConfig, DiscriminatorConfig, TrainConfig) {
    let t = TrainConfig {
        mode: ScalingMode::X2,
        batch_size: 16,
        epochs: 30,
        steps_per_epoch: Some(50),
        seed: 0,
        ablation_content_only: ablation,
        validate_every: 0,
        ..TrainConfig::default()
    };
    (
        GeneratorConfig::small(ScalingMode::X2, 4, 32),
        DiscriminatorConfig::new(6, t.patch_size()),
        t,
    )
}

fn toy_run(data: &ToyData, ablation: bool, out: &Path) -> Result<Trainer, String> {
    let (g, d, t) = toy_config(ablation);
    let mut tr = Trainer::new(data.train.clone(), Vec::new(), &g, &d, t)
        .map_err(|e| e.to_string())?
        .with_output_dir(out);
    tr.run().map_err(|e| format!("training failed: {e}"))?;
    Ok(tr)
}

fn test_report(data: &ToyData, method: &str, sr: &dyn Fn(&TrainingTriple) -> BandGroup) -> MetricsReport {
    let reports: Vec<_> = data
        .test
        .iter()
        .map(|t| {
            let meta = ReportMeta {
                mode: Some(t.mode),
                scene_ids: vec![t.scene_id.clone()],
                method: method.into(),
            };
            evaluate(&sr(t), &t.gt, &MetricsOptions::default(), meta).unwrap()
        })
        .collect();
    MetricsReport::mean_of(&reports, method).unwrap()
}

fn model_report(data: &ToyData, method: &str, tr: &Trainer) -> MetricsReport {
    test_report(data, method, &|t| {
        super_resolve_triple(&tr.generator, t, TileOptions::default()).unwrap()
    })
}

fn toy_ordering(data: &ToyData, root: &Path) -> Outcome {
    let start = Instant::now();
    let bicubic = test_report(data, "Bicubic", &|t| bicubic_baseline(t).unwrap());
    let gan = toy_run(data, false, &root.join("gan"))?;
    let gan_rep = model_report(data, "GAN", &gan);
    let abl = toy_run(data, true, &root.join("content"))?;
    let abl_rep = model_report(data, "Content-only", &abl);
    let elapsed = start.elapsed();
    println!("{}", comparison_table(&[bicubic.clone(), gan_rep.clone(), abl_rep.clone()]));
    let (b, g, c) = (bicubic.aggregate.rmse, gan_rep.aggregate.rmse, abl_rep.aggregate.rmse);
    ensure!(g < b, "GAN RMSE {g:.2} not below bicubic {b:.2}");
    ensure!(c < b, "content-only RMSE {c:.2} not below bicubic {b:.2}");
    ensure!(gan.log().steps().count() == 1500, "GAN run logged {} steps", gan.log().steps().count());
    ensure!(elapsed <= Duration::from_secs(20 * 60), "took {elapsed:.1?}");
    Ok(format!(
        "test RMSE: GAN {g:.2}, content-only {c:.2}, bicubic {b:.2}; no NonFiniteLoss; {elapsed:.0?}"
    ))
}

fn determinism(data: &ToyData, root: &Path) -> Outcome {
    let first = root.join("gan");
    if !first.join("final.ckpt").is_file() {
        toy_run(data, false, &first)?;
    }
    let second = root.join("gan_again");
    toy_run(data, false, &second)?;
    for f in ["train_log.jsonl", "final.ckpt"] {
        let a = std::fs::read(first.join(f)).unwrap();
        let b = std::fs::read(second.join(f)).unwrap();
        ensure!(a == b, "{f} differs between identical runs");
    }
    let log = std::fs::read(first.join("train_log.jsonl")).unwrap();
    Ok(format!("train_log.jsonl ({} bytes) and final.ckpt bit-identical", log.len()))
}

// ---------------------------------------------------------------------------
// round trips

fn round_trips(root: &Path) -> Outcome {
    // rasters, both formats, with a georeference
    let mut r = rng(7);
    let mut group = BandGroup::with_bands(
        &LR20_BANDS,
        Array3::from_shape_fn((6, 13, 17), |_| r.gen_range(-50.0f32..12000.0)),
        20.0,
    )
    .unwrap();
    let scene = synth_scenes(1, 36, 1).unwrap().remove(0);
    group.geo = scene.hr.geo.clone();
    for (fmt, name) in [(RasterFormat::Geotiff, "g.tif"), (RasterFormat::Raw, "g.s2sr")] {
        let p = root.join(name);
        save_band_group(&group, &p, fmt).unwrap();
        let back = load_band_group(&p).map_err(|e| e.to_string())?;
        ensure!(back == group, "{fmt:?} round trip changed the group");
        let bytes = std::fs::read(&p).unwrap();
        save_band_group(&back, &p, fmt).unwrap();
        ensure!(std::fs::read(&p).unwrap() == bytes, "{fmt:?} re-save changed bytes");
    }

    // checkpoints and resume on a small GAN
    let triples: Vec<_> = synth_scenes(3, 72, 4)
        .unwrap()
        .iter()
        .map(|s| degrade_scene(s, ScalingMode::X2, 0.5).unwrap())
        .collect();
    let (train, val) = (triples[..2].to_vec(), triples[2..].to_vec());
    let g = GeneratorConfig::small(ScalingMode::X2, 1, 8);
    let d = DiscriminatorConfig {
        filters: vec![8, 8],
        strides: vec![2, 2],
        ..DiscriminatorConfig::new(6, 24)
    };
    let t = TrainConfig {
        batch_size: 4,
        epochs: 3,
        steps_per_epoch: Some(4),
        seed: 9,
        ..TrainConfig::default()
    };
    let mut full = Trainer::new(train.clone(), val.clone(), &g, &d, t.clone()).unwrap();
    full.run().unwrap();
    let mut part = Trainer::new(train.clone(), val.clone(), &g, &d, t).unwrap();
    part.run_until(5).unwrap();
    let ck_path = root.join("mid.ckpt");
    save_checkpoint(&part.checkpoint(), &ck_path).unwrap();
    let bytes = std::fs::read(&ck_path).unwrap();
    let loaded = load_checkpoint(&ck_path).map_err(|e| e.to_string())?;
    ensure!(to_bytes(&loaded).unwrap() == bytes, "checkpoint re-encode differs");
    ensure!(loaded.generator == part.generator, "generator changed through checkpoint");
    ensure!(loaded.discriminator == part.discriminator, "discriminator changed through checkpoint");
    ensure!(from_bytes(&bytes, &ck_path).unwrap() == loaded, "decode is not deterministic");

    let mut resumed = Trainer::resume(loaded, train, val).unwrap();
    resumed.run().unwrap();
    ensure!(
        to_bytes(&resumed.checkpoint()).unwrap() == to_bytes(&full.checkpoint()).unwrap(),
        "resumed checkpoint differs from uninterrupted training"
    );
    let tail = |tr: &Trainer| -> Vec<String> {
        tr.log()
            .records
            .iter()
            .filter(|rec| match rec {
                LogRecord::Step(s) => s.step >= 5,
                LogRecord::Epoch(e) => e.step > 5,
            })
            .map(|rec| serde_json::to_string(rec).unwrap())
            .collect()
    };
    ensure!(tail(&resumed) == tail(&full), "log after resume differs");
    Ok(format!("geotiff + raw bit-exact; checkpoint {} bytes; resume at step 5 of 12 identical", bytes.len()))
}

// ---------------------------------------------------------------------------
// Wald shape contract

fn wald_contract(root: &Path) -> Outcome {
    let mut checked = 0;
    for mode in [ScalingMode::X2, ScalingMode::X6] {
        let g = init_params::<f32>(&GeneratorConfig::small(mode, 1, 8), 3).unwrap();
        for size in [72, 120, 150] {
            let scene = synth_scenes(1, size, size as u64).unwrap().remove(0);
            let t = degrade_scene(&scene, mode, 0.5).map_err(|e| e.to_string())?;
            let tiles = TileOptions { tile: 48, overlap: 8 };
            let sr = super_resolve_triple(&g, &t, tiles).map_err(|e| e.to_string())?;
            ensure!(
                sr.pixels.dim() == t.gt.pixels.dim() && sr.bands == t.gt.bands,
                "{mode} size {size}: sr {:?} {:?} vs gt {:?} {:?}",
                sr.pixels.dim(), sr.bands, t.gt.pixels.dim(), t.gt.bands
            );
            checked += 1;
        }
        // comparison table through the evaluate command
        let scene = synth_scenes(1, 72, 77).unwrap().remove(0);
        let t = degrade_scene(&scene, mode, 0.5).unwrap();
        let dir = root.join(mode.to_string());
        std::fs::create_dir_all(&dir).unwrap();
        let sr = super_resolve_triple(&g, &t, TileOptions::default()).unwrap();
        let (gt_p, sr_p, lr_p) = (dir.join("gt.s2sr"), dir.join("sr.s2sr"), dir.join("lr.s2sr"));
        save_band_group(&t.gt, &gt_p, RasterFormat::Raw).unwrap();
        save_band_group(&sr, &sr_p, RasterFormat::Raw).unwrap();
        let lr = t.lr60_in.as_ref().unwrap_or(&t.lr_in);
        save_band_group(lr, &lr_p, RasterFormat::Raw).unwrap();
        let reports = cmd_evaluate(
            &gt_p,
            &[("model".to_string(), sr_p)],
            Some(&lr_p),
            &MetricsOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let table = comparison_table(&reports);
        let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
        ensure!(header == ["Method", "RMSE", "SRE", "SAM", "UIQ"], "{mode}: header {header:?}");
        let rows: Vec<&str> = table.lines().skip(1).filter_map(|l| l.split_whitespace().next()).collect();
        ensure!(rows.len() == 2 && rows.contains(&"Bicubic") && rows.contains(&"model"), "{mode}: rows {rows:?}");
    }
    Ok(format!("{checked} degrade -> super-resolve shapes match gt; tables carry a Bicubic row"))
}

// ---------------------------------------------------------------------------

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {name:<22} {detail} [{secs:.1} s]");
            true
        }
        Err(detail) => {
            println!("FAIL  {name:<22} {detail} [{secs:.1} s]");
            false
        }
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and friends pass harness flags; nothing to list
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    // positional arguments select criteria by substring
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));

    let root = tempfile::tempdir().unwrap();
    let data = std::cell::OnceCell::new();
    let data = || data.get_or_init(|| toy_data(&root.path().join("prepared")));
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("metric-oracle", Box::new(metric_oracle)),
        ("skip-identity", Box::new(skip_identity)),
        ("gradient-check", Box::new(gradient_checks)),
        ("loss-spot-checks", Box::new(loss_spot_checks)),
        ("toy-ordering", Box::new(|| toy_ordering(data(), root.path()))),
        ("determinism", Box::new(|| determinism(data(), root.path()))),
        ("round-trips", Box::new(|| round_trips(root.path()))),
        ("wald-shape-contract", Box::new(|| wald_contract(root.path()))),
    ];
    let mut results = Vec::new();
    for (name, f) in criteria {
        if selected(name) {
            results.push(run(name, f));
        }
    }
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
