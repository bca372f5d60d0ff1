//! Acceptance criteria. Everything runs sequentially inside one test so the
//! runtime budgets are measured without other tests competing for the CPU.
//! Each criterion prints one PASS/FAIL line to the real stdout.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recon_glgan::cli::{cmd_evaluate, cmd_prepare, cmd_train, Cli, Command};
use recon_glgan::data::*;
use recon_glgan::kspace::*;
use recon_glgan::losses::*;
use recon_glgan::metrics::{dice, hausdorff, nmse, psnr, ssim, Region};
use recon_glgan::networks::*;
use recon_glgan::nn::Module;
use recon_glgan::trainer::*;

mod common;

use common::*;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(budget: Duration, started: Instant) -> Result<f64, String> {
    let secs = started.elapsed().as_secs_f64();
    ensure!(started.elapsed() < budget, "took {secs:.1}s, budget {}s", budget.as_secs());
    Ok(secs)
}

fn kspace_suite() -> Check {
    let t = Instant::now();
    for r in [1, 2, 4, 8] {
        for seed in 0..20 {
            let m = make_cartesian_mask(IMAGE_SIZE, r, DEFAULT_CENTER_FRACTION, seed).map_err(|e| e.to_string())?;
            ensure!(m.sampled_count() == IMAGE_SIZE / r, "R={r} seed {seed}: {} lines", m.sampled_count());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let random = unit_image(&mut rng, IMAGE_SIZE);
    let phantom = make_phantom_dataset(1, 1).unwrap().items[0].image.pixels().to_owned();
    let mut worst_rt = 0.0f64;
    let mut worst_dc = 0.0f64;
    for x in [random, phantom] {
        let k = forward_sample(x.view()).unwrap();
        let back = inverse_transform(&k);
        let rt = back.iter().zip(x.iter()).map(|(b, v)| (b - v).norm()).fold(0.0, f64::max);
        worst_rt = worst_rt.max(rt);
        for r in [1, 2, 4, 8] {
            let m = make_cartesian_mask(IMAGE_SIZE, r, DEFAULT_CENTER_FRACTION, 9).unwrap();
            let zf = zero_fill_complex(&k, &m).unwrap();
            worst_dc = worst_dc.max(data_consistency_error(zf.view(), &k, &m));
        }
    }
    ensure!(worst_rt < 1e-6, "round trip error {worst_rt:e}");
    ensure!(worst_dc < 1e-5, "data consistency error {worst_dc:e}");
    let secs = within(Duration::from_secs(10), t)?;
    Ok(format!("round trip {worst_rt:.1e}, consistency {worst_dc:.1e}, {secs:.1}s"))
}

fn architecture() -> Check {
    ensure!(
        CONV_SPECS == [(32, 1, 9, 9, 1, 0), (64, 32, 5, 5, 1, 0), (64, 64, 5, 5, 1, 0)],
        "conv specs {CONV_SPECS:?}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = ContextDiscriminatorNet::<f32>::new(&mut rng);
    for (path, chain) in [
        (&d.global, vec![152, 76, 72, 36, 32, 16]),
        (&d.local, vec![52, 26, 22, 11, 7, 3]),
    ] {
        ensure!(path.chain == chain, "chain {:?}", path.chain);
        for (conv, &(o, i, kh, kw, _, pad)) in path.convs.iter().zip(&CONV_SPECS) {
            ensure!(conv.weight.value.shape() == [o, i, kh, kw], "weight shape {:?}", conv.weight.value.shape());
            ensure!(conv.padding == pad, "padding {}", conv.padding);
        }
        ensure!(path.fc2.out_features == FEATURE_DIM, "feature dim {}", path.fc2.out_features);
    }
    ensure!(d.classifier.in_features == 2 * FEATURE_DIM, "classifier input {}", d.classifier.in_features);
    let img = make_phantom_dataset(1, 3).unwrap().items[0].image.pixels().mapv(|v| v as f32);
    for roi in [RoiSpec::centered(80, 80), RoiSpec::centered(40, 120)] {
        let got = d.discriminate(img.view(), &roi).unwrap();
        let g = d.global_features(img.view()).unwrap();
        let l = d.local_features(img.slice(s![roi.rows(), roi.cols()])).unwrap();
        ensure!(g.len() == 64 && l.len() == 64, "feature lengths {} {}", g.len(), l.len());
        let manual = d.classify(&concatenate(Axis(0), &[g.view(), l.view()]).unwrap()).unwrap();
        ensure!(got.to_bits() == manual.to_bits(), "composition {got} vs {manual}");
    }
    Ok("chains, tuples and composition exact".into())
}

fn loss_suite() -> Check {
    let t = Instant::now();
    ensure!(VARIANT_TABLE.len() == TABLE.len(), "registry has {} rows", VARIANT_TABLE.len());
    for ((_, name, terms), (want, want_terms)) in VARIANT_TABLE.iter().zip(TABLE) {
        let got: Vec<&str> = terms.iter().map(|t| t.name()).collect();
        ensure!(*name == want && got == want_terms, "{name}: {got:?}");
    }
    let w = LossWeights::default();
    ensure!(w.lambda_imag == 1.0 && w.lambda_context == 4e-4, "weights {w:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random_image(&mut rng, 16, 16), random_image(&mut rng, 16, 16));
    let away: Vec<_> = probes(&mut rng, 16, 16, 40)
        .into_iter()
        .filter(|&(r, c)| (a[[r, c]] - b[[r, c]]).abs() > 1e-3)
        .take(6)
        .collect();
    ensure!(away.len() >= 5, "too few L1 probes");
    let mut errs = Vec::new();
    let (_, g) = l1_image_loss_grad(a.view(), b.view()).unwrap();
    errs.push(("L_imag", max_pixel_grad_err(&|x: &Array2<f64>| l1_image_loss(x.view(), b.view()).unwrap(), &g, &a, &away)));
    let pts = probes(&mut rng, 16, 16, 6);
    let (_, g) = frequency_loss_grad(a.view(), b.view()).unwrap();
    errs.push(("L_freq", max_pixel_grad_err(&|x: &Array2<f64>| frequency_loss(x.view(), b.view()).unwrap(), &g, &a, &pts)));
    let (_, g) = ssim_loss_grad(a.view(), b.view()).unwrap();
    errs.push(("L_ssim", max_pixel_grad_err(&|x: &Array2<f64>| ssim_loss(x.view(), b.view()).unwrap(), &g, &a, &pts)));
    let feat = RandomConvFeaturizer::default();
    let (_, g) = perceptual_loss_grad(a.view(), b.view(), &feat).unwrap();
    errs.push((
        "L_vgg",
        max_pixel_grad_err(&|x: &Array2<f64>| perceptual_loss(x.view(), b.view(), &feat).unwrap(), &g, &a, &pts),
    ));
    let real: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..0.95)).collect();
    let fake: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..0.95)).collect();
    let (_, gr, gf) = context_adversarial_loss_d_grad(&real, &fake).unwrap();
    let (_, gg) = context_adversarial_loss_g_grad(&fake).unwrap();
    errs.push(("L_context (D, real)", max_vec_grad_err(&|v| context_adversarial_loss_d(v, &fake).unwrap(), &gr, &real)));
    errs.push(("L_context (D, fake)", max_vec_grad_err(&|v| context_adversarial_loss_d(&real, v).unwrap(), &gf, &fake)));
    errs.push(("L_context (G)", max_vec_grad_err(&|v| context_adversarial_loss_g(v).unwrap(), &gg, &fake)));
    for (name, e) in &errs {
        ensure!(*e < 1e-3, "{name} relative error {e:e}");
    }
    let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let secs = within(Duration::from_secs(60), t)?;
    Ok(format!("worst gradient error {worst:.1e}, {secs:.1}s"))
}

fn metric_suite() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let (x, y) = (unit_image(&mut rng, 16), unit_image(&mut rng, 16));
        let d2: f64 = (&x - &y).mapv(|v| v * v).sum();
        let e: f64 = y.mapv(|v| v * v).sum();
        worst = worst.max((nmse(x.view(), y.view()).unwrap() - d2 / e).abs());
        worst = worst.max((psnr(x.view(), y.view(), 1.0).unwrap() - 10.0 * (256.0 / d2).log10()).abs());
        worst = worst.max((ssim(x.view(), y.view()).unwrap() - oracle_ssim(&x, &y)).abs());
        let (a, b) = (random_labels(&mut rng, 16), random_labels(&mut rng, 16));
        for label in 0..4u8 {
            worst = worst.max((dice(&a, &b, label).unwrap() - oracle_dice(&a, &b, label)).abs());
            match oracle_hausdorff(&a, &b, label) {
                Some(h) => worst = worst.max((hausdorff(&a, &b, label).unwrap() - h).abs()),
                None => ensure!(hausdorff(&a, &b, label).is_err(), "trial {trial}: HD should be undefined"),
            }
            ensure!(dice(&a, &a, label).unwrap() == 1.0, "self Dice");
            ensure!(dice(&a, &b, label).unwrap() == dice(&b, &a, label).unwrap(), "Dice symmetry");
            if let Ok(h) = hausdorff(&a, &b, label) {
                ensure!(h == hausdorff(&b, &a, label).unwrap(), "HD symmetry");
                ensure!(hausdorff(&a, &a, label).unwrap() == 0.0, "self HD");
            }
        }
        ensure!(nmse(x.view(), x.view()).unwrap() == 0.0, "self NMSE");
        ensure!(psnr(x.view(), x.view(), 1.0).unwrap() == f64::INFINITY, "self PSNR");
        ensure!((ssim(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-12, "self SSIM");
        ensure!(
            (ssim(x.view(), y.view()).unwrap() - ssim(y.view(), x.view()).unwrap()).abs() < 1e-12,
            "SSIM symmetry"
        );
    }
    ensure!(worst < 1e-6, "oracle deviation {worst:e}");
    let secs = within(Duration::from_secs(30), t)?;
    Ok(format!("worst oracle deviation {worst:.1e}, {secs:.1}s"))
}

fn smoke_training() -> Check {
    let t = Instant::now();
    let train_split = make_phantom_dataset(32, 1).unwrap();
    let val_split = make_phantom_dataset(8, 1001).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    ensure!(cfg.variant == Variant::ReconGlgan && cfg.acceleration == 4 && cfg.batch_size == 8, "config {cfg:?}");
    let out = train(&cfg, &train_split, &val_split, TrainOptions::default()).map_err(|e| e.to_string())?;
    let secs = within(Duration::from_secs(15 * 60), t)?;
    let val: Vec<f64> = out.history.rows.iter().map(|r| r.val_l_imag.unwrap()).collect();
    ensure!(val.windows(2).all(|w| w[1] < w[0]), "validation L_imag not strictly decreasing: {val:?}");
    let psnr = out.history.rows.last().unwrap().val_fi_psnr.unwrap();
    let gain = psnr - out.zero_filled.fi_psnr;
    ensure!(gain >= 0.5, "FI-PSNR {psnr:.3} vs ZF {:.3}", out.zero_filled.fi_psnr);
    Ok(format!(
        "val L_imag {:.4} -> {:.4}, FI-PSNR {psnr:.2} vs ZF {:.2} (+{gain:.2} dB), {secs:.0}s",
        val[0],
        val[4],
        out.zero_filled.fi_psnr
    ))
}

fn degenerate_equivalence() -> Check {
    let train_split = make_phantom_dataset(16, 6).unwrap();
    let val_split = make_phantom_dataset(4, 1006).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 6,
        checkpoint_every: 0,
        weights: LossWeights {
            lambda_context: 0.0,
            ..LossWeights::default()
        },
        freeze_discriminator: true,
        ..TrainConfig::default()
    };
    let gan = train(&cfg, &train_split, &val_split, TrainOptions::default()).map_err(|e| e.to_string())?;
    let (l1, digests) = train_l1_regression(&cfg, &train_split).map_err(|e| e.to_string())?;
    ensure!(gan.step_digests.len() == 4, "{} steps", gan.step_digests.len());
    ensure!(gan.step_digests == digests, "trajectories diverge");
    ensure!(gan.generator.param_digest() == l1.param_digest(), "final generators differ");
    Ok(format!("{} optimizer steps bit-identical", digests.len()))
}

fn directional_replication() -> Check {
    let t = Instant::now();
    let train_split = make_phantom_dataset(128, 7).unwrap();
    let val_split = make_phantom_dataset(16, 1007).unwrap();
    let test_split = make_phantom_dataset(32, 2007).unwrap();
    let mut roi_ssim = Vec::new();
    for variant in [Variant::ReconGlgan, Variant::Gan] {
        let cfg = TrainConfig {
            variant,
            epochs: 20,
            seed: 7,
            checkpoint_every: 0,
            generator: GeneratorConfig {
                base_channels: 16,
                ..GeneratorConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&cfg, &train_split, &val_split, TrainOptions::default()).map_err(|e| e.to_string())?;
        let eval = evaluate(&out.best_generator, &test_split, 4, DEFAULT_CENTER_FRACTION, &RoiMode::Oracle)
            .map_err(|e| e.to_string())?;
        roi_ssim.push(eval.recon.summary(Region::Roi, "ssim").mean);
    }
    let secs = within(Duration::from_secs(2 * 3600), t)?;
    let (context, basic) = (roi_ssim[0], roi_ssim[1]);
    let verdict = if context > basic { "superior" } else { "not superior" };
    ensure!(context >= basic - 0.005, "ROI SSIM context {context:.4} < basic {basic:.4} - 0.005");
    Ok(format!("ROI SSIM context {context:.4} vs basic {basic:.4} ({verdict}), {secs:.0}s"))
}

fn segmentation_downstream() -> Check {
    let train_split = make_phantom_dataset(64, 21).unwrap();
    let test_split = make_phantom_dataset(16, 2021).unwrap();
    let cfg = SegTrainConfig::default();
    ensure!(cfg.epochs == 10, "epochs {}", cfg.epochs);
    let (seg, _) = train_segmentation(&train_split, &cfg).map_err(|e| e.to_string())?;
    let lv = dice_against_masks(&seg, &test_split, LABEL_LV).map_err(|e| e.to_string())?;
    ensure!(lv > 0.8, "held-out Dice(LV) {lv:.4}");
    let sources: [(&str, &dyn Reconstructor); 1] = [("identity", &IdentityReconstructor)];
    let (table, _) = segmentation_eval(&seg, &sources, &test_split, 4, DEFAULT_CENTER_FRACTION).map_err(|e| e.to_string())?;
    ensure!(table.rows.len() == test_split.len() * 3 * SEG_LABELS.len(), "{} rows", table.rows.len());
    for r in table.rows.iter().filter(|r| r.source == "FS") {
        ensure!(r.dice == 1.0, "FS self Dice {} on {}", r.dice, r.slice_id);
        ensure!(r.hd == Some(0.0), "FS self HD {:?} on {} {}", r.hd, r.slice_id, r.label);
    }
    Ok(format!("held-out Dice(LV) {lv:.4}, FS self rows exact"))
}

fn run_cli(args: &[&str]) -> Command {
    Cli::try_parse_from(std::iter::once("reconglgan").chain(args.iter().copied()))
        .unwrap()
        .command
}

fn train_and_evaluate(data: &Path, runs: &Path, run_id: &str) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
    let Command::Train(a) = run_cli(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--run-id",
        run_id,
        "--epochs",
        "2",
        "--base-channels",
        "8",
        "--seed",
        "9",
    ]) else {
        unreachable!()
    };
    let run = cmd_train(&a).map_err(|e| e.to_string())?;
    let Command::Evaluate(e) = run_cli(&["evaluate", "--run", run.to_str().unwrap(), "--panels", "0"]) else {
        unreachable!()
    };
    let reports = cmd_evaluate(&e).map_err(|e| e.to_string())?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
    Ok((
        read(&run.join("history.csv"))?,
        read(&reports.join("metrics_test_4x.csv"))?,
        read(&reports.join("zero_filled_test_4x.csv"))?,
    ))
}

fn reproducibility() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let Command::Prepare(p) = run_cli(&["prepare", "--out", data.to_str().unwrap(), "--phantom", "24"]) else {
        unreachable!()
    };
    cmd_prepare(&p).map_err(|e| e.to_string())?;
    let first = train_and_evaluate(&data, &runs, "first")?;
    let second = train_and_evaluate(&data, &runs, "second")?;
    ensure!(first.0 == second.0, "history.csv differs");
    ensure!(first.1 == second.1, "metrics CSV differs");
    ensure!(first.2 == second.2, "zero-filled CSV differs");
    Ok(format!("history.csv ({} bytes) and metric CSVs byte-identical", first.0.len()))
}

fn report(id: usize, name: &str, check: fn() -> Check) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // Bypass the test harness capture so the verdicts always show.
    let mut out = std::io::stdout().lock();
    writeln!(out, "{tag} criterion {id}: {name}: {detail}").unwrap();
    out.flush().unwrap();
    outcome.is_ok()
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("k-space property suite", kspace_suite),
        ("architecture conformance", architecture),
        ("loss suite", loss_suite),
        ("metric oracle suite", metric_suite),
        ("smoke training", smoke_training),
        ("degenerate-config equivalence", degenerate_equivalence),
        ("context vs basic discriminator ROI SSIM", directional_replication),
        ("segmentation downstream", segmentation_downstream),
        ("reproducibility", reproducibility),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        if !report(i + 1, name, check) {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
