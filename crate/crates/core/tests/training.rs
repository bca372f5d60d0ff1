//! Trainer, evaluation sweep and segmentation pipeline on tiny phantom sets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recon_glgan::data::{make_phantom_dataset, DatasetSplit, RoiMode, LABEL_LV};
use recon_glgan::losses::{LossWeights, Variant};
use recon_glgan::metrics::Region;
use recon_glgan::networks::*;
use recon_glgan::nn::Module;
use recon_glgan::seeds::derive;
use recon_glgan::trainer::*;
use recon_glgan::Error;

fn tiny(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        variant,
        epochs,
        batch_size: 2,
        seed: 5,
        checkpoint_every: 0,
        generator: GeneratorConfig {
            depth: 2,
            base_channels: 4,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn splits() -> (DatasetSplit, DatasetSplit) {
    (make_phantom_dataset(4, 1).unwrap(), make_phantom_dataset(2, 2).unwrap())
}

#[test]
fn one_epoch_gives_one_finite_row() {
    let (tr, va) = splits();
    let out = train(&tiny(Variant::ReconGlgan, 1), &tr, &va, TrainOptions::default()).unwrap();
    assert_eq!(out.history.rows.len(), 1);
    let row = &out.history.rows[0];
    assert_eq!(row.epoch, 1);
    assert!(row.g_total.is_finite());
    for v in [row.l_imag, row.l_context, row.d_loss, row.val_l_imag, row.val_fi_psnr, row.val_roi_ssim] {
        assert!(v.unwrap().is_finite());
    }
    assert!(row.l_global.is_none() && row.l_freq.is_none());
    assert_eq!(out.step_digests.len(), 2);
    assert_eq!(out.best_epoch, 1);
    assert_eq!(out.history.wall_time.len(), 1);
}

#[test]
fn basic_variant_logs_the_global_term() {
    let (tr, va) = splits();
    let out = train(&tiny(Variant::Gan, 1), &tr, &va, TrainOptions::default()).unwrap();
    let row = &out.history.rows[0];
    assert!(row.l_global.unwrap().is_finite());
    assert!(row.l_context.is_none());
    assert_eq!(out.discriminator.kind(), DiscriminatorKind::Basic);
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = splits();
    let cfg = tiny(Variant::GlSegan, 2);
    let a = train(&cfg, &tr, &va, TrainOptions::default()).unwrap();
    let b = train(&cfg, &tr, &va, TrainOptions::default()).unwrap();
    assert_eq!(a.history.rows, b.history.rows);
    assert_eq!(a.step_digests, b.step_digests);
    assert_eq!(a.discriminator.param_digest(), b.discriminator.param_digest());
    let other = train(&TrainConfig { seed: 6, ..cfg }, &tr, &va, TrainOptions::default()).unwrap();
    assert_ne!(a.step_digests, other.step_digests);
}

#[test]
fn zero_context_weight_with_frozen_discriminator_is_plain_l1() {
    let (tr, va) = splits();
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda_context: 0.0,
            ..LossWeights::default()
        },
        freeze_discriminator: true,
        ..tiny(Variant::ReconGlgan, 2)
    };
    let out = train(&cfg, &tr, &va, TrainOptions::default()).unwrap();
    let (g, digests) = train_l1_regression(&cfg, &tr).unwrap();
    assert_eq!(out.step_digests, digests);
    assert_eq!(out.generator.param_digest(), g.param_digest());
    let fresh = DiscriminatorNet::<f32>::new(DiscriminatorKind::Context, &mut ChaCha8Rng::seed_from_u64(derive(&[5, 11])));
    assert_eq!(out.discriminator.param_digest(), fresh.param_digest());
    assert!(out.history.rows.iter().all(|r| r.d_loss.is_none()));
}

#[test]
fn validation_cadence_and_checkpoints() {
    let (tr, va) = splits();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        val_every: 2,
        checkpoint_every: 1,
        ..tiny(Variant::ReconGlgan, 3)
    };
    let mut seen = Vec::new();
    let mut cb = |row: &HistoryRow, _: f64| seen.push(row.epoch);
    let out = train(
        &cfg,
        &tr,
        &va,
        TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            on_epoch: Some(&mut cb),
        },
    )
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    let validated: Vec<bool> = out.history.rows.iter().map(|r| r.val_fi_psnr.is_some()).collect();
    // The last epoch is always validated.
    assert_eq!(validated, vec![false, true, true]);
    let (best, header) = load_generator(&dir.path().join("generator_best.ckpt")).unwrap();
    assert_eq!(best.param_digest(), out.best_generator.param_digest());
    assert_eq!(header.epoch, out.best_epoch);
    for name in ["generator_epoch0003.ckpt", "discriminator_epoch0001.ckpt", "generator_last.ckpt", "discriminator_last.ckpt"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let (last, _) = load_generator(&dir.path().join("generator_last.ckpt")).unwrap();
    assert_eq!(last.param_digest(), out.generator.param_digest());

    let csv = dir.path().join("history.csv");
    out.history.write_csv(&csv).unwrap();
    assert_eq!(TrainHistory::read_csv(&csv).unwrap().rows, out.history.rows);
    let header_line = std::fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert!(header_line.starts_with("epoch,g_total,L_imag,L_global,L_context"), "{header_line}");
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let (tr, va) = splits();
    let base = tiny(Variant::ReconGlgan, 1);
    for bad in [
        TrainConfig { acceleration: 3, ..base.clone() },
        TrainConfig { epochs: 0, ..base.clone() },
        TrainConfig { batch_size: 0, ..base.clone() },
        TrainConfig {
            g_optimizer: recon_glgan::optim::OptimizerConfig::adam(0.0),
            ..base.clone()
        },
    ] {
        assert!(matches!(train(&bad, &tr, &va, TrainOptions::default()), Err(Error::Config(_))));
    }
    let empty = DatasetSplit {
        role: tr.role,
        items: Vec::new(),
    };
    assert!(train(&base, &empty, &va, TrainOptions::default()).is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"variant": "GL-SEGAN", "epochs": 3}"#).unwrap();
    assert_eq!((parsed.variant, parsed.epochs, parsed.acceleration), (Variant::GlSegan, 3, 4));
}

#[test]
fn identity_reconstruction_scores_like_zero_filled() {
    let data = make_phantom_dataset(3, 4).unwrap();
    let out = evaluate(&IdentityReconstructor, &data, 4, 0.08, &RoiMode::Oracle).unwrap();
    assert_eq!(out.recon.rows, out.zero_filled.rows);
    assert_eq!(out.recon.rows.len(), 6);
    assert_eq!(out.samples.len(), 3);
    // Masks depend on the slice id only, so order and repetition do not matter.
    let reversed = DatasetSplit {
        role: data.role,
        items: data.items.iter().rev().cloned().collect(),
    };
    let again = evaluate(&IdentityReconstructor, &reversed, 4, 0.08, &RoiMode::Oracle).unwrap();
    for s in &out.samples {
        let t = again.samples.iter().find(|t| t.slice_id == s.slice_id).unwrap();
        assert_eq!(s.zf, t.zf);
    }
    let at8 = evaluate(&IdentityReconstructor, &data, 8, 0.08, &RoiMode::Oracle).unwrap();
    let nmse = |o: &EvalOutcome| o.zero_filled.summary(Region::Full, "nmse").mean;
    assert!(nmse(&at8) > nmse(&out));
    let untrained = GeneratorNet::<f32>::new(
        GeneratorConfig {
            depth: 2,
            base_channels: 4,
            ..GeneratorConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    // The residual head starts at zero, so the untrained generator is the identity up to f32.
    let g = evaluate(&untrained, &data, 4, 0.08, &RoiMode::Oracle).unwrap();
    let (a, b) = (g.recon.summary(Region::Full, "psnr").mean, out.recon.summary(Region::Full, "psnr").mean);
    assert!((a - b).abs() < 1e-3, "{a} vs {b}");
}

#[test]
fn segmentation_pipeline_on_a_tiny_set() {
    let data = make_phantom_dataset(4, 8).unwrap();
    let cfg = SegTrainConfig {
        epochs: 1,
        batch_size: 2,
        depth: 2,
        base_channels: 4,
        ..SegTrainConfig::default()
    };
    let (seg, losses) = train_segmentation(&data, &cfg).unwrap();
    assert_eq!(losses.len(), 1);
    assert!(losses[0].is_finite() && losses[0] > 0.0);
    let (again, losses2) = train_segmentation(&data, &cfg).unwrap();
    assert_eq!(losses, losses2);
    assert_eq!(seg.param_digest(), again.param_digest());
    let d = dice_against_masks(&seg, &data, LABEL_LV).unwrap();
    assert!((0.0..=1.0).contains(&d));

    let sources: [(&str, &dyn Reconstructor); 1] = [("identity", &IdentityReconstructor)];
    let (table, predictions) = segmentation_eval(&seg, &sources, &data, 8, 0.08).unwrap();
    assert_eq!(table.rows.len(), 4 * 3 * 3);
    assert_eq!(predictions.len(), 4);
    for r in table.rows.iter().filter(|r| r.source == "FS") {
        assert_eq!(r.dice, 1.0);
        assert!(r.hd.is_none() || r.hd == Some(0.0));
    }
    // Identity on the ZF input must agree with the ZF row exactly.
    let by = |src: &str| table.rows.iter().filter(|r| r.source == src).map(|r| (r.dice, r.hd)).collect::<Vec<_>>();
    assert_eq!(by("ZF"), by("identity"));
    let summary = table.summary();
    assert_eq!(summary.len(), 9);
    assert_eq!(table.summary_for("FS", LABEL_LV).unwrap().dice_mean, 1.0);

    let mut unlabeled = data.clone();
    unlabeled.items[1].mask = None;
    assert!(matches!(train_segmentation(&unlabeled, &cfg), Err(Error::Config(_))));
}
