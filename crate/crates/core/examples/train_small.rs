//! A few epochs of Recon-GLGAN training on phantoms with a narrow generator.
//!
//! cargo run --release --example train_small [epochs]

use recon_glgan::data::make_phantom_dataset;
use recon_glgan::networks::GeneratorConfig;
use recon_glgan::trainer::*;

fn main() -> recon_glgan::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(3), |s| s.parse()).expect("epochs must be a number");
    let train_split = make_phantom_dataset(16, 1)?;
    let val_split = make_phantom_dataset(4, 1001)?;
    let config = TrainConfig {
        epochs,
        batch_size: 4,
        checkpoint_every: 0,
        generator: GeneratorConfig {
            base_channels: 8,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut report = |row: &HistoryRow, secs: f64| {
        println!(
            "epoch {}  L_imag {:.5}  L_context {:.4}  d {:.4}  val psnr {:.2}  ({secs:.1}s)",
            row.epoch,
            row.l_imag.unwrap_or(f64::NAN),
            row.l_context.unwrap_or(f64::NAN),
            row.d_loss.unwrap_or(f64::NAN),
            row.val_fi_psnr.unwrap_or(f64::NAN),
        );
    };
    let out = train(
        &config,
        &train_split,
        &val_split,
        TrainOptions {
            checkpoint_dir: None,
            on_epoch: Some(&mut report),
        },
    )?;
    println!("zero-filled val psnr {:.2}, best epoch {}", out.zero_filled.fi_psnr, out.best_epoch);
    Ok(())
}
