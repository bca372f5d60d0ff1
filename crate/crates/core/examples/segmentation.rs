//! Train the segmentation U-Net briefly, then compare FS, ZF segmentations.
//!
//! cargo run --release --example segmentation [epochs]

use recon_glgan::data::make_phantom_dataset;
use recon_glgan::trainer::*;

fn main() -> recon_glgan::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(3), |s| s.parse()).expect("epochs must be a number");
    let train_split = make_phantom_dataset(32, 21)?;
    let test_split = make_phantom_dataset(8, 2021)?;
    let config = SegTrainConfig {
        epochs,
        ..SegTrainConfig::default()
    };
    let (seg, losses) = train_segmentation(&train_split, &config)?;
    println!("cross-entropy per epoch {losses:.4?}");
    let (table, _) = segmentation_eval(&seg, &[], &test_split, 4, 0.08)?;
    for row in table.summary() {
        println!(
            "{:<3} {:<3} dice {:.3} ± {:.3}  hd {}",
            row.source,
            row.label,
            row.dice_mean,
            row.dice_std,
            row.hd_mean.map_or("undefined".into(), |h| format!("{h:.2}"))
        );
    }
    Ok(())
}
