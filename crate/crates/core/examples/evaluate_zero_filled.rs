//! Full-image and ROI metrics of the zero-filled input at each acceleration.
//!
//! cargo run --example evaluate_zero_filled

use recon_glgan::data::{make_phantom_dataset, RoiMode};
use recon_glgan::kspace::DEFAULT_CENTER_FRACTION;
use recon_glgan::metrics::Region;
use recon_glgan::trainer::{evaluate, IdentityReconstructor};

fn main() -> recon_glgan::Result<()> {
    let data = make_phantom_dataset(12, 2024)?;
    println!("acc  region  nmse             psnr            ssim");
    for acc in [2, 4, 8] {
        let out = evaluate(&IdentityReconstructor, &data, acc, DEFAULT_CENTER_FRACTION, &RoiMode::Oracle)?;
        for region in [Region::Full, Region::Roi] {
            let cell = |m| {
                let s = out.recon.summary(region, m);
                format!("{:.4} ± {:.4}", s.mean, s.std)
            };
            let label = if region == Region::Full { "FI" } else { "ROI" };
            println!("{acc}x   {label:<6}  {}  {}  {}", cell("nmse"), cell("psnr"), cell("ssim"));
        }
    }
    Ok(())
}
