//! Cartesian undersampling of a phantom slice at 2x, 4x and 8x.
//!
//! cargo run --example kspace_masks

use recon_glgan::data::{make_phantom_dataset, IMAGE_SIZE};
use recon_glgan::kspace::*;
use recon_glgan::metrics::{nmse, psnr};

fn main() -> recon_glgan::Result<()> {
    let item = make_phantom_dataset(1, 0)?.items.remove(0);
    let x = item.image.pixels();
    let k = forward_sample(x)?;
    println!("k-space energy {:.3}, image energy {:.3}", k.energy(), x.mapv(|v| v * v).sum());
    for r in [2, 4, 8] {
        let mask = make_cartesian_mask(IMAGE_SIZE, r, DEFAULT_CENTER_FRACTION, 42)?;
        let zf = zero_fill_reconstruct(&k, &mask)?;
        let dc = data_consistency_error(zero_fill_complex(&k, &mask)?.view(), &k, &mask);
        let lines: String = mask.lines.iter().step_by(4).map(|&on| if on { '|' } else { '.' }).collect();
        println!(
            "R={r}: {:>3} lines  nmse {:.4}  psnr {:.2} dB  consistency {dc:.1e}\n  {lines}",
            mask.sampled_count(),
            nmse(zf.view(), x)?,
            psnr(zf.view(), x, 1.0)?
        );
    }
    Ok(())
}
