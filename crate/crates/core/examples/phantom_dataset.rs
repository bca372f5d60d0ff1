//! Generate cardiac phantoms, write them to disk and read them back.
//!
//! cargo run --example phantom_dataset

use recon_glgan::data::*;

fn main() -> recon_glgan::Result<()> {
    let root = std::env::temp_dir().join("reconglgan-phantoms");
    let _ = std::fs::remove_dir_all(&root);
    for split in make_phantom_splits(16, 3)? {
        write_dataset(&root, &split)?;
    }
    let train = load_dataset(&root, SplitRole::Train)?;
    println!("{} training slices under {}", train.len(), root.display());
    for item in train.items.iter().take(4) {
        let mask = item.mask.as_ref().expect("phantoms carry masks");
        let roi = roi_from_seg(mask)?;
        let counts: Vec<String> = [LABEL_RV, LABEL_MC, LABEL_LV]
            .iter()
            .map(|&l| format!("{} {}", label_name(l), mask.count(l)))
            .collect();
        println!(
            "{}: {}  roi centre ({}, {})",
            item.image.slice_id,
            counts.join(", "),
            roi.center_row,
            roi.center_col
        );
    }
    Ok(())
}
