//! Context and basic discriminators on one phantom, with the ROI moved around.
//!
//! cargo run --example discriminators

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recon_glgan::data::{make_phantom_dataset, roi_from_seg, RoiSpec, IMAGE_SIZE, ROI_SIZE};
use recon_glgan::networks::*;

fn main() -> recon_glgan::Result<()> {
    println!("global chain {:?}", feature_map_chain(IMAGE_SIZE));
    println!("local chain  {:?}", feature_map_chain(ROI_SIZE));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let context = ContextDiscriminatorNet::<f32>::new(&mut rng);
    let basic = BasicDiscriminatorNet::<f32>::new(&mut rng);

    let item = make_phantom_dataset(1, 5)?.items.remove(0);
    let img = item.image.pixels().mapv(|v| v as f32);
    let heart = roi_from_seg(item.mask.as_ref().expect("phantom mask"))?;
    println!("basic D(x) = {:.6}", basic.discriminate(img.view())?);
    for (name, roi) in [("heart", heart), ("centre", RoiSpec::image_center()), ("corner", RoiSpec::centered(30, 30))] {
        println!("context D(x, {name}) = {:.6}", context.discriminate(img.view(), &roi)?);
    }
    Ok(())
}
