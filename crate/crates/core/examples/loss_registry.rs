//! Every loss variant evaluated on the same (reconstruction, target) pair.
//!
//! cargo run --example loss_registry

use recon_glgan::data::make_phantom_dataset;
use recon_glgan::kspace::{make_cartesian_mask, undersample};
use recon_glgan::losses::*;

fn main() -> recon_glgan::Result<()> {
    let item = make_phantom_dataset(1, 1)?.items.remove(0);
    let target = item.image.pixels().to_owned();
    let zf = undersample(target.view(), &make_cartesian_mask(160, 4, 0.08, 0)?)?;
    let featurizer = RandomConvFeaturizer::default();
    let (preds, targets) = ([zf.view()], [target.view()]);
    for (variant, name, _) in VARIANT_TABLE {
        let spec = LossSpec::from(variant);
        let inputs = LossInputs {
            preds: &preds,
            targets: &targets,
            adversarial: Some(AdversarialInput {
                kind: variant.discriminator(),
                d_fake: &[0.3],
            }),
            featurizer: Some(&featurizer),
        };
        let b = compose_loss(&spec, &inputs)?;
        let parts: Vec<String> = b.terms.iter().map(|t| format!("{} {:.5}", t.term.name(), t.weighted)).collect();
        println!("{name:<12} total {:.5}  [{}]", b.total, parts.join(", "));
    }
    Ok(())
}
