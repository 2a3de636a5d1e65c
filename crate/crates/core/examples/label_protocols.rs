//! Partial-label regimes: which tasks each training image is annotated for.

use mtpsl::task::{label_counts, MaskManifest, Protocol};

fn main() -> mtpsl::Result<()> {
    let (n, k, seed) = (12, 3, 7);
    for protocol in [Protocol::Full, Protocol::One, Protocol::Random, Protocol::Imbalanced(vec![0.9, 0.5, 0.2])] {
        let masks = protocol.masks(n, k, seed)?;
        println!("{:<11} labels per task {:?}", protocol.name(), label_counts(&masks, k));
        for (i, m) in masks.iter().take(4).enumerate() {
            println!("  image {i}: labelled {:?} unlabelled {:?}", m.labelled, m.unlabelled);
        }
    }

    // The manifest is what gets stored next to a dataset; it restores the
    // exact masks.
    let masks = Protocol::One.masks(n, k, seed)?;
    let manifest = MaskManifest::new(seed, &Protocol::One, &masks);
    let json = serde_json::to_string(&manifest)?;
    println!("manifest: {json}");
    let back: MaskManifest = serde_json::from_str(&json)?;
    assert_eq!(back.to_masks(k)?, masks);
    Ok(())
}
