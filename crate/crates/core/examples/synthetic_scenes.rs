//! Generates a small coupled segmentation/depth/normals dataset, prints one
//! scene as text and checks the file round-trip.

use mtpsl::synth::{dataset_from_bytes, dataset_to_bytes, generate_dataset, generate_scene, SceneConfig};
use mtpsl::task::{label_counts, Label, Protocol};

fn main() -> mtpsl::Result<()> {
    let scene = SceneConfig { height: 16, width: 32, seed: 3, ..SceneConfig::default() };
    let sample = generate_scene(&scene)?;
    let (h, w) = (sample.height, sample.width);

    if let Some(Label::Classes(seg)) = &sample.labels[0] {
        println!("segmentation (0 = background):");
        for row in seg.chunks(w) {
            println!("  {}", row.iter().map(|c| char::from(b'0' + *c as u8)).collect::<String>());
        }
    }
    if let Some(Label::Dense(depth)) = &sample.labels[1] {
        let (lo, hi) = depth.iter().fold((f32::MAX, f32::MIN), |(a, b), &d| (a.min(d), b.max(d)));
        println!("depth range {lo:.3}..{hi:.3} over {h}x{w} pixels");
    }
    if let Some(Label::Dense(normals)) = &sample.labels[2] {
        let p = h * w;
        let n = |i: usize| (normals[i], normals[p + i], normals[2 * p + i]);
        println!("normal at centre {:?}", n((h / 2) * w + w / 2));
    }

    let ds = generate_dataset(&scene, 3, 40, 10, &Protocol::One, 11)?;
    println!("train labels per task {:?}", label_counts(&ds.train_masks(), 3));
    let bytes = dataset_to_bytes(&ds)?;
    let back = dataset_from_bytes(&bytes)?;
    assert_eq!(dataset_to_bytes(&back)?, bytes);
    println!("serialised {} bytes, round-trip identical", bytes.len());

    let mut corrupted = bytes;
    let last = corrupted.len() - 40;
    corrupted[last] ^= 1;
    println!("corrupted file: {}", dataset_from_bytes(&corrupted).unwrap_err());
    Ok(())
}
