//! Crop-consistency for unlabelled tasks: predictions on a crop should
//! match the crop of the full-image prediction.

use mtpsl::losses::ImageForward;
use mtpsl::network::{EncoderConfig, MtlNetwork};
use mtpsl::params::{ParamStore, Session};
use mtpsl::ssl::{sample_crop, ssl_consistency_loss, CropParams};
use mtpsl::synth::{generate_scene, SceneConfig};
use mtpsl::task::{LabelMask, TaskSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mtpsl::Result<()> {
    let tasks = TaskSet::standard(3, 5)?;
    let config = EncoderConfig::new(vec![8, 16]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let net = MtlNetwork::new(&mut store, &tasks, &config, &mut rng)?;
    let sample = generate_scene(&SceneConfig { height: 32, width: 32, ..SceneConfig::default() })?
        .with_mask(LabelMask::new([0], 3)?);

    for crop in [
        CropParams::identity(32, 32),
        sample_crop(32, 32, config.stride(), 0.5, &mut rng)?,
        sample_crop(32, 32, config.stride(), 0.5, &mut rng)?,
    ] {
        let mut s = Session::new(&store);
        let mut fwd = ImageForward::new(&net, &mut s, &sample)?;
        let loss = ssl_consistency_loss(&net, &mut s, &mut fwd, &sample.mask.unlabelled, &crop)?;
        println!("{crop:?}: consistency {:.3e}", s.graph.scalar(loss));
    }
    Ok(())
}
