//! Shared encoder with one decoder head per task: output shapes and
//! parameter counts.

use mtpsl::losses::image_tensor;
use mtpsl::network::{EncoderConfig, MtlNetwork};
use mtpsl::params::{ParamGroup, ParamStore, Session};
use mtpsl::synth::{generate_scene, SceneConfig};
use mtpsl::task::TaskSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mtpsl::Result<()> {
    let tasks = TaskSet::standard(3, 5)?;
    let config = EncoderConfig::new(vec![8, 16]);
    let mut store = ParamStore::new();
    let net = MtlNetwork::new(&mut store, &tasks, &config, &mut ChaCha8Rng::seed_from_u64(0))?;

    let sample = generate_scene(&SceneConfig { height: 32, width: 32, ..SceneConfig::default() })?;
    let mut s = Session::new(&store);
    let image = s.graph.constant(image_tensor(&sample)?);
    let feature = net.encode(&mut s, image)?;
    println!("feature {:?} (stride {})", s.graph.value(feature).shape(), config.stride());
    for t in tasks.iter() {
        let out = net.predict_task(&mut s, feature, t.id)?;
        println!("{:<13} output {:?}", t.name, s.graph.value(out).shape());
    }

    println!("encoder parameters {}", store.count(|g| g == ParamGroup::Encoder));
    for t in tasks.iter() {
        println!("head {:<13} parameters {}", t.name, store.count(|g| g == ParamGroup::Head(t.id)));
    }
    Ok(())
}
