//! Supervised loss on a partially labelled batch: only annotated tasks
//! contribute, and unannotated heads receive no gradient.

use mtpsl::losses::{supervised_objective, uncertainty_weighted_value};
use mtpsl::network::{EncoderConfig, MtlNetwork};
use mtpsl::params::{ParamGroup, ParamStore, Session};
use mtpsl::synth::{generate_scene, SceneConfig};
use mtpsl::task::{LabelMask, TaskSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mtpsl::Result<()> {
    let tasks = TaskSet::standard(3, 5)?;
    let mut store = ParamStore::new();
    let net = MtlNetwork::new(&mut store, &tasks, &EncoderConfig::new(vec![8, 16]), &mut ChaCha8Rng::seed_from_u64(1))?;

    // Nobody in this batch is labelled for normals.
    let batch: Vec<_> = [vec![0], vec![1], vec![0, 1]]
        .into_iter()
        .enumerate()
        .map(|(i, labelled)| {
            let cfg = SceneConfig { height: 16, width: 16, seed: i as u64, ..SceneConfig::default() };
            Ok(generate_scene(&cfg)?.with_mask(LabelMask::new(labelled, 3)?))
        })
        .collect::<mtpsl::Result<_>>()?;
    let refs: Vec<_> = batch.iter().collect();

    let mut s = Session::new(&store);
    let obj = supervised_objective(&net, &mut s, &refs)?;
    let grads = s.backward(obj.total);
    println!("supervised objective {:.5}", obj.report.total);
    for t in tasks.iter() {
        let norm: f64 = store
            .group_ids(ParamGroup::Head(t.id))
            .into_iter()
            .filter_map(|id| grads.get(id))
            .fold(0.0, |acc, g| acc + g.norm().powi(2))
            .sqrt();
        println!(
            "{:<13} mean loss {:?} over {} images, head gradient norm {norm:.3e}",
            t.name, obj.report.task_losses[t.id], obj.report.task_counts[t.id]
        );
    }

    let losses = [0.8, 0.1, 0.3];
    println!("uncertainty weighting at log variance 0: {:.3}", uncertainty_weighted_value(&losses, &[0.0; 3]));
    println!("uncertainty weighting at log variance 1: {:.3}", uncertainty_weighted_value(&losses, &[1.0; 3]));
    Ok(())
}
