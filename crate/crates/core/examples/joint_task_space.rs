//! One mapping network shared by every task pair, conditioned on the pair
//! through per-channel scale and shift. Shows the pair matrix, the effect
//! of conditioning and the identity reset.

use mtpsl::losses::label_tensor;
use mtpsl::network::EncoderConfig;
use mtpsl::params::{ParamStore, Session};
use mtpsl::synth::{generate_scene, SceneConfig};
use mtpsl::task::TaskSet;
use mtpsl::xtask::{cross_task_loss, make_condition, map_to_joint, Direction, MappingConfig, MappingNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mtpsl::Result<()> {
    let tasks = TaskSet::standard(3, 5)?;
    let encoder = EncoderConfig::new(vec![8, 16]);
    let mapping_cfg =
        MappingConfig { input_width: 8, hidden_widths: vec![16], conditioner_init: 0.5, ..MappingConfig::default() };
    let mut store = ParamStore::new();
    let mapping = MappingNet::new(&mut store, &tasks, &encoder, &mapping_cfg, &mut ChaCha8Rng::seed_from_u64(3))?;

    let cond = make_condition(1, 2, Direction::Source, 3)?;
    println!("pair (depth -> depth,normals), source side: {:?}", cond.matrix());
    println!("same pair, target side: {:?}", make_condition(1, 2, Direction::Target, 3)?.matrix());

    let sample = generate_scene(&SceneConfig { height: 16, width: 16, ..SceneConfig::default() })?;
    let depth = sample.labels[1].as_ref().expect("generated scenes are fully labelled");
    let dense = label_tensor(depth, tasks.get(1)?, 16, 16)?;

    let embed = |store: &ParamStore, pair: (usize, usize)| -> mtpsl::Result<_> {
        let mut s = Session::new(store);
        let x = s.graph.constant(dense.clone());
        let e = map_to_joint(&mapping, &mut s, x, pair, Direction::Source)?;
        Ok(s.graph.value(e).clone())
    };
    let (to_seg, to_normals) = (embed(&store, (1, 0))?, embed(&store, (1, 2))?);
    println!("embedding shape {:?}", to_normals.shape());
    println!("conditioned: depth embeddings for two pairs differ by {:.3e}", to_seg.max_abs_diff(&to_normals));

    let mut s = Session::new(&store);
    let (a, b) = (s.graph.constant(to_seg.clone()), s.graph.constant(to_normals.clone()));
    let d = cross_task_loss(&mut s.graph, a, b)?;
    println!("cosine distance between them {:.4}", s.graph.scalar(d));
    drop(s);

    mapping.reset_conditioner_to_identity(&mut store);
    let (to_seg, to_normals) = (embed(&store, (1, 0))?, embed(&store, (1, 2))?);
    println!("identity modulation: difference {:.1e}", to_seg.max_abs_diff(&to_normals));
    Ok(())
}
