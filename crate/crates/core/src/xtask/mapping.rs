use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{film_modulate_var, make_condition, Direction, PairCondition};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::losses::label_tensor;
use crate::network::{ConvLayer, EncoderConfig};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::task::{Label, LossKind, TaskSet, TaskSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    /// Output channels of each task-specific input layer.
    pub input_width: usize,
    /// Trunk widths before the final layer, which always has the encoder's
    /// feature width.
    pub hidden_widths: Vec<usize>,
    /// Modulate trunk layers by the pair condition.
    pub conditioned: bool,
    /// Half-width of the uniform initialisation of the conditioner.
    pub conditioner_init: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self { input_width: 16, hidden_widths: vec![32, 32], conditioned: true, conditioner_init: 0.1 }
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, (inp, out): (usize, usize), bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..inp * out).map(|_| rng.gen_range(-bound..=bound)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            ParamGroup::Conditioner,
            Tensor::from_vec(&[out, inp], data).expect("sized"),
        );
        let bias = store.add(format!("{name}.bias"), ParamGroup::Conditioner, Tensor::zeros(&[out]));
        Self { weight, bias }
    }
}

/// Scale and shift producers for one trunk layer. The scale is
/// `1 + W_c·A + b_c` so a zeroed conditioner leaves features untouched.
#[derive(Clone, Debug)]
struct LayerConditioner {
    scale: Linear,
    shift: Linear,
}

/// Shared joint-space mapping: per-task input layers, a trunk shared by all
/// pairs and directions, and an optional pair conditioner.
#[derive(Clone, Debug)]
pub struct MappingNet {
    pub num_tasks: usize,
    pub input_layers: Vec<ConvLayer>,
    pub trunk: Vec<ConvLayer>,
    conditioner: Option<Vec<LayerConditioner>>,
}

impl MappingNet {
    pub fn new(
        store: &mut ParamStore,
        tasks: &TaskSet,
        encoder: &EncoderConfig,
        config: &MappingConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut widths = config.hidden_widths.clone();
        widths.push(encoder.feature_channels());
        let stages = encoder.stages();
        if widths.len() < stages {
            return Err(Error::InvalidConfig(format!(
                "mapping trunk has {} layers but must downsample {stages} times",
                widths.len()
            )));
        }
        if config.input_width == 0 || widths.contains(&0) {
            return Err(Error::InvalidConfig("mapping widths must be positive".into()));
        }
        let input_layers = tasks
            .iter()
            .map(|t| {
                ConvLayer::new(
                    store,
                    &format!("mapping.input{}.{}", t.id, t.name),
                    ParamGroup::MappingInput(t.id),
                    (t.dense_channels(), config.input_width),
                    1,
                    rng,
                )
            })
            .collect();
        let mut in_c = config.input_width;
        let trunk = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if i < stages { 2 } else { 1 };
                let l = ConvLayer::new(
                    store,
                    &format!("mapping.trunk{i}"),
                    ParamGroup::MappingTrunk,
                    (in_c, w),
                    stride,
                    rng,
                );
                in_c = w;
                l
            })
            .collect();
        let k = tasks.len();
        let conditioner = config.conditioned.then(|| {
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| LayerConditioner {
                    scale: Linear::new(
                        store,
                        &format!("conditioner{i}.scale"),
                        (k * k, w),
                        config.conditioner_init,
                        rng,
                    ),
                    shift: Linear::new(
                        store,
                        &format!("conditioner{i}.shift"),
                        (k * k, w),
                        config.conditioner_init,
                        rng,
                    ),
                })
                .collect()
        });
        Ok(Self { num_tasks: k, input_layers, trunk, conditioner })
    }

    pub fn is_conditioned(&self) -> bool {
        self.conditioner.is_some()
    }

    /// Zeroes every conditioner weight and bias, making the mapping
    /// independent of the pair condition.
    pub fn reset_conditioner_to_identity(&self, store: &mut ParamStore) {
        for lc in self.conditioner.iter().flatten() {
            for lin in [&lc.scale, &lc.shift] {
                for id in [lin.weight, lin.bias] {
                    store.get_mut(id).data_mut().fill(0.0);
                }
            }
        }
    }

    /// Modulation vectors `(a_c, a_b)` of trunk layer `i` for `cond`.
    pub fn modulation(&self, s: &mut Session, i: usize, cond: &PairCondition) -> Result<Option<(Var, Var)>> {
        let Some(layers) = &self.conditioner else {
            return Ok(None);
        };
        let lc = &layers[i];
        let a = s.graph.constant(cond.flat());
        let (sw, sb) = (s.param(lc.scale.weight), s.param(lc.scale.bias));
        let raw = s.graph.matvec(sw, a, sb)?;
        let scale = s.graph.affine(raw, 1.0, 1.0);
        let (hw, hb) = (s.param(lc.shift.weight), s.param(lc.shift.bias));
        let shift = s.graph.matvec(hw, a, hb)?;
        Ok(Some((scale, shift)))
    }

    /// Maps the dense map of `cond.input_task()` into the joint space
    /// selected by `cond`.
    pub fn forward(&self, s: &mut Session, dense: Var, cond: &PairCondition) -> Result<Var> {
        let task = cond.input_task();
        if cond.num_tasks() != self.num_tasks {
            return Err(Error::InvalidInput("pair condition built for a different task count".into()));
        }
        let input = self.input_layers.get(task).ok_or(Error::UnknownTask(task))?;
        let mut x = input.forward(s, dense)?;
        x = s.graph.relu(x);
        let last = self.trunk.len() - 1;
        for (i, layer) in self.trunk.iter().enumerate() {
            x = layer.forward(s, x)?;
            if let Some((c, b)) = self.modulation(s, i, cond)? {
                x = film_modulate_var(&mut s.graph, x, c, b)?;
            }
            if i < last {
                x = s.graph.relu(x);
            }
        }
        Ok(x)
    }
}

/// `m^{s→st}` (direction source, `dense` is task `s`) or `m^{t→st}`
/// (direction target, `dense` is task `t`).
pub fn map_to_joint(
    net: &MappingNet,
    s: &mut Session,
    dense: Var,
    pair: (usize, usize),
    direction: Direction,
) -> Result<Var> {
    let cond = make_condition(pair.0, pair.1, direction, net.num_tasks)?;
    net.forward(s, dense, &cond)
}

/// Dense mapping input from a network output: class logits become a
/// per-pixel distribution, other tasks pass through.
pub fn prediction_to_dense(s: &mut Session, pred: Var, spec: &TaskSpec) -> Result<Var> {
    match spec.loss_kind {
        LossKind::CrossEntropy => s.graph.channel_softmax(pred),
        _ => Ok(pred),
    }
}

/// Dense mapping input from a ground-truth label (class maps one-hot).
pub fn label_to_dense(s: &mut Session, label: &Label, spec: &TaskSpec, h: usize, w: usize) -> Result<Var> {
    Ok(s.graph.constant(label_tensor(label, spec, h, w)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(k: usize, conditioned: bool) -> (ParamStore, MappingNet) {
        let tasks = TaskSet::standard(k, 4).unwrap();
        let mut store = ParamStore::new();
        let cfg = MappingConfig { input_width: 8, hidden_widths: vec![8, 8], conditioned, conditioner_init: 0.1 };
        let net = MappingNet::new(
            &mut store,
            &tasks,
            &EncoderConfig::new(vec![8, 8, 8]),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        (store, net)
    }

    fn dense(c: usize, seed: f64) -> Tensor {
        Tensor::from_vec(&[c, 16, 16], (0..c * 256).map(|i| ((i as f64 + seed) * 0.173).sin()).collect()).unwrap()
    }

    #[test]
    fn embedding_shape_independent_of_task() {
        let (store, net) = setup(3, true);
        let mut s = Session::new(&store);
        for (task, c) in [(0usize, 4usize), (1, 1), (2, 3)] {
            let x = s.graph.constant(dense(c, 0.5));
            let other = (task + 1) % 3;
            let e = map_to_joint(&net, &mut s, x, (task, other), Direction::Source).unwrap();
            assert_eq!(s.graph.value(e).shape(), &[8, 2, 2]);
        }
    }

    #[test]
    fn identity_conditioner_ignores_pair() {
        let (mut store, net) = setup(3, true);
        net.reset_conditioner_to_identity(&mut store);
        let mut s = Session::new(&store);
        let x = s.graph.constant(dense(4, 1.0));
        let a = map_to_joint(&net, &mut s, x, (0, 1), Direction::Source).unwrap();
        let b = map_to_joint(&net, &mut s, x, (0, 2), Direction::Source).unwrap();
        assert_eq!(s.graph.value(a), s.graph.value(b));
    }

    #[test]
    fn random_conditioner_separates_pairs() {
        let (store, net) = setup(3, true);
        let mut s = Session::new(&store);
        let x = s.graph.constant(dense(4, 2.0));
        let a = map_to_joint(&net, &mut s, x, (0, 1), Direction::Source).unwrap();
        let b = map_to_joint(&net, &mut s, x, (0, 2), Direction::Source).unwrap();
        assert!(s.graph.value(a).max_abs_diff(s.graph.value(b)) > 0.0);
    }

    #[test]
    fn self_pair_rejected() {
        let (store, net) = setup(2, true);
        let mut s = Session::new(&store);
        let x = s.graph.constant(dense(4, 0.0));
        assert!(map_to_joint(&net, &mut s, x, (0, 0), Direction::Source).is_err());
    }

    #[test]
    fn parameter_count_scales_only_with_inputs_and_conditioner() {
        let count = |k: usize| {
            let tasks = TaskSet::new((0..k).map(crate::task::TaskSpec::depth).collect()).unwrap();
            let mut store = ParamStore::new();
            MappingNet::new(
                &mut store,
                &tasks,
                &EncoderConfig::new(vec![8, 8, 8]),
                &MappingConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            (
                store.count(|g| g == ParamGroup::MappingTrunk),
                store.count(|g| matches!(g, ParamGroup::MappingInput(_))),
                store.count(|g| g == ParamGroup::Conditioner),
            )
        };
        let (trunk2, input2, cond2) = count(2);
        let (trunk5, input5, cond5) = count(5);
        assert_eq!(trunk2, trunk5);
        assert_eq!(input5 * 2, input2 * 5);
        // Conditioner weights grow with K², biases stay fixed.
        let per_input = (cond5 - cond2) / (25 - 4);
        assert_eq!(cond2 - per_input * 4, cond5 - per_input * 25);
    }

    #[test]
    fn unconditioned_net_has_no_conditioner_params() {
        let (store, net) = setup(3, false);
        assert!(!net.is_conditioned());
        assert_eq!(store.count(|g| g == ParamGroup::Conditioner), 0);
    }
}
