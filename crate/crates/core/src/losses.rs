//! Per-task supervised losses and the masked multi-task objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::network::MtlNetwork;
use crate::params::{ParamId, Session};
use crate::task::{Label, LossKind, Sample, TaskSpec, IGNORE_LABEL};
use crate::tensor::Tensor;

/// Dense `O×H×W` tensor for a label; class maps become one-hot, with ignored
/// pixels left all-zero.
pub fn label_tensor(label: &Label, spec: &TaskSpec, h: usize, w: usize) -> Result<Tensor> {
    match label {
        Label::Dense(d) => Tensor::from_f32(&[spec.out_channels, h, w], d),
        Label::Classes(c) => {
            let hw = h * w;
            if c.len() != hw {
                return Err(Error::Shape(format!("class map has {} pixels, expected {hw}", c.len())));
            }
            let mut t = Tensor::zeros(&[spec.out_channels, h, w]);
            for (p, &k) in c.iter().enumerate() {
                if k != IGNORE_LABEL {
                    if k as usize >= spec.out_channels {
                        return Err(Error::InvalidInput(format!("class id {k} out of range")));
                    }
                    t.data_mut()[k as usize * hw + p] = 1.0;
                }
            }
            Ok(t)
        }
    }
}

pub fn image_tensor(sample: &Sample) -> Result<Tensor> {
    Tensor::from_f32(&[3, sample.height, sample.width], &sample.image)
}

/// `L^t(pred, label)`: cross-entropy over non-ignored pixels, mean absolute
/// error, or mean per-pixel cosine distance.
pub fn task_loss(g: &mut Graph, pred: Var, label: &Label, spec: &TaskSpec) -> Result<Var> {
    let (c, h, w) = g.value(pred).dims3()?;
    if c != spec.out_channels {
        return Err(Error::Shape(format!("task {} expects {} channels, got {c}", spec.name, spec.out_channels)));
    }
    match (spec.loss_kind, label) {
        (LossKind::CrossEntropy, Label::Classes(classes)) => g.cross_entropy(pred, classes, IGNORE_LABEL),
        (LossKind::L1, Label::Dense(_)) => {
            let y = g.constant(label_tensor(label, spec, h, w)?);
            let d = g.sub(pred, y)?;
            let a = g.abs(d);
            Ok(g.mean(a))
        }
        (LossKind::Cosine, Label::Dense(_)) => {
            let y = g.constant(label_tensor(label, spec, h, w)?);
            g.pixel_cosine_loss(pred, y)
        }
        (kind, _) => Err(Error::InvalidInput(format!("label kind does not match {kind:?} loss"))),
    }
}

/// Scalar value of [`task_loss`] on plain tensors.
pub fn task_loss_value(pred: &Tensor, label: &Label, spec: &TaskSpec) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = task_loss(&mut g, p, label, spec)?;
    Ok(g.scalar(l))
}

/// `Σ_t exp(−s_t)·L_t + s_t`.
pub fn uncertainty_weighted(g: &mut Graph, losses: &[Var], log_vars: &[Var]) -> Result<Var> {
    if losses.len() != log_vars.len() {
        return Err(Error::InvalidInput("one log-variance per loss required".into()));
    }
    let mut terms = Vec::with_capacity(losses.len());
    for (&l, &s) in losses.iter().zip(log_vars) {
        let neg = g.scale(s, -1.0);
        let prec = g.exp(neg);
        let weighted = g.scalar_mul(prec, l)?;
        terms.push(g.add(weighted, s)?);
    }
    g.add_all(&terms)
}

/// Plain-number form of [`uncertainty_weighted`].
pub fn uncertainty_weighted_value(losses: &[f64], log_vars: &[f64]) -> f64 {
    losses.iter().zip(log_vars).map(|(l, s)| (-s).exp() * l + s).sum()
}

/// Values of every term of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean task loss over the images labelled for that task, `None` if no
    /// image in the batch carries the label.
    pub task_losses: Vec<Option<f64>>,
    /// Number of images contributing to each task loss.
    pub task_counts: Vec<usize>,
    /// Masked multi-task term, `(1/N) Σ_n (1/|T_n|) Σ_t L^t`.
    pub supervised: f64,
    /// Crop-consistency term.
    pub ssl: f64,
    /// Cross-task consistency part (already averaged over images).
    pub cross_task: f64,
    /// Regularizer part (already averaged over images).
    pub regularizer: f64,
    /// Weighted alternative cross-task part (pair-network, contrastive or
    /// adversarial), when used.
    pub auxiliary: f64,
    /// Discriminator loss of the preceding discriminator update.
    pub discriminator: f64,
    pub ct_terms: usize,
    pub reg_terms: usize,
    pub ssl_terms: usize,
    /// True if any cosine evaluation met a norm below the epsilon guard.
    pub eps_guarded: bool,
    pub total: f64,
}

/// Graph handle of an objective together with its report.
pub struct Objective {
    pub total: Var,
    pub report: LossReport,
}

/// Lazily evaluated forward pass of one image.
pub struct ImageForward {
    pub image: Var,
    pub feature: Var,
    preds: Vec<Option<Var>>,
}

impl ImageForward {
    pub fn new(net: &MtlNetwork, s: &mut Session, sample: &Sample) -> Result<Self> {
        let image = s.graph.constant(image_tensor(sample)?);
        let feature = net.encode(s, image)?;
        Ok(Self { image, feature, preds: vec![None; net.tasks.len()] })
    }

    pub fn pred(&mut self, net: &MtlNetwork, s: &mut Session, t: usize) -> Result<Var> {
        if let Some(v) = *self.preds.get(t).ok_or(Error::UnknownTask(t))? {
            return Ok(v);
        }
        let v = net.predict_task(s, self.feature, t)?;
        self.preds[t] = Some(v);
        Ok(v)
    }
}

/// Masked multi-task loss.
///
/// Returns the per-task shares `S_t = (1/N) Σ_{n: t∈T_n} L^t_n / |T_n|`
/// (whose sum is the objective) along with the report. Only heads of
/// labelled tasks enter the graph.
pub fn supervised_terms(
    net: &MtlNetwork,
    s: &mut Session,
    batch: &[&Sample],
    fwd: &mut [ImageForward],
) -> Result<(Vec<Option<Var>>, LossReport)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let k = net.tasks.len();
    let n = batch.len() as f64;
    let mut shares: Vec<Vec<Var>> = vec![Vec::new(); k];
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (sample, f) in batch.iter().zip(fwd.iter_mut()) {
        let labelled = &sample.mask.labelled;
        if labelled.is_empty() {
            return Err(Error::InvalidInput("image without any label".into()));
        }
        let per_image = 1.0 / (labelled.len() as f64 * n);
        for &t in labelled {
            let spec = net.tasks.get(t)?;
            let label = sample.label(t).ok_or_else(|| Error::InvalidInput(format!("missing label for task {t}")))?;
            let p = f.pred(net, s, t)?;
            let l = task_loss(&mut s.graph, p, label, spec)?;
            sums[t] += s.graph.scalar(l);
            counts[t] += 1;
            shares[t].push(s.graph.scale(l, per_image));
        }
    }
    let mut out = Vec::with_capacity(k);
    for terms in &shares {
        out.push(if terms.is_empty() { None } else { Some(s.graph.add_all(terms)?) });
    }
    let supervised = out.iter().flatten().map(|&v| s.graph.scalar(v)).sum();
    let report = LossReport {
        task_losses: sums.iter().zip(&counts).map(|(&sum, &c)| (c > 0).then(|| sum / c as f64)).collect(),
        task_counts: counts,
        supervised,
        ..LossReport::default()
    };
    Ok((out, report))
}

/// Combines task shares into one scalar, optionally with uncertainty
/// weighting (tasks absent from the batch are skipped).
pub fn combine_supervised(s: &mut Session, shares: &[Option<Var>], log_vars: Option<&[ParamId]>) -> Result<Var> {
    let present: Vec<(usize, Var)> = shares.iter().enumerate().filter_map(|(t, v)| v.map(|v| (t, v))).collect();
    match log_vars {
        None => {
            let vars: Vec<Var> = present.iter().map(|&(_, v)| v).collect();
            s.graph.add_all(&vars)
        }
        Some(ids) => {
            let losses: Vec<Var> = present.iter().map(|&(_, v)| v).collect();
            let lv: Vec<Var> = present.iter().map(|&(t, _)| s.param(ids[t])).collect();
            uncertainty_weighted(&mut s.graph, &losses, &lv)
        }
    }
}

/// The masked multi-task objective over a batch.
pub fn supervised_objective(net: &MtlNetwork, s: &mut Session, batch: &[&Sample]) -> Result<Objective> {
    let mut fwd = batch.iter().map(|b| ImageForward::new(net, s, b)).collect::<Result<Vec<_>>>()?;
    let (shares, mut report) = supervised_terms(net, s, batch, &mut fwd)?;
    let total = combine_supervised(s, &shares, None)?;
    report.total = s.graph.scalar(total);
    Ok(Objective { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::EncoderConfig;
    use crate::params::ParamStore;
    use crate::task::{LabelMask, TaskSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg() -> TaskSpec {
        TaskSpec::segmentation(0, 3)
    }

    #[test]
    fn l1_zero_on_equal() {
        let spec = TaskSpec::depth(0);
        let pred = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let label = Label::Dense(vec![0.1, 0.2, 0.3, 0.4]);
        let pred32 = Tensor::from_f32(&[1, 2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(task_loss_value(&pred32, &label, &spec).unwrap(), 0.0);
        assert!(task_loss_value(&pred, &label, &spec).unwrap() < 1e-7);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let pred = Tensor::zeros(&[3, 2, 2]);
        let v = task_loss_value(&pred, &Label::Classes(vec![0, 1, 2, 1]), &seg()).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let pred = Tensor::zeros(&[3, 1, 2]);
        let r = task_loss_value(&pred, &Label::Classes(vec![IGNORE_LABEL; 2]), &seg());
        assert!(matches!(r, Err(Error::UndefinedLoss(_))));
    }

    #[test]
    fn cosine_parallel_and_antipodal() {
        let spec = TaskSpec::normals(0);
        let n = vec![0.0f32, 0.0, 1.0, 1.0, 0.0, 0.0];
        let label = Label::Dense(vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let pred = Tensor::from_f32(&[3, 1, 2], &n).unwrap();
        assert!(task_loss_value(&pred, &label, &spec).unwrap().abs() < 1e-12);
        let anti = pred.map(|v| -v);
        assert!((task_loss_value(&anti, &label, &spec).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn l1_symmetric() {
        let spec = TaskSpec::depth(0);
        let a = [0.3f32, -0.2, 0.9, 0.1];
        let b = [0.5f32, 0.4, -0.3, 0.0];
        let ab = task_loss_value(&Tensor::from_f32(&[1, 2, 2], &a).unwrap(), &Label::Dense(b.to_vec()), &spec).unwrap();
        let ba = task_loss_value(&Tensor::from_f32(&[1, 2, 2], &b).unwrap(), &Label::Dense(a.to_vec()), &spec).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_values() {
        assert_eq!(uncertainty_weighted_value(&[1.5, 2.5], &[0.0, 0.0]), 4.0);
        let v = uncertainty_weighted_value(&[2.0], &[2f64.ln()]);
        assert!((v - (1.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_gradient_matches_finite_differences() {
        let (l, s0) = (1.7, 0.3);
        let mut g = Graph::new();
        let lv = g.variable(Tensor::scalar(l));
        let sv = g.variable(Tensor::scalar(s0));
        let out = uncertainty_weighted(&mut g, &[lv], &[sv]).unwrap();
        let grads = g.backward(out);
        let h = 1e-6;
        let numeric =
            (uncertainty_weighted_value(&[l], &[s0 + h]) - uncertainty_weighted_value(&[l], &[s0 - h])) / (2.0 * h);
        let analytic = grads.get(sv).unwrap().item();
        assert!((analytic - numeric).abs() < 1e-8);
        assert!((analytic - (1.0 - (-s0).exp() * l)).abs() < 1e-12);
    }

    fn toy_batch(tasks: &TaskSet, masks: &[&[usize]]) -> Vec<Sample> {
        masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let (h, w) = (8, 8);
                let image = (0..3 * h * w).map(|p| (((p + 7 * i) as f32) * 0.31).sin() * 0.5 + 0.5).collect();
                let normals: Vec<f32> = (0..3).flat_map(|c| vec![[0.0f32, 0.6, 0.8][c]; h * w]).collect();
                let labels = vec![
                    Some(Label::Classes((0..h * w).map(|p| ((p + i) % 3) as u16).collect())),
                    Some(Label::Dense((0..h * w).map(|p| (p as f32 * 0.01) + i as f32 * 0.1).collect())),
                    Some(Label::Dense(normals)),
                ];
                Sample { height: h, width: w, image, labels, mask: LabelMask::full(3) }
                    .with_mask(LabelMask::new(m.iter().copied(), tasks.len()).unwrap())
            })
            .collect()
    }

    fn toy_net() -> (ParamStore, MtlNetwork) {
        let tasks = TaskSet::standard(3, 3).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = MtlNetwork::new(&mut store, &tasks, &EncoderConfig::new(vec![8, 8, 8]), &mut rng).unwrap();
        (store, net)
    }

    #[test]
    fn single_image_single_task_equals_task_loss() {
        let (store, net) = toy_net();
        let batch = toy_batch(&net.tasks, &[&[1]]);
        let refs: Vec<&Sample> = batch.iter().collect();
        let mut s = Session::new(&store);
        let obj = supervised_objective(&net, &mut s, &refs).unwrap();
        let mut s2 = Session::new(&store);
        let x = s2.graph.constant(image_tensor(&batch[0]).unwrap());
        let p = net.predict_all(&mut s2, x).unwrap();
        let direct = task_loss(&mut s2.graph, p[1], batch[0].label(1).unwrap(), net.tasks.get(1).unwrap()).unwrap();
        assert!((obj.report.total - s2.graph.scalar(direct)).abs() < 1e-12);
    }

    #[test]
    fn disjoint_single_labels_average() {
        let (store, net) = toy_net();
        let batch = toy_batch(&net.tasks, &[&[0], &[1]]);
        let refs: Vec<&Sample> = batch.iter().collect();
        let mut s = Session::new(&store);
        let obj = supervised_objective(&net, &mut s, &refs).unwrap();
        let l0 = obj.report.task_losses[0].unwrap();
        let l1 = obj.report.task_losses[1].unwrap();
        assert!((obj.report.total - 0.5 * (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn unlabelled_head_gets_zero_gradient() {
        let (store, net) = toy_net();
        let batch = toy_batch(&net.tasks, &[&[0, 1], &[1], &[0]]);
        let refs: Vec<&Sample> = batch.iter().collect();
        let mut s = Session::new(&store);
        let obj = supervised_objective(&net, &mut s, &refs).unwrap();
        let grads = s.backward(obj.total);
        let head2 = store.group_ids(crate::params::ParamGroup::Head(2));
        assert!(!head2.is_empty());
        for id in head2 {
            assert!(grads.get(id).map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));
        }
        // Finite-difference confirmation on one head-2 weight.
        let id = net.heads[2].layers[0].weight;
        let eval = |store: &ParamStore| {
            let mut s = Session::new(store);
            supervised_objective(&net, &mut s, &refs).unwrap().report.total
        };
        let mut plus = store.clone();
        plus.get_mut(id).data_mut()[3] += 1e-5;
        let mut minus = store.clone();
        minus.get_mut(id).data_mut()[3] -= 1e-5;
        assert!(((eval(&plus) - eval(&minus)) / 2e-5).abs() < 1e-8);
    }

    #[test]
    fn permutation_invariant() {
        let (store, net) = toy_net();
        let batch = toy_batch(&net.tasks, &[&[0, 1], &[2], &[0, 2]]);
        let fwd: Vec<&Sample> = batch.iter().collect();
        let rev: Vec<&Sample> = batch.iter().rev().collect();
        let a = supervised_objective(&net, &mut Session::new(&store), &fwd).unwrap().report.total;
        let b = supervised_objective(&net, &mut Session::new(&store), &rev).unwrap().report.total;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let (store, net) = toy_net();
        assert!(matches!(supervised_objective(&net, &mut Session::new(&store), &[]), Err(Error::InvalidInput(_))));
    }
}
