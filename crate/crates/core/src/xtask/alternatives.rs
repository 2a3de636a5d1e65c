//! Alternative ways of exploiting cross-task relations: dedicated pair
//! networks mapping one task into another's label space (direct and
//! perceptual variants), a triplet contrastive loss in the joint space, and
//! an adversarial pair discriminator.

use std::collections::BTreeMap;

use rand::Rng;

use super::mapping::{label_to_dense, map_to_joint, prediction_to_dense, MappingNet};
use super::{cross_task_loss, Direction};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::losses::ImageForward;
use crate::network::{ConvLayer, Decoder, Encoder, EncoderConfig, MtlNetwork};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::task::{Sample, TaskSet};
use crate::tensor::Tensor;

/// Encoder-decoder mapping the dense output of task `s` onto task `t`.
#[derive(Clone, Debug)]
pub struct PairNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl PairNet {
    pub fn forward(&self, s: &mut Session, dense: Var) -> Result<Var> {
        let f = self.encoder.forward(s, dense)?;
        self.decoder.forward(s, f)
    }
}

/// One network per ordered task pair, `K(K−1)` in total.
#[derive(Clone, Debug)]
pub struct PairNets {
    nets: BTreeMap<(usize, usize), PairNet>,
}

impl PairNets {
    pub fn new(store: &mut ParamStore, tasks: &TaskSet, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut nets = BTreeMap::new();
        for src in tasks.iter() {
            for tgt in tasks.iter().filter(|t| t.id != src.id) {
                let group = ParamGroup::PairNet(src.id, tgt.id);
                let prefix = format!("pair{}_{}.{}_to_{}", src.id, tgt.id, src.name, tgt.name);
                let enc_cfg = EncoderConfig { in_channels: src.dense_channels(), widths: config.widths.clone() };
                let encoder = Encoder::new(store, &format!("{prefix}.encoder"), group, &enc_cfg, rng)?;
                let decoder =
                    Decoder::new(store, &format!("{prefix}.decoder"), group, config, tgt.dense_channels(), false, rng);
                nets.insert((src.id, tgt.id), PairNet { encoder, decoder });
            }
        }
        Ok(Self { nets })
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn get(&self, src: usize, tgt: usize) -> Result<&PairNet> {
        self.nets
            .get(&(src, tgt))
            .ok_or_else(|| Error::InvalidConfig(format!("no mapping network for pair ({src}, {tgt})")))
    }
}

/// `L_ct(m^{s→t}(ŷ^s), y^t)`.
pub fn direct_map_loss(
    pairs: &PairNets,
    s: &mut Session,
    pred_s: Var,
    (src, tgt): (usize, usize),
    y_t: Var,
) -> Result<Var> {
    let mapped = pairs.get(src, tgt)?.forward(s, pred_s)?;
    cross_task_loss(&mut s.graph, mapped, y_t)
}

/// `L_ct(m^{s→t}(ŷ^s), m^{s→t}(y^s))`.
pub fn perceptual_map_loss(
    pairs: &PairNets,
    s: &mut Session,
    pred_s: Var,
    (src, tgt): (usize, usize),
    y_s: Var,
) -> Result<Var> {
    let net = pairs.get(src, tgt)?;
    let a = net.forward(s, pred_s)?;
    let b = net.forward(s, y_s)?;
    cross_task_loss(&mut s.graph, a, b)
}

/// Weighted sum of one family of alternative terms.
pub struct AltTerm {
    pub total: Var,
    pub value: f64,
    pub terms: usize,
}

fn label_dense(net: &MtlNetwork, s: &mut Session, sample: &Sample, t: usize) -> Result<Var> {
    let spec = net.tasks.get(t)?;
    let label = sample.label(t).ok_or_else(|| Error::InvalidInput(format!("missing label for task {t}")))?;
    label_to_dense(s, label, spec, sample.height, sample.width)
}

fn pred_dense(net: &MtlNetwork, s: &mut Session, f: &mut ImageForward, t: usize) -> Result<Var> {
    let p = f.pred(net, s, t)?;
    prediction_to_dense(s, p, net.tasks.get(t)?)
}

/// `(1/N) Σ_n (1/|U_n|) Σ_{s∈U_n, t∈T_n} L_ct(m^{s→t}(ŷ^s), y^t)`.
pub fn direct_map_term(
    net: &MtlNetwork,
    pairs: &PairNets,
    s: &mut Session,
    batch: &[&Sample],
    fwd: &mut [ImageForward],
) -> Result<AltTerm> {
    let n = batch.len() as f64;
    let (mut terms, mut value) = (Vec::new(), 0.0);
    for (sample, f) in batch.iter().zip(fwd.iter_mut()) {
        let u = &sample.mask.unlabelled;
        for &src in u {
            let ps = pred_dense(net, s, f, src)?;
            for &tgt in &sample.mask.labelled {
                let yt = label_dense(net, s, sample, tgt)?;
                let l = direct_map_loss(pairs, s, ps, (src, tgt), yt)?;
                let w = 1.0 / (u.len() as f64 * n);
                value += w * s.graph.scalar(l);
                terms.push(s.graph.scale(l, w));
            }
        }
    }
    let count = terms.len();
    Ok(AltTerm { total: s.graph.add_all(&terms)?, value, terms: count })
}

/// Perceptual variant. The pair networks learn from the direct term with the
/// prediction held fixed, and the prediction of each labelled task `s` is
/// compared with its label after both pass through the frozen `s → t`
/// network for every unlabelled `t`.
pub fn perceptual_map_term(
    net: &MtlNetwork,
    pairs: &PairNets,
    s: &mut Session,
    batch: &[&Sample],
    fwd: &mut [ImageForward],
) -> Result<AltTerm> {
    let n = batch.len() as f64;
    let (mut terms, mut value) = (Vec::new(), 0.0);
    for (sample, f) in batch.iter().zip(fwd.iter_mut()) {
        let u = &sample.mask.unlabelled;
        if u.is_empty() {
            continue;
        }
        let w = 1.0 / (u.len() as f64 * n);
        for &src in u {
            let ps = pred_dense(net, s, f, src)?;
            let fixed = s.graph.detach(ps);
            for &tgt in &sample.mask.labelled {
                let yt = label_dense(net, s, sample, tgt)?;
                let l = direct_map_loss(pairs, s, fixed, (src, tgt), yt)?;
                terms.push(s.graph.scale(l, w));
            }
        }
        for &src in &sample.mask.labelled {
            let ps = pred_dense(net, s, f, src)?;
            let ys = label_dense(net, s, sample, src)?;
            for &tgt in u {
                let l = s.with_frozen(|s| perceptual_map_loss(pairs, s, ps, (src, tgt), ys))?;
                value += w * s.graph.scalar(l);
                terms.push(s.graph.scale(l, w));
            }
        }
    }
    let count = terms.len();
    Ok(AltTerm { total: s.graph.add_all(&terms)?, value, terms: count })
}

/// Triplet hinge `max(0, L_ct(a, b⁺) − L_ct(a, b⁻) + margin)`.
pub fn contrastive_pair_loss(s: &mut Session, pos_a: Var, pos_b: Var, neg_b: Var, margin: f64) -> Result<Var> {
    let pos = cross_task_loss(&mut s.graph, pos_a, pos_b)?;
    let neg = cross_task_loss(&mut s.graph, pos_a, neg_b)?;
    let d = s.graph.sub(pos, neg)?;
    let shifted = s.graph.affine(d, 1.0, margin);
    Ok(s.graph.relu(shifted))
}

/// Joint-space embeddings used by the contrastive and adversarial variants.
struct PairEmbeddings {
    /// `(image, s, t) → m^{t→st}(y^t)`.
    anchors: Vec<(usize, usize, usize, Var)>,
    /// `(image, s, t) → m^{s→st}(ŷ^s)`, for every image of the batch.
    preds: BTreeMap<(usize, usize, usize), Var>,
}

fn pair_embeddings(
    net: &MtlNetwork,
    mapping: &MappingNet,
    s: &mut Session,
    batch: &[&Sample],
    fwd: &mut [ImageForward],
    all_images: bool,
) -> Result<PairEmbeddings> {
    let mut anchors = Vec::new();
    let mut pairs = Vec::new();
    for (i, sample) in batch.iter().enumerate() {
        for &src in &sample.mask.unlabelled {
            for &tgt in &sample.mask.labelled {
                let yt = label_dense(net, s, sample, tgt)?;
                let e = map_to_joint(mapping, s, yt, (src, tgt), Direction::Target)?;
                anchors.push((i, src, tgt, e));
                if !pairs.contains(&(src, tgt)) {
                    pairs.push((src, tgt));
                }
            }
        }
    }
    let mut preds = BTreeMap::new();
    for (i, f) in fwd.iter_mut().enumerate() {
        for &(src, tgt) in &pairs {
            let needed = all_images || anchors.iter().any(|a| a.0 == i && a.1 == src && a.2 == tgt);
            if needed {
                let p = pred_dense(net, s, f, src)?;
                preds.insert((i, src, tgt), map_to_joint(mapping, s, p, (src, tgt), Direction::Source)?);
            }
        }
    }
    Ok(PairEmbeddings { anchors, preds })
}

/// Mean triplet loss over every anchor `m^{t→st}(y^t_i)`, its positive
/// `m^{s→st}(ŷ^s(x_i))`, and each in-batch negative `m^{s→st}(ŷ^s(x_j))`,
/// `j ≠ i`.
pub fn contrastive_term(
    net: &MtlNetwork,
    mapping: &MappingNet,
    s: &mut Session,
    batch: &[&Sample],
    fwd: &mut [ImageForward],
    margin: f64,
) -> Result<AltTerm> {
    let emb = pair_embeddings(net, mapping, s, batch, fwd, true)?;
    let mut terms = Vec::new();
    for &(i, src, tgt, anchor) in &emb.anchors {
        let pos = emb.preds[&(i, src, tgt)];
        for j in (0..batch.len()).filter(|&j| j != i) {
            let neg = emb.preds[&(j, src, tgt)];
            terms.push(contrastive_pair_loss(s, anchor, pos, neg, margin)?);
        }
    }
    let count = terms.len();
    let sum = s.graph.add_all(&terms)?;
    let total = if count == 0 { sum } else { s.graph.scale(sum, 1.0 / count as f64) };
    let value = s.graph.scalar(total);
    Ok(AltTerm { total, value, terms: count })
}

/// Small convolutional classifier over concatenated embedding pairs.
#[derive(Clone, Debug)]
pub struct Discriminator {
    conv: ConvLayer,
    weight: ParamId,
    bias: ParamId,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, embed_channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let conv = ConvLayer::new(store, "disc.conv", ParamGroup::Discriminator, (2 * embed_channels, hidden), 1, rng);
        let weight = store.add_uniform("disc.fc.weight", ParamGroup::Discriminator, &[1, hidden], hidden, rng);
        let bias = store.add("disc.fc.bias", ParamGroup::Discriminator, Tensor::zeros(&[1]));
        Self { conv, weight, bias }
    }

    /// Logit that `(a, b)` come from the same image.
    pub fn logit(&self, s: &mut Session, a: Var, b: Var) -> Result<Var> {
        let x = s.graph.concat_channels(a, b)?;
        let h = self.conv.forward(s, x)?;
        let h = s.graph.relu(h);
        let p = s.graph.global_avg_pool(h)?;
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.graph.matvec(w, p, b)
    }
}

/// `(discriminator loss, adversarial loss)`: binary cross-entropy of the
/// discriminator with positives labelled 1 and negatives 0, and the loss
/// driving the mapped positive pairs towards being classified positive.
/// `None` when there are no positive pairs.
pub fn discriminator_losses(
    disc: &Discriminator,
    s: &mut Session,
    pos: &[(Var, Var)],
    neg: &[(Var, Var)],
) -> Result<Option<(Var, Var)>> {
    if pos.is_empty() {
        return Ok(None);
    }
    let mut d_terms = Vec::with_capacity(pos.len() + neg.len());
    let mut g_terms = Vec::with_capacity(pos.len());
    for &(a, b) in pos {
        let z = disc.logit(s, a, b)?;
        d_terms.push(s.graph.bce_with_logits(z, 1.0)?);
        g_terms.push(s.graph.bce_with_logits(z, 1.0)?);
    }
    for &(a, b) in neg {
        let z = disc.logit(s, a, b)?;
        d_terms.push(s.graph.bce_with_logits(z, 0.0)?);
    }
    let d_sum = s.graph.add_all(&d_terms)?;
    let d_loss = s.graph.scale(d_sum, 1.0 / d_terms.len() as f64);
    let g_sum = s.graph.add_all(&g_terms)?;
    let g_loss = s.graph.scale(g_sum, 1.0 / g_terms.len() as f64);
    Ok(Some((d_loss, g_loss)))
}

/// Positive pairs `(m^{s→st}(ŷ^s(x_i)), m^{t→st}(y^t_i))` and negatives that
/// swap in the prediction of the next image in the batch.
pub fn discriminator_pairs(
    net: &MtlNetwork,
    mapping: &MappingNet,
    s: &mut Session,
    batch: &[&Sample],
    fwd: &mut [ImageForward],
) -> Result<(Vec<(Var, Var)>, Vec<(Var, Var)>)> {
    let emb = pair_embeddings(net, mapping, s, batch, fwd, batch.len() > 1)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for &(i, src, tgt, anchor) in &emb.anchors {
        pos.push((emb.preds[&(i, src, tgt)], anchor));
        if batch.len() > 1 {
            let j = (i + 1) % batch.len();
            neg.push((emb.preds[&(j, src, tgt)], anchor));
        }
    }
    Ok((pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec3(s: &mut Session, v: [f64; 2]) -> Var {
        s.graph.variable(Tensor::from_vec(&[2, 1, 1], v.to_vec()).unwrap())
    }

    #[test]
    fn contrastive_hinge_cases() {
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let a = vec3(&mut s, [1.0, 0.0]);
        let same = vec3(&mut s, [1.0, 0.0]);
        let orth = vec3(&mut s, [0.0, 1.0]);
        let l = contrastive_pair_loss(&mut s, a, same, orth, 0.1).unwrap();
        assert_eq!(s.graph.scalar(l), 0.0);
        let l = contrastive_pair_loss(&mut s, a, orth, same, 0.1).unwrap();
        assert!((s.graph.scalar(l) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn pair_net_count() {
        let tasks = TaskSet::standard(3, 4).unwrap();
        let mut store = ParamStore::new();
        let nets =
            PairNets::new(&mut store, &tasks, &EncoderConfig::new(vec![8, 8, 8]), &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(nets.len(), 6);
        assert!(nets.get(1, 1).is_err());
    }

    #[test]
    fn direct_map_zero_when_mapping_hits_label() {
        let tasks = TaskSet::standard(2, 3).unwrap();
        let mut store = ParamStore::new();
        let nets =
            PairNets::new(&mut store, &tasks, &EncoderConfig::new(vec![8, 8, 8]), &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
        let mut s = Session::new(&store);
        let x = s.graph.constant(Tensor::full(&[3, 8, 8], 0.3));
        let mapped = nets.get(0, 1).unwrap().forward(&mut s, x).unwrap();
        let y = s.graph.detach(mapped);
        let l = direct_map_loss(&nets, &mut s, x, (0, 1), y).unwrap();
        assert!(s.graph.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn perceptual_zero_on_perfect_prediction_and_scale_invariant() {
        let tasks = TaskSet::standard(2, 3).unwrap();
        let mut store = ParamStore::new();
        let nets =
            PairNets::new(&mut store, &tasks, &EncoderConfig::new(vec![8, 8, 8]), &mut ChaCha8Rng::seed_from_u64(2))
                .unwrap();
        let mut s = Session::new(&store);
        let y =
            s.graph.constant(Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap());
        let l = perceptual_map_loss(&nets, &mut s, y, (1, 0), y).unwrap();
        assert!(s.graph.scalar(l).abs() < 1e-12);
        let a = s.graph.variable(Tensor::from_vec(&[2, 1, 1], vec![0.4, 0.9]).unwrap());
        let b = s.graph.variable(Tensor::from_vec(&[2, 1, 1], vec![-0.3, 0.5]).unwrap());
        let (a2, b2) = (s.graph.scale(a, 3.5), s.graph.scale(b, 0.2));
        let l1 = cross_task_loss(&mut s.graph, a, b).unwrap();
        let l2 = cross_task_loss(&mut s.graph, a2, b2).unwrap();
        assert!((s.graph.scalar(l1) - s.graph.scalar(l2)).abs() < 1e-12);
    }

    #[test]
    fn adversarial_loss_at_zero_logit_is_ln2() {
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let z = s.graph.variable(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let l = s.graph.bce_with_logits(z, 1.0).unwrap();
        assert!((s.graph.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }
}
