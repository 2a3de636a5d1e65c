//! Cross-task consistency in learned joint pairwise task-spaces.
//!
//! Each ordered task pair `(s, t)` owns a joint space in which the
//! prediction for an unlabelled task `s` and the label of a labelled task
//! `t` are compared with a cosine distance. All pairs share one mapping
//! network; a small conditioner turns the one-hot pair matrix into
//! per-channel scale/shift vectors that modulate every mapping layer. The
//! mapped embeddings are kept close to the image encoder feature so the
//! mapping cannot collapse to a constant.

mod alternatives;
mod mapping;
mod objective;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use alternatives::{
    contrastive_pair_loss, contrastive_term, direct_map_loss, direct_map_term, discriminator_losses,
    discriminator_pairs, perceptual_map_loss, perceptual_map_term, AltTerm, Discriminator, PairNets,
};
pub use mapping::{label_to_dense, map_to_joint, prediction_to_dense, MappingConfig, MappingNet};
pub use objective::{cross_task_terms, full_objective, CrossTaskTerms, XtaskVariant};

/// Which member of a task pair is being mapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Input is task `s`; sets `A[s, t]`.
    Source,
    /// Input is task `t`; sets `A[t, s]`.
    Target,
}

/// One-hot `K×K` pair matrix with a zero diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairCondition {
    k: usize,
    row: usize,
    col: usize,
}

impl PairCondition {
    pub fn num_tasks(&self) -> usize {
        self.k
    }

    /// Position of the single non-zero entry.
    pub fn entry(&self) -> (usize, usize) {
        (self.row, self.col)
    }

    /// Task whose dense map is fed to the mapping.
    pub fn input_task(&self) -> usize {
        self.row
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        (r == self.row && c == self.col) as u8
    }

    pub fn matrix(&self) -> Vec<Vec<u8>> {
        (0..self.k).map(|r| (0..self.k).map(|c| self.get(r, c)).collect()).collect()
    }

    /// Row-major flattening, the conditioner input.
    pub fn flat(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.k * self.k]);
        t.data_mut()[self.row * self.k + self.col] = 1.0;
        t
    }
}

/// Builds the pair matrix for mapping task `s` (source) or `t` (target) into
/// the joint space of `(s, t)`.
pub fn make_condition(s: usize, t: usize, direction: Direction, k: usize) -> Result<PairCondition> {
    if s == t {
        return Err(Error::SelfRelation(s));
    }
    if s >= k {
        return Err(Error::UnknownTask(s));
    }
    if t >= k {
        return Err(Error::UnknownTask(t));
    }
    let (row, col) = match direction {
        Direction::Source => (s, t),
        Direction::Target => (t, s),
    };
    Ok(PairCondition { k, row, col })
}

/// `out[m] = a_c[m]·h[m] + a_b[m]` on plain tensors.
pub fn film_modulate(h: &Tensor, a_c: &[f64], a_b: &[f64]) -> Result<Tensor> {
    let (c, hh, ww) = h.dims3()?;
    if a_c.len() != c || a_b.len() != c {
        return Err(Error::Shape(format!("film: {c} channels vs {} / {} modulation entries", a_c.len(), a_b.len())));
    }
    let hw = hh * ww;
    let data = h.data().iter().enumerate().map(|(i, &v)| a_c[i / hw] * v + a_b[i / hw]).collect();
    Tensor::from_vec(&[c, hh, ww], data)
}

/// Graph form of [`film_modulate`].
pub fn film_modulate_var(g: &mut Graph, h: Var, a_c: Var, a_b: Var) -> Result<Var> {
    g.channel_affine(h, a_c, a_b)
}

/// True if either flattened embedding has a norm under the epsilon guard.
pub fn is_degenerate(g: &Graph, a: Var, b: Var) -> bool {
    g.value(a).norm() < NORM_EPS || g.value(b).norm() < NORM_EPS
}

/// Cosine distance `1 − a·b/(|a||b|)` between flattened embeddings, in `[0, 2]`.
pub fn cross_task_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Shape(format!(
            "joint embeddings differ: {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    g.cosine_distance(a, b)
}

/// Plain-tensor form of [`cross_task_loss`].
pub fn cross_task_loss_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = cross_task_loss(&mut g, va, vb)?;
    Ok(g.scalar(l))
}

/// `1 − cos(feature, embedding)`; the encoder feature is a constant target.
pub fn mapping_regularizer(g: &mut Graph, feature: Var, emb: Var) -> Result<Var> {
    if g.value(feature).shape() != g.value(emb).shape() {
        return Err(Error::InvalidConfig(format!(
            "embedding {:?} must match encoder feature {:?}",
            g.value(emb).shape(),
            g.value(feature).shape()
        )));
    }
    let target = g.detach(feature);
    g.cosine_distance(emb, target)
}

/// Training strategy selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Conditional joint-space consistency with the feature regularizer.
    Ours,
    /// One unconditioned mapping for all pairs.
    OursNoCond,
    /// No feature regularizer.
    OursNoReg,
    DirectMap,
    PerceptualMap,
    Contrastive,
    Discriminator,
    /// Masked supervised loss plus crop consistency.
    Ssl,
    /// Masked supervised loss only.
    Sl,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Ours,
        Strategy::OursNoCond,
        Strategy::OursNoReg,
        Strategy::DirectMap,
        Strategy::PerceptualMap,
        Strategy::Contrastive,
        Strategy::Discriminator,
        Strategy::Ssl,
        Strategy::Sl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Ours => "ours",
            Strategy::OursNoCond => "ours_no_cond",
            Strategy::OursNoReg => "ours_no_reg",
            Strategy::DirectMap => "direct_map",
            Strategy::PerceptualMap => "perceptual_map",
            Strategy::Contrastive => "contrastive",
            Strategy::Discriminator => "discriminator",
            Strategy::Ssl => "ssl",
            Strategy::Sl => "sl",
        }
    }

    /// Uses the shared conditional mapping network.
    pub fn uses_joint_mapping(&self) -> bool {
        matches!(
            self,
            Strategy::Ours
                | Strategy::OursNoCond
                | Strategy::OursNoReg
                | Strategy::Contrastive
                | Strategy::Discriminator
        )
    }

    pub fn uses_pair_nets(&self) -> bool {
        matches!(self, Strategy::DirectMap | Strategy::PerceptualMap)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {s:?}")))
    }
}
