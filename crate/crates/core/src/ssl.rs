//! Crop-equivariance consistency for unlabelled tasks.
//!
//! For an unlabelled task the prediction on a cropped image must equal the
//! same crop of the prediction on the full image. Crop sizes are snapped to
//! the encoder stride so both branches are shape-compatible without
//! resampling.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::ImageForward;
use crate::network::MtlNetwork;
use crate::params::Session;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropParams {
    pub fn identity(height: usize, width: usize) -> Self {
        Self { top: 0, left: 0, height, width }
    }

    /// The crop equal to applying `self` and then `inner`.
    pub fn then(&self, inner: &CropParams) -> Self {
        Self { top: self.top + inner.top, left: self.left + inner.left, height: inner.height, width: inner.width }
    }

    pub fn is_identity_for(&self, height: usize, width: usize) -> bool {
        *self == Self::identity(height, width)
    }
}

fn snapped_sizes(full: usize, stride: usize, min_frac: f64) -> Vec<usize> {
    let min = (min_frac * full as f64).ceil() as usize;
    (1..=full / stride).map(|m| m * stride).filter(|&s| s >= min).collect()
}

/// Uniform random window with sides at least `min_frac` of the image,
/// snapped to multiples of `stride`.
pub fn sample_crop(
    height: usize,
    width: usize,
    stride: usize,
    min_frac: f64,
    rng: &mut impl Rng,
) -> Result<CropParams> {
    if stride == 0 || height < 2 * stride || width < 2 * stride || height % stride != 0 || width % stride != 0 {
        return Err(Error::Shape(format!("{height}×{width} image cannot be cropped on a stride-{stride} grid")));
    }
    let hs = snapped_sizes(height, stride, min_frac);
    let ws = snapped_sizes(width, stride, min_frac);
    let (Some(_), Some(_)) = (hs.last(), ws.last()) else {
        return Err(Error::InvalidConfig(format!("min_frac {min_frac} admits no crop size")));
    };
    let h = hs[rng.gen_range(0..hs.len())];
    let w = ws[rng.gen_range(0..ws.len())];
    Ok(CropParams { top: rng.gen_range(0..=height - h), left: rng.gen_range(0..=width - w), height: h, width: w })
}

/// Exact sub-window of a `C×H×W` tensor.
pub fn apply_crop(t: &Tensor, r: &CropParams) -> Result<Tensor> {
    t.crop(r.top, r.left, r.height, r.width)
}

pub fn apply_crop_var(g: &mut Graph, v: Var, r: &CropParams) -> Result<Var> {
    g.crop(v, r.top, r.left, r.height, r.width)
}

/// `(1/|U|) Σ_t MSE(crop(full_t), cropped_t)` over paired predictions.
/// Gradients flow through both branches.
pub fn consistency_from_predictions(g: &mut Graph, pairs: &[(Var, Var)], r: &CropParams) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(full, cropped) in pairs {
        let c = apply_crop_var(g, full, r)?;
        let d = g.sub(c, cropped)?;
        let sq = g.mul(d, d)?;
        terms.push(g.mean(sq));
    }
    let sum = g.add_all(&terms)?;
    Ok(g.scale(sum, 1.0 / pairs.len() as f64))
}

/// Crop-consistency loss of one image over its unlabelled tasks; zero when
/// `unlabelled` is empty.
pub fn ssl_consistency_loss(
    net: &MtlNetwork,
    s: &mut Session,
    fwd: &mut ImageForward,
    unlabelled: &BTreeSet<usize>,
    r: &CropParams,
) -> Result<Var> {
    if unlabelled.is_empty() {
        return Ok(s.graph.constant(Tensor::scalar(0.0)));
    }
    let cropped_image = apply_crop_var(&mut s.graph, fwd.image, r)?;
    let cropped_feature = net.encode(s, cropped_image)?;
    let mut pairs = Vec::with_capacity(unlabelled.len());
    for &t in unlabelled {
        let full = fwd.pred(net, s, t)?;
        let cropped = net.predict_task(s, cropped_feature, t)?;
        pairs.push((full, cropped));
    }
    consistency_from_predictions(&mut s.graph, &pairs, r)
}
