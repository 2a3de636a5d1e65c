//! Shared encoder and per-task decoders.
//!
//! The encoder is a stack of stride-2 `3×3` convolutions with rectifiers;
//! every decoder mirrors it with nearest-neighbour upsampling followed by a
//! `3×3` convolution, the last one emitting the task's output channels at
//! input resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::task::{LossKind, TaskSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { in_channels: 3, widths: vec![16, 32, 64] }
    }
}

impl EncoderConfig {
    pub fn new(widths: Vec<usize>) -> Self {
        Self { in_channels: 3, widths }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// `C`, the channel count of the encoder feature.
    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Total downsampling factor `2^S`.
    pub fn stride(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig("encoder needs at least one stage of positive width".into()));
        }
        if self.feature_channels() < 8 {
            return Err(Error::InvalidConfig("encoder feature needs at least 8 channels".into()));
        }
        Ok(())
    }

    /// `(H', W')` for an `H×W` input.
    pub fn feature_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("input {h}×{w} not divisible by {s}")));
        }
        Ok((h / s, w / s))
    }
}

/// `3×3` convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        (in_c, out_c): (usize, usize),
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), group, &[out_c, in_c, 3, 3], in_c * 9, rng);
        let bias = store.add(format!("{name}.bias"), group, crate::tensor::Tensor::zeros(&[out_c]));
        Self { weight, bias, stride }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.graph.conv2d(x, w, b, self.stride, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<ConvLayer>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut in_c = config.in_channels;
        let layers = config
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = ConvLayer::new(store, &format!("{prefix}.stage{i}"), group, (in_c, w), 2, rng);
                in_c = w;
                l
            })
            .collect();
        Ok(Self { config: config.clone(), layers })
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Var> {
        let (c, h, w) = s.graph.value(image).dims3()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("encoder expects {} channels, got {c}", self.config.in_channels)));
        }
        self.config.feature_dims(h, w)?;
        let mut x = image;
        for l in &self.layers {
            x = l.forward(s, x)?;
            x = s.graph.relu(x);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<ConvLayer>,
    pub normalize: bool,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        config: &EncoderConfig,
        out_channels: usize,
        normalize: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let widths = &config.widths;
        let layers = (0..widths.len())
            .rev()
            .map(|i| {
                let out = if i == 0 { out_channels } else { widths[i - 1] };
                ConvLayer::new(store, &format!("{prefix}.up{}", widths.len() - 1 - i), group, (widths[i], out), 1, rng)
            })
            .collect();
        Self { layers, normalize }
    }

    pub fn forward(&self, s: &mut Session, feature: Var) -> Result<Var> {
        let mut x = feature;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = s.graph.upsample2x(x)?;
            x = l.forward(s, x)?;
            if i < last {
                x = s.graph.relu(x);
            }
        }
        if self.normalize {
            x = s.graph.pixel_normalize(x)?;
        }
        Ok(x)
    }
}

/// Encoder shared by all tasks plus one decoder per task.
#[derive(Clone, Debug)]
pub struct MtlNetwork {
    pub tasks: TaskSet,
    pub encoder: Encoder,
    pub heads: Vec<Decoder>,
}

impl MtlNetwork {
    pub fn new(store: &mut ParamStore, tasks: &TaskSet, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(store, "encoder", ParamGroup::Encoder, config, rng)?;
        let heads = tasks
            .iter()
            .map(|t| {
                Decoder::new(
                    store,
                    &format!("head{}.{}", t.id, t.name),
                    ParamGroup::Head(t.id),
                    config,
                    t.out_channels,
                    t.loss_kind == LossKind::Cosine,
                    rng,
                )
            })
            .collect();
        Ok(Self { tasks: tasks.clone(), encoder, heads })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// `f_φ(x)`: `C×H'×W'` feature of a `3×H×W` image.
    pub fn encode(&self, s: &mut Session, image: Var) -> Result<Var> {
        self.encoder.forward(s, image)
    }

    /// `h_ψt(feature)`: `O^t×H×W` prediction; surface normals are unit
    /// length per pixel.
    pub fn predict_task(&self, s: &mut Session, feature: Var, t: usize) -> Result<Var> {
        let head = self.heads.get(t).ok_or(Error::UnknownTask(t))?;
        head.forward(s, feature)
    }

    /// Predictions for every task from a single encoder pass.
    pub fn predict_all(&self, s: &mut Session, image: Var) -> Result<Vec<Var>> {
        let f = self.encode(s, image)?;
        (0..self.heads.len()).map(|t| self.predict_task(s, f, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: &EncoderConfig, seed: u64) -> (ParamStore, MtlNetwork) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tasks = TaskSet::standard(3, 7).unwrap();
        let net = MtlNetwork::new(&mut store, &tasks, config, &mut rng).unwrap();
        (store, net)
    }

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|i| ((i as f64) * 0.37).sin() * 0.5 + 0.5).collect()).unwrap()
    }

    #[test]
    fn feature_shape() {
        let (store, net) = build(&EncoderConfig::default(), 0);
        let mut s = Session::new(&store);
        let x = s.graph.constant(image(64, 64));
        let f = net.encode(&mut s, x).unwrap();
        assert_eq!(s.graph.value(f).shape(), &[64, 8, 8]);
    }

    #[test]
    fn zero_image_gives_zero_feature() {
        let (store, net) = build(&EncoderConfig::default(), 0);
        let mut s = Session::new(&store);
        let x = s.graph.constant(Tensor::zeros(&[3, 16, 16]));
        let f = net.encode(&mut s, x).unwrap();
        assert!(s.graph.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_input() {
        let (store, net) = build(&EncoderConfig::default(), 0);
        let mut s = Session::new(&store);
        let x = s.graph.constant(Tensor::zeros(&[3, 20, 16]));
        assert!(matches!(net.encode(&mut s, x), Err(Error::Shape(_))));
    }

    #[test]
    fn head_shapes_and_normalization() {
        let (store, net) = build(&EncoderConfig::default(), 1);
        let mut s = Session::new(&store);
        let x = s.graph.constant(image(64, 64));
        let preds = net.predict_all(&mut s, x).unwrap();
        assert_eq!(s.graph.value(preds[0]).shape(), &[7, 64, 64]);
        assert_eq!(s.graph.value(preds[1]).shape(), &[1, 64, 64]);
        assert!(s.graph.value(preds[1]).is_finite());
        let n = s.graph.value(preds[2]);
        let hw = 64 * 64;
        for p in 0..hw {
            let len = (0..3).map(|c| n.data()[c * hw + p].powi(2)).sum::<f64>().sqrt();
            assert!((len - 1.0).abs() < 1e-5);
        }
        let f = net.encode(&mut s, x).unwrap();
        assert!(matches!(net.predict_task(&mut s, f, 3), Err(Error::UnknownTask(3))));
    }

    #[test]
    fn predict_all_matches_per_task_calls() {
        let (store, net) = build(&EncoderConfig::new(vec![8, 8, 8]), 2);
        let mut s = Session::new(&store);
        let x = s.graph.constant(image(16, 16));
        let all = net.predict_all(&mut s, x).unwrap();
        let f = net.encode(&mut s, x).unwrap();
        for (t, &p) in all.iter().enumerate() {
            let q = net.predict_task(&mut s, f, t).unwrap();
            assert_eq!(s.graph.value(p), s.graph.value(q));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (store_a, net_a) = build(&EncoderConfig::default(), 5);
        let (store_b, net_b) = build(&EncoderConfig::default(), 5);
        let mut sa = Session::new(&store_a);
        let mut sb = Session::new(&store_b);
        let xa = sa.graph.constant(image(32, 32));
        let xb = sb.graph.constant(image(32, 32));
        let fa = net_a.encode(&mut sa, xa).unwrap();
        let fb = net_b.encode(&mut sb, xb).unwrap();
        assert_eq!(sa.graph.value(fa).data(), sb.graph.value(fb).data());
    }

    #[test]
    fn heads_do_not_depend_on_other_heads() {
        // Perturbing a depth-head parameter leaves the segmentation output
        // unchanged.
        let (mut store, net) = build(&EncoderConfig::new(vec![8, 8, 8]), 3);
        let run = |store: &ParamStore| {
            let mut s = Session::new(store);
            let x = s.graph.constant(image(16, 16));
            let p = net.predict_all(&mut s, x).unwrap();
            (s.graph.value(p[0]).clone(), s.graph.value(p[1]).clone())
        };
        let (seg0, depth0) = run(&store);
        let id = net.heads[1].layers.last().unwrap().bias;
        store.get_mut(id).data_mut()[0] += 1e-3;
        let (seg1, depth1) = run(&store);
        assert_eq!(seg0, seg1);
        assert!(depth0.max_abs_diff(&depth1) > 0.0);
    }
}
