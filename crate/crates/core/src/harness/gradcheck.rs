//! Central finite-difference verification of every training objective.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::model::{ModelConfig, ModelState};
use crate::network::EncoderConfig;
use crate::params::{ParamGroup, ParamStore, Session};
use crate::ssl::CropParams;
use crate::synth::{generate_scene, SceneConfig};
use crate::task::{LabelMask, Sample};
use crate::xtask::{MappingConfig, Strategy};

/// Outcome of checking one objective.
#[derive(Clone, Debug, Serialize)]
pub struct GradcheckResult {
    pub objective: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-5, tolerance: 1e-4, coords_per_param: 4, seed: 0 }
    }
}

/// Compares backpropagated gradients of `build` with central differences
/// over parameters accepted by `trainable`. Stop-gradient nodes keep their
/// unperturbed values in the perturbed evaluations.
pub fn check_objective(
    store: &ParamStore,
    trainable: impl Fn(ParamGroup) -> bool + Copy,
    build: impl Fn(&mut Session) -> Result<Var>,
    opts: &GradcheckOptions,
) -> Result<(usize, f64)> {
    let (grads, stops) = {
        let mut s = Session::with_trainable(store, trainable);
        let loss = build(&mut s)?;
        (s.backward(loss), s.graph.stop_values().to_vec())
    };
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eval = |work: &ParamStore| -> Result<f64> {
        let mut s = Session::with_trainable(work, trainable);
        s.graph = Graph::with_stop_values(stops.clone());
        let loss = build(&mut s)?;
        Ok(s.graph.scalar(loss))
    };
    let (mut checked, mut worst) = (0, 0.0f64);
    for id in store.ids() {
        let Some(g) = grads.get(id) else { continue };
        let n = g.len();
        for c in sample(&mut rng, n, opts.coords_per_param.min(n)).iter() {
            let orig = work.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = g.data()[c];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok((checked, worst))
}

/// Two-task (segmentation, depth) `8×8` toy: three images labelled for
/// {seg}, {depth} and both.
pub fn toy_batch(seed: u64) -> Result<Vec<Sample>> {
    [vec![0], vec![1], vec![0, 1]]
        .into_iter()
        .enumerate()
        .map(|(i, labelled)| {
            let scene = SceneConfig {
                height: 8,
                width: 8,
                min_shapes: 1,
                max_shapes: 2,
                num_classes: 3,
                seed: seed + i as u64,
                ..SceneConfig::default()
            };
            let mut s = generate_scene(&scene)?;
            s.labels.truncate(2);
            s.mask = LabelMask::full(2);
            Ok(s.with_mask(LabelMask::new(labelled, 2)?))
        })
        .collect()
}

pub fn toy_model(strategy: Strategy, uncertainty: bool, seed: u64) -> Result<ModelState> {
    let tasks = crate::task::TaskSet::standard(2, 3)?;
    let config = ModelConfig {
        strategy,
        encoder: EncoderConfig::new(vec![8, 8]),
        mapping: MappingConfig { input_width: 4, hidden_widths: vec![8], ..MappingConfig::default() },
        uncertainty,
        disc_hidden: 4,
        ..ModelConfig::default()
    };
    let mut m = ModelState::new(&tasks, &config, seed)?;
    if uncertainty {
        // Move log-variances off zero so their gradient is non-trivial.
        for (i, id) in m.log_vars.clone().into_iter().flatten().enumerate() {
            m.store.get_mut(id).data_mut()[0] = 0.3 - 0.5 * i as f64;
        }
    }
    Ok(m)
}

/// Runs the finite-difference check on every objective: masked supervised
/// (with and without uncertainty weighting), crop consistency, the full
/// joint-space objective and its ablations, both pair-network variants,
/// the contrastive loss, and both sides of the adversarial game.
pub fn gradcheck_suite(opts: &GradcheckOptions) -> Result<Vec<GradcheckResult>> {
    let batch_owned = toy_batch(opts.seed)?;
    let batch: Vec<&Sample> = batch_owned.iter().collect();
    let crops = vec![
        CropParams { top: 0, left: 4, height: 4, width: 4 },
        CropParams { top: 4, left: 0, height: 4, width: 8 },
        CropParams { top: 0, left: 0, height: 8, width: 4 },
    ];
    let cases: [(&str, Strategy, bool); 10] = [
        ("supervised", Strategy::Sl, false),
        ("supervised_uncertainty", Strategy::Sl, true),
        ("ssl", Strategy::Ssl, false),
        ("ours", Strategy::Ours, false),
        ("ours_no_cond", Strategy::OursNoCond, false),
        ("ours_no_reg", Strategy::OursNoReg, false),
        ("direct_map", Strategy::DirectMap, false),
        ("perceptual_map", Strategy::PerceptualMap, false),
        ("contrastive", Strategy::Contrastive, false),
        ("discriminator_generator", Strategy::Discriminator, false),
    ];
    let mut out = Vec::new();
    for (name, strategy, unc) in cases {
        let m = toy_model(strategy, unc, opts.seed + 17)?;
        let crops: &[CropParams] = if strategy == Strategy::Ssl { &crops } else { &[] };
        let (checked, err) = check_objective(
            &m.store,
            |g| g != ParamGroup::Discriminator,
            |s| Ok(m.objective(s, &batch, crops)?.total),
            opts,
        )?;
        out.push(GradcheckResult { objective: name.into(), checked, max_rel_err: err, passed: err < opts.tolerance });
    }
    let m = toy_model(Strategy::Discriminator, false, opts.seed + 17)?;
    let (checked, err) = check_objective(
        &m.store,
        |g| g == ParamGroup::Discriminator,
        |s| Ok(m.discriminator_objective(s, &batch)?.expect("toy batch has positive pairs")),
        opts,
    )?;
    out.push(GradcheckResult {
        objective: "discriminator".into(),
        checked,
        max_rel_err: err,
        passed: err < opts.tolerance,
    });
    Ok(out)
}
