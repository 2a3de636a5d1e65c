//! Model state for one strategy and the per-strategy objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::losses::{combine_supervised, image_tensor, supervised_terms, ImageForward, LossReport, Objective};
use crate::network::{EncoderConfig, MtlNetwork};
use crate::params::{Adam, ParamGrads, ParamGroup, ParamId, ParamStore, Session};
use crate::ssl::{sample_crop, ssl_consistency_loss, CropParams};
use crate::task::{Sample, TaskSet};
use crate::tensor::Tensor;
use crate::xtask::{
    contrastive_term, direct_map_term, discriminator_losses, discriminator_pairs, full_objective, perceptual_map_term,
    Discriminator, MappingConfig, MappingNet, PairNets, Strategy, XtaskVariant,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub strategy: Strategy,
    pub encoder: EncoderConfig,
    pub mapping: MappingConfig,
    /// Weight of the cross-task part (joint-space, pair-network,
    /// contrastive or adversarial).
    pub lambda_ct: f64,
    /// Weight of the crop-consistency part.
    pub lambda_ssl: f64,
    /// Learned per-task log-variance weighting of the supervised losses.
    pub uncertainty: bool,
    pub contrastive_margin: f64,
    pub disc_hidden: usize,
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_frac: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ours,
            encoder: EncoderConfig::default(),
            mapping: MappingConfig::default(),
            lambda_ct: 1.0,
            lambda_ssl: 1.0,
            uncertainty: false,
            contrastive_margin: 0.1,
            disc_hidden: 16,
            crop_min_frac: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (name, v) in [("lambda_ct", self.lambda_ct), ("lambda_ssl", self.lambda_ssl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and ≥ 0")));
            }
        }
        if !(self.contrastive_margin >= 0.0 && self.contrastive_margin.is_finite()) {
            return Err(Error::InvalidConfig("contrastive_margin must be finite and ≥ 0".into()));
        }
        if !(self.crop_min_frac > 0.0 && self.crop_min_frac <= 1.0) {
            return Err(Error::InvalidConfig("crop_min_frac must be in (0, 1]".into()));
        }
        if self.disc_hidden == 0 {
            return Err(Error::InvalidConfig("disc_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// All parameters of a model trained with one strategy, plus the module
/// structure that addresses them.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub tasks: TaskSet,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: MtlNetwork,
    pub mapping: Option<MappingNet>,
    pub pair_nets: Option<PairNets>,
    pub disc: Option<Discriminator>,
    pub log_vars: Option<Vec<ParamId>>,
}

impl ModelState {
    /// Builds and initialises every component the strategy needs.
    pub fn new(tasks: &TaskSet, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = MtlNetwork::new(&mut store, tasks, &config.encoder, &mut rng)?;
        let strategy = config.strategy;
        let mapping = if strategy.uses_joint_mapping() {
            let mut mc = config.mapping.clone();
            if strategy == Strategy::OursNoCond {
                mc.conditioned = false;
            }
            Some(MappingNet::new(&mut store, tasks, &config.encoder, &mc, &mut rng)?)
        } else {
            None
        };
        let pair_nets = if strategy.uses_pair_nets() {
            Some(PairNets::new(&mut store, tasks, &config.encoder, &mut rng)?)
        } else {
            None
        };
        let disc = (strategy == Strategy::Discriminator)
            .then(|| Discriminator::new(&mut store, config.encoder.feature_channels(), config.disc_hidden, &mut rng));
        let log_vars = config.uncertainty.then(|| {
            tasks
                .iter()
                .map(|t| store.add(format!("log_var{}.{}", t.id, t.name), ParamGroup::Uncertainty, Tensor::scalar(0.0)))
                .collect()
        });
        Ok(Self { tasks: tasks.clone(), config: config.clone(), store, net, mapping, pair_nets, disc, log_vars })
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    fn mapping(&self) -> Result<&MappingNet> {
        self.mapping.as_ref().ok_or_else(|| Error::InvalidConfig("strategy has no mapping network".into()))
    }

    /// One crop per image for crop-consistency strategies, otherwise none.
    pub fn sample_crops(&self, batch: &[&Sample], rng: &mut impl Rng) -> Result<Vec<CropParams>> {
        if self.strategy() != Strategy::Ssl {
            return Ok(Vec::new());
        }
        let stride = self.config.encoder.stride();
        batch.iter().map(|b| sample_crop(b.height, b.width, stride, self.config.crop_min_frac, rng)).collect()
    }

    /// The strategy's objective on `batch`. For the adversarial strategy this
    /// is the network-side objective; the discriminator should be frozen in
    /// `s`.
    pub fn objective(&self, s: &mut Session, batch: &[&Sample], crops: &[CropParams]) -> Result<Objective> {
        let log_vars = self.log_vars.as_deref();
        let strategy = self.strategy();
        let lambda = self.config.lambda_ct;
        match strategy {
            Strategy::Ours | Strategy::OursNoCond => {
                return full_objective(&self.net, self.mapping()?, s, batch, lambda, XtaskVariant::Full, log_vars)
            }
            Strategy::OursNoReg => {
                return full_objective(&self.net, self.mapping()?, s, batch, lambda, XtaskVariant::NoReg, log_vars)
            }
            _ => {}
        }
        let mut fwd = batch.iter().map(|b| ImageForward::new(&self.net, s, b)).collect::<Result<Vec<_>>>()?;
        let (shares, mut report) = supervised_terms(&self.net, s, batch, &mut fwd)?;
        let sup = combine_supervised(s, &shares, log_vars)?;
        let extra: Option<(Var, f64)> = match strategy {
            Strategy::Sl => None,
            Strategy::Ssl => {
                if crops.len() != batch.len() {
                    return Err(Error::InvalidInput(format!("{} crops for {} images", crops.len(), batch.len())));
                }
                let n = batch.len() as f64;
                let mut terms = Vec::new();
                for ((sample, f), r) in batch.iter().zip(fwd.iter_mut()).zip(crops) {
                    if sample.mask.unlabelled.is_empty() {
                        continue;
                    }
                    let l = ssl_consistency_loss(&self.net, s, f, &sample.mask.unlabelled, r)?;
                    terms.push(s.graph.scale(l, 1.0 / n));
                }
                report.ssl_terms = terms.len();
                let sum = s.graph.add_all(&terms)?;
                report.ssl = self.config.lambda_ssl * s.graph.scalar(sum);
                Some((sum, self.config.lambda_ssl))
            }
            Strategy::DirectMap | Strategy::PerceptualMap => {
                let pairs = self.pair_nets.as_ref().ok_or_else(|| Error::InvalidConfig("no pair networks".into()))?;
                let term = if strategy == Strategy::DirectMap {
                    direct_map_term(&self.net, pairs, s, batch, &mut fwd)?
                } else {
                    perceptual_map_term(&self.net, pairs, s, batch, &mut fwd)?
                };
                report.ct_terms = term.terms;
                report.auxiliary = lambda * term.value;
                Some((term.total, lambda))
            }
            Strategy::Contrastive => {
                let term =
                    contrastive_term(&self.net, self.mapping()?, s, batch, &mut fwd, self.config.contrastive_margin)?;
                report.ct_terms = term.terms;
                report.auxiliary = lambda * term.value;
                Some((term.total, lambda))
            }
            Strategy::Discriminator => {
                let disc = self.disc.as_ref().ok_or_else(|| Error::InvalidConfig("no discriminator".into()))?;
                let (pos, neg) = discriminator_pairs(&self.net, self.mapping()?, s, batch, &mut fwd)?;
                report.ct_terms = pos.len();
                match discriminator_losses(disc, s, &pos, &neg)? {
                    Some((_, gen)) => {
                        report.auxiliary = lambda * s.graph.scalar(gen);
                        Some((gen, lambda))
                    }
                    None => None,
                }
            }
            Strategy::Ours | Strategy::OursNoCond | Strategy::OursNoReg => unreachable!("handled above"),
        };
        let total = match extra {
            Some((v, w)) => {
                let scaled = s.graph.scale(v, w);
                s.graph.add(sup, scaled)?
            }
            None => sup,
        };
        report.total = s.graph.scalar(total);
        Ok(Objective { total, report })
    }

    /// Discriminator loss on `batch`, or `None` when the batch has no
    /// positive pair. Only discriminator parameters should be trainable in
    /// `s`.
    pub fn discriminator_objective(&self, s: &mut Session, batch: &[&Sample]) -> Result<Option<Var>> {
        let disc = self.disc.as_ref().ok_or_else(|| Error::InvalidConfig("no discriminator".into()))?;
        let mut fwd = batch.iter().map(|b| ImageForward::new(&self.net, s, b)).collect::<Result<Vec<_>>>()?;
        let (pos, neg) = discriminator_pairs(&self.net, self.mapping()?, s, batch, &mut fwd)?;
        Ok(discriminator_losses(disc, s, &pos, &neg)?.map(|(d, _)| d))
    }

    /// One optimisation step. The adversarial strategy first updates the
    /// discriminator with everything else frozen, then the rest with the
    /// discriminator frozen.
    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        batch: &[&Sample],
        crops: &[CropParams],
        rates: StepRates,
        step: usize,
    ) -> Result<LossReport> {
        let mut disc_loss = 0.0;
        if self.strategy() == Strategy::Discriminator {
            let grads = {
                let mut s = Session::with_trainable(&self.store, |g| g == ParamGroup::Discriminator);
                match self.discriminator_objective(&mut s, batch)? {
                    Some(l) => {
                        disc_loss = s.graph.scalar(l);
                        check_finite(disc_loss, "discriminator", step, rates.lr)?;
                        Some(s.backward(l))
                    }
                    None => None,
                }
            };
            if let Some(g) = grads {
                check_grads(&g, "discriminator", step, rates.lr)?;
                opt.step(&mut self.store, &g, |grp| rates.rate(grp));
            }
        }
        let (report, grads) = {
            let mut s = Session::new(&self.store);
            s.freeze(ParamGroup::Discriminator);
            let obj = self.objective(&mut s, batch, crops)?;
            check_report(&obj.report, step, rates.lr)?;
            let g = s.backward(obj.total);
            (obj.report, g)
        };
        check_grads(&grads, "gradient", step, rates.lr)?;
        opt.step(&mut self.store, &grads, |grp| rates.rate(grp));
        Ok(LossReport { discriminator: disc_loss, ..report })
    }

    /// All task predictions for one image.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<Tensor>> {
        let mut s = Session::new(&self.store);
        let image = s.graph.constant(image_tensor(sample)?);
        let preds = self.net.predict_all(&mut s, image)?;
        Ok(preds.into_iter().map(|p| s.graph.value(p).clone()).collect())
    }

    /// Current per-task log-variances, if uncertainty weighting is on.
    pub fn log_var_values(&self) -> Option<Vec<f64>> {
        self.log_vars.as_ref().map(|ids| ids.iter().map(|&id| self.store.get(id).data()[0]).collect())
    }
}

/// Learning rates of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub lr: f64,
    /// Multiplier applied to mapping and pair-network parameters.
    pub mapping_mult: f64,
}

impl StepRates {
    pub fn rate(&self, group: ParamGroup) -> f64 {
        if group.is_mapping() {
            self.lr * self.mapping_mult
        } else {
            self.lr
        }
    }
}

fn check_finite(v: f64, term: &str, step: usize, lr: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, lr, term: format!("{term} = {v}") })
    }
}

fn check_grads(g: &ParamGrads, term: &str, step: usize, lr: f64) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, lr, term: format!("{term} (non-finite parameter gradient)") })
    }
}

/// Names the first non-finite part of a report.
fn check_report(r: &LossReport, step: usize, lr: f64) -> Result<()> {
    for (t, l) in r.task_losses.iter().enumerate() {
        if let Some(v) = l {
            check_finite(*v, &format!("task {t} loss"), step, lr)?;
        }
    }
    for (name, v) in [
        ("supervised", r.supervised),
        ("ssl", r.ssl),
        ("cross_task", r.cross_task),
        ("regularizer", r.regularizer),
        ("auxiliary", r.auxiliary),
        ("total", r.total),
    ] {
        check_finite(v, name, step, lr)?;
    }
    Ok(())
}
