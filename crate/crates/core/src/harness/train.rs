use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{delta_mtl, Evaluator};
use crate::model::{ModelState, StepRates};
use crate::params::{Adam, ParamStore};
use crate::synth::{generate_dataset, load_dataset, splitmix64, Dataset};
use crate::task::{LabelMask, MetricKind, Sample, TaskSet};
use crate::xtask::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    /// Cross-task terms summed over the epoch's steps.
    pub ct_terms: usize,
    /// Test metric of each task after the epoch.
    pub metrics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub strategy: Strategy,
    pub protocol: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub task_names: Vec<String>,
    pub metric_names: Vec<String>,
    pub higher_is_better: Vec<bool>,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Vec<f64>,
    /// Epoch with the best mean per-task rank.
    pub best_epoch: usize,
    pub best_metrics: Vec<f64>,
    /// Final metrics of the single-task baselines.
    pub stl_metrics: Option<Vec<f64>>,
    /// ΔMTL of the final model against `stl_metrics`.
    pub delta_mtl: Option<f64>,
    /// ΔMTL of the best-ranked epoch against `stl_metrics`.
    pub delta_mtl_best: Option<f64>,
    pub wall_clock_secs: f64,
    pub steps: Vec<StepRecord>,
}

impl ExperimentReport {
    /// Sets the baseline metrics and the derived ΔMTL values.
    pub fn attach_stl(&mut self, stl: Vec<f64>) -> Result<()> {
        self.delta_mtl = Some(delta_mtl(&self.final_metrics, &stl, &self.higher_is_better)?);
        self.delta_mtl_best = Some(delta_mtl(&self.best_metrics, &stl, &self.higher_is_better)?);
        self.stl_metrics = Some(stl);
        Ok(())
    }
}

/// Result of one training run before anything is written.
pub struct TrainOutcome {
    pub report: ExperimentReport,
    pub final_model: ModelState,
    pub best_model: ModelState,
}

pub fn metric_name(kind: MetricKind) -> &'static str {
    match kind {
        MetricKind::Miou => "miou",
        MetricKind::AbsErr => "abs_err",
        MetricKind::MeanAngleErr => "mean_angle_err",
    }
}

/// The configured dataset, loaded from `config.data` or generated.
pub fn load_or_generate(config: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &config.data {
        Some(path) => load_dataset(path)?,
        None => generate_dataset(
            &config.scene(),
            config.num_tasks,
            config.n_train,
            config.n_test,
            &config.protocol()?,
            config.data_seed,
        )?,
    };
    if ds.tasks.len() != config.num_tasks {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} tasks, config asks for {}",
            ds.tasks.len(),
            config.num_tasks
        )));
    }
    Ok(ds)
}

/// Test metrics of every task. Images are evaluated in parallel; the
/// partial results are merged in image order so the sums are reproducible.
pub fn evaluate(model: &ModelState, test: &[Sample]) -> Result<Vec<f64>> {
    let parts: Vec<Evaluator> = test
        .par_iter()
        .map(|sample| {
            let mut ev = Evaluator::new(&model.tasks);
            for (t, pred) in model.predict(sample)?.iter().enumerate() {
                if let Some(label) = sample.label(t) {
                    ev.add(t, pred, label)?;
                }
            }
            Ok(ev)
        })
        .collect::<Result<_>>()?;
    let mut total = Evaluator::new(&model.tasks);
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total.finish()?.into_iter().map(|m| m.value).collect())
}

/// Index of the epoch with the lowest mean per-task rank (1 = best of all
/// epochs for that task); ties go to the earlier epoch.
pub fn best_by_rank(per_epoch: &[Vec<f64>], higher_is_better: &[bool]) -> usize {
    let mean_rank = |e: usize| -> f64 {
        higher_is_better
            .iter()
            .enumerate()
            .map(|(t, &hib)| {
                let v = per_epoch[e][t];
                let better = per_epoch.iter().filter(|o| if hib { o[t] > v } else { o[t] < v }).count();
                (better + 1) as f64
            })
            .sum::<f64>()
            / higher_is_better.len() as f64
    };
    (0..per_epoch.len()).fold(0, |best, e| if mean_rank(e) < mean_rank(best) { e } else { best })
}

/// Trains on `ds` without writing anything. `progress` sees every epoch.
pub fn train_on(
    config: &ExperimentConfig,
    ds: &Dataset,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let mut model = ModelState::new(&ds.tasks, &config.model(), config.seed)?;
    let mut opt = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x7472_6169_6e));
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut snapshots: Vec<ParamStore> = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let rates = StepRates { lr, mapping_mult: config.mapping_lr_mult };
        order.shuffle(&mut rng);
        let (mut sum, mut count, mut ct_terms) = (0.0, 0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &ds.train[i]).collect();
            let crops = model.sample_crops(&batch, &mut rng)?;
            let report = model.train_step(&mut opt, &batch, &crops, rates, step)?;
            sum += report.total;
            count += 1;
            ct_terms += report.ct_terms;
            steps.push(StepRecord { step, epoch, lr, report });
            step += 1;
        }
        let metrics = evaluate(&model, &ds.test)?;
        let record = EpochRecord { epoch, lr, mean_total: sum / count as f64, ct_terms, metrics };
        progress(&record);
        epochs.push(record);
        snapshots.push(model.store.clone());
    }
    let hib = ds.tasks.higher_is_better();
    let per_epoch: Vec<Vec<f64>> = epochs.iter().map(|e| e.metrics.clone()).collect();
    let best_epoch = best_by_rank(&per_epoch, &hib);
    let mut best_model = model.clone();
    best_model.store = snapshots.swap_remove(best_epoch);
    let report = ExperimentReport {
        name: config.name.clone(),
        strategy: config.strategy,
        protocol: ds.protocol.name().into(),
        seed: config.seed,
        config_hash: config.hash(),
        config: config.clone(),
        task_names: ds.tasks.iter().map(|t| t.name.clone()).collect(),
        metric_names: ds.tasks.iter().map(|t| metric_name(t.metric_kind).to_string()).collect(),
        higher_is_better: hib,
        final_metrics: per_epoch.last().cloned().unwrap_or_default(),
        best_metrics: per_epoch[best_epoch].clone(),
        best_epoch,
        epochs,
        stl_metrics: None,
        delta_mtl: None,
        delta_mtl_best: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        steps,
    };
    Ok(TrainOutcome { report, final_model: model, best_model })
}

/// Single-task view of `ds` for task `t`: training images labelled for `t`
/// and the test split, each carrying only that label.
pub fn single_task_dataset(ds: &Dataset, t: usize) -> Result<Dataset> {
    let tasks: TaskSet = ds.tasks.single(t)?;
    let project = |s: &Sample| Sample {
        height: s.height,
        width: s.width,
        image: s.image.clone(),
        labels: vec![s.labels[t].clone()],
        mask: LabelMask::full(1),
    };
    Ok(Dataset {
        scene: ds.scene.clone(),
        tasks,
        protocol: ds.protocol.clone(),
        seed: ds.seed,
        train: ds.train.iter().filter(|s| s.mask.is_labelled(t)).map(project).collect(),
        test: ds.test.iter().map(project).collect(),
    })
}

/// One single-task supervised run per task on that task's labelled subset,
/// with the same backbone and schedule.
pub fn run_stl_baselines(config: &ExperimentConfig, ds: &Dataset) -> Result<Vec<ExperimentReport>> {
    (0..ds.tasks.len())
        .map(|t| {
            let sub = single_task_dataset(ds, t)?;
            if sub.train.is_empty() {
                return Err(Error::InvalidConfig(format!("no training image is labelled for task {t}")));
            }
            let c = stl_config(config, t, &ds.tasks);
            Ok(train_on(&c, &sub, |_| {})?.report)
        })
        .collect()
}

fn stl_config(config: &ExperimentConfig, t: usize, tasks: &TaskSet) -> ExperimentConfig {
    let name = tasks.get(t).map(|s| s.name.clone()).unwrap_or_default();
    ExperimentConfig {
        name: format!("{}_stl_{name}", config.name),
        strategy: Strategy::Sl,
        protocol: "full".into(),
        ratios: None,
        num_tasks: 1,
        uncertainty: false,
        run_stl: false,
        ..config.clone()
    }
}

/// Final metric of each baseline, in task order.
pub fn stl_metrics(baselines: &[ExperimentReport]) -> Vec<f64> {
    baselines.iter().map(|r| r.final_metrics[0]).collect()
}

/// Writes the report, loss log, metric log and checkpoints into `dir`.
pub fn write_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let r = &outcome.report;
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(r)?)?;
    write_loss_log(&dir.join("losses.csv"), r)?;
    write_metric_log(&dir.join("metrics.csv"), r)?;
    // Where the files go is not part of what they contain.
    let echo = ExperimentConfig { output_dir: PathBuf::new(), ..r.config.clone() };
    save_checkpoint(dir.join("final.ckpt"), &outcome.final_model, &echo, r.epochs.len())?;
    save_checkpoint(dir.join("best.ckpt"), &outcome.best_model, &echo, r.best_epoch + 1)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_loss_log(path: &Path, r: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut head = vec!["step".to_string(), "epoch".into(), "lr".into()];
    head.extend(r.task_names.iter().map(|n| format!("{n}_loss")));
    for c in [
        "supervised",
        "ssl",
        "cross_task",
        "regularizer",
        "auxiliary",
        "discriminator",
        "ct_terms",
        "reg_terms",
        "ssl_terms",
        "total",
    ] {
        head.push(c.into());
    }
    w.write_record(&head).map_err(csv_err)?;
    for s in &r.steps {
        let l = &s.report;
        let mut row = vec![s.step.to_string(), s.epoch.to_string(), s.lr.to_string()];
        row.extend(l.task_losses.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        for v in [l.supervised, l.ssl, l.cross_task, l.regularizer, l.auxiliary, l.discriminator] {
            row.push(v.to_string());
        }
        for v in [l.ct_terms, l.reg_terms, l.ssl_terms] {
            row.push(v.to_string());
        }
        row.push(l.total.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metric_log(path: &Path, r: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut head = vec!["epoch".to_string(), "lr".into(), "mean_total".into(), "ct_terms".into()];
    head.extend(r.task_names.iter().zip(&r.metric_names).map(|(t, m)| format!("{t}_{m}")));
    w.write_record(&head).map_err(csv_err)?;
    for e in &r.epochs {
        let mut row = vec![e.epoch.to_string(), e.lr.to_string(), e.mean_total.to_string(), e.ct_terms.to_string()];
        row.extend(e.metrics.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Generates or loads data, trains, optionally runs the baselines, and
/// writes everything into `config.output_dir`.
pub fn train(config: &ExperimentConfig, progress: impl FnMut(&EpochRecord)) -> Result<ExperimentReport> {
    let ds = load_or_generate(config)?;
    let mut outcome = train_on(config, &ds, progress)?;
    if config.run_stl {
        let baselines = run_stl_baselines(config, &ds)?;
        outcome.report.attach_stl(stl_metrics(&baselines))?;
    }
    write_outputs(&config.output_dir, &outcome)?;
    Ok(outcome.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_selection() {
        // Task 0 higher-is-better, task 1 lower-is-better.
        let per_epoch = vec![vec![0.5, 3.0], vec![0.7, 2.0], vec![0.6, 1.0]];
        assert_eq!(best_by_rank(&per_epoch, &[true, false]), 1);
        assert_eq!(best_by_rank(&[vec![1.0], vec![1.0]], &[true]), 0);
    }

    #[test]
    fn single_task_view_keeps_only_labelled_images() {
        let scene = crate::synth::SceneConfig { height: 16, width: 16, ..Default::default() };
        let ds = generate_dataset(&scene, 3, 9, 2, &crate::task::Protocol::One, 0).unwrap();
        let mut total = 0;
        for t in 0..3 {
            let sub = single_task_dataset(&ds, t).unwrap();
            total += sub.train.len();
            for s in sub.train.iter().chain(&sub.test) {
                s.validate(&sub.tasks).unwrap();
            }
        }
        assert_eq!(total, 9);
    }
}
