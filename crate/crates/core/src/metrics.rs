//! Evaluation metrics and the multi-task performance score.
//!
//! Every metric is accumulated over a whole evaluation set before
//! dividing; accumulators merge associatively so partial results from
//! disjoint shards can be combined in any order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{Label, MetricKind, TaskSet, TaskSpec, IGNORE_LABEL};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: usize,
    pub value: f64,
    pub higher_is_better: bool,
}

/// `counts[label * C + pred]` over non-ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add_classes(&mut self, pred: &[u16], labels: &[u16], ignore: u16) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::Shape("prediction and label maps differ in size".into()));
        }
        let c = self.num_classes;
        for (&p, &l) in pred.iter().zip(labels) {
            if l == ignore {
                continue;
            }
            if l as usize >= c || p as usize >= c {
                return Err(Error::InvalidInput(format!("class id out of range 0..{c}")));
            }
            self.counts[l as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Adds a `C×H×W` logit map after a per-pixel argmax.
    pub fn add_logits(&mut self, logits: &Tensor, labels: &[u16], ignore: u16) -> Result<()> {
        let (c, _, _) = logits.dims3()?;
        if c != self.num_classes {
            return Err(Error::Shape(format!("expected {} classes, got {c}", self.num_classes)));
        }
        let pred: Vec<u16> = logits.argmax_channels()?.into_iter().map(|k| k as u16).collect();
        self.add_classes(&pred, labels, ignore)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both labels and
    /// predictions.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let fp: u64 = (0..c).filter(|&l| l != k).map(|l| self.count(l, k)).sum();
                let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| self.count(k, p)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("no non-ignored pixels".into()));
        }
        let ious: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// mIoU of a single `C×H×W` logit map.
pub fn miou(logits: &Tensor, labels: &[u16], num_classes: usize, ignore: u16) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add_logits(logits, labels, ignore)?;
    cm.miou()
}

/// Running mean of per-pixel values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanAccumulator {
    pub sum: f64,
    pub count: u64,
}

impl MeanAccumulator {
    pub fn merge(&mut self, other: &MeanAccumulator) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::UndefinedMetric("no pixels accumulated".into()));
        }
        Ok(self.sum / self.count as f64)
    }

    pub fn add_abs_err(&mut self, pred: &[f64], label: &[f64]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::Shape("prediction and label differ in size".into()));
        }
        self.sum += pred.iter().zip(label).map(|(p, l)| (p - l).abs()).sum::<f64>();
        self.count += pred.len() as u64;
        Ok(())
    }

    /// Angles in degrees between `3×H×W` direction fields. Vectors are
    /// normalised first, with norms clamped at `1e-8`.
    pub fn add_angle_err(&mut self, pred: &[f64], label: &[f64]) -> Result<()> {
        if pred.len() != label.len() || pred.len() % 3 != 0 {
            return Err(Error::Shape("normal fields must both be 3×H×W".into()));
        }
        let hw = pred.len() / 3;
        for p in 0..hw {
            let (mut dot, mut np, mut nl) = (0.0, 0.0, 0.0);
            for c in 0..3 {
                let (a, b) = (pred[c * hw + p], label[c * hw + p]);
                dot += a * b;
                np += a * a;
                nl += b * b;
            }
            let cos = dot / (np.sqrt().max(1e-8) * nl.sqrt().max(1e-8));
            self.sum += cos.clamp(-1.0, 1.0).acos().to_degrees();
        }
        self.count += hw as u64;
        Ok(())
    }
}

/// Mean absolute error.
pub fn abs_err(pred: &[f64], label: &[f64]) -> Result<f64> {
    let mut acc = MeanAccumulator::default();
    acc.add_abs_err(pred, label)?;
    acc.mean()
}

/// Mean angular error in degrees between `3×H×W` normal fields.
pub fn mean_angle_err(pred: &[f64], label: &[f64]) -> Result<f64> {
    let mut acc = MeanAccumulator::default();
    acc.add_angle_err(pred, label)?;
    acc.mean()
}

/// Average signed relative change of the multi-task model over single-task
/// references, in percent. Positive means better.
pub fn delta_mtl(mtl: &[f64], stl: &[f64], higher_is_better: &[bool]) -> Result<f64> {
    if mtl.len() != stl.len() || mtl.len() != higher_is_better.len() || mtl.is_empty() {
        return Err(Error::InvalidInput("delta_mtl needs equal, non-empty lengths".into()));
    }
    let mut sum = 0.0;
    for (t, ((&m, &s), &hib)) in mtl.iter().zip(stl).zip(higher_is_better).enumerate() {
        if s == 0.0 {
            return Err(Error::ZeroReference(t));
        }
        let sign = if hib { 1.0 } else { -1.0 };
        sum += sign * (m - s) / s;
    }
    Ok(100.0 * sum / mtl.len() as f64)
}

/// Accumulator for one task's metric.
#[derive(Clone, Debug)]
pub enum MetricAccumulator {
    Confusion(ConfusionMatrix),
    Mean(MetricKind, MeanAccumulator),
}

impl MetricAccumulator {
    pub fn for_task(spec: &TaskSpec) -> Self {
        match spec.metric_kind {
            MetricKind::Miou => Self::Confusion(ConfusionMatrix::new(spec.out_channels)),
            kind => Self::Mean(kind, MeanAccumulator::default()),
        }
    }

    pub fn add(&mut self, pred: &Tensor, label: &Label) -> Result<()> {
        match (self, label) {
            (Self::Confusion(cm), Label::Classes(c)) => cm.add_logits(pred, c, IGNORE_LABEL),
            (Self::Mean(kind, acc), Label::Dense(d)) => {
                let l: Vec<f64> = d.iter().map(|&v| v as f64).collect();
                match kind {
                    MetricKind::AbsErr => acc.add_abs_err(pred.data(), &l),
                    _ => acc.add_angle_err(pred.data(), &l),
                }
            }
            _ => Err(Error::InvalidInput("label kind does not match metric".into())),
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) -> Result<()> {
        match (self, other) {
            (Self::Confusion(a), Self::Confusion(b)) => a.merge(b),
            (Self::Mean(ka, a), Self::Mean(kb, b)) if ka == kb => {
                a.merge(b);
                Ok(())
            }
            _ => Err(Error::InvalidInput("cannot merge different metrics".into())),
        }
    }

    pub fn value(&self) -> Result<f64> {
        match self {
            Self::Confusion(cm) => cm.miou(),
            Self::Mean(_, acc) => acc.mean(),
        }
    }
}

/// One accumulator per task.
#[derive(Clone, Debug)]
pub struct Evaluator {
    higher_is_better: Vec<bool>,
    accs: Vec<MetricAccumulator>,
}

impl Evaluator {
    pub fn new(tasks: &TaskSet) -> Self {
        Self {
            higher_is_better: tasks.higher_is_better(),
            accs: tasks.iter().map(MetricAccumulator::for_task).collect(),
        }
    }

    pub fn add(&mut self, task: usize, pred: &Tensor, label: &Label) -> Result<()> {
        self.accs.get_mut(task).ok_or(Error::UnknownTask(task))?.add(pred, label)
    }

    pub fn merge(&mut self, other: &Evaluator) -> Result<()> {
        for (a, b) in self.accs.iter_mut().zip(&other.accs) {
            a.merge(b)?;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Vec<TaskMetric>> {
        self.accs
            .iter()
            .enumerate()
            .map(|(task, acc)| {
                Ok(TaskMetric { task, value: acc.value()?, higher_is_better: self.higher_is_better[task] })
            })
            .collect()
    }
}
