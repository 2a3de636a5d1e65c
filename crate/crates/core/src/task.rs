//! Tasks, samples and partial-annotation protocols.
//!
//! A fully-labelled dataset is turned into a partially-labelled one by
//! assigning each image a [`LabelMask`]: the set of tasks whose labels are
//! kept (`labelled`) and its complement (`unlabelled`). Every image keeps at
//! least one label.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value skipped by segmentation losses and metrics.
pub const IGNORE_LABEL: u16 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    L1,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Miou,
    AbsErr,
    MeanAngleErr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub out_channels: usize,
    pub loss_kind: LossKind,
    pub metric_kind: MetricKind,
    pub higher_is_better: bool,
}

impl TaskSpec {
    pub fn segmentation(id: usize, num_classes: usize) -> Self {
        Self {
            id,
            name: "segmentation".into(),
            out_channels: num_classes,
            loss_kind: LossKind::CrossEntropy,
            metric_kind: MetricKind::Miou,
            higher_is_better: true,
        }
    }

    pub fn depth(id: usize) -> Self {
        Self {
            id,
            name: "depth".into(),
            out_channels: 1,
            loss_kind: LossKind::L1,
            metric_kind: MetricKind::AbsErr,
            higher_is_better: false,
        }
    }

    pub fn normals(id: usize) -> Self {
        Self {
            id,
            name: "normals".into(),
            out_channels: 3,
            loss_kind: LossKind::Cosine,
            metric_kind: MetricKind::MeanAngleErr,
            higher_is_better: false,
        }
    }

    /// Channels of the dense encoding fed to mapping networks: class maps are
    /// one-hot encoded, so this equals `out_channels` for every kind.
    pub fn dense_channels(&self) -> usize {
        self.out_channels
    }
}

/// Validated list of tasks with dense ids `0..K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TaskSpec>", into = "Vec<TaskSpec>")]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
}

impl TaskSet {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidConfig("task set is empty".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.id != i {
                return Err(Error::InvalidConfig(format!("task ids must be dense: position {i} has id {}", t.id)));
            }
            if t.out_channels == 0 {
                return Err(Error::InvalidConfig(format!("task {} has zero output channels", t.name)));
            }
            if t.loss_kind == LossKind::Cosine && t.out_channels != 3 {
                return Err(Error::InvalidConfig(format!("cosine task {} must have 3 channels", t.name)));
            }
            if t.loss_kind == LossKind::CrossEntropy && t.out_channels < 2 {
                return Err(Error::InvalidConfig(format!("segmentation task {} needs ≥ 2 classes", t.name)));
            }
        }
        Ok(Self { tasks })
    }

    /// Segmentation, then depth, then normals, truncated to `k` tasks.
    pub fn standard(k: usize, num_classes: usize) -> Result<Self> {
        if !(1..=3).contains(&k) {
            return Err(Error::InvalidConfig(format!("standard task set supports 1..=3 tasks, got {k}")));
        }
        let all = [TaskSpec::segmentation(0, num_classes), TaskSpec::depth(1), TaskSpec::normals(2)];
        Self::new(all[..k].to_vec())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&TaskSpec> {
        self.tasks.get(id).ok_or(Error::UnknownTask(id))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TaskSpec> {
        self.tasks.iter()
    }

    pub fn higher_is_better(&self) -> Vec<bool> {
        self.tasks.iter().map(|t| t.higher_is_better).collect()
    }

    /// The set restricted to one task, re-indexed to id 0.
    pub fn single(&self, id: usize) -> Result<Self> {
        let mut t = self.get(id)?.clone();
        t.id = 0;
        Self::new(vec![t])
    }
}

impl TryFrom<Vec<TaskSpec>> for TaskSet {
    type Error = Error;
    fn try_from(v: Vec<TaskSpec>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TaskSet> for Vec<TaskSpec> {
    fn from(t: TaskSet) -> Self {
        t.tasks
    }
}

/// Per-task dense label.
#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// Integer class map, one entry per pixel.
    Classes(Vec<u16>),
    /// `O×H×W` real values.
    Dense(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub labelled: BTreeSet<usize>,
    pub unlabelled: BTreeSet<usize>,
}

impl LabelMask {
    pub fn new(labelled: impl IntoIterator<Item = usize>, k: usize) -> Result<Self> {
        let labelled: BTreeSet<usize> = labelled.into_iter().collect();
        if labelled.is_empty() {
            return Err(Error::InvalidInput("an image must be labelled for at least one task".into()));
        }
        if let Some(&bad) = labelled.iter().find(|&&t| t >= k) {
            return Err(Error::UnknownTask(bad));
        }
        let unlabelled = (0..k).filter(|t| !labelled.contains(t)).collect();
        Ok(Self { labelled, unlabelled })
    }

    pub fn full(k: usize) -> Self {
        Self::new(0..k, k).expect("k ≥ 1")
    }

    pub fn num_tasks(&self) -> usize {
        self.labelled.len() + self.unlabelled.len()
    }

    pub fn is_labelled(&self, t: usize) -> bool {
        self.labelled.contains(&t)
    }
}

/// One image with its labels. Stored in `f32` so that dataset files
/// round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// Indexed by task id; `None` for unlabelled tasks.
    pub labels: Vec<Option<Label>>,
    pub mask: LabelMask,
}

impl Sample {
    /// Drops the labels of every task outside `mask.labelled`.
    pub fn with_mask(mut self, mask: LabelMask) -> Self {
        for (t, l) in self.labels.iter_mut().enumerate() {
            if !mask.is_labelled(t) {
                *l = None;
            }
        }
        self.mask = mask;
        self
    }

    pub fn label(&self, t: usize) -> Option<&Label> {
        self.labels.get(t).and_then(|l| l.as_ref())
    }

    /// Checks the label/mask agreement and label shapes against `tasks`.
    pub fn validate(&self, tasks: &TaskSet) -> Result<()> {
        let hw = self.height * self.width;
        if self.image.len() != 3 * hw {
            return Err(Error::Shape("image must be 3×H×W".into()));
        }
        if self.labels.len() != tasks.len() || self.mask.num_tasks() != tasks.len() {
            return Err(Error::InvalidInput("label count differs from task count".into()));
        }
        for spec in tasks.iter() {
            match (self.mask.is_labelled(spec.id), self.label(spec.id)) {
                (true, None) => return Err(Error::InvalidInput(format!("missing label for task {}", spec.id))),
                (false, Some(_)) => return Err(Error::InvalidInput(format!("unexpected label for task {}", spec.id))),
                (true, Some(Label::Classes(c))) => {
                    if spec.loss_kind != LossKind::CrossEntropy || c.len() != hw {
                        return Err(Error::Shape(format!("bad class map for task {}", spec.id)));
                    }
                    if c.iter().any(|&v| v != IGNORE_LABEL && v as usize >= spec.out_channels) {
                        return Err(Error::InvalidInput(format!("class id out of range for task {}", spec.id)));
                    }
                }
                (true, Some(Label::Dense(d))) => {
                    if spec.loss_kind == LossKind::CrossEntropy || d.len() != spec.out_channels * hw {
                        return Err(Error::Shape(format!("bad dense label for task {}", spec.id)));
                    }
                }
                (false, None) => {}
            }
        }
        Ok(())
    }
}

/// Partial-annotation regime of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Full,
    One,
    Random,
    Imbalanced(Vec<f64>),
}

impl Protocol {
    /// Parses `full|one|random|imbalanced`; the latter requires `ratios`.
    pub fn parse(name: &str, ratios: Option<&[f64]>) -> Result<Self> {
        match name {
            "full" => Ok(Self::Full),
            "one" => Ok(Self::One),
            "random" => Ok(Self::Random),
            "imbalanced" => ratios
                .map(|r| Self::Imbalanced(r.to_vec()))
                .ok_or_else(|| Error::InvalidConfig("imbalanced protocol needs ratios".into())),
            other => Err(Error::InvalidConfig(format!("unknown protocol {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::One => "one",
            Self::Random => "random",
            Self::Imbalanced(_) => "imbalanced",
        }
    }

    pub fn masks(&self, num_images: usize, k: usize, seed: u64) -> Result<Vec<LabelMask>> {
        match self {
            Self::Full => Ok(vec![LabelMask::full(k); num_images]),
            Self::One => make_one_label_mask(num_images, k, seed),
            Self::Random => make_random_label_mask(num_images, k, seed),
            Self::Imbalanced(r) => {
                if r.len() != k {
                    return Err(Error::InvalidConfig(format!("{} ratios for {k} tasks", r.len())));
                }
                make_imbalanced_mask(num_images, r, seed)
            }
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Exactly one label per image, balanced across tasks: a seeded shuffle of
/// the images is dealt round-robin over a seeded ordering of the tasks.
pub fn make_one_label_mask(num_images: usize, k: usize, seed: u64) -> Result<Vec<LabelMask>> {
    if k == 0 {
        return Err(Error::InvalidConfig("need at least one task".into()));
    }
    if num_images < k {
        return Err(Error::InvalidConfig(format!("{num_images} images cannot cover {k} tasks")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..num_images).collect();
    order.shuffle(&mut rng);
    let mut task_order: Vec<usize> = (0..k).collect();
    task_order.shuffle(&mut rng);
    let mut masks = vec![None; num_images];
    for (i, &img) in order.iter().enumerate() {
        masks[img] = Some(LabelMask::new([task_order[i % k]], k)?);
    }
    Ok(masks.into_iter().map(|m| m.expect("every image dealt")).collect())
}

/// Between 1 and `K−1` labels per image: the count is uniform on `1..K`, the
/// tasks uniform without replacement.
pub fn make_random_label_mask(num_images: usize, k: usize, seed: u64) -> Result<Vec<LabelMask>> {
    if k < 2 {
        return Err(Error::InvalidConfig("random protocol needs at least two tasks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_images)
        .map(|_| {
            let n = rng.gen_range(1..k);
            let chosen = rand::seq::index::sample(&mut rng, k, n);
            LabelMask::new(chosen.iter(), k)
        })
        .collect()
}

/// Task `t` labelled on `⌊ratios[t]·N⌋` images.
///
/// Images are permuted once and each task takes a contiguous window of the
/// permutation, windows laid end to end around the ring, so coverage is
/// maximal. Images left without any label receive the task with the largest
/// ratio; if that would add more than 10% to the total quota the protocol is
/// rejected.
pub fn make_imbalanced_mask(num_images: usize, ratios: &[f64], seed: u64) -> Result<Vec<LabelMask>> {
    let k = ratios.len();
    if k == 0 || num_images == 0 {
        return Err(Error::InvalidConfig("need at least one task and one image".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::InvalidConfig(format!("ratio {r} outside (0, 1]")));
    }
    let quotas: Vec<usize> = ratios.iter().map(|r| (r * num_images as f64).floor() as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..num_images).collect();
    order.shuffle(&mut rng);
    let mut sets = vec![BTreeSet::new(); num_images];
    let mut offset = 0;
    for (t, &q) in quotas.iter().enumerate() {
        for j in 0..q {
            sets[order[(offset + j) % num_images]].insert(t);
        }
        offset = (offset + q) % num_images;
    }
    let dominant = (0..k).fold(0, |best, t| if ratios[t] > ratios[best] { t } else { best });
    let empty = sets.iter().filter(|s| s.is_empty()).count();
    let total: usize = quotas.iter().sum();
    if empty as f64 > 0.1 * total as f64 {
        return Err(Error::InvalidConfig(format!(
            "ratios leave {empty} unlabelled images, more than 10% of the {total} quota"
        )));
    }
    sets.into_iter()
        .map(|mut s| {
            if s.is_empty() {
                s.insert(dominant);
            }
            LabelMask::new(s, k)
        })
        .collect()
}

/// Number of images labelled for each task.
pub fn label_counts(masks: &[LabelMask], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for m in masks {
        for &t in &m.labelled {
            counts[t] += 1;
        }
    }
    counts
}

/// JSON manifest of a mask list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub seed: u64,
    pub protocol: String,
    pub masks: Vec<Vec<usize>>,
}

impl MaskManifest {
    pub fn new(seed: u64, protocol: &Protocol, masks: &[LabelMask]) -> Self {
        Self {
            seed,
            protocol: protocol.name().to_string(),
            masks: masks.iter().map(|m| m.labelled.iter().copied().collect()).collect(),
        }
    }

    pub fn to_masks(&self, k: usize) -> Result<Vec<LabelMask>> {
        self.masks.iter().map(|m| LabelMask::new(m.iter().copied(), k)).collect()
    }
}
