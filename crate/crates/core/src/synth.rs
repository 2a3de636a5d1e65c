//! Synthetic scenes whose segmentation, depth and surface normals are
//! analytically coupled.
//!
//! Each scene is a background plane plus a few rectangles and discs, each a
//! tilted plane `d(x, y) = base + a(x − cx) + b(y − cy)` in normalised
//! image coordinates. The class of a shape fixes the band its base depth is
//! drawn from, and its normal is `(−a, −b, 1)` normalised, so depth is
//! predictable from segmentation and normals are an exact function of depth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader};
use crate::error::{Error, Result};
use crate::task::{Label, LabelMask, MaskManifest, Protocol, Sample, TaskSet};

const MAGIC: &[u8; 8] = b"MTPSLDS\0";
pub const FORMAT_VERSION: u32 = 1;

const BACKGROUND_DEPTH: f64 = 0.95;
const BACKGROUND_SLOPE: f64 = 0.08;
const SHAPE_SLOPE: f64 = 0.5;
const NEAREST_BASE: f64 = 0.3;
const FARTHEST_BASE: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Including the background class 0.
    pub num_classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, min_shapes: 2, max_shapes: 6, num_classes: 5, noise_std: 0.02, seed: 0 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "scene size {}×{} must be positive multiples of 8",
                self.height, self.width
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::InvalidConfig("need 1 ≤ min_shapes ≤ max_shapes".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::InvalidConfig("num_classes must be in 2..=255".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("noise_std must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Outline {
    Rect { half_w: f64, half_h: f64 },
    Disc { radius: f64 },
}

/// One planar patch of the scene.
#[derive(Clone, Copy, Debug)]
struct Patch {
    class: u16,
    outline: Option<Outline>,
    cx: f64,
    cy: f64,
    base: f64,
    slope_x: f64,
    slope_y: f64,
}

impl Patch {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self.outline {
            None => true,
            Some(Outline::Rect { half_w, half_h }) => (x - self.cx).abs() <= half_w && (y - self.cy).abs() <= half_h,
            Some(Outline::Disc { radius }) => (x - self.cx).powi(2) + (y - self.cy).powi(2) <= radius * radius,
        }
    }

    fn depth(&self, x: f64, y: f64) -> f64 {
        self.base + self.slope_x * (x - self.cx) + self.slope_y * (y - self.cy)
    }

    fn normal(&self) -> [f64; 3] {
        let n = [-self.slope_x, -self.slope_y, 1.0];
        let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        n.map(|v| v / len)
    }
}

fn class_color(class: u16) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.55, 0.55, 0.60],
        [0.90, 0.25, 0.20],
        [0.20, 0.75, 0.30],
        [0.25, 0.35, 0.90],
        [0.95, 0.80, 0.20],
        [0.80, 0.30, 0.85],
        [0.20, 0.85, 0.85],
        [0.95, 0.55, 0.15],
    ];
    let c = PALETTE[class as usize % PALETTE.len()];
    let dim = 1.0 - 0.15 * (class as usize / PALETTE.len()) as f64;
    c.map(|v| v * dim)
}

/// Base depth of a shape of `class`: classes own disjoint, equally wide
/// bands between the nearest and farthest base.
fn base_depth(class: u16, num_classes: usize, rng: &mut impl Rng) -> f64 {
    let band = (FARTHEST_BASE - NEAREST_BASE) / (num_classes - 1) as f64;
    NEAREST_BASE + (class as f64 - 1.0) * band + rng.gen_range(0.0..band)
}

fn random_patches(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<Patch> {
    let mut patches = vec![Patch {
        class: 0,
        outline: None,
        cx: 0.5,
        cy: 0.5,
        base: BACKGROUND_DEPTH,
        slope_x: rng.gen_range(-BACKGROUND_SLOPE..=BACKGROUND_SLOPE),
        slope_y: rng.gen_range(-BACKGROUND_SLOPE..=BACKGROUND_SLOPE),
    }];
    let n = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    for _ in 0..n {
        let class = rng.gen_range(1..cfg.num_classes) as u16;
        let outline = if rng.gen_bool(0.5) {
            Outline::Rect { half_w: rng.gen_range(0.08..0.25), half_h: rng.gen_range(0.08..0.25) }
        } else {
            Outline::Disc { radius: rng.gen_range(0.08..0.25) }
        };
        let flat = rng.gen_bool(0.25);
        let mut slope = || if flat { 0.0 } else { rng.gen_range(-SHAPE_SLOPE..=SHAPE_SLOPE) };
        let (slope_x, slope_y) = (slope(), slope());
        patches.push(Patch {
            class,
            outline: Some(outline),
            cx: rng.gen_range(0.1..0.9),
            cy: rng.gen_range(0.1..0.9),
            base: base_depth(class, cfg.num_classes, rng),
            slope_x,
            slope_y,
        });
    }
    // Painter's order: farthest first, so nearer shapes occlude.
    patches[1..].sort_by(|a, b| b.base.total_cmp(&a.base));
    patches
}

/// Fully labelled scene: segmentation, depth and normals in that order.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patches = random_patches(cfg, &mut rng);
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let mut seg = vec![0u16; hw];
    let mut depth = vec![0f32; hw];
    let mut normals = vec![0f32; 3 * hw];
    let mut image = vec![0f32; 3 * hw];
    let light = {
        let l = [0.3, -0.4, 1.0f64];
        let n = l.iter().map(|v| v * v).sum::<f64>().sqrt();
        l.map(|v| v / n)
    };
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let top = patches.iter().rev().find(|p| p.contains(x, y)).expect("background covers all");
            let p = i * w + j;
            let d = top.depth(x, y);
            let n = top.normal();
            seg[p] = top.class;
            depth[p] = d as f32;
            for c in 0..3 {
                normals[c * hw + p] = n[c] as f32;
            }
            let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
            let shade = (0.55 + 0.45 * lambert) * (1.15 - 0.4 * d);
            let color = class_color(top.class);
            for c in 0..3 {
                let v = color[c] * shade + noise.sample(&mut rng);
                image[c * hw + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Sample {
        height: h,
        width: w,
        image,
        labels: vec![Some(Label::Classes(seg)), Some(Label::Dense(depth)), Some(Label::Dense(normals))],
        mask: LabelMask::full(3),
    })
}

/// SplitMix64 finaliser, used to derive independent per-sample seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64))
}

/// Seed of the training-mask draw for a dataset seed.
pub fn mask_seed(master: u64) -> u64 {
    splitmix64(master ^ 0x6D61_736B)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub tasks: TaskSet,
    pub protocol: Protocol,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn train_masks(&self) -> Vec<LabelMask> {
        self.train.iter().map(|s| s.mask.clone()).collect()
    }

    pub fn manifest(&self) -> MaskManifest {
        MaskManifest::new(mask_seed(self.seed), &self.protocol, &self.train_masks())
    }
}

fn truncate_tasks(mut s: Sample, k: usize) -> Sample {
    s.labels.truncate(k);
    s.mask = LabelMask::full(k);
    s
}

/// Training split masked by `protocol` and a fully labelled test split, for
/// the first `num_tasks` of segmentation, depth and normals.
pub fn generate_dataset(
    cfg: &SceneConfig,
    num_tasks: usize,
    n_train: usize,
    n_test: usize,
    protocol: &Protocol,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    let tasks = TaskSet::standard(num_tasks, cfg.num_classes)?;
    let masks = protocol.masks(n_train, num_tasks, mask_seed(seed))?;
    let scenes: Vec<Sample> = (0..n_train + n_test)
        .into_par_iter()
        .map(|i| {
            let c = SceneConfig { seed: sample_seed(seed, i), ..cfg.clone() };
            generate_scene(&c).map(|s| truncate_tasks(s, num_tasks))
        })
        .collect::<Result<_>>()?;
    let mut scenes = scenes.into_iter();
    let train = scenes.by_ref().take(n_train).zip(masks).map(|(s, m)| s.with_mask(m)).collect();
    let test = scenes.collect();
    Ok(Dataset { scene: cfg.clone(), tasks, protocol: protocol.clone(), seed, train, test })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    sample: usize,
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetHeader {
    scene: SceneConfig,
    tasks: TaskSet,
    protocol: Protocol,
    seed: u64,
    n_train: usize,
    n_test: usize,
    /// Labelled task ids of every sample, train then test.
    masks: Vec<Vec<usize>>,
    arrays: Vec<ArrayEntry>,
    payload_bytes: u64,
}

fn dtype_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "u16" => Ok(2),
        other => Err(Error::Format(format!("unknown dtype {other}"))),
    }
}

/// Encodes a dataset as bytes; see [`load_dataset_bytes`].
pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    let samples = ds.train.iter().chain(&ds.test);
    for (i, s) in samples.clone().enumerate() {
        let (h, w) = (s.height, s.width);
        arrays.push(ArrayEntry { sample: i, name: "image".into(), dtype: "f32".into(), shape: vec![3, h, w] });
        container::put_f32s(&mut payload, &s.image);
        for &t in &s.mask.labelled {
            let spec = ds.tasks.get(t)?;
            let name = format!("task{t}");
            match s.label(t).ok_or_else(|| Error::InvalidInput(format!("sample {i} lacks task {t}")))? {
                Label::Classes(c) => {
                    arrays.push(ArrayEntry { sample: i, name, dtype: "u16".into(), shape: vec![h, w] });
                    container::put_u16s(&mut payload, c);
                }
                Label::Dense(d) => {
                    arrays.push(ArrayEntry {
                        sample: i,
                        name,
                        dtype: "f32".into(),
                        shape: vec![spec.out_channels, h, w],
                    });
                    container::put_f32s(&mut payload, d);
                }
            }
        }
    }
    let header = DatasetHeader {
        scene: ds.scene.clone(),
        tasks: ds.tasks.clone(),
        protocol: ds.protocol.clone(),
        seed: ds.seed,
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        masks: samples.map(|s| s.mask.labelled.iter().copied().collect()).collect(),
        arrays,
        payload_bytes: payload.len() as u64,
    };
    container::encode(MAGIC, FORMAT_VERSION, &header, &payload)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let (header, payload): (DatasetHeader, _) = container::decode(MAGIC, FORMAT_VERSION, bytes)?;
    if header.payload_bytes != payload.len() as u64 {
        return Err(Error::Format("payload length differs from header".into()));
    }
    let declared: usize = header
        .arrays
        .iter()
        .map(|a| Ok(a.shape.iter().product::<usize>() * dtype_size(&a.dtype)?))
        .sum::<Result<_>>()?;
    if declared != payload.len() {
        return Err(Error::Format("array shapes disagree with payload length".into()));
    }
    let k = header.tasks.len();
    let total = header.n_train + header.n_test;
    if header.masks.len() != total {
        return Err(Error::Format("mask count differs from sample count".into()));
    }
    let mut reader = Reader::new(payload);
    let mut arrays = header.arrays.iter().peekable();
    let mut samples = Vec::with_capacity(total);
    for (i, labelled) in header.masks.iter().enumerate() {
        let img = arrays.next().filter(|a| a.sample == i && a.name == "image");
        let img = img.ok_or_else(|| Error::Format(format!("sample {i} has no image entry")))?;
        let (h, w) = match img.shape[..] {
            [3, h, w] => (h, w),
            _ => return Err(Error::Format("image shape must be 3×H×W".into())),
        };
        let image = reader.f32s(3 * h * w)?;
        let mut labels = vec![None; k];
        while let Some(a) = arrays.next_if(|a| a.sample == i) {
            let t: usize = a
                .name
                .strip_prefix("task")
                .and_then(|n| n.parse().ok())
                .filter(|&t| t < k)
                .ok_or_else(|| Error::Format(format!("bad array name {}", a.name)))?;
            let n = a.shape.iter().product();
            labels[t] = Some(match a.dtype.as_str() {
                "u16" => Label::Classes(reader.u16s(n)?),
                _ => Label::Dense(reader.f32s(n)?),
            });
        }
        let sample = Sample { height: h, width: w, image, labels, mask: LabelMask::new(labelled.iter().copied(), k)? };
        sample.validate(&header.tasks)?;
        samples.push(sample);
    }
    reader.finish()?;
    let test = samples.split_off(header.n_train);
    Ok(Dataset {
        scene: header.scene,
        tasks: header.tasks,
        protocol: header.protocol,
        seed: header.seed,
        train: samples,
        test,
    })
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}
