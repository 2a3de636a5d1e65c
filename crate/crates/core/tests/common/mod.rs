#![allow(dead_code)]

use mtpsl::harness::ExperimentConfig;
use mtpsl::losses::supervised_objective;
use mtpsl::model::{ModelConfig, ModelState};
use mtpsl::network::EncoderConfig;
use mtpsl::params::{ParamGroup, Session};
use mtpsl::synth::{generate_scene, SceneConfig};
use mtpsl::task::{Label, LabelMask, Sample, TaskSet};
use mtpsl::xtask::{MappingConfig, Strategy};

/// Direct per-class IoU loop: argmax by scanning, counts by scanning again
/// for each class, classes with an empty union skipped.
pub fn brute_force_miou(logits: &[f64], c: usize, labels: &[u16], ignore: u16) -> Option<f64> {
    let p = labels.len();
    let pred: Vec<usize> = (0..p)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if logits[k * p + i] > logits[best * p + i] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let mut ious = Vec::new();
    for k in 0..c {
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..p {
            if labels[i] == ignore {
                continue;
            }
            let (is_l, is_p) = (labels[i] as usize == k, pred[i] == k);
            inter += u64::from(is_l && is_p);
            union += u64::from(is_l || is_p);
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Compares stored normals with normals from central differences of the
/// stored depth, on pixels whose 3×3 depth neighbourhood is one plane.
/// Returns (pixels checked, largest component error).
pub fn finite_difference_normals(sample: &Sample) -> (usize, f64) {
    let (h, w) = (sample.height, sample.width);
    let (Some(Label::Dense(d)), Some(Label::Dense(n))) = (&sample.labels[1], &sample.labels[2]) else {
        panic!("scene must carry depth and normals");
    };
    let at = |i: usize, j: usize| d[i * w + j] as f64;
    let (dx, dy) = (1.0 / w as f64, 1.0 / h as f64);
    let (mut checked, mut worst) = (0, 0.0f64);
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let planar = (-1..=1).all(|di: isize| {
                let r = (i as isize + di) as usize;
                let (a, b, c) = (at(r, j - 1), at(r, j), at(r, j + 1));
                ((c - b) - (b - a)).abs() < 1e-5
            }) && (-1..=1).all(|dj: isize| {
                let col = (j as isize + dj) as usize;
                let (a, b, c) = (at(i - 1, col), at(i, col), at(i + 1, col));
                ((c - b) - (b - a)).abs() < 1e-5
            });
            if !planar {
                continue;
            }
            let gx = (at(i, j + 1) - at(i, j - 1)) / (2.0 * dx);
            let gy = (at(i + 1, j) - at(i - 1, j)) / (2.0 * dy);
            let len = (gx * gx + gy * gy + 1.0).sqrt();
            let fd = [-gx / len, -gy / len, 1.0 / len];
            let p = i * w + j;
            for c in 0..3 {
                worst = worst.max((fd[c] - n[c * h * w + p] as f64).abs());
            }
            checked += 1;
        }
    }
    (checked, worst)
}

/// R² of the least-squares fit of depth on one-hot class indicators, which
/// is the per-class mean.
pub fn class_to_depth_r2(samples: &[Sample], num_classes: usize) -> f64 {
    let mut pairs = Vec::new();
    for s in samples {
        let (Some(Label::Classes(c)), Some(Label::Dense(d))) = (&s.labels[0], &s.labels[1]) else { panic!() };
        pairs.extend(c.iter().zip(d).map(|(&c, &d)| (c as usize, d as f64)));
    }
    let mut sum = vec![0.0; num_classes];
    let mut cnt = vec![0.0; num_classes];
    for &(c, d) in &pairs {
        sum[c] += d;
        cnt[c] += 1.0;
    }
    let mean_all = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    let ss_tot: f64 = pairs.iter().map(|p| (p.1 - mean_all).powi(2)).sum();
    let ss_res: f64 = pairs.iter().map(|&(c, d)| (d - sum[c] / cnt[c]).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

pub fn scene(h: usize, w: usize, seed: u64) -> Sample {
    generate_scene(&SceneConfig { height: h, width: w, seed, ..SceneConfig::default() }).unwrap()
}

pub fn small_model(strategy: Strategy, k: usize, seed: u64) -> ModelState {
    let config = ModelConfig {
        strategy,
        encoder: EncoderConfig::new(vec![8, 8]),
        mapping: MappingConfig { input_width: 4, hidden_widths: vec![8], ..MappingConfig::default() },
        ..ModelConfig::default()
    };
    ModelState::new(&TaskSet::standard(k, 5).unwrap(), &config, seed).unwrap()
}

pub fn masked(sample: Sample, labelled: &[usize], k: usize) -> Sample {
    sample.with_mask(LabelMask::new(labelled.iter().copied(), k).unwrap())
}

/// Largest absolute gradient entry over the head of `task` under the `sl`
/// objective on a batch where nobody is labelled for `task`.
pub fn unlabelled_head_max_grad(task: usize) -> f64 {
    let m = small_model(Strategy::Sl, 3, 1);
    let others: Vec<usize> = (0..3).filter(|&t| t != task).collect();
    let batch: Vec<Sample> =
        (0..4).map(|i| masked(scene(16, 16, i), &others[i as usize % 2..=i as usize % 2], 3)).collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut s = Session::new(&m.store);
    let obj = m.objective(&mut s, &refs, &[]).unwrap();
    let grads = s.backward(obj.total);
    m.store
        .group_ids(ParamGroup::Head(task))
        .into_iter()
        .map(|id| grads.get(id).map_or(0.0, |g| g.data().iter().fold(0.0f64, |a, v| a.max(v.abs()))))
        .fold(0.0, f64::max)
}

/// (|full − supervised|, cross-task term count) on a fully labelled batch.
pub fn reduction_gap(strategy: Strategy) -> (f64, usize) {
    let m = small_model(strategy, 3, 2);
    let batch: Vec<Sample> = (0..3).map(|i| scene(16, 16, 10 + i)).collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut s = Session::new(&m.store);
    let full = m.objective(&mut s, &refs, &[]).unwrap();
    let sup = supervised_objective(&m.net, &mut s, &refs).unwrap();
    let (a, b) = (s.graph.scalar(full.total), s.graph.scalar(sup.total));
    ((a - b).abs(), full.report.ct_terms + full.report.reg_terms)
}

/// Desk-scale setting for the directional experiments.
pub fn directional_config(strategy: Strategy, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: strategy.to_string(),
        strategy,
        protocol: "one".into(),
        num_tasks: 3,
        height: 32,
        width: 32,
        n_train: 300,
        n_test: 100,
        epochs: 20,
        lr: 2e-3,
        encoder_widths: vec![8, 16],
        mapping_input_width: 8,
        mapping_hidden: vec![16],
        // Chosen on a held-out data seed and training seeds, not on the
        // seeds the acceptance run uses.
        lambda_ct: 0.1,
        mapping_lr_mult: 0.1,
        seed,
        run_stl: true,
        ..ExperimentConfig::default()
    }
}
