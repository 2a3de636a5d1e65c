//! One PASS/FAIL line per acceptance criterion, exiting non-zero if a
//! counted criterion fails. The two training experiments dominate the
//! runtime; set `MTPSL_ACCEPTANCE_QUICK=1` to skip them during development.

mod common;

use std::process::Command;
use std::time::Instant;

use common::{
    brute_force_miou, class_to_depth_r2, directional_config, finite_difference_normals, reduction_gap, scene,
    small_model, unlabelled_head_max_grad,
};
use mtpsl::harness::{gradcheck_suite, load_or_generate, run_stl_baselines, stl_metrics, train_on, GradcheckOptions};
use mtpsl::metrics::{delta_mtl, mean_angle_err, miou};
use mtpsl::params::Session;
use mtpsl::synth::{dataset_from_bytes, dataset_to_bytes, generate_dataset, SceneConfig};
use mtpsl::task::Protocol;
use mtpsl::tensor::Tensor;
use mtpsl::xtask::{cross_task_loss_value, make_condition, map_to_joint, Direction, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
    /// Counted towards the test result; report-only outcomes are printed.
    hard: bool,
}

fn hard(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail, hard: true }
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let results = gradcheck_suite(&GradcheckOptions::default()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.objective.as_str()).collect();
    hard(
        failing.is_empty() && secs < 120.0,
        format!("{} objectives, worst relative error {worst:.2e}, {secs:.1}s, failing {failing:?}", results.len()),
    )
}

fn masking_invariant() -> Outcome {
    let worst = (0..3).map(unlabelled_head_max_grad).fold(0.0, f64::max);
    hard(worst <= 1e-8, format!("largest unlabelled-head gradient {worst:.1e}"))
}

fn reduction_invariant() -> Outcome {
    let (gap, terms) = reduction_gap(Strategy::Ours);
    hard(gap <= 1e-12 && terms == 0, format!("|full - supervised| = {gap:.1e}, cross-task terms {terms}"))
}

fn conditioning_properties() -> Outcome {
    let mut m = small_model(Strategy::Ours, 3, 5);
    let mapping = m.mapping.clone().unwrap();
    let input = Tensor::from_vec(&[1, 16, 16], (0..256).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap();
    let embed = |m: &mtpsl::model::ModelState, pair, dir| {
        let mut s = Session::new(&m.store);
        let x = s.graph.constant(input.clone());
        let e = map_to_joint(&mapping, &mut s, x, pair, dir).unwrap();
        s.graph.value(e).clone()
    };
    let distinct = embed(&m, (1, 0), Direction::Source).max_abs_diff(&embed(&m, (1, 2), Direction::Source));
    mapping.reset_conditioner_to_identity(&mut m.store);
    let identity = embed(&m, (1, 0), Direction::Source).max_abs_diff(&embed(&m, (1, 2), Direction::Source));
    let mut invariants = true;
    for k in 2..=4 {
        for s in 0..k {
            invariants &= make_condition(s, s, Direction::Source, k).is_err();
            for t in (0..k).filter(|&t| t != s) {
                for d in [Direction::Source, Direction::Target] {
                    let mat = make_condition(s, t, d, k).unwrap().matrix();
                    invariants &= mat.iter().flatten().map(|&v| v as usize).sum::<usize>() == 1;
                    invariants &= (0..k).all(|i| mat[i][i] == 0);
                }
            }
        }
    }
    hard(
        identity == 0.0 && distinct > 0.0 && invariants,
        format!("identity diff {identity:.1e}, distinct-pair diff {distinct:.2e}, pair-matrix invariants {invariants}"),
    )
}

fn cosine_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..16);
        let a = Tensor::from_vec(&[n], (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let b = Tensor::from_vec(&[n], (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let d = cross_task_loss_value(&a, &b).unwrap();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let a = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let orth = Tensor::from_vec(&[3], vec![2.0, 1.0, 0.0]).unwrap();
    let exact = [
        (cross_task_loss_value(&a, &a.map(|v| 2.0 * v)).unwrap(), 0.0),
        (cross_task_loss_value(&a, &orth).unwrap(), 1.0),
        (cross_task_loss_value(&a, &a.map(|v| -v)).unwrap(), 2.0),
    ];
    let exact_ok = exact.iter().all(|(got, want)| (got - want).abs() < 1e-12);
    hard(
        (0.0..=2.0).contains(&lo) && (0.0..=2.0).contains(&hi) && exact_ok,
        format!("random range [{lo:.4}, {hi:.4}], exact cases {:?}", exact.map(|e| e.0)),
    )
}

fn delta_reproduction() -> Outcome {
    let two = delta_mtl(&[74.90, 0.0161], &[70.26, 0.0141], &[true, false]).unwrap();
    let three = delta_mtl(&[36.95, 0.5510, 29.51], &[37.45, 0.6079, 25.94], &[true, false, false]).unwrap();
    hard(
        (two + 3.8).abs() <= 0.1 && (three + 1.92).abs() <= 0.05,
        format!("two-task {two:.3} (reported -3.81), three-task {three:.3} (reported -1.92)"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (h, w, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(2..=4));
        let logits: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<u16> = (0..h * w).map(|_| rng.gen_range(0..c as u16)).collect();
        let got = miou(&Tensor::from_vec(&[c, h, w], logits.clone()).unwrap(), &labels, c, 255).ok();
        mismatches += usize::from(got != brute_force_miou(&logits, c, &labels, 255));
    }
    let up = [0.0, 0.0, 1.0];
    let angles = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]].map(|p| mean_angle_err(&p, &up).unwrap());
    let angles_ok = angles.iter().zip([0.0, 90.0, 180.0]).all(|(a, b)| (a - b).abs() < 1e-6);
    hard(mismatches == 0 && angles_ok, format!("mIoU mismatches {mismatches}/200, angles {angles:?}"))
}

fn synthetic_coupling() -> Outcome {
    let (mut checked, mut worst) = (0, 0.0f64);
    for seed in 0..10 {
        let (c, w) = finite_difference_normals(&scene(64, 64, seed));
        checked += c;
        worst = worst.max(w);
    }
    let samples: Vec<_> = (0..50).map(|s| scene(32, 32, 100 + s)).collect();
    let r2 = class_to_depth_r2(&samples, 5);
    hard(
        worst < 1e-3 && checked > 0 && r2 > 0.5,
        format!("normal error {worst:.1e} over {checked} interior pixels, class-to-depth R² {r2:.3}"),
    )
}

/// Mean ΔMTL and mean final metrics per strategy over seeds 0..3. The
/// single-task baselines are trained once per seed and shared.
fn directional_runs(strategies: &[Strategy]) -> (Vec<(f64, Vec<f64>)>, Vec<bool>, f64) {
    let started = Instant::now();
    let mut sums: Vec<(f64, Vec<f64>)> = strategies.iter().map(|_| (0.0, vec![0.0; 3])).collect();
    let mut hib = Vec::new();
    let seeds = 3;
    for seed in 0..seeds {
        let base = directional_config(Strategy::Sl, seed);
        let ds = load_or_generate(&base).unwrap();
        let stl = stl_metrics(&run_stl_baselines(&base, &ds).unwrap());
        for (i, &strategy) in strategies.iter().enumerate() {
            let mut out = train_on(&directional_config(strategy, seed), &ds, |_| {}).unwrap();
            out.report.attach_stl(stl.clone()).unwrap();
            let r = &out.report;
            println!(
                "  {strategy:<13} seed {seed}: metrics {:.4?} delta {:+.2}",
                r.final_metrics,
                r.delta_mtl.unwrap()
            );
            sums[i].0 += r.delta_mtl.unwrap() / seeds as f64;
            for (s, m) in sums[i].1.iter_mut().zip(&r.final_metrics) {
                *s += m / seeds as f64;
            }
            hib = r.higher_is_better.clone();
        }
    }
    (sums, hib, started.elapsed().as_secs_f64())
}

fn directional_and_ablation() -> (Outcome, Outcome) {
    let strategies = [Strategy::Ours, Strategy::Sl, Strategy::OursNoReg, Strategy::OursNoCond];
    let (means, hib, secs) = directional_runs(&strategies);
    let (ours, sl, no_reg, no_cond) = (&means[0], &means[1], &means[2], &means[3]);
    let better = ours.1.iter().zip(&sl.1).zip(&hib).filter(|((o, s), &h)| if h { o > s } else { o < s }).count();
    let directional = hard(
        ours.0 > sl.0 && better >= 2,
        format!(
            "mean delta ours {:+.2} vs sl {:+.2}, ours better on {better}/3 metrics ({:.4?} vs {:.4?}), {secs:.0}s for all four strategies",
            ours.0, sl.0, ours.1, sl.1
        ),
    );
    let margin_reg = ours.0 - no_reg.0;
    let margin_cond = ours.0 - no_cond.0;
    let ordered = margin_reg >= 0.0 && margin_cond >= 0.0;
    let within_noise = margin_reg >= -0.5 && margin_cond >= -0.5;
    let ablation = Outcome {
        pass: ordered,
        hard: !within_noise,
        detail: format!(
            "mean delta ours {:+.2}, w/o reg {:+.2}, w/o cond {:+.2}{}",
            ours.0,
            no_reg.0,
            no_cond.0,
            if !ordered && within_noise { " (within ±0.5 noise band, report only)" } else { "" }
        ),
    };
    (directional, ablation)
}

fn dataset_round_trip() -> Outcome {
    let scene = SceneConfig { height: 16, width: 16, ..SceneConfig::default() };
    let ds = generate_dataset(&scene, 3, 20, 5, &Protocol::One, 3).unwrap();
    let bytes = dataset_to_bytes(&ds).unwrap();
    let back = dataset_from_bytes(&bytes).unwrap();
    let exact = back.train == ds.train && back.test == ds.test && dataset_to_bytes(&back).unwrap() == bytes;
    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n / 2] ^= 0x01;
    let rejected = matches!(dataset_from_bytes(&bad), Err(mtpsl::Error::Checksum));
    hard(
        exact && rejected,
        format!("{} bytes, bit-exact {exact}, corrupted copy rejected by checksum {rejected}", bytes.len()),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_mtpsl"))
            .args(["train", "--height", "16", "--width", "16", "--n_train", "24", "--n_test", "8", "--epochs", "2"])
            .args([
                "--encoder_widths",
                "8,8",
                "--mapping_hidden",
                "8",
                "--mapping_input_width",
                "4",
                "--run_stl",
                "false",
            ])
            .args(["--output_dir", out.to_str().unwrap()])
            .env("MTPSL_SEED", "11")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(out.join("final.ckpt")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    hard(a == b, format!("two runs, {} checkpoint bytes, identical {}", a.len(), a == b))
}

fn main() {
    let quick = std::env::var("MTPSL_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient fidelity", gradient_fidelity()),
        (2, "masking invariant", masking_invariant()),
        (3, "reduction invariant", reduction_invariant()),
        (4, "conditioning properties", conditioning_properties()),
        (5, "cosine bounds", cosine_bounds()),
        (6, "delta reproduction", delta_reproduction()),
        (7, "metric oracles", metric_oracles()),
        (8, "synthetic coupling", synthetic_coupling()),
    ];
    if quick {
        for (id, name) in [(9, "directional experiment"), (10, "ablation ordering")] {
            results.push((id, name, Outcome { pass: false, hard: false, detail: "skipped (quick mode)".into() }));
        }
    } else {
        let (directional, ablation) = directional_and_ablation();
        results.push((9, "directional experiment", directional));
        results.push((10, "ablation ordering", ablation));
    }
    results.push((11, "dataset round-trip", dataset_round_trip()));
    results.push((12, "determinism", determinism()));

    for (id, name, o) in &results {
        println!("{} {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| o.hard && !o.pass).map(|(id, _, _)| *id).collect();
    if !failed.is_empty() {
        eprintln!("criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
