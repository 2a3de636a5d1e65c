//! End-to-end training of one configuration on generated data, with
//! single-task baselines and the relative multi-task gain.
//!
//! `cargo run --release --example train_small -- [strategy] [epochs]`

use mtpsl::harness::{run_stl_baselines, stl_metrics, train_on, write_outputs, ExperimentConfig};
use mtpsl::synth::generate_dataset;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let strategy = args.next().unwrap_or_else(|| "ours".into()).parse()?;
    let epochs = args.next().map(|e| e.parse()).transpose()?.unwrap_or(6);
    let config = ExperimentConfig {
        name: format!("small-{strategy}"),
        strategy,
        height: 32,
        width: 32,
        n_train: 120,
        n_test: 40,
        epochs,
        lr: 2e-3,
        encoder_widths: vec![8, 16],
        mapping_input_width: 8,
        mapping_hidden: vec![16],
        lambda_ct: 0.1,
        mapping_lr_mult: 0.1,
        output_dir: std::env::temp_dir().join("mtpsl-train-small"),
        ..ExperimentConfig::default()
    };
    let ds = generate_dataset(
        &config.scene(),
        config.num_tasks,
        config.n_train,
        config.n_test,
        &config.protocol()?,
        config.data_seed,
    )?;

    let mut outcome = train_on(&config, &ds, |e| {
        println!("epoch {:>2} loss {:.4} metrics {:.4?}", e.epoch + 1, e.mean_total, e.metrics);
    })?;
    let baselines = run_stl_baselines(&config, &ds)?;
    outcome.report.attach_stl(stl_metrics(&baselines))?;
    write_outputs(&config.output_dir, &outcome)?;

    let r = &outcome.report;
    println!("single-task metrics {:.4?}", r.stl_metrics.as_deref().unwrap_or_default());
    println!("delta vs single-task {:+.2}%", r.delta_mtl.unwrap_or(f64::NAN));
    println!("report, logs and checkpoints in {}", config.output_dir.display());
    Ok(())
}
