use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtpsl::harness::{self, ExperimentConfig, GradcheckOptions};
use mtpsl::synth::{generate_dataset, save_dataset};
use mtpsl::task::label_counts;
use mtpsl::xtask::Strategy;

#[derive(Parser)]
#[command(name = "mtpsl", about = "Multi-task partially-supervised dense prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train one configuration and write its report and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Tabulate every report below a directory.
    Compare {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients of every objective against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// One flag per configuration field, named as in the JSON file.
#[derive(Args, Default)]
#[command(rename_all = "snake_case")]
struct Overrides {
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    num_tasks: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    min_shapes: Option<usize>,
    #[arg(long)]
    max_shapes: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_halve_at: Option<f64>,
    #[arg(long)]
    lambda_ct: Option<f64>,
    #[arg(long)]
    lambda_ssl: Option<f64>,
    #[arg(long)]
    mapping_lr_mult: Option<f64>,
    #[arg(long)]
    uncertainty: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    encoder_widths: Option<Vec<usize>>,
    #[arg(long)]
    mapping_input_width: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    mapping_hidden: Option<Vec<usize>>,
    #[arg(long)]
    conditioner_init: Option<f64>,
    #[arg(long)]
    contrastive_margin: Option<f64>,
    #[arg(long)]
    disc_hidden: Option<usize>,
    #[arg(long)]
    crop_min_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_stl: Option<bool>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $o.$field { $cfg.$field = v; })*
    };
}

impl Overrides {
    fn apply(self, c: &mut ExperimentConfig) {
        let o = self;
        if o.ratios.is_some() {
            c.ratios = o.ratios.clone();
        }
        if o.data.is_some() {
            c.data = o.data.clone();
        }
        apply!(
            c,
            o,
            name,
            strategy,
            protocol,
            num_tasks,
            height,
            width,
            num_classes,
            min_shapes,
            max_shapes,
            noise_std,
            n_train,
            n_test,
            data_seed,
            epochs,
            batch_size,
            lr,
            lr_halve_at,
            lambda_ct,
            lambda_ssl,
            mapping_lr_mult,
            uncertainty,
            encoder_widths,
            mapping_input_width,
            mapping_hidden,
            conditioner_init,
            contrastive_margin,
            disc_hidden,
            crop_min_frac,
            seed,
            run_stl,
            output_dir,
        );
    }
}

/// Config file (or defaults), then `MTPSL_SEED`, then command-line flags.
fn resolve(path: Option<PathBuf>, overrides: Overrides) -> Result<ExperimentConfig> {
    let mut config = match &path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Ok(seed) = std::env::var("MTPSL_SEED") {
        config.seed = seed.trim().parse().with_context(|| format!("MTPSL_SEED={seed:?} is not an integer"))?;
    }
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, out, overrides } => {
            let c = resolve(config, overrides)?;
            let ds = generate_dataset(&c.scene(), c.num_tasks, c.n_train, c.n_test, &c.protocol()?, c.data_seed)?;
            save_dataset(&out, &ds).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} ({} train, {} test, protocol {}, labels per task {:?})",
                out.display(),
                ds.train.len(),
                ds.test.len(),
                ds.protocol,
                label_counts(&ds.train_masks(), ds.tasks.len())
            );
        }
        Command::Train { config, overrides } => {
            let c = resolve(config, overrides)?;
            println!("training {} (strategy {}, seed {}, config {})", c.name, c.strategy, c.seed, &c.hash()[..12]);
            let report = harness::train(&c, |e| {
                let m: Vec<String> = e.metrics.iter().map(|v| format!("{v:.4}")).collect();
                println!(
                    "epoch {:>3}  lr {:.2e}  loss {:.5}  metrics [{}]",
                    e.epoch + 1,
                    e.lr,
                    e.mean_total,
                    m.join(", ")
                );
            })?;
            for ((t, m), v) in report.task_names.iter().zip(&report.metric_names).zip(&report.final_metrics) {
                println!("{t} {m}: {v:.4}");
            }
            if let Some(d) = report.delta_mtl {
                println!("delta_mtl: {d:+.3}");
            }
            println!("best epoch by mean rank: {}", report.best_epoch + 1);
            println!("outputs in {}", c.output_dir.display());
        }
        Command::Compare { reports, out } => {
            let table = harness::compare(&reports, &out)?;
            print!("{}", table.to_text());
            println!("wrote {} and {}", out.display(), out.with_extension("svg").display());
        }
        Command::Gradcheck { seed } => {
            let opts = GradcheckOptions { seed, ..GradcheckOptions::default() };
            let results = harness::gradcheck_suite(&opts)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!("{status:<4} {:<26} probes {:>4}  max rel err {:.2e}", r.objective, r.checked, r.max_rel_err);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} objective(s) exceeded relative error {:.0e}", opts.tolerance);
            }
        }
    }
    Ok(())
}
