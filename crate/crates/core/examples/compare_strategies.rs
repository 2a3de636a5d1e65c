//! Trains two strategies briefly and tabulates them the way the CLI's
//! `compare` does, including the loss-curve plot.

use mtpsl::harness::{compare, train, ExperimentConfig};
use mtpsl::xtask::Strategy;

fn main() -> anyhow::Result<()> {
    let root = tempfile_dir()?;
    for strategy in [Strategy::Sl, Strategy::Ours] {
        let config = ExperimentConfig {
            name: strategy.to_string(),
            strategy,
            height: 16,
            width: 16,
            n_train: 40,
            n_test: 12,
            epochs: 3,
            lr: 2e-3,
            encoder_widths: vec![8, 16],
            mapping_input_width: 8,
            mapping_hidden: vec![16],
            output_dir: root.join(strategy.as_str()),
            ..ExperimentConfig::default()
        };
        train(&config, |_| {})?;
    }
    let out = root.join("table.csv");
    let table = compare(&root, &out)?;
    print!("{}", table.to_text());
    println!("csv {} and plot {}", out.display(), out.with_extension("svg").display());
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join("mtpsl-compare-example");
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
