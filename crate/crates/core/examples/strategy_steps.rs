//! A few optimisation steps of every cross-task strategy on the same small
//! batch, with the terms each one adds.

use mtpsl::model::{ModelConfig, ModelState, StepRates};
use mtpsl::network::EncoderConfig;
use mtpsl::params::Adam;
use mtpsl::synth::{generate_dataset, SceneConfig};
use mtpsl::task::Protocol;
use mtpsl::xtask::{MappingConfig, Strategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mtpsl::Result<()> {
    let scene = SceneConfig { height: 16, width: 16, ..SceneConfig::default() };
    let ds = generate_dataset(&scene, 3, 6, 1, &Protocol::One, 5)?;
    let batch: Vec<_> = ds.train.iter().collect();
    let rates = StepRates { lr: 1e-3, mapping_mult: 1.0 };

    for strategy in [
        Strategy::Sl,
        Strategy::Ssl,
        Strategy::Ours,
        Strategy::OursNoCond,
        Strategy::OursNoReg,
        Strategy::DirectMap,
        Strategy::PerceptualMap,
        Strategy::Contrastive,
        Strategy::Discriminator,
    ] {
        let config = ModelConfig {
            strategy,
            encoder: EncoderConfig::new(vec![8, 16]),
            mapping: MappingConfig { input_width: 8, hidden_widths: vec![16], ..MappingConfig::default() },
            ..ModelConfig::default()
        };
        let mut model = ModelState::new(&ds.tasks, &config, 0)?;
        let mut opt = Adam::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut first = None;
        let mut last = None;
        for step in 0..5 {
            let crops = model.sample_crops(&batch, &mut rng)?;
            let r = model.train_step(&mut opt, &batch, &crops, rates, step)?;
            first.get_or_insert(r.total);
            last = Some(r);
        }
        let r = last.expect("five steps ran");
        println!(
            "{:<15} params {:>6}  total {:.4} -> {:.4}  sup {:.4} ssl {:.4} ct {:.4} reg {:.4} aux {:.4} disc {:.4}  terms {}",
            strategy.as_str(),
            model.store.count(|_| true),
            first.unwrap_or(0.0),
            r.total,
            r.supervised,
            r.ssl,
            r.cross_task,
            r.regularizer,
            r.auxiliary,
            r.discriminator,
            r.ct_terms
        );
    }
    Ok(())
}
