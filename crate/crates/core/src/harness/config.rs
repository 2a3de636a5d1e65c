use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::network::EncoderConfig;
use crate::synth::SceneConfig;
use crate::task::Protocol;
use crate::xtask::{MappingConfig, Strategy};

/// Everything that defines one training run. Flat so that each field maps
/// to one command-line flag of the same name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub strategy: Strategy,
    /// `full`, `one`, `random` or `imbalanced`.
    pub protocol: String,
    /// Per-task label ratios of the imbalanced protocol.
    pub ratios: Option<Vec<f64>>,
    /// Number of tasks, taken from segmentation, depth, normals in order.
    pub num_tasks: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the dataset; independent of the training seed so that runs
    /// with different seeds can share data.
    pub data_seed: u64,
    /// Load the dataset from this file instead of generating it.
    pub data: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the epochs after which the learning rate is halved.
    pub lr_halve_at: f64,
    pub lambda_ct: f64,
    pub lambda_ssl: f64,
    pub mapping_lr_mult: f64,
    pub uncertainty: bool,
    pub encoder_widths: Vec<usize>,
    pub mapping_input_width: usize,
    pub mapping_hidden: Vec<usize>,
    pub conditioner_init: f64,
    pub contrastive_margin: f64,
    pub disc_hidden: usize,
    pub crop_min_frac: f64,
    pub seed: u64,
    /// Also train the single-task baselines and report ΔMTL.
    pub run_stl: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            name: "run".into(),
            strategy: Strategy::Ours,
            protocol: "one".into(),
            ratios: None,
            num_tasks: 3,
            height: 64,
            width: 64,
            num_classes: 5,
            min_shapes: 2,
            max_shapes: 6,
            noise_std: 0.02,
            n_train: 300,
            n_test: 100,
            data_seed: 0,
            data: None,
            epochs: 40,
            batch_size: 8,
            lr: 1e-4,
            lr_halve_at: 0.5,
            lambda_ct: model.lambda_ct,
            lambda_ssl: model.lambda_ssl,
            mapping_lr_mult: 1.0,
            uncertainty: false,
            encoder_widths: model.encoder.widths,
            mapping_input_width: model.mapping.input_width,
            mapping_hidden: model.mapping.hidden_widths,
            conditioner_init: model.mapping.conditioner_init,
            contrastive_margin: model.contrastive_margin,
            disc_hidden: model.disc_hidden,
            crop_min_frac: model.crop_min_frac,
            seed: 0,
            run_stl: true,
            output_dir: PathBuf::from("runs/run"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn protocol(&self) -> Result<Protocol> {
        Protocol::parse(&self.protocol, self.ratios.as_deref())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            num_classes: self.num_classes,
            noise_std: self.noise_std,
            seed: self.data_seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            strategy: self.strategy,
            encoder: EncoderConfig::new(self.encoder_widths.clone()),
            mapping: MappingConfig {
                input_width: self.mapping_input_width,
                hidden_widths: self.mapping_hidden.clone(),
                conditioned: true,
                conditioner_init: self.conditioner_init,
            },
            lambda_ct: self.lambda_ct,
            lambda_ssl: self.lambda_ssl,
            uncertainty: self.uncertainty,
            contrastive_margin: self.contrastive_margin,
            disc_hidden: self.disc_hidden,
            crop_min_frac: self.crop_min_frac,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tasks", self.num_tasks),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("mapping_input_width", self.mapping_input_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        for (name, v) in [("lr", self.lr), ("mapping_lr_mult", self.mapping_lr_mult), ("lr_halve_at", self.lr_halve_at)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive and finite")));
            }
        }
        self.protocol()?;
        self.scene().validate()?;
        self.model().validate()?;
        let stride = 1usize << self.encoder_widths.len();
        if self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::InvalidConfig(format!("image size must be divisible by the encoder stride {stride}")));
        }
        Ok(())
    }

    /// Epoch from which the learning rate is halved.
    pub fn halve_epoch(&self) -> usize {
        (self.lr_halve_at * self.epochs as f64).floor() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.halve_epoch() {
            self.lr / 2.0
        } else {
            self.lr
        }
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `name` and
    /// `output_dir`.
    pub fn hash(&self) -> String {
        let canonical = Self { name: String::new(), output_dir: PathBuf::new(), ..self.clone() };
        let json = serde_json::to_vec(&canonical).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
