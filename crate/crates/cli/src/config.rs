//! Experiment configuration file.
//!
//! Every section and key is optional; omitted values fall back to the
//! Fashion-MNIST ankle-boot/sneaker setup. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use alterfactual::boundary::SvmConfig;
use alterfactual::classifier::ClassifierConfig;
use alterfactual::data::{DatasetId, DatasetSource, Split};
use alterfactual::explainer::{ExplainerConfig, LossWeights};
use alterfactual::ExplanationMode;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub classifier: ClassifierSection,
    pub svm: SvmSection,
    pub gan: GanSection,
    pub eval: EvalSection,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dataset: DatasetId,
    pub class_a: String,
    pub class_b: String,
    pub cache_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmSection {
    #[serde(rename = "C")]
    pub c: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSection {
    pub mode: ExplanationMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lambdas: LossWeights,
    pub use_boundary_loss: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            classifier: ClassifierSection::default(),
            svm: SvmSection::default(),
            gan: GanSection::default(),
            eval: EvalSection::default(),
            run_dir: PathBuf::from("runs/fashion_mnist"),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetId::FashionMnist,
            class_a: "ankle_boot".into(),
            class_b: "sneaker".into(),
            cache_dir: PathBuf::from("data"),
        }
    }
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        Self { epochs: c.epochs, batch_size: c.batch_size, lr: c.learning_rate }
    }
}

impl Default for SvmSection {
    fn default() -> Self {
        let s = SvmConfig::default();
        Self { c: s.c, max_iterations: s.max_iterations }
    }
}

impl Default for GanSection {
    fn default() -> Self {
        let e = ExplainerConfig::default();
        Self {
            mode: e.mode,
            epochs: e.epochs,
            batch_size: e.batch_size,
            lr_g: e.lr_generator,
            lr_d: e.lr_discriminator,
            lambdas: e.lambdas,
            use_boundary_loss: e.use_boundary_loss,
            seed: e.seed,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: Split::Test }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: invalid `{key}`: {message}")]
    Invalid { path: PathBuf, key: &'static str, message: String },
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text, path)
    }

    /// Parses TOML text; `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().trim_end().to_string();
            ConfigError::Parse {
                path: origin.into(),
                message: if key == "." { message } else { format!("at `{key}`: {message}") },
            }
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    fn validate(&self, origin: &Path) -> Result<(), ConfigError> {
        let bad = |key, message: String| Err(ConfigError::Invalid { path: origin.into(), key, message });
        if self.data.class_a == self.data.class_b {
            return bad("data.class_b", format!("must differ from data.class_a (`{}`)", self.data.class_a));
        }
        if let Err(e) = self.classifier_config(0).validate() {
            return bad("classifier", e.to_string());
        }
        if let Err(e) = self.svm_config(0).validate() {
            return bad("svm", e.to_string());
        }
        if let Err(e) = self.explainer_config().validate() {
            return bad("gan", e.to_string());
        }
        Ok(())
    }

    pub fn source(&self) -> DatasetSource {
        DatasetSource::new(self.data.dataset, &self.data.cache_dir).with_fetch(true)
    }

    pub fn classifier_config(&self, seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            epochs: self.classifier.epochs,
            batch_size: self.classifier.batch_size,
            learning_rate: self.classifier.lr,
            seed,
            ..Default::default()
        }
    }

    pub fn svm_config(&self, seed: u64) -> SvmConfig {
        SvmConfig { c: self.svm.c, max_iterations: self.svm.max_iterations, seed, ..Default::default() }
    }

    /// Explainer settings with the boundary weight left as configured;
    /// mode gating is applied by the caller so it can warn about it.
    pub fn explainer_config(&self) -> ExplainerConfig {
        let g = &self.gan;
        ExplainerConfig {
            mode: g.mode,
            batch_size: g.batch_size,
            epochs: g.epochs,
            lr_generator: g.lr_g,
            lr_discriminator: g.lr_d,
            lambdas: g.lambdas,
            use_boundary_loss: g.use_boundary_loss,
            seed: g.seed,
            ..Default::default()
        }
    }
}
