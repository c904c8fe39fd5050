//! Conditional GAN that learns to produce alterfactual or counterfactual
//! explanations for a frozen binary classifier.

mod discriminator;
mod generate;
mod generator;
pub mod losses;
mod model;
mod train;

use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, DiscriminatorArch};
pub use generate::{explain_set, Explainer, ExplanationRecord};
pub use generator::{Generator, GeneratorArch};
pub use losses::{LossComponents, LossWeights};
pub use model::ExplainerModel;
pub use train::{train_explainer, EpochSummary, NoopObserver, RunDirObserver, TrainingObserver};

use crate::error::{Error, Result};
use crate::metrics::SsimSpec;
use crate::mode::ExplanationMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    pub mode: ExplanationMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambdas: LossWeights,
    /// Adds the surrogate boundary term. Ignored in counterfactual mode.
    pub use_boundary_loss: bool,
    pub seed: u64,
    /// Training images shown in the per-epoch monitor grid.
    pub monitor_samples: usize,
    pub ssim: SsimSpec,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            mode: ExplanationMode::Alterfactual,
            batch_size: 1,
            epochs: 14,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            lambdas: LossWeights::default(),
            use_boundary_loss: true,
            seed: 0,
            monitor_samples: 8,
            ssim: SsimSpec::default(),
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("explainer batch_size and epochs must be positive"));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::validation(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::validation("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        self.lambdas.validate()?;
        self.ssim.validate()
    }

    /// True when the boundary term contributes to the generator objective.
    pub fn boundary_active(&self) -> bool {
        self.mode == ExplanationMode::Alterfactual && self.use_boundary_loss && self.lambdas.boundary > 0.0
    }

    /// Loss weights applied during training.
    pub fn effective_weights(&self) -> LossWeights {
        let w = self.lambdas.for_mode(self.mode);
        if self.boundary_active() {
            w
        } else {
            LossWeights { boundary: 0.0, ..w }
        }
    }
}
