use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{
    boundary_loss, classification_loss, discriminator_fake_loss, discriminator_real_loss, generator_adversarial_loss,
    similarity_loss, GeneratorLossTerms, LossComponents,
};
use super::{DiscriminatorArch, ExplainerConfig, ExplainerModel, GeneratorArch};
use crate::boundary::HyperplaneSurrogate;
use crate::classifier::TrainedClassifier;
use crate::data::{resample, LabeledImageSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{DropoutNoise, NormMode};
use crate::render::{grid, save_png};

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub discriminator_loss: f64,
    pub generator_loss: f64,
    pub components: LossComponents,
}

/// Called after every completed epoch with the current model and the
/// monitor pairs `(x, G(x, z))` generated with a fixed seed.
pub trait TrainingObserver {
    fn on_epoch_end(&mut self, model: &ExplainerModel, summary: &EpochSummary, monitor: &[(Image, Image)]) -> Result<()>;
}

pub struct NoopObserver;

impl TrainingObserver for NoopObserver {
    fn on_epoch_end(&mut self, _: &ExplainerModel, _: &EpochSummary, _: &[(Image, Image)]) -> Result<()> {
        Ok(())
    }
}

/// Writes `explainer_<mode>.ckpt` and `samples/epoch_<n>.png` under a run
/// directory after each epoch.
pub struct RunDirObserver {
    run_dir: PathBuf,
}

impl RunDirObserver {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        Self { run_dir: run_dir.into() }
    }

    pub fn checkpoint_path(run_dir: &Path, mode: crate::mode::ExplanationMode) -> PathBuf {
        run_dir.join(format!("explainer_{mode}.ckpt"))
    }

    pub fn sample_path(run_dir: &Path, epoch: usize) -> PathBuf {
        run_dir.join("samples").join(format!("epoch_{epoch}.png"))
    }
}

impl TrainingObserver for RunDirObserver {
    fn on_epoch_end(&mut self, model: &ExplainerModel, summary: &EpochSummary, monitor: &[(Image, Image)]) -> Result<()> {
        model.save(&Self::checkpoint_path(&self.run_dir, model.mode()))?;
        if !monitor.is_empty() {
            let (top, bottom): (Vec<_>, Vec<_>) = monitor.iter().cloned().unzip();
            save_png(&grid(&[top, bottom], 2)?, &Self::sample_path(&self.run_dir, summary.epoch))?;
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite(component: &'static str, t: &Tensor) -> Result<f64> {
    let value = scalar(t)?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { component, value })
    }
}

/// Adversarial training of a fresh explainer against a frozen classifier.
///
/// Every step updates the discriminator on a real pair `(x, C(x))`, then on
/// a generated pair `(G(x, z), C̃(x))`, then takes one generator step on the
/// weighted loss. A non-finite loss aborts with [`Error::TrainingFailure`];
/// artifacts written by `observer` for earlier epochs are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_explainer(
    clf: &TrainedClassifier,
    surrogate: Option<&HyperplaneSurrogate>,
    train: &LabeledImageSet,
    cfg: &ExplainerConfig,
    gen_arch: &GeneratorArch,
    disc_arch: &DiscriminatorArch,
    device: &Device,
    observer: &mut dyn TrainingObserver,
) -> Result<(ExplainerModel, Vec<EpochSummary>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let res = gen_arch.resolution();
    if clf.input_resolution() != res || clf.arch().in_channels != gen_arch.channels {
        return Err(Error::validation(format!(
            "classifier input {}x{r}x{r} does not match generator resolution {res}",
            clf.arch().in_channels,
            r = clf.input_resolution()
        )));
    }
    let surrogate = if cfg.boundary_active() {
        let s = surrogate.ok_or_else(|| {
            Error::validation("alterfactual training with the boundary loss requires a fitted surrogate")
        })?;
        if s.dim() != clf.feature_dim() {
            return Err(Error::validation(format!(
                "surrogate dimension {} does not match classifier features {}",
                s.dim(),
                clf.feature_dim()
            )));
        }
        Some(s)
    } else {
        None
    };
    let weights = cfg.effective_weights();

    let filter = clf.preprocess_spec().resize_filter;
    let images = train.images().iter().map(|i| resample(i, res, filter)).collect::<Result<Vec<_>>>()?;
    let decisions: Vec<u8> = clf.describe_signed(&images, 32)?.iter().map(|(p, _)| p.decision()).collect();
    let targets: Vec<u8> = decisions.iter().map(|&d| cfg.mode.target_class(d)).collect();
    let monitor: Vec<Image> = images.iter().take(cfg.monitor_samples).cloned().collect();

    let mut model = ExplainerModel::new(gen_arch, disc_arch, cfg.clone(), DType::F32, device)?;
    let adam = |lr| ParamsAdamW { lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: 0.0 };
    let mut opt_g = AdamW::new(model.generator_vars(), adam(cfg.lr_generator))?;
    let mut opt_d = AdamW::new(model.discriminator_vars(), adam(cfg.lr_discriminator))?;

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut noise = DropoutNoise::new(dropout_rng, gen_arch.dropout_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(2);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut summaries = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let fail = |e: Error| match e {
            Error::NonFiniteLoss { component, value } => Error::TrainingFailure {
                epoch,
                reason: format!("non-finite {component} loss ({value})"),
            },
            other => other,
        };
        let mut d_total = 0.0;
        let mut g_total = 0.0;
        let mut c_total = [0.0; 4];
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut step = || -> Result<(f64, f64, LossComponents)> {
                let xs: Vec<Image> = batch.iter().map(|&i| images[i].clone()).collect();
                let x = Image::stack(&xs, DType::F32, device)?;
                let real: Vec<u8> = batch.iter().map(|&i| decisions[i]).collect();
                let fake: Vec<u8> = batch.iter().map(|&i| targets[i]).collect();
                let x_hat = model.generator().forward(&x, &mut noise, NormMode::BatchUpdate)?;

                let d = model.discriminator();
                let loss_real = discriminator_real_loss(&d.forward(&x, &real, NormMode::BatchUpdate)?)?;
                let real_value = finite("discriminator_real", &loss_real)?;
                opt_d.backward_step(&loss_real)?;
                let loss_fake = discriminator_fake_loss(&d.forward(&x_hat.detach(), &fake, NormMode::BatchUpdate)?)?;
                let fake_value = finite("discriminator_fake", &loss_fake)?;
                opt_d.backward_step(&loss_fake)?;

                let terms = GeneratorLossTerms {
                    adversarial: generator_adversarial_loss(&d.forward(&x_hat, &fake, NormMode::Batch)?)?,
                    classification: classification_loss(clf, &x_hat, &fake)?,
                    similarity: similarity_loss(&x, &x_hat, cfg.mode, &cfg.ssim)?,
                    boundary: surrogate.map(|s| boundary_loss(clf, s, &x, &x_hat)).transpose()?,
                };
                let (total, components) = terms.combine(&weights, cfg.mode)?;
                let g_value = scalar(&total)?;
                opt_g.backward_step(&total)?;
                Ok((real_value + fake_value, g_value, components))
            };
            let (d, g, c) = step().map_err(fail)?;
            let n = batch.len() as f64;
            d_total += d * n;
            g_total += g * n;
            for (acc, v) in c_total.iter_mut().zip([c.adversarial, c.classification, c.similarity, c.boundary]) {
                *acc += v * n;
            }
            steps += 1;
        }
        let n = images.len() as f64;
        let summary = EpochSummary {
            epoch,
            steps,
            discriminator_loss: d_total / n,
            generator_loss: g_total / n,
            components: LossComponents {
                adversarial: c_total[0] / n,
                classification: c_total[1] / n,
                similarity: c_total[2] / n,
                boundary: c_total[3] / n,
            },
        };
        log::info!(
            "explainer epoch {epoch}/{}: D {:.4} G {:.4} (adv {:.4} cls {:.4} sim {:.4} svm {:.4})",
            cfg.epochs,
            summary.discriminator_loss,
            summary.generator_loss,
            summary.components.adversarial,
            summary.components.classification,
            summary.components.similarity,
            summary.components.boundary
        );
        model.record_progress(epoch, noise.rng());
        let pairs = monitor
            .iter()
            .map(|x| Ok((x.clone(), model.generate_image(x, cfg.seed)?)))
            .collect::<Result<Vec<_>>>()?;
        observer.on_epoch_end(&model, &summary, &pairs)?;
        summaries.push(summary);
    }
    Ok((model, summaries))
}
