use std::path::{Path, PathBuf};

use alterfactual::boundary::{fit_surrogate, HyperplaneSurrogate};
use alterfactual::classifier::{train_classifier, ClassifierArch, TrainedClassifier};
use alterfactual::data::{load_binary_subset, resample, LabeledImageSet, PreprocessSpec, Split};
use alterfactual::explainer::{
    explain_set, train_explainer, DiscriminatorArch, EpochSummary, Explainer, ExplainerModel, GeneratorArch,
    RunDirObserver, TrainingObserver,
};
use alterfactual::render::{grid, interpolation_frames, save_png};
use alterfactual::{Error, ExplanationMode, Image};
use candle_core::{DType, Device};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};

/// Failure of a command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Training(String),
    #[error("missing {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Training(_) => 3,
            CliError::MissingArtifact { .. } => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(_) => CliError::Config(e.to_string()),
            Error::TrainingFailure { .. } | Error::NonFiniteLoss { .. } | Error::DegenerateFit(_) => {
                CliError::Training(e.to_string())
            }
            Error::DatasetUnavailable { path, reason } => CliError::MissingArtifact { path, hint: reason },
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Config plus command-line overrides, resolved once per invocation.
pub struct Context {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub device: Device,
}

impl Context {
    pub fn new(config_path: &Path, seed: Option<u64>, run_dir: Option<PathBuf>) -> CliResult<Self> {
        let mut config = ExperimentConfig::load(config_path)?;
        if let Some(s) = seed {
            config.gan.seed = s;
        }
        let run_dir = run_dir.unwrap_or_else(|| config.run_dir.clone());
        Ok(Self { seed: config.gan.seed, config, run_dir, device: Device::Cpu })
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.run_dir.join("classifier.ckpt")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run_dir.join("classifier_metrics.json")
    }

    pub fn surrogate_path(&self) -> PathBuf {
        self.run_dir.join("surrogate.bin")
    }

    pub fn explainer_path(&self) -> PathBuf {
        RunDirObserver::checkpoint_path(&self.run_dir, self.config.gan.mode)
    }

    pub fn epoch_log_path(&self) -> PathBuf {
        self.run_dir.join(format!("explainer_{}_epochs.json", self.config.gan.mode))
    }

    /// Reports of the two modes live side by side under the same run.
    pub fn report_dir(&self) -> PathBuf {
        self.run_dir.join(self.config.gan.mode.as_str())
    }

    fn load_split(&self, split: Split) -> CliResult<LabeledImageSet> {
        let d = &self.config.data;
        let set = load_binary_subset(&self.config.source(), &d.class_a, &d.class_b, split)?;
        let (a, b) = set.label_counts();
        log::info!("{} {} split: {a} × {}, {b} × {}", d.dataset, split.as_str(), set.class_names()[0], set.class_names()[1]);
        Ok(set)
    }

    fn load_classifier(&self) -> CliResult<TrainedClassifier> {
        let path = require(&self.classifier_path(), "run `train-classifier` first")?;
        Ok(TrainedClassifier::load(&path, DType::F32, &self.device)?)
    }

    fn load_surrogate(&self) -> CliResult<HyperplaneSurrogate> {
        let path = require(&self.surrogate_path(), "run `fit-svm` first")?;
        Ok(HyperplaneSurrogate::load(&path)?)
    }

    fn load_explainer(&self, path: &Path) -> CliResult<ExplainerModel> {
        let path = require(path, "run `train-explainer` first")?;
        let model = ExplainerModel::load(&path, DType::F32, &self.device)?;
        if model.mode() != self.config.gan.mode {
            return Err(CliError::Config(format!(
                "{} holds a {} explainer but gan.mode is {}",
                path.display(),
                model.mode(),
                self.config.gan.mode
            )));
        }
        Ok(model)
    }
}

fn require(path: &Path, hint: &str) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::MissingArtifact { path: path.to_path_buf(), hint: hint.into() })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize)]
struct ClassifierMetrics<'a> {
    dataset: String,
    classes: &'a [String; 2],
    train_size: usize,
    test_size: usize,
    test_label_counts: (usize, usize),
    epochs: usize,
    batch_size: usize,
    seed: u64,
    epoch_losses: &'a [f64],
    test_accuracy: f64,
}

pub fn train_classifier_cmd(ctx: &Context) -> CliResult<()> {
    let cfg = ctx.config.classifier_config(ctx.seed);
    cfg.validate()?;
    let train = ctx.load_split(Split::Train)?;
    let test = ctx.load_split(Split::Test)?;
    std::fs::create_dir_all(&ctx.run_dir)?;
    let (clf, report) = train_classifier(&train, &test, &cfg, ClassifierArch::default(), &ctx.device)?;
    clf.save(&ctx.classifier_path())?;
    write_json(
        &ctx.metrics_path(),
        &ClassifierMetrics {
            dataset: ctx.config.data.dataset.to_string(),
            classes: train.class_names(),
            train_size: train.len(),
            test_size: test.len(),
            test_label_counts: test.label_counts(),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            epoch_losses: &report.epoch_losses,
            test_accuracy: report.test_accuracy,
        },
    )?;
    println!("accuracy={:.2}", 100.0 * report.test_accuracy);
    Ok(())
}

pub fn fit_svm_cmd(ctx: &Context) -> CliResult<()> {
    let clf = ctx.load_classifier()?;
    let train = ctx.load_split(Split::Train)?;
    let described = clf.describe_signed(train.images(), 64)?;
    let decisions: Vec<u8> = described.iter().map(|(p, _)| p.decision()).collect();
    let features: Vec<Vec<f64>> = described.into_iter().map(|(_, f)| f).collect();
    let surrogate = fit_surrogate(&features, &decisions, &ctx.config.svm_config(ctx.seed))?;
    surrogate.save(&ctx.surrogate_path())?;
    if let Some(r) = surrogate.fit_report {
        log::info!("svm: {} passes (converged: {}), {} held-out samples", r.iterations, r.converged, r.holdout_size);
        match r.holdout_agreement {
            Some(a) => println!("agreement={a:.4}"),
            None => log::warn!("held-out slice is empty; surrogate agreement not measured"),
        }
    }
    Ok(())
}

/// Persists run-directory artifacts and logs each epoch.
struct LoggingObserver {
    inner: RunDirObserver,
    epochs: usize,
}

impl TrainingObserver for LoggingObserver {
    fn on_epoch_end(
        &mut self,
        model: &ExplainerModel,
        summary: &EpochSummary,
        monitor: &[(Image, Image)],
    ) -> alterfactual::Result<()> {
        log::info!(
            "explainer epoch {}/{}: D {:.4}, G {:.4} (adv {:.4}, cls {:.4}, sim {:.4}, svm {:.4})",
            summary.epoch,
            self.epochs,
            summary.discriminator_loss,
            summary.generator_loss,
            summary.components.adversarial,
            summary.components.classification,
            summary.components.similarity,
            summary.components.boundary,
        );
        self.inner.on_epoch_end(model, summary, monitor)
    }
}

pub fn train_explainer_cmd(ctx: &Context) -> CliResult<()> {
    let mut cfg = ctx.config.explainer_config();
    cfg.validate()?;
    if cfg.mode == ExplanationMode::Counterfactual && cfg.lambdas.boundary != 0.0 {
        log::warn!(
            "gan.lambdas.boundary = {} has no effect in counterfactual mode; using 0",
            cfg.lambdas.boundary
        );
        cfg.lambdas.boundary = 0.0;
    }
    let clf = ctx.load_classifier()?;
    let surrogate = if cfg.boundary_active() {
        let path = ctx.surrogate_path();
        if !path.is_file() {
            return Err(CliError::MissingArtifact {
                path,
                hint: "alterfactual training with gan.use_boundary_loss needs the surrogate; run `fit-svm` first \
                       or set gan.use_boundary_loss = false"
                    .into(),
            });
        }
        Some(ctx.load_surrogate()?)
    } else {
        None
    };
    let train = ctx.load_split(Split::Train)?;
    std::fs::create_dir_all(&ctx.run_dir)?;
    let mut observer = LoggingObserver { inner: RunDirObserver::new(&ctx.run_dir), epochs: cfg.epochs };
    let (_, summaries) = train_explainer(
        &clf,
        surrogate.as_ref(),
        &train,
        &cfg,
        &GeneratorArch::default(),
        &DiscriminatorArch::default(),
        &ctx.device,
        &mut observer,
    )?;
    write_json(&ctx.epoch_log_path(), &summaries)?;
    println!("{}", ctx.explainer_path().display());
    Ok(())
}

pub fn evaluate_cmd(ctx: &Context) -> CliResult<()> {
    let clf = ctx.load_classifier()?;
    let model = ctx.load_explainer(&ctx.explainer_path())?;
    let surrogate = if ctx.surrogate_path().is_file() { Some(ctx.load_surrogate()?) } else { None };
    let set = ctx.load_split(ctx.config.eval.split)?;
    let explainer = Explainer::new(&model, &clf, surrogate.as_ref())?;
    let report = explain_set(&explainer, &set, ctx.seed)?;
    let dir = ctx.report_dir();
    std::fs::create_dir_all(&dir)?;
    report.write_json(&dir.join("report.json"))?;
    report.write_csv(&dir.join("report.csv"))?;
    println!("{}", report.summary_line());
    Ok(())
}

pub fn render_cmd(ctx: &Context, checkpoint: Option<PathBuf>, inputs: &[usize], steps: usize) -> CliResult<()> {
    if steps < 2 {
        return Err(CliError::Config(format!("--steps must be at least 2, got {steps}")));
    }
    if inputs.is_empty() {
        return Err(CliError::Config("--inputs needs at least one sample index".into()));
    }
    let path = checkpoint.unwrap_or_else(|| ctx.explainer_path());
    let model = ctx.load_explainer(&path)?;
    let set = ctx.load_split(ctx.config.eval.split)?;
    let filter = PreprocessSpec::default().resize_filter;
    let out = ctx.report_dir().join("render");
    let (mut originals, mut explanations) = (Vec::new(), Vec::new());
    for &i in inputs {
        let img = set.images().get(i).ok_or_else(|| {
            CliError::Config(format!("input index {i} out of range for a {}-image split", set.len()))
        })?;
        let x = resample(img, model.resolution(), filter)?;
        let x_hat = model.generate_image(&x, ctx.seed.wrapping_add(i as u64))?;
        let frames = interpolation_frames(&x, &x_hat, steps)?;
        save_png(&grid(&[frames], 2)?, &out.join(format!("strip_{i}.png")))?;
        originals.push(x);
        explanations.push(x_hat);
    }
    save_png(&grid(&[originals, explanations], 2)?, &out.join("grid.png"))?;
    println!("{}", out.display());
    Ok(())
}
