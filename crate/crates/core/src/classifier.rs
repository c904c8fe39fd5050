//! The binary CNN under explanation: training, inference, penultimate
//! features, and self-describing checkpoints.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resample, LabeledImageSet, PreprocessSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    architecture_hash, load_tensors, log_softmax_last, max_pool2x2, save_tensors, softmax_last, BatchNorm2d,
    Conv2d, Init, Linear, NormMode, ParamStore,
};

const CHECKPOINT_KIND: &str = "classifier";

/// Conv(w0) → Conv(w1) → MaxPool 2×2 → Conv(w2) → Conv(w3) → GAP → Dense 2.
/// Every convolution is 3×3, stride 1, "same" padding, batch-norm then ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub input_resolution: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self { in_channels: 1, widths: [32, 32, 64, 64], input_resolution: 128 }
    }
}

impl ClassifierArch {
    pub fn feature_dim(&self) -> usize {
        self.widths[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { batch_size: 32, epochs: 40, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("classifier batch_size and epochs must be positive"));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("beta1", self.beta1), ("beta2", self.beta2), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("classifier {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Class probabilities `(p₀, p₁)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities(pub [f64; 2]);

impl ClassProbabilities {
    /// Argmax, with an exact tie going to class 1.
    pub fn decision(&self) -> u8 {
        u8::from(self.0[1] >= self.0[0])
    }

    pub fn p1(&self) -> f64 {
        self.0[1]
    }
}

/// Layer stack shared by training and inference.
struct Net {
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
    head: Linear,
}

impl Net {
    fn build(store: &mut ParamStore, arch: &ClassifierArch) -> Result<Self> {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = arch.in_channels;
        for (i, &w) in arch.widths.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let init = Init::GlorotUniform { fan_in: cin * 9, fan_out: w * 9 };
            convs.push(Conv2d::new(store, &name, cin, w, 3, 1, 1, false, init)?);
            norms.push(BatchNorm2d::new(store, &format!("{name}.bn"), w)?);
            cin = w;
        }
        let head = Linear::new(store, "dense", cin, 2)?;
        Ok(Self { convs, norms, head })
    }

    /// `x` in `[0, 1]`, NCHW. Returns `(features (N, F), logits (N, 2))`.
    fn forward(&self, x: &Tensor, mode: NormMode) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for (i, (conv, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = bn.forward(&conv.forward(&h)?, mode)?.relu()?;
            if i == 1 {
                h = max_pool2x2(&h)?;
            }
        }
        let features = h.mean(D::Minus1)?.mean(D::Minus1)?;
        let logits = self.head.forward(&features)?;
        Ok((features, logits))
    }
}

/// A frozen classifier. Batch-norm layers use their stored running statistics
/// and no parameter participates in autograd.
pub struct TrainedClassifier {
    arch: ClassifierArch,
    preprocess: PreprocessSpec,
    store: ParamStore,
    net: Net,
}

impl std::fmt::Debug for TrainedClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedClassifier")
            .field("arch", &self.arch)
            .field("preprocess", &self.preprocess)
            .finish_non_exhaustive()
    }
}

impl TrainedClassifier {
    /// Randomly initialised frozen network, mostly useful for tests.
    pub fn random(arch: ClassifierArch, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::seeded(seed, dtype, device).freeze();
        let net = Net::build(&mut store, &arch)?;
        let preprocess = PreprocessSpec { target_resolution: arch.input_resolution, ..Default::default() };
        Ok(Self { arch, preprocess, store, net })
    }

    fn from_tensors(
        arch: ClassifierArch,
        preprocess: PreprocessSpec,
        tensors: HashMap<String, Tensor>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut store = ParamStore::from_tensors(tensors, dtype, device).freeze();
        let net = Net::build(&mut store, &arch)?;
        store.finish_loading()?;
        Ok(Self { arch, preprocess, store, net })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn preprocess_spec(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    pub fn input_resolution(&self) -> usize {
        self.arch.input_resolution
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Always true: a `TrainedClassifier` never changes its weights.
    pub fn is_frozen(&self) -> bool {
        true
    }

    /// Tensor-level forward pass on `[0, 1]` inputs: `(features, probabilities)`.
    /// Differentiable with respect to `x`.
    pub fn forward_unit(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (features, logits) = self.net.forward(x, NormMode::Running)?;
        Ok((features, softmax_last(&logits)?))
    }

    /// Logits for `[0, 1]` inputs.
    pub fn logits_unit(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(x, NormMode::Running)?.1)
    }

    /// Forward pass on pipeline-domain `[-1, 1]` inputs via `(x + 1) / 2`.
    pub fn forward_signed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_unit(&((x + 1.0)? * 0.5)?)
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let r = self.arch.input_resolution;
        if image.shape() != (r, r, self.arch.in_channels) {
            return Err(Error::validation(format!(
                "classifier expects {r}x{r}x{} input, got {:?}",
                self.arch.in_channels,
                image.shape()
            )));
        }
        image.check_range(0.0, 1.0)
    }

    /// Class probabilities for `[0, 1]` images at the input resolution.
    pub fn predict_batch(&self, images: &[Image]) -> Result<Vec<ClassProbabilities>> {
        images.iter().try_for_each(|i| self.check_input(i))?;
        let x = Image::stack(images, self.dtype(), self.device())?;
        probabilities_to_vec(&self.forward_unit(&x)?.1)
    }

    pub fn predict(&self, image: &Image) -> Result<ClassProbabilities> {
        Ok(self.predict_batch(std::slice::from_ref(image))?[0])
    }

    /// Global-average-pool activations for one `[0, 1]` image.
    pub fn penultimate_features(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let x = image.to_tensor(self.dtype(), self.device())?;
        Ok(self.forward_unit(&x)?.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    /// Probabilities and features for `[-1, 1]` images of any resolution,
    /// resampled with the training-time preprocessing. Runs in chunks.
    pub fn describe_signed(&self, images: &[Image], chunk: usize) -> Result<Vec<(ClassProbabilities, Vec<f64>)>> {
        let mut out = Vec::with_capacity(images.len());
        for batch in images.chunks(chunk.max(1)) {
            let x = self.signed_batch(batch)?;
            let (f, p) = self.forward_signed(&x)?;
            let probs = probabilities_to_vec(&p)?;
            let feats = f.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(probs.into_iter().zip(feats));
        }
        Ok(out)
    }

    fn signed_batch(&self, images: &[Image]) -> Result<Tensor> {
        let spec = &self.preprocess;
        let resized = images
            .iter()
            .map(|i| resample(i, spec.target_resolution, spec.resize_filter))
            .collect::<Result<Vec<_>>>()?;
        Image::stack(&resized, self.dtype(), self.device())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.store.tensors();
        let arch_json = serde_json::to_string(&self.arch).expect("serializable");
        let hash = architecture_hash(
            CHECKPOINT_KIND,
            &arch_json,
            tensors.iter().map(|(k, t)| (k.as_str(), t.dims())),
        );
        let metadata = HashMap::from([
            ("kind".to_string(), CHECKPOINT_KIND.to_string()),
            ("arch".to_string(), arch_json),
            ("arch_hash".to_string(), hash),
            ("input_resolution".to_string(), self.arch.input_resolution.to_string()),
            ("preprocess".to_string(), serde_json::to_string(&self.preprocess).expect("serializable")),
        ]);
        save_tensors(path, &tensors, metadata)
    }

    /// Loads a checkpoint, verifying its architecture hash.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (tensors, meta) = load_tensors(path, device)?;
        let field = |k: &str| {
            meta.get(k).ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata `{k}`", path.display())))
        };
        if field("kind")? != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("{} is not a classifier checkpoint", path.display())));
        }
        let arch_json = field("arch")?;
        let arch: ClassifierArch = serde_json::from_str(arch_json)
            .map_err(|e| Error::Checkpoint(format!("bad architecture record: {e}")))?;
        let preprocess: PreprocessSpec = serde_json::from_str(field("preprocess")?)
            .map_err(|e| Error::Checkpoint(format!("bad preprocessing record: {e}")))?;
        let hash = architecture_hash(
            CHECKPOINT_KIND,
            arch_json,
            tensors.iter().map(|(k, t)| (k.as_str(), t.dims())),
        );
        if &hash != field("arch_hash")? {
            return Err(Error::Checkpoint(format!("{}: architecture hash mismatch", path.display())));
        }
        Self::from_tensors(arch, preprocess, tensors, dtype, device)
    }
}

fn probabilities_to_vec(p: &Tensor) -> Result<Vec<ClassProbabilities>> {
    Ok(p.to_dtype(DType::F64)?
        .to_vec2::<f64>()?
        .into_iter()
        .map(|r| ClassProbabilities([r[0], r[1]]))
        .collect())
}

/// Per-epoch training log plus final held-out accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainingReport {
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: f64,
}

/// Mean categorical cross-entropy of `logits` against integer `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&labels.unsqueeze(1)?, 1)?;
    Ok(picked.neg()?.mean_all()?)
}

/// Trains the classifier with Adam on two-way cross-entropy and returns it
/// frozen, along with the training log.
pub fn train_classifier(
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &ClassifierConfig,
    arch: ClassifierArch,
    device: &Device,
) -> Result<(TrainedClassifier, ClassifierTrainingReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let preprocess = PreprocessSpec { target_resolution: arch.input_resolution, ..Default::default() };
    let mut store = ParamStore::seeded(cfg.seed, DType::F32, device);
    let net = Net::build(&mut store, &arch)?;
    let mut opt = AdamW::new(
        store.trainable_vars(),
        ParamsAdamW { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: 0.0 },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let imgs = batch
                .iter()
                .map(|&i| resample(&train.images()[i], arch.input_resolution, preprocess.resize_filter))
                .collect::<Result<Vec<_>>>()?;
            let x = ((Image::stack(&imgs, DType::F32, device)? + 1.0)? * 0.5)?;
            let labels: Vec<u32> = batch.iter().map(|&i| train.labels()[i] as u32).collect();
            let y = Tensor::new(labels.as_slice(), device)?;
            let (_, logits) = net.forward(&x, NormMode::BatchUpdate)?;
            let loss = cross_entropy(&logits, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::TrainingFailure { epoch, reason: format!("classifier loss is {value}") });
            }
            opt.backward_step(&loss)?;
            total += value * batch.len() as f64;
        }
        let mean = total / train.len() as f64;
        log::info!("classifier epoch {epoch}/{}: train loss {mean:.5}", cfg.epochs);
        epoch_losses.push(mean);
    }

    let clf = TrainedClassifier::from_tensors(
        arch,
        preprocess,
        store.tensors().into_iter().collect(),
        DType::F32,
        device,
    )?;
    let test_accuracy = accuracy(&clf, test)?;
    log::info!("classifier test accuracy {:.4}", test_accuracy);
    Ok((clf, ClassifierTrainingReport { epoch_losses, test_accuracy }))
}

/// Fraction of `set` whose argmax decision equals its label.
pub fn accuracy(clf: &TrainedClassifier, set: &LabeledImageSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::validation("cannot compute accuracy of an empty set"));
    }
    let preds = clf.describe_signed(set.images(), 64)?;
    let correct = preds.iter().zip(set.labels()).filter(|((p, _), &l)| p.decision() == l).count();
    Ok(correct as f64 / set.len() as f64)
}
