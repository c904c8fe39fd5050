use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Discriminator, DiscriminatorArch, ExplainerConfig, Generator, GeneratorArch};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mode::ExplanationMode;
use crate::nn::{architecture_hash, load_tensors, save_tensors, DropoutNoise, NormMode, ParamStore};

const CHECKPOINT_KIND: &str = "explainer";

/// Position of a ChaCha8 stream, enough to reconstruct it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("bad RNG seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Checkpoint("RNG seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

/// Generator and discriminator weights plus everything needed to reproduce
/// or continue the run that produced them.
pub struct ExplainerModel {
    config: ExplainerConfig,
    epoch: usize,
    rng: RngState,
    gen_store: ParamStore,
    disc_store: ParamStore,
    generator: Generator,
    discriminator: Discriminator,
}

impl std::fmt::Debug for ExplainerModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExplainerModel")
            .field("mode", &self.config.mode)
            .field("epoch", &self.epoch)
            .field("generator", self.generator.arch())
            .field("discriminator", self.discriminator.arch())
            .finish()
    }
}

impl ExplainerModel {
    /// Freshly initialized networks. Generator and discriminator draw from
    /// separate streams derived from `config.seed`.
    pub fn new(
        gen_arch: &GeneratorArch,
        disc_arch: &DiscriminatorArch,
        config: ExplainerConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        if gen_arch.resolution() != disc_arch.resolution || gen_arch.channels != disc_arch.channels {
            return Err(Error::validation(format!(
                "generator produces {}x{r}x{r} images but the discriminator expects {}x{d}x{d}",
                gen_arch.channels,
                disc_arch.channels,
                r = gen_arch.resolution(),
                d = disc_arch.resolution
            )));
        }
        let mut gen_store = ParamStore::seeded(config.seed, dtype, device);
        let generator = Generator::build(&mut gen_store, gen_arch)?;
        let mut disc_store = ParamStore::seeded(config.seed ^ 0x5eed_d15c, dtype, device);
        let discriminator = Discriminator::build(&mut disc_store, disc_arch)?;
        let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(config.seed));
        Ok(Self { config, epoch: 0, rng, gen_store, disc_store, generator, discriminator })
    }

    pub fn mode(&self) -> ExplanationMode {
        self.config.mode
    }

    pub fn config(&self) -> &ExplainerConfig {
        &self.config
    }

    /// Completed training epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn rng_state(&self) -> &RngState {
        &self.rng
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn resolution(&self) -> usize {
        self.generator.arch().resolution()
    }

    pub fn dtype(&self) -> DType {
        self.gen_store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.gen_store.device()
    }

    pub(crate) fn generator_vars(&self) -> Vec<Var> {
        self.gen_store.trainable_vars()
    }

    pub(crate) fn discriminator_vars(&self) -> Vec<Var> {
        self.disc_store.trainable_vars()
    }

    pub(crate) fn record_progress(&mut self, epoch: usize, rng: &ChaCha8Rng) {
        self.epoch = epoch;
        self.rng = RngState::capture(rng);
    }

    /// `G(x, z)` for a batch of `[-1, 1]` tensors, with decoder dropout masks
    /// drawn from `noise`. Batch-norm layers normalize with the statistics of
    /// the batch itself, as during training.
    pub fn generate_tensor(&self, x: &Tensor, noise: &mut DropoutNoise) -> Result<Tensor> {
        self.generator.forward(x, noise, NormMode::Batch)
    }

    pub fn dropout_noise(&self, seed: u64) -> DropoutNoise {
        DropoutNoise::seeded(seed, self.generator.arch().dropout_rate)
    }

    /// Explanation for one preprocessed image. Deterministic in `(x, seed)`.
    pub fn generate_image(&self, x: &Image, seed: u64) -> Result<Image> {
        let r = self.resolution();
        let c = self.generator.arch().channels;
        if x.shape() != (r, r, c) {
            return Err(Error::validation(format!(
                "explainer expects a preprocessed {r}x{r}x{c} image, got {:?}",
                x.shape()
            )));
        }
        x.check_range(-1.0, 1.0)?;
        let t = x.to_tensor(self.dtype(), self.device())?;
        let out = self.generate_tensor(&t, &mut self.dropout_noise(seed))?;
        Ok(Image::unstack(&out)?.remove(0))
    }

    fn metadata(&self) -> Result<HashMap<String, String>> {
        let gen_arch = to_json(self.generator.arch())?;
        let disc_arch = to_json(self.discriminator.arch())?;
        let arch_json = format!("{{\"generator\":{gen_arch},\"discriminator\":{disc_arch}}}");
        let tensors = self.tensors();
        let hash = architecture_hash(
            CHECKPOINT_KIND,
            &arch_json,
            tensors.iter().map(|(k, t)| (k.as_str(), t.dims())),
        );
        Ok(HashMap::from([
            ("kind".to_string(), CHECKPOINT_KIND.to_string()),
            ("mode".to_string(), self.config.mode.to_string()),
            ("arch".to_string(), arch_json),
            ("arch_hash".to_string(), hash),
            ("config".to_string(), to_json(&self.config)?),
            ("epoch".to_string(), self.epoch.to_string()),
            ("rng".to_string(), to_json(&self.rng)?),
        ]))
    }

    fn tensors(&self) -> std::collections::BTreeMap<String, Tensor> {
        let mut all = self.gen_store.tensors();
        all.extend(self.disc_store.tensors());
        all
    }

    /// Writes a single safetensors checkpoint atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.tensors(), self.metadata()?)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (tensors, meta) = load_tensors(path, device)?;
        let field = |k: &str| {
            meta.get(k).ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata `{k}`", path.display())))
        };
        if field("kind")? != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("{} is not an explainer checkpoint", path.display())));
        }
        let bad = |what: &str, e: serde_json::Error| Error::Checkpoint(format!("bad {what} record: {e}"));
        #[derive(Deserialize)]
        struct Archs {
            generator: GeneratorArch,
            discriminator: DiscriminatorArch,
        }
        let arch_json = field("arch")?;
        let archs: Archs = serde_json::from_str(arch_json).map_err(|e| bad("architecture", e))?;
        let config: ExplainerConfig = serde_json::from_str(field("config")?).map_err(|e| bad("config", e))?;
        let rng: RngState = serde_json::from_str(field("rng")?).map_err(|e| bad("RNG", e))?;
        let epoch: usize = field("epoch")?.parse().map_err(|_| Error::Checkpoint("bad epoch record".into()))?;
        let hash = architecture_hash(
            CHECKPOINT_KIND,
            arch_json,
            tensors.iter().map(|(k, t)| (k.as_str(), t.dims())),
        );
        if &hash != field("arch_hash")? {
            return Err(Error::Checkpoint(format!("{}: architecture hash mismatch", path.display())));
        }
        let (gen, disc): (HashMap<_, _>, HashMap<_, _>) = tensors.into_iter().partition(|(k, _)| k.starts_with("gen."));
        let mut gen_store = ParamStore::from_tensors(gen, dtype, device);
        let generator = Generator::build(&mut gen_store, &archs.generator)?;
        gen_store.finish_loading()?;
        let mut disc_store = ParamStore::from_tensors(disc, dtype, device);
        let discriminator = Discriminator::build(&mut disc_store, &archs.discriminator)?;
        disc_store.finish_loading()?;
        Ok(Self { config, epoch, rng, gen_store, disc_store, generator, discriminator })
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}
