//! U-Net style encoder-decoder with channel-concatenated skips. Decoder
//! dropout stays active at generation time and is the generator's only
//! source of randomness.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, BatchNorm2d, Conv2d, ConvTranspose2d, DropoutNoise, Init, NormMode, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub channels: usize,
    /// Filters of the stride-2 encoder convolutions, the last one being the bottleneck.
    pub encoder_filters: Vec<usize>,
    /// Filters of the stride-2 decoder layers before the output layer.
    pub decoder_filters: Vec<usize>,
    /// Leading decoder layers that apply dropout.
    pub dropout_layers: usize,
    pub dropout_rate: f64,
    pub kernel: usize,
    pub init_std: f64,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            channels: 1,
            encoder_filters: vec![64, 128, 256, 512, 512, 512, 512],
            decoder_filters: vec![512, 512, 512, 256, 128, 64],
            dropout_layers: 3,
            dropout_rate: 0.5,
            kernel: 4,
            init_std: 0.02,
        }
    }
}

impl GeneratorArch {
    /// Input side length that reaches a 1×1 bottleneck.
    pub fn resolution(&self) -> usize {
        1 << self.encoder_filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.encoder_filters.len();
        if depth < 2 || self.decoder_filters.len() + 1 != depth {
            return Err(Error::validation(format!(
                "generator needs n >= 2 encoder layers and n - 1 decoder layers, got {depth} and {}",
                self.decoder_filters.len()
            )));
        }
        if self.dropout_layers > self.decoder_filters.len() || !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("invalid generator dropout settings"));
        }
        if self.kernel != 4 {
            return Err(Error::validation("generator layers use 4x4 kernels with padding 1"));
        }
        Ok(())
    }
}

struct EncoderLayer {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
    bottleneck: bool,
}

struct DecoderLayer {
    conv: ConvTranspose2d,
    norm: BatchNorm2d,
    dropout: bool,
}

pub struct Generator {
    arch: GeneratorArch,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    output: ConvTranspose2d,
}

impl Generator {
    pub fn build(store: &mut ParamStore, arch: &GeneratorArch) -> Result<Self> {
        arch.validate()?;
        let init = Init::Normal { std: arch.init_std };
        let depth = arch.encoder_filters.len();
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = arch.channels;
        for (i, &f) in arch.encoder_filters.iter().enumerate() {
            let name = format!("gen.enc{}", i + 1);
            // Batch norm everywhere except the first layer and the bottleneck.
            let normed = i != 0 && i + 1 != depth;
            encoder.push(EncoderLayer {
                conv: Conv2d::new(store, &name, cin, f, arch.kernel, 2, 1, !normed, init)?,
                norm: normed.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), f)).transpose()?,
                bottleneck: i + 1 == depth,
            });
            cin = f;
        }
        let mut decoder = Vec::with_capacity(depth - 1);
        for (j, &f) in arch.decoder_filters.iter().enumerate() {
            let name = format!("gen.dec{}", j + 1);
            decoder.push(DecoderLayer {
                conv: ConvTranspose2d::new(store, &name, cin, f, arch.kernel, 2, 1, false, init)?,
                norm: BatchNorm2d::new(store, &format!("{name}.bn"), f)?,
                dropout: j < arch.dropout_layers,
            });
            // Mirror encoder level: depth-2-j (0-based), counted back from the bottleneck.
            cin = f + arch.encoder_filters[depth - 2 - j];
        }
        let output = ConvTranspose2d::new(store, "gen.out", cin, arch.channels, arch.kernel, 2, 1, true, init)?;
        Ok(Self { arch: arch.clone(), encoder, decoder, output })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    /// Maps `[-1, 1]` images `(N, C, R, R)` to explanations of the same shape.
    pub fn forward(&self, x: &Tensor, noise: &mut DropoutNoise, norm: NormMode) -> Result<Tensor> {
        let r = self.arch.resolution();
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (self.arch.channels, r, r) {
            return Err(Error::validation(format!(
                "generator expects {}x{r}x{r} input, got {c}x{h}x{w}",
                self.arch.channels
            )));
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for layer in &self.encoder {
            h = layer.conv.forward(&h)?;
            if let Some(bn) = &layer.norm {
                h = bn.forward(&h, norm)?;
            }
            h = if layer.bottleneck { h.relu()? } else { leaky_relu(&h, 0.2)? };
            skips.push(h.clone());
        }
        skips.pop();
        for layer in &self.decoder {
            h = layer.norm.forward(&layer.conv.forward(&h)?, norm)?;
            if layer.dropout {
                h = noise.apply(&h)?;
            }
            h = h.relu()?;
            let skip = skips.pop().expect("one skip per decoder layer");
            h = Tensor::cat(&[&h, &skip], 1)?;
        }
        Ok(self.output.forward(&h)?.tanh()?)
    }
}
