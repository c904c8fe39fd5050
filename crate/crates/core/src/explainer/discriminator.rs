//! Label-conditioned patch discriminator.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sigmoid, BatchNorm2d, Conv2d, Init, NormMode, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub channels: usize,
    pub resolution: usize,
    /// Side of the learned label map before nearest-neighbour upsampling.
    pub embed_side: usize,
    /// Hidden stride-2 convolutions; a final 1-filter stride-2 convolution follows.
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub init_std: f64,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self { channels: 1, resolution: 128, embed_side: 8, filters: vec![64, 128, 256], kernel: 4, init_std: 0.02 }
    }
}

impl DiscriminatorArch {
    pub fn validate(&self) -> Result<()> {
        let down = 1usize << (self.filters.len() + 1);
        if self.filters.is_empty() || self.resolution % down != 0 {
            return Err(Error::validation(format!(
                "discriminator resolution {} must be divisible by {down}",
                self.resolution
            )));
        }
        if self.embed_side == 0 || self.resolution % self.embed_side != 0 {
            return Err(Error::validation("label map side must divide the resolution"));
        }
        Ok(())
    }

    /// Side of the sigmoid patch map.
    pub fn patch_side(&self) -> usize {
        self.resolution >> (self.filters.len() + 1)
    }
}

struct Block {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

pub struct Discriminator {
    arch: DiscriminatorArch,
    embedding: Tensor,
    blocks: Vec<Block>,
    head: Conv2d,
}

impl Discriminator {
    pub fn build(store: &mut ParamStore, arch: &DiscriminatorArch) -> Result<Self> {
        arch.validate()?;
        let init = Init::Normal { std: arch.init_std };
        let side = arch.embed_side;
        let embedding = store.param("disc.embed", &[2, side * side], init)?;
        let mut blocks = Vec::new();
        let mut cin = arch.channels + 1;
        for (i, &f) in arch.filters.iter().enumerate() {
            let name = format!("disc.conv{}", i + 1);
            let normed = i != 0;
            blocks.push(Block {
                conv: Conv2d::new(store, &name, cin, f, arch.kernel, 2, 1, !normed, init)?,
                norm: normed.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), f)).transpose()?,
            });
            cin = f;
        }
        let head = Conv2d::new(store, "disc.head", cin, 1, arch.kernel, 2, 1, true, init)?;
        Ok(Self { arch: arch.clone(), embedding, blocks, head })
    }

    pub fn arch(&self) -> &DiscriminatorArch {
        &self.arch
    }

    /// Label pathway: embedding → `side×side` map → nearest upsample to the image size.
    fn label_map(&self, labels: &[u8], dtype: DType) -> Result<Tensor> {
        let n = labels.len();
        let dev = self.embedding.device();
        let mut onehot = vec![0f32; n * 2];
        for (i, &l) in labels.iter().enumerate() {
            if l > 1 {
                return Err(Error::validation(format!("discriminator label {l} is not binary")));
            }
            onehot[2 * i + l as usize] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, (n, 2), dev)?.to_dtype(dtype)?;
        let (s, r) = (self.arch.embed_side, self.arch.resolution);
        let f = r / s;
        let map = onehot.matmul(&self.embedding)?.reshape((n, 1, s, 1, s, 1))?;
        Ok(map.broadcast_as((n, 1, s, f, s, f))?.reshape((n, 1, r, r))?)
    }

    /// Patch probabilities `(N, 1, P, P)` that each `(image, label)` pair is real.
    pub fn forward(&self, images: &Tensor, labels: &[u8], norm: NormMode) -> Result<Tensor> {
        let (n, c, h, w) = images.dims4()?;
        let r = self.arch.resolution;
        if (c, h, w) != (self.arch.channels, r, r) || n != labels.len() {
            return Err(Error::validation(format!(
                "discriminator expects {n} labels and {}x{r}x{r} images, got {} labels and {c}x{h}x{w}",
                self.arch.channels,
                labels.len()
            )));
        }
        let mut x = Tensor::cat(&[images, &self.label_map(labels, images.dtype())?], 1)?;
        for block in &self.blocks {
            x = block.conv.forward(&x)?;
            if let Some(bn) = &block.norm {
                x = bn.forward(&x, norm)?;
            }
            x = leaky_relu(&x, 0.2)?;
        }
        sigmoid(&self.head.forward(&x)?)
    }
}
