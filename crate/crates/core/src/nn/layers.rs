//! Building blocks shared by the classifier, generator and discriminator.

use candle_core::{DType, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::store::{Init, ParamStore};
use crate::error::Result;

/// The CPU conv2d kernel mistakes a contiguous NCHW input for NHWC when
/// channels, height and width coincide. Such inputs are split into two
/// channel groups so the kernel never sees the ambiguous layout.
fn ambiguous_layout(c: usize, h: usize, w: usize) -> bool {
    c > 1 && c == h && c == w
}

pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if !ambiguous_layout(c, h, w) {
        return Ok(x.conv2d(weight, padding, stride, 1, 1)?);
    }
    let half = c / 2;
    let a = x.narrow(1, 0, half)?.conv2d(&weight.narrow(1, 0, half)?, padding, stride, 1, 1)?;
    let b = x.narrow(1, half, c - half)?.conv2d(&weight.narrow(1, half, c - half)?, padding, stride, 1, 1)?;
    Ok((a + b)?)
}

/// Transposed convolution with weight `(in, out, k, k)`. Its input gradient
/// is a conv2d on the output gradient, so ambiguous output shapes are
/// produced in two channel groups.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (_, _, h, _) = x.dims4()?;
    let (_, c, k, _) = weight.dims4()?;
    let out = (h - 1) * stride + k - 2 * padding;
    if !ambiguous_layout(c, out, out) {
        return Ok(x.conv_transpose2d(weight, padding, 0, stride, 1)?);
    }
    let half = c / 2;
    let a = x.conv_transpose2d(&weight.narrow(1, 0, half)?, padding, 0, stride, 1)?;
    let b = x.conv_transpose2d(&weight.narrow(1, half, c - half)?, padding, 0, stride, 1)?;
    Ok(Tensor::cat(&[a, b], 1)?)
}

/// Square-kernel 2-D convolution, NCHW.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            init,
        )?;
        let bias = bias
            .then(|| store.param(&format!("{name}.bias"), &[out_channels], Init::Zeros))
            .transpose()?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Square-kernel transposed convolution, NCHW.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[in_channels, out_channels, kernel, kernel],
            init,
        )?;
        let bias = bias
            .then(|| store.param(&format!("{name}.bias"), &[out_channels], Init::Zeros))
            .transpose()?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, &self.weight, self.padding, self.stride)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Fully connected layer `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[outputs, inputs],
            Init::GlorotUniform { fan_in: inputs, fan_out: outputs },
        )?;
        let bias = store.param(&format!("{name}.bias"), &[outputs], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Which statistics a batch-norm layer normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Stored running statistics (inference).
    Running,
    /// Statistics of the current batch; running statistics untouched.
    Batch,
    /// Statistics of the current batch, folded into the running estimates.
    BatchUpdate,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: store.param(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = match mode {
            NormMode::Running => (
                self.running_mean.as_tensor().detach().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, c, 1, 1))?,
            ),
            NormMode::Batch | NormMode::BatchUpdate => {
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                if mode == NormMode::BatchUpdate {
                    let n = (x.elem_count() / c) as f64;
                    let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
                    let m = self.momentum;
                    let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                    let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
                    self.running_mean.set(&rm)?;
                    self.running_var.set(&rv)?;
                }
                (mean, var)
            }
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// `1 / (1 + e^{-x})` built from differentiable primitives.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Sign of each element as a constant tensor: -1, 0 or +1.
pub fn sign(x: &Tensor) -> Result<Tensor> {
    let x = x.detach();
    Ok((x.gt(0.0)?.to_dtype(x.dtype())? - x.lt(0.0)?.to_dtype(x.dtype())?)?)
}

/// `|x|` with subgradient 0 at the kink.
pub fn abs_zero_subgradient(x: &Tensor) -> Result<Tensor> {
    Ok((x * sign(x)?)?)
}

/// Source of inverted-dropout masks. Each call draws a fresh Bernoulli mask;
/// the sequence is fully determined by the seed.
#[derive(Debug, Clone)]
pub struct DropoutNoise {
    rng: ChaCha8Rng,
    rate: f64,
}

impl DropoutNoise {
    pub fn new(rng: ChaCha8Rng, rate: f64) -> Self {
        Self { rng, rate }
    }

    pub fn seeded(seed: u64, rate: f64) -> Self {
        use rand::SeedableRng;
        Self::new(ChaCha8Rng::seed_from_u64(seed), rate)
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Zeroes activations with probability `rate`, scales survivors by `1/(1-rate)`.
    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if self.rng.random::<f64>() < keep { scale as f32 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// Non-overlapping 2×2 max pooling, NCHW. Gradients flow to the window maximum.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

/// Per-dtype scalar tensor helper.
pub fn scalar(v: f64, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::new(v, device)?.to_dtype(dtype)?)
}
