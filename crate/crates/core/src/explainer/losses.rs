//! The four generator loss components and their weighted sum.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::boundary::HyperplaneSurrogate;
use crate::classifier::TrainedClassifier;
use crate::error::{Error, Result};
use crate::metrics::{ssim_tensor, SsimSpec};
use crate::mode::ExplanationMode;
use crate::nn::{abs_zero_subgradient, log_softmax_last};

/// Discriminator outputs are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const D_EPS: f64 = 1e-7;

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(D_EPS, 1.0 - D_EPS)?)
}

/// `-mean log D(x, ŷ)` for a real pair.
pub fn discriminator_real_loss(d_real: &Tensor) -> Result<Tensor> {
    Ok(clamp_prob(d_real)?.log()?.mean_all()?.neg()?)
}

/// `-mean log(1 - D(x̂, ŷ))` for a generated pair.
pub fn discriminator_fake_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok((1.0 - clamp_prob(d_fake)?)?.log()?.mean_all()?.neg()?)
}

/// Non-saturating generator term `-mean log D(x̂, ŷ)`.
pub fn generator_adversarial_loss(d_fake: &Tensor) -> Result<Tensor> {
    discriminator_real_loss(d_fake)
}

/// `(loss_D, loss_G_adv)` from the discriminator's patch outputs on a real
/// and a generated pair.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let loss_d = (discriminator_real_loss(d_real)? + discriminator_fake_loss(d_fake)?)?;
    Ok((loss_d, generator_adversarial_loss(d_fake)?))
}

/// Binary cross-entropy between the classifier's output on `[-1, 1]`
/// explanations and the per-sample target class.
pub fn classification_loss(clf: &TrainedClassifier, x_hat: &Tensor, targets: &[u8]) -> Result<Tensor> {
    let n = x_hat.dim(0)?;
    if targets.len() != n || targets.iter().any(|&t| t > 1) {
        return Err(Error::validation("classification targets must be one binary label per sample"));
    }
    let logits = clf.logits_unit(&((x_hat + 1.0)? * 0.5)?)?;
    let idx = Tensor::from_iter(targets.iter().map(|&t| t as u32), x_hat.device())?;
    let picked = log_softmax_last(&logits)?.gather(&idx.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean SSIM in alterfactual mode, mean `1 - SSIM` in counterfactual mode.
pub fn similarity_loss(x: &Tensor, x_hat: &Tensor, mode: ExplanationMode, spec: &SsimSpec) -> Result<Tensor> {
    let s = ssim_tensor(x, x_hat, spec)?.mean_all()?;
    Ok(match mode {
        ExplanationMode::Alterfactual => s,
        ExplanationMode::Counterfactual => (1.0 - s)?,
    })
}

/// `mean |d(x) - d(x̂)|` of surrogate hyperplane distances in the
/// classifier's feature space. `x` only contributes a constant.
pub fn boundary_loss(
    clf: &TrainedClassifier,
    surrogate: &HyperplaneSurrogate,
    x: &Tensor,
    x_hat: &Tensor,
) -> Result<Tensor> {
    if surrogate.dim() != clf.feature_dim() {
        return Err(Error::validation(format!(
            "surrogate dimension {} does not match classifier features {}",
            surrogate.dim(),
            clf.feature_dim()
        )));
    }
    let d_x = surrogate.distance_tensor(&clf.forward_signed(&x.detach())?.0)?.detach();
    let d_hat = surrogate.distance_tensor(&clf.forward_signed(x_hat)?.0)?;
    Ok(abs_zero_subgradient(&(d_x - d_hat)?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub classification: f64,
    pub similarity: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adversarial: 1.0, classification: 1.0, similarity: 1.0, boundary: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adversarial, self.classification, self.similarity, self.boundary];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }

    /// Weights actually applied in `mode`: the boundary term never enters a
    /// counterfactual objective.
    pub fn for_mode(self, mode: ExplanationMode) -> Self {
        match mode {
            ExplanationMode::Alterfactual => self,
            ExplanationMode::Counterfactual => Self { boundary: 0.0, ..self },
        }
    }
}

/// Scalar values of the generator loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adversarial: f64,
    pub classification: f64,
    pub similarity: f64,
    pub boundary: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("adversarial", self.adversarial),
            ("classification", self.classification),
            ("similarity", self.similarity),
            ("boundary", self.boundary),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.named().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((component, value)) => Err(Error::NonFiniteLoss { component, value }),
            None => Ok(()),
        }
    }
}

/// `λ_adv·L_adv + λ_C·L_C + λ_sim·L_sim + λ_SVM·L_SVM`, the last term
/// dropped in counterfactual mode.
pub fn total_generator_loss(c: &LossComponents, weights: &LossWeights, mode: ExplanationMode) -> Result<f64> {
    c.check_finite()?;
    let w = weights.for_mode(mode);
    let mut total = w.adversarial * c.adversarial + w.classification * c.classification + w.similarity * c.similarity;
    if w.boundary != 0.0 {
        total += w.boundary * c.boundary;
    }
    Ok(total)
}

/// Differentiable generator loss terms for one batch.
pub struct GeneratorLossTerms {
    pub adversarial: Tensor,
    pub classification: Tensor,
    pub similarity: Tensor,
    pub boundary: Option<Tensor>,
}

impl GeneratorLossTerms {
    /// Weighted sum as a tensor plus the component values, failing on any
    /// non-finite component.
    pub fn combine(&self, weights: &LossWeights, mode: ExplanationMode) -> Result<(Tensor, LossComponents)> {
        let value = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        let components = LossComponents {
            adversarial: value(&self.adversarial)?,
            classification: value(&self.classification)?,
            similarity: value(&self.similarity)?,
            boundary: self.boundary.as_ref().map(value).transpose()?.unwrap_or(0.0),
        };
        components.check_finite()?;
        let w = weights.for_mode(mode);
        let mut total = (((&self.adversarial * w.adversarial)? + (&self.classification * w.classification)?)?
            + (&self.similarity * w.similarity)?)?;
        if let (Some(b), true) = (&self.boundary, w.boundary != 0.0) {
            total = (total + (b * w.boundary)?)?;
        }
        Ok((total, components))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::Standardizer;
    use crate::classifier::ClassifierArch;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn filled(v: f64, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    fn toy_spec() -> SsimSpec {
        SsimSpec { window_size: 5, sigma: 1.0, ..SsimSpec::default() }
    }

    fn random_signed(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.9..0.9)).collect();
        Tensor::from_vec(v, (1, 1, n, n), &Device::Cpu).unwrap()
    }

    #[test]
    fn adversarial_losses_at_half() {
        let p = filled(0.5, (1, 1, 8, 8));
        let (d, g) = adversarial_losses(&p, &p).unwrap();
        assert!((scalar(&d) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((scalar(&g) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_losses_finite_at_saturation() {
        for v in [0.0, 1.0] {
            let p = filled(v, (2, 1, 2, 2));
            let (d, g) = adversarial_losses(&p, &p).unwrap();
            assert!(scalar(&d).is_finite() && scalar(&g).is_finite());
        }
        let (_, g) = adversarial_losses(&filled(1.0, (1, 1, 1, 1)), &filled(0.0, (1, 1, 1, 1))).unwrap();
        assert!((scalar(&g) + D_EPS.ln()).abs() < 1e-9);
    }

    fn toy_classifier(seed: u64) -> TrainedClassifier {
        let arch = ClassifierArch { in_channels: 1, widths: [3, 3, 4, 4], input_resolution: 8 };
        TrainedClassifier::random(arch, seed, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn classification_loss_is_negative_log_target_probability() {
        let clf = toy_classifier(3);
        let x = random_signed(1, 8);
        let (_, probs) = clf.forward_signed(&x).unwrap();
        let p = probs.to_vec2::<f64>().unwrap()[0].clone();
        for t in [0u8, 1] {
            let loss = scalar(&classification_loss(&clf, &x, &[t]).unwrap());
            assert!((loss + p[t as usize].ln()).abs() < 1e-12, "{loss} vs {p:?}");
        }
        assert!(classification_loss(&clf, &x, &[2]).is_err());
        assert!(classification_loss(&clf, &x, &[0, 1]).is_err());
    }

    #[test]
    fn binary_cross_entropy_reference_values() {
        // BCE(p1, t) = -[t ln p1 + (1 - t) ln(1 - p1)] evaluated directly.
        let bce = |p1: f64, t: f64| -(t * p1.ln() + (1.0 - t) * (1.0 - p1).ln());
        assert!((bce(0.73, 1.0) - 0.3147107448397002).abs() < 1e-12);
        assert!((bce(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // The loss equals this BCE for the logits that realize p1.
        let clf = toy_classifier(4);
        let x = random_signed(2, 8);
        let p1 = clf.forward_signed(&x).unwrap().1.to_vec2::<f64>().unwrap()[0][1];
        let loss = scalar(&classification_loss(&clf, &x, &[1]).unwrap());
        assert!((loss - bce(p1, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn similarity_of_identical_images() {
        let x = random_signed(5, 16);
        let alter = scalar(&similarity_loss(&x, &x, ExplanationMode::Alterfactual, &toy_spec()).unwrap());
        let counter = scalar(&similarity_loss(&x, &x, ExplanationMode::Counterfactual, &toy_spec()).unwrap());
        assert_eq!(alter, 1.0);
        assert_eq!(counter, 0.0);
        let y = random_signed(6, 8);
        assert!(matches!(
            similarity_loss(&x, &y, ExplanationMode::Alterfactual, &toy_spec()),
            Err(Error::Validation(_))
        ));
    }

    fn toy_surrogate(dim: usize, seed: u64) -> HyperplaneSurrogate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        HyperplaneSurrogate::new(w, 0.05, Standardizer::identity(dim)).unwrap()
    }

    #[test]
    fn boundary_loss_zero_on_identity_and_rejects_dimension_mismatch() {
        let clf = toy_classifier(7);
        let x = random_signed(8, 8);
        assert_eq!(scalar(&boundary_loss(&clf, &toy_surrogate(4, 1), &x, &x).unwrap()), 0.0);
        assert!(matches!(boundary_loss(&clf, &toy_surrogate(5, 1), &x, &x), Err(Error::Validation(_))));
    }

    #[test]
    fn boundary_loss_analytic_two_feature_case() {
        // Distances 1.4 and 0.9 for w = (3, 4), b = 0.
        let s = HyperplaneSurrogate::new(vec![3.0, 4.0], 0.0, Standardizer::identity(2)).unwrap();
        let fx = Tensor::new(&[[1.0f64, 1.0]], &Device::Cpu).unwrap();
        let fh = Tensor::new(&[[0.3f64, 0.9]], &Device::Cpu).unwrap();
        let d = (s.distance_tensor(&fx).unwrap() - s.distance_tensor(&fh).unwrap()).unwrap().abs().unwrap();
        assert!((scalar(&d.mean_all().unwrap()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let c = LossComponents { adversarial: 0.5, classification: 0.2, similarity: 0.1, boundary: 0.3 };
        let ones = LossWeights::default();
        let alter = total_generator_loss(&c, &ones, ExplanationMode::Alterfactual).unwrap();
        let counter = total_generator_loss(&c, &ones, ExplanationMode::Counterfactual).unwrap();
        assert!((alter - 1.1).abs() < 1e-12);
        assert!((counter - 0.8).abs() < 1e-12);
        let w = LossWeights { adversarial: 2.0, classification: 1.0, similarity: 1.0, boundary: 0.0 };
        assert!((total_generator_loss(&c, &w, ExplanationMode::Alterfactual).unwrap() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn non_finite_component_is_named() {
        let c = LossComponents { adversarial: 0.5, classification: f64::NAN, similarity: 0.1, boundary: 0.3 };
        match total_generator_loss(&c, &LossWeights::default(), ExplanationMode::Alterfactual) {
            Err(Error::NonFiniteLoss { component, .. }) => assert_eq!(component, "classification"),
            other => panic!("{other:?}"),
        }
        let c = LossComponents { boundary: f64::INFINITY, ..LossComponents { adversarial: 0.0, classification: 0.0, similarity: 0.0, boundary: 0.0 } };
        assert!(matches!(
            total_generator_loss(&c, &LossWeights::default(), ExplanationMode::Counterfactual),
            Err(Error::NonFiniteLoss { component: "boundary", .. })
        ));
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights { similarity: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn tensor_combination_matches_scalar_sum() {
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let terms = GeneratorLossTerms {
            adversarial: t(0.5),
            classification: t(0.2),
            similarity: t(0.1),
            boundary: Some(t(0.3)),
        };
        let w = LossWeights { adversarial: 2.0, classification: 0.5, similarity: 3.0, boundary: 1.5 };
        for mode in [ExplanationMode::Alterfactual, ExplanationMode::Counterfactual] {
            let (total, c) = terms.combine(&w, mode).unwrap();
            assert!((scalar(&total) - total_generator_loss(&c, &w, mode).unwrap()).abs() < 1e-12);
        }
    }

    // Central finite differences on 8×8 inputs: autodiff gradients of each
    // component with respect to the explanation pixels.
    fn check_pixel_gradient(f: &dyn Fn(&Tensor) -> Tensor, x0: &Tensor) {
        let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let var = Var::from_tensor(x0).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = |v: &[f64]| scalar(&f(&Tensor::from_slice(v, x0.dims(), &Device::Cpu).unwrap()));
        let h = 1e-3;
        let mut checked = 0;
        for i in 0..base.len() {
            let (mut up, mut down) = (base.clone(), base.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (at(&up) - at(&down)) / (2.0 * h);
            let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            assert!(err <= 1e-3, "pixel {i}: autodiff {} vs fd {fd}", g[i]);
            checked += 1;
        }
        assert_eq!(checked, 64);
    }

    #[test]
    fn classification_loss_gradient_matches_finite_differences() {
        let clf = toy_classifier(11);
        check_pixel_gradient(&|xh| classification_loss(&clf, xh, &[1]).unwrap(), &random_signed(12, 8));
    }

    #[test]
    fn similarity_loss_gradient_matches_finite_differences() {
        let x = random_signed(13, 8);
        let xh0 = ((&x * 0.6).unwrap() + (random_signed(14, 8) * 0.3).unwrap()).unwrap();
        for mode in [ExplanationMode::Alterfactual, ExplanationMode::Counterfactual] {
            check_pixel_gradient(&|xh| similarity_loss(&x, xh, mode, &toy_spec()).unwrap(), &xh0);
        }
    }

    #[test]
    fn boundary_loss_gradient_matches_finite_differences() {
        let clf = toy_classifier(15);
        let s = toy_surrogate(4, 2);
        let x = random_signed(16, 8);
        check_pixel_gradient(&|xh| boundary_loss(&clf, &s, &x, xh).unwrap(), &random_signed(17, 8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn similarity_modes_sum_to_one(a in 0u64..1000, b in 0u64..1000) {
            let x = random_signed(a, 16);
            let y = random_signed(b + 1000, 16);
            let s = scalar(&similarity_loss(&x, &y, ExplanationMode::Alterfactual, &toy_spec()).unwrap());
            let c = scalar(&similarity_loss(&x, &y, ExplanationMode::Counterfactual, &toy_spec()).unwrap());
            prop_assert_eq!(s + c, 1.0);
        }

        #[test]
        fn boundary_loss_vanishes_on_identity(seed in 0u64..1000) {
            let clf = toy_classifier(seed % 5);
            let x = random_signed(seed, 8);
            prop_assert_eq!(scalar(&boundary_loss(&clf, &toy_surrogate(4, seed), &x, &x).unwrap()), 0.0);
        }

        #[test]
        fn total_loss_linear_in_each_weight(
            comps in proptest::array::uniform4(0.0f64..5.0),
            weights in proptest::array::uniform4(0.0f64..3.0),
            which in 0usize..4,
            k in 0.0f64..4.0,
        ) {
            let c = LossComponents { adversarial: comps[0], classification: comps[1], similarity: comps[2], boundary: comps[3] };
            let mk = |w: [f64; 4]| LossWeights { adversarial: w[0], classification: w[1], similarity: w[2], boundary: w[3] };
            let mode = ExplanationMode::Alterfactual;
            let base = total_generator_loss(&c, &mk(weights), mode).unwrap();
            let mut zeroed = weights;
            zeroed[which] = 0.0;
            let rest = total_generator_loss(&c, &mk(zeroed), mode).unwrap();
            let mut scaled = weights;
            scaled[which] *= k;
            let got = total_generator_loss(&c, &mk(scaled), mode).unwrap();
            // f(k·λ_i) = rest + k·(f(λ_i) - rest)
            prop_assert!((got - (rest + k * (base - rest))).abs() <= 1e-9 * (1.0 + got.abs()));
        }
    }
}
