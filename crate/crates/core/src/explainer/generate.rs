use super::ExplainerModel;
use crate::boundary::HyperplaneSurrogate;
use crate::classifier::{ClassProbabilities, TrainedClassifier};
use crate::data::{resample, LabeledImageSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate, ssim, EvaluationReport, SampleRecord, SsimSpec};
use crate::mode::ExplanationMode;

/// One explanation and everything measured about it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationRecord {
    pub original: Image,
    pub explanation: Image,
    pub target_class: u8,
    pub pred_orig: ClassProbabilities,
    pub pred_expl: ClassProbabilities,
    pub ssim: f64,
    /// Surrogate hyperplane distances; absent without a surrogate.
    pub dist_orig: Option<f64>,
    pub dist_expl: Option<f64>,
    pub valid: bool,
}

impl ExplanationRecord {
    pub fn to_sample(&self, id: usize) -> SampleRecord {
        SampleRecord {
            id,
            pred_orig: self.pred_orig.0,
            pred_expl: self.pred_expl.0,
            ssim: self.ssim,
            dist_orig: self.dist_orig,
            dist_expl: self.dist_expl,
            valid: self.valid,
        }
    }
}

/// A trained explainer bound to the classifier it explains.
pub struct Explainer<'a> {
    pub model: &'a ExplainerModel,
    pub classifier: &'a TrainedClassifier,
    pub surrogate: Option<&'a HyperplaneSurrogate>,
    pub ssim: SsimSpec,
}

impl<'a> Explainer<'a> {
    pub fn new(
        model: &'a ExplainerModel,
        classifier: &'a TrainedClassifier,
        surrogate: Option<&'a HyperplaneSurrogate>,
    ) -> Result<Self> {
        if let Some(s) = surrogate {
            if s.dim() != classifier.feature_dim() {
                return Err(Error::validation(format!(
                    "surrogate dimension {} does not match classifier features {}",
                    s.dim(),
                    classifier.feature_dim()
                )));
            }
        }
        Ok(Self { model, classifier, surrogate, ssim: model.config().ssim })
    }

    pub fn mode(&self) -> ExplanationMode {
        self.model.mode()
    }

    /// `x̂ = G(x, z)` with `z` fixed by `seed`, plus predictions, SSIM,
    /// boundary distances and validity. `x` must already be preprocessed.
    pub fn generate(&self, x: &Image, seed: u64) -> Result<ExplanationRecord> {
        let explanation = self.model.generate_image(x, seed)?;
        let d = self.classifier.describe_signed(&[x.clone(), explanation.clone()], 2)?;
        let ((pred_orig, f_orig), (pred_expl, f_expl)) = (&d[0], &d[1]);
        let dist = |f: &[f64]| self.surrogate.map(|s| s.hyperplane_distance(f)).transpose();
        let target_class = self.mode().target_class(pred_orig.decision());
        Ok(ExplanationRecord {
            ssim: ssim(x, &explanation, &self.ssim)?,
            dist_orig: dist(f_orig)?,
            dist_expl: dist(f_expl)?,
            valid: pred_expl.decision() == target_class,
            target_class,
            pred_orig: *pred_orig,
            pred_expl: *pred_expl,
            original: x.clone(),
            explanation,
        })
    }
}

/// Explains every image of `set` (sample `i` with seed `seed + i`) and scores
/// the pairs. Images are first resampled to the explainer's resolution.
pub fn explain_set(explainer: &Explainer<'_>, set: &LabeledImageSet, seed: u64) -> Result<EvaluationReport> {
    let res = explainer.model.resolution();
    let filter = explainer.classifier.preprocess_spec().resize_filter;
    let pairs = set
        .images()
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let x = resample(img, res, filter)?;
            let x_hat = explainer.model.generate_image(&x, seed.wrapping_add(i as u64))?;
            Ok((x, x_hat))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(explainer.classifier, explainer.surrogate, &pairs, explainer.mode(), &explainer.ssim)
}
