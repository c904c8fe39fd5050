//! SSIM, explanation validity, boundary-distance drift and evaluation reports.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::boundary::HyperplaneSurrogate;
use crate::classifier::TrainedClassifier;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mode::ExplanationMode;

/// Gaussian-windowed SSIM parameters. Inputs are mapped from `[-1, 1]` to
/// `[0, 1]` before comparison, so the dynamic range is 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimSpec {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimSpec {
    fn default() -> Self {
        Self { window_size: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimSpec {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window_size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || !(self.sigma > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) || !(self.data_range > 0.0) {
            return Err(Error::validation("SSIM window and constants must be positive"));
        }
        Ok(())
    }
}

/// Valid-mode correlation with `taps` along `axis` as a weighted sum of
/// shifted slices. Elementwise only, so results do not depend on where a
/// value sits in the batch.
fn filter_axis(x: &Tensor, taps: &[f64], axis: usize) -> Result<Tensor> {
    let len = x.dim(axis)? + 1 - taps.len();
    let mut acc = (x.narrow(axis, 0, len)? * taps[0])?;
    for (k, &w) in taps.iter().enumerate().skip(1) {
        acc = (acc + (x.narrow(axis, k, len)? * w)?)?;
    }
    Ok(acc)
}

fn gaussian_filter(x: &Tensor, taps: &[f64]) -> Result<Tensor> {
    filter_axis(&filter_axis(x, taps, 3)?, taps, 2)
}

/// Luminance and contrast-structure factors of local SSIM for `[-1, 1]`
/// NCHW tensors. Their product is the raw (unclamped) SSIM map.
pub fn ssim_components(x: &Tensor, y: &Tensor, spec: &SsimSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    if x.dims() != y.dims() {
        return Err(Error::validation(format!("SSIM shape mismatch {:?} vs {:?}", x.dims(), y.dims())));
    }
    let (_, _, h, w) = x.dims4()?;
    if h < spec.window_size || w < spec.window_size {
        return Err(Error::validation(format!(
            "images of {h}x{w} are smaller than the {} px SSIM window",
            spec.window_size
        )));
    }
    let taps = spec.taps();
    let a = ((x + 1.0)? * 0.5)?;
    let b = ((y + 1.0)? * 0.5)?;
    let mu_a = gaussian_filter(&a, &taps)?;
    let mu_b = gaussian_filter(&b, &taps)?;
    let e_aa = gaussian_filter(&a.sqr()?, &taps)?;
    let e_bb = gaussian_filter(&b.sqr()?, &taps)?;
    let e_ab = gaussian_filter(&(&a * &b)?, &taps)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (e_aa - &mu_aa)?;
    let var_b = (e_bb - &mu_bb)?;
    let cov = (e_ab - &mu_ab)?;
    let luminance = (((mu_ab * 2.0)? + spec.c1())? / ((mu_aa + mu_bb)? + spec.c1())?)?;
    let contrast_structure = (((cov * 2.0)? + spec.c2())? / ((var_a + var_b)? + spec.c2())?)?;
    Ok((luminance, contrast_structure))
}

/// Local SSIM map, negative values floored at 0.
pub fn ssim_map(x: &Tensor, y: &Tensor, spec: &SsimSpec) -> Result<Tensor> {
    let (l, cs) = ssim_components(x, y, spec)?;
    Ok((l * cs)?.relu()?)
}

/// Per-sample SSIM in `[0, 1]`, shape `(N,)`. Differentiable in both inputs.
pub fn ssim_tensor(x: &Tensor, y: &Tensor, spec: &SsimSpec) -> Result<Tensor> {
    let map = ssim_map(x, y, spec)?;
    let n = map.dim(0)?;
    Ok(map.reshape((n, ()))?.mean(1)?.clamp(0.0, 1.0)?)
}

/// SSIM between two `[-1, 1]` images.
pub fn ssim(x: &Image, y: &Image, spec: &SsimSpec) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::validation(format!("SSIM shape mismatch {:?} vs {:?}", x.shape(), y.shape())));
    }
    let dev = Device::Cpu;
    let v = ssim_tensor(&x.to_tensor(DType::F64, &dev)?, &y.to_tensor(DType::F64, &dev)?, spec)?;
    Ok(v.to_vec1::<f64>()?[0])
}

/// Percentage of pairs whose explanation receives the mode's target class.
pub fn validity(
    clf: &TrainedClassifier,
    originals: &[Image],
    explanations: &[Image],
    mode: ExplanationMode,
) -> Result<f64> {
    if originals.len() != explanations.len() {
        return Err(Error::validation("originals and explanations differ in length"));
    }
    if originals.is_empty() {
        return Err(Error::validation("validity of an empty list is undefined"));
    }
    let orig = clf.describe_signed(originals, 32)?;
    let expl = clf.describe_signed(explanations, 32)?;
    let valid = orig
        .iter()
        .zip(&expl)
        .filter(|((po, _), (pe, _))| pe.decision() == mode.target_class(po.decision()))
        .count();
    Ok(100.0 * valid as f64 / originals.len() as f64)
}

/// One evaluated pair, without the images themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub pred_orig: [f64; 2],
    pub pred_expl: [f64; 2],
    pub ssim: f64,
    pub dist_orig: Option<f64>,
    pub dist_expl: Option<f64>,
    pub valid: bool,
}

impl SampleRecord {
    pub fn drift(&self) -> Option<f64> {
        Some((self.dist_orig? - self.dist_expl?).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: ExplanationMode,
    pub n: usize,
    pub validity_pct: f64,
    pub mean_ssim: f64,
    /// Mean `|SVM(x) - SVM(x̂)|`; absent when no surrogate was supplied.
    pub mean_boundary_drift: Option<f64>,
    pub ssim_spec: SsimSpec,
    pub records: Vec<SampleRecord>,
}

/// Aggregates `(validity %, mean SSIM, mean drift)` of a record list.
pub fn aggregate(records: &[SampleRecord]) -> (f64, f64, Option<f64>) {
    let n = records.len() as f64;
    let valid = records.iter().filter(|r| r.valid).count() as f64;
    let ssim = records.iter().map(|r| r.ssim).sum::<f64>() / n;
    let drift = records
        .iter()
        .map(SampleRecord::drift)
        .collect::<Option<Vec<_>>>()
        .map(|d| d.iter().sum::<f64>() / n);
    (100.0 * valid / n, ssim, drift)
}

impl EvaluationReport {
    pub fn from_records(mode: ExplanationMode, ssim_spec: SsimSpec, records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::validation("cannot build a report from zero records"));
        }
        let (validity_pct, mean_ssim, mean_boundary_drift) = aggregate(&records);
        Ok(Self { mode, n: records.len(), validity_pct, mean_ssim, mean_boundary_drift, ssim_spec, records })
    }

    /// `validity=96.20 ssim=0.32`
    pub fn summary_line(&self) -> String {
        format!("validity={:.2} ssim={:.2}", self.validity_pct, self.mean_ssim)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("serializable report");
        crate::io::write_atomic(path, &json)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "id", "pred_orig_0", "pred_orig_1", "pred_expl_0", "pred_expl_1", "ssim", "dist_orig", "dist_expl", "valid",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|d| d.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.id.to_string(),
                r.pred_orig[0].to_string(),
                r.pred_orig[1].to_string(),
                r.pred_expl[0].to_string(),
                r.pred_expl[1].to_string(),
                r.ssim.to_string(),
                opt(r.dist_orig),
                opt(r.dist_expl),
                r.valid.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        crate::io::write_atomic(path, &bytes)
    }
}

/// Scores `(original, explanation)` pairs. Deterministic in its inputs.
pub fn evaluate(
    clf: &TrainedClassifier,
    surrogate: Option<&HyperplaneSurrogate>,
    pairs: &[(Image, Image)],
    mode: ExplanationMode,
    spec: &SsimSpec,
) -> Result<EvaluationReport> {
    if pairs.is_empty() {
        return Err(Error::validation("no pairs to evaluate"));
    }
    if let Some(s) = surrogate {
        if s.dim() != clf.feature_dim() {
            return Err(Error::validation(format!(
                "surrogate dimension {} does not match classifier features {}",
                s.dim(),
                clf.feature_dim()
            )));
        }
    }
    let mut records = Vec::with_capacity(pairs.len());
    for (id, (x, xh)) in pairs.iter().enumerate() {
        if x.shape() != xh.shape() {
            return Err(Error::validation(format!("pair {id} has mismatched shapes")));
        }
        let d = clf.describe_signed(&[x.clone(), xh.clone()], 2)?;
        let ((po, fo), (pe, fe)) = (&d[0], &d[1]);
        let dist = |f: &[f64]| surrogate.map(|s| s.hyperplane_distance(f)).transpose();
        records.push(SampleRecord {
            id,
            pred_orig: po.0,
            pred_expl: pe.0,
            ssim: ssim(x, xh, spec)?,
            dist_orig: dist(fo)?,
            dist_expl: dist(fe)?,
            valid: pe.decision() == mode.target_class(po.decision()),
        });
    }
    EvaluationReport::from_records(mode, *spec, records)
}
