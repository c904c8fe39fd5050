//! Linear SVM surrogate of the classifier's decision boundary in
//! penultimate-feature space, and point-to-hyperplane distances.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{abs_zero_subgradient, load_tensors, save_tensors};

const CHECKPOINT_KIND: &str = "surrogate";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// Inverse regularization strength.
    pub c: f64,
    /// Cap on passes over the training data.
    pub max_iterations: usize,
    /// Stop once the projected-gradient spread drops below this.
    pub tolerance: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 10.0, max_iterations: 5000, tolerance: 1e-4, holdout_fraction: 0.1, seed: 0 }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) || self.max_iterations == 0 {
            return Err(Error::validation("svm C and max_iterations must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::validation("svm holdout fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-dimension `(x - mean) / std` fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Zero-variance dimensions get `std = 1`.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Agreement with the classifier's decisions on the held-out slice;
    /// absent when the slice is empty.
    pub holdout_agreement: Option<f64>,
    pub holdout_size: usize,
    pub train_size: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// `f(x) = w · standardize(x) + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperplaneSurrogate {
    pub w: Vec<f64>,
    pub b: f64,
    pub standardizer: Standardizer,
    pub fit_report: Option<FitReport>,
}

impl HyperplaneSurrogate {
    pub fn new(w: Vec<f64>, b: f64, standardizer: Standardizer) -> Result<Self> {
        if standardizer.mean.len() != w.len() || standardizer.std.len() != w.len() {
            return Err(Error::validation("standardizer and weight dimensions differ"));
        }
        if standardizer.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation("standardizer std components must be positive"));
        }
        if norm(&w) == 0.0 {
            return Err(Error::DegenerateFit("weight vector is zero".into()));
        }
        Ok(Self { w, b, standardizer, fit_report: None })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn weight_norm(&self) -> f64 {
        norm(&self.w)
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.w.len() {
            return Err(Error::validation(format!(
                "feature dimension {n} does not match surrogate dimension {}",
                self.w.len()
            )));
        }
        Ok(())
    }

    /// Signed decision value `w · z + b` on the standardized feature.
    pub fn decision_value(&self, feature: &[f64]) -> Result<f64> {
        self.check_dim(feature.len())?;
        let z = self.standardizer.apply(feature);
        Ok(dot(&self.w, &z) + self.b)
    }

    /// Class 1 on the non-negative side of the hyperplane.
    pub fn predict(&self, feature: &[f64]) -> Result<u8> {
        Ok(u8::from(self.decision_value(feature)? >= 0.0))
    }

    /// `|w · z + b| / ||w||`.
    pub fn hyperplane_distance(&self, feature: &[f64]) -> Result<f64> {
        Ok(self.decision_value(feature)?.abs() / self.weight_norm())
    }

    /// Batched distance for an `(N, F)` feature tensor, differentiable with
    /// respect to the features (subgradient 0 on the hyperplane).
    pub fn distance_tensor(&self, features: &Tensor) -> Result<Tensor> {
        let (_, f) = features.dims2()?;
        self.check_dim(f)?;
        let (dtype, dev) = (features.dtype(), features.device());
        let row = |v: &[f64]| -> Result<Tensor> { Ok(Tensor::from_slice(v, (1, f), dev)?.to_dtype(dtype)?) };
        let z = features.broadcast_sub(&row(&self.standardizer.mean)?)?.broadcast_div(&row(&self.standardizer.std)?)?;
        let w = Tensor::from_slice(&self.w, (f, 1), dev)?.to_dtype(dtype)?;
        let value = (z.matmul(&w)?.squeeze(1)? + self.b)?;
        Ok((abs_zero_subgradient(&value)? / self.weight_norm())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dev = Device::Cpu;
        let d = self.w.len();
        let tensors = BTreeMap::from([
            ("w".to_string(), Tensor::from_slice(&self.w, d, &dev)?),
            ("b".to_string(), Tensor::new(&[self.b], &dev)?),
            ("mean".to_string(), Tensor::from_slice(&self.standardizer.mean, d, &dev)?),
            ("std".to_string(), Tensor::from_slice(&self.standardizer.std, d, &dev)?),
        ]);
        let mut meta = HashMap::from([("kind".to_string(), CHECKPOINT_KIND.to_string())]);
        if let Some(r) = &self.fit_report {
            meta.insert("fit_report".into(), serde_json::to_string(r).expect("serializable"));
        }
        save_tensors(path, &tensors, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = load_tensors(path, &Device::Cpu)?;
        if meta.get("kind").map(String::as_str) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint(format!("{} is not a surrogate file", path.display())));
        }
        let vec = |k: &str| -> Result<Vec<f64>> {
            let t = tensors.get(k).ok_or_else(|| Error::Checkpoint(format!("surrogate missing `{k}`")))?;
            Ok(t.to_dtype(DType::F64)?.to_vec1()?)
        };
        let b = vec("b")?.first().copied().ok_or_else(|| Error::Checkpoint("empty bias".into()))?;
        let mut s = Self::new(vec("w")?, b, Standardizer { mean: vec("mean")?, std: vec("std")? })?;
        s.fit_report = meta
            .get("fit_report")
            .map(|r| serde_json::from_str(r))
            .transpose()
            .map_err(|e| Error::Checkpoint(format!("bad fit report: {e}")))?;
        Ok(s)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Fits a hinge-loss, L2-regularized linear SVM to the classifier's decisions.
///
/// Features are standardized first. A seeded `holdout_fraction` slice is kept
/// out of fitting and used only for the agreement report. The solver is dual
/// coordinate descent with the bias folded in as a constant feature; each
/// iteration is one randomly ordered pass over the data.
pub fn fit_surrogate(features: &[Vec<f64>], decisions: &[u8], cfg: &SvmConfig) -> Result<HyperplaneSurrogate> {
    cfg.validate()?;
    if features.len() != decisions.len() {
        return Err(Error::validation("features and decisions differ in length"));
    }
    if features.len() < 2 {
        return Err(Error::DegenerateFit("need at least two samples".into()));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::validation("feature rows must share a positive dimension"));
    }
    if decisions.iter().any(|&d| d > 1) {
        return Err(Error::validation("decisions must be binary"));
    }
    if decisions.iter().all(|&d| d == decisions[0]) {
        return Err(Error::DegenerateFit("all decisions belong to one class".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng);
    let holdout_len = ((features.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let (holdout, fit_idx) = order.split_at(holdout_len);
    let fit_rows: Vec<Vec<f64>> = fit_idx.iter().map(|&i| features[i].clone()).collect();
    let fit_labels: Vec<u8> = fit_idx.iter().map(|&i| decisions[i]).collect();
    if fit_labels.iter().all(|&d| d == fit_labels[0]) {
        return Err(Error::DegenerateFit("fitting slice contains a single class".into()));
    }

    let standardizer = Standardizer::fit(&fit_rows);
    let z: Vec<Vec<f64>> = fit_rows.iter().map(|r| standardizer.apply(r)).collect();
    let y: Vec<f64> = fit_labels.iter().map(|&d| if d == 1 { 1.0 } else { -1.0 }).collect();
    let (w_aug, iterations, converged) = dual_coordinate_descent(&z, &y, cfg, &mut rng);
    if !converged {
        log::warn!("svm stopped at the {iterations}-iteration cap before converging");
    }
    let b = w_aug[dim];
    let mut surrogate = HyperplaneSurrogate::new(w_aug[..dim].to_vec(), b, standardizer)?;

    let agreement = if holdout.is_empty() {
        None
    } else {
        let hits = holdout
            .iter()
            .filter(|&&i| surrogate.predict(&features[i]).map(|p| p == decisions[i]).unwrap_or(false))
            .count();
        Some(hits as f64 / holdout.len() as f64)
    };
    surrogate.fit_report = Some(FitReport {
        holdout_agreement: agreement,
        holdout_size: holdout.len(),
        train_size: fit_idx.len(),
        iterations,
        converged,
    });
    Ok(surrogate)
}

/// Solves `min ½||w||² + C Σ max(0, 1 - yᵢ w·xᵢ)` over augmented `xᵢ = (zᵢ, 1)`.
/// Returns `(w_aug, passes, converged)`.
fn dual_coordinate_descent(z: &[Vec<f64>], y: &[f64], cfg: &SvmConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, bool) {
    let dim = z[0].len();
    let n = z.len();
    let mut w = vec![0.0; dim + 1];
    let mut alpha = vec![0.0; n];
    let q: Vec<f64> = z.iter().map(|r| dot(r, r) + 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let aug_dot = |w: &[f64], r: &[f64]| dot(&w[..dim], r) + w[dim];

    for pass in 1..=cfg.max_iterations {
        order.shuffle(rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let g = y[i] * aug_dot(&w, &z[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, cfg.c);
                let step = (alpha[i] - old) * y[i];
                for (wj, zj) in w[..dim].iter_mut().zip(&z[i]) {
                    *wj += step * zj;
                }
                w[dim] += step;
            }
        }
        if pg_max - pg_min < cfg.tolerance {
            return (w, pass, true);
        }
    }
    (w, cfg.max_iterations, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn analytic_distance() {
        let s = HyperplaneSurrogate::new(vec![3.0, 4.0], 0.0, Standardizer::identity(2)).unwrap();
        assert!((s.hyperplane_distance(&[1.0, 1.0]).unwrap() - 1.4).abs() < 1e-9);
        assert_eq!(s.hyperplane_distance(&[4.0, -3.0]).unwrap(), 0.0);
        assert!(matches!(s.hyperplane_distance(&[1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_weight_rejected() {
        assert!(HyperplaneSurrogate::new(vec![0.0, 0.0], 1.0, Standardizer::identity(2)).is_err());
    }

    #[test]
    fn separates_axis_aligned_toy_data() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..100 {
            feats.push(vec![0.0, 1.0]);
            labels.push(1);
            feats.push(vec![0.0, -1.0]);
            labels.push(0);
        }
        let s = fit_surrogate(&feats, &labels, &SvmConfig::default()).unwrap();
        assert!(s.w[1].abs() > 100.0 * s.w[0].abs().max(1e-12), "w = {:?}", s.w);
        assert_eq!(s.predict(&[0.0, 1.0]).unwrap(), 1);
        assert_eq!(s.predict(&[0.0, -1.0]).unwrap(), 0);
        // Constant first dimension.
        assert_eq!(s.standardizer.std[0], 1.0);
        let report = s.fit_report.unwrap();
        assert_eq!(report.holdout_agreement, Some(1.0));
        assert_eq!(report.holdout_size, 20);
    }

    #[test]
    fn single_class_is_degenerate() {
        let feats = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert!(matches!(fit_surrogate(&feats, &[1, 1, 1], &SvmConfig::default()), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn fits_noisy_linear_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = [1.5, -2.0, 0.5, 0.0];
        let feats: Vec<Vec<f64>> = (0..600).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0) * 2.0 + 7.0).collect()).collect();
        let labels: Vec<u8> = feats.iter().map(|f| u8::from(dot(&truth, &f.iter().map(|v| v - 7.0).collect::<Vec<_>>()) > 0.3)).collect();
        let s = fit_surrogate(&feats, &labels, &SvmConfig::default()).unwrap();
        assert!(s.fit_report.unwrap().holdout_agreement.unwrap() >= 0.95, "{:?}", s.fit_report);
    }

    #[test]
    fn tensor_distance_matches_scalar_path() {
        let s = HyperplaneSurrogate::new(
            vec![0.5, -1.0, 2.0],
            0.25,
            Standardizer { mean: vec![1.0, 0.0, -1.0], std: vec![2.0, 1.0, 0.5] },
        )
        .unwrap();
        let rows = [[0.3, 1.2, -0.7], [4.0, -2.0, 1.0]];
        let t = Tensor::new(&rows, &Device::Cpu).unwrap();
        let d = s.distance_tensor(&t).unwrap().to_vec1::<f64>().unwrap();
        for (r, v) in rows.iter().zip(d) {
            assert!((s.hyperplane_distance(r).unwrap() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let mut s = HyperplaneSurrogate::new(vec![1.0, 2.0], -0.5, Standardizer { mean: vec![0.1, 0.2], std: vec![1.5, 2.5] }).unwrap();
        s.fit_report = Some(FitReport { holdout_agreement: Some(0.97), holdout_size: 10, train_size: 90, iterations: 12, converged: true });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("surrogate.bin");
        s.save(&path).unwrap();
        assert_eq!(HyperplaneSurrogate::load(&path).unwrap(), s);
    }

    /// Independently coded `|w·x + b| / sqrt(Σ w²)`.
    fn oracle(w: &[f64], b: f64, x: &[f64]) -> f64 {
        let mut num = b;
        let mut sq = 0.0;
        for i in 0..w.len() {
            num += w[i] * x[i];
            sq += w[i] * w[i];
        }
        num.abs() / sq.sqrt()
    }

    fn triple() -> impl Strategy<Value = (Vec<f64>, f64, Vec<f64>)> {
        (1usize..16).prop_flat_map(|d| {
            (
                prop::collection::vec(-10.0f64..10.0, d).prop_filter("nonzero w", |w| w.iter().any(|v| v.abs() > 1e-3)),
                -10.0f64..10.0,
                prop::collection::vec(-10.0f64..10.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn distance_matches_oracle_and_is_nonnegative((w, b, x) in triple()) {
            let s = HyperplaneSurrogate::new(w.clone(), b, Standardizer::identity(w.len())).unwrap();
            let d = s.hyperplane_distance(&x).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!((d - oracle(&w, b, &x)).abs() <= 1e-9);
        }

        #[test]
        fn positive_rescaling_leaves_distance_unchanged((w, b, x) in triple(), c in 0.01f64..100.0) {
            let s = HyperplaneSurrogate::new(w.clone(), b, Standardizer::identity(w.len())).unwrap();
            let scaled = HyperplaneSurrogate::new(w.iter().map(|v| v * c).collect(), b * c, Standardizer::identity(w.len())).unwrap();
            let (a, bb) = (s.hyperplane_distance(&x).unwrap(), scaled.hyperplane_distance(&x).unwrap());
            prop_assert!((a - bb).abs() <= 1e-9);
        }

        #[test]
        fn sign_agrees_with_prediction((w, b, x) in triple()) {
            let s = HyperplaneSurrogate::new(w.clone(), b, Standardizer::identity(w.len())).unwrap();
            let v = s.decision_value(&x).unwrap();
            prop_assert_eq!(s.predict(&x).unwrap(), u8::from(v >= 0.0));
        }
    }
}
