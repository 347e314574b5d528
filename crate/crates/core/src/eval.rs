//! Slide-level aggregation, confusion metrics, cross-validation folds and
//! Fréchet distance between feature distributions.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{data_err, dim_err, param_err, Result};
use crate::rng::Rng;
use crate::vit::PatchPrediction;

pub const MALIGNANT: u8 = 1;
pub const BENIGN: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct WsiPrediction {
    pub wsi_id: String,
    pub patch_fraction_malignant: f64,
    pub threshold: f64,
    pub label: u8,
}

/// Slide label from the fraction of malignant patch predictions, using a
/// strict `fraction > threshold` rule.
pub fn aggregate_wsi(wsi_id: &str, preds: &[PatchPrediction], threshold: f64) -> Result<WsiPrediction> {
    if preds.is_empty() {
        return Err(data_err!("slide {wsi_id} has no patch predictions"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(param_err!("threshold {threshold} outside [0, 1]"));
    }
    if let Some(p) = preds.iter().find(|p| p.wsi_id != wsi_id) {
        return Err(data_err!("patch {} belongs to {}, not {wsi_id}", p.patch_id, p.wsi_id));
    }
    let malignant = preds.iter().filter(|p| p.label == MALIGNANT).count();
    let fraction = malignant as f64 / preds.len() as f64;
    Ok(WsiPrediction {
        wsi_id: wsi_id.to_string(),
        patch_fraction_malignant: fraction,
        threshold,
        label: u8::from(fraction > threshold),
    })
}

/// Group patch predictions by slide and aggregate each, in slide-id order.
pub fn aggregate_all(preds: &[PatchPrediction], threshold: f64) -> Result<Vec<WsiPrediction>> {
    let mut by_wsi: BTreeMap<&str, Vec<PatchPrediction>> = BTreeMap::new();
    for p in preds {
        by_wsi.entry(p.wsi_id.as_str()).or_default().push(p.clone());
    }
    by_wsi.into_iter().map(|(id, ps)| aggregate_wsi(id, &ps, threshold)).collect()
}

/// Binary confusion counts with malignant as the positive class.
/// Sensitivity or specificity is `None` when its denominator is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl Metrics {
    pub fn from_counts(tp: usize, fn_: usize, tn: usize, fp: usize) -> Self {
        let total = tp + fn_ + tn + fp;
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            tp,
            fn_,
            tn,
            fp,
            accuracy: ratio(tp + tn, total).unwrap_or(f64::NAN),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }
}

pub fn confusion_metrics(preds: &[WsiPrediction], truth: &BTreeMap<String, u8>) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(data_err!("no slide predictions to score"));
    }
    let ids: BTreeSet<&str> = preds.iter().map(|p| p.wsi_id.as_str()).collect();
    if ids.len() != preds.len() || ids.len() != truth.len() || !truth.keys().all(|k| ids.contains(k.as_str())) {
        return Err(data_err!("prediction ids and ground-truth ids are not aligned"));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for p in preds {
        match (truth[&p.wsi_id], p.label) {
            (MALIGNANT, MALIGNANT) => tp += 1,
            (MALIGNANT, _) => fn_ += 1,
            (_, MALIGNANT) => fp += 1,
            _ => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fn_, tn, fp))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub test_wsi_ids: Vec<String>,
    pub train_wsi_ids: Vec<String>,
    pub val_wsi_ids: Vec<String>,
}

/// Stratified `k`-fold split at slide level. Each fold's remaining slides
/// are divided into train and validation, also stratified.
pub fn make_folds(wsi_ids: &[String], labels: &[u8], k: usize, val_fraction: f64, rng: &mut Rng) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(param_err!("need at least 2 folds, got {k}"));
    }
    if wsi_ids.len() != labels.len() {
        return Err(dim_err!("{} ids vs {} labels", wsi_ids.len(), labels.len()));
    }
    if wsi_ids.iter().collect::<BTreeSet<_>>().len() != wsi_ids.len() {
        return Err(data_err!("duplicate slide ids"));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(param_err!("validation fraction {val_fraction} outside [0, 1)"));
    }
    let classes = by_class(wsi_ids, labels);
    for (label, ids) in &classes {
        if ids.len() < k {
            return Err(data_err!("class {label} has {} slides, fewer than {k} folds", ids.len()));
        }
    }
    let mut test: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut slot = 0;
    for ids in classes.values() {
        let mut ids = ids.clone();
        rng.shuffle(&mut ids);
        for id in ids {
            test[slot % k].push(id);
            slot += 1;
        }
    }
    let label_of: BTreeMap<&String, u8> = wsi_ids.iter().zip(labels.iter().copied()).collect();
    let mut folds = Vec::with_capacity(k);
    for (fold_index, mut test_ids) in test.into_iter().enumerate() {
        test_ids.sort();
        let held: BTreeSet<&String> = test_ids.iter().collect();
        let rest: Vec<String> = wsi_ids.iter().filter(|id| !held.contains(id)).cloned().collect();
        let rest_labels: Vec<u8> = rest.iter().map(|id| label_of[id]).collect();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for ids in by_class(&rest, &rest_labels).into_values() {
            let mut ids = ids;
            rng.shuffle(&mut ids);
            let n_val = ((ids.len() as f64 * val_fraction).round() as usize).min(ids.len().saturating_sub(1));
            val.extend(ids.drain(..n_val));
            train.extend(ids);
        }
        train.sort();
        val.sort();
        folds.push(FoldSplit { fold_index, test_wsi_ids: test_ids, train_wsi_ids: train, val_wsi_ids: val });
    }
    Ok(folds)
}

fn by_class(ids: &[String], labels: &[u8]) -> BTreeMap<u8, Vec<String>> {
    let mut m: BTreeMap<u8, Vec<String>> = BTreeMap::new();
    for (id, &l) in ids.iter().zip(labels) {
        m.entry(l).or_default().push(id.clone());
    }
    for v in m.values_mut() {
        v.sort();
    }
    m
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn feature_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let d = features.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(data_err!("no features"));
    }
    if features.len() < d + 1 {
        return Err(data_err!("{} samples is too few for {d}-dimensional covariance", features.len()));
    }
    if features.iter().any(|f| f.len() != d) {
        return Err(dim_err!("ragged feature rows"));
    }
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

/// Square root of a symmetric PSD matrix, clamping negative eigenvalues.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, clamped at zero.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(dim_err!("feature widths {} vs {}", a.dim(), b.dim()));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}
