use super::{FeatureKind, FeatureMatrix};
use crate::numerics::Vector;

/// Threshold = mean energy − margin · std of the per-frame energy proxy.
pub const DEFAULT_VAD_MARGIN: f64 = 0.5;

const CMVN_VARIANCE_FLOOR: f64 = 1e-10;

/// Per-frame log-energy proxy: c0 for MFCC, mean log power for LPMS.
pub fn energy_proxy(feat: &FeatureMatrix) -> Vec<f64> {
    match feat.kind {
        FeatureKind::Mfcc => feat.values.row(0).iter().copied().collect(),
        FeatureKind::Lpms => feat
            .values
            .column_iter()
            .map(|c| c.mean())
            .collect(),
    }
}

/// Energy-threshold voice activity mask. Never returns an all-false mask.
pub fn energy_vad(feat: &FeatureMatrix, margin: f64) -> Vec<bool> {
    let energy = energy_proxy(feat);
    let n = energy.len() as f64;
    if energy.is_empty() {
        return Vec::new();
    }
    let mean = energy.iter().sum::<f64>() / n;
    let std = (energy.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n).sqrt();
    let threshold = mean - margin * std;
    let mask: Vec<bool> = energy.iter().map(|&e| e > threshold).collect();
    if mask.iter().any(|&k| k) {
        mask
    } else {
        vec![true; energy.len()]
    }
}

/// Per-dimension mean and standard deviation over retained frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Vector,
    pub std: Vector,
}

impl CmvnStats {
    pub fn apply(&self, feat: &FeatureMatrix) -> FeatureMatrix {
        let mut values = feat.values.clone();
        for (d, mut row) in values.row_iter_mut().enumerate() {
            let (m, s) = (self.mean[d], self.std[d]);
            row.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        feat.with_values(values)
    }
}

pub fn cmvn_stats(feat: &FeatureMatrix) -> CmvnStats {
    let kept = feat.retained_frames();
    let n = kept.len().max(1) as f64;
    let dim = feat.dim();
    let mut mean = Vector::zeros(dim);
    let mut std = Vector::from_element(dim, 1.0);
    for d in 0..dim {
        let row = feat.values.row(d);
        let mut m = kept.iter().map(|&t| row[t]).sum::<f64>() / n;
        // second pass removes rounding drift so constant rows centre to exactly zero
        m += kept.iter().map(|&t| row[t] - m).sum::<f64>() / n;
        mean[d] = m;
        if kept.len() >= 2 {
            let var = kept.iter().map(|&t| (row[t] - m) * (row[t] - m)).sum::<f64>() / n;
            std[d] = var.max(CMVN_VARIANCE_FLOOR).sqrt();
        }
    }
    CmvnStats { mean, std }
}

/// Mean and variance normalisation per dimension, using retained frames for
/// the statistics. A single retained frame gets mean normalisation only.
pub fn apply_cmvn(feat: &FeatureMatrix) -> FeatureMatrix {
    cmvn_stats(feat).apply(feat)
}
