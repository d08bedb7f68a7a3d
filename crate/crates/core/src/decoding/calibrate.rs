use crate::backends::{VisualEmbedding, WordDistribution};
use crate::error::{Error, Result};

use super::CalibrationMode;

/// Cosine similarity of two unit embeddings, clamped to `[0, 1]`.
///
/// Negative similarities are clamped so a dissimilar distractor never
/// boosts the words it favors.
pub fn similarity(a: &VisualEmbedding, b: &VisualEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(0.0, 1.0))
}

/// Per-distractor weights applied to the other patches' distributions.
///
/// Average mode gives `s_j / n`; weighted mode gives `s_j / sum(s)`, falling
/// back to average mode when every similarity is zero.
pub fn calibration_weights(sims: &[f64], mode: CalibrationMode) -> Vec<f64> {
    let n = sims.len() as f64;
    let total: f64 = sims.iter().sum();
    match mode {
        CalibrationMode::Weighted if total > 0.0 => sims.iter().map(|s| s / total).collect(),
        _ => sims.iter().map(|s| s / n).collect(),
    }
}

/// `softmax(v / temperature)`, shifted by the max for stability.
pub fn softmax_with_temperature(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Suppress words that other, similar patches also find likely.
///
/// Returns `softmax_T(P_target - sum_j w_j P_j)` with weights from
/// [`calibration_weights`]. With no other patches this is `softmax_T(P_target)`.
pub fn calibrate(
    target: &WordDistribution,
    others: &[WordDistribution],
    sims: &[f64],
    temperature: f64,
    mode: CalibrationMode,
) -> Result<WordDistribution> {
    if others.len() != sims.len() {
        return Err(Error::Shape(format!(
            "{} distractor distributions but {} similarities",
            others.len(),
            sims.len()
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Usage(format!("temperature must be > 0, got {temperature}")));
    }
    if let Some(bad) = others.iter().find(|d| d.len() != target.len()) {
        return Err(Error::Shape(format!(
            "distractor distribution has {} entries, target has {}",
            bad.len(),
            target.len()
        )));
    }

    let mut adjusted = target.probs().to_vec();
    for (dist, w) in others.iter().zip(calibration_weights(sims, mode)) {
        if w == 0.0 {
            continue;
        }
        for (a, p) in adjusted.iter_mut().zip(dist.probs()) {
            *a -= w * p;
        }
    }
    WordDistribution::new(softmax_with_temperature(&adjusted, temperature))
}
