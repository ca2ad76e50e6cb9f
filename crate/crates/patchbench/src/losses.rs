//! The composite optimization objective: smoothness, validity, and the
//! per-architecture target losses, combined as a weighted sum.

use ndarray::{Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::patch::LossWeights;
use crate::Image;

/// Differentiability offset inside the total-variation square root.
pub const TV_EPS: f64 = 1e-8;

/// Per-term breakdown of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_v: f64,
    pub l_m: f64,
    pub total: f64,
}

/// Anisotropic total variation, averaged over channels and positions.
///
/// Forward differences with edge replication; each difference contributes
/// `sqrt(d^2 + eps) - sqrt(eps)` so a constant patch scores exactly zero.
pub fn smoothness_loss(pixels: &Image) -> Result<f64> {
    let (h, w, c) = dims(pixels);
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "smoothness loss needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    let sqrt_eps = TV_EPS.sqrt();
    let mut sum = 0.0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = pixels[[i, j, ch]];
                let dv = if i + 1 < h { pixels[[i + 1, j, ch]] - v } else { 0.0 };
                let dh = if j + 1 < w { pixels[[i, j + 1, ch]] - v } else { 0.0 };
                sum += (dv * dv + TV_EPS).sqrt() - sqrt_eps;
                sum += (dh * dh + TV_EPS).sqrt() - sqrt_eps;
            }
        }
    }
    Ok(sum / (h * w * c) as f64)
}

/// Gradient of [`smoothness_loss`] with respect to the pixels.
pub fn smoothness_loss_grad(pixels: &Image) -> Result<Image> {
    let (h, w, c) = dims(pixels);
    if h < 2 || w < 2 {
        return Err(Error::invalid("smoothness loss needs at least 2x2 pixels"));
    }
    let norm = 1.0 / (h * w * c) as f64;
    let mut grad = Array3::zeros(pixels.raw_dim());
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = pixels[[i, j, ch]];
                if i + 1 < h {
                    let d = pixels[[i + 1, j, ch]] - v;
                    let g = norm * d / (d * d + TV_EPS).sqrt();
                    grad[[i + 1, j, ch]] += g;
                    grad[[i, j, ch]] -= g;
                }
                if j + 1 < w {
                    let d = pixels[[i, j + 1, ch]] - v;
                    let g = norm * d / (d * d + TV_EPS).sqrt();
                    grad[[i, j + 1, ch]] += g;
                    grad[[i, j, ch]] -= g;
                }
            }
        }
    }
    Ok(grad)
}

/// Quadratic hinge outside [0, 1], summed over pixels. Zero iff all pixels
/// are in the displayable range.
pub fn validity_loss(pixels: &Image) -> f64 {
    pixels
        .iter()
        .map(|&v| {
            let over = (v - 1.0).max(0.0);
            let under = (-v).max(0.0);
            over * over + under * under
        })
        .sum()
}

/// Gradient of [`validity_loss`] with respect to the pixels.
pub fn validity_loss_grad(pixels: &Image) -> Image {
    pixels.mapv(|v| 2.0 * (v - 1.0).max(0.0) - 2.0 * (-v).max(0.0))
}

/// Objectness-head target loss: maximum pre-sigmoid objectness logit.
pub fn target_loss_objectness(logits: &[f64]) -> Result<f64> {
    max_of(logits.iter().copied(), "objectness logits")
}

/// Class-score target loss: maximum pre-sigmoid class logit over all
/// candidates, optionally restricted to a single class column.
pub fn target_loss_classmax(logits: ArrayView2<'_, f64>, class_only: Option<usize>) -> Result<f64> {
    match class_only {
        Some(c) => {
            if c >= logits.ncols() {
                return Err(Error::invalid(format!(
                    "class index {c} out of range for {} classes",
                    logits.ncols()
                )));
            }
            max_of(logits.column(c).iter().copied(), "class logits")
        }
        None => max_of(logits.iter().copied(), "class logits"),
    }
}

/// Dual-head target loss: sum of the per-head maxima.
pub fn target_loss_dualhead(one2many: &[f64], one2one: &[f64]) -> Result<f64> {
    let a = max_of(one2many.iter().copied(), "one2many logits")?;
    let b = max_of(one2one.iter().copied(), "one2one logits")?;
    Ok(a + b)
}

/// Combine the three loss terms per the composite objective.
pub fn total_loss(l_s: f64, l_v: f64, l_m: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_s,
        l_v,
        l_m,
        total: weights.lambda_s * l_s + weights.lambda_v * l_v + weights.lambda_m * l_m,
    }
}

fn max_of(iter: impl Iterator<Item = f64>, what: &str) -> Result<f64> {
    iter.fold(None, |acc: Option<f64>, v| {
        Some(acc.map_or(v, |a| a.max(v)))
    })
    .ok_or_else(|| Error::invalid(format!("empty {what}")))
}

fn dims(pixels: &Image) -> (usize, usize, usize) {
    let s = pixels.shape();
    (s[0], s[1], s[2])
}
