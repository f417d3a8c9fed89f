//! Deterministic heatmap rendering to binary PPM.
//!
//! Attributions are normalized symmetrically by their maximum absolute value
//! and mapped onto a diverging blue-white-red colormap: negative values fade
//! to blue, positive to red, zero is white. PPM (P6) keeps golden-file tests
//! bit-exact without any codec dependency.

use serde::Serialize;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("heatmap rendering supports rank 1, 2 or 3 attributions, got shape {0:?}")]
    UnsupportedRank(Vec<usize>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    BlueWhiteRed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// v -> v / max|v|, mapping the attribution onto [-1, 1]. An all-zero
    /// attribution renders all-white instead of dividing by zero.
    #[default]
    MaxAbsSymmetric,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct HeatmapSpec {
    pub colormap: Colormap,
    pub normalization: Normalization,
}

fn channel(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Renders an attribution as a binary PPM (P6, maxval 255).
///
/// Rank-3 attributions are summed over channels, rank-1 renders as a 1-pixel
/// high strip.
pub fn render_heatmap(attr: &Tensor, spec: &HeatmapSpec) -> Result<Vec<u8>, HeatmapError> {
    let HeatmapSpec {
        colormap: Colormap::BlueWhiteRed,
        normalization: Normalization::MaxAbsSymmetric,
    } = *spec;
    let (h, w, plane) = match attr.shape() {
        [n] => (1, *n, attr.data().to_vec()),
        [h, w] => (*h, *w, attr.data().to_vec()),
        [c, h, w] => {
            let mut plane = vec![0.0; h * w];
            for ch in 0..*c {
                for (i, slot) in plane.iter_mut().enumerate() {
                    *slot += attr.at(ch * h * w + i);
                }
            }
            (*h, *w, plane)
        }
        other => return Err(HeatmapError::UnsupportedRank(other.to_vec())),
    };
    let max_abs = plane.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane.len());
    for &value in &plane {
        let v = if max_abs > 0.0 { value / max_abs } else { 0.0 };
        let (r, g, b) = if v >= 0.0 {
            let fade = channel(1.0 - v);
            (255, fade, fade)
        } else {
            let fade = channel(1.0 + v);
            (fade, fade, 255)
        };
        out.push(r);
        out.push(g);
        out.push(b);
    }
    Ok(out)
}
