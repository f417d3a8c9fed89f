//! Perturbation analysis: degrade the most-relevant input regions and watch
//! the selected logit decay.
//!
//! The input grid is partitioned into non-overlapping tiles (regions). The
//! regions are ranked by the sum of attribution inside them, then replaced
//! one after another by a constant, re-running the forward pass after each
//! step. A method that ranks truly important regions first produces a curve
//! that drops early, which the AOPC score rewards.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::analyzers::Attribution;
use crate::forward::forward;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("region {region_h}x{region_w} does not tile input of shape {input:?}")]
    RegionTiling {
        input: Vec<usize>,
        region_h: usize,
        region_w: usize,
    },
    #[error("steps {steps} out of range: input has {regions} regions")]
    StepsOutOfRange { steps: usize, regions: usize },
    #[error("attribution shape {got:?} does not match input shape {expected:?}")]
    AttributionShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("per-channel value has {got} entries, input has {expected} channels")]
    ValueChannels { expected: usize, got: usize },
    #[error(transparent)]
    Forward(#[from] crate::forward::ForwardError),
}

/// Which constant replaces perturbed cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbValue {
    Scalar(f64),
    /// One replacement value per input channel (rank-3 inputs only).
    PerChannel(Vec<f64>),
}

impl Default for PerturbValue {
    fn default() -> Self {
        PerturbValue::Scalar(0.0)
    }
}

/// Order in which regions are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbOrder {
    /// By region attribution sum, descending; ties go to the lower region
    /// index.
    DescendingAttribution,
    /// A seeded random permutation, as a baseline.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationConfig {
    /// Tile height (1 for flat inputs).
    pub region_h: usize,
    /// Tile width (1 for flat inputs).
    pub region_w: usize,
    /// Number of regions to perturb (K).
    pub steps: usize,
    pub value: PerturbValue,
    pub order: PerturbOrder,
}

/// Selected-unit logit after 0..K perturbations, plus the AOPC summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationCurve {
    pub scores: Vec<f64>,
    pub aopc: f64,
}

/// Area over the perturbation curve: mean drop of the selected logit,
/// `(1/K) * sum_k (scores[0] - scores[k])`.
pub fn aopc(scores: &[f64]) -> f64 {
    assert!(scores.len() >= 2, "aopc needs at least one perturbation step");
    let k = scores.len() - 1;
    let drops: Vec<f64> = scores[1..].iter().map(|&s| scores[0] - s).collect();
    crate::tensor::compensated_sum(&drops) / k as f64
}

/// The non-overlapping tiling of an input shape, row-major over tiles.
/// Rank-1 inputs use single-element regions; rank-3 tiles span all channels.
pub(crate) struct RegionGrid {
    shape: Vec<usize>,
    region_h: usize,
    region_w: usize,
    tiles_y: usize,
    tiles_x: usize,
}

impl RegionGrid {
    pub fn new(shape: &[usize], region_h: usize, region_w: usize) -> Result<Self, EvalError> {
        let bad = || EvalError::RegionTiling {
            input: shape.to_vec(),
            region_h,
            region_w,
        };
        let (h, w) = match shape {
            [n] => {
                if region_h != 1 {
                    return Err(bad());
                }
                (1, *n)
            }
            [h, w] => (*h, *w),
            [_, h, w] => (*h, *w),
            _ => return Err(bad()),
        };
        if region_h == 0 || region_w == 0 || h % region_h != 0 || w % region_w != 0 {
            return Err(bad());
        }
        Ok(Self {
            shape: shape.to_vec(),
            region_h,
            region_w,
            tiles_y: h / region_h,
            tiles_x: w / region_w,
        })
    }

    pub fn len(&self) -> usize {
        self.tiles_y * self.tiles_x
    }

    pub fn channels(&self) -> usize {
        match self.shape.as_slice() {
            [c, _, _] => *c,
            _ => 1,
        }
    }

    /// Flat input indices of region `r`, together with the channel of each.
    pub fn cells(&self, r: usize) -> Vec<(usize, usize)> {
        let (ty, tx) = (r / self.tiles_x, r % self.tiles_x);
        let (h, w, channels) = match self.shape.as_slice() {
            [n] => (1, *n, 1),
            [h, w] => (*h, *w, 1),
            [c, h, w] => (*h, *w, *c),
            _ => unreachable!("validated in new"),
        };
        let mut out = Vec::with_capacity(channels * self.region_h * self.region_w);
        for c in 0..channels {
            for dy in 0..self.region_h {
                for dx in 0..self.region_w {
                    let y = ty * self.region_h + dy;
                    let x = tx * self.region_w + dx;
                    out.push(((c * h + y) * w + x, c));
                }
            }
        }
        out
    }
}

/// Ranks regions per the config order. Descending ranks by attribution sum
/// with ties to the lower region index; random is a seeded permutation.
pub(crate) fn region_order(
    grid: &RegionGrid,
    attr: &Tensor,
    order: PerturbOrder,
) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..grid.len()).collect();
    match order {
        PerturbOrder::DescendingAttribution => {
            let scores: Vec<f64> = indices
                .iter()
                .map(|&r| {
                    let vals: Vec<f64> =
                        grid.cells(r).iter().map(|&(i, _)| attr.at(i)).collect();
                    crate::tensor::compensated_sum(&vals)
                })
                .collect();
            indices.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
        }
        PerturbOrder::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            indices.shuffle(&mut rng);
        }
    }
    indices
}

/// Cumulatively replaces ranked regions with the configured value, recording
/// the selected-unit logit after each step (scores[0] is unperturbed).
pub fn perturbation_curve(
    model: &Model,
    x: &Tensor,
    attr: &Attribution,
    cfg: &PerturbationConfig,
) -> Result<PerturbationCurve, EvalError> {
    if attr.values.shape() != x.shape() {
        return Err(EvalError::AttributionShape {
            expected: x.shape().to_vec(),
            got: attr.values.shape().to_vec(),
        });
    }
    let grid = RegionGrid::new(x.shape(), cfg.region_h, cfg.region_w)?;
    if cfg.steps < 1 || cfg.steps > grid.len() {
        return Err(EvalError::StepsOutOfRange {
            steps: cfg.steps,
            regions: grid.len(),
        });
    }
    if let PerturbValue::PerChannel(values) = &cfg.value {
        if values.len() != grid.channels() {
            return Err(EvalError::ValueChannels {
                expected: grid.channels(),
                got: values.len(),
            });
        }
    }
    let order = region_order(&grid, &attr.values, cfg.order);
    let unit = attr.selected_unit;
    let (logits, _) = forward(model, x)?;
    if unit >= logits.len() {
        return Err(EvalError::Forward(
            crate::forward::ForwardError::UnitOutOfRange {
                index: unit,
                len: logits.len(),
            },
        ));
    }
    let mut scores = Vec::with_capacity(cfg.steps + 1);
    scores.push(logits.at(unit));
    let mut perturbed = x.clone();
    for &r in order.iter().take(cfg.steps) {
        for (idx, channel) in grid.cells(r) {
            let v = match &cfg.value {
                PerturbValue::Scalar(v) => *v,
                PerturbValue::PerChannel(vs) => vs[channel],
            };
            perturbed.data_mut()[idx] = v;
        }
        let (logits, _) = forward(model, &perturbed)?;
        scores.push(logits.at(unit));
    }
    let aopc = aopc(&scores);
    Ok(PerturbationCurve { scores, aopc })
}
