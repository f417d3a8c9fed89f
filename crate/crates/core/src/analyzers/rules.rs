//! Per-layer backward rules.
//!
//! Every analyzer is a fold of these rules over the reversed tape. Gradient,
//! Deconvnet, GuidedBackprop and the pattern methods propagate a gradient-like
//! signal and differ only in the relu rule or in the weight matrix used for
//! linear layers. The LRP family and DeepTaylor propagate relevance: linear
//! layers redistribute it proportionally to input contributions, relu is the
//! identity, pools route to winners or split proportionally.
//!
//! Conv layers reuse the dense rules: each output window is one application
//! of the same `[patch_len, out_ch]` linear map on an im2col patch, and the
//! per-patch results are scatter-added back onto the input grid.

use crate::conv::{weight_matrix, ConvGeom, PoolGeom};
use crate::forward::{Aux, TapeEntry};
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

/// Relu backward behavior of the gradient-family methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluRule {
    /// Mask the upstream signal by `forward_input > 0`.
    Gradient,
    /// Keep only positive upstream signal, ignoring the forward input.
    Deconvnet,
    /// Positive upstream signal masked by `forward_input > 0`.
    Guided,
}

/// Backward through relu under the given rule. Shapes must match.
pub fn relu_backward(rule: ReluRule, upstream: &Tensor, forward_input: &Tensor) -> Tensor {
    assert_eq!(
        upstream.shape(),
        forward_input.shape(),
        "relu_backward shape mismatch"
    );
    let data = upstream
        .data()
        .iter()
        .zip(forward_input.data())
        .map(|(&u, &x)| match rule {
            ReluRule::Gradient => {
                if x > 0.0 {
                    u
                } else {
                    0.0
                }
            }
            ReluRule::Deconvnet => u.max(0.0),
            ReluRule::Guided => {
                if x > 0.0 {
                    u.max(0.0)
                } else {
                    0.0
                }
            }
        })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data).expect("relu backward shape")
}

/// LRP rule variant for linear layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrpVariant {
    Z,
    Epsilon(f64),
    AlphaBeta { alpha: f64, beta: f64 },
}

/// sign with sign(0) = +1, so the epsilon stabilizer never has a dead zone.
#[inline]
fn sign01(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Redistributes output relevance of one linear map (`y = W^T x + b`) onto
/// its inputs.
///
/// Contributions are `z_ij = x_i * W_ij`. The z-rule divides by the full
/// pre-activation (bias included, so bias absorbs relevance); epsilon adds
/// `eps * sign(denominator)` with sign(0) = +1; alpha-beta propagates the
/// positive part (including b+) and negative part (including b-) separately.
/// An exactly-zero stabilized denominator contributes zero relevance for that
/// output unit.
pub fn lrp_linear_rule(
    variant: LrpVariant,
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    r_out: &Tensor,
) -> Tensor {
    let in_dim = x.len();
    let out_dim = r_out.len();
    debug_assert_eq!(w.shape(), &[in_dim, out_dim], "weight shape");
    let wd = w.data();
    let xd = x.data();
    let mut r_in = vec![0.0; in_dim];
    let mut z = vec![0.0; in_dim];
    for j in 0..out_dim {
        let rj = r_out.at(j);
        if rj == 0.0 {
            continue;
        }
        for i in 0..in_dim {
            z[i] = xd[i] * wd[i * out_dim + j];
        }
        let bj = b.map_or(0.0, |b| b.at(j));
        match variant {
            LrpVariant::Z | LrpVariant::Epsilon(_) => {
                let mut denom = crate::tensor::compensated_sum(&z) + bj;
                if let LrpVariant::Epsilon(eps) = variant {
                    denom += eps * sign01(denom);
                }
                if denom == 0.0 {
                    continue;
                }
                let scale = rj / denom;
                for i in 0..in_dim {
                    r_in[i] += z[i] * scale;
                }
            }
            LrpVariant::AlphaBeta { alpha, beta } => {
                let mut zp = bj.max(0.0);
                let mut zn = bj.min(0.0);
                for &zi in &z {
                    if zi > 0.0 {
                        zp += zi;
                    } else {
                        zn += zi;
                    }
                }
                if zp != 0.0 {
                    let scale = alpha * rj / zp;
                    for i in 0..in_dim {
                        if z[i] > 0.0 {
                            r_in[i] += z[i] * scale;
                        }
                    }
                }
                if zn != 0.0 {
                    let scale = beta * rj / zn;
                    for i in 0..in_dim {
                        if z[i] < 0.0 {
                            r_in[i] -= z[i] * scale;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(r_in)
}

/// DeepTaylor bounded-input rule for the first linear layer: relevance share
/// of input i for unit j is `(z_ij - low_i W+_ij - high_i W-_ij)` over the
/// sum of those terms. Bias is excluded. Cells fixed at zero (conv padding)
/// must be passed with `low = high = 0` so they drop out entirely.
pub fn zb_linear_rule(
    x: &Tensor,
    w: &Tensor,
    lows: &[f64],
    highs: &[f64],
    r_out: &Tensor,
) -> Tensor {
    let in_dim = x.len();
    let out_dim = r_out.len();
    debug_assert_eq!(w.shape(), &[in_dim, out_dim], "weight shape");
    let wd = w.data();
    let xd = x.data();
    let mut r_in = vec![0.0; in_dim];
    let mut share = vec![0.0; in_dim];
    for j in 0..out_dim {
        let rj = r_out.at(j);
        if rj == 0.0 {
            continue;
        }
        for i in 0..in_dim {
            let wij = wd[i * out_dim + j];
            share[i] = xd[i] * wij - lows[i] * wij.max(0.0) - highs[i] * wij.min(0.0);
        }
        let denom = crate::tensor::compensated_sum(&share);
        if denom == 0.0 {
            continue;
        }
        let scale = rj / denom;
        for i in 0..in_dim {
            r_in[i] += share[i] * scale;
        }
    }
    Tensor::from_vec(r_in)
}

/// How pooling layers hand their output signal back to the window cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolBack {
    /// Plain gradient: winner takes all (max) or equal split (avg).
    Gradient,
    /// Relevance: winner takes all (max) or proportional to each cell's
    /// share of the window sum (avg), with a 1e-9 stabilizer.
    Relevance,
}

const AVG_POOL_STABILIZER: f64 = 1e-9;

/// Backward through a max-pool layer: the recorded winner of each window
/// receives the full upstream value; overlapping windows accumulate.
pub fn maxpool_backward(entry: &TapeEntry, upstream: &Tensor) -> Tensor {
    let Aux::MaxPoolWinners(winners) = &entry.aux else {
        panic!("tape entry has no max-pool winners");
    };
    let mut r_in = vec![0.0; entry.input.len()];
    for (t, &winner) in winners.iter().enumerate() {
        r_in[winner] += upstream.at(t);
    }
    Tensor::new(entry.input.shape().to_vec(), r_in).expect("maxpool backward shape")
}

/// Backward through an avg-pool layer under the given rule.
pub(crate) fn avgpool_backward(
    mode: PoolBack,
    geom: &PoolGeom,
    entry: &TapeEntry,
    upstream: &Tensor,
) -> Tensor {
    let mut r_in = vec![0.0; entry.input.len()];
    let count = (geom.wh * geom.ww) as f64;
    for t in 0..geom.output_len() {
        let u = upstream.at(t);
        if u == 0.0 {
            continue;
        }
        match mode {
            PoolBack::Gradient => {
                let share = u / count;
                for idx in geom.window_indices(t) {
                    r_in[idx] += share;
                }
            }
            PoolBack::Relevance => {
                let mut sum = 0.0;
                for idx in geom.window_indices(t) {
                    sum += entry.input.at(idx);
                }
                let denom = sum + AVG_POOL_STABILIZER * sign01(sum);
                for idx in geom.window_indices(t) {
                    r_in[idx] += entry.input.at(idx) / denom * u;
                }
            }
        }
    }
    Tensor::new(entry.input.shape().to_vec(), r_in).expect("avgpool backward shape")
}

/// Convenience wrapper matching the pooling rules above to a tape entry.
pub fn lrp_pool_rule(model: &Model, entry: &TapeEntry, r_out: &Tensor) -> Tensor {
    match &model.layers[entry.layer_index] {
        LayerSpec::Maxpool2d { .. } => maxpool_backward(entry, r_out),
        LayerSpec::Avgpool2d {
            window_h,
            window_w,
            stride,
        } => {
            let geom = PoolGeom::new(entry.input.shape(), *window_h, *window_w, *stride);
            avgpool_backward(PoolBack::Relevance, &geom, entry, r_out)
        }
        other => panic!("lrp_pool_rule on non-pool layer {}", other.kind_name()),
    }
}

/// Weight substitution for the pattern methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternMode {
    /// Back-project the signal: gradient backward with W replaced by A.
    Net,
    /// Back-project relevance: gradient backward with W replaced by W ⊙ A.
    Attribution,
}

/// Gradient backward through a linear map with an arbitrary weight matrix
/// (`w` in `[in, out]` layout): `r_in = w · upstream`.
pub fn linear_gradient_backward(w: &Tensor, upstream: &Tensor) -> Tensor {
    let in_dim = w.shape()[0];
    let out_dim = w.shape()[1];
    debug_assert_eq!(upstream.len(), out_dim);
    let wd = w.data();
    let mut r_in = vec![0.0; in_dim];
    for (i, slot) in r_in.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..out_dim {
            acc += wd[i * out_dim + j] * upstream.at(j);
        }
        *slot = acc;
    }
    Tensor::from_vec(r_in)
}

/// Backward treatment of dense/conv layers, chosen per method.
#[derive(Debug, Clone, Copy)]
pub(crate) enum LinearBack {
    /// Plain gradient through the stored weights.
    Gradient,
    /// Gradient through substituted weights (pattern methods).
    Pattern(PatternMode),
    Lrp(LrpVariant),
    /// DeepTaylor: z+ (alpha=1, beta=0) on hidden linear layers, the bounded
    /// rule on the first linear layer of the model.
    DeepTaylor { low: f64, high: f64 },
}

/// Full per-method rule assignment consumed by the backward walk.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RuleSet {
    pub linear: LinearBack,
    pub relu: Option<ReluRule>, // None = identity (relevance methods)
    pub pool: PoolBack,
    /// Index of the model's first linear layer; only DeepTaylor cares.
    pub first_linear: Option<usize>,
}

pub(crate) fn dense_backward(
    rules: &RuleSet,
    entry: &TapeEntry,
    w: &Tensor,
    b: Option<&Tensor>,
    pattern: Option<&Tensor>,
    upstream: &Tensor,
) -> Tensor {
    match rules.linear {
        LinearBack::Gradient => linear_gradient_backward(w, upstream),
        LinearBack::Pattern(mode) => {
            let a = pattern.expect("pattern presence checked before the walk");
            match mode {
                PatternMode::Net => linear_gradient_backward(a, upstream),
                PatternMode::Attribution => {
                    let wa = w.mul(a).expect("pattern shape checked before the walk");
                    linear_gradient_backward(&wa, upstream)
                }
            }
        }
        LinearBack::Lrp(variant) => lrp_linear_rule(variant, &entry.input, w, b, upstream),
        LinearBack::DeepTaylor { low, high } => {
            if rules.first_linear == Some(entry.layer_index) {
                let n = entry.input.len();
                zb_linear_rule(&entry.input, w, &vec![low; n], &vec![high; n], upstream)
            } else {
                lrp_linear_rule(
                    LrpVariant::AlphaBeta {
                        alpha: 1.0,
                        beta: 0.0,
                    },
                    &entry.input,
                    w,
                    b,
                    upstream,
                )
            }
        }
    }
}

/// Backward through a conv layer: applies the dense rule per output window
/// on the im2col patch and scatter-adds the per-patch results.
pub(crate) fn conv_backward(
    rules: &RuleSet,
    entry: &TapeEntry,
    geom: &ConvGeom,
    w: &Tensor,
    b: Option<&Tensor>,
    pattern: Option<&Tensor>,
    upstream: &Tensor,
) -> Tensor {
    let w2 = match rules.linear {
        LinearBack::Pattern(PatternMode::Net) => {
            weight_matrix(pattern.expect("pattern presence checked"), geom)
        }
        LinearBack::Pattern(PatternMode::Attribution) => {
            let wa = w
                .mul(pattern.expect("pattern presence checked"))
                .expect("pattern shape checked");
            weight_matrix(&wa, geom)
        }
        _ => weight_matrix(w, geom),
    };
    let q_len = geom.patch_len();
    let windows = geom.windows();
    let is_first = rules.first_linear == Some(entry.layer_index);
    let mut r_in = vec![0.0; entry.input.len()];
    let mut patch = vec![0.0; q_len];
    let mut u_col = vec![0.0; geom.out_ch];
    for p in 0..windows {
        for (o, slot) in u_col.iter_mut().enumerate() {
            *slot = upstream.at(o * windows + p);
        }
        if u_col.iter().all(|&u| u == 0.0) {
            continue;
        }
        let u = Tensor::from_vec(u_col.clone());
        let r_patch = match rules.linear {
            LinearBack::Gradient | LinearBack::Pattern(_) => linear_gradient_backward(&w2, &u),
            LinearBack::Lrp(variant) => {
                geom.gather_patch(entry.input.data(), p, &mut patch);
                lrp_linear_rule(variant, &Tensor::from_vec(patch.clone()), &w2, b, &u)
            }
            LinearBack::DeepTaylor { low, high } => {
                geom.gather_patch(entry.input.data(), p, &mut patch);
                let xt = Tensor::from_vec(patch.clone());
                if is_first {
                    // Padding cells are fixed at zero, not free variables in
                    // [low, high]; zero bounds make them drop out.
                    let mut lows = vec![0.0; q_len];
                    let mut highs = vec![0.0; q_len];
                    for q in 0..q_len {
                        if geom.input_index(p, q).is_some() {
                            lows[q] = low;
                            highs[q] = high;
                        }
                    }
                    zb_linear_rule(&xt, &w2, &lows, &highs, &u)
                } else {
                    lrp_linear_rule(
                        LrpVariant::AlphaBeta {
                            alpha: 1.0,
                            beta: 0.0,
                        },
                        &xt,
                        &w2,
                        b,
                        &u,
                    )
                }
            }
        };
        geom.scatter_patch(r_patch.data(), p, &mut r_in);
    }
    Tensor::new(entry.input.shape().to_vec(), r_in).expect("conv backward shape")
}
