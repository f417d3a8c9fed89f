//! Window geometry shared by the forward pass and the backward rules.
//!
//! Convolution is cross-correlation (no kernel flip). Every conv layer is
//! treated as a stack of independent linear maps, one per output window: the
//! im2col patch of the input against a `[patch_len, out_ch]` weight matrix.
//! Backward rules reuse the dense-layer rule per window and scatter-add the
//! per-patch results back through the same index map, so overlapping windows
//! accumulate additively.

use crate::model::{conv_output_hw, same_padding_before, Padding};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input_shape: &[usize],
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let (in_ch, in_h, in_w) = (input_shape[0], input_shape[1], input_shape[2]);
        let (out_h, out_w) =
            conv_output_hw(in_h, in_w, kh, kw, stride, padding).expect("validated shape chain");
        let (pad_top, pad_left) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => (
                same_padding_before(in_h, kh, stride),
                same_padding_before(in_w, kw, stride),
            ),
        };
        Self {
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        }
    }

    /// Elements in one im2col patch: in_ch * kh * kw.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Number of output windows (= out_h * out_w).
    pub fn windows(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Flat input index behind patch cell `q` of window `p`, or `None` when
    /// the cell falls into zero padding.
    pub fn input_index(&self, p: usize, q: usize) -> Option<usize> {
        let (oy, ox) = (p / self.out_w, p % self.out_w);
        let c = q / (self.kh * self.kw);
        let rem = q % (self.kh * self.kw);
        let (ky, kx) = (rem / self.kw, rem % self.kw);
        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize {
            return None;
        }
        Some((c * self.in_h + iy as usize) * self.in_w + ix as usize)
    }

    /// Copies the im2col patch for window `p` into `buf` (padding cells are
    /// zero). `buf.len()` must equal `patch_len()`.
    pub fn gather_patch(&self, input: &[f64], p: usize, buf: &mut [f64]) {
        for (q, slot) in buf.iter_mut().enumerate() {
            *slot = match self.input_index(p, q) {
                Some(idx) => input[idx],
                None => 0.0,
            };
        }
    }

    /// Adds a per-patch result back onto the input grid, skipping padding.
    pub fn scatter_patch(&self, patch: &[f64], p: usize, out: &mut [f64]) {
        for (q, &v) in patch.iter().enumerate() {
            if let Some(idx) = self.input_index(p, q) {
                out[idx] += v;
            }
        }
    }
}

/// Reshapes a `[out_ch, in_ch, kh, kw]` weight tensor into the row-major
/// `[patch_len, out_ch]` matrix used by the per-window linear map.
pub(crate) fn weight_matrix(weights: &Tensor, geom: &ConvGeom) -> Tensor {
    let q_len = geom.patch_len();
    let mut data = vec![0.0; q_len * geom.out_ch];
    for o in 0..geom.out_ch {
        for q in 0..q_len {
            data[q * geom.out_ch + o] = weights.data()[o * q_len + q];
        }
    }
    Tensor::new(vec![q_len, geom.out_ch], data).expect("weight matrix shape")
}

/// Valid-padding window geometry for pooling layers.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub wh: usize,
    pub ww: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(input_shape: &[usize], wh: usize, ww: usize, stride: usize) -> Self {
        let (ch, in_h, in_w) = (input_shape[0], input_shape[1], input_shape[2]);
        let (out_h, out_w) =
            conv_output_hw(in_h, in_w, wh, ww, stride, Padding::Valid).expect("validated shape chain");
        Self {
            ch,
            in_h,
            in_w,
            wh,
            ww,
            stride,
            out_h,
            out_w,
        }
    }

    pub fn output_len(&self) -> usize {
        self.ch * self.out_h * self.out_w
    }

    /// Flat input indices covered by the window behind flat output index `t`,
    /// in row-major scan order.
    pub fn window_indices(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        let per_ch = self.out_h * self.out_w;
        let c = t / per_ch;
        let rem = t % per_ch;
        let (oy, ox) = (rem / self.out_w, rem % self.out_w);
        let base_y = oy * self.stride;
        let base_x = ox * self.stride;
        (0..self.wh).flat_map(move |dy| {
            (0..self.ww)
                .map(move |dx| (c * self.in_h + base_y + dy) * self.in_w + base_x + dx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_conv_geometry() {
        let g = ConvGeom::new(&[1, 4, 4], 2, 3, 3, 1, Padding::Valid);
        assert_eq!((g.out_h, g.out_w), (2, 2));
        assert_eq!(g.patch_len(), 9);
        assert_eq!(g.input_index(0, 0), Some(0));
        assert_eq!(g.input_index(3, 8), Some(15)); // bottom-right window, last cell
    }

    #[test]
    fn same_padding_marks_border_cells() {
        let g = ConvGeom::new(&[1, 3, 3], 1, 3, 3, 1, Padding::Same);
        assert_eq!((g.out_h, g.out_w), (3, 3));
        assert_eq!((g.pad_top, g.pad_left), (1, 1));
        assert_eq!(g.input_index(0, 0), None); // top-left kernel cell off-grid
        assert_eq!(g.input_index(0, 4), Some(0)); // kernel center on (0,0)
    }

    #[test]
    fn same_padding_puts_extra_cell_bottom_right() {
        // 4-wide input, k=2, stride=2: out = 2, total pad = 0.
        assert_eq!(same_padding_before(4, 2, 2), 0);
        // 5-wide input, k=2, stride=2: out = 3, total pad = 1 -> 0 before, 1 after.
        assert_eq!(same_padding_before(5, 2, 2), 0);
        // 4-wide input, k=3, stride=1: total pad = 2 -> 1 on each side.
        assert_eq!(same_padding_before(4, 3, 1), 1);
    }

    #[test]
    fn pool_window_indices_are_row_major() {
        let g = PoolGeom::new(&[1, 2, 2], 2, 2, 2);
        let idx: Vec<usize> = g.window_indices(0).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn scatter_is_inverse_of_gather_without_padding() {
        let g = ConvGeom::new(&[2, 3, 3], 1, 2, 2, 1, Padding::Valid);
        let input: Vec<f64> = (0..18).map(|i| i as f64).collect();
        let mut patch = vec![0.0; g.patch_len()];
        let mut back = vec![0.0; 18];
        for p in 0..g.windows() {
            g.gather_patch(&input, p, &mut patch);
            g.scatter_patch(&patch, p, &mut back);
        }
        // Every cell is scattered back as many times as windows cover it; the
        // corner cell (0,0) is covered exactly once.
        assert_eq!(back[0], input[0]);
    }
}
