//! Spatial resampling of flattened `[h×w]` maps as explicit sparse linear maps.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Linear map from a flattened `[h_in×w_in]` grid to `[h_out×w_out]`.
/// `taps[dst]` lists `(src, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleMap {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    taps: Vec<Vec<(usize, f64)>>,
}

/// Source taps along one axis. Bilinear uses half-pixel centres
/// (`src = (dst + 0.5)·in/out − 0.5`, clamped), nearest uses `floor(dst·in/out)`.
fn axis_taps(n_in: usize, n_out: usize, mode: UpsampleMode) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| match mode {
            UpsampleMode::Nearest => {
                let s = ((d * n_in) / n_out).min(n_in - 1);
                vec![(s, 1.0)]
            }
            UpsampleMode::Bilinear => {
                let x = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
                let x0 = (x.floor() as usize).min(n_in - 1);
                let x1 = (x0 + 1).min(n_in - 1);
                let f = x - x0 as f64;
                if x1 == x0 || f == 0.0 {
                    vec![(x0, 1.0)]
                } else {
                    vec![(x0, 1.0 - f), (x1, f)]
                }
            }
        })
        .collect()
}

impl ResampleMap {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize), mode: UpsampleMode) -> Self {
        let ty = axis_taps(in_hw.0, out_hw.0, mode);
        let tx = axis_taps(in_hw.1, out_hw.1, mode);
        let mut taps = Vec::with_capacity(out_hw.0 * out_hw.1);
        for ry in &ty {
            for rx in &tx {
                let mut t = Vec::with_capacity(ry.len() * rx.len());
                for &(sy, wy) in ry {
                    for &(sx, wx) in rx {
                        t.push((sy * in_hw.1 + sx, wy * wx));
                    }
                }
                taps.push(t);
            }
        }
        Self { in_hw, out_hw, taps }
    }

    /// ×2 octave upsampling.
    pub fn octave(in_hw: (usize, usize), mode: UpsampleMode) -> Self {
        Self::new(in_hw, (in_hw.0 * 2, in_hw.1 * 2), mode)
    }

    pub fn in_len(&self) -> usize {
        self.in_hw.0 * self.in_hw.1
    }

    pub fn out_len(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }

    /// Resamples each row of `x` `[m × in_len]` to `[m × out_len]`.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2();
        if n != self.in_len() {
            return Err(shape_err!("resample expects rows of {} pixels, got {n}", self.in_len()));
        }
        let out_n = self.out_len();
        let mut out = vec![0.0; m * out_n];
        for i in 0..m {
            let src = x.row_slice(i);
            let dst = &mut out[i * out_n..(i + 1) * out_n];
            for (d, taps) in dst.iter_mut().zip(&self.taps) {
                *d = taps.iter().map(|&(s, w)| w * src[s]).sum();
            }
        }
        Tensor::from_parts(vec![m, out_n], out)
    }

    /// Adjoint of [`apply_rows`](Self::apply_rows).
    pub fn apply_rows_transposed(&self, g: &Tensor) -> Result<Tensor> {
        let (m, n) = g.dims2();
        if n != self.out_len() {
            return Err(shape_err!("resample adjoint expects rows of {} pixels, got {n}", self.out_len()));
        }
        let in_n = self.in_len();
        let mut out = vec![0.0; m * in_n];
        for i in 0..m {
            let gr = g.row_slice(i);
            let dst = &mut out[i * in_n..(i + 1) * in_n];
            for (gv, taps) in gr.iter().zip(&self.taps) {
                for &(s, w) in taps {
                    dst[s] += w * gv;
                }
            }
        }
        Tensor::from_parts(vec![m, in_n], out)
    }
}
