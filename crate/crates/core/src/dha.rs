//! Dynamic hierarchical aggregation and kernel mask decoding.
//!
//! Intra-selection rescales each token map of a level by a squeeze-excite
//! weight; inter-selection gates a whole level by a scalar from the level's
//! query. Gated maps are summed coarse-to-fine with ×2 upsampling in between,
//! and the finest aggregate is turned into two-class pixel logits by a
//! query-conditioned `[N×2]` kernel.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{KernelMode, ModelConfig};
use crate::error::{shape_err, Result};
use crate::numerics::{Linear, Mlp, ParamStore, ResampleMap, Session, Tensor, UpsampleMode, Var};

/// Decoder output at full input resolution plus selection diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLogits {
    /// `[H·W × 2]`, column 0 background, column 1 foreground.
    pub logits: Tensor,
    /// Level gates, coarsest first; `None` for levels without a semantic map.
    pub alphas: Vec<Option<f64>>,
    /// Per-level token weights from intra-selection.
    pub token_gates: Vec<Option<Vec<f64>>>,
}

impl MaskLogits {
    /// Foreground decision per pixel (argmax over the two classes; ties go to background).
    pub fn binary_mask(&self) -> Vec<bool> {
        (0..self.logits.rows()).map(|p| self.logits.get(p, 1) > self.logits.get(p, 0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dha {
    pub dim: usize,
    pub max_tokens: usize,
    pub level_hw: [(usize, usize); 3],
    pub target_hw: (usize, usize),
    pub kernel_mode: KernelMode,
    pub intra_off: bool,
    pub inter_off: bool,
    gate: Linear,
    se: Vec<(Linear, Linear)>,
    kernel_head: Mlp,
    up: Vec<Rc<ResampleMap>>,
    to_target: Rc<ResampleMap>,
}

impl Dha {
    pub fn new(cfg: &ModelConfig, level_hw: [(usize, usize); 3], target_hw: (usize, usize)) -> Result<Self> {
        for w in level_hw.windows(2) {
            if w[1] != (2 * w[0].0, 2 * w[0].1) {
                return Err(shape_err!("levels {:?} and {:?} are not an octave apart", w[0], w[1]));
            }
        }
        let n = cfg.max_tokens();
        let hidden = n.div_ceil(cfg.se_reduction);
        let se = (0..3)
            .map(|i| (Linear::new(format!("dha.se{i}.0"), n, hidden), Linear::new(format!("dha.se{i}.1"), hidden, n)))
            .collect();
        let kernel_out = match cfg.kernel {
            KernelMode::Pooled => 2 * n,
            KernelMode::PerToken => 2,
        };
        let up = (0..2).map(|i| Rc::new(ResampleMap::octave(level_hw[i], cfg.upsample_mode))).collect();
        Ok(Self {
            dim: cfg.dim,
            max_tokens: n,
            level_hw,
            target_hw,
            kernel_mode: cfg.kernel,
            intra_off: cfg.intra_off,
            inter_off: cfg.inter_off,
            gate: Linear::new("dha.gate", cfg.dim, 1),
            se,
            kernel_head: Mlp::new("dha.kernel", &[cfg.dim, cfg.dim, kernel_out], cfg.activation),
            up,
            to_target: Rc::new(ResampleMap::new(level_hw[2], target_hw, cfg.upsample_mode)),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.gate.init(store, rng);
        for (a, b) in &self.se {
            a.init(store, rng);
            b.init(store, rng);
        }
        self.kernel_head.init(store, rng);
    }

    /// Level gate `sigmoid(mean_tokens(Q)·W_g + b)`, `[1×1]`. Constant 1 when inter-selection is off.
    pub fn inter_select(&self, s: &mut Session, q: Var) -> Result<Var> {
        if self.inter_off {
            return Ok(s.graph.constant(Tensor::scalar(1.0)));
        }
        let pooled = s.graph.mean_rows(q);
        let z = self.gate.forward(s, pooled)?;
        Ok(s.graph.sigmoid(z))
    }

    /// Squeeze-excite over the token maps of level `level`. Returns `(w ⊙ M, w)` with `w` `[N×1]`.
    pub fn intra_select(&self, s: &mut Session, level: usize, m: Var) -> Result<(Var, Var)> {
        let (n, hw) = s.graph.value(m).dims2();
        let (h, w) = self.level_hw[level];
        if hw != h * w {
            return Err(shape_err!("level {level} map has {hw} pixels, expected {}", h * w));
        }
        if n > self.max_tokens {
            return Err(shape_err!("{n} tokens exceed the {} supported", self.max_tokens));
        }
        if self.intra_off {
            let ones = s.graph.constant(Tensor::filled(n, 1, 1.0));
            return Ok((m, ones));
        }
        let squeeze = s.graph.mean_cols(m);
        let mut desc = s.graph.transpose(squeeze);
        if n < self.max_tokens {
            let pad = s.graph.constant(Tensor::zeros(1, self.max_tokens - n));
            desc = s.graph.concat_cols(&[desc, pad])?;
        }
        let (l1, l2) = &self.se[level];
        let hdn = l1.forward(s, desc)?;
        let hdn = s.graph.relu(hdn);
        let exc = l2.forward(s, hdn)?;
        let exc = s.graph.sigmoid(exc);
        let exc = s.graph.slice_cols(exc, 0, n)?;
        let wts = s.graph.transpose(exc);
        Ok((s.graph.mul_rows_by(m, wts)?, wts))
    }

    /// `M*_1 = α_1 M'_1`, `M*_{i+1} = Up(M*_i) + α_{i+1} M'_{i+1}`. Absent levels contribute nothing.
    pub fn aggregate(&self, s: &mut Session, maps: &[Option<Var>; 3], alphas: &[Option<Var>; 3]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for i in 0..3 {
            if let Some(prev) = acc {
                acc = Some(s.graph.resample(prev, self.up[i - 1].clone())?);
            }
            if let Some(m) = maps[i] {
                let (_, hw) = s.graph.value(m).dims2();
                let (h, w) = self.level_hw[i];
                if hw != h * w {
                    return Err(shape_err!("level {i} map has {hw} pixels, expected {h}×{w}"));
                }
                let term = match alphas[i] {
                    Some(a) => s.graph.scale_by(m, a)?,
                    None => m,
                };
                acc = Some(match acc {
                    Some(prev) => s.graph.add(prev, term)?,
                    None => term,
                });
            }
        }
        acc.ok_or_else(|| shape_err!("aggregate needs at least one level"))
    }

    /// Upsamples a level-`level` map to the finest level by repeated ×2 steps.
    pub fn lift_to_finest(&self, s: &mut Session, level: usize, m: Var) -> Result<Var> {
        let mut v = m;
        for i in level..2 {
            v = s.graph.resample(v, self.up[i].clone())?;
        }
        Ok(v)
    }

    /// The `[N×2]` kernel conditioned on the final query.
    pub fn kernel(&self, s: &mut Session, q3: Var) -> Result<Var> {
        let (n, d) = s.graph.value(q3).dims2();
        if d != self.dim {
            return Err(shape_err!("kernel query dim {d}, expected {}", self.dim));
        }
        if n > self.max_tokens {
            return Err(shape_err!("{n} tokens exceed the {} supported", self.max_tokens));
        }
        match self.kernel_mode {
            KernelMode::Pooled => {
                let pooled = s.graph.mean_rows(q3);
                let k = self.kernel_head.forward(s, pooled)?;
                let k = s.graph.slice_cols(k, 0, 2 * n)?;
                s.graph.reshape(k, n, 2)
            }
            KernelMode::PerToken => self.kernel_head.forward(s, q3),
        }
    }

    /// `(M*_3)ᵀ · B`, upsampled to the input grid: `[H·W × 2]`.
    pub fn decode_mask(&self, s: &mut Session, m_star: Var, q3: Var) -> Result<Var> {
        let b = self.kernel(s, q3)?;
        self.apply_kernel(s, m_star, b)
    }

    pub fn apply_kernel(&self, s: &mut Session, m_star: Var, b: Var) -> Result<Var> {
        let (n, hw) = s.graph.value(m_star).dims2();
        let (h3, w3) = self.level_hw[2];
        if hw != h3 * w3 {
            return Err(shape_err!("aggregated map has {hw} pixels, expected {}", h3 * w3));
        }
        if s.graph.value(b).dims2() != (n, 2) {
            return Err(shape_err!("kernel {:?} does not match {n} tokens", s.graph.value(b).shape()));
        }
        let mt = s.graph.transpose(m_star);
        let low = s.graph.matmul(mt, b)?;
        let low_t = s.graph.transpose(low);
        let full = s.graph.resample(low_t, self.to_target.clone())?;
        Ok(s.graph.transpose(full))
    }
}

/// Unrolled form of the recursive aggregation: `Σ_i α_i · Up^{(2−i)}(M'_i)`.
pub fn aggregate_unrolled(maps: &[Tensor; 3], alphas: [f64; 3], level_hw: [(usize, usize); 3], mode: UpsampleMode) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for i in 0..3 {
        let mut t = maps[i].scale(alphas[i]);
        for j in i..2 {
            t = ResampleMap::octave(level_hw[j], mode).apply_rows(&t)?;
        }
        total = Some(match total {
            Some(acc) => acc.add(&t)?,
            None => t,
        });
    }
    Ok(total.expect("three levels"))
}
