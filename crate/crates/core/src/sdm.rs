//! Semantic decoding: bidirectional cross-modal attention producing a per-token
//! spatial semantic map, then query refinement from that map.
//!
//! One [`SdmLayer`] runs at one pyramid level. Layers are cascaded: each takes
//! the query emitted by the previous one (or the encoder query for the first)
//! and the original language query for reactivation.

use rand::Rng;

use crate::config::{ModelConfig, ReactMode};
use crate::error::{shape_err, Result};
use crate::numerics::{Linear, Mlp, ParamStore, Session, Tensor, Var};

/// Per-level output: semantic map `[N × H_iW_i]` and refined query `[N × D]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelBundle {
    pub semantic_map: Var,
    pub query: Var,
}

/// Plain multi-head scaled dot-product attention with input/output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub n_heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, n_heads: usize) -> Self {
        assert!(n_heads > 0 && dim % n_heads == 0, "dim {dim} not divisible by {n_heads} heads");
        Self {
            dim,
            n_heads,
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim),
            v: Linear::new(format!("{name}.v"), dim, dim),
            o: Linear::new(format!("{name}.o"), dim, dim),
        }
    }

    pub fn output_layer(&self) -> &Linear {
        &self.o
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, s: &mut Session, query: Var, key: Var, value: Var) -> Result<Var> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, key)?;
        let v = self.v.forward(s, value)?;
        let dh = self.dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = s.graph.slice_cols(q, h * dh, dh)?;
            let kh = s.graph.slice_cols(k, h * dh, dh)?;
            let vh = s.graph.slice_cols(v, h * dh, dh)?;
            let scores = s.graph.matmul_bt(qh, kh)?;
            let scores = s.graph.scale(scores, scale);
            let attn = s.graph.softmax_rows(scores);
            heads.push(s.graph.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { s.graph.concat_cols(&heads)? };
        self.o.forward(s, cat)
    }
}

/// Outputs of the bidirectional flow, kept for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct FineMap {
    pub coarse: Var,
    pub lang_to_vis: Var,
    pub vis_to_lang: Var,
    pub semantic: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdmLayer {
    pub name: String,
    pub dim: usize,
    /// Pixel count `H_i·W_i` of the level this layer attends to.
    pub hw: usize,
    pub react_mode: ReactMode,
    pub mha_residual: bool,
    wk_v: Linear,
    wv_v: Linear,
    wk_l: Linear,
    wv_l: Linear,
    proj_s: Mlp,
    mha: MultiHeadAttention,
    react: Option<Linear>,
    react_attn: Option<MultiHeadAttention>,
}

impl SdmLayer {
    pub fn new(index: usize, hw: usize, cfg: &ModelConfig) -> Self {
        let name = format!("sdm.{index}");
        let d = cfg.dim;
        let react = (cfg.react == ReactMode::ConcatLinear).then(|| Linear::new(format!("{name}.react"), 2 * d, d));
        let react_attn = (cfg.react == ReactMode::CrossAttn).then(|| MultiHeadAttention::new(&format!("{name}.react_attn"), d, cfg.n_heads));
        Self {
            dim: d,
            hw,
            react_mode: cfg.react,
            mha_residual: cfg.mha_residual,
            wk_v: Linear::no_bias(format!("{name}.wk_v"), d, d),
            wv_v: Linear::no_bias(format!("{name}.wv_v"), d, d),
            wk_l: Linear::no_bias(format!("{name}.wk_l"), d, d),
            wv_l: Linear::no_bias(format!("{name}.wv_l"), d, d),
            proj_s: Mlp::new(&format!("{name}.proj_s"), &[hw, d, d], cfg.activation),
            mha: MultiHeadAttention::new(&format!("{name}.mha"), d, cfg.n_heads),
            react,
            react_attn,
            name,
        }
    }

    pub fn mha(&self) -> &MultiHeadAttention {
        &self.mha
    }

    pub fn react_layer(&self) -> Option<&Linear> {
        self.react.as_ref()
    }

    pub fn proj_s(&self) -> &Mlp {
        &self.proj_s
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in [&self.wk_v, &self.wv_v, &self.wk_l, &self.wv_l] {
            l.init(store, rng);
        }
        self.proj_s.init(store, rng);
        self.mha.init(store, rng);
        if let Some(r) = &self.react {
            r.init(store, rng);
        }
        if let Some(r) = &self.react_attn {
            r.init(store, rng);
        }
    }

    fn check(&self, s: &Session, l: Var, v: Var) -> Result<()> {
        let (_, dl) = s.graph.value(l).dims2();
        let (hw, dv) = s.graph.value(v).dims2();
        if dl != self.dim || dv != self.dim {
            return Err(shape_err!("{}: language dim {dl} / visual dim {dv}, expected {}", self.name, self.dim));
        }
        if hw != self.hw {
            return Err(shape_err!("{}: visual level has {hw} pixels, layer built for {}", self.name, self.hw));
        }
        Ok(())
    }

    /// `A = (L·W^k_L)(V·W^k_V)ᵀ / sqrt(D)`, `[N × HW]`.
    pub fn coarse_map(&self, s: &mut Session, l: Var, v: Var) -> Result<Var> {
        self.check(s, l, v)?;
        let lk = self.wk_l.forward(s, l)?;
        let vk = self.wk_v.forward(s, v)?;
        let a = s.graph.matmul_bt(lk, vk)?;
        Ok(s.graph.scale(a, 1.0 / (self.dim as f64).sqrt()))
    }

    /// Language-to-vision and vision-to-language flows and their product `S`.
    pub fn fine_map(&self, s: &mut Session, l: Var, v: Var) -> Result<FineMap> {
        let a = self.coarse_map(s, l, v)?;
        let attn_lv = s.graph.softmax_rows(a);
        let vv = self.wv_v.forward(s, v)?;
        let f_lv = s.graph.matmul(attn_lv, vv)?;
        let at = s.graph.transpose(a);
        let attn_vl = s.graph.softmax_rows(at);
        let lv = self.wv_l.forward(s, l)?;
        let f_vl = s.graph.matmul(attn_vl, lv)?;
        let sem = s.graph.matmul_bt(f_lv, f_vl)?;
        Ok(FineMap { coarse: a, lang_to_vis: f_lv, vis_to_lang: f_vl, semantic: sem })
    }

    /// Projects `S` into query space, attends from the current query, then reactivates with the original language query.
    pub fn refine_query(&self, s: &mut Session, q_l: Var, sem: Var, l_orig: Var) -> Result<Var> {
        let (n, hw) = s.graph.value(sem).dims2();
        if hw != self.hw {
            return Err(shape_err!("{}: semantic map rows have {hw} pixels, expected {}", self.name, self.hw));
        }
        if s.graph.value(q_l).rows() != n || s.graph.value(l_orig).rows() != n {
            return Err(shape_err!("{}: token count mismatch between query, map and language", self.name));
        }
        let q_s = self.proj_s.forward(s, sem)?;
        let attn = self.mha.forward(s, q_l, q_s, q_s)?;
        let q2 = if self.mha_residual { s.graph.add(attn, q_l)? } else { attn };
        match self.react_mode {
            ReactMode::ConcatLinear => {
                let cat = s.graph.concat_cols(&[q2, l_orig])?;
                self.react.as_ref().expect("built with concat_linear").forward(s, cat)
            }
            ReactMode::Add => s.graph.add(q2, l_orig),
            ReactMode::CrossAttn => {
                let r = self.react_attn.as_ref().expect("built with cross_attn").forward(s, q2, l_orig, l_orig)?;
                s.graph.add(q2, r)
            }
        }
    }

    pub fn run_level(&self, s: &mut Session, q_in: Var, v: Var, l_orig: Var) -> Result<LevelBundle> {
        let fine = self.fine_map(s, q_in, v)?;
        let query = self.refine_query(s, q_in, fine.semantic, l_orig)?;
        Ok(LevelBundle { semantic_map: fine.semantic, query })
    }

    /// Pure `S` for tensors `L` `[N×D]`, `V` `[HW×D]`.
    pub fn eval_fine_map(&self, store: &ParamStore, l: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut s = Session::new(store);
        let (lv, vv) = (s.graph.constant(l.clone()), s.graph.constant(v.clone()));
        let f = self.fine_map(&mut s, lv, vv)?;
        let g = &s.graph;
        Ok((g.value(f.semantic).clone(), g.value(f.lang_to_vis).clone(), g.value(f.vis_to_lang).clone()))
    }
}

/// Which pyramid level (0 = coarsest) each of `n_layers` cascaded layers attends to.
/// Three layers map one-to-one; fewer drop the coarse levels; more repeat the finest.
pub fn layer_levels(n_layers: usize) -> Vec<usize> {
    (0..n_layers).map(|j| 2 - ((n_layers - 1 - j) * 3 / n_layers).min(2)).collect()
}
