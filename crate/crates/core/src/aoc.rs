//! Adaptive object counting and the detached existence head.

use rand::Rng;

use crate::config::{AocMode, ModelConfig, TokenReduce};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Mlp, ParamStore, Session, Tensor, Var};

/// Graph handles for one counting pass.
#[derive(Debug, Clone)]
pub struct CountVars {
    /// `C_i`, `[N×C]` per level.
    pub per_level: Vec<Var>,
    /// `C_all`, elementwise mean of `per_level`.
    pub fused: Option<Var>,
    /// `C^pred`, `[1×C]`.
    pub pred: Option<Var>,
    /// `P^pred`, `[1×2]`.
    pub exist_logits: Var,
}

/// Plain-value view of [`CountVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct CountPrediction {
    pub per_level: Vec<Tensor>,
    pub fused: Tensor,
    pub pred: Tensor,
    pub exist_logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aoc {
    pub dim: usize,
    pub n_categories: usize,
    pub mode: AocMode,
    pub token_reduce: TokenReduce,
    count_mlp: Vec<Mlp>,
    exist_head: Mlp,
}

impl Aoc {
    /// `n_levels` count MLPs, one per query level fed to [`count_forward`](Self::count_forward).
    pub fn new(cfg: &ModelConfig, n_categories: usize, n_levels: usize) -> Result<Self> {
        if n_categories == 0 {
            return Err(Error::Config("at least one count category is required".into()));
        }
        let d = cfg.dim;
        let count_mlp = (0..n_levels).map(|i| Mlp::new(&format!("aoc.count{i}"), &[d, d, n_categories], cfg.activation)).collect();
        let exist_in = match cfg.aoc {
            AocMode::Full => n_categories,
            AocMode::Off | AocMode::BinaryOnly => d,
        };
        Ok(Self {
            dim: d,
            n_categories,
            mode: cfg.aoc,
            token_reduce: cfg.token_reduce,
            count_mlp,
            exist_head: Mlp::new("aoc.exist", &[exist_in, d, 2], cfg.activation),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        if self.mode == AocMode::Full {
            for m in &self.count_mlp {
                m.init(store, rng);
            }
        }
        self.exist_head.init(store, rng);
    }

    /// Per-level counts, their mean, the token-reduced prediction and the existence logits.
    ///
    /// In `Full` mode the existence head reads a detached copy of the count
    /// prediction, so its loss cannot reach anything upstream.
    pub fn count_forward(&self, s: &mut Session, queries: &[Var]) -> Result<CountVars> {
        let last = *queries.last().ok_or_else(|| shape_err!("count_forward needs at least one query"))?;
        let (n, d) = s.graph.value(last).dims2();
        if queries.iter().any(|&q| s.graph.value(q).dims2() != (n, d)) {
            return Err(shape_err!("queries disagree in shape"));
        }
        if d != self.dim {
            return Err(shape_err!("query dim {d}, expected {}", self.dim));
        }
        match self.mode {
            AocMode::Full => {
                if queries.len() != self.count_mlp.len() {
                    return Err(shape_err!("{} queries for {} count heads", queries.len(), self.count_mlp.len()));
                }
                let mut per_level = Vec::with_capacity(queries.len());
                for (m, &q) in self.count_mlp.iter().zip(queries) {
                    per_level.push(m.forward(s, q)?);
                }
                let mut sum = per_level[0];
                for &c in &per_level[1..] {
                    sum = s.graph.add(sum, c)?;
                }
                let fused = s.graph.scale(sum, 1.0 / per_level.len() as f64);
                let pred = match self.token_reduce {
                    TokenReduce::Sum => s.graph.sum_rows(fused),
                    TokenReduce::Mean => s.graph.mean_rows(fused),
                };
                let detached = s.graph.detach(pred);
                let exist_logits = self.exist_head.forward(s, detached)?;
                Ok(CountVars { per_level, fused: Some(fused), pred: Some(pred), exist_logits })
            }
            AocMode::Off => {
                let pooled = s.graph.mean_rows(last);
                let detached = s.graph.detach(pooled);
                let exist_logits = self.exist_head.forward(s, detached)?;
                Ok(CountVars { per_level: vec![], fused: None, pred: None, exist_logits })
            }
            AocMode::BinaryOnly => {
                let pooled = s.graph.mean_rows(last);
                let exist_logits = self.exist_head.forward(s, pooled)?;
                Ok(CountVars { per_level: vec![], fused: None, pred: None, exist_logits })
            }
        }
    }

    pub fn eval(&self, store: &ParamStore, queries: &[Tensor]) -> Result<CountPrediction> {
        let mut s = Session::new(store);
        let vars: Vec<Var> = queries.iter().map(|q| s.graph.constant(q.clone())).collect();
        let c = self.count_forward(&mut s, &vars)?;
        let g = &s.graph;
        let zeros = Tensor::zeros(1, self.n_categories);
        Ok(CountPrediction {
            per_level: c.per_level.iter().map(|&v| g.value(v).clone()).collect(),
            fused: c.fused.map_or_else(|| zeros.clone(), |v| g.value(v).clone()),
            pred: c.pred.map_or(zeros, |v| g.value(v).clone()),
            exist_logits: g.value(c.exist_logits).clone(),
        })
    }
}

/// Mean over categories of smooth-L1(pred − gt).
pub fn smooth_l1(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(shape_err!("smooth_l1 on lengths {} and {}", pred.len(), gt.len()));
    }
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| crate::numerics::tape::smooth_l1_value(p - g)).sum();
    Ok(total / pred.len() as f64)
}

/// Two-class cross entropy of `softmax(logits)` against label `p_gt ∈ {0, 1}`.
pub fn existence_loss(logits: &[f64], p_gt: u8) -> Result<f64> {
    if logits.len() != 2 {
        return Err(shape_err!("existence logits must have 2 entries, got {}", logits.len()));
    }
    if p_gt > 1 {
        return Err(Error::Input(format!("existence label must be 0 or 1, got {p_gt}")));
    }
    let t = Tensor::row(logits.to_vec());
    let ls = crate::numerics::tensor::log_softmax_rows(&t);
    Ok(-ls.data()[p_gt as usize])
}

/// Round half away from zero.
pub fn round_count(x: f64) -> i64 {
    x.round() as i64
}

/// Fraction of samples whose rounded per-category predictions all equal the ground truth.
pub fn c_acc(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(shape_err!("c_acc over {} predictions and {} targets", pred.len(), gt.len()));
    }
    let mut hits = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(shape_err!("c_acc sample with {} vs {} categories", p.len(), g.len()));
        }
        if p.iter().zip(g).all(|(a, b)| round_count(*a) == round_count(*b)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}
