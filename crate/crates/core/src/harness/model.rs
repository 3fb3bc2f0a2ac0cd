//! End-to-end model: encoders → SDM cascade → selection/aggregation → kernel decoding, plus counting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aoc::Aoc;
use crate::config::{AocMode, LossWeights, ModelConfig};
use crate::dha::{Dha, MaskLogits};
use crate::error::{Error, Result};
use crate::losses::{mask_loss_var, total_loss_var};
use crate::numerics::{ParamStore, Session, Tensor, Var};
use crate::sdm::{layer_levels, SdmLayer};
use crate::synthgres::{Dataset, GresSample};
use crate::toyenc::{Grid, ToyEncoder};

/// Data-dependent sizes a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub grid_hw: (usize, usize),
    pub n_cell_classes: usize,
    pub vocab_size: usize,
    pub n_categories: usize,
}

impl DataShape {
    pub fn of(ds: &Dataset) -> Result<Self> {
        Ok(Self {
            grid_hw: ds.meta.grid_hw,
            n_cell_classes: ds.meta.n_cell_classes,
            vocab_size: ds.vocab()?.len(),
            n_categories: ds.meta.n_categories,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub shape: DataShape,
    pub encoder: ToyEncoder,
    pub layers: Vec<SdmLayer>,
    /// Pyramid level each layer attends to.
    pub levels: Vec<usize>,
    pub dha: Dha,
    pub aoc: Aoc,
}

/// Graph variables of one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    /// Auxiliary full-resolution logits from coarser levels (deep supervision only).
    pub aux_logits: Vec<Var>,
    pub count_pred: Option<Var>,
    pub exist_logits: Var,
    pub alphas: [Option<Var>; 3],
    pub token_gates: [Option<Var>; 3],
}

/// Scalar loss terms of one sample.
pub struct LossVars {
    pub total: Var,
    pub mask: Var,
    pub count: Option<Var>,
    pub exist: Var,
}

/// Inference output of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mask: Vec<u8>,
    /// Existence decision (`false` means "no target").
    pub exist: bool,
    pub exist_prob: f64,
    pub counts: Option<Vec<f64>>,
    pub alphas: Vec<Option<f64>>,
    pub token_gates: Vec<Option<Vec<f64>>>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, shape: DataShape) -> Result<Self> {
        cfg.validate()?;
        let encoder = ToyEncoder::new(cfg.dim, shape.grid_hw, shape.n_cell_classes, shape.vocab_size, cfg.max_len, cfg.pos_embed)?;
        let level_hw = encoder.level_dims();
        let levels = if cfg.hsd_off { vec![2] } else { layer_levels(cfg.sdm_layers) };
        let layers = levels
            .iter()
            .enumerate()
            .map(|(j, &lv)| SdmLayer::new(j, level_hw[lv].0 * level_hw[lv].1, cfg))
            .collect();
        let dha = Dha::new(cfg, level_hw, shape.grid_hw)?;
        let aoc = Aoc::new(cfg, shape.n_categories, levels.len())?;
        Ok(Self { cfg: cfg.clone(), shape, encoder, layers, levels, dha, aoc })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.encoder.init(store, rng);
        for l in &self.layers {
            l.init(store, rng);
        }
        self.dha.init(store, rng);
        self.aoc.init(store, rng);
    }

    pub fn forward(&self, s: &mut Session, grid: &Grid, tokens: &[usize]) -> Result<ForwardVars> {
        let vis = self.encoder.image_vars(s, grid)?;
        let (_, _, lang) = self.encoder.text_vars(s, tokens)?;
        let mut q = lang;
        let mut queries = Vec::with_capacity(self.layers.len());
        let mut maps: [Option<(Var, Var)>; 3] = [None, None, None];
        for (layer, &lv) in self.layers.iter().zip(&self.levels) {
            let b = layer.run_level(s, q, vis[lv], lang)?;
            q = b.query;
            queries.push(q);
            maps[lv] = Some((b.semantic_map, b.query));
        }

        let mut selected: [Option<Var>; 3] = [None, None, None];
        let mut alphas: [Option<Var>; 3] = [None, None, None];
        let mut token_gates: [Option<Var>; 3] = [None, None, None];
        for (i, entry) in maps.iter().enumerate() {
            let Some((m, qi)) = *entry else { continue };
            if self.cfg.hsd_off {
                selected[i] = Some(m);
                continue;
            }
            let (m2, w) = self.dha.intra_select(s, i, m)?;
            selected[i] = Some(m2);
            token_gates[i] = Some(w);
            alphas[i] = Some(self.dha.inter_select(s, qi)?);
        }
        let m_star = self.dha.aggregate(s, &selected, &alphas)?;
        let kernel = self.dha.kernel(s, q)?;
        let logits = self.dha.apply_kernel(s, m_star, kernel)?;

        let mut aux_logits = Vec::new();
        if self.cfg.deep_supervision {
            for i in 0..2 {
                if let Some(m) = selected[i] {
                    let lifted = self.dha.lift_to_finest(s, i, m)?;
                    aux_logits.push(self.dha.apply_kernel(s, lifted, kernel)?);
                }
            }
        }

        let counts = self.aoc.count_forward(s, &queries)?;
        Ok(ForwardVars { logits, aux_logits, count_pred: counts.pred, exist_logits: counts.exist_logits, alphas, token_gates })
    }

    /// Weighted training objective of one sample. Deep-supervision terms join the mask term.
    pub fn loss(&self, s: &mut Session, f: &ForwardVars, sample: &GresSample, w: &LossWeights) -> Result<LossVars> {
        if sample.gt_counts.len() != self.shape.n_categories {
            return Err(Error::Config(format!(
                "sample has {} count categories, model has {}",
                sample.gt_counts.len(),
                self.shape.n_categories
            )));
        }
        let mut mask = mask_loss_var(s, f.logits, &sample.gt_mask)?;
        for &aux in &f.aux_logits {
            let a = mask_loss_var(s, aux, &sample.gt_mask)?;
            mask = s.graph.add(mask, a)?;
        }
        let count = match (self.cfg.aoc, f.count_pred) {
            (AocMode::Full, Some(p)) => Some(s.graph.smooth_l1_mean(p, &Tensor::row(sample.gt_counts.clone()))?),
            _ => None,
        };
        let exist = s.graph.cross_entropy_mean(f.exist_logits, &[sample.gt_exist as usize])?;
        let total = total_loss_var(s, mask, count, exist, w)?;
        Ok(LossVars { total, mask, count, exist })
    }

    pub fn predict(&self, store: &ParamStore, grid: &Grid, tokens: &[usize]) -> Result<Prediction> {
        let mut s = Session::new(store);
        let f = self.forward(&mut s, grid, tokens)?;
        let g = &s.graph;
        let out = MaskLogits {
            logits: g.value(f.logits).clone(),
            alphas: f.alphas.iter().map(|a| a.map(|v| g.value(v).item())).collect(),
            token_gates: f.token_gates.iter().map(|w| w.map(|v| g.value(v).data().to_vec())).collect(),
        };
        let e = g.value(f.exist_logits).data();
        let exist = e[1] > e[0];
        let exist_prob = crate::numerics::tensor::sigmoid_scalar(e[1] - e[0]);
        let mask = if exist { out.binary_mask().into_iter().map(u8::from).collect() } else { vec![0; out.logits.rows()] };
        Ok(Prediction {
            mask,
            exist,
            exist_prob,
            counts: f.count_pred.map(|v| g.value(v).data().to_vec()),
            alphas: out.alphas,
            token_gates: out.token_gates,
        })
    }
}
