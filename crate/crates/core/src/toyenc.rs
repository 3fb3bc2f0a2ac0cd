//! Small trainable encoders standing in for the visual and language backbones.
//!
//! The visual side embeds every grid cell, average-pools the embeddings at
//! strides 8/4/2 and projects each level with its own linear map, giving a
//! three-level octave pyramid ordered coarsest first. Pooling embeddings is
//! the same as multiplying a per-window class histogram by the embedding
//! table, which is how it is computed here.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Linear, ParamStore, Session, Tensor, Var};

/// Pooling strides of the three pyramid levels, coarsest first.
pub const STRIDES: [usize; 3] = [8, 4, 2];

/// Image as a grid of cell class ids (0 = background).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<u16>,
}

impl Grid {
    pub fn new(h: usize, w: usize, cells: Vec<u16>) -> Result<Self> {
        if cells.len() != h * w {
            return Err(Error::Shape(format!("grid {h}×{w} with {} cells", cells.len())));
        }
        Ok(Self { h, w, cells })
    }

    pub fn background(h: usize, w: usize) -> Self {
        Self { h, w, cells: vec![0; h * w] }
    }

    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.cells[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u16) {
        self.cells[y * self.w + x] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    /// Level `i` is `[H_i·W_i × D]`.
    pub levels: Vec<Tensor>,
    pub dims: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageFeatures {
    pub word: Tensor,
    pub sentence: Tensor,
    /// `[word; sentence]`, `N = T + 1` rows.
    pub query: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub dim: usize,
    pub grid_hw: (usize, usize),
    pub n_cell_classes: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub pos_embed: bool,
    level_proj: Vec<Linear>,
    sentence_proj: Linear,
}

pub fn level_dims(grid_hw: (usize, usize)) -> [(usize, usize); 3] {
    STRIDES.map(|s| (grid_hw.0 / s, grid_hw.1 / s))
}

/// Row `p` holds the class histogram of pooling window `p`, divided by the window area.
pub fn pooling_matrix(grid: &Grid, stride: usize, n_classes: usize) -> Result<Tensor> {
    let (h, w) = (grid.h / stride, grid.w / stride);
    let area = (stride * stride) as f64;
    let mut data = vec![0.0; h * w * n_classes];
    for y in 0..grid.h {
        for x in 0..grid.w {
            let c = grid.at(y, x) as usize;
            if c >= n_classes {
                return Err(Error::Input(format!("cell class {c} at ({y},{x}) outside {n_classes} classes")));
            }
            let p = (y / stride) * w + x / stride;
            data[p * n_classes + c] += 1.0 / area;
        }
    }
    Tensor::from_parts(vec![h * w, n_classes], data)
}

impl ToyEncoder {
    pub fn new(dim: usize, grid_hw: (usize, usize), n_cell_classes: usize, vocab_size: usize, max_len: usize, pos_embed: bool) -> Result<Self> {
        if grid_hw.0 == 0 || grid_hw.1 == 0 || grid_hw.0 % 8 != 0 || grid_hw.1 % 8 != 0 {
            return Err(Error::Config(format!("grid {}×{} must be positive multiples of 8", grid_hw.0, grid_hw.1)));
        }
        let level_proj = (0..3).map(|i| Linear::new(format!("enc.level{i}"), dim, dim)).collect();
        Ok(Self {
            dim,
            grid_hw,
            n_cell_classes,
            vocab_size,
            max_len,
            pos_embed,
            level_proj,
            sentence_proj: Linear::new("enc.sentence", dim, dim),
        })
    }

    pub fn level_dims(&self) -> [(usize, usize); 3] {
        level_dims(self.grid_hw)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.dim;
        store.insert("enc.cell_embed", crate::numerics::glorot(self.n_cell_classes, d, self.n_cell_classes, d, rng));
        store.insert("enc.tok_embed", crate::numerics::glorot(self.vocab_size, d, self.vocab_size, d, rng));
        for (i, l) in self.level_proj.iter().enumerate() {
            if self.pos_embed {
                let (h, w) = self.level_dims()[i];
                store.insert(format!("enc.pos{i}"), crate::numerics::glorot(h * w, d, h * w, d, rng).scale(0.5));
            }
            l.init(store, rng);
        }
        self.sentence_proj.init(store, rng);
    }

    /// Pyramid levels as graph variables, coarsest first.
    pub fn image_vars(&self, s: &mut Session, grid: &Grid) -> Result<Vec<Var>> {
        if (grid.h, grid.w) != self.grid_hw {
            return Err(Error::Config(format!("grid {}×{} does not match encoder {}×{}", grid.h, grid.w, self.grid_hw.0, self.grid_hw.1)));
        }
        let table = s.param("enc.cell_embed")?;
        let mut out = Vec::with_capacity(3);
        for (i, &stride) in STRIDES.iter().enumerate() {
            let pool = s.graph.constant(pooling_matrix(grid, stride, self.n_cell_classes)?);
            let mut f = s.graph.matmul(pool, table)?;
            if self.pos_embed {
                let pos = s.param(&format!("enc.pos{i}"))?;
                f = s.graph.add(f, pos)?;
            }
            out.push(self.level_proj[i].forward(s, f)?);
        }
        Ok(out)
    }

    /// `(word, sentence, query)` graph variables.
    pub fn text_vars(&self, s: &mut Session, tokens: &[usize]) -> Result<(Var, Var, Var)> {
        if tokens.is_empty() {
            return Err(Error::Input("expression has no tokens".into()));
        }
        if tokens.len() > self.max_len {
            return Err(Error::Input(format!("expression has {} tokens, max is {}", tokens.len(), self.max_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Vocabulary(bad));
        }
        let table = s.param("enc.tok_embed")?;
        let word = s.graph.gather_rows(table, tokens)?;
        let pooled = s.graph.mean_rows(word);
        let sentence = self.sentence_proj.forward(s, pooled)?;
        let query = s.graph.concat_rows(&[word, sentence])?;
        Ok((word, sentence, query))
    }

    pub fn encode_image(&self, store: &ParamStore, grid: &Grid) -> Result<VisualFeatures> {
        let mut s = Session::new(store);
        let vars = self.image_vars(&mut s, grid)?;
        Ok(VisualFeatures {
            levels: vars.iter().map(|&v| s.graph.value(v).clone()).collect(),
            dims: self.level_dims().to_vec(),
        })
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &[usize]) -> Result<LanguageFeatures> {
        let mut s = Session::new(store);
        let (w, se, q) = self.text_vars(&mut s, tokens)?;
        Ok(LanguageFeatures {
            word: s.graph.value(w).clone(),
            sentence: s.graph.value(se).clone(),
            query: s.graph.value(q).clone(),
        })
    }
}
