//! Deterministic single-threaded training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Session, Tensor};
use crate::synthgres::GresSample;

use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::model::{DataShape, Model};
use super::optim::{lr_at, AdamW};

/// One line of the JSON-lines training log (batch means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub mask_l: f64,
    pub count_l: f64,
    pub exist_l: f64,
    pub lr: f64,
}

pub struct Trained {
    pub model: Model,
    pub params: ParamStore,
    pub log: Vec<LogLine>,
}

impl Trained {
    pub fn checkpoint(&self, cfg: &Config) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                model: self.model.cfg.clone(),
                data: self.model.shape,
                seed: cfg.seed,
                steps: cfg.optim.steps,
                n_params: self.params.len(),
            },
            params: self.params.clone(),
        }
    }
}

/// Seeded initial parameters, rounded to f32 so a checkpoint stores them exactly.
pub fn initial_params(model: &Model, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    store.round_to_f32();
    store
}

/// Mean loss terms and parameter gradients over `batch`.
pub fn batch_gradients(model: &Model, store: &ParamStore, cfg: &Config, batch: &[&GresSample]) -> Result<([f64; 4], BTreeMap<String, Tensor>)> {
    let mut sums = [0.0; 4];
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let mut s = Session::new(store);
        let f = model.forward(&mut s, &sample.grid, &sample.tokens)?;
        let l = model.loss(&mut s, &f, sample, &cfg.loss)?;
        let g = &s.graph;
        sums[0] += g.value(l.total).item();
        sums[1] += g.value(l.mask).item();
        sums[2] += l.count.map_or(0.0, |c| g.value(c).item());
        sums[3] += g.value(l.exist).item();
        let back = s.graph.backward(l.total)?;
        for (k, gk) in s.param_grads(&back) {
            match grads.get_mut(&k) {
                Some(acc) => *acc = acc.add(&gk.scale(scale))?,
                None => {
                    grads.insert(k, gk.scale(scale));
                }
            }
        }
    }
    Ok((sums.map(|v| v * scale), grads))
}

/// Trains from the seeded initialisation, writing one JSON line per step to `log`.
pub fn train(cfg: &Config, shape: DataShape, samples: &[GresSample], mut log: impl Write) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let model = Model::new(&cfg.model, shape)?;
    let mut store = initial_params(&model, cfg.seed);
    let mut opt = AdamW::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut lines = Vec::with_capacity(cfg.optim.steps);
    let bs = cfg.optim.batch.min(samples.len());
    for step in 0..cfg.optim.steps {
        if order.len() < bs {
            let mut epoch: Vec<usize> = (0..samples.len()).collect();
            epoch.shuffle(&mut order_rng);
            order.extend(epoch);
        }
        let mut idx: Vec<usize> = order.drain(..bs).collect();
        idx.sort_unstable();
        let batch: Vec<&GresSample> = idx.iter().map(|&i| &samples[i]).collect();
        let (terms, grads) = batch_gradients(&model, &store, cfg, &batch)?;
        if terms.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let lr = lr_at(&cfg.optim, step);
        opt.step(&cfg.optim, &mut store, &grads, lr)?;
        store.round_to_f32();
        let line = LogLine { step, loss: terms[0], mask_l: terms[1], count_l: terms[2], exist_l: terms[3], lr };
        writeln!(log, "{}", serde_json::to_string(&line)?)?;
        lines.push(line);
    }
    Ok(Trained { model, params: store, log: lines })
}
