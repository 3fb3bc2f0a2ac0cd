//! Parameter store, recording session and the two layer types every module is built from.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Graph, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Learnable weights keyed by dotted module path (`sdm.0.wk_v.weight`, ...).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor) {
        self.params.insert(key.into(), t);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.params.get(key).ok_or_else(|| Error::Config(format!("missing parameter {key}")))
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.params.get_mut(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Sets every parameter whose key starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, t) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// One forward pass: a graph plus the parameter leaves it has pulled in.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, vars: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for parameter `key`, created on first use.
    pub fn param(&mut self, key: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(key) {
            return Ok(v);
        }
        let t = self.store.get(key)?.clone();
        let v = self.graph.leaf(t);
        self.vars.insert(key.to_string(), v);
        Ok(v)
    }

    /// Parameter keys read during this pass.
    pub fn used_params(&self) -> BTreeSet<String> {
        self.vars.keys().cloned().collect()
    }

    /// Gradients for each parameter that lies on a path to the output.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Glorot-uniform sample in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_parts(vec![rows, cols], data).expect("positive dims")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

/// Affine map `x·W + b` with `W: [in×out]` stored at `{name}.weight`, `b` at `{name}.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { name: name.into(), in_dim, out_dim, bias: true }
    }

    pub fn no_bias(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { bias: false, ..Self::new(name, in_dim, out_dim) }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(self.weight_key(), glorot(self.in_dim, self.out_dim, self.in_dim, self.out_dim, rng));
        if self.bias {
            store.insert(self.bias_key(), Tensor::zeros(1, self.out_dim));
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let cols = s.graph.value(x).cols();
        if cols != self.in_dim {
            return Err(shape_err!("{}: expects {} input features, got {cols}", self.name, self.in_dim));
        }
        let w = s.param(&self.weight_key())?;
        let y = s.graph.matmul(x, w)?;
        if self.bias {
            let b = s.param(&self.bias_key())?;
            s.graph.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Chain of [`Linear`] layers with an activation between layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`, at least two entries.
    pub fn new(name: &str, dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an Mlp needs at least one layer");
        let layers = dims.windows(2).enumerate().map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(s, h)?;
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Relu => s.graph.relu(h),
                    Activation::Gelu => s.graph.gelu(h),
                };
            }
        }
        Ok(h)
    }
}

/// Pure evaluation of `m` on `x` with weights from `store`.
pub fn mlp_forward(m: &Mlp, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut s = Session::new(store);
    let xv = s.graph.constant(x.clone());
    let y = m.forward(&mut s, xv)?;
    Ok(s.graph.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let m = Mlp::new("m", &[3, 3], Activation::Relu);
        let mut store = ParamStore::new();
        store.insert("m.0.weight", Tensor::eye(3));
        store.insert("m.0.bias", Tensor::zeros(1, 3));
        let x = Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, -0.5]]).unwrap();
        assert_eq!(mlp_forward(&m, &store, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let m = Mlp::new("m", &[2, 3], Activation::Relu);
        let mut store = ParamStore::new();
        store.insert("m.0.weight", Tensor::zeros(2, 3));
        store.insert("m.0.bias", Tensor::row(vec![1.0, -1.0, 2.5]));
        let x = Tensor::from_rows(&[&[4.0, 5.0], &[-6.0, 7.0]]).unwrap();
        let y = mlp_forward(&m, &store, &x).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0, 2.5, 1.0, -1.0, 2.5]);
    }

    #[test]
    fn two_layer_relu_hand_value() {
        // h = relu(x·W0 + b0), y = h·W1 + b1, worked by hand:
        // x = [1, 2]; W0 = [[1, -1], [0.5, 1]]; b0 = [0, -4]
        // x·W0 + b0 = [2, 1 - 4] = [2, -3] -> relu [2, 0]
        // W1 = [[3], [7]], b1 = [0.5] -> y = 6.5
        let m = Mlp::new("m", &[2, 2, 1], Activation::Relu);
        let mut store = ParamStore::new();
        store.insert("m.0.weight", Tensor::from_rows(&[&[1.0, -1.0], &[0.5, 1.0]]).unwrap());
        store.insert("m.0.bias", Tensor::row(vec![0.0, -4.0]));
        store.insert("m.1.weight", Tensor::from_rows(&[&[3.0], &[7.0]]).unwrap());
        store.insert("m.1.bias", Tensor::row(vec![0.5]));
        let y = mlp_forward(&m, &store, &Tensor::row(vec![1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[6.5]);
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let m = Mlp::new("m", &[4, 2], Activation::Relu);
        let mut store = ParamStore::new();
        m.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let r = mlp_forward(&m, &store, &Tensor::zeros(1, 3));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = glorot(20, 30, 20, 30, &mut rng);
        let a = (6.0f64 / 50.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < a));
    }
}
