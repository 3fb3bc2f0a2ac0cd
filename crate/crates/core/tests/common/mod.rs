#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeSet;

use cohd_core::aoc::Aoc;
use cohd_core::config::{LossWeights, ModelConfig};
use cohd_core::dha::Dha;
use cohd_core::losses::{mask_loss_var, total_loss_var};
use cohd_core::numerics::{finite_diff_grad, relative_error, ParamStore, Session, Tensor, UpsampleMode, Var};
use cohd_core::sdm::SdmLayer;
use cohd_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn small_cfg() -> ModelConfig {
    ModelConfig { dim: 4, n_heads: 2, max_len: 4, ..ModelConfig::default() }
}

/// Adds uniform noise to every parameter so biases are not all zero.
pub fn jitter(store: &mut ParamStore, rng: &mut impl Rng, amp: f64) {
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-amp..amp));
    }
}

/// `Σ R ⊙ x` for a fixed random `R`: a scalar that depends on every entry of `x`.
pub fn project(s: &mut Session, x: Var, r: &Tensor) -> Result<Var> {
    let c = s.graph.constant(r.clone());
    let p = s.graph.mul(x, c)?;
    Ok(s.graph.sum_all(p))
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the concatenation of every checked gradient.
    pub max_rel: f64,
    /// Tensor with the largest absolute discrepancy.
    pub worst: String,
    pub checked: usize,
}

/// Compares analytic gradients of `build` against central differences, for every input and every parameter read.
///
/// The error is measured on the full gradient vector. Per-tensor ratios are
/// meaningless for tensors whose exact gradient is zero (e.g. attention key
/// biases, which softmax cancels): both sides are then pure rounding noise.
pub fn check_grads(store: &ParamStore, inputs: &[Tensor], build: impl Fn(&mut Session, &[Var]) -> Result<Var>) -> Result<GradReport> {
    check_grads_of(store, inputs, |_| true, build)
}

/// [`check_grads`] restricted to the parameters whose key satisfies `keep`.
pub fn check_grads_of(
    store: &ParamStore,
    inputs: &[Tensor],
    keep: impl Fn(&str) -> bool,
    build: impl Fn(&mut Session, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let eval = |st: &ParamStore, inp: &[Tensor]| -> Result<f64> {
        let mut s = Session::new(st);
        let vars: Vec<Var> = inp.iter().map(|t| s.graph.leaf(t.clone())).collect();
        let out = build(&mut s, &vars)?;
        Ok(s.graph.value(out).item())
    };
    let mut s = Session::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| s.graph.leaf(t.clone())).collect();
    let out = build(&mut s, &vars)?;
    let grads = s.graph.backward(out)?;
    let pg = s.param_grads(&grads);
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let (mut worst, mut worst_abs) = (String::new(), -1.0);
    let mut note = |name: String, a: &Tensor, n: &Tensor| {
        let abs = a.max_abs_diff(n);
        if abs > worst_abs {
            worst_abs = abs;
            worst = name;
        }
        all_a.extend_from_slice(a.data());
        all_n.extend_from_slice(n.data());
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x);
        let numeric = finite_diff_grad(
            |p| {
                let mut inp = inputs.to_vec();
                inp[i] = p.clone();
                eval(store, &inp)
            },
            x,
            H,
        )?;
        note(format!("input{i}"), &analytic, &numeric);
    }
    for key in s.used_params().into_iter().filter(|k| keep(k)) {
        let p = store.get(&key)?;
        let analytic = pg.get(&key).cloned().unwrap_or_else(|| Tensor::from_parts(p.shape().to_vec(), vec![0.0; p.len()]).unwrap());
        let numeric = finite_diff_grad(
            |probe| {
                let mut st = store.clone();
                *st.get_mut(&key).unwrap() = probe.clone();
                eval(&st, inputs)
            },
            p,
            H,
        )?;
        note(key, &analytic, &numeric);
    }
    let n = all_a.len();
    let max_rel = if n == 0 { 0.0 } else { relative_error(&Tensor::row(all_a), &Tensor::row(all_n)) };
    Ok(GradReport { max_rel, worst, checked: n })
}

/// The six operations of the gradient criterion.
pub const GRAD_TARGETS: [&str; 6] = ["sdm.run_level", "dha.aggregate", "dha.decode_mask", "aoc.count_forward", "losses.mask_loss", "losses.total_loss"];

/// One seeded random instance of `target`.
pub fn grad_instance(target: &str, seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let cfg = small_cfg();
    let n = r.gen_range(2..=cfg.max_tokens());
    match target {
        "sdm.run_level" => {
            let hw = 4;
            let layer = SdmLayer::new(0, hw, &cfg);
            let mut store = ParamStore::new();
            layer.init(&mut store, &mut r);
            jitter(&mut store, &mut r, 0.1);
            let inputs = [rand_tensor(&mut r, n, 4), rand_tensor(&mut r, hw, 4), rand_tensor(&mut r, n, 4)];
            let (rs, rq) = (rand_tensor(&mut r, n, hw), rand_tensor(&mut r, n, 4));
            check_grads(&store, &inputs, |s, v| {
                let b = layer.run_level(s, v[0], v[1], v[2])?;
                let a = project(s, b.semantic_map, &rs)?;
                let c = project(s, b.query, &rq)?;
                s.graph.add(a, c)
            })
        }
        "dha.aggregate" => {
            let level_hw = [(1, 1), (2, 2), (4, 4)];
            let mode = if seed % 2 == 0 { UpsampleMode::Bilinear } else { UpsampleMode::Nearest };
            let dha = Dha::new(&ModelConfig { upsample_mode: mode, ..cfg }, level_hw, (8, 8))?;
            let store = ParamStore::new();
            let mut inputs: Vec<Tensor> = level_hw.iter().map(|&(h, w)| rand_tensor(&mut r, n, h * w)).collect();
            inputs.extend((0..3).map(|_| Tensor::scalar(r.gen_range(0.05..1.0))));
            let rr = rand_tensor(&mut r, n, 16);
            check_grads(&store, &inputs, |s, v| {
                let out = dha.aggregate(s, &[Some(v[0]), Some(v[1]), Some(v[2])], &[Some(v[3]), Some(v[4]), Some(v[5])])?;
                project(s, out, &rr)
            })
        }
        "dha.decode_mask" => {
            let level_hw = [(1, 1), (2, 2), (4, 4)];
            let dha = Dha::new(&cfg, level_hw, (8, 8))?;
            let mut store = ParamStore::new();
            dha.init(&mut store, &mut r);
            jitter(&mut store, &mut r, 0.1);
            let inputs = [rand_tensor(&mut r, n, 16), rand_tensor(&mut r, n, 4)];
            let rr = rand_tensor(&mut r, 64, 2);
            check_grads(&store, &inputs, |s, v| {
                let out = dha.decode_mask(s, v[0], v[1])?;
                project(s, out, &rr)
            })
        }
        "aoc.count_forward" => {
            let aoc = Aoc::new(&cfg, 3, 3)?;
            let mut store = ParamStore::new();
            aoc.init(&mut store, &mut r);
            jitter(&mut store, &mut r, 0.1);
            let inputs = [rand_tensor(&mut r, n, 4), rand_tensor(&mut r, n, 4), rand_tensor(&mut r, n, 4)];
            let (r_fused, r_pred, r_exist) = (rand_tensor(&mut r, n, 3), rand_tensor(&mut r, 1, 3), rand_tensor(&mut r, 1, 2));
            // existence logits see only their own head; the count path into them is detached
            let counts = check_grads(&store, &inputs, |s, v| {
                let c = aoc.count_forward(s, v)?;
                let a = project(s, c.fused.unwrap(), &r_fused)?;
                let b = project(s, c.pred.unwrap(), &r_pred)?;
                s.graph.add(a, b)
            })?;
            let q = inputs.to_vec();
            let exist = check_grads_of(&store, &[], |k| k.starts_with("aoc.exist"), |s, _| {
                let vars: Vec<Var> = q.iter().map(|t| s.graph.constant(t.clone())).collect();
                let c = aoc.count_forward(s, &vars)?;
                project(s, c.exist_logits, &r_exist)
            })?;
            Ok(if exist.max_rel > counts.max_rel { exist } else { counts })
        }
        "losses.mask_loss" => {
            let hw = r.gen_range(4..=32);
            let gt: Vec<u8> = (0..hw).map(|_| r.gen_range(0..2)).collect();
            let inputs = [rand_tensor(&mut r, hw, 2).scale(3.0)];
            check_grads(&ParamStore::new(), &inputs, |s, v| mask_loss_var(s, v[0], &gt))
        }
        "losses.total_loss" => {
            let hw = 16;
            let gt: Vec<u8> = (0..hw).map(|_| r.gen_range(0..2)).collect();
            let counts = Tensor::row((0..4).map(|_| r.gen_range(0..4) as f64).collect());
            let label = r.gen_range(0..2usize);
            let w = LossWeights { lambda_mask: r.gen_range(0.5..3.0), lambda_count: r.gen_range(0.05..1.0), lambda_exist: r.gen_range(0.5..2.0) };
            // count predictions away from the |x| = 1 seam
            let pred = Tensor::row((0..4).map(|i| counts.data()[i] + [-2.3, -0.6, 0.4, 1.7][(i + seed as usize) % 4]).collect());
            let inputs = [rand_tensor(&mut r, hw, 2), pred, rand_tensor(&mut r, 1, 2)];
            check_grads(&ParamStore::new(), &inputs, |s, v| {
                let m = mask_loss_var(s, v[0], &gt)?;
                let c = s.graph.smooth_l1_mean(v[1], &counts)?;
                let e = s.graph.cross_entropy_mean(v[2], &[label])?;
                total_loss_var(s, m, Some(c), e, &w)
            })
        }
        other => panic!("unknown gradient target {other}"),
    }
}

/// Worst relative error over `seeds` instances of `target`.
pub fn grad_sweep(target: &str, seeds: u64) -> Result<GradReport> {
    let mut worst = GradReport { max_rel: 0.0, worst: String::new(), checked: 0 };
    for seed in 0..seeds {
        let r = grad_instance(target, seed)?;
        worst.checked += r.checked;
        if r.max_rel >= worst.max_rel {
            worst.max_rel = r.max_rel;
            worst.worst = format!("seed {seed} {}", r.worst);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------- plain-loop oracles

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.get(i, t) * b.get(t, j);
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

pub fn naive_transpose(a: &Tensor) -> Tensor {
    let (m, n) = a.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.get(i, j);
        }
    }
    Tensor::matrix(n, m, out).unwrap()
}

pub fn naive_softmax_rows(a: &Tensor) -> Tensor {
    let (m, n) = a.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let mx = (0..n).map(|j| a.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|j| (a.get(i, j) - mx).exp()).sum();
        for j in 0..n {
            out[i * n + j] = (a.get(i, j) - mx).exp() / z;
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

/// `(S, F_lv, F_vl)` from raw weights, by loops.
pub fn fine_map_oracle(store: &ParamStore, name: &str, l: &Tensor, v: &Tensor) -> (Tensor, Tensor, Tensor) {
    let w = |k: &str| store.get(&format!("{name}.{k}.weight")).unwrap().clone();
    let d = l.cols() as f64;
    let a = naive_matmul(&naive_matmul(l, &w("wk_l")), &naive_transpose(&naive_matmul(v, &w("wk_v"))));
    let a = Tensor::matrix(a.rows(), a.cols(), a.data().iter().map(|x| x / d.sqrt()).collect()).unwrap();
    let f_lv = naive_matmul(&naive_softmax_rows(&a), &naive_matmul(v, &w("wv_v")));
    let f_vl = naive_matmul(&naive_softmax_rows(&naive_transpose(&a)), &naive_matmul(l, &w("wv_l")));
    let s = naive_matmul(&f_lv, &naive_transpose(&f_vl));
    (s, f_lv, f_vl)
}

/// Brute-force pixel counting: `(|P ∧ G|, |P ∨ G|)`.
pub fn brute_counts(p: &[u8], g: &[u8]) -> (f64, f64) {
    let mut i = 0.0;
    let mut u = 0.0;
    for k in 0..p.len() {
        if p[k] == 1 && g[k] == 1 {
            i += 1.0;
        }
        if p[k] == 1 || g[k] == 1 {
            u += 1.0;
        }
    }
    (i, u)
}

/// `(gIoU, cIoU, mIoU)` with empty-target handling done pixel by pixel.
pub fn brute_metrics(pairs: &[(Vec<u8>, Vec<u8>)]) -> (f64, f64, f64) {
    let mut g = 0.0;
    let (mut ti, mut tu) = (0.0, 0.0);
    let (mut m, mut mn) = (0.0, 0.0);
    for (p, gt) in pairs {
        let (i, u) = brute_counts(p, gt);
        ti += i;
        tu += u;
        let gt_empty = gt.iter().all(|&x| x == 0);
        let p_empty = p.iter().all(|&x| x == 0);
        if gt_empty {
            g += if p_empty { 1.0 } else { 0.0 };
        } else {
            g += i / u;
            m += i / u;
            mn += 1.0;
        }
    }
    (g / pairs.len() as f64, ti / tu, m / mn)
}

pub fn param_set(keys: impl IntoIterator<Item = String>) -> BTreeSet<String> {
    keys.into_iter().collect()
}
