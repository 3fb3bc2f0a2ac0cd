//! Oracle checks shared by the unit-style test files and the acceptance runner.

use cohd_core::aoc::{smooth_l1, Aoc};
use cohd_core::config::{AocMode, ModelConfig};
use cohd_core::dha::{aggregate_unrolled, Dha};
use cohd_core::numerics::{ParamStore, Session, Tensor, UpsampleMode};
use cohd_core::sdm::{MultiHeadAttention, SdmLayer};
use super::*;
use cohd_core::metrics::{self, EvalRecord};
use cohd_core::synthgres::{rle_decode, rle_encode};
use rand::Rng;

pub fn close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} > {tol:e}\n{a:?}\n{b:?}");
}

pub fn identity_layer(d: usize, hw: usize) -> (SdmLayer, ParamStore) {
    let cfg = ModelConfig { dim: d, n_heads: 1, ..ModelConfig::default() };
    let layer = SdmLayer::new(0, hw, &cfg);
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut rng(0));
    for k in ["wk_l", "wk_v", "wv_l", "wv_v"] {
        store.insert(format!("sdm.0.{k}.weight"), Tensor::eye(d));
    }
    (layer, store)
}

pub fn fine_map_hand_example() {
    // L = I₂, V = [[1,0],[0,1],[1,1]], all projections identity
    let (layer, store) = identity_layer(2, 3);
    let l = Tensor::eye(2);
    let v = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap();
    let mut s = Session::new(&store);
    let (lv, vv) = (s.graph.constant(l), s.graph.constant(v));
    let f = layer.fine_map(&mut s, lv, vv).unwrap();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    close(s.graph.value(f.coarse), &Tensor::from_rows(&[&[r, 0.0, r], &[0.0, r, r]]).unwrap(), 1e-15);
    let f_lv = Tensor::from_rows(&[&[0.8022241853595719, 0.5988879073202141], &[0.5988879073202141, 0.8022241853595719]]).unwrap();
    let f_vl = Tensor::from_rows(&[&[0.6697615493266569, 0.3302384506733431], &[0.3302384506733431, 0.6697615493266569], &[0.5, 0.5]]).unwrap();
    let sem = Tensor::from_rows(&[&[0.7350747279341703, 0.6660373647456157, 0.700556046339893], &[0.6660373647456158, 0.7350747279341703, 0.700556046339893]]).unwrap();
    close(s.graph.value(f.lang_to_vis), &f_lv, 1e-14);
    close(s.graph.value(f.vis_to_lang), &f_vl, 1e-14);
    close(s.graph.value(f.semantic), &sem, 1e-14);
}

pub fn fine_map_matches_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (d, n, hw) = (4, r.gen_range(1..6), r.gen_range(1..10));
        let cfg = ModelConfig { dim: d, n_heads: 2, ..ModelConfig::default() };
        let layer = SdmLayer::new(3, hw, &cfg);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut r);
        let (l, v) = (rand_tensor(&mut r, n, d), rand_tensor(&mut r, hw, d));
        let (s, f_lv, f_vl) = layer.eval_fine_map(&store, &l, &v).unwrap();
        let (os, olv, ovl) = fine_map_oracle(&store, "sdm.3", &l, &v);
        close(&s, &os, 1e-12);
        close(&f_lv, &olv, 1e-12);
        close(&f_vl, &ovl, 1e-12);
    }
}

pub fn single_head_attention_matches_loop_oracle() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (d, nq, nk) = (3, r.gen_range(1..5), r.gen_range(1..5));
        let mha = MultiHeadAttention::new("att", d, 1);
        let mut store = ParamStore::new();
        mha.init(&mut store, &mut r);
        jitter(&mut store, &mut r, 0.2);
        let (q, k, v) = (rand_tensor(&mut r, nq, d), rand_tensor(&mut r, nk, d), rand_tensor(&mut r, nk, d));
        let lin = |x: &Tensor, name: &str| -> Tensor {
            let y = naive_matmul(x, store.get(&format!("att.{name}.weight")).unwrap());
            let b = store.get(&format!("att.{name}.bias")).unwrap();
            Tensor::matrix(y.rows(), y.cols(), (0..y.len()).map(|i| y.data()[i] + b.data()[i % y.cols()]).collect()).unwrap()
        };
        let (qp, kp, vp) = (lin(&q, "q"), lin(&k, "k"), lin(&v, "v"));
        let sc = naive_matmul(&qp, &naive_transpose(&kp));
        let sc = Tensor::matrix(sc.rows(), sc.cols(), sc.data().iter().map(|x| x / (d as f64).sqrt()).collect()).unwrap();
        let expect = lin(&naive_matmul(&naive_softmax_rows(&sc), &vp), "o");
        let mut s = Session::new(&store);
        let (qv, kv, vv) = (s.graph.constant(q), s.graph.constant(k), s.graph.constant(v));
        let out = mha.forward(&mut s, qv, kv, vv).unwrap();
        close(s.graph.value(out), &expect, 1e-12);
    }
}

pub fn cascade_is_identity_with_silent_attention_and_passthrough_reactivation() {
    // zero MHA output + residual gives Q'' = Q; reactivation weight [I; 0] then returns Q
    let d = 4;
    let cfg = ModelConfig { dim: d, n_heads: 2, ..ModelConfig::default() };
    let mut r = rng(7);
    let layers: Vec<SdmLayer> = (0..3).map(|j| SdmLayer::new(j, 4 << (2 * j), &cfg)).collect();
    let mut store = ParamStore::new();
    for l in &layers {
        l.init(&mut store, &mut r);
    }
    let mut pass = vec![0.0; 2 * d * d];
    for i in 0..d {
        pass[i * d + i] = 1.0;
    }
    for j in 0..3 {
        store.zero_prefix(&format!("sdm.{j}.mha.o"));
        store.insert(format!("sdm.{j}.react.weight"), Tensor::matrix(2 * d, d, pass.clone()).unwrap());
    }
    let l = rand_tensor(&mut r, 5, d);
    let mut s = Session::new(&store);
    let lv = s.graph.constant(l.clone());
    let mut q = lv;
    for (j, layer) in layers.iter().enumerate() {
        let v = s.graph.constant(rand_tensor(&mut r, 4 << (2 * j), d));
        q = layer.run_level(&mut s, q, v, lv).unwrap().query;
    }
    assert_eq!(s.graph.value(q), &l);
}

pub fn recursive_aggregation_equals_unrolled_sum() {
    let level_hw = [(2, 2), (4, 4), (8, 8)];
    for seed in 0..20 {
        let mut r = rng(seed);
        let mode = if seed % 2 == 0 { UpsampleMode::Bilinear } else { UpsampleMode::Nearest };
        let dha = Dha::new(&ModelConfig { upsample_mode: mode, ..small_cfg() }, level_hw, (16, 16)).unwrap();
        let n = r.gen_range(1..6);
        let maps = level_hw.map(|(h, w)| rand_tensor(&mut r, n, h * w));
        let alphas = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let mv = maps.clone().map(|m| Some(s.graph.constant(m)));
        let av = alphas.map(|a| Some(s.graph.constant(Tensor::scalar(a))));
        let out = dha.aggregate(&mut s, &mv, &av).unwrap();
        let expect = aggregate_unrolled(&maps, alphas, level_hw, mode).unwrap();
        close(s.graph.value(out), &expect, 1e-10);
    }
}

pub fn kernel_decoding_is_a_matrix_product() {
    // target at the finest level resolution makes the final resize the identity
    let level_hw = [(1, 1), (2, 2), (4, 4)];
    for seed in 0..10 {
        let mut r = rng(seed);
        let dha = Dha::new(&small_cfg(), level_hw, (4, 4)).unwrap();
        let mut store = ParamStore::new();
        dha.init(&mut store, &mut r);
        let n = r.gen_range(1..=5);
        let (m, q) = (rand_tensor(&mut r, n, 16), rand_tensor(&mut r, n, 4));
        let mut s = Session::new(&store);
        let (mv, qv) = (s.graph.constant(m.clone()), s.graph.constant(q));
        let b = dha.kernel(&mut s, qv).unwrap();
        let logits = dha.apply_kernel(&mut s, mv, b).unwrap();
        let expect = naive_matmul(&naive_transpose(&m), s.graph.value(b));
        close(s.graph.value(logits), &expect, 1e-12);
    }
}

pub fn smooth_l1_piecewise_values_are_exact() {
    for (x, y) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-0.5, 0.125), (-2.0, 1.5), (1.0, 0.5)] {
        assert_eq!(smooth_l1(&[x], &[0.0]).unwrap(), y);
    }
}

pub fn existence_loss_does_not_reach_upstream() {
    let cfg = ModelConfig { dim: 4, n_heads: 2, aoc: AocMode::Full, ..ModelConfig::default() };
    for seed in 0..10 {
        let mut r = rng(seed);
        let aoc = Aoc::new(&cfg, 3, 3).unwrap();
        let mut store = ParamStore::new();
        aoc.init(&mut store, &mut r);
        let mut s = Session::new(&store);
        let qs: Vec<_> = (0..3).map(|_| s.graph.leaf(rand_tensor(&mut r, 4, 4))).collect();
        let c = aoc.count_forward(&mut s, &qs).unwrap();
        let loss = s.graph.cross_entropy_mean(c.exist_logits, &[seed as usize % 2]).unwrap();
        let g = s.graph.backward(loss).unwrap();
        for &q in &qs {
            assert!(g.get(q).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        }
        let pg = s.param_grads(&g);
        assert!(pg.keys().all(|k| k.starts_with("aoc.exist")), "{:?}", pg.keys().collect::<Vec<_>>());
        assert!(pg.values().any(|t| t.data().iter().any(|&v| v != 0.0)));
    }
}

pub fn metrics_match_brute_force_pixel_counts() {
    for seed in 0..5 {
        let pairs = random_pairs(seed, 100);
        let recs = records(&pairs);
        let (g, c, m) = brute_metrics(&pairs);
        assert!((metrics::giou(&recs).unwrap() - g).abs() <= 1e-12);
        assert!((metrics::ciou(&recs).unwrap() - c).abs() <= 1e-12);
        assert!((metrics::miou(&recs).unwrap() - m).abs() <= 1e-12);
    }
}

pub fn empty_target_conventions() {
    let gt_empty = vec![0u8; 9];
    let some = vec![0, 1, 1, 0, 0, 0, 0, 0, 0];
    // true negative scores 1
    let tn = EvalRecord::from_masks(0, &gt_empty, &gt_empty, true).unwrap();
    assert_eq!(metrics::giou(&[tn.clone()]).unwrap(), 1.0);
    // false positive on an empty target scores 0
    let fp = EvalRecord::from_masks(0, &some, &gt_empty, false).unwrap();
    assert_eq!(metrics::giou(&[fp.clone()]).unwrap(), 0.0);
    // false negative on a real target scores 0
    let fn_ = EvalRecord::from_masks(0, &some, &some, true).unwrap();
    assert_eq!(metrics::giou(&[fn_.clone()]).unwrap(), 0.0);
    assert_eq!(metrics::n_acc(&[tn, fp, fn_]).unwrap(), 0.5);
}

pub fn rle_exhaustive_3x3() {
    for bits in 0u32..512 {
        let m: Vec<u8> = (0..9).map(|i| ((bits >> i) & 1) as u8).collect();
        assert_eq!(rle_decode(&rle_encode(&m, 3, 3).unwrap(), 3, 3).unwrap(), m);
    }
}

pub fn records(pairs: &[(Vec<u8>, Vec<u8>)]) -> Vec<EvalRecord> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (p, g))| EvalRecord::from_masks(i as u64, p, g, p.iter().all(|&x| x == 0)).unwrap())
        .collect()
}

pub fn random_pairs(seed: u64, n: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let len = r.gen_range(1..80);
            let (dp, dg) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
            // some empty targets and empty predictions on purpose
            let gt_empty = r.gen_bool(0.2);
            let p_empty = r.gen_bool(0.2);
            let p = (0..len).map(|_| u8::from(!p_empty && r.gen_bool(dp))).collect();
            let g = (0..len).map(|_| u8::from(!gt_empty && r.gen_bool(dg))).collect();
            (p, g)
        })
        .collect()
}
