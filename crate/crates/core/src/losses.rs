//! Pixel mask loss and the weighted training objective.

use crate::config::LossWeights;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Session, Tensor, Var};

fn labels(gt_mask: &[u8]) -> Result<Vec<usize>> {
    gt_mask
        .iter()
        .map(|&v| match v {
            0 | 1 => Ok(v as usize),
            other => Err(Error::Input(format!("mask value {other} is not binary"))),
        })
        .collect()
}

/// Pixel-mean two-class cross entropy of `logits` `[H·W × 2]` against a binary mask.
pub fn mask_loss_var(s: &mut Session, logits: Var, gt_mask: &[u8]) -> Result<Var> {
    let rows = s.graph.value(logits).rows();
    if rows != gt_mask.len() {
        return Err(shape_err!("mask loss: {rows} logit rows vs {} mask pixels", gt_mask.len()));
    }
    let l = labels(gt_mask)?;
    s.graph.cross_entropy_mean(logits, &l)
}

pub fn mask_loss(logits: &Tensor, gt_mask: &[u8]) -> Result<f64> {
    let store = crate::numerics::ParamStore::new();
    let mut s = Session::new(&store);
    let v = s.graph.constant(logits.clone());
    let l = mask_loss_var(&mut s, v, gt_mask)?;
    Ok(s.graph.value(l).item())
}

/// `λ_mask·mask + λ_count·count + λ_exist·exist`.
pub fn total_loss(mask: f64, count: f64, exist: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("mask", mask), ("count", count), ("exist", exist)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite ({v})")));
        }
    }
    Ok(w.lambda_mask * mask + w.lambda_count * count + w.lambda_exist * exist)
}

/// Graph form of [`total_loss`]; absent components contribute nothing.
pub fn total_loss_var(s: &mut Session, mask: Var, count: Option<Var>, exist: Var, w: &LossWeights) -> Result<Var> {
    let mut total = s.graph.scale(mask, w.lambda_mask);
    if let Some(c) = count {
        let c = s.graph.scale(c, w.lambda_count);
        total = s.graph.add(total, c)?;
    }
    let e = s.graph.scale(exist, w.lambda_exist);
    s.graph.add(total, e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let l = Tensor::zeros(4, 2);
        for gt in [[0u8, 0, 0, 0], [1, 0, 1, 1]] {
            assert!((mask_loss(&l, &gt).unwrap() - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn confident_correct_logits() {
        let gt = [1u8, 0, 0, 1];
        let data: Vec<f64> = gt.iter().flat_map(|&g| if g == 1 { [-20.0, 20.0] } else { [20.0, -20.0] }).collect();
        let l = Tensor::matrix(4, 2, data).unwrap();
        assert!(mask_loss(&l, &gt).unwrap() < 1e-7);
    }

    #[test]
    fn pixelwise_hand_sum() {
        // per-pixel CE = logsumexp(row) - row[label]
        let rows: [[f64; 2]; 4] = [[0.5, -0.5], [2.0, 1.0], [-1.0, 3.0], [0.0, 0.25]];
        let gt = [0u8, 1, 1, 0];
        let mut expect = 0.0;
        for (r, &g) in rows.iter().zip(&gt) {
            let lse = (r[0].exp() + r[1].exp()).ln();
            expect += lse - r[g as usize];
        }
        expect /= 4.0;
        let l = Tensor::matrix(4, 2, rows.iter().flatten().copied().collect()).unwrap();
        assert!((mask_loss(&l, &gt).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn mask_loss_errors() {
        let l = Tensor::zeros(4, 2);
        assert!(matches!(mask_loss(&l, &[0, 1, 0]), Err(Error::Shape(_))));
        assert!(matches!(mask_loss(&l, &[0, 1, 2, 0]), Err(Error::Input(_))));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, &w).unwrap() - 3.1).abs() < 1e-15);
        assert!((total_loss(0.5, 2.0, 0.7, &w).unwrap() - 1.9).abs() < 1e-15);
        let zero = LossWeights { lambda_mask: 0.0, lambda_count: 0.0, lambda_exist: 0.0 };
        assert_eq!(total_loss(3.0, 4.0, 5.0, &zero).unwrap(), 0.0);
        let err = total_loss(1.0, f64::NAN, 1.0, &w).unwrap_err();
        assert!(err.to_string().contains("count"));
    }

    #[test]
    fn total_loss_is_linear_in_each_component() {
        let w = LossWeights::default();
        let base = total_loss(0.3, 0.4, 0.5, &w).unwrap();
        let bumped = total_loss(0.3, 0.4 + 2.0, 0.5, &w).unwrap();
        assert!((bumped - base - 2.0 * w.lambda_count).abs() < 1e-14);
        let bumped = total_loss(0.3 + 1.0, 0.4, 0.5, &w).unwrap();
        assert!((bumped - base - w.lambda_mask).abs() < 1e-14);
    }
}
