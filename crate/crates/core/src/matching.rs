//! One-to-one assignment between predictions and ground truth, and the
//! set-wise loss with analytic gradients.
//!
//! The assignment minimizes the summed pair cost (L1 + GIoU terms only); the
//! confidence BCE enters the loss but not the matching. Gradients treat the
//! assignment as a constant, which makes the loss piecewise smooth.

use crate::geometry::{self, Box};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("more ground-truth boxes ({gt}) than predictions ({preds})")]
    MoreGtThanPreds { gt: usize, preds: usize },
}

/// Weights of the matching cost and loss terms.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CostWeights {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_conf_bce: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 2.0,
            lambda_giou: 5.0,
            lambda_conf_bce: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_l1", self.lambda_l1),
            ("lambda_giou", self.lambda_giou),
            ("lambda_conf_bce", self.lambda_conf_bce),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("weights.{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Result of an optimal assignment: row -> column pairs (sorted by row) and
/// the summed cost of the matched entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Box-term matching cost: `l1 * |pred - gt|_1 + giou_w * (1 - giou)`.
pub fn pair_cost(pred: &Box, gt: &Box, w: &CostWeights) -> f64 {
    let l1 = (pred.x1 - gt.x1).abs()
        + (pred.y1 - gt.y1).abs()
        + (pred.x2 - gt.x2).abs()
        + (pred.y2 - gt.y2).abs();
    w.lambda_l1 * l1 + w.lambda_giou * (1.0 - geometry::giou(pred, gt))
}

/// Minimal-cost assignment of an `R x C` matrix, matching `min(R, C)` pairs.
///
/// Shortest-augmenting-path formulation with dual potentials, `O(n^3)`.
pub fn hungarian(cost: &[Vec<f64>]) -> MatchResult {
    let rows = cost.len();
    let cols = if rows == 0 { 0 } else { cost[0].len() };
    if rows == 0 || cols == 0 {
        return MatchResult {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..rows).map(|i| cost[i][j]).collect())
            .collect();
        let mut flipped = hungarian(&transposed);
        for p in &mut flipped.pairs {
            *p = (p.1, p.0);
        }
        flipped.pairs.sort_unstable();
        // Re-sum in row order so the total is bit-identical to a direct
        // evaluation of the returned pairs.
        flipped.total_cost = flipped.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        return flipped;
    }

    // 1-based arrays; p[j] is the row assigned to column j, 0 if free.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    MatchResult { pairs, total_cost }
}

/// Loss value, analytic gradients and the underlying assignment.
#[derive(Debug, Clone)]
pub struct SetLoss {
    pub loss: f64,
    /// d loss / d pred box coordinates, one `[x1, y1, x2, y2]` row per prediction.
    pub grad_boxes: Vec<[f64; 4]>,
    /// d loss / d confidence logit, one entry per prediction.
    pub grad_logits: Vec<f64>,
    pub matching: MatchResult,
}

/// Set-wise loss of `n` predictions against `m <= n` ground-truth boxes:
/// matched box terms averaged over `m`, plus a BCE over all confidences with
/// target 1 for matched predictions and 0 otherwise.
pub fn set_loss(
    pred_boxes: &[Box],
    conf_logits: &[f64],
    gt_boxes: &[Box],
    w: &CostWeights,
) -> Result<SetLoss, MatchError> {
    let n = pred_boxes.len();
    let m = gt_boxes.len();
    assert_eq!(n, conf_logits.len());
    if m > n {
        return Err(MatchError::MoreGtThanPreds { gt: m, preds: n });
    }

    let cost: Vec<Vec<f64>> = gt_boxes
        .iter()
        .map(|gt| pred_boxes.iter().map(|p| pair_cost(p, gt, w)).collect())
        .collect();
    let matching = hungarian(&cost);

    let mut grad_boxes = vec![[0.0f64; 4]; n];
    let mut grad_logits = vec![0.0f64; n];
    let mut matched = vec![false; n];
    let mut box_loss = 0.0f64;
    let m_norm = (m.max(1)) as f64;

    for &(gi, pj) in &matching.pairs {
        matched[pj] = true;
        let (p, g) = (&pred_boxes[pj], &gt_boxes[gi]);
        let pc = [p.x1, p.y1, p.x2, p.y2];
        let gc = [g.x1, g.y1, g.x2, g.y2];
        let l1: f64 = pc.iter().zip(&gc).map(|(a, b)| (a - b).abs()).sum();
        let (gv, ggrad) = giou_with_grad(p, g);
        box_loss += w.lambda_l1 * l1 + w.lambda_giou * (1.0 - gv);
        for k in 0..4 {
            let sign = if pc[k] > gc[k] {
                1.0
            } else if pc[k] < gc[k] {
                -1.0
            } else {
                0.0
            };
            grad_boxes[pj][k] =
                (w.lambda_l1 * sign - w.lambda_giou * ggrad[k]) / m_norm;
        }
    }
    box_loss /= m_norm;

    let mut conf_loss = 0.0f64;
    for k in 0..n {
        let y = if matched[k] { 1.0 } else { 0.0 };
        conf_loss += bce_with_logit(conf_logits[k], y);
        grad_logits[k] = w.lambda_conf_bce * (sigmoid(conf_logits[k]) - y) / n as f64;
    }
    conf_loss = w.lambda_conf_bce * conf_loss / n as f64;

    Ok(SetLoss {
        loss: box_loss + conf_loss,
        grad_boxes,
        grad_logits,
        matching,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `BCE(sigmoid(logit), y)`.
fn bce_with_logit(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// GIoU value together with its gradient with respect to the prediction's
/// `[x1, y1, x2, y2]`, holding the other box fixed.
fn giou_with_grad(p: &Box, g: &Box) -> (f64, [f64; 4]) {
    let (pw, ph) = (p.x2 - p.x1, p.y2 - p.y1);
    let ap = pw * ph;
    let ag = g.area();
    let d_ap = [-ph, -pw, ph, pw];

    let ix1 = p.x1.max(g.x1);
    let iy1 = p.y1.max(g.y1);
    let ix2 = p.x2.min(g.x2);
    let iy2 = p.y2.min(g.y2);
    let (iw, ih) = (ix2 - ix1, iy2 - iy1);
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let mut d_inter = [0.0f64; 4];
    if overlap {
        if p.x1 >= g.x1 {
            d_inter[0] = -ih;
        }
        if p.y1 >= g.y1 {
            d_inter[1] = -iw;
        }
        if p.x2 <= g.x2 {
            d_inter[2] = ih;
        }
        if p.y2 <= g.y2 {
            d_inter[3] = iw;
        }
    }

    let union = ap + ag - inter;
    let mut d_union = [0.0f64; 4];
    for k in 0..4 {
        d_union[k] = d_ap[k] - d_inter[k];
    }

    let cx1 = p.x1.min(g.x1);
    let cy1 = p.y1.min(g.y1);
    let cx2 = p.x2.max(g.x2);
    let cy2 = p.y2.max(g.y2);
    let (cw, ch) = (cx2 - cx1, cy2 - cy1);
    let encl = cw * ch;
    let mut d_encl = [0.0f64; 4];
    if p.x1 <= g.x1 {
        d_encl[0] = -ch;
    }
    if p.y1 <= g.y1 {
        d_encl[1] = -cw;
    }
    if p.x2 >= g.x2 {
        d_encl[2] = ch;
    }
    if p.y2 >= g.y2 {
        d_encl[3] = cw;
    }

    // giou = inter/union - 1 + union/encl
    let value = inter / union - (encl - union) / encl;
    let mut grad = [0.0f64; 4];
    for k in 0..4 {
        let d_iou = (d_inter[k] * union - inter * d_union[k]) / (union * union);
        let d_pen = (d_union[k] * encl - union * d_encl[k]) / (encl * encl);
        grad[k] = d_iou + d_pen;
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_box(rng: &mut ChaCha8Rng) -> Box {
        geometry::sanitize(
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        )
        .unwrap()
    }

    /// Exhaustive minimum over ordered column choices; the oracle for
    /// `hungarian` on small instances.
    fn brute_force(cost: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
        let rows = cost.len();
        let cols = if rows == 0 { 0 } else { cost[0].len() };
        if rows == 0 || cols == 0 {
            return (Vec::new(), 0.0);
        }
        if rows > cols {
            let t: Vec<Vec<f64>> = (0..cols)
                .map(|j| (0..rows).map(|i| cost[i][j]).collect())
                .collect();
            let (mut pairs, _) = brute_force(&t);
            for p in &mut pairs {
                *p = (p.1, p.0);
            }
            pairs.sort_unstable();
            let total = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            return (pairs, total);
        }
        let mut best = f64::INFINITY;
        let mut best_assign = Vec::new();
        let mut cols_left: Vec<usize> = (0..cols).collect();
        let mut current = Vec::new();
        fn recurse(
            cost: &[Vec<f64>],
            row: usize,
            cols_left: &mut Vec<usize>,
            current: &mut Vec<usize>,
            best: &mut f64,
            best_assign: &mut Vec<usize>,
        ) {
            if row == cost.len() {
                let total: f64 = current.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                if total < *best {
                    *best = total;
                    *best_assign = current.clone();
                }
                return;
            }
            for k in 0..cols_left.len() {
                let j = cols_left.remove(k);
                current.push(j);
                recurse(cost, row + 1, cols_left, current, best, best_assign);
                current.pop();
                cols_left.insert(k, j);
            }
        }
        recurse(cost, 0, &mut cols_left, &mut current, &mut best, &mut best_assign);
        let pairs: Vec<(usize, usize)> =
            best_assign.iter().enumerate().map(|(i, &j)| (i, j)).collect();
        (pairs, best)
    }

    #[test]
    fn pair_cost_cases() {
        let w = CostWeights::default();
        let b = Box::new(0.1, 0.2, 0.5, 0.6);
        assert_eq!(pair_cost(&b, &b, &w), 0.0);

        // Shift x1 by +0.1: L1 term 0.2, GIoU from the closed form.
        let gt = Box::new(0.0, 0.0, 1.0, 1.0);
        let pred = Box::new(0.1, 0.0, 1.0, 1.0);
        let inter = 0.9;
        let union = 0.9 + 1.0 - 0.9;
        let encl = 1.0;
        let g = inter / union - (encl - union) / encl;
        let got = pair_cost(&pred, &gt, &w);
        assert!((got - (0.2 + 5.0 * (1.0 - g))).abs() < 1e-12);

        let zero = CostWeights {
            lambda_l1: 0.0,
            lambda_giou: 0.0,
            lambda_conf_bce: 1.0,
        };
        assert_eq!(pair_cost(&pred, &gt, &zero), 0.0);
    }

    #[test]
    fn hungarian_tiny_cases() {
        let r = hungarian(&[vec![3.5]]);
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.total_cost, 3.5);

        let r = hungarian(&[vec![1.0, 10.0], vec![10.0, 1.0]]);
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);

        let r = hungarian(&[]);
        assert!(r.pairs.is_empty());
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for case in 0..200 {
            let rows = rng.random_range(1..=7);
            let cols = rng.random_range(1..=7);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.random::<f64>() * 10.0 - 2.0).collect())
                .collect();
            let got = hungarian(&cost);
            let (want_pairs, want_total) = brute_force(&cost);
            assert_eq!(
                got.total_cost, want_total,
                "case {case}: {rows}x{cols} cost mismatch"
            );
            assert_eq!(got.pairs.len(), rows.min(cols));
            // Injectivity on both sides.
            let mut rs: Vec<usize> = got.pairs.iter().map(|p| p.0).collect();
            let mut cs: Vec<usize> = got.pairs.iter().map(|p| p.1).collect();
            rs.dedup();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(rs.len(), got.pairs.len());
            assert_eq!(cs.len(), got.pairs.len());
            // Random costs make the optimum unique in practice.
            assert_eq!(got.pairs, want_pairs, "case {case}");
        }
    }

    #[test]
    fn hungarian_invariant_to_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(2..=6);
            let m = rng.random_range(2..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random::<f64>()).collect())
                .collect();
            let shifted: Vec<Vec<f64>> = cost
                .iter()
                .map(|row| row.iter().map(|c| c + 7.25).collect())
                .collect();
            assert_eq!(hungarian(&cost).pairs, hungarian(&shifted).pairs);
        }
    }

    #[test]
    fn set_loss_perfect_limit() {
        let w = CostWeights::default();
        let gts = vec![Box::new(0.1, 0.1, 0.3, 0.4), Box::new(0.5, 0.5, 0.9, 0.8)];
        let preds = gts.clone();
        let logits = vec![30.0, 30.0];
        let r = set_loss(&preds, &logits, &gts, &w).unwrap();
        assert!(r.loss < 1e-6, "loss = {}", r.loss);
    }

    #[test]
    fn set_loss_no_gt_closed_form() {
        let w = CostWeights::default();
        let preds = vec![Box::new(0.1, 0.1, 0.2, 0.2), Box::new(0.4, 0.4, 0.6, 0.6)];
        let logits = vec![0.0, 0.0];
        let r = set_loss(&preds, &logits, &[], &w).unwrap();
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-12);
        for g in &r.grad_logits {
            assert!((g - 0.5 / 2.0).abs() < 1e-12);
        }
        assert!(r.grad_boxes.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn set_loss_rejects_excess_gt() {
        let w = CostWeights::default();
        let b = Box::new(0.1, 0.1, 0.2, 0.2);
        assert!(matches!(
            set_loss(&[b], &[0.0], &[b, b], &w),
            Err(MatchError::MoreGtThanPreds { .. })
        ));
    }

    /// Test-side reimplementation of the loss with a fixed assignment, used
    /// as the finite-difference oracle.
    fn loss_given_assignment(
        preds: &[Box],
        logits: &[f64],
        gts: &[Box],
        pairs: &[(usize, usize)],
        w: &CostWeights,
    ) -> f64 {
        let m = gts.len().max(1) as f64;
        let mut total = 0.0;
        let mut matched = vec![false; preds.len()];
        for &(gi, pj) in pairs {
            matched[pj] = true;
            let (p, g) = (&preds[pj], &gts[gi]);
            let l1 = (p.x1 - g.x1).abs()
                + (p.y1 - g.y1).abs()
                + (p.x2 - g.x2).abs()
                + (p.y2 - g.y2).abs();
            total += (w.lambda_l1 * l1 + w.lambda_giou * (1.0 - geometry::giou(p, g))) / m;
        }
        for (k, &l) in logits.iter().enumerate() {
            let y = if matched[k] { 1.0 } else { 0.0 };
            let bce = l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
            total += w.lambda_conf_bce * bce / preds.len() as f64;
        }
        total
    }

    #[test]
    fn set_loss_gradients_match_finite_differences() {
        let w = CostWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-5;
        for _ in 0..100 {
            let n = rng.random_range(2..=5);
            let m = rng.random_range(0..=n.min(3));
            let preds: Vec<Box> = (0..n).map(|_| random_box(&mut rng)).collect();
            let gts: Vec<Box> = (0..m).map(|_| random_box(&mut rng)).collect();
            let logits: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let r = set_loss(&preds, &logits, &gts, &w).unwrap();
            let pairs = r.matching.pairs.clone();

            for j in 0..n {
                for k in 0..4 {
                    let mut plus = preds.clone();
                    let mut minus = preds.clone();
                    let bump = |b: &mut Box, d: f64| match k {
                        0 => b.x1 += d,
                        1 => b.y1 += d,
                        2 => b.x2 += d,
                        _ => b.y2 += d,
                    };
                    bump(&mut plus[j], h);
                    bump(&mut minus[j], -h);
                    let fd = (loss_given_assignment(&plus, &logits, &gts, &pairs, &w)
                        - loss_given_assignment(&minus, &logits, &gts, &pairs, &w))
                        / (2.0 * h);
                    let an = r.grad_boxes[j][k];
                    let denom = fd.abs().max(an.abs());
                    if denom > 1e-8 {
                        assert!(
                            (fd - an).abs() / denom < 1e-6,
                            "box grad mismatch: fd={fd}, an={an}"
                        );
                    }
                }
                let mut plus = logits.clone();
                let mut minus = logits.clone();
                plus[j] += h;
                minus[j] -= h;
                let fd = (loss_given_assignment(&preds, &plus, &gts, &pairs, &w)
                    - loss_given_assignment(&preds, &minus, &gts, &pairs, &w))
                    / (2.0 * h);
                let an = r.grad_logits[j];
                let denom = fd.abs().max(an.abs());
                if denom > 1e-8 {
                    assert!(
                        (fd - an).abs() / denom < 1e-6,
                        "logit grad mismatch: fd={fd}, an={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn set_loss_nonnegative_fuzz() {
        let w = CostWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..500 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(0..=n);
            let preds: Vec<Box> = (0..n).map(|_| random_box(&mut rng)).collect();
            let gts: Vec<Box> = (0..m).map(|_| random_box(&mut rng)).collect();
            let logits: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let r = set_loss(&preds, &logits, &gts, &w).unwrap();
            assert!(r.loss >= 0.0);
            assert!(r.loss.is_finite());
        }
    }

    #[test]
    fn set_loss_permutation_equivariance() {
        let w = CostWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 5;
        let preds: Vec<Box> = (0..n).map(|_| random_box(&mut rng)).collect();
        let gts: Vec<Box> = (0..2).map(|_| random_box(&mut rng)).collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let base = set_loss(&preds, &logits, &gts, &w).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let preds_p: Vec<Box> = perm.iter().map(|&i| preds[i]).collect();
        let logits_p: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
        let permuted = set_loss(&preds_p, &logits_p, &gts, &w).unwrap();

        assert!((base.loss - permuted.loss).abs() < 1e-12);
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            assert_eq!(permuted.grad_logits[new_idx], base.grad_logits[old_idx]);
            assert_eq!(permuted.grad_boxes[new_idx], base.grad_boxes[old_idx]);
        }
    }
}
