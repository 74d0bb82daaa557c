//! Matching costs between predictions and ground truths, exact one-to-one
//! assignment, and dynamic top-k sample selection for contrastive learning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{giou, BBox};
use crate::losses::{FOCAL_ALPHA, FOCAL_GAMMA};

#[derive(Debug, Error, PartialEq)]
pub enum AssignError {
    #[error("cost matrix needs at least one prediction")]
    NoPredictions,
    #[error("{what}: expected {expected} entries, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite cost at prediction {pred}, ground truth {gt}")]
    NonFinite { pred: usize, gt: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    pub cls_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    /// Positives per ground truth (upper bound when `dynamic_k`).
    pub k1: usize,
    /// Positives plus hard negatives per ground truth (upper bound when `dynamic_k`).
    pub k2: usize,
    pub dynamic_k: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            cls_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            k1: 10,
            k2: 100,
            dynamic_k: false,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k1 < 1 || self.k2 <= self.k1 {
            return Err(format!("need k2 > k1 >= 1, got k1={} k2={}", self.k1, self.k2));
        }
        for (name, w) in [
            ("cls_weight", self.cls_weight),
            ("l1_weight", self.l1_weight),
            ("giou_weight", self.giou_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(format!("{name} must be finite and nonnegative, got {w}"));
            }
        }
        Ok(())
    }
}

/// Prediction × ground-truth costs, kept per component and combined. Row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub preds: usize,
    pub gts: usize,
    pub cls: Vec<f64>,
    pub l1: Vec<f64>,
    pub giou: Vec<f64>,
    pub total: Vec<f64>,
}

impl CostMatrix {
    /// Matrix given only combined costs (components zero).
    pub fn from_total(preds: usize, gts: usize, total: Vec<f64>) -> Result<Self, AssignError> {
        if total.len() != preds * gts {
            return Err(AssignError::Length {
                what: "cost matrix",
                expected: preds * gts,
                got: total.len(),
            });
        }
        Ok(Self {
            preds,
            gts,
            cls: vec![0.0; total.len()],
            l1: vec![0.0; total.len()],
            giou: vec![0.0; total.len()],
            total,
        })
    }

    pub fn at(&self, pred: usize, gt: usize) -> f64 {
        self.total[pred * self.gts + gt]
    }

    pub fn scaled(&self, c: f64) -> Self {
        let s = |v: &Vec<f64>| v.iter().map(|x| x * c).collect();
        Self {
            preds: self.preds,
            gts: self.gts,
            cls: s(&self.cls),
            l1: s(&self.l1),
            giou: s(&self.giou),
            total: s(&self.total),
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Focal-style cost of calling a prediction foreground, from its logit.
pub fn focal_cost(logit: f64) -> f64 {
    let p = sigmoid(logit);
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * softplus(-logit);
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * softplus(logit);
    pos - neg
}

/// Builds the weighted classification + L1 + GIoU cost matrix.
///
/// `fg_logits` holds one foreground logit per prediction. L1 is the mean
/// absolute difference of the four center-form coordinates.
pub fn build_cost(
    fg_logits: &[f64],
    pred_boxes: &[BBox],
    gt_boxes: &[BBox],
    cfg: &AssignConfig,
) -> Result<CostMatrix, AssignError> {
    if pred_boxes.is_empty() {
        return Err(AssignError::NoPredictions);
    }
    if fg_logits.len() != pred_boxes.len() {
        return Err(AssignError::Length {
            what: "foreground logits",
            expected: pred_boxes.len(),
            got: fg_logits.len(),
        });
    }
    let (p, g) = (pred_boxes.len(), gt_boxes.len());
    let mut m = CostMatrix::from_total(p, g, vec![0.0; p * g])?;
    for (i, (pb, &logit)) in pred_boxes.iter().zip(fg_logits).enumerate() {
        let cls = focal_cost(logit);
        let pc = pb.cxcywh();
        for (j, gb) in gt_boxes.iter().enumerate() {
            let gc = gb.cxcywh();
            let l1 = pc.iter().zip(&gc).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
            let gi = -giou(*pb, *gb);
            let k = i * g + j;
            m.cls[k] = cls;
            m.l1[k] = l1;
            m.giou[k] = gi;
            m.total[k] = cfg.cls_weight * cls + cfg.l1_weight * l1 + cfg.giou_weight * gi;
            if !m.total[k].is_finite() {
                return Err(AssignError::NonFinite { pred: i, gt: j });
            }
        }
    }
    Ok(m)
}

/// One-to-one assignment of predictions to ground truths.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs sorted by ground truth.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(p, g)| costs.at(p, g)).sum()
    }

    pub fn pred_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, g)| g == gt).map(|&(p, _)| p)
    }
}

/// Minimum-cost assignment over an `n × m` matrix with `n <= m`; returns the
/// column chosen for each row. Shortest augmenting paths with potentials.
fn solve_rows(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(n <= m);
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut row_of = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_for_row = vec![usize::MAX; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            col_for_row[row_of[j] - 1] = j - 1;
        }
    }
    col_for_row
}

/// Exact minimum-total-cost one-to-one matching; `min(preds, gts)` pairs.
pub fn hungarian(costs: &CostMatrix) -> MatchResult {
    let (p, g) = (costs.preds, costs.gts);
    let mut pairs = Vec::with_capacity(p.min(g));
    if p > 0 && g > 0 {
        if g <= p {
            let cols = solve_rows(g, p, |gt, pred| costs.at(pred, gt));
            pairs.extend(cols.into_iter().enumerate().map(|(gt, pred)| (pred, gt)));
        } else {
            let cols = solve_rows(p, g, |pred, gt| costs.at(pred, gt));
            pairs.extend(cols.into_iter().enumerate());
        }
    }
    pairs.sort_by_key(|&(_, gt)| gt);
    let mut taken = vec![false; p];
    pairs.iter().for_each(|&(pr, _)| taken[pr] = true);
    let unmatched = (0..p).filter(|&i| !taken[i]).collect();
    MatchResult { pairs, unmatched }
}

/// Prediction index assigned to each ground truth, as `(gt, pred)` pairs.
/// Ground truths left without a prediction are omitted.
pub fn best_match_for_queue(costs: &CostMatrix) -> Vec<(usize, usize)> {
    hungarian(costs).pairs.into_iter().map(|(p, g)| (g, p)).collect()
}

/// Positive and hard-negative prediction indices for one ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GtSamples {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleSelection {
    pub per_gt: Vec<GtSamples>,
}

/// Per ground truth, ranks predictions by ascending cost (ties to the lower
/// index): the first `k1` are positives, the next `k2 − k1` hard negatives.
///
/// With `dynamic_k`, `k1` is the rounded sum of the ten largest IoUs with
/// that ground truth and `k2` the rounded sum of the hundred largest, clamped
/// to `[1, cfg.k1]` and `[k1 + 1, cfg.k2]`.
pub fn simota_select(costs: &CostMatrix, ious: &[f64], cfg: &AssignConfig) -> Result<SampleSelection, AssignError> {
    let (p, g) = (costs.preds, costs.gts);
    if ious.len() != p * g {
        return Err(AssignError::Length {
            what: "IoU matrix",
            expected: p * g,
            got: ious.len(),
        });
    }
    let mut per_gt = Vec::with_capacity(g);
    for j in 0..g {
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| costs.at(a, j).total_cmp(&costs.at(b, j)).then(a.cmp(&b)));
        let (k1, k2) = if cfg.dynamic_k {
            let mut col: Vec<f64> = (0..p).map(|i| ious[i * g + j]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            let top = |k: usize| col.iter().take(k).sum::<f64>().round() as usize;
            let k1 = top(10).clamp(1, cfg.k1);
            let k2 = top(100).clamp(k1 + 1, cfg.k2.max(k1 + 1));
            (k1, k2)
        } else {
            (cfg.k1, cfg.k2)
        };
        let a = k1.min(p);
        let b = k2.min(p);
        per_gt.push(GtSamples {
            positives: order[..a].to_vec(),
            negatives: order[a..b].to_vec(),
        });
    }
    Ok(SampleSelection { per_gt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute force over all injective maps from the smaller side.
    fn enumerate_best(costs: &CostMatrix) -> f64 {
        fn rec(costs: &CostMatrix, gt: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if gt == costs.gts {
                *best = best.min(acc);
                return;
            }
            for p in 0..costs.preds {
                if !used[p] {
                    used[p] = true;
                    rec(costs, gt + 1, used, acc + costs.at(p, gt), best);
                    used[p] = false;
                }
            }
        }
        fn rec_t(costs: &CostMatrix, pred: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if pred == costs.preds {
                *best = best.min(acc);
                return;
            }
            for g in 0..costs.gts {
                if !used[g] {
                    used[g] = true;
                    rec_t(costs, pred + 1, used, acc + costs.at(pred, g), best);
                    used[g] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        if costs.gts <= costs.preds {
            rec(costs, 0, &mut vec![false; costs.preds], 0.0, &mut best);
        } else {
            rec_t(costs, 0, &mut vec![false; costs.gts], 0.0, &mut best);
        }
        best
    }

    #[test]
    fn identity_on_zero_diagonal() {
        let mut c = vec![1.0; 16];
        (0..4).for_each(|i| c[i * 4 + i] = 0.0);
        let m = hungarian(&CostMatrix::from_total(4, 4, c).unwrap());
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(m.unmatched.is_empty());
    }

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_total(2, 2, vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let m = hungarian(&c);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost(&c), 1.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (p, g) in [(5, 2), (2, 5), (7, 7), (1, 4), (4, 1)] {
            let c = CostMatrix::from_total(p, g, (0..p * g).map(|_| rng.random::<f64>()).collect()).unwrap();
            let m = hungarian(&c);
            assert_eq!(m.pairs.len(), p.min(g));
            assert_eq!(m.unmatched.len(), p - p.min(g));
            assert_eq!(m.total_cost(&c), enumerate_best(&c));
        }
    }

    #[test]
    fn empty_gts() {
        let c = CostMatrix::from_total(3, 0, vec![]).unwrap();
        let m = hungarian(&c);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched, vec![0, 1, 2]);
    }

    #[test]
    fn perfect_prediction_cost() {
        let gt = BBox::center(0.4, 0.5, 0.2, 0.3);
        let other = BBox::center(0.6, 0.5, 0.2, 0.3);
        let cfg = AssignConfig::default();
        let c = build_cost(&[40.0, 0.0, -3.0], &[gt, other, gt], &[gt], &cfg).unwrap();
        assert_eq!(c.l1[0], 0.0);
        assert_eq!(c.giou[0], -1.0);
        assert!(c.cls[0] < c.cls[1] && c.cls[0] < c.cls[2]);
        assert_eq!(build_cost(&[], &[], &[gt], &cfg), Err(AssignError::NoPredictions));
        let none = build_cost(&[0.0], &[gt], &[], &cfg).unwrap();
        assert_eq!((none.preds, none.gts), (1, 0));
    }

    #[test]
    fn zero_class_weight_drops_class_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let boxes: Vec<BBox> = (0..4)
            .map(|_| BBox::center(rng.random(), rng.random(), rng.random::<f64>() * 0.5, rng.random::<f64>() * 0.5))
            .collect();
        let cfg = AssignConfig {
            cls_weight: 0.0,
            ..Default::default()
        };
        let c = build_cost(&[0.3, -1.0, 2.0], &boxes[..3], &boxes[3..], &cfg).unwrap();
        for k in 0..3 {
            assert_eq!(c.total[k], cfg.l1_weight * c.l1[k] + cfg.giou_weight * c.giou[k]);
        }
    }

    #[test]
    fn cost_entries_match_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mk = |rng: &mut ChaCha8Rng| {
            BBox::center(rng.random(), rng.random(), 0.05 + rng.random::<f64>() * 0.4, 0.05 + rng.random::<f64>() * 0.4)
        };
        let preds: Vec<BBox> = (0..3).map(|_| mk(&mut rng)).collect();
        let gts: Vec<BBox> = (0..2).map(|_| mk(&mut rng)).collect();
        let logits = [0.7, -2.0, 1.5];
        let cfg = AssignConfig::default();
        let c = build_cost(&logits, &preds, &gts, &cfg).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let p = 1.0 / (1.0 + (-logits[i]).exp());
                let cls = 0.25 * (1.0 - p).powi(2) * -(p.ln()) - 0.75 * p.powi(2) * -((1.0 - p).ln());
                let (a, b) = (preds[i].cxcywh(), gts[j].cxcywh());
                let l1 = (0..4).map(|k| (a[k] - b[k]).abs()).sum::<f64>() / 4.0;
                let want = 2.0 * cls + 5.0 * l1 - 2.0 * giou(preds[i], gts[j]);
                assert!((c.at(i, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn simota_fixed_k() {
        let c = CostMatrix::from_total(5, 1, vec![0.3, 0.1, 0.5, 0.2, 0.4]).unwrap();
        let cfg = AssignConfig {
            k1: 2,
            k2: 4,
            ..Default::default()
        };
        let s = simota_select(&c, &[0.0; 5], &cfg).unwrap();
        assert_eq!(s.per_gt[0].positives, vec![1, 3]);
        assert_eq!(s.per_gt[0].negatives, vec![0, 4]);

        let sorted = CostMatrix::from_total(5, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let s = simota_select(&sorted, &[0.0; 5], &cfg).unwrap();
        assert_eq!(s.per_gt[0].positives, vec![0, 1]);
        assert_eq!(s.per_gt[0].negatives, vec![2, 3]);

        let s = simota_select(&sorted, &[0.0; 5], &AssignConfig::default()).unwrap();
        assert_eq!(s.per_gt[0].positives, vec![0, 1, 2, 3, 4]);
        assert!(s.per_gt[0].negatives.is_empty());
    }

    #[test]
    fn simota_dynamic_k() {
        // IoUs 0.9, 0.8, 0.6, 0.1 → top-10 sum 2.4 → k1 = 2; top-100 sum the same → k2 clamps to 3.
        let c = CostMatrix::from_total(4, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let cfg = AssignConfig {
            dynamic_k: true,
            ..Default::default()
        };
        let s = simota_select(&c, &[0.9, 0.8, 0.6, 0.1], &cfg).unwrap();
        assert_eq!(s.per_gt[0].positives, vec![0, 1]);
        assert_eq!(s.per_gt[0].negatives, vec![2]);
        // all-zero IoUs still give one positive
        let s = simota_select(&c, &[0.0; 4], &cfg).unwrap();
        assert_eq!(s.per_gt[0].positives, vec![0]);
    }

    #[test]
    fn best_match_examples() {
        let c = CostMatrix::from_total(3, 1, vec![5.0, 1.0, 2.0]).unwrap();
        assert_eq!(best_match_for_queue(&c), vec![(0, 1)]);
        let c = CostMatrix::from_total(1, 2, vec![5.0, 1.0]).unwrap();
        assert_eq!(best_match_for_queue(&c), vec![(1, 0)]);
    }

    #[test]
    fn single_pair_agreement() {
        let c = CostMatrix::from_total(1, 1, vec![0.7]).unwrap();
        assert_eq!(hungarian(&c).pairs, vec![(0, 0)]);
        assert_eq!(best_match_for_queue(&c), vec![(0, 0)]);
        let s = simota_select(&c, &[0.5], &AssignConfig::default()).unwrap();
        assert_eq!(s.per_gt[0].positives, vec![0]);
    }

    #[test]
    fn four_by_four_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..50 {
            let c = CostMatrix::from_total(4, 4, (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
            let pairs = best_match_for_queue(&c);
            let total: f64 = pairs.iter().map(|&(g, p)| c.at(p, g)).sum();
            assert_eq!(total, enumerate_best(&c));
        }
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(p in 1usize..=6, g in 1usize..=6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CostMatrix::from_total(p, g, (0..p * g).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            let m = hungarian(&c);
            let mut preds: Vec<usize> = m.pairs.iter().map(|x| x.0).collect();
            preds.sort();
            preds.dedup();
            prop_assert_eq!(preds.len(), m.pairs.len());
            prop_assert!((m.total_cost(&c) - enumerate_best(&c)).abs() < 1e-9);
        }

        #[test]
        fn scale_invariant_structure(p in 1usize..=8, g in 1usize..=4, seed in any::<u64>(), scale in 0.01..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CostMatrix::from_total(p, g, (0..p * g).map(|_| rng.random::<f64>()).collect()).unwrap();
            let ious: Vec<f64> = (0..p * g).map(|_| rng.random::<f64>()).collect();
            let cfg = AssignConfig { k1: 2, k2: 5, ..Default::default() };
            let s = c.scaled(scale);
            prop_assert_eq!(hungarian(&c).pairs, hungarian(&s).pairs);
            prop_assert_eq!(simota_select(&c, &ious, &cfg).unwrap(), simota_select(&s, &ious, &cfg).unwrap());
        }

        #[test]
        fn simota_disjoint_and_stable(p in 1usize..=30, g in 1usize..=4, seed in any::<u64>(), dynamic in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CostMatrix::from_total(p, g, (0..p * g).map(|_| rng.random::<f64>()).collect()).unwrap();
            let ious: Vec<f64> = (0..p * g).map(|_| rng.random::<f64>()).collect();
            let cfg = AssignConfig { k1: 3, k2: 9, dynamic_k: dynamic, ..Default::default() };
            let s = simota_select(&c, &ious, &cfg).unwrap();
            prop_assert_eq!(&s, &simota_select(&c, &ious, &cfg).unwrap());
            for gs in &s.per_gt {
                prop_assert!(gs.positives.len() <= 3 && gs.negatives.len() <= 6);
                prop_assert!(gs.positives.iter().all(|i| !gs.negatives.contains(i)));
                prop_assert!(gs.positives.iter().chain(&gs.negatives).all(|&i| i < p));
            }
        }
    }
}
