//! Training loss terms and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Mask};
use crate::tensor::{Real, Result, Tensor};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Probabilities entering a log are kept this far from 0 and 1.
const PROB_EPS: f64 = 1e-6;
/// Guards box-area divisions.
const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask: f64,
    pub dice: f64,
    pub iou: f64,
    pub con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            mask: 2.0,
            dice: 5.0,
            iou: 1.0,
            con: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [self.cls, self.l1, self.giou, self.mask, self.dice, self.iou, self.con];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(format!("loss weights must be finite and nonnegative: {self:?}"))
        }
    }
}

/// Scalar loss tensors, one per term.
#[derive(Debug, Clone)]
pub struct LossTerms<F: Real> {
    pub cls: Tensor<F>,
    pub l1: Tensor<F>,
    pub giou: Tensor<F>,
    pub mask: Tensor<F>,
    pub dice: Tensor<F>,
    pub iou: Tensor<F>,
    pub con: Tensor<F>,
}

impl<F: Real> LossTerms<F> {
    pub fn zeros() -> Self {
        let z = || Tensor::scalar(F::zero());
        Self {
            cls: z(),
            l1: z(),
            giou: z(),
            mask: z(),
            dice: z(),
            iou: z(),
            con: z(),
        }
    }

    fn as_array(&self) -> [&Tensor<F>; 7] {
        [&self.cls, &self.l1, &self.giou, &self.mask, &self.dice, &self.iou, &self.con]
    }

    /// Elementwise sum of two term sets.
    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            cls: self.cls.add(&other.cls)?,
            l1: self.l1.add(&other.l1)?,
            giou: self.giou.add(&other.giou)?,
            mask: self.mask.add(&other.mask)?,
            dice: self.dice.add(&other.dice)?,
            iou: self.iou.add(&other.iou)?,
            con: self.con.add(&other.con)?,
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = F::of(c);
        Self {
            cls: self.cls.scale(c),
            l1: self.l1.scale(c),
            giou: self.giou.scale(c),
            mask: self.mask.scale(c),
            dice: self.dice.scale(c),
            iou: self.iou.scale(c),
            con: self.con.scale(c),
        }
    }
}

/// Per-term values and the weighted total of one evaluation of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask: f64,
    pub dice: f64,
    pub iou: f64,
    pub con: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.l1, self.giou, self.mask, self.dice, self.iou, self.con, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted sum of the seven terms, ready for backward.
pub fn total_loss<F: Real>(terms: &LossTerms<F>, w: &LossWeights) -> Result<(Tensor<F>, LossReport)> {
    let weights = [w.cls, w.l1, w.giou, w.mask, w.dice, w.iou, w.con];
    let mut total = Tensor::scalar(F::zero());
    for (t, &wt) in terms.as_array().into_iter().zip(&weights) {
        if wt != 0.0 {
            total = total.add(&t.scale(F::of(wt)))?;
        }
    }
    let v = |t: &Tensor<F>| t.item().f64();
    let report = LossReport {
        cls: v(&terms.cls),
        l1: v(&terms.l1),
        giou: v(&terms.giou),
        mask: v(&terms.mask),
        dice: v(&terms.dice),
        iou: v(&terms.iou),
        con: v(&terms.con),
        total: v(&total),
    };
    Ok((total, report))
}

fn column<F: Real>(values: impl Iterator<Item = f64>) -> Result<Tensor<F>> {
    let v: Vec<F> = values.map(F::of).collect();
    let n = v.len();
    Tensor::new(&[n, 1], v)
}

/// Sigmoid focal loss on one foreground logit per query, summed over queries
/// and divided by the number of positives (at least 1).
pub fn focal_loss<F: Real>(fg_logits: &Tensor<F>, targets: &[bool]) -> Result<Tensor<F>> {
    let n = targets.len();
    let x = fg_logits.reshape(&[n])?;
    let t: Vec<F> = targets.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
    let t = Tensor::new(&[n], t)?;
    // ce = softplus(x) − t·x ; 1 − p_t = p(1 − 2t) + t
    let ce = x.softplus().sub(&x.mul(&t)?)?;
    let one_minus_2t = t.scale(F::of(-2.0)).add_scalar(F::one());
    let one_minus_pt = x.sigmoid().mul(&one_minus_2t)?.add(&t)?;
    let modulating = one_minus_pt.pow(FOCAL_GAMMA)?;
    let alpha_t = t
        .scale(F::of(2.0 * FOCAL_ALPHA - 1.0))
        .add_scalar(F::of(1.0 - FOCAL_ALPHA));
    let positives = targets.iter().filter(|&&b| b).count().max(1) as f64;
    Ok(alpha_t.mul(&modulating)?.mul(&ce)?.sum().scale(F::of(1.0 / positives)))
}

/// Differentiable GIoU between center-form predictions `[n, 4]` and constant targets.
pub fn giou_tensor<F: Real>(pred_cxcywh: &Tensor<F>, gts: &[BBox]) -> Result<Tensor<F>> {
    let col = |k: usize| pred_cxcywh.slice(1, k, 1);
    let (cx, cy, w, h) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let half = F::of(0.5);
    let px0 = cx.sub(&w.scale(half))?;
    let px1 = cx.add(&w.scale(half))?;
    let py0 = cy.sub(&h.scale(half))?;
    let py1 = cy.add(&h.scale(half))?;
    let g: Vec<[f64; 4]> = gts.iter().map(|b| b.xyxy()).collect();
    let gx0 = column::<F>(g.iter().map(|b| b[0]))?;
    let gy0 = column::<F>(g.iter().map(|b| b[1]))?;
    let gx1 = column::<F>(g.iter().map(|b| b[2]))?;
    let gy1 = column::<F>(g.iter().map(|b| b[3]))?;
    let iw = px1.minimum(&gx1)?.sub(&px0.maximum(&gx0)?)?.relu();
    let ih = py1.minimum(&gy1)?.sub(&py0.maximum(&gy0)?)?.relu();
    let inter = iw.mul(&ih)?;
    let area_p = w.mul(&h)?;
    let area_g = gx1.sub(&gx0)?.mul(&gy1.sub(&gy0)?)?;
    let union = area_p.add(&area_g)?.sub(&inter)?.add_scalar(F::of(AREA_EPS));
    let iou = inter.div(&union)?;
    let cw = px1.maximum(&gx1)?.sub(&px0.minimum(&gx0)?)?;
    let ch = py1.maximum(&gy1)?.sub(&py0.minimum(&gy0)?)?;
    let enclosure = cw.mul(&ch)?.add_scalar(F::of(AREA_EPS));
    iou.sub(&enclosure.sub(&union)?.div(&enclosure)?)
}

/// `(L1, GIoU loss)` over matched pairs: L1 sums the four center-form
/// coordinates and averages over pairs; GIoU loss is the mean of `1 − GIoU`.
pub fn box_losses<F: Real>(pred_cxcywh: &Tensor<F>, gts: &[BBox]) -> Result<(Tensor<F>, Tensor<F>)> {
    let n = gts.len();
    if n == 0 {
        return Ok((Tensor::scalar(F::zero()), Tensor::scalar(F::zero())));
    }
    let target: Vec<F> = gts.iter().flat_map(|b| b.cxcywh()).map(F::of).collect();
    let target = Tensor::new(&[n, 4], target)?;
    let inv_n = F::of(1.0 / n as f64);
    let l1 = pred_cxcywh.sub(&target)?.abs().sum().scale(inv_n);
    let giou = giou_tensor(pred_cxcywh, gts)?;
    let giou_loss = giou.neg().add_scalar(F::one()).sum().scale(inv_n);
    Ok((l1, giou_loss))
}

/// `(BCE, dice loss)` for soft masks `[n, H·W]` against hard targets.
///
/// BCE is the mean over all pixels of all pairs; dice loss is the mean of
/// `1 − dice` with additive smoothing 1.
pub fn mask_losses<F: Real>(pred: &Tensor<F>, gts: &[Mask]) -> Result<(Tensor<F>, Tensor<F>)> {
    let n = gts.len();
    if n == 0 {
        return Ok((Tensor::scalar(F::zero()), Tensor::scalar(F::zero())));
    }
    let hw = pred.numel() / n;
    let t: Vec<F> = gts
        .iter()
        .flat_map(|m| m.bits.iter().map(|&b| if b { F::one() } else { F::zero() }))
        .collect();
    let t = Tensor::new(&[n, hw], t)?;
    let p = pred.reshape(&[n, hw])?.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let log_p = p.log()?;
    let log_q = p.neg().add_scalar(F::one()).log()?;
    let one_minus_t = t.neg().add_scalar(F::one());
    let bce = log_p
        .mul(&t)?
        .add(&log_q.mul(&one_minus_t)?)?
        .neg()
        .mean();

    let p = pred.reshape(&[n, hw])?;
    let smooth = F::of(crate::geometry::DICE_SMOOTH);
    let num = p.mul(&t)?.sum_axis(1)?.scale(F::of(2.0)).add_scalar(smooth);
    let den = p.sum_axis(1)?.add(&t.sum_axis(1)?)?.add_scalar(smooth);
    let dice_loss = num.div(&den)?.neg().add_scalar(F::one()).mean();
    Ok((bce, dice_loss))
}

/// Binary cross-entropy between `σ(logit)` and real-valued IoU targets, averaged.
pub fn iou_head_loss<F: Real>(logits: &Tensor<F>, targets: &[f64]) -> Result<Tensor<F>> {
    let n = targets.len();
    if n == 0 {
        return Ok(Tensor::scalar(F::zero()));
    }
    let x = logits.reshape(&[n])?;
    let t = Tensor::new(&[n], targets.iter().map(|&v| F::of(v)).collect())?;
    Ok(x.softplus().sub(&x.mul(&t)?)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::giou;

    fn logits(v: &[f64]) -> Tensor<f64> {
        Tensor::param(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn focal_examples() {
        assert!(focal_loss(&logits(&[60.0]), &[true]).unwrap().item() < 1e-20);
        let half = focal_loss(&logits(&[0.0]), &[true]).unwrap().item();
        assert!((half - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!(focal_loss(&logits(&[-40.0, -40.0]), &[false, false]).unwrap().item() < 1e-15);
    }

    #[test]
    fn focal_normalizes_by_positives() {
        let one = focal_loss(&logits(&[0.0, 0.0]), &[true, true]).unwrap().item();
        assert!((one - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    fn cxcywh(boxes: &[BBox]) -> Tensor<f64> {
        let v: Vec<f64> = boxes.iter().flat_map(|b| b.cxcywh()).collect();
        Tensor::param(&[boxes.len(), 4], v).unwrap()
    }

    #[test]
    fn box_loss_examples() {
        let a = BBox::corners(0.1, 0.2, 0.5, 0.6);
        let (l1, gl) = box_losses(&cxcywh(&[a]), &[a]).unwrap();
        assert_eq!(l1.item(), 0.0);
        assert!(gl.item().abs() < 1e-8);

        let p = BBox::corners(0.0, 0.0, 1.0, 1.0);
        let g = BBox::corners(2.0, 2.0, 3.0, 3.0);
        let (_, gl) = box_losses(&cxcywh(&[p]), &[g]).unwrap();
        assert!((gl.item() - (1.0 + 7.0 / 9.0)).abs() < 1e-8);

        let g = BBox::center(0.5, 0.5, 0.2, 0.2);
        let p = BBox::center(0.6, 0.5, 0.2, 0.2);
        let (l1, _) = box_losses(&cxcywh(&[p]), &[g]).unwrap();
        assert!((l1.item() - 0.1).abs() < 1e-12);

        let (l1, gl) = box_losses(&cxcywh(&[p]).slice(0, 0, 1).unwrap(), &[]).unwrap();
        assert_eq!((l1.item(), gl.item()), (0.0, 0.0));
    }

    #[test]
    fn giou_tensor_matches_scalar() {
        let ps = [BBox::center(0.3, 0.4, 0.2, 0.5), BBox::center(0.7, 0.2, 0.1, 0.1)];
        let gs = [BBox::corners(0.2, 0.1, 0.5, 0.6), BBox::corners(0.0, 0.0, 0.3, 0.3)];
        let t = giou_tensor(&cxcywh(&ps), &gs).unwrap();
        for k in 0..2 {
            assert!((t.values()[k] - giou(ps[k], gs[k])).abs() < 1e-8);
        }
    }

    #[test]
    fn mask_loss_examples() {
        let mut m = Mask::empty(8, 8);
        (0..20).for_each(|i| m.set(i / 8, i % 8, true));
        let hard: Vec<f64> = m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let (bce, dl) = mask_losses(&Tensor::param(&[1, 64], hard).unwrap(), &[m.clone()]).unwrap();
        assert!(bce.item() < 1e-5);
        assert!(dl.item().abs() < 1e-12);

        let (bce, _) = mask_losses(&Tensor::param(&[1, 64], vec![0.5; 64]).unwrap(), &[m]).unwrap();
        assert!((bce.item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn iou_head_examples() {
        let l = iou_head_loss(&logits(&[0.0]), &[0.7]).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(iou_head_loss(&logits(&[50.0]), &[1.0]).unwrap().item() < 1e-20);
        assert_eq!(iou_head_loss(&logits(&[0.3]).slice(0, 0, 1).unwrap(), &[]).unwrap().item(), 0.0);
        // BCE against a soft target is minimized where σ(x) equals the target
        let t = 0.3f64;
        let at = |x: f64| iou_head_loss(&logits(&[x]), &[t]).unwrap().item();
        let best = (t / (1.0 - t)).ln();
        assert!(at(best) < at(best + 0.1) && at(best) < at(best - 0.1));
    }

    #[test]
    fn total_examples() {
        let z = LossTerms::<f64>::zeros();
        let (t, r) = total_loss(&z, &LossWeights::default()).unwrap();
        assert_eq!(t.item(), 0.0);
        assert_eq!(r.total, 0.0);

        let mut one = LossTerms::<f64>::zeros();
        one.l1 = Tensor::scalar(1.0);
        let (t, _) = total_loss(&one, &LossWeights::default()).unwrap();
        assert_eq!(t.item(), 5.0);
    }
}
