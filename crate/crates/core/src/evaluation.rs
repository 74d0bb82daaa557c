//! Class-agnostic AP and AR@k over IoU thresholds, for boxes and masks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_iou, mask_iou, BBox, Mask};
use crate::inference::{Proposal, ProposalSet};
use crate::shapeworld::{Category, CategorySplit, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Box,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitSelector {
    Novel,
    #[default]
    All,
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Proposal caps for AR@k; the largest also caps AP and the size buckets.
    pub caps: Vec<usize>,
    /// Mask-area fractions separating small/medium and medium/large.
    pub small_area: f64,
    pub large_area: f64,
    pub split: SplitSelector,
    /// In novel-split evaluation, treat base objects as ignore regions instead of background.
    pub ignore_base: bool,
    pub histogram_bins: usize,
}

pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            caps: vec![10, 50, 100],
            small_area: 0.015,
            large_area: 0.10,
            split: SplitSelector::All,
            ignore_base: false,
            histogram_bins: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.thresholds.is_empty() {
            return Err("at least one IoU threshold is required".into());
        }
        if !self.thresholds.windows(2).all(|w| w[0] < w[1])
            || self.thresholds.iter().any(|t| !(0.5..=0.95 + 1e-12).contains(t))
        {
            return Err("thresholds must be strictly increasing within [0.5, 0.95]".into());
        }
        if self.caps.is_empty() {
            return Err("at least one proposal cap is required".into());
        }
        if !(0.0 < self.small_area && self.small_area < self.large_area && self.large_area < 1.0) {
            return Err("size buckets need 0 < small_area < large_area < 1".into());
        }
        if self.histogram_bins == 0 {
            return Err("histogram_bins must be positive".into());
        }
        Ok(())
    }

    pub fn max_cap(&self) -> usize {
        self.caps.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Tp,
    Fp,
    /// Unmatched, but overlapping an ignore region.
    Ignored,
}

/// Greedy one-to-one matching at one threshold. `ious` is `[proposals, gts]`
/// row-major with proposals sorted by descending score; each proposal takes the
/// highest-IoU unmatched gt with IoU ≥ `threshold` (ties to the lower index).
/// `ignore_ious` is `[proposals, ignores]`.
pub fn match_predictions(
    ious: &[f64],
    n_props: usize,
    n_gts: usize,
    ignore_ious: &[f64],
    n_ignores: usize,
    threshold: f64,
) -> (Vec<Outcome>, Vec<bool>) {
    assert_eq!(ious.len(), n_props * n_gts);
    assert_eq!(ignore_ious.len(), n_props * n_ignores);
    let mut matched = vec![false; n_gts];
    let mut outcomes = Vec::with_capacity(n_props);
    for p in 0..n_props {
        let mut best: Option<(usize, f64)> = None;
        for g in 0..n_gts {
            let v = ious[p * n_gts + g];
            if !matched[g] && v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let outcome = match best {
            Some((g, _)) => {
                matched[g] = true;
                Outcome::Tp
            }
            None if (0..n_ignores).any(|k| ignore_ious[p * n_ignores + k] >= threshold) => Outcome::Ignored,
            None => Outcome::Fp,
        };
        outcomes.push(outcome);
    }
    (outcomes, matched)
}

/// Area under the interpolated precision-recall curve for detections pooled
/// across images, given as `(score, image, rank, outcome)`. `None` without gts.
pub fn average_precision(detections: &[(f64, usize, usize, Outcome)], n_gts: usize) -> Option<f64> {
    if n_gts == 0 {
        return None;
    }
    let mut order: Vec<&(f64, usize, usize, Outcome)> =
        detections.iter().filter(|d| d.3 != Outcome::Ignored).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut is_tp = Vec::with_capacity(order.len());
    for (i, d) in order.iter().enumerate() {
        if d.3 == Outcome::Tp {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        is_tp.push(d.3 == Outcome::Tp);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let area: f64 = precision.iter().zip(&is_tp).filter(|(_, &t)| t).map(|(p, _)| *p).sum();
    Some(area / n_gts as f64)
}

/// One evaluation image: ground truths, ignore regions and score-sorted proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub gts: Vec<(BBox, Mask)>,
    pub ignores: Vec<(BBox, Mask)>,
    pub proposals: Vec<Proposal>,
}

struct Prepared {
    /// Per kind, `[proposals, gts]` and `[proposals, ignores]` IoUs.
    ious: BTreeMap<IouKind, (Vec<f64>, Vec<f64>)>,
    buckets: Vec<SizeBucket>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

pub fn size_bucket(mask: &Mask, cfg: &EvalConfig) -> SizeBucket {
    let frac = mask.count() as f64 / (mask.height * mask.width) as f64;
    if frac < cfg.small_area {
        SizeBucket::Small
    } else if frac > cfg.large_area {
        SizeBucket::Large
    } else {
        SizeBucket::Medium
    }
}

fn iou_matrix(props: &[Proposal], targets: &[(BBox, Mask)], kind: IouKind) -> Vec<f64> {
    let mut out = Vec::with_capacity(props.len() * targets.len());
    for p in props {
        for (b, m) in targets {
            out.push(match kind {
                IouKind::Box => box_iou(p.bbox, *b),
                IouKind::Mask => mask_iou(&p.mask, m).expect("proposal and gt masks share the image size"),
            });
        }
    }
    out
}

fn prepare(img: &EvalImage, cfg: &EvalConfig) -> Prepared {
    let props = &img.proposals[..img.proposals.len().min(cfg.max_cap())];
    let mut ious = BTreeMap::new();
    for kind in [IouKind::Box, IouKind::Mask] {
        ious.insert(
            kind,
            (iou_matrix(props, &img.gts, kind), iou_matrix(props, &img.ignores, kind)),
        );
    }
    Prepared {
        ious,
        buckets: img.gts.iter().map(|(_, m)| size_bucket(m, cfg)).collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    pub ap: Option<f64>,
    /// AR@k keyed by k.
    pub ar: BTreeMap<usize, Option<f64>>,
    pub ar_small: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ar_large: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Option<SplitSelector>,
    pub images: usize,
    pub gts: usize,
    pub proposals: usize,
    #[serde(rename = "box")]
    pub bbox: KindMetrics,
    pub mask: KindMetrics,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn kind_metrics(images: &[EvalImage], prepared: &[Prepared], kind: IouKind, cfg: &EvalConfig) -> KindMetrics {
    let key = kind;
    let n_gts: usize = images.iter().map(|i| i.gts.len()).sum();
    let bucket_total = |b: SizeBucket| prepared.iter().flat_map(|p| &p.buckets).filter(|&&x| x == b).count();
    let max_cap = cfg.max_cap();

    let mut ap_per_t = Vec::new();
    let mut ar_per_t: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut bucket_per_t: [Vec<f64>; 3] = Default::default();
    for &t in &cfg.thresholds {
        let mut dets = Vec::new();
        let mut bucket_hits = [0usize; 3];
        for (idx, (img, prep)) in images.iter().zip(prepared).enumerate() {
            let (g, ig) = (img.gts.len(), img.ignores.len());
            let (iou, ign) = &prep.ious[&key];
            let n = img.proposals.len().min(max_cap);
            let (outcomes, matched) = match_predictions(iou, n, g, ign, ig, t);
            for (rank, o) in outcomes.into_iter().enumerate() {
                dets.push((img.proposals[rank].score, idx, rank, o));
            }
            for (m, b) in matched.iter().zip(&prep.buckets) {
                if *m {
                    bucket_hits[*b as usize] += 1;
                }
            }
        }
        if let Some(ap) = average_precision(&dets, n_gts) {
            ap_per_t.push(ap);
        }
        for &k in &cfg.caps {
            if n_gts == 0 {
                continue;
            }
            let hits: usize = images
                .iter()
                .zip(prepared)
                .map(|(img, prep)| {
                    let (g, ig) = (img.gts.len(), img.ignores.len());
                    let (iou, ign) = &prep.ious[&key];
                    let kk = k.min(max_cap).min(img.proposals.len());
                    match_predictions(&iou[..kk * g], kk, g, &ign[..kk * ig], ig, t)
                        .1
                        .iter()
                        .filter(|&&m| m)
                        .count()
                })
                .sum();
            ar_per_t.entry(k).or_default().push(hits as f64 / n_gts as f64);
        }
        for b in [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large] {
            let total = bucket_total(b);
            if total > 0 {
                bucket_per_t[b as usize].push(bucket_hits[b as usize] as f64 / total as f64);
            }
        }
    }
    let opt_mean = |v: &Vec<f64>| if v.is_empty() { None } else { Some(mean(v)) };
    KindMetrics {
        ap: opt_mean(&ap_per_t),
        ar: cfg
            .caps
            .iter()
            .map(|&k| (k, ar_per_t.get(&k).and_then(opt_mean)))
            .collect(),
        ar_small: opt_mean(&bucket_per_t[0]),
        ar_medium: opt_mean(&bucket_per_t[1]),
        ar_large: opt_mean(&bucket_per_t[2]),
    }
}

/// Metrics over prepared images. Proposals must be sorted by descending score.
pub fn evaluate(images: &[EvalImage], cfg: &EvalConfig) -> EvalReport {
    let prepared: Vec<Prepared> = images.iter().map(|i| prepare(i, cfg)).collect();
    EvalReport {
        split: Some(cfg.split),
        images: images.len(),
        gts: images.iter().map(|i| i.gts.len()).sum(),
        proposals: images.iter().map(|i| i.proposals.len().min(cfg.max_cap())).sum(),
        bbox: kind_metrics(images, &prepared, IouKind::Box, cfg),
        mask: kind_metrics(images, &prepared, IouKind::Mask, cfg),
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("proposals reference images missing from the dataset: {0}")]
    UnknownImages(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

fn selected(c: Option<Category>, sel: SplitSelector, split: &CategorySplit) -> bool {
    match (sel, c) {
        (SplitSelector::All, _) => true,
        (SplitSelector::Novel, Some(c)) => split.is_novel(c),
        (SplitSelector::Base, Some(c)) => split.is_base(c),
        (_, None) => false,
    }
}

/// Joins a dataset with proposals by image id.
pub fn build_images(dataset: &Dataset, proposals: &ProposalSet, cfg: &EvalConfig) -> Result<Vec<EvalImage>, EvalError> {
    let known: std::collections::HashSet<&str> = dataset.scenes.iter().map(|s| s.id.as_str()).collect();
    let unknown: Vec<&str> = proposals
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        let shown: Vec<&str> = unknown.iter().take(10).copied().collect();
        let more = if unknown.len() > 10 { format!(" (+{} more)", unknown.len() - 10) } else { String::new() };
        return Err(EvalError::UnknownImages(format!("{}{more}", shown.join(", "))));
    }
    let by_id: BTreeMap<&str, &Vec<Proposal>> = proposals.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let split = &dataset.header.split;
    Ok(dataset
        .scenes
        .iter()
        .map(|s| {
            let mut props = by_id.get(s.id.as_str()).map(|p| (*p).clone()).unwrap_or_default();
            props.sort_by(|a, b| b.score.total_cmp(&a.score));
            let pick = |keep: &dyn Fn(Option<Category>) -> bool| {
                s.instances
                    .iter()
                    .filter(|i| keep(i.category))
                    .map(|i| (i.bbox, i.mask.clone()))
                    .collect::<Vec<_>>()
            };
            let gts = pick(&|c| selected(c, cfg.split, split));
            let ignores = if cfg.ignore_base && cfg.split == SplitSelector::Novel {
                pick(&|c| c.is_some_and(|c| split.is_base(c)))
            } else {
                Vec::new()
            };
            EvalImage {
                gts,
                ignores,
                proposals: props,
            }
        })
        .collect())
}

/// Fused-score histogram over the top-`max_cap` proposals of every image,
/// as `(bin_left, count)` over equal-width bins on `[0, 1]`.
pub fn score_histogram(images: &[EvalImage], cfg: &EvalConfig) -> Vec<(f64, usize)> {
    let bins = cfg.histogram_bins;
    let mut counts = vec![0usize; bins];
    for img in images {
        for p in img.proposals.iter().take(cfg.max_cap()) {
            let b = ((p.score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 / bins as f64, c))
        .collect()
}

pub fn histogram_csv(hist: &[(f64, usize)]) -> String {
    let mut s = String::from("bin_left,count\n");
    for (left, count) in hist {
        let _ = writeln!(s, "{left},{count}");
    }
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// One `key = value` line per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(split) = self.split {
            let _ = writeln!(s, "split = {}", serde_json::to_value(split).expect("enum").as_str().unwrap_or(""));
        }
        let _ = writeln!(s, "images = {}", self.images);
        let _ = writeln!(s, "gts = {}", self.gts);
        let _ = writeln!(s, "proposals = {}", self.proposals);
        for (tag, m) in [("b", &self.bbox), ("m", &self.mask)] {
            let _ = writeln!(s, "AP^{tag} = {}", fmt_opt(m.ap));
            for (k, v) in &m.ar {
                let _ = writeln!(s, "AR^{tag}@{k} = {}", fmt_opt(*v));
            }
            let _ = writeln!(s, "AR^{tag}_s = {}", fmt_opt(m.ar_small));
            let _ = writeln!(s, "AR^{tag}_m = {}", fmt_opt(m.ar_medium));
            let _ = writeln!(s, "AR^{tag}_l = {}", fmt_opt(m.ar_large));
        }
        s
    }

    pub fn metric(&self, kind: IouKind, name: &str) -> Option<f64> {
        let m = match kind {
            IouKind::Box => &self.bbox,
            IouKind::Mask => &self.mask,
        };
        match name {
            "ap" => m.ap,
            "ar_s" => m.ar_small,
            "ar_m" => m.ar_medium,
            "ar_l" => m.ar_large,
            _ => name
                .strip_prefix("ar@")
                .and_then(|k| k.parse().ok())
                .and_then(|k: usize| m.ar.get(&k).copied().flatten()),
        }
    }
}
