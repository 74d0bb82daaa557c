//! Acceptance criteria 1-11, one PASS/FAIL line each.
//!
//! Criteria 8 and 9 read full-length runs from `$OPENSEG_ACCEPT_DIR`
//! (default `target/acceptance`, holding `data/` and `runs/`). With
//! `OPENSEG_ACCEPT_TRAIN=1` missing data and runs are produced first, which
//! takes hours. Those two are directional reproductions: their lines are
//! printed but do not set the exit status. Every other criterion does.

use std::collections::VecDeque;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use openseg::assignment::{hungarian, CostMatrix};
use openseg::contrastive::{contrastive_loss, ContrastiveHeads, ObjectCenter, ObjectQueue};
use openseg::evaluation::{evaluate, EvalConfig, EvalImage, EvalReport, IouKind};
use openseg::geometry::{box_iou, dice, giou, mask_iou, nms_indices, BBox, Mask, SoftMask};
use openseg::gradsuite;
use openseg::inference::{fuse_scores, Proposal};
use openseg::losses::mask_losses;
use openseg::shapeworld::{generate_scenes, split_dataset, CategorySplit, Dataset, GeneratorConfig, SplitMode};
use openseg::tensor::optim::{ParamId, ParamStore};
use openseg::tensor::Tensor;
use openseg::trainer::{run_experiment, AugmentMode, RunLocation, RunOptions, TrainConfig, Trainer, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criterion 1.
const FD_REL_TOL_F32: f64 = 1e-4;
const FD_REL_TOL_F64: f64 = 1e-6;
const FD_CASES: usize = 100;
const FD_BUDGET: Duration = Duration::from_secs(60);
/// Criterion 2.
const STOPGRAD_STEPS: usize = 50;
/// Criterion 3.
const HUNGARIAN_MATRICES: usize = 1000;
const HUNGARIAN_MAX: usize = 7;
const HUNGARIAN_BUDGET: Duration = Duration::from_secs(10);
/// Criterion 4.
const BOX_PAIRS: usize = 1000;
const BOX_RASTER_TOL: f64 = 1e-3;
const RASTER_RES: usize = 1 << 16;
const DICE_TOL: f64 = 1e-6;
/// Criterion 5.
const EVAL_FIXTURES: usize = 200;
const EVAL_TOL: f64 = 1e-12;
/// Criterion 6.
const CONTRASTIVE_SETS: usize = 1000;
const CLOSED_FORM_TOL: f64 = 1e-12;
/// Criterion 7.
const FUSION_TOL: f64 = 1e-6;
const NMS_SETS: usize = 1000;
/// Criterion 8 margins, in absolute metric units.
const SWORD_OVER_BASELINE_AR50: f64 = 0.05;
const SWORD_OVER_STOPGRAD_AP: f64 = 0.02;
const DAGGER_BELOW_SWORD_AR50: f64 = 0.01;
const PSEUDO_OVER_NONE_AR50: f64 = 0.03;
const LONG_SEEDS: [u64; 3] = [0, 1, 2];
/// Criterion 9.
const TOPK_SWEEP: [usize; 4] = [1, 3, 5, 10];
const TOPK_AP_SLACK: f64 = 0.01;

struct Line {
    pass: bool,
    detail: String,
}

fn ok(pass: bool, detail: impl Into<String>) -> Line {
    Line {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: Vec<(u32, &str, bool, fn() -> Line)> = vec![
        (1, "autodiff finite-difference checks", true, c1_autodiff),
        (2, "stop-grad contract", true, c2_stop_grad),
        (3, "hungarian oracle", true, c3_hungarian),
        (4, "geometry oracles", true, c4_geometry),
        (5, "evaluator oracle", true, c5_evaluator),
        (6, "contrastive and queue suite", true, c6_contrastive),
        (7, "fusion and nms suite", true, c7_fusion_nms),
        (8, "open-world directional reproduction", false, c8_directional),
        (9, "pseudo-label top-k trade-off", false, c9_topk),
        (10, "score histogram artifact", true, c10_histograms),
        (11, "reproducibility", true, c11_reproducibility),
    ];
    let mut gated_failures = 0;
    for (id, name, gated, f) in criteria {
        let start = Instant::now();
        let line = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            ok(false, format!("panicked: {msg}"))
        });
        let verdict = if line.pass { "PASS" } else { "FAIL" };
        let tag = if gated { "" } else { " [reported]" };
        println!(
            "CRITERION {id:>2} {verdict}{tag}: {name} ({:.1}s) {}",
            start.elapsed().as_secs_f64(),
            line.detail
        );
        if gated && !line.pass {
            gated_failures += 1;
        }
    }
    if gated_failures > 0 {
        std::process::exit(1);
    }
}

fn c1_autodiff() -> Line {
    let start = Instant::now();
    let reports = gradsuite::run(FD_CASES, 1).expect("suite runs");
    let elapsed = start.elapsed();
    let worst32 = reports.iter().map(|r| r.max_err_f32).fold(0.0, f64::max);
    let worst64 = reports.iter().map(|r| r.max_err_f64).fold(0.0, f64::max);
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !(r.max_err_f32 < FD_REL_TOL_F32 && r.max_err_f64 < FD_REL_TOL_F64))
        .map(|r| r.name)
        .collect();
    let all_cases = reports.iter().all(|r| r.cases == FD_CASES);
    ok(
        failed.is_empty() && all_cases && elapsed < FD_BUDGET,
        format!(
            "{} ops x {FD_CASES} cases, worst rel err f32 {worst32:.2e} f64 {worst64:.2e}, {:.1}s; failing: [{}]",
            reports.len(),
            elapsed.as_secs_f64(),
            failed.join(", ")
        ),
    )
}

fn small_dataset(seed: u64, n: usize, mode: SplitMode) -> Dataset {
    let (g, s) = (GeneratorConfig::default(), CategorySplit::default());
    split_dataset(&generate_scenes(seed, "train", n, &g, &s), &s, &g, mode)
}

fn c2_stop_grad() -> Line {
    let data = small_dataset(5, 64, SplitMode::TrainBase);
    let mut t = Trainer::new(TrainConfig {
        variant: Variant::Stopgrad,
        iterations: STOPGRAD_STEPS,
        ..TrainConfig::default()
    })
    .expect("trainer");
    t.instrument = true;
    let (mut max_trunk, mut min_head) = (0.0f64, f64::INFINITY);
    for it in 0..STOPGRAD_STEPS {
        let r = t.train_step(&t.batch(&data, it)).expect("step");
        max_trunk = max_trunk.max(r.cls_grad_trunk.expect("instrumented"));
        min_head = min_head.min(r.cls_grad_head.expect("instrumented"));
    }
    // control: without stop-grad the same measurement is nonzero
    let mut c = Trainer::new(TrainConfig::default()).expect("trainer");
    c.instrument = true;
    let control = c.train_step(&c.batch(&data, 0)).expect("step").cls_grad_trunk.expect("instrumented");
    ok(
        max_trunk == 0.0 && min_head > 0.0 && control > 0.0,
        format!(
            "{STOPGRAD_STEPS} steps: max trunk grad norm {max_trunk:e}, min head grad norm {min_head:.3e}; baseline control trunk {control:.3e}"
        ),
    )
}

/// Minimum total cost over all injections of the smaller side into the larger.
fn enumerate_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn rec(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                rec(cost, rows, cols, r + 1, used, acc + cost[r * cols + c], best);
                used[c] = false;
            }
        }
    }
    let (small, large, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if rows <= cols {
        (rows, cols, Box::new(|i, j| cost[i * cols + j]))
    } else {
        (cols, rows, Box::new(|i, j| cost[j * cols + i]))
    };
    let oriented: Vec<f64> = (0..small).flat_map(|i| (0..large).map(move |j| (i, j))).map(|(i, j)| at(i, j)).collect();
    let mut best = f64::INFINITY;
    rec(&oriented, small, large, 0, &mut vec![false; large], 0.0, &mut best);
    best
}

fn c3_hungarian() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    let mut mismatches = 0;
    let mut bad_shape = 0;
    for i in 0..HUNGARIAN_MATRICES {
        let (p, g) = (rng.random_range(1..=HUNGARIAN_MAX), rng.random_range(1..=HUNGARIAN_MAX));
        let cost: Vec<f64> = (0..p * g)
            .map(|_| {
                if i % 3 == 0 {
                    // small integers produce many ties
                    rng.random_range(0..4) as f64
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .collect();
        let m = CostMatrix::from_total(p, g, cost.clone()).expect("matrix");
        let result = hungarian(&m);
        let mut preds: Vec<usize> = result.pairs.iter().map(|x| x.0).collect();
        let mut gts: Vec<usize> = result.pairs.iter().map(|x| x.1).collect();
        preds.sort_unstable();
        preds.dedup();
        gts.sort_unstable();
        gts.dedup();
        if result.pairs.len() != p.min(g) || preds.len() != p.min(g) || gts.len() != p.min(g) {
            bad_shape += 1;
        }
        if result.total_cost(&m) != enumerate_min(&cost, p, g) {
            // exact equality can differ only by summation order
            if (result.total_cost(&m) - enumerate_min(&cost, p, g)).abs() > 1e-12 {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ok(
        mismatches == 0 && bad_shape == 0 && elapsed < HUNGARIAN_BUDGET,
        format!(
            "{HUNGARIAN_MATRICES} matrices up to {HUNGARIAN_MAX}x{HUNGARIAN_MAX}: {mismatches} cost mismatches, {bad_shape} malformed matchings, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Pixel centers `(k + 0.5) / RASTER_RES` falling in `[lo, hi)`.
fn raster_count(lo: f64, hi: f64) -> usize {
    (0..RASTER_RES)
        .filter(|&k| {
            let c = (k as f64 + 0.5) / RASTER_RES as f64;
            lo <= c && c < hi
        })
        .count()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.05..0.6);
    let h = rng.random_range(0.05..0.6);
    let x0 = rng.random_range(0.0..1.0 - w);
    let y0 = rng.random_range(0.0..1.0 - h);
    BBox::corners(x0, y0, x0 + w, y0 + h)
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).expect("mask")
}

fn c4_geometry() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_iou, mut worst_giou) = (0.0f64, 0.0f64);
    for _ in 0..BOX_PAIRS {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let [ax0, ay0, ax1, ay1] = a.xyxy();
        let [bx0, by0, bx1, by1] = b.xyxy();
        let area_a = raster_count(ax0, ax1) * raster_count(ay0, ay1);
        let area_b = raster_count(bx0, bx1) * raster_count(by0, by1);
        let inter = if ax0.max(bx0) < ax1.min(bx1) && ay0.max(by0) < ay1.min(by1) {
            raster_count(ax0.max(bx0), ax1.min(bx1)) * raster_count(ay0.max(by0), ay1.min(by1))
        } else {
            0
        };
        let union = area_a + area_b - inter;
        let hull = raster_count(ax0.min(bx0), ax1.max(bx1)) * raster_count(ay0.min(by0), ay1.max(by1));
        let iou_r = inter as f64 / union as f64;
        let giou_r = iou_r - (hull - union) as f64 / hull as f64;
        worst_iou = worst_iou.max((box_iou(a, b) - iou_r).abs());
        worst_giou = worst_giou.max((giou(a, b) - giou_r).abs());
    }

    let (mut iou_mismatch, mut worst_dice) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let (da, db) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (a, b) = (random_mask(&mut rng, h, w, da), random_mask(&mut rng, h, w, db));
        let (mut i, mut u) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                i += (a.get(y, x) && b.get(y, x)) as usize;
                u += (a.get(y, x) || b.get(y, x)) as usize;
            }
        }
        let want = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        if mask_iou(&a, &b).expect("same size") != want {
            iou_mismatch += 1;
        }

        let soft: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let (mut ab, mut sa, mut sb) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let p = soft[y * w + x] as f64;
                let t = if b.get(y, x) { 1.0 } else { 0.0 };
                ab += p * t;
                sa += p;
                sb += t;
            }
        }
        let want = (2.0 * ab + 1.0) / (sa + sb + 1.0);
        let sm = SoftMask::new(h, w, soft.clone()).expect("soft mask");
        worst_dice = worst_dice.max((dice(&sm, &b).expect("same size") - want).abs());
        let pred = Tensor::<f64>::new(&[1, h * w], soft.iter().map(|&v| v as f64).collect()).expect("tensor");
        let (_, loss) = mask_losses(&pred, std::slice::from_ref(&b)).expect("loss");
        worst_dice = worst_dice.max((loss.item() - (1.0 - want)).abs());
    }
    ok(
        worst_iou < BOX_RASTER_TOL && worst_giou < BOX_RASTER_TOL && iou_mismatch == 0 && worst_dice < DICE_TOL,
        format!(
            "{BOX_PAIRS} box pairs vs {RASTER_RES}^2 raster: max |dIoU| {worst_iou:.2e}, max |dGIoU| {worst_giou:.2e}; 1000 mask pairs: {iou_mismatch} IoU mismatches, max |d dice| {worst_dice:.2e}"
        ),
    )
}

fn square(x0: usize, y0: usize, w: usize, h: usize, n: usize) -> (BBox, Mask) {
    let mut m = Mask::empty(n, n);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            m.set(y, x, true);
        }
    }
    (m.bbox().expect("nonempty"), m)
}

fn proposal(shape: &(BBox, Mask), score: f64) -> Proposal {
    Proposal {
        score,
        class_score: score,
        box_iou: 1.0,
        mask_iou: 1.0,
        bbox: shape.0,
        mask: shape.1.clone(),
    }
}

fn random_images(rng: &mut ChaCha8Rng) -> Vec<EvalImage> {
    let n = 12;
    let rand_sq = |rng: &mut ChaCha8Rng| {
        let (w, h) = (rng.random_range(2..6), rng.random_range(2..6));
        square(rng.random_range(0..n - w), rng.random_range(0..n - h), w, h, n)
    };
    (0..rng.random_range(1..=4))
        .map(|_| {
            let gts: Vec<_> = (0..rng.random_range(0..=6)).map(|_| rand_sq(rng)).collect();
            let mut proposals: Vec<Proposal> = (0..rng.random_range(0..=10))
                .map(|_| {
                    let shape = if !gts.is_empty() && rng.random_bool(0.6) {
                        // a jittered copy of some gt
                        let g = &gts[rng.random_range(0..gts.len())];
                        let [x0, y0, x1, y1] = g.0.xyxy().map(|v| (v * n as f64).round() as usize);
                        let w = (x1 - x0).saturating_sub(rng.random_range(0..2)).max(1);
                        let h = (y1 - y0).saturating_sub(rng.random_range(0..2)).max(1);
                        square((x0 + rng.random_range(0..2)).min(n - w), y0.min(n - h), w, h, n)
                    } else {
                        rand_sq(rng)
                    };
                    proposal(&shape, rng.random_range(0..6) as f64 / 5.0)
                })
                .collect();
            proposals.sort_by(|a, b| b.score.total_cmp(&a.score));
            EvalImage {
                gts,
                ignores: vec![],
                proposals,
            }
        })
        .collect()
}

/// Brute-force evaluator: for every threshold, greedy matching per image in
/// rank order, then AP as the mean over recall steps of the best precision at
/// any cutoff reaching that recall.
fn reference_metrics(images: &[EvalImage], cfg: &EvalConfig, kind: IouKind) -> (Option<f64>, Vec<Option<f64>>) {
    let iou = |p: &Proposal, g: &(BBox, Mask)| match kind {
        IouKind::Box => box_iou(p.bbox, g.0),
        IouKind::Mask => mask_iou(&p.mask, &g.1).expect("same size"),
    };
    let n_gts: usize = images.iter().map(|i| i.gts.len()).sum();
    if n_gts == 0 {
        return (None, vec![None; cfg.caps.len()]);
    }
    // per image and cap: matched flags for each proposal rank
    let greedy = |img: &EvalImage, t: f64, cap: usize| -> Vec<bool> {
        let mut taken = vec![false; img.gts.len()];
        img.proposals
            .iter()
            .take(cap)
            .map(|p| {
                let mut best: Option<(f64, usize)> = None;
                for (gi, g) in img.gts.iter().enumerate() {
                    let v = iou(p, g);
                    if !taken[gi] && v >= t && best.is_none_or(|(b, _)| v > b) {
                        best = Some((v, gi));
                    }
                }
                best.map(|(_, gi)| taken[gi] = true).is_some()
            })
            .collect()
    };
    let (mut ap_sum, mut ar_sum) = (0.0, vec![0.0; cfg.caps.len()]);
    for &t in &cfg.thresholds {
        let mut pool: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (ii, img) in images.iter().enumerate() {
            for (r, tp) in greedy(img, t, cfg.max_cap()).into_iter().enumerate() {
                pool.push((img.proposals[r].score, ii, r, tp));
            }
        }
        pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut curve = Vec::new();
        let mut tp = 0;
        for (i, d) in pool.iter().enumerate() {
            tp += d.3 as usize;
            curve.push((tp, (i + 1) as f64));
        }
        let mut area = 0.0;
        for level in 1..=tp {
            area += curve
                .iter()
                .filter(|c| c.0 >= level)
                .map(|c| c.0 as f64 / c.1)
                .fold(0.0, f64::max);
        }
        ap_sum += area / n_gts as f64;
        for (ci, &k) in cfg.caps.iter().enumerate() {
            let hits: usize = images.iter().map(|img| greedy(img, t, k).iter().filter(|&&m| m).count()).sum();
            ar_sum[ci] += hits as f64 / n_gts as f64;
        }
    }
    let nt = cfg.thresholds.len() as f64;
    (Some(ap_sum / nt), ar_sum.into_iter().map(|a| Some(a / nt)).collect())
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= EVAL_TOL,
        (None, None) => true,
        _ => false,
    }
}

fn c5_evaluator() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EvalConfig {
        caps: vec![1, 3, 100],
        ..EvalConfig::default()
    };
    let mut mismatches = 0;
    for _ in 0..EVAL_FIXTURES {
        let images = random_images(&mut rng);
        let report = evaluate(&images, &cfg);
        for kind in [IouKind::Box, IouKind::Mask] {
            let (ap, ars) = reference_metrics(&images, &cfg, kind);
            let m = match kind {
                IouKind::Box => &report.bbox,
                IouKind::Mask => &report.mask,
            };
            let ar_ok = cfg.caps.iter().zip(&ars).all(|(k, want)| close(m.ar[k], *want));
            if !close(m.ap, ap) || !ar_ok {
                mismatches += 1;
            }
        }
    }
    // 4x4 gt, proposal covering three of its columns: IoU 0.75, so it counts
    // at thresholds 0.50..0.75, six of ten
    let gt = square(0, 0, 4, 4, 8);
    let p = square(0, 0, 3, 4, 8);
    let hand = evaluate(
        &[EvalImage {
            gts: vec![gt],
            ignores: vec![],
            proposals: vec![proposal(&p, 0.9)],
        }],
        &EvalConfig::default(),
    );
    let (ap, ar) = (hand.mask.ap.unwrap_or(f64::NAN), hand.mask.ar[&100].unwrap_or(f64::NAN));
    let hand_ok = (ap - 0.6).abs() < EVAL_TOL && (ar - 0.6).abs() < EVAL_TOL;
    ok(
        mismatches == 0 && hand_ok,
        format!("{EVAL_FIXTURES} fixtures x box/mask: {mismatches} mismatches; hand fixture AP {ap} AR@100 {ar}"),
    )
}

fn rows(v: &[Vec<f64>]) -> Option<Tensor<f64>> {
    if v.is_empty() {
        return None;
    }
    let d = v[0].len();
    Some(Tensor::new(&[v.len(), d], v.concat()).expect("rows"))
}

fn con(center: &ObjectCenter, pos: &[Vec<f64>], neg: &[Vec<f64>]) -> f64 {
    contrastive_loss(center, rows(pos).as_ref(), rows(neg).as_ref())
        .expect("loss")
        .expect("positives present")
        .item()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

fn c6_contrastive() -> Line {
    let mut problems = Vec::new();
    let c = ObjectCenter(vec![1.0, 0.0]);
    let a = con(&c, &[vec![0.0, 1.0]], &[vec![0.0, -1.0]]);
    let b = con(&c, &[vec![2f64.ln(), 0.0]], &[vec![0.0, 1.0]]);
    if (a + 0.5f64.ln()).abs() > CLOSED_FORM_TOL || (b + (2.0f64 / 3.0).ln()).abs() > CLOSED_FORM_TOL {
        problems.push(format!("closed forms {a} {b}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for _ in 0..CONTRASTIVE_SETS {
        let d = rng.random_range(2..16);
        let center = ObjectCenter(unit(&mut rng, d));
        let pos: Vec<Vec<f64>> = (0..rng.random_range(1..5)).map(|_| unit(&mut rng, d)).collect();
        let neg: Vec<Vec<f64>> = (0..rng.random_range(1..6)).map(|_| unit(&mut rng, d)).collect();
        let base = con(&center, &pos, &neg);
        let eps = rng.random_range(0.05..0.5);
        let toward = |v: &Vec<f64>| -> Vec<f64> { v.iter().zip(&center.0).map(|(x, c)| x + eps * c).collect() };
        let mut more_neg = neg.clone();
        more_neg.push(unit(&mut rng, d));
        let (i, j) = (rng.random_range(0..pos.len()), rng.random_range(0..neg.len()));
        let mut closer_pos = pos.clone();
        closer_pos[i] = toward(&pos[i]);
        let mut closer_neg = neg.clone();
        closer_neg[j] = toward(&neg[j]);
        let holds = base >= 0.0
            && con(&center, &pos, &more_neg) > base
            && con(&center, &closer_pos, &neg) < base
            && con(&center, &pos, &closer_neg) > base
            && con(&center, &pos, &[]).abs() < 1e-12;
        violations += (!holds) as usize;
    }
    if violations > 0 {
        problems.push(format!("{violations} monotonicity violations"));
    }

    // EMA toward a fixed target closes the gap by exactly alpha per update
    let mut ema_worst = 0.0f64;
    for _ in 0..100 {
        let alpha = rng.random_range(0.0..0.99);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", &[4], (0..4).map(|_| rng.random_range(-2.0..2.0)).collect());
        let mut heads = ContrastiveHeads::new(&store, vec![id], alpha);
        let start = heads.momentum.values(ParamId(0)).to_vec();
        let target: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        store.set_values(id, target.clone());
        let n = rng.random_range(1..40);
        for _ in 0..n {
            heads.ema_update(&store);
        }
        for ((m, s), t) in heads.momentum.values(ParamId(0)).iter().zip(&start).zip(&target) {
            let want = t + alpha.powi(n) * (s - t);
            ema_worst = ema_worst.max((m - want).abs());
        }
    }
    if ema_worst > 1e-12 {
        problems.push(format!("ema error {ema_worst:e}"));
    }

    let mut queue_violations = 0;
    for _ in 0..CONTRASTIVE_SETS {
        let (cap, d) = (rng.random_range(1..8), rng.random_range(1..5));
        let mut q = ObjectQueue::new(cap, d);
        let mut model: VecDeque<Vec<f32>> = VecDeque::new();
        for _ in 0..rng.random_range(0..12) {
            let batch: Vec<Vec<f32>> = (0..rng.random_range(0..5))
                .map(|_| (0..d).map(|_| rng.random_range(0.1f32..1.0)).collect())
                .collect();
            q.enqueue(&batch).expect("nonzero rows");
            for v in batch {
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                model.push_back(v.iter().map(|x| x / n).collect());
                if model.len() > cap {
                    model.pop_front();
                }
            }
            let got: Vec<&[f32]> = q.iter().collect();
            let same = got.len() == model.len()
                && q.len() <= q.capacity()
                && got
                    .iter()
                    .zip(&model)
                    .all(|(g, m)| g.iter().zip(m).all(|(a, b)| (a - b).abs() < 1e-6));
            queue_violations += (!same) as usize;
        }
    }
    if queue_violations > 0 {
        problems.push(format!("{queue_violations} queue states differ from the FIFO model"));
    }
    ok(
        problems.is_empty(),
        format!(
            "closed forms {a:.12} / {b:.12}; {CONTRASTIVE_SETS} embedding sets; ema max err {ema_worst:.1e}; {CONTRASTIVE_SETS} queue sequences; problems: [{}]",
            problems.join("; ")
        ),
    )
}

fn c7_fusion_nms() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut fusion_worst = 0.0f64;
    for i in 0..100_000 {
        let mut draw = || match i % 4 {
            0 => rng.random_range(0.0..1e-6),
            1 => 1.0 - rng.random_range(0.0..1e-6),
            _ => rng.random_range(0.0..1.0),
        };
        let (a, b, c) = (draw(), draw(), draw());
        fusion_worst = fusion_worst.max((fuse_scores(a, b, c).powi(3) - a * b * c).abs());
    }
    let mut nms_violations = 0;
    for _ in 0..NMS_SETS {
        let n = rng.random_range(0..30);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 7.0).collect();
        let t = rng.random_range(0.1..0.9);
        let kept = nms_indices(&boxes, &scores, t);
        let kb: Vec<BBox> = kept.iter().map(|&i| boxes[i]).collect();
        let ks: Vec<f64> = kept.iter().map(|&i| scores[i]).collect();
        let again = nms_indices(&kb, &ks, t);
        let idempotent = again == (0..kept.len()).collect::<Vec<_>>();
        let separated = kb
            .iter()
            .enumerate()
            .all(|(i, a)| kb[i + 1..].iter().all(|b| box_iou(*a, *b) <= t));
        nms_violations += (!(idempotent && separated)) as usize;
    }
    ok(
        fusion_worst < FUSION_TOL && nms_violations == 0,
        format!("fusion max |s^3 - product| {fusion_worst:.1e}; {NMS_SETS} nms sets, {nms_violations} violations"),
    )
}

fn accept_dir() -> PathBuf {
    std::env::var_os("OPENSEG_ACCEPT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn may_train() -> bool {
    std::env::var("OPENSEG_ACCEPT_TRAIN").is_ok_and(|v| v == "1")
}

fn long_config(variant: Variant, seed: u64, top_k: Option<usize>) -> TrainConfig {
    let mut c = TrainConfig {
        variant,
        seed,
        ..TrainConfig::default()
    };
    if let Some(k) = top_k {
        c.pseudo.top_k = k;
    }
    c
}

/// Full-length data at the default scale, generated on demand.
fn long_data() -> Result<PathBuf, String> {
    let data = accept_dir().join("data");
    if data.join(SplitMode::EvalAll.file_name()).is_file() {
        return Ok(data);
    }
    if !may_train() {
        return Err(format!("no data at {} (set OPENSEG_ACCEPT_TRAIN=1)", data.display()));
    }
    let (g, s) = (GeneratorConfig::default(), CategorySplit::default());
    let train = generate_scenes(0, "train", 2000, &g, &s);
    let eval = generate_scenes(0, "eval", 200, &g, &s);
    for mode in [SplitMode::TrainBase, SplitMode::EvalNovel, SplitMode::EvalAll] {
        let scenes = if mode == SplitMode::TrainBase { &train } else { &eval };
        split_dataset(scenes, &s, &g, mode)
            .save(&data, mode.file_name())
            .map_err(|e| e.to_string())?;
    }
    Ok(data)
}

/// `(novel, all)` reports of a completed long run.
fn long_run(cfg: &TrainConfig) -> Result<(EvalReport, EvalReport), String> {
    let dir = accept_dir().join("runs").join(cfg.run_name());
    let read = |split: &str| -> Result<EvalReport, String> {
        let p = dir.join(format!("metrics-{split}.json"));
        let text = fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    if let (Ok(n), Ok(a)) = (read("novel"), read("all")) {
        return Ok((n, a));
    }
    if !may_train() {
        return Err(format!("run {} missing (set OPENSEG_ACCEPT_TRAIN=1)", cfg.run_name()));
    }
    let data = long_data()?;
    let out = run_experiment(
        cfg,
        &data,
        &RunLocation::Under(accept_dir().join("runs")),
        RunOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    Ok((out.novel, out.all))
}

fn mean_metric(variant: Variant, top_k: Option<usize>, pick: impl Fn(&EvalReport, &EvalReport) -> f64) -> Result<f64, String> {
    let mut sum = 0.0;
    for seed in LONG_SEEDS {
        let (n, a) = long_run(&long_config(variant, seed, top_k))?;
        sum += pick(&n, &a);
    }
    Ok(sum / LONG_SEEDS.len() as f64)
}

fn novel_ar50(n: &EvalReport, _: &EvalReport) -> f64 {
    n.metric(IouKind::Mask, "ar@50").unwrap_or(0.0)
}

fn all_ap(_: &EvalReport, a: &EvalReport) -> f64 {
    a.metric(IouKind::Mask, "ap").unwrap_or(0.0)
}

fn c8_directional() -> Line {
    let result = (|| -> Result<Line, String> {
        let base_ar = mean_metric(Variant::Baseline, None, novel_ar50)?;
        let sword_ar = mean_metric(Variant::Sword, None, novel_ar50)?;
        let dagger_ar = mean_metric(Variant::SwordDagger, None, novel_ar50)?;
        let sword_ap = mean_metric(Variant::Sword, None, all_ap)?;
        let stop_ap = mean_metric(Variant::Stopgrad, None, all_ap)?;
        let a = sword_ar - base_ar >= SWORD_OVER_BASELINE_AR50;
        let b = sword_ap - stop_ap >= SWORD_OVER_STOPGRAD_AP;
        let c = dagger_ar >= sword_ar - DAGGER_BELOW_SWORD_AR50 && dagger_ar - base_ar >= PSEUDO_OVER_NONE_AR50;
        let v = |x: bool| if x { "ok" } else { "FAIL" };
        Ok(ok(
            a && b && c,
            format!(
                "novel mask AR@50 baseline {base_ar:.4} sword {sword_ar:.4} sword-dagger {dagger_ar:.4}; all mask AP stopgrad {stop_ap:.4} sword {sword_ap:.4}; (a) {} (b) {} (c) {}",
                v(a),
                v(b),
                v(c)
            ),
        ))
    })();
    result.unwrap_or_else(|e| ok(false, format!("not evaluated: {e}")))
}

/// Spearman rank correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (m(&rx), m(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        0.0
    } else {
        cov / (sx * sy)
    }
}

fn c9_topk() -> Line {
    let result = (|| -> Result<Line, String> {
        let mut ars = Vec::new();
        let mut aps = Vec::new();
        for k in TOPK_SWEEP {
            ars.push(mean_metric(Variant::SwordDagger, Some(k), novel_ar50)?);
            aps.push(mean_metric(Variant::SwordDagger, Some(k), all_ap)?);
        }
        let ks: Vec<f64> = TOPK_SWEEP.iter().map(|&k| k as f64).collect();
        let rho = spearman(&ks, &ars);
        let ap_ok = aps[3] <= aps[0] + TOPK_AP_SLACK;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        Ok(ok(
            rho >= 0.0 && ap_ok,
            format!(
                "top-k {TOPK_SWEEP:?}: novel AR@50 [{}] spearman {rho:.3}; all AP [{}] (k=10 vs k=1 slack {TOPK_AP_SLACK})",
                fmt(&ars),
                fmt(&aps)
            ),
        ))
    })();
    result.unwrap_or_else(|e| ok(false, format!("not evaluated: {e}")))
}

fn write_small_data(dir: &Path) {
    let (g, s) = (GeneratorConfig::default(), CategorySplit::default());
    let train = generate_scenes(9, "train", 24, &g, &s);
    let eval = generate_scenes(9, "eval", 12, &g, &s);
    for mode in [SplitMode::TrainBase, SplitMode::EvalNovel, SplitMode::EvalAll] {
        let scenes = if mode == SplitMode::TrainBase { &train } else { &eval };
        split_dataset(scenes, &s, &g, mode).save(dir, mode.file_name()).expect("save");
    }
}

fn short_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        iterations: 12,
        batch_size: 2,
        augment: AugmentMode::Weak,
        ..TrainConfig::default()
    }
}

fn parse_histogram(path: &Path) -> Result<Vec<(f64, usize)>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    if lines.next() != Some("bin_left,count") {
        return Err(format!("{}: bad header", path.display()));
    }
    lines
        .map(|l| {
            let (a, b) = l.split_once(',').ok_or("missing comma")?;
            Ok((a.parse().map_err(|_| "bad bin")?, b.parse().map_err(|_| "bad count")?))
        })
        .collect::<Result<_, &str>>()
        .map_err(|e| format!("{}: {e}", path.display()))
}

/// Share of proposals in the outer thirds of the score range.
fn outer_mass(hist: &[(f64, usize)]) -> f64 {
    let total: usize = hist.iter().map(|h| h.1).sum();
    let outer: usize = hist.iter().filter(|h| h.0 < 1.0 / 3.0 || h.0 >= 2.0 / 3.0).map(|h| h.1).sum();
    if total == 0 {
        0.0
    } else {
        outer as f64 / total as f64
    }
}

fn c10_histograms() -> Line {
    let tmp = tempfile::tempdir().expect("tempdir");
    let data = tmp.path().join("data");
    write_small_data(&data);
    let mut problems = Vec::new();
    let mut notes = Vec::new();
    for variant in [Variant::Baseline, Variant::Sword] {
        let out = run_experiment(
            &short_config(variant),
            &data,
            &RunLocation::Under(tmp.path().join("runs")),
            RunOptions::default(),
        )
        .expect("short run");
        for (split, report) in [("novel", &out.novel), ("all", &out.all)] {
            match parse_histogram(&out.run_dir.join(format!("histogram-{split}.csv"))) {
                Ok(h) => {
                    let total: usize = h.iter().map(|x| x.1).sum();
                    if total != report.proposals {
                        problems.push(format!("{variant:?}/{split}: bins sum {total} != {}", report.proposals));
                    }
                    if split == "all" {
                        notes.push(format!("{} outer-third mass {:.2}", variant.name(), outer_mass(&h)));
                    }
                }
                Err(e) => problems.push(e),
            }
        }
    }
    // full-length runs, when present, give the meaningful shape comparison
    let long: Vec<String> = [Variant::Baseline, Variant::Sword]
        .iter()
        .filter_map(|&v| {
            let p = accept_dir().join("runs").join(long_config(v, 0, None).run_name()).join("histogram-all.csv");
            parse_histogram(&p).ok().map(|h| format!("{} {:.2}", v.name(), outer_mass(&h)))
        })
        .collect();
    if !long.is_empty() {
        notes.push(format!("full runs outer-third mass: {}", long.join(", ")));
    }
    ok(
        problems.is_empty(),
        format!("histograms parse and sum to proposal counts; {}; problems: [{}]", notes.join("; "), problems.join("; ")),
    )
}

fn c11_reproducibility() -> Line {
    let tmp = tempfile::tempdir().expect("tempdir");
    let data = tmp.path().join("data");
    write_small_data(&data);
    let mut identical = Vec::new();
    for variant in [Variant::Sword, Variant::SwordDagger] {
        let cfg = short_config(variant);
        let dirs: Vec<PathBuf> = ["a", "b"]
            .iter()
            .map(|d| {
                run_experiment(&cfg, &data, &RunLocation::Under(tmp.path().join(d)), RunOptions::default())
                    .expect("run")
                    .run_dir
            })
            .collect();
        for file in ["metrics-novel.json", "metrics-all.json", "checkpoint.bin", "train_log.jsonl", "proposals.jsonl"] {
            let read = |d: &PathBuf| fs::read(d.join(file)).expect("artifact");
            identical.push((format!("{}/{file}", variant.name()), read(&dirs[0]) == read(&dirs[1])));
        }
    }
    let differing: Vec<&str> = identical.iter().filter(|x| !x.1).map(|x| x.0.as_str()).collect();
    ok(
        differing.is_empty(),
        format!("{} artifacts compared byte for byte; differing: [{}]", identical.len(), differing.join(", ")),
    )
}
