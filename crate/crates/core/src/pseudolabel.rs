//! Teacher pseudo-labels merged into training annotations, and the weak/strong
//! augmentations used when training the student.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{box_iou, BBox};
use crate::inference::{predict_dataset, FusionMode, PostprocessConfig, Proposal, ProposalSet};
use crate::model::{Model, ModelError};
use crate::shapeworld::{Dataset, Instance, RgbImage, Scene};
use crate::tensor::Real;

/// Box IoU above which a proposal is considered an already-annotated object.
pub const OVERLAP_DISCARD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub top_k: usize,
    pub nms: f64,
    pub fusion: FusionMode,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            nms: 0.3,
            fusion: FusionMode::IouOnly,
        }
    }
}

/// Teacher proposals for every scene of `dataset`.
pub fn generate_pseudo<F: Real>(
    teacher: &Model<F>,
    dataset: &Dataset,
    cfg: &PseudoConfig,
) -> Result<ProposalSet, ModelError> {
    let post = PostprocessConfig {
        nms: cfg.nms,
        top_k: teacher.config.queries,
        fusion: cfg.fusion,
    };
    predict_dataset(teacher, dataset, &post)
}

/// Pseudo instances for one image: proposals overlapping an annotation by more
/// than [`OVERLAP_DISCARD`] are dropped, as are empty masks; the `top_k`
/// highest-scoring survivors are kept.
pub fn select_pseudo(proposals: &[Proposal], annotations: &[Instance], top_k: usize) -> Vec<Instance> {
    let mut kept: Vec<&Proposal> = proposals
        .iter()
        .filter(|p| !p.mask.is_empty())
        .filter(|p| annotations.iter().all(|a| box_iou(p.bbox, a.bbox) <= OVERLAP_DISCARD))
        .collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.into_iter()
        .take(top_k)
        .map(|p| Instance {
            category: None,
            bbox: p.bbox,
            mask: p.mask.clone(),
            pseudo: true,
            score: Some(p.score),
        })
        .collect()
}

/// Appends selected pseudo instances to each scene's annotations.
pub fn filter_merge(proposals: &ProposalSet, dataset: &Dataset, cfg: &PseudoConfig) -> Dataset {
    let mut out = dataset.clone();
    for scene in &mut out.scenes {
        let Some((_, props)) = proposals.iter().find(|(id, _)| *id == scene.id) else { continue };
        let pseudo = select_pseudo(props, &scene.instances, cfg.top_k);
        scene.instances.extend(pseudo);
    }
    let prov = &mut out.header.provenance;
    prov.insert("pseudo.top_k".into(), cfg.top_k.to_string());
    prov.insert("pseudo.nms".into(), cfg.nms.to_string());
    prov.insert(
        "pseudo.fusion".into(),
        serde_json::to_value(cfg.fusion).expect("enum").as_str().unwrap_or_default().into(),
    );
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: f64,
    pub color_jitter: f64,
    /// Max relative change of brightness, contrast and saturation.
    pub jitter_strength: f64,
    pub grayscale: f64,
    pub blur: f64,
    pub blur_sigma: (f64, f64),
    pub cutout: f64,
    pub cutout_max_patches: usize,
    /// Largest patch as a fraction of the image area.
    pub cutout_max_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: 0.5,
            color_jitter: 0.8,
            jitter_strength: 0.4,
            grayscale: 0.2,
            blur: 0.5,
            blur_sigma: (0.1, 2.0),
            cutout: 0.5,
            cutout_max_patches: 3,
            cutout_max_area: 0.125,
        }
    }
}

/// Which transforms an augmentation call applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Applied {
    pub flipped: bool,
    pub jitter: Option<[f64; 3]>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    /// `(x, y, w, h)` in pixels.
    pub cutouts: Vec<(usize, usize, usize, usize)>,
}

pub fn flip_box(b: BBox) -> BBox {
    let [x0, y0, x1, y1] = b.xyxy();
    BBox::corners(1.0 - x1, y0, 1.0 - x0, y1)
}

pub fn flip_scene(scene: &Scene) -> Scene {
    let (h, w) = (scene.image.height, scene.image.width);
    let mut pixels = vec![0u8; scene.image.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let (src, dst) = ((y * w + x) * 3, (y * w + (w - 1 - x)) * 3);
            pixels[dst..dst + 3].copy_from_slice(&scene.image.pixels[src..src + 3]);
        }
    }
    Scene {
        image: RgbImage {
            height: h,
            width: w,
            pixels,
        },
        instances: scene
            .instances
            .iter()
            .map(|i| Instance {
                bbox: flip_box(i.bbox),
                mask: i.mask.flip_horizontal(),
                ..i.clone()
            })
            .collect(),
        ..scene.clone()
    }
}

fn luma(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let d = k as isize - r;
                        let (sx, sy) = if horizontal {
                            ((x + d).clamp(0, w as isize - 1), y)
                        } else {
                            (x, (y + d).clamp(0, h as isize - 1))
                        };
                        acc += kv * src[(sy as usize * w + sx as usize) * 3 + c];
                    }
                    out[(y as usize * w + x as usize) * 3 + c] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(img, true);
    img.copy_from_slice(&pass(&tmp, false));
}

/// Deterministic augmentation of `scene` for `seed`.
///
/// Weak: horizontal flip. Strong: flip, color jitter, grayscale, Gaussian blur
/// and cutout, each drawn with its configured probability. Only the flip moves
/// annotations.
pub fn augment(scene: &Scene, strength: Strength, seed: u64, cfg: &AugmentConfig) -> (Scene, Applied) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut applied = Applied::default();
    let mut out = if rng.random_bool(cfg.flip) {
        applied.flipped = true;
        flip_scene(scene)
    } else {
        scene.clone()
    };
    if strength == Strength::Weak {
        return (out, applied);
    }
    let (h, w) = (out.image.height, out.image.width);
    let mut img: Vec<f64> = out.image.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    if rng.random_bool(cfg.color_jitter) {
        let s = cfg.jitter_strength;
        let f = [0; 3].map(|_| rng.random_range(1.0 - s..=1.0 + s));
        let [brightness, contrast, saturation] = f;
        let mean_luma = img.chunks(3).map(luma).sum::<f64>() / (h * w) as f64;
        for px in img.chunks_mut(3) {
            for v in px.iter_mut() {
                *v *= brightness;
            }
            for v in px.iter_mut() {
                *v = (*v - mean_luma) * contrast + mean_luma;
            }
            let l = luma(px);
            for v in px.iter_mut() {
                *v = (*v - l) * saturation + l;
            }
        }
        applied.jitter = Some(f);
    }
    if rng.random_bool(cfg.grayscale) {
        for px in img.chunks_mut(3) {
            let l = luma(px);
            px.fill(l);
        }
        applied.grayscale = true;
    }
    if rng.random_bool(cfg.blur) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        gaussian_blur(&mut img, h, w, sigma);
        applied.blur_sigma = Some(sigma);
    }
    if rng.random_bool(cfg.cutout) {
        let n = rng.random_range(1..=cfg.cutout_max_patches.max(1));
        let max_area = cfg.cutout_max_area * (h * w) as f64;
        for _ in 0..n {
            let pw = rng.random_range(1..=w / 2);
            let max_h = ((max_area / pw as f64).floor() as usize).clamp(1, h / 2);
            let ph = rng.random_range(1..=max_h);
            let x0 = rng.random_range(0..=w - pw);
            let y0 = rng.random_range(0..=h - ph);
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    img[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(0.0);
                }
            }
            applied.cutouts.push((x0, y0, pw, ph));
        }
    }
    out.image.pixels = img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    (out, applied)
}
