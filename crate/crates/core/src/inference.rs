//! Score fusion, NMS and top-k selection of final proposals.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nms_indices, BBox, Mask, SoftMask};
use crate::model::{ForwardOptions, Model, ModelError, QueryOutput};
use crate::shapeworld::Dataset;
use crate::rle::{self, Rle};
use crate::tensor::ops::sigmoid;
use crate::tensor::Real;

/// How the three per-query scores combine into one proposal score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `(c_c·c_b·c_m)^(1/3)`
    #[default]
    Geometric,
    /// `(c_b·c_m)^(1/2)`
    IouOnly,
    /// `c_c`
    ClassOnly,
}

/// Geometric mean of the class, box-IoU and mask-IoU scores.
pub fn fuse_scores(c_c: f64, c_b: f64, c_m: f64) -> f64 {
    (c_c * c_b * c_m).cbrt()
}

pub fn fuse(mode: FusionMode, c_c: f64, c_b: f64, c_m: f64) -> f64 {
    match mode {
        FusionMode::Geometric => fuse_scores(c_c, c_b, c_m),
        FusionMode::IouOnly => (c_b * c_m).sqrt(),
        FusionMode::ClassOnly => c_c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub nms: f64,
    pub top_k: usize,
    pub fusion: FusionMode,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            nms: 0.7,
            top_k: 100,
            fusion: FusionMode::Geometric,
        }
    }
}

/// A query that survived post-processing, before its mask is rendered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected {
    pub query: usize,
    pub score: f64,
    pub class_score: f64,
    pub box_iou: f64,
    pub mask_iou: f64,
    pub bbox: BBox,
}

fn clip_unit(b: BBox) -> BBox {
    let [x0, y0, x1, y1] = b.xyxy().map(|v| v.clamp(0.0, 1.0));
    BBox::corners(x0, y0, x1, y1)
}

/// Fuse, suppress at `cfg.nms`, and keep the `cfg.top_k` best in descending score order.
pub fn postprocess(queries: &[QueryOutput], cfg: &PostprocessConfig) -> Vec<Selected> {
    let cands: Vec<Selected> = queries
        .iter()
        .enumerate()
        .map(|(q, o)| {
            let (cc, cb, cm) = (sigmoid(o.class_logit), sigmoid(o.box_iou_logit), sigmoid(o.mask_iou_logit));
            Selected {
                query: q,
                score: fuse(cfg.fusion, cc, cb, cm),
                class_score: cc,
                box_iou: cb,
                mask_iou: cm,
                bbox: clip_unit(o.bbox),
            }
        })
        .collect();
    let boxes: Vec<BBox> = cands.iter().map(|c| c.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
    nms_indices(&boxes, &scores, cfg.nms)
        .into_iter()
        .take(cfg.top_k)
        .map(|i| cands[i])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub score: f64,
    pub class_score: f64,
    pub box_iou: f64,
    pub mask_iou: f64,
    pub bbox: BBox,
    pub mask: Mask,
}

/// Runs the model on one image and renders masks for the surviving queries.
pub fn predict<F: Real>(
    model: &Model<F>,
    image: &[f32],
    cfg: &PostprocessConfig,
) -> Result<Vec<Proposal>, ModelError> {
    let p = model.params.bind(false);
    let out = model.forward(&p, image, ForwardOptions::default())?;
    let layer = out.last();
    let selected = postprocess(&Model::<F>::query_outputs(layer), cfg);
    let ids: Vec<usize> = selected.iter().map(|s| s.query).collect();
    let masks = model.masks(&out, layer, &ids)?;
    let n = model.config.image_size;
    Ok(selected
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let soft: Vec<f32> = masks.values()[k * n * n..(k + 1) * n * n].iter().map(|v| v.f64() as f32).collect();
            Proposal {
                score: s.score,
                class_score: s.class_score,
                box_iou: s.box_iou,
                mask_iou: s.mask_iou,
                bbox: s.bbox,
                mask: SoftMask::new(n, n, soft).expect("mask size").threshold(),
            }
        })
        .collect())
}

/// Proposals for every scene of `dataset`, keyed by scene id.
pub fn predict_dataset<F: Real>(
    model: &Model<F>,
    dataset: &Dataset,
    cfg: &PostprocessConfig,
) -> Result<ProposalSet, ModelError> {
    dataset
        .scenes
        .iter()
        .map(|s| Ok((s.id.clone(), predict(model, &s.image.to_unit_f32(), cfg)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScores {
    pub class: f64,
    pub box_iou: f64,
    pub mask_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalRecord {
    image_id: String,
    score: f64,
    raw_scores: RawScores,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    mask: Rle,
}

/// Proposals per image, in file order.
pub type ProposalSet = Vec<(String, Vec<Proposal>)>;

#[derive(Debug, Error)]
pub enum ProposalFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

pub fn write_proposals(path: &Path, set: &ProposalSet) -> Result<(), ProposalFileError> {
    let io = |source| ProposalFileError::Io {
        path: path.into(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for (image_id, props) in set {
        for p in props {
            let rec = ProposalRecord {
                image_id: image_id.clone(),
                score: p.score,
                raw_scores: RawScores {
                    class: p.class_score,
                    box_iou: p.box_iou,
                    mask_iou: p.mask_iou,
                },
                bbox: p.bbox.xyxy(),
                mask: rle::encode(&p.mask),
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads proposals grouped by image id in order of first appearance.
pub fn read_proposals(path: &Path) -> Result<ProposalSet, ProposalFileError> {
    let io = |source| ProposalFileError::Io {
        path: path.into(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut set: ProposalSet = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| ProposalFileError::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let rec: ProposalRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let mask = rle::decode(&rec.mask).map_err(|e| parse(format!("mask: {e}")))?;
        let [x0, y0, x1, y1] = rec.bbox;
        if !(x0 <= x1 && y0 <= y1) {
            return Err(parse("box corners out of order".into()));
        }
        let p = Proposal {
            score: rec.score,
            class_score: rec.raw_scores.class,
            box_iou: rec.raw_scores.box_iou,
            mask_iou: rec.raw_scores.mask_iou,
            bbox: BBox::corners(x0, y0, x1, y1),
            mask,
        };
        match set.last_mut() {
            Some((id, v)) if *id == rec.image_id => v.push(p),
            _ => match set.iter_mut().find(|(id, _)| *id == rec.image_id) {
                Some((_, v)) => v.push(p),
                None => set.push((rec.image_id, vec![p])),
            },
        }
    }
    Ok(set)
}
