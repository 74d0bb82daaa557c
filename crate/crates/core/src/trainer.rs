//! Training recipe, ablation variants, and the run-directory workflow.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assignment::{build_cost, hungarian, simota_select, AssignConfig, AssignError};
use crate::contrastive::{
    contrastive_loss, l2_normalize_rows, ContrastiveError, ContrastiveHeads, ObjectCenter, ObjectQueue,
};
use crate::evaluation::{
    build_images, evaluate, histogram_csv, score_histogram, EvalConfig, EvalError, EvalReport, SplitSelector,
};
use crate::geometry::{box_iou, mask_iou, BBox, Mask, SoftMask};
use crate::inference::{predict_dataset, write_proposals, FusionMode, PostprocessConfig, ProposalFileError};
use crate::losses::{box_losses, focal_loss, iou_head_loss, mask_losses, total_loss, LossReport, LossTerms, LossWeights};
use crate::model::{ForwardOptions, Mlp, Model, ModelConfig, ModelError};
use crate::pseudolabel::{augment, filter_merge, generate_pseudo, AugmentConfig, PseudoConfig, Strength};
use crate::shapeworld::{derive_seed, Dataset, DatasetError, Scene, SplitMode};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::optim::{clip_global_norm, AdamConfig, Bound, OptimizerState, ParamId};
use crate::tensor::{Tensor, TensorError};

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Classification only, as the closed-world detector.
    #[default]
    Baseline,
    /// IoU heads only: no classification cost or loss.
    IouOnly,
    /// Classification and IoU heads with the classification input detached.
    Stopgrad,
    /// `Stopgrad` plus the contrastive head and object queue.
    Sword,
    /// Baseline architecture trained on annotations plus `Sword` pseudo labels.
    SwordDagger,
}

/// Heads, losses, and graph options a variant switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveParts {
    pub class_loss: bool,
    pub iou_heads: bool,
    pub stop_grad: bool,
    pub contrastive: bool,
    pub pseudo_labels: bool,
}

impl Variant {
    pub fn parts(self) -> ActiveParts {
        let (class_loss, iou_heads, stop_grad, contrastive, pseudo_labels) = match self {
            Variant::Baseline => (true, false, false, false, false),
            Variant::IouOnly => (false, true, false, false, false),
            Variant::Stopgrad => (true, true, true, false, false),
            Variant::Sword => (true, true, true, true, false),
            Variant::SwordDagger => (true, false, false, false, true),
        };
        ActiveParts {
            class_loss,
            iou_heads,
            stop_grad,
            contrastive,
            pseudo_labels,
        }
    }

    /// Score fusion used at inference when the config does not pick one.
    pub fn default_fusion(self) -> FusionMode {
        let p = self.parts();
        match (p.class_loss, p.iou_heads) {
            (true, true) => FusionMode::Geometric,
            (false, _) => FusionMode::IouOnly,
            (true, false) => FusionMode::ClassOnly,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::IouOnly => "iou-only",
            Variant::Stopgrad => "stopgrad",
            Variant::Sword => "sword",
            Variant::SwordDagger => "sword-dagger",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMode {
    /// Strong for pseudo-label students, weak otherwise.
    #[default]
    Auto,
    None,
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub nms: f64,
    pub top_k: usize,
    /// Defaults to the variant's fusion.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionMode>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let p = PostprocessConfig::default();
        Self {
            nms: p.nms,
            top_k: p.top_k,
            fusion: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of `iterations` after which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub queue_capacity: usize,
    pub ema_alpha: f64,
    pub augment: AugmentMode,
    pub checkpoint_every: usize,
    /// Teacher checkpoint (file or run directory) for pseudo labels; trained on demand when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    pub adam: AdamConfig,
    pub assign: AssignConfig,
    pub losses: LossWeights,
    pub model: ModelConfig,
    pub augmentation: AugmentConfig,
    pub pseudo: PseudoConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::default(),
            iterations: 5000,
            batch_size: 4,
            seed: 0,
            lr_decay_at: 0.75,
            lr_decay_factor: 0.1,
            grad_clip: 0.1,
            queue_capacity: 4096,
            ema_alpha: 0.999,
            augment: AugmentMode::Auto,
            checkpoint_every: 500,
            teacher: None,
            adam: AdamConfig::default(),
            assign: AssignConfig::default(),
            losses: LossWeights::default(),
            model: ModelConfig::default(),
            augmentation: AugmentConfig::default(),
            pseudo: PseudoConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            TrainError::Config(msg) => TrainError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return bad("lr_decay_at must lie in [0, 1]".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr_decay_factor must be positive".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be finite and nonnegative".into());
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return bad("ema_alpha must lie in [0, 1)".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("adam.lr must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        self.assign.validate().or_else(|m| bad(format!("assign: {m}")))?;
        self.losses.validate().or_else(|m| bad(format!("losses: {m}")))?;
        self.model.validate().or_else(|m| bad(format!("model: {m}")))?;
        self.eval.validate().or_else(|m| bad(format!("eval: {m}")))?;
        if self.teacher.is_some() && self.variant != Variant::SwordDagger {
            return bad("teacher is only used by variant sword-dagger".into());
        }
        Ok(())
    }

    pub fn parts(&self) -> ActiveParts {
        self.variant.parts()
    }

    pub fn fusion(&self) -> FusionMode {
        self.inference.fusion.unwrap_or(self.variant.default_fusion())
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            nms: self.inference.nms,
            top_k: self.inference.top_k,
            fusion: self.fusion(),
        }
    }

    pub fn strength(&self) -> Option<Strength> {
        match self.augment {
            AugmentMode::None => None,
            AugmentMode::Weak => Some(Strength::Weak),
            AugmentMode::Strong => Some(Strength::Strong),
            AugmentMode::Auto if self.parts().pseudo_labels => Some(Strength::Strong),
            AugmentMode::Auto => Some(Strength::Weak),
        }
    }

    /// Matching cost: the classification cost is dropped with the classification loss.
    pub fn assignment(&self) -> AssignConfig {
        let mut a = self.assign;
        if !self.parts().class_loss {
            a.cls_weight = 0.0;
        }
        a
    }

    /// Loss weights with inactive terms zeroed.
    pub fn weights(&self) -> LossWeights {
        let p = self.parts();
        let mut w = self.losses;
        if !p.class_loss {
            w.cls = 0.0;
        }
        if !p.iou_heads {
            w.iou = 0.0;
        }
        if !p.contrastive {
            w.con = 0.0;
        }
        w
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let decay_from = (self.lr_decay_at * self.iterations as f64).round() as usize;
        if iteration >= decay_from && self.iterations > 0 {
            self.adam.lr * self.lr_decay_factor
        } else {
            self.adam.lr
        }
    }

    /// Eight hex digits identifying the config apart from its seed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_name(&self) -> String {
        format!("{}-{}-s{}", self.variant.name(), self.hash(), self.seed)
    }

    /// Config of the teacher a `sword-dagger` run trains when none is given.
    pub fn teacher_config(&self) -> TrainConfig {
        TrainConfig {
            variant: Variant::Sword,
            augment: AugmentMode::Auto,
            teacher: None,
            pseudo: PseudoConfig::default(),
            inference: InferenceConfig {
                fusion: None,
                ..self.inference
            },
            ..self.clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Proposals(#[from] ProposalFileError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing dataset file {0}")]
    MissingData(PathBuf),
    #[error("non-finite loss at iteration {iteration}: {}", dump_terms(.report))]
    NonFinite { iteration: usize, report: LossReport },
    #[error("run directory {dir} was created with a different setup:\n{diff}")]
    ManifestMismatch { dir: PathBuf, diff: String },
    #[error("{0}")]
    Resume(String),
}

impl TrainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

fn dump_terms(r: &LossReport) -> String {
    format!(
        "cls={} l1={} giou={} mask={} dice={} iou={} con={} total={}",
        r.cls, r.l1, r.giou, r.mask, r.dice, r.iou, r.con, r.total
    )
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub matched: usize,
    pub enqueued: usize,
    pub queue_len: usize,
    /// Gradient norm the weighted classification loss alone sends into non-head parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_grad_trunk: Option<f64>,
    /// Same, into the classification head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_grad_head: Option<f64>,
}

/// Model, optimizer, momentum head and queue of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub heads: ContrastiveHeads<f32>,
    momentum_head: Mlp,
    pub queue: ObjectQueue,
    pub optim: OptimizerState<f32>,
    /// Completed iterations.
    pub iteration: usize,
    trainable: Vec<ParamId>,
    trainable_names: HashSet<String>,
    /// Measure the classification loss's own gradient split every step.
    pub instrument: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model.clone(), derive_seed(config.seed, "init", 0)).map_err(TrainError::Config)?;
        let online = model.contrastive_head.param_ids();
        let heads = ContrastiveHeads::new(&model.params, online.clone(), config.ema_alpha);
        let momentum_head = model
            .contrastive_head
            .remap(&(0..online.len()).map(ParamId).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "queue", 0));
        let queue = ObjectQueue::random(config.queue_capacity, config.model.contrastive_dim, &mut rng);
        let p = config.parts();
        let inactive = |name: &str| {
            (!p.class_loss && name.starts_with("heads.class."))
                || (!p.iou_heads && (name.starts_with("heads.box_iou.") || name.starts_with("heads.mask_iou.")))
                || (!p.contrastive && name.starts_with("heads.contrastive."))
        };
        let trainable: Vec<ParamId> = model
            .params
            .iter()
            .filter(|(_, e)| !inactive(&e.name))
            .map(|(id, _)| id)
            .collect();
        let trainable_names = trainable.iter().map(|&id| model.params.entry(id).name.clone()).collect();
        Ok(Self {
            optim: OptimizerState::new(config.adam),
            config,
            model,
            heads,
            momentum_head,
            queue,
            iteration: 0,
            trainable,
            trainable_names,
            instrument: false,
        })
    }

    pub fn trainable_ids(&self) -> &[ParamId] {
        &self.trainable
    }

    /// The scenes of iteration `iteration`: sampled with replacement, then augmented.
    pub fn batch(&self, data: &Dataset, iteration: usize) -> Vec<Scene> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batch", iteration));
        let strength = cfg.strength();
        (0..cfg.batch_size)
            .map(|k| {
                let scene = &data.scenes[rng.random_range(0..data.scenes.len())];
                match strength {
                    None => scene.clone(),
                    Some(s) => {
                        let seed = derive_seed(cfg.seed, "augment", iteration * cfg.batch_size + k);
                        augment(scene, s, seed, &cfg.augmentation).0
                    }
                }
            })
            .collect()
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &[Scene]) -> Result<StepReport, TrainError> {
        let cfg = &self.config;
        let parts = cfg.parts();
        let assign = cfg.assignment();
        let weights = cfg.weights();
        let names = &self.trainable_names;
        let p = self.model.params.bind_where(|n| names.contains(n));
        let center = if parts.contrastive {
            Some(self.queue.object_center()?)
        } else {
            None
        };
        let opts = ForwardOptions {
            stop_grad: parts.stop_grad,
            all_layers: true,
        };
        let mut sum = LossTerms::zeros();
        let mut to_enqueue: Vec<Vec<f32>> = Vec::new();
        let mut matched = 0;
        for scene in batch {
            let (terms, queued, n) = self.scene_terms(&p, scene, opts, &assign, center.as_ref())?;
            sum = sum.add(&terms)?;
            to_enqueue.extend(queued);
            matched += n;
        }
        let terms = sum.scale(1.0 / batch.len().max(1) as f64);
        let (total, loss) = total_loss(&terms, &weights)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
                report: loss,
            });
        }

        let (mut cls_grad_trunk, mut cls_grad_head) = (None, None);
        if self.instrument {
            let cls = terms.cls.scale(weights.cls as f32);
            if cls.requires_grad() {
                cls.backward()?;
            }
            cls_grad_trunk = Some(grad_norm(&p, &self.model.trunk_ids()));
            cls_grad_head = Some(grad_norm(&p, &self.model.class_head_ids()));
            p.zero_grads();
        }
        if total.requires_grad() {
            total.backward()?;
        }
        p.fill_missing_grads();
        let mut grads = p.grads(&self.model.params, &self.trainable)?;
        drop(p);
        let norm = if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, cfg.grad_clip)
        } else {
            clip_global_norm(&mut grads, f64::INFINITY)
        };
        let lr = cfg.learning_rate(self.iteration);
        self.optim.config.lr = lr;
        self.optim.apply(&mut self.model.params, &self.trainable, &grads);

        let mut enqueued = 0;
        if parts.contrastive {
            self.heads.ema_update(&self.model.params);
            if !to_enqueue.is_empty() {
                let dim = self.config.model.hidden_dim;
                let n = to_enqueue.len();
                let flat: Vec<f32> = to_enqueue.into_iter().flatten().collect();
                let embed = Tensor::new(&[n, dim], flat)?;
                let mp = self.heads.momentum.bind(false);
                let out = self.momentum_head.apply(&mp, &embed)?;
                let rows: Vec<Vec<f32>> = out.values().chunks(self.config.model.contrastive_dim).map(<[f32]>::to_vec).collect();
                self.queue.enqueue(&rows)?;
                enqueued = n;
            }
        }
        let report = StepReport {
            iteration: self.iteration,
            lr,
            loss,
            grad_norm: norm,
            matched,
            enqueued,
            queue_len: self.queue.len(),
            cls_grad_trunk,
            cls_grad_head,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Loss terms of one scene summed over decoder layers, the final-layer
    /// decoder embeddings of matched queries, and the number of matches.
    fn scene_terms(
        &self,
        p: &Bound<f32>,
        scene: &Scene,
        opts: ForwardOptions,
        assign: &AssignConfig,
        center: Option<&ObjectCenter>,
    ) -> Result<(LossTerms<f32>, Vec<Vec<f32>>, usize), TrainError> {
        let model = &self.model;
        let parts = self.config.parts();
        let out = model.forward(p, &scene.image.to_unit_f32(), opts)?;
        let gt_boxes: Vec<BBox> = scene.instances.iter().map(|i| i.bbox).collect();
        let gt_masks: Vec<&Mask> = scene.instances.iter().map(|i| &i.mask).collect();
        let queries = model.config.queries;
        let size = model.config.image_size;
        let mut terms = LossTerms::zeros();
        let mut queued = Vec::new();
        let mut matched = 0;
        let last = out.layers.len() - 1;
        for (li, layer) in out.layers.iter().enumerate() {
            let pred_boxes = layer.pred_boxes();
            let costs = if gt_boxes.is_empty() {
                None
            } else {
                Some(build_cost(&layer.class_logit_values(), &pred_boxes, &gt_boxes, assign)?)
            };
            let pairs = costs.as_ref().map(|c| hungarian(c).pairs).unwrap_or_default();
            let mut targets = vec![false; queries];
            pairs.iter().for_each(|&(q, _)| targets[q] = true);
            let mut t = LossTerms::zeros();
            if parts.class_loss {
                t.cls = focal_loss(&layer.class_logits, &targets)?;
            }
            if !pairs.is_empty() {
                let qs: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
                let boxes: Vec<BBox> = pairs.iter().map(|&(_, g)| gt_boxes[g]).collect();
                let masks: Vec<Mask> = pairs.iter().map(|&(_, g)| gt_masks[g].clone()).collect();
                (t.l1, t.giou) = box_losses(&layer.boxes.index_rows(&qs)?, &boxes)?;
                let soft = model.masks(&out, layer, &qs)?;
                (t.mask, t.dice) = mask_losses(&soft, &masks)?;
                if parts.iou_heads {
                    let box_targets: Vec<f64> = pairs.iter().map(|&(q, g)| box_iou(pred_boxes[q], gt_boxes[g])).collect();
                    let mask_targets = soft
                        .values()
                        .chunks(size * size)
                        .zip(&masks)
                        .map(|(v, gt)| {
                            let hard = SoftMask::new(size, size, v.to_vec()).expect("mask size").threshold();
                            mask_iou(&hard, gt).expect("mask size")
                        })
                        .collect::<Vec<_>>();
                    let bi = iou_head_loss(&layer.box_iou_logits.index_rows(&qs)?, &box_targets)?;
                    let mi = iou_head_loss(&layer.mask_iou_logits.index_rows(&qs)?, &mask_targets)?;
                    t.iou = bi.add(&mi)?;
                }
            }
            if li == last {
                matched = pairs.len();
                if let (Some(center), Some(costs)) = (center, costs.as_ref()) {
                    let g = gt_boxes.len();
                    let ious: Vec<f64> = pred_boxes
                        .iter()
                        .flat_map(|pb| gt_boxes.iter().map(move |gb| box_iou(*pb, *gb)))
                        .collect();
                    let selection = simota_select(costs, &ious, assign)?;
                    let emb = l2_normalize_rows(&model.contrastive(p, &layer.embed)?)?;
                    let mut con = Tensor::scalar(0.0f32);
                    let mut counted = 0usize;
                    for s in selection.per_gt.iter().take(g) {
                        let pos = (!s.positives.is_empty()).then(|| emb.index_rows(&s.positives)).transpose()?;
                        let neg = (!s.negatives.is_empty()).then(|| emb.index_rows(&s.negatives)).transpose()?;
                        if let Some(l) = contrastive_loss(center, pos.as_ref(), neg.as_ref())? {
                            con = con.add(&l)?;
                            counted += 1;
                        }
                    }
                    if counted > 0 {
                        t.con = con.scale(1.0 / counted as f32);
                    }
                    let d = model.config.hidden_dim;
                    let e = layer.embed.values();
                    queued.extend(pairs.iter().map(|&(q, _)| e[q * d..(q + 1) * d].to_vec()));
                }
            }
            terms = terms.add(&t)?;
        }
        Ok((terms, queued, matched))
    }

    /// Full training state as one checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        for (_, e) in self.heads.momentum.iter() {
            ck.insert(e.name.clone(), &e.shape, e.value.to_vec());
        }
        let dim = self.queue.dim();
        ck.insert("queue.embeddings", &[self.queue.len(), dim], self.queue.to_rows());
        for (id, e) in self.model.params.iter() {
            if let (Some(m), Some(v)) = (self.optim.m.get(&id), self.optim.v.get(&id)) {
                ck.insert(format!("optim.m.{}", e.name), &e.shape, m.clone());
                ck.insert(format!("optim.v.{}", e.name), &e.shape, v.clone());
            }
        }
        ck.insert("optim.step", &[1], vec![self.optim.step as f32]);
        ck.insert("train.iteration", &[1], vec![self.iteration as f32]);
        ck
    }

    /// Restores a state written by [`to_checkpoint`](Self::to_checkpoint).
    pub fn from_checkpoint(config: TrainConfig, ck: &Checkpoint) -> Result<Self, TrainError> {
        let mut t = Self::new(config)?;
        t.model.load_params(ck)?;
        let ids: Vec<ParamId> = t.heads.momentum.ids().collect();
        for id in ids {
            let name = t.heads.momentum.entry(id).name.clone();
            let rec = ck.require(&name)?;
            if rec.shape != t.heads.momentum.entry(id).shape {
                return Err(TrainError::Resume(format!("record `{name}` has the wrong shape")));
            }
            t.heads.momentum.set_values(id, rec.values.clone());
        }
        let q = ck.require("queue.embeddings")?;
        t.queue = ObjectQueue::from_rows(t.config.queue_capacity, t.config.model.contrastive_dim, &q.values)?;
        for (id, e) in t.model.params.iter() {
            if let (Some(m), Some(v)) = (ck.get(&format!("optim.m.{}", e.name)), ck.get(&format!("optim.v.{}", e.name))) {
                t.optim.m.insert(id, m.values.clone());
                t.optim.v.insert(id, v.values.clone());
            }
        }
        t.optim.step = ck.require("optim.step")?.values[0] as u64;
        t.iteration = ck.require("train.iteration")?.values[0] as usize;
        Ok(t)
    }
}

fn grad_norm(p: &Bound<f32>, ids: &[ParamId]) -> f64 {
    ids.iter()
        .filter_map(|&id| p.get(id).grad())
        .flat_map(|g| g.into_iter())
        .map(|v| (v as f64) * (v as f64))
        .fold(0.0, |a, v| a + v)
        .sqrt()
}

/// Where [`run_experiment`] puts its run directory.
#[derive(Debug, Clone)]
pub enum RunLocation {
    /// `root/{variant}-{hash}-s{seed}`.
    Under(PathBuf),
    Exactly(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub active: ActiveParts,
    pub fusion: FusionMode,
    pub augment: Option<Strength>,
    /// Digest of the training annotation file.
    pub train_data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    pub iterations: usize,
    pub completed_iterations: usize,
}

pub const MANIFEST_FORMAT: &str = "openseg-run-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub completed_iterations: usize,
    pub novel: EvalReport,
    pub all: EvalReport,
}

/// Options that change how a run reports progress, never its results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Print a progress line to stderr every this many iterations (0: silent).
    pub progress_every: usize,
    /// Record the classification loss's gradient split in the log.
    pub instrument: bool,
}

fn file_digest(path: &Path) -> Result<String, TrainError> {
    let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
    let d = Sha256::digest(&bytes);
    Ok(d[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn write_text(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(|e| TrainError::io(path, e))
}

fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Keys whose values differ between two configs, one line each.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> String {
    let flat = |c: &TrainConfig| {
        let mut m = BTreeMap::new();
        flatten_toml("", &toml::Value::try_from(c).expect("config serializes"), &mut m);
        m
    };
    let (fa, fb) = (flat(a), flat(b));
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    let missing = "<unset>".to_string();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| {
            format!(
                "  {k}: {} -> {}",
                fa.get(k).unwrap_or(&missing),
                fb.get(k).unwrap_or(&missing)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Evaluates `model` on `data_dir/eval-all.jsonl` for the novel and all splits,
/// writing proposals, metrics and histograms into `dir`.
pub fn evaluate_run(
    model: &Model<f32>,
    cfg: &TrainConfig,
    data_dir: &Path,
    dir: &Path,
) -> Result<(EvalReport, EvalReport), TrainError> {
    let data = Dataset::load(&data_dir.join(SplitMode::EvalAll.file_name()))?;
    let proposals = predict_dataset(model, &data, &cfg.postprocess())?;
    write_proposals(&dir.join("proposals.jsonl"), &proposals)?;
    let mut reports = Vec::new();
    for split in [SplitSelector::Novel, SplitSelector::All] {
        let ecfg = EvalConfig {
            split,
            ..cfg.eval.clone()
        };
        let images = build_images(&data, &proposals, &ecfg)?;
        let report = evaluate(&images, &ecfg);
        let name = split_name(split);
        write_text(&dir.join(format!("metrics-{name}.txt")), &report.to_text())?;
        write_text(
            &dir.join(format!("metrics-{name}.json")),
            &serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
        write_text(
            &dir.join(format!("histogram-{name}.csv")),
            &histogram_csv(&score_histogram(&images, &ecfg)),
        )?;
        reports.push(report);
    }
    let all = reports.pop().expect("two reports");
    let novel = reports.pop().expect("two reports");
    Ok((novel, all))
}

pub fn split_name(s: SplitSelector) -> &'static str {
    match s {
        SplitSelector::Novel => "novel",
        SplitSelector::All => "all",
        SplitSelector::Base => "base",
    }
}

/// Loads a checkpoint from a file, or `checkpoint.bin` inside a run directory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let file = if path.is_dir() { path.join("checkpoint.bin") } else { path.to_path_buf() };
    Ok(Checkpoint::load(&file)?)
}

/// Trains (or resumes) one configuration and evaluates the result.
///
/// `sword-dagger` first obtains a teacher (trained on demand under the same
/// root), merges its pseudo labels into the training set, and trains the
/// baseline-architecture student on the result.
pub fn run_experiment(
    cfg: &TrainConfig,
    data_dir: &Path,
    location: &RunLocation,
    opts: RunOptions,
) -> Result<RunOutcome, TrainError> {
    cfg.validate()?;
    let train_path = data_dir.join(SplitMode::TrainBase.file_name());
    for f in [SplitMode::TrainBase, SplitMode::EvalAll] {
        let path = data_dir.join(f.file_name());
        if !path.is_file() {
            return Err(TrainError::MissingData(path));
        }
    }
    let (root, run_dir) = match location {
        RunLocation::Under(root) => (root.clone(), root.join(cfg.run_name())),
        RunLocation::Exactly(dir) => (dir.parent().map(Path::to_path_buf).unwrap_or_default(), dir.clone()),
    };
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        variant: cfg.variant,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        model: cfg.model.clone(),
        active: cfg.parts(),
        fusion: cfg.fusion(),
        augment: cfg.strength(),
        train_data: file_digest(&train_path)?,
        teacher: cfg.teacher.clone(),
        iterations: cfg.iterations,
        completed_iterations: 0,
    };
    let manifest_path = run_dir.join("manifest.json");
    let ck_path = run_dir.join("checkpoint.bin");
    let log_path = run_dir.join("train_log.jsonl");
    let mut resume_from = None;
    if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| TrainError::io(&manifest_path, e))?;
        let old: Manifest = serde_json::from_str(&text)
            .map_err(|e| TrainError::Resume(format!("{}: {e}", manifest_path.display())))?;
        let old_cfg = TrainConfig::load(&run_dir.join("config.toml"))?;
        let mut diff = config_diff(&old_cfg, cfg);
        if old.train_data != manifest.train_data {
            diff.push_str(&format!("\n  train_data: {} -> {}", old.train_data, manifest.train_data));
        }
        if old.format != manifest.format {
            diff.push_str(&format!("\n  format: {} -> {}", old.format, manifest.format));
        }
        if !diff.trim().is_empty() {
            return Err(TrainError::ManifestMismatch {
                dir: run_dir,
                diff: diff.trim_start_matches('\n').to_string(),
            });
        }
        if old.completed_iterations > 0 && ck_path.is_file() {
            resume_from = Some(old.completed_iterations);
        }
    }
    fs::create_dir_all(&run_dir).map_err(|e| TrainError::io(&run_dir, e))?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml())?;

    if resume_from == Some(cfg.iterations) {
        let done = |n: &str| run_dir.join(format!("metrics-{n}.json"));
        if done("novel").is_file() && done("all").is_file() {
            let read = |n: &str| -> Result<EvalReport, TrainError> {
                let p = done(n);
                let t = fs::read_to_string(&p).map_err(|e| TrainError::io(&p, e))?;
                serde_json::from_str(&t).map_err(|e| TrainError::Resume(format!("{}: {e}", p.display())))
            };
            let (novel, all) = (read("novel")?, read("all")?);
            return Ok(RunOutcome {
                run_dir,
                completed_iterations: cfg.iterations,
                novel,
                all,
            });
        }
    }

    let train = if cfg.parts().pseudo_labels {
        let teacher_ck = match &cfg.teacher {
            Some(path) => load_checkpoint(path)?,
            None => {
                let tcfg = cfg.teacher_config();
                let t = run_experiment(&tcfg, data_dir, &RunLocation::Under(root.clone()), opts)?;
                load_checkpoint(&t.run_dir)?
            }
        };
        let teacher: Model<f32> = Model::from_checkpoint(cfg.model.clone(), &teacher_ck)?;
        let base = Dataset::load(&train_path)?;
        let pseudo = generate_pseudo(&teacher, &base, &cfg.pseudo)?;
        let merged = filter_merge(&pseudo, &base, &cfg.pseudo);
        merged.save(&run_dir, "train-pseudo.jsonl")?;
        merged
    } else {
        Dataset::load(&train_path)?
    };
    if train.scenes.is_empty() && cfg.iterations > 0 {
        return Err(TrainError::Config("training set has no scenes".into()));
    }

    let mut trainer = match resume_from {
        Some(_) => Trainer::from_checkpoint(cfg.clone(), &Checkpoint::load(&ck_path)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    trainer.instrument = opts.instrument;
    truncate_log(&log_path, trainer.iteration)?;
    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| TrainError::io(&log_path, e))?,
    );
    let save = |trainer: &Trainer, manifest: &mut Manifest| -> Result<(), TrainError> {
        trainer.to_checkpoint().save(&ck_path)?;
        manifest.completed_iterations = trainer.iteration;
        write_text(
            &manifest_path,
            &serde_json::to_string_pretty(manifest).expect("manifest serializes"),
        )
    };
    if resume_from.is_none() {
        save(&trainer, &mut manifest)?;
    }
    while trainer.iteration < cfg.iterations {
        let batch = trainer.batch(&train, trainer.iteration);
        let report = trainer.train_step(&batch)?;
        serde_json::to_writer(&mut log, &report).map_err(|e| TrainError::io(&log_path, e.into()))?;
        log.write_all(b"\n").map_err(|e| TrainError::io(&log_path, e))?;
        if opts.progress_every > 0 && trainer.iteration % opts.progress_every == 0 {
            eprintln!(
                "[{}] iter {}/{} loss {:.4}",
                cfg.run_name(),
                trainer.iteration,
                cfg.iterations,
                report.loss.total
            );
        }
        if trainer.iteration % cfg.checkpoint_every == 0 || trainer.iteration == cfg.iterations {
            log.flush().map_err(|e| TrainError::io(&log_path, e))?;
            save(&trainer, &mut manifest)?;
        }
    }
    log.flush().map_err(|e| TrainError::io(&log_path, e))?;
    drop(log);
    save(&trainer, &mut manifest)?;
    let (novel, all) = evaluate_run(&trainer.model, cfg, data_dir, &run_dir)?;
    Ok(RunOutcome {
        run_dir,
        completed_iterations: trainer.iteration,
        novel,
        all,
    })
}

/// Keeps the first `lines` records of a log, dropping any written after the last checkpoint.
fn truncate_log(path: &Path, lines: usize) -> Result<(), TrainError> {
    if !path.is_file() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| TrainError::io(path, e))?;
    let kept: Vec<String> = BufReader::new(file)
        .lines()
        .take(lines)
        .collect::<Result<_, _>>()
        .map_err(|e| TrainError::io(path, e))?;
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_text(path, &text)
}

/// Parses a training log.
pub fn read_log(path: &Path) -> Result<Vec<StepReport>, TrainError> {
    let file = File::open(path).map_err(|e| TrainError::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let l = l.map_err(|e| TrainError::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| TrainError::Resume(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
