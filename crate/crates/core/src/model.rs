//! Query-based segmentation network: a small convolutional backbone, a dense
//! attention encoder/decoder, and per-query heads.
//!
//! Feature maps are channel-last and flattened to `[positions, channels]`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::optim::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Backbone output channels.
    pub feature_channels: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    /// Width of the attention projections (split across heads).
    pub attn_dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub mask_dim: usize,
    pub contrastive_dim: usize,
    pub iou_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            feature_channels: 64,
            hidden_dim: 128,
            heads: 4,
            attn_dim: 64,
            ffn_dim: 128,
            encoder_layers: 1,
            decoder_layers: 3,
            queries: 50,
            mask_dim: 8,
            contrastive_dim: 32,
            iou_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("feature_channels", self.feature_channels),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("attn_dim", self.attn_dim),
            ("ffn_dim", self.ffn_dim),
            ("decoder_layers", self.decoder_layers),
            ("queries", self.queries),
            ("mask_dim", self.mask_dim),
            ("contrastive_dim", self.contrastive_dim),
            ("iou_hidden", self.iou_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("model.{k} must be positive"));
        }
        if !self.image_size.is_multiple_of(4) {
            return Err(format!("model.image_size must be divisible by 4, got {}", self.image_size));
        }
        if !self.attn_dim.is_multiple_of(self.heads) {
            return Err("model.attn_dim must be divisible by model.heads".into());
        }
        if !self.hidden_dim.is_multiple_of(4) {
            return Err("model.hidden_dim must be divisible by 4 (positional encoding)".into());
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    /// Dynamic-convolution parameters per query: `(mask_dim + 2) → mask_dim → 1`.
    pub fn kernel_params(&self) -> usize {
        let m = self.mask_dim;
        (m + 2) * m + m + m + 1
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image has {got} values, expected {want} ({size}x{size}x{channels})")]
    Channels {
        got: usize,
        want: usize,
        size: usize,
        channels: usize,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint record `{name}` has shape {got:?}, model expects {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply<F: Real>(&self, p: &Bound<F>, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    fn apply<F: Real>(&self, p: &Bound<F>, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        x.layer_norm(LN_EPS).mul(p.get(self.g))?.add(p.get(self.b))
    }
}

/// Linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn apply<F: Real>(&self, p: &Bound<F>, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(p, &h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Same architecture addressing `ids` in order, e.g. a momentum copy.
    pub fn remap(&self, ids: &[ParamId]) -> Mlp {
        assert_eq!(ids.len(), 2 * self.layers.len());
        Mlp {
            layers: ids.chunks(2).map(|c| Linear { w: c[0], b: c[1] }).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
    norm3: Norm,
}

struct Init<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Real> Init<'_, F> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let v = (0..n).map(|_| F::of(self.rng.random_range(-bound..=bound))).collect();
        self.store.add(name, shape, v)
    }

    fn constant(&mut self, name: String, shape: &[usize], c: f64) -> ParamId {
        let n = shape.iter().product();
        self.store.add(name, shape, vec![F::of(c); n])
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: self.uniform(format!("{name}.w"), &[fan_in, fan_out], bound),
            b: self.constant(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    /// He-uniform, for layers followed by ReLU.
    fn linear_relu(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / fan_in as f64).sqrt();
        Linear {
            w: self.uniform(format!("{name}.w"), &[fan_in, fan_out], bound),
            b: self.constant(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    fn mlp(&mut self, name: &str, dims: &[usize]) -> Mlp {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let n = format!("{name}.layer{i}");
                if i + 2 < dims.len() {
                    self.linear_relu(&n, d[0], d[1])
                } else {
                    self.linear(&n, d[0], d[1])
                }
            })
            .collect();
        Mlp { layers }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.constant(format!("{name}.g"), &[d], 1.0),
            b: self.constant(format!("{name}.b"), &[d], 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize, inner: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, inner),
            k: self.linear(&format!("{name}.k"), d, inner),
            v: self.linear(&format!("{name}.v"), d, inner),
            o: self.linear(&format!("{name}.o"), inner, d),
        }
    }
}

/// Per-layer head outputs for one image; row `q` belongs to query `q`.
#[derive(Debug, Clone)]
pub struct LayerOutput<F: Real> {
    /// `[Q, D]` decoder embeddings.
    pub embed: Tensor<F>,
    /// `[Q, 1]` foreground logits.
    pub class_logits: Tensor<F>,
    /// `[Q, 4]` center-form boxes in `(0, 1)`.
    pub boxes: Tensor<F>,
    pub box_iou_logits: Tensor<F>,
    pub mask_iou_logits: Tensor<F>,
    /// `[Q, kernel_params]` dynamic-convolution parameters.
    pub kernels: Tensor<F>,
}

impl<F: Real> LayerOutput<F> {
    pub fn pred_boxes(&self) -> Vec<BBox> {
        self.boxes
            .values()
            .chunks(4)
            .map(|c| BBox::center(c[0].f64(), c[1].f64(), c[2].f64(), c[3].f64()))
            .collect()
    }

    pub fn class_logit_values(&self) -> Vec<f64> {
        self.class_logits.to_f64_vec()
    }
}

#[derive(Debug, Clone)]
pub struct ImageOutput<F: Real> {
    /// `[S, feature_channels]` backbone features, `S = (size/4)²`.
    pub features: Tensor<F>,
    /// `[S, mask_dim]` per-position mask features.
    pub mask_features: Tensor<F>,
    /// One entry per decoder layer (or just the final one), first to last.
    pub layers: Vec<LayerOutput<F>>,
}

impl<F: Real> ImageOutput<F> {
    pub fn last(&self) -> &LayerOutput<F> {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// Plain per-query values of the final layer, as consumed by post-processing.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub class_logit: f64,
    pub bbox: BBox,
    pub box_iou_logit: f64,
    pub mask_iou_logit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Detach the class head input from the decoder.
    pub stop_grad: bool,
    /// Evaluate heads on every decoder layer rather than only the last.
    pub all_layers: bool,
}

#[derive(Debug, Clone)]
pub struct Model<F: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    conv1: Linear,
    conv2: Linear,
    conv3: Linear,
    input_proj: Linear,
    mask_proj: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    query_embed: ParamId,
    class_head: Linear,
    box_head: Mlp,
    box_iou_head: Mlp,
    mask_iou_head: Mlp,
    kernel_head: Linear,
    pub contrastive_head: Mlp,
    pos: Tensor<F>,
    rel_grid: Vec<[f64; 2]>,
    upsample: Tensor<F>,
}

/// Fixed 2D sinusoidal encoding `[s·s, d]`: first half encodes y, second half x.
pub fn positional_encoding(s: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; s * s * d];
    for y in 0..s {
        for x in 0..s {
            let row = &mut out[(y * s + x) * d..(y * s + x + 1) * d];
            for (offset, coord) in [(0, y), (half, x)] {
                let pos = (coord as f64 + 0.5) / s as f64 * 2.0 * PI;
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-(2.0 * i as f64) / half as f64) * s as f64 / (2.0 * PI);
                    row[offset + 2 * i] = (pos * freq).sin();
                    row[offset + 2 * i + 1] = (pos * freq).cos();
                }
            }
        }
    }
    out
}

/// Bilinear interpolation matrix `[n·factor, n]` (half-pixel centers, edge clamped).
pub fn bilinear_matrix(n: usize, factor: usize) -> Vec<f64> {
    let m = n * factor;
    let mut u = vec![0.0; m * n];
    for i in 0..m {
        let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let t = src - i0 as f64;
        u[i * n + i0] += 1.0 - t;
        u[i * n + i1] += t;
    }
    u
}

impl<F: Real> Model<F> {
    /// Freshly initialized model; `seed` drives every random initializer.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, String> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = c.hidden_dim;
        let conv1 = init.linear_relu("backbone.conv1", 9 * c.in_channels, 32);
        let conv2 = init.linear_relu("backbone.conv2", 9 * 32, c.feature_channels);
        let conv3 = init.linear_relu("backbone.conv3", c.feature_channels, c.feature_channels);
        let input_proj = init.linear("input_proj", c.feature_channels, d);
        let mask_proj = init.linear("mask_proj", d, c.mask_dim);
        let encoder = (0..c.encoder_layers)
            .map(|i| {
                let n = format!("encoder.layer{i}");
                EncoderLayer {
                    attn: init.attention(&format!("{n}.attn"), d, c.attn_dim),
                    norm1: init.norm(&format!("{n}.norm1"), d),
                    ff1: init.linear_relu(&format!("{n}.ff1"), d, c.ffn_dim),
                    ff2: init.linear(&format!("{n}.ff2"), c.ffn_dim, d),
                    norm2: init.norm(&format!("{n}.norm2"), d),
                }
            })
            .collect();
        let decoder = (0..c.decoder_layers)
            .map(|i| {
                let n = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: init.attention(&format!("{n}.self_attn"), d, c.attn_dim),
                    norm1: init.norm(&format!("{n}.norm1"), d),
                    cross_attn: init.attention(&format!("{n}.cross_attn"), d, c.attn_dim),
                    norm2: init.norm(&format!("{n}.norm2"), d),
                    ff1: init.linear_relu(&format!("{n}.ff1"), d, c.ffn_dim),
                    ff2: init.linear(&format!("{n}.ff2"), c.ffn_dim, d),
                    norm3: init.norm(&format!("{n}.norm3"), d),
                }
            })
            .collect();
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let q: Vec<F> = (0..c.queries * d).map(|_| F::of(normal.sample(&mut init.rng))).collect();
        let query_embed = init.store.add("query_embed", &[c.queries, d], q);

        let class_head = init.linear("heads.class", d, 1);
        let box_head = init.mlp("heads.box", &[d, d, 4]);
        let box_iou_head = init.mlp("heads.box_iou", &[d, c.iou_hidden, 1]);
        let mask_iou_head = init.mlp("heads.mask_iou", &[d, c.iou_hidden, 1]);
        let kernel_head = init.linear("heads.kernel", d, c.kernel_params());
        let contrastive_head = init.mlp("heads.contrastive", &[d, d, c.contrastive_dim]);
        // Prior foreground probability 0.01; boxes start at a fifth of the image.
        let prior = -(99f64).ln();
        store.set_values(class_head.b, vec![F::of(prior)]);
        let wh = (0.2f64 / 0.8).ln();
        let last = box_head.layers.last().expect("box head layers").b;
        store.set_values(last, [0.0, 0.0, wh, wh].map(F::of).to_vec());

        let s = c.feature_size();
        let pos = Tensor::new(&[s * s, d], positional_encoding(s, d).into_iter().map(F::of).collect())
            .expect("positional encoding shape");
        let rel_grid = (0..s * s)
            .map(|k| [((k % s) as f64 + 0.5) / s as f64, ((k / s) as f64 + 0.5) / s as f64])
            .collect();
        let upsample = Tensor::new(&[4 * s, s], bilinear_matrix(s, 4).into_iter().map(F::of).collect())
            .expect("upsample shape");
        Ok(Self {
            config,
            params: store,
            conv1,
            conv2,
            conv3,
            input_proj,
            mask_proj,
            encoder,
            decoder,
            query_embed,
            class_head,
            box_head,
            box_iou_head,
            mask_iou_head,
            kernel_head,
            contrastive_head,
            pos,
            rel_grid,
            upsample,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Parameter ids whose names start with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Backbone, encoder and decoder parameters (everything upstream of the heads).
    pub fn trunk_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, e)| !e.name.starts_with("heads."))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn class_head_ids(&self) -> Vec<ParamId> {
        vec![self.class_head.w, self.class_head.b]
    }

    /// `[H, W, C]` image in `[0, 1]` to `[S, feature_channels]` features.
    pub fn backbone(&self, p: &Bound<F>, image: &[f32]) -> Result<Tensor<F>> {
        let c = &self.config;
        let n = c.image_size;
        let want = n * n * c.in_channels;
        if image.len() != want {
            return Err(ModelError::Channels {
                got: image.len(),
                want,
                size: n,
                channels: c.in_channels,
            });
        }
        let x = Tensor::new(
            &[n, n, c.in_channels],
            image.iter().map(|&v| F::of(v as f64 - 0.5)).collect(),
        )?;
        let h = self.conv1.apply(p, &x.im2col(3, 2, 1)?)?.relu();
        let h = h.reshape(&[n / 2, n / 2, 32])?;
        let h = self.conv2.apply(p, &h.im2col(3, 2, 1)?)?.relu();
        Ok(self.conv3.apply(p, &h)?.relu())
    }

    fn attend(
        &self,
        p: &Bound<F>,
        a: &Attention,
        query: &Tensor<F>,
        key: &Tensor<F>,
        value: &Tensor<F>,
    ) -> Result<Tensor<F>, TensorError> {
        let q = a.q.apply(p, query)?;
        let k = a.k.apply(p, key)?;
        let v = a.v.apply(p, value)?;
        let heads = self.config.heads;
        let dh = self.config.attn_dim / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            let w = qh.matmul_t(&kh)?.scale(scale).softmax();
            outs.push(w.matmul(&vh)?);
        }
        let merged = if heads == 1 {
            outs.pop().expect("one head")
        } else {
            Tensor::concat(&outs, 1)?
        };
        a.o.apply(p, &merged)
    }

    fn heads(&self, p: &Bound<F>, embed: Tensor<F>, opts: ForwardOptions) -> Result<LayerOutput<F>, TensorError> {
        let class_in = if opts.stop_grad { embed.stop_grad() } else { embed.clone() };
        Ok(LayerOutput {
            class_logits: self.class_head.apply(p, &class_in)?,
            boxes: self.box_head.apply(p, &embed)?.sigmoid(),
            box_iou_logits: self.box_iou_head.apply(p, &embed)?,
            mask_iou_logits: self.mask_iou_head.apply(p, &embed)?,
            kernels: self.kernel_head.apply(p, &embed)?,
            embed,
        })
    }

    pub fn forward(&self, p: &Bound<F>, image: &[f32], opts: ForwardOptions) -> Result<ImageOutput<F>> {
        let features = self.backbone(p, image)?;
        let mut memory = self.input_proj.apply(p, &features)?;
        for l in &self.encoder {
            let qk = memory.add(&self.pos)?;
            let a = self.attend(p, &l.attn, &qk, &qk, &memory)?;
            memory = l.norm1.apply(p, &memory.add(&a)?)?;
            let f = l.ff2.apply(p, &l.ff1.apply(p, &memory)?.relu())?;
            memory = l.norm2.apply(p, &memory.add(&f)?)?;
        }
        let mask_features = self.mask_proj.apply(p, &memory)?;
        let keys = memory.add(&self.pos)?;
        let mut tgt = p.get(self.query_embed).clone();
        let mut layers = Vec::new();
        for (i, l) in self.decoder.iter().enumerate() {
            let a = self.attend(p, &l.self_attn, &tgt, &tgt, &tgt)?;
            tgt = l.norm1.apply(p, &tgt.add(&a)?)?;
            let a = self.attend(p, &l.cross_attn, &tgt, &keys, &memory)?;
            tgt = l.norm2.apply(p, &tgt.add(&a)?)?;
            let f = l.ff2.apply(p, &l.ff1.apply(p, &tgt)?.relu())?;
            tgt = l.norm3.apply(p, &tgt.add(&f)?)?;
            if opts.all_layers || i + 1 == self.decoder.len() {
                layers.push(self.heads(p, tgt.clone(), opts)?);
            }
        }
        Ok(ImageOutput {
            features,
            mask_features,
            layers,
        })
    }

    /// Soft masks `[n, size²]` for the given queries of one layer.
    pub fn masks(&self, out: &ImageOutput<F>, layer: &LayerOutput<F>, queries: &[usize]) -> Result<Tensor<F>> {
        let boxes = layer.boxes.values();
        let rows = queries
            .iter()
            .map(|&q| {
                let center = [boxes[q * 4].f64(), boxes[q * 4 + 1].f64()];
                let kernel = layer.kernels.slice(0, q, 1)?;
                self.mask_from_kernel(&kernel, &out.mask_features, center)
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.image_size * self.config.image_size]));
        }
        Ok(Tensor::concat(&rows, 0)?)
    }

    /// Two-layer 1x1 dynamic convolution over mask features plus coordinates
    /// relative to `center`, then sigmoid and 4x bilinear upsampling.
    /// `kernel` is `[1, kernel_params]`; returns `[1, size²]`.
    pub fn mask_from_kernel(&self, kernel: &Tensor<F>, mask_features: &Tensor<F>, center: [f64; 2]) -> Result<Tensor<F>> {
        let m = self.config.mask_dim;
        let s = self.config.feature_size();
        let rel: Vec<F> = self
            .rel_grid
            .iter()
            .flat_map(|[x, y]| [F::of(x - center[0]), F::of(y - center[1])])
            .collect();
        let rel = Tensor::new(&[s * s, 2], rel)?;
        let feats = Tensor::concat(&[mask_features.clone(), rel], 1)?;
        let w1 = kernel.slice(1, 0, (m + 2) * m)?.reshape(&[m + 2, m])?;
        let b1 = kernel.slice(1, (m + 2) * m, m)?.reshape(&[m])?;
        let w2 = kernel.slice(1, (m + 3) * m, m)?.reshape(&[m, 1])?;
        let b2 = kernel.slice(1, (m + 4) * m, 1)?.reshape(&[1])?;
        let h = feats.matmul(&w1)?.add(&b1)?.relu();
        let low = h.matmul(&w2)?.add(&b2)?.sigmoid().reshape(&[s, s])?;
        let up = self.upsample.matmul(&low)?.matmul_t(&self.upsample)?;
        Ok(up.reshape(&[1, 16 * s * s])?)
    }

    /// Online contrastive projection `[n, D] → [n, contrastive_dim]` (unnormalized).
    pub fn contrastive(&self, p: &Bound<F>, embed: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.contrastive_head.apply(p, embed)
    }

    pub fn query_outputs(layer: &LayerOutput<F>) -> Vec<QueryOutput> {
        let cls = layer.class_logits.to_f64_vec();
        let bi = layer.box_iou_logits.to_f64_vec();
        let mi = layer.mask_iou_logits.to_f64_vec();
        layer
            .pred_boxes()
            .into_iter()
            .enumerate()
            .map(|(q, bbox)| QueryOutput {
                class_logit: cls[q],
                bbox,
                box_iou_logit: bi[q],
                mask_iou_logit: mi[q],
            })
            .collect()
    }

    /// Every parameter as a checkpoint record under its store name.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (_, e) in self.params.iter() {
            ck.insert(e.name.clone(), &e.shape, e.value.iter().map(|v| v.f64() as f32).collect());
        }
        ck
    }

    /// Fresh model for `config` with every parameter read from `ck`.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(config, 0).map_err(|msg| {
            ModelError::Tensor(TensorError::Invalid {
                op: "model config",
                msg,
            })
        })?;
        model.load_params(ck)?;
        Ok(model)
    }

    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let e = self.params.entry(id);
            let rec = ck.require(&e.name)?;
            if rec.shape != e.shape {
                return Err(ModelError::ShapeMismatch {
                    name: e.name.clone(),
                    got: rec.shape.clone(),
                    want: e.shape.clone(),
                });
            }
            let v = rec.values.iter().map(|&x| F::of(x as f64)).collect();
            self.params.set_values(id, v);
        }
        Ok(())
    }
}
