//! Vision transformer backbone and the patch-level binary classifier.
//!
//! Images are split into `P×P` sub-patches, linearly projected, prefixed
//! with a learned class token and summed with learned positions. A stack of
//! pre-norm encoder blocks follows; the normalized class token is the image
//! feature.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{patchify, stack, Bound, Builder, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::optim::{Optimizer, Sgd};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    /// Side of the (square) input image.
    pub image_side: usize,
    /// Sub-patch side `P`.
    pub patch: usize,
    pub channels: usize,
    /// Token width `D`.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { image_side: 32, patch: 4, channels: 3, width: 64, depth: 4, heads: 4, mlp_ratio: 4 }
    }
}

impl VitConfig {
    /// The ViT-B/16 geometry on 224×224 inputs.
    pub fn base16() -> Self {
        Self { image_side: 224, patch: 16, channels: 3, width: 768, depth: 12, heads: 12, mlp_ratio: 4 }
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }

    /// Number of sub-patches `N` for the full-size input.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_side.is_multiple_of(self.patch) {
            return Err(dim_err!("image side {} not divisible by sub-patch {}", self.image_side, self.patch));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(dim_err!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("vit depth, channels and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn forward(&self, t: &mut Tape, p: &Bound, x: Var, batch: usize) -> Result<Var> {
        let h = self.ln1.forward(t, p, x)?;
        let a = self.attn.forward(t, p, h, h, batch)?;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, p, x)?;
        let m = self.mlp.forward(t, p, h)?;
        t.add(x, m)
    }
}

/// Embedded token sequence for one image (values, not tape handles).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// `N × D` projected sub-patches.
    pub sub_patch_embeddings: Tensor,
    /// `1 × D` learned class token.
    pub class_token: Tensor,
    /// `(N+1) × D` positions, class-token row first.
    pub positional: Tensor,
}

impl PatchSequence {
    pub fn num_patches(&self) -> usize {
        self.sub_patch_embeddings.shape()[0]
    }

    /// `h0 = [class; sub-patches] + positions`.
    pub fn input_sequence(&self) -> Result<Tensor> {
        let mut data = self.class_token.data().to_vec();
        data.extend_from_slice(self.sub_patch_embeddings.data());
        let seq = Tensor::new(self.positional.shape(), data)?;
        seq.zip_map(&self.positional, |a, b| a + b)
    }
}

/// Encoder stack shared by the classifier and the self-distillation nets.
#[derive(Clone, Debug)]
pub struct VitBackbone {
    pub config: VitConfig,
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln_final: LayerNorm,
}

impl VitBackbone {
    pub fn new(b: &mut Builder, name: &str, config: &VitConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let patch_dim = config.patch * config.patch * config.channels;
        Ok(b.scoped(name, |b| VitBackbone {
            config: config.clone(),
            embed: Linear::new(b, "embed", patch_dim, d),
            cls: b.randn("cls", &[1, d], 0.02),
            pos: b.randn("pos", &[config.num_patches() + 1, d], 0.02),
            blocks: (0..config.depth)
                .map(|i| {
                    b.scoped(&format!("block{i}"), |b| EncoderBlock {
                        ln1: LayerNorm::new(b, "ln1", d),
                        attn: MultiHeadAttention::new(b, "attn", d, d, config.heads),
                        ln2: LayerNorm::new(b, "ln2", d),
                        mlp: Mlp::new(b, "mlp", d, d * config.mlp_ratio, d),
                    })
                })
                .collect(),
            ln_final: LayerNorm::new(b, "ln_final", d),
        }))
    }

    pub fn pos_param(&self) -> ParamId {
        self.pos
    }

    fn grid_for(&self, side: usize) -> Result<usize> {
        let p = self.config.patch;
        if !side.is_multiple_of(p) {
            return Err(dim_err!("input side {side} not divisible by sub-patch {p}"));
        }
        let g = side / p;
        if g == 0 || !self.config.grid().is_multiple_of(g) {
            return Err(dim_err!("input side {side} incompatible with trained side {}", self.config.image_side));
        }
        Ok(g)
    }

    /// Positional table for a `g×g` grid: the learned table when `g` is the
    /// trained grid, otherwise its block average (used for smaller crops).
    fn positions(&self, t: &mut Tape, p: &Bound, g: usize) -> Result<Var> {
        let full = self.config.grid();
        if g == full {
            return Ok(p[self.pos]);
        }
        let r = full / g;
        let cls_pos = t.gather_rows(p[self.pos], &[0])?;
        let patch_pos = t.gather_rows(p[self.pos], &(1..=full * full).collect::<Vec<_>>())?;
        let mut pool = vec![0.0; g * g * full * full];
        let w = 1.0 / (r * r) as f64;
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..r {
                    for dx in 0..r {
                        let src = (gy * r + dy) * full + gx * r + dx;
                        pool[(gy * g + gx) * full * full + src] = w;
                    }
                }
            }
        }
        let pool = t.constant(Tensor::new(&[g * g, full * full], pool)?);
        let pooled = t.matmul(pool, patch_pos)?;
        t.concat_rows(cls_pos, pooled)
    }

    /// Build `h0` for `batch` images from already patchified rows
    /// (`batch·g² × P²C`).
    pub fn embed_rows(&self, t: &mut Tape, p: &Bound, rows: Var, batch: usize, g: usize) -> Result<Var> {
        let n = g * g;
        if t.shape(rows)[0] != batch * n {
            return Err(dim_err!("expected {} sub-patch rows, got {}", batch * n, t.shape(rows)[0]));
        }
        let emb = self.embed.forward(t, p, rows)?;
        let with_cls = t.concat_rows(emb, p[self.cls])?;
        let cls_row = batch * n;
        let mut index = Vec::with_capacity(batch * (n + 1));
        for b in 0..batch {
            index.push(cls_row);
            index.extend(b * n..(b + 1) * n);
        }
        let seq = t.gather_rows(with_cls, &index)?;
        let pos = self.positions(t, p, g)?;
        let pos = t.tile_rows(pos, batch)?;
        t.add(seq, pos)
    }

    /// Run the encoder blocks; returns the `batch·(N+1) × D` sequence.
    pub fn encode(&self, t: &mut Tape, p: &Bound, h0: Var, batch: usize) -> Result<Var> {
        let mut x = h0;
        for block in &self.blocks {
            x = block.forward(t, p, x, batch)?;
        }
        Ok(x)
    }

    /// Normalized class-token features, `batch × D`.
    pub fn class_features(&self, t: &mut Tape, p: &Bound, seq: Var, batch: usize) -> Result<Var> {
        let rows = t.shape(seq)[0];
        let stride = rows / batch;
        let cls = t.gather_rows(seq, &(0..batch).map(|b| b * stride).collect::<Vec<_>>())?;
        self.ln_final.forward(t, p, cls)
    }

    /// Full forward from a `B×S×S×C` image batch to `B × D` features.
    pub fn forward(&self, t: &mut Tape, p: &Bound, images: &Tensor) -> Result<Var> {
        let &[batch, h, w, c] = images.shape() else {
            return Err(dim_err!("expected B×H×W×C images, got {:?}", images.shape()));
        };
        if h != w || c != self.config.channels {
            return Err(dim_err!("expected square {}-channel images, got {h}×{w}×{c}", self.config.channels));
        }
        let g = self.grid_for(h)?;
        let rows = t.constant(patchify(images, self.config.patch)?);
        let h0 = self.embed_rows(t, p, rows, batch, g)?;
        let seq = self.encode(t, p, h0, batch)?;
        self.class_features(t, p, seq, batch)
    }

    /// Sub-patch projection, class token and positions for one image.
    pub fn embed_patch(&self, params: &ParamStore, patch: &Tensor) -> Result<PatchSequence> {
        let &[h, w, c] = patch.shape() else {
            return Err(dim_err!("expected side×side×C patch, got {:?}", patch.shape()));
        };
        if h != w || c != self.config.channels {
            return Err(dim_err!("expected square {}-channel patch", self.config.channels));
        }
        if h != self.config.image_side {
            return Err(dim_err!("patch side {h} differs from configured {}", self.config.image_side));
        }
        self.grid_for(h)?;
        let mut t = Tape::new();
        let p = params.bind(&mut t, false);
        let rows = t.constant(patchify(&patch.clone().reshape(&[1, h, w, c])?, self.config.patch)?);
        let emb = self.embed.forward(&mut t, &p, rows)?;
        Ok(PatchSequence {
            sub_patch_embeddings: t.value(emb).clone(),
            class_token: params.get(self.cls).clone(),
            positional: params.get(self.pos).clone(),
        })
    }
}

/// Patch label prediction: `ŷ = argmax(logits)`, malignant = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPrediction {
    pub patch_id: String,
    pub wsi_id: String,
    pub logits: [f64; 2],
    pub label: u8,
}

impl PatchPrediction {
    pub fn from_logits(patch_id: impl Into<String>, wsi_id: impl Into<String>, logits: [f64; 2]) -> Self {
        let label = u8::from(logits[1] > logits[0]);
        Self { patch_id: patch_id.into(), wsi_id: wsi_id.into(), logits, label }
    }
}

/// Backbone plus a 2-way linear head on the normalized class token.
#[derive(Clone, Debug)]
pub struct VitClassifier {
    pub backbone: VitBackbone,
    head: Linear,
    pub params: ParamStore,
}

impl VitClassifier {
    pub fn new(config: &VitConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, rng);
        let backbone = VitBackbone::new(&mut b, "vit", config)?;
        let head = Linear::new(&mut b, "head", config.width, 2);
        Ok(Self { backbone, head, params })
    }

    /// `B × 2` logits for a `B×S×S×C` batch.
    pub fn logits(&self, t: &mut Tape, p: &Bound, images: &Tensor) -> Result<Var> {
        let f = self.backbone.forward(t, p, images)?;
        self.head.forward(t, p, f)
    }

    /// Logits from pre-patchified rows, exposing token order to callers.
    pub fn logits_from_rows(&self, t: &mut Tape, p: &Bound, rows: Var, batch: usize) -> Result<Var> {
        let g = self.backbone.config.grid();
        let h0 = self.backbone.embed_rows(t, p, rows, batch, g)?;
        let seq = self.backbone.encode(t, p, h0, batch)?;
        let f = self.backbone.class_features(t, p, seq, batch)?;
        self.head.forward(t, p, f)
    }

    pub fn predict_logits(&self, images: &Tensor) -> Result<Vec<[f64; 2]>> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let l = self.logits(&mut t, &p, images)?;
        Ok(t.value(l).data().chunks(2).map(|r| [r[0], r[1]]).collect())
    }

    pub fn classify_patch(&self, patch_id: &str, wsi_id: &str, patch: &Tensor) -> Result<PatchPrediction> {
        let &[h, w, c] = patch.shape() else {
            return Err(dim_err!("expected side×side×C patch, got {:?}", patch.shape()));
        };
        let logits = self.predict_logits(&patch.clone().reshape(&[1, h, w, c])?)?;
        Ok(PatchPrediction::from_logits(patch_id, wsi_id, logits[0]))
    }

    /// Mean two-class cross-entropy of a labelled batch.
    pub fn loss(&self, t: &mut Tape, p: &Bound, images: &Tensor, labels: &[u8]) -> Result<Var> {
        let logits = self.logits(t, p, images)?;
        let logp = t.log_softmax_temperature(logits, 1.0)?;
        let onehot = one_hot(labels);
        let target = t.constant(onehot);
        let picked = t.mul(logp, target)?;
        let s = t.sum(picked)?;
        t.scale(s, -1.0 / labels.len() as f64)
    }
}

pub(crate) fn one_hot(labels: &[u8]) -> Tensor {
    let mut data = vec![0.0; labels.len() * 2];
    for (i, &l) in labels.iter().enumerate() {
        data[i * 2 + usize::from(l.min(1))] = 1.0;
    }
    Tensor::new(&[labels.len(), 2], data).expect("non-empty labels")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Random horizontal/vertical flips of training patches.
    pub flip_augment: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, lr: 3e-4, momentum: 0.0, batch_size: 32, flip_augment: true }
    }
}

/// A labelled image used for classifier training.
#[derive(Clone, Debug)]
pub struct LabeledPatch {
    pub image: Tensor,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Fit a fresh classifier on the union of real and synthetic patches.
///
/// Batch order is a seeded permutation per epoch. `on_epoch` receives
/// per-epoch statistics (validation accuracy when `val` is non-empty).
pub fn train_classifier(
    vit: &VitConfig,
    cfg: &ClassifierTrainConfig,
    real: &[LabeledPatch],
    synthetic: &[LabeledPatch],
    val: &[LabeledPatch],
    rng: &Rng,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<VitClassifier> {
    let all: Vec<&LabeledPatch> = real.iter().chain(synthetic).collect();
    let has = |c: u8| all.iter().any(|p| p.label == c);
    if !has(0) || !has(1) {
        return Err(Error::Data("classifier training set must contain both classes".into()));
    }
    let mut model = VitClassifier::new(vit, &mut rng.fork(0))?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order_rng = rng.fork(1);
    let mut aug_rng = rng.fork(2);
    for epoch in 1..=cfg.epochs {
        let order = order_rng.permutation(all.len());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let imgs: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    let img = &all[i].image;
                    if cfg.flip_augment {
                        random_flip(img, &mut aug_rng)
                    } else {
                        img.clone()
                    }
                })
                .collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| all[i].label).collect();
            let batch = stack(&imgs.iter().collect::<Vec<_>>())?;
            let mut t = Tape::new();
            let p = model.params.bind(&mut t, true);
            let logits = model.logits(&mut t, &p, &batch)?;
            correct += t
                .value(logits)
                .data()
                .chunks(2)
                .zip(&labels)
                .filter(|(r, &l)| u8::from(r[1] > r[0]) == l)
                .count();
            let logp = t.log_softmax_temperature(logits, 1.0)?;
            let target = t.constant(one_hot(&labels));
            let picked = t.mul(logp, target)?;
            let s = t.sum(picked)?;
            let loss = t.scale(s, -1.0 / labels.len() as f64)?;
            t.backward(loss)?;
            loss_sum += t.value(loss).item() * labels.len() as f64;
            let grads = model.params.grads(&t, &p);
            opt.step(&mut model.params, &grads);
        }
        let val_accuracy = if val.is_empty() { None } else { Some(accuracy(&model, val)?) };
        on_epoch(&EpochStats {
            epoch,
            train_loss: loss_sum / all.len() as f64,
            train_accuracy: correct as f64 / all.len() as f64,
            val_accuracy,
        });
    }
    Ok(model)
}

/// Fraction of correctly classified patches.
pub fn accuracy(model: &VitClassifier, patches: &[LabeledPatch]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in patches.chunks(64) {
        let batch = stack(&chunk.iter().map(|p| &p.image).collect::<Vec<_>>())?;
        let logits = model.predict_logits(&batch)?;
        correct += logits.iter().zip(chunk).filter(|(l, p)| u8::from(l[1] > l[0]) == p.label).count();
    }
    Ok(correct as f64 / patches.len().max(1) as f64)
}

/// Flip an `S×S×C` image horizontally and/or vertically at random.
pub fn random_flip(img: &Tensor, rng: &mut Rng) -> Tensor {
    let (h_flip, v_flip) = (rng.bernoulli(0.5), rng.bernoulli(0.5));
    flip(img, h_flip, v_flip)
}

pub fn flip(img: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return img.clone();
    }
    let &[h, w, c] = img.shape() else { return img.clone() };
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let sy = if vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}
