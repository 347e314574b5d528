//! Self-distillation with an EMA teacher.
//!
//! A student backbone with a projection head is trained to match the
//! teacher's sharpened, centered output distribution across augmented views
//! of the same patch. The teacher follows the student by exponential moving
//! average and is never updated by gradient. Its backbone class token is the
//! embedding that conditions diffusion.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{dim_err, param_err, Error, Result};
use crate::nn::{stack, Bound, Builder, Mlp, ParamStore};
use crate::optim::{AdamW, Optimizer};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{flip, VitBackbone, VitConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DinoConfig {
    pub vit: VitConfig,
    pub head_hidden: usize,
    /// Prototype count `V`.
    pub out_dim: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
    pub n_global: usize,
    pub n_local: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub brightness_jitter: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            head_hidden: 128,
            out_dim: 256,
            student_temp: 0.1,
            teacher_temp: 0.04,
            teacher_momentum: 0.996,
            center_momentum: 0.9,
            n_global: 2,
            n_local: 6,
            global_scale: (0.5, 1.0),
            local_scale: (0.15, 0.4),
            brightness_jitter: 0.2,
            epochs: 30,
            batch_size: 64,
            lr: 5e-4,
            weight_decay: 0.04,
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.n_global < 2 {
            return Err(param_err!("need at least 2 global views, got {}", self.n_global));
        }
        if !(self.student_temp > 0.0 && self.teacher_temp > 0.0) {
            return Err(param_err!("temperatures must be positive"));
        }
        for m in [self.teacher_momentum, self.center_momentum] {
            if !(0.0..=1.0).contains(&m) {
                return Err(param_err!("momentum {m} outside [0, 1]"));
            }
        }
        if self.n_local > 0 && !self.vit.grid().is_multiple_of(2) {
            return Err(dim_err!("local views need an even sub-patch grid, got {}", self.vit.grid()));
        }
        Ok(())
    }
}

/// Augmented views of one source patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    /// Full-size views; the teacher sees these, and so does the student.
    pub global_views: Vec<Tensor>,
    /// Half-size crops, student only.
    pub local_views: Vec<Tensor>,
    pub source_patch_id: String,
}

impl ViewSet {
    pub fn num_views(&self) -> usize {
        self.global_views.len() + self.local_views.len()
    }

    /// Number of (teacher view, student view) terms, `g·(g+l−1)`.
    pub fn pair_count(&self) -> usize {
        let g = self.global_views.len();
        g * (self.num_views() - 1)
    }

    /// Every (teacher global index, student view index) pair with the two
    /// views distinct. Student indices count global views first.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let g = self.global_views.len();
        (0..g).flat_map(|i| (0..self.num_views()).filter(move |&j| j != i).map(move |j| (i, j))).collect()
    }
}

/// Crop-and-resize multi-view augmentation with flips and brightness jitter.
pub fn make_views(
    patch: &Tensor,
    source_patch_id: &str,
    rng: &mut Rng,
    n_global: usize,
    n_local: usize,
    cfg: &DinoConfig,
) -> Result<ViewSet> {
    let &[h, w, c] = patch.shape() else {
        return Err(dim_err!("expected side×side×C patch, got {:?}", patch.shape()));
    };
    if h != w || h < 16 {
        return Err(param_err!("views need a square patch with side ≥ 16, got {h}×{w}"));
    }
    if c != 3 {
        return Err(dim_err!("views expect 3-channel patches, got {c}"));
    }
    let view = |scale: (f64, f64), out: usize, rng: &mut Rng| {
        let area = rng.uniform_range(scale.0, scale.1);
        let side = ((area.sqrt() * h as f64).round() as usize).clamp(2, h);
        let y0 = rng.below(h - side + 1);
        let x0 = rng.below(w - side + 1);
        let crop = crop_resize(patch, y0, x0, side, out);
        let flipped = flip(&crop, rng.bernoulli(0.5), rng.bernoulli(0.5));
        let factor = 1.0 + rng.uniform_range(-cfg.brightness_jitter, cfg.brightness_jitter);
        flipped.map(|v| (v * factor).clamp(0.0, 1.0))
    };
    let global_views = (0..n_global).map(|_| view(cfg.global_scale, h, rng)).collect();
    let local_views = (0..n_local).map(|_| view(cfg.local_scale, h / 2, rng)).collect();
    Ok(ViewSet { global_views, local_views, source_patch_id: source_patch_id.to_string() })
}

/// Bilinear resize of the `side×side` window at `(y0, x0)` to `out×out`.
fn crop_resize(patch: &Tensor, y0: usize, x0: usize, side: usize, out: usize) -> Tensor {
    let w = patch.shape()[1];
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(side as u32, side as u32, |x, y| {
        let i = ((y0 + y as usize) * w + x0 + x as usize) * 3;
        let d = patch.data();
        Rgb([d[i] as f32, d[i + 1] as f32, d[i + 2] as f32])
    });
    let resized = imageops::resize(&buf, out as u32, out as u32, FilterType::Triangle);
    let data = resized.into_raw().into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect();
    Tensor::new(&[out, out, 3], data).expect("resize output shape")
}

/// Backbone + projection head architecture, shared by student and teacher.
#[derive(Clone, Debug)]
pub struct DinoNet {
    pub backbone: VitBackbone,
    head: Mlp,
}

impl DinoNet {
    pub fn new(cfg: &DinoConfig, rng: &mut Rng) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, rng);
        let backbone = VitBackbone::new(&mut b, "vit", &cfg.vit)?;
        let head = Mlp::new(&mut b, "head", cfg.vit.width, cfg.head_hidden, cfg.out_dim);
        Ok((Self { backbone, head }, store))
    }

    /// Prototype logits for a batch of same-size views.
    fn logits(&self, t: &mut Tape, p: &Bound, views: &[&Tensor]) -> Result<crate::Var> {
        let batch = stack(views)?;
        let f = self.backbone.forward(t, p, &batch)?;
        self.head.forward(t, p, f)
    }
}

/// Fixed-width conditioning vector taken from the teacher backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    }
}

/// Student, teacher and center: everything self-distillation updates.
#[derive(Clone, Debug)]
pub struct DistillationState {
    pub net: DinoNet,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub center: Tensor,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub momentum: f64,
    pub center_momentum: f64,
}

/// Loss value plus the raw teacher logits it was computed from.
pub struct DistillationOutput {
    pub loss: f64,
    pub teacher_logits: Tensor,
    pub student_grads: Vec<Tensor>,
}

impl DistillationState {
    /// Fresh student; the teacher starts as an exact copy.
    pub fn new(cfg: &DinoConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (net, student) = DinoNet::new(cfg, rng)?;
        Ok(Self {
            net,
            teacher: student.clone(),
            student,
            center: Tensor::zeros(&[cfg.out_dim]),
            student_temp: cfg.student_temp,
            teacher_temp: cfg.teacher_temp,
            momentum: cfg.teacher_momentum,
            center_momentum: cfg.center_momentum,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.center.len()
    }

    /// Summed cross-entropy over every (teacher global, student view) pair
    /// of every view set, with gradients for the student only.
    ///
    /// Teacher targets are `softmax((logits − center)/τ_t)`; student
    /// predictions are `softmax(logits/τ_s)`.
    pub fn distillation(&self, batch: &[ViewSet]) -> Result<DistillationOutput> {
        if batch.is_empty() || batch.iter().any(|v| v.global_views.is_empty()) {
            return Err(param_err!("distillation needs at least one view set with global views"));
        }
        if !(self.student_temp > 0.0 && self.teacher_temp > 0.0) {
            return Err(param_err!("temperatures must be positive"));
        }
        let g = batch[0].global_views.len();
        let l = batch[0].local_views.len();
        if batch.iter().any(|v| v.global_views.len() != g || v.local_views.len() != l) {
            return Err(param_err!("all view sets in a batch need the same view counts"));
        }
        let v = self.out_dim();

        // Teacher: constants only.
        let globals: Vec<&Tensor> = batch.iter().flat_map(|s| s.global_views.iter()).collect();
        let mut tt = Tape::new();
        let tp = self.teacher.bind(&mut tt, false);
        let t_logits_var = self.net.logits(&mut tt, &tp, &globals)?;
        let teacher_logits = tt.value(t_logits_var).clone();
        let centered = teacher_logits.zip_map(&tile(&self.center, batch.len() * g)?, |a, c| a - c)?;
        let t_probs = crate::autodiff::softmax_temperature(&centered, self.teacher_temp)?;

        // Student on globals then locals; row (b, j) gets Σ_{i≠j} P_t(b, i).
        let mut t = Tape::new();
        let sp = self.student.bind(&mut t, true);
        let s_global = self.net.logits(&mut t, &sp, &globals)?;
        let mut student_logits = vec![(s_global, g)];
        if l > 0 {
            let locals: Vec<&Tensor> = batch.iter().flat_map(|s| s.local_views.iter()).collect();
            student_logits.push((self.net.logits(&mut t, &sp, &locals)?, l));
        }
        let mut total = None;
        for (block, (logits, per)) in student_logits.into_iter().enumerate() {
            let logp = t.log_softmax_temperature(logits, self.student_temp)?;
            let mut target = vec![0.0; batch.len() * per * v];
            for b in 0..batch.len() {
                for j in 0..per {
                    let row = &mut target[(b * per + j) * v..(b * per + j + 1) * v];
                    for i in 0..g {
                        if block == 0 && i == j {
                            continue;
                        }
                        let src = &t_probs.data()[(b * g + i) * v..(b * g + i + 1) * v];
                        row.iter_mut().zip(src).for_each(|(r, s)| *r += s);
                    }
                }
            }
            let target = t.constant(Tensor::new(&[batch.len() * per, v], target)?);
            let prod = t.mul(logp, target)?;
            let s = t.sum(prod)?;
            total = Some(match total {
                None => s,
                Some(acc) => t.add(acc, s)?,
            });
        }
        let total = total.expect("at least the global block");
        let loss = t.scale(total, -1.0)?;
        t.backward(loss)?;
        Ok(DistillationOutput {
            loss: t.value(loss).item(),
            teacher_logits,
            student_grads: self.student.grads(&t, &sp),
        })
    }

    /// Cross-entropy sum for a single view set.
    pub fn distillation_loss(&self, views: &ViewSet) -> Result<f64> {
        if views.num_views() == 0 {
            return Err(param_err!("empty view set"));
        }
        Ok(self.distillation(std::slice::from_ref(views))?.loss)
    }

    /// `θ_t ← m·θ_t + (1−m)·θ_s`.
    pub fn ema_update(&mut self) {
        ema(&mut self.teacher, &self.student, self.momentum);
    }

    /// `center ← m_c·center + (1−m_c)·mean(teacher logits)`.
    pub fn center_update(&mut self, teacher_logits: &Tensor) -> Result<()> {
        let v = self.out_dim();
        if teacher_logits.last_dim() != v || teacher_logits.is_empty() {
            return Err(dim_err!("teacher logits width {} vs center {v}", teacher_logits.last_dim()));
        }
        let rows = teacher_logits.rows() as f64;
        let mut mean = vec![0.0; v];
        for row in teacher_logits.data().chunks(v) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / rows);
        }
        let mc = self.center_momentum;
        for (c, m) in self.center.data_mut().iter_mut().zip(mean) {
            *c = mc * *c + (1.0 - mc) * m;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.extend_prefixed("teacher", self.teacher.to_checkpoint());
        ck.extend_prefixed("student", self.student.to_checkpoint());
        ck.push("center", self.center.clone());
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        self.teacher.load_checkpoint(&ck.section("teacher"))?;
        self.student.load_checkpoint(&ck.section("student"))?;
        let c = ck.require("center")?;
        if c.shape() != self.center.shape() {
            return Err(Error::Format("center width mismatch".into()));
        }
        self.center = c.clone();
        Ok(())
    }

    pub fn extractor(&self) -> EmbeddingExtractor {
        EmbeddingExtractor { backbone: self.net.backbone.clone(), params: self.teacher.clone() }
    }
}

/// Elementwise `dst ← m·dst + (1−m)·src`.
pub fn ema(dst: &mut ParamStore, src: &ParamStore, m: f64) {
    debug_assert!(dst.same_layout(src));
    for (d, s) in dst.values_mut().iter_mut().zip(src.values()) {
        for (a, &b) in d.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
}

fn tile(row: &Tensor, times: usize) -> Result<Tensor> {
    Tensor::new(&[times, row.len()], row.data().repeat(times))
}

/// Frozen teacher backbone used for conditioning embeddings and FID features.
#[derive(Clone, Debug)]
pub struct EmbeddingExtractor {
    backbone: VitBackbone,
    params: ParamStore,
}

impl EmbeddingExtractor {
    pub fn width(&self) -> usize {
        self.backbone.config.width
    }

    pub fn input_side(&self) -> usize {
        self.backbone.config.image_side
    }

    /// Class-token feature of one patch. No augmentation is applied.
    pub fn extract_embedding(&self, patch: &Tensor) -> Result<Embedding> {
        Ok(self.extract_batch(std::slice::from_ref(patch))?.remove(0))
    }

    pub fn extract_batch(&self, patches: &[Tensor]) -> Result<Vec<Embedding>> {
        let side = self.input_side();
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(64) {
            for p in chunk {
                if p.shape() != [side, side, self.backbone.config.channels] {
                    return Err(dim_err!("patch shape {:?} does not match trained side {side}", p.shape()));
                }
            }
            let batch = stack(&chunk.iter().collect::<Vec<_>>())?;
            let mut t = Tape::new();
            let bound = self.params.bind(&mut t, false);
            let f = self.backbone.forward(&mut t, &bound, &batch)?;
            out.extend(t.value(f).data().chunks(self.width()).map(|r| Embedding(r.to_vec())));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DinoEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Self-distillation over `patches` (ids index the view seeds).
pub fn train_dino(
    cfg: &DinoConfig,
    patches: &[Tensor],
    rng: &Rng,
    mut on_epoch: impl FnMut(&DinoEpoch),
) -> Result<DistillationState> {
    if patches.is_empty() {
        return Err(Error::Data("no patches to distil on".into()));
    }
    let mut state = DistillationState::new(cfg, &mut rng.fork(0))?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order_rng = rng.fork(1);
    let view_rng = rng.fork(2);
    for epoch in 1..=cfg.epochs {
        let order = order_rng.permutation(patches.len());
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let views = chunk
                .iter()
                .map(|&i| {
                    let mut r = view_rng.fork((epoch as u64) << 32 | i as u64);
                    make_views(&patches[i], &i.to_string(), &mut r, cfg.n_global, cfg.n_local, cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let n_pairs = views.iter().map(ViewSet::pair_count).sum::<usize>();
            let out = state.distillation(&views)?;
            let grads: Vec<Tensor> =
                out.student_grads.iter().map(|g| g.map(|v| v / n_pairs as f64)).collect();
            opt.step(&mut state.student, &grads);
            state.ema_update();
            state.center_update(&out.teacher_logits)?;
            loss_sum += out.loss;
            pairs += n_pairs;
        }
        on_epoch(&DinoEpoch { epoch, loss: loss_sum / pairs as f64 });
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{cross_entropy, softmax_temperature};

    fn tiny() -> DinoConfig {
        DinoConfig {
            vit: VitConfig { image_side: 16, patch: 4, channels: 3, width: 8, depth: 1, heads: 2, mlp_ratio: 2 },
            head_hidden: 8,
            out_dim: 6,
            n_local: 2,
            ..DinoConfig::default()
        }
    }

    fn patch(seed: u64) -> Tensor {
        Tensor::randn(&[16, 16, 3], 0.2, &mut Rng::new(seed)).map(|v| (v + 0.5).clamp(0.0, 1.0))
    }

    #[test]
    fn view_counts_and_sizes() {
        let cfg = tiny();
        let v = make_views(&patch(1), "p", &mut Rng::new(1), 2, 6, &cfg).unwrap();
        assert_eq!(v.global_views.len(), 2);
        assert_eq!(v.local_views.len(), 6);
        assert!(v.global_views.iter().all(|g| g.shape() == [16, 16, 3]));
        assert!(v.local_views.iter().all(|g| g.shape() == [8, 8, 3]));
        assert!(v.global_views.iter().chain(&v.local_views).all(|g| g.data().iter().all(|x| (0.0..=1.0).contains(x))));
        let only_global = make_views(&patch(1), "p", &mut Rng::new(1), 2, 0, &cfg).unwrap();
        assert!(only_global.local_views.is_empty());
    }

    #[test]
    fn views_are_deterministic() {
        let cfg = tiny();
        let a = make_views(&patch(1), "p", &mut Rng::new(5), 2, 2, &cfg).unwrap();
        let b = make_views(&patch(1), "p", &mut Rng::new(5), 2, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_patch_rejected() {
        let p = Tensor::zeros(&[8, 8, 3]);
        assert!(matches!(make_views(&p, "p", &mut Rng::new(1), 2, 0, &tiny()), Err(Error::Parameter(_))));
    }

    #[test]
    fn pair_counts() {
        for (g, l) in [(2, 0), (2, 2), (2, 6), (3, 1)] {
            let v = ViewSet {
                global_views: vec![Tensor::zeros(&[16, 16, 3]); g],
                local_views: vec![Tensor::zeros(&[8, 8, 3]); l],
                source_patch_id: "x".into(),
            };
            assert_eq!(v.pair_count(), g * (g + l - 1));
            assert_eq!(v.pairs().len(), v.pair_count());
            assert!(v.pairs().iter().all(|(i, j)| i != j));
        }
    }

    #[test]
    fn self_distillation_floor_is_sum_of_entropies() {
        let mut cfg = tiny();
        cfg.student_temp = 0.5;
        cfg.teacher_temp = 0.5;
        let state = DistillationState::new(&cfg, &mut Rng::new(2)).unwrap();
        let img = patch(3);
        let views = ViewSet { global_views: vec![img.clone(); 3], local_views: vec![], source_patch_id: "s".into() };
        let loss = state.distillation_loss(&views).unwrap();
        // single-view probabilities via the teacher
        let mut t = Tape::new();
        let p = state.teacher.bind(&mut t, false);
        let logits = state.net.logits(&mut t, &p, &[&img]).unwrap();
        let probs = softmax_temperature(t.value(logits), 0.5).unwrap();
        let probs = probs.reshape(&[cfg.out_dim]).unwrap();
        let h = cross_entropy(&probs, &probs).unwrap();
        assert!((loss - 6.0 * h).abs() < 1e-9, "{loss} vs {}", 6.0 * h);
    }

    #[test]
    fn loss_matches_explicit_pair_sum() {
        let cfg = tiny();
        let mut state = DistillationState::new(&cfg, &mut Rng::new(2)).unwrap();
        state.center = Tensor::randn(&[cfg.out_dim], 0.3, &mut Rng::new(9));
        // perturb the teacher so the two nets differ
        for v in state.teacher.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= 1.1);
        }
        let views = make_views(&patch(4), "p", &mut Rng::new(1), 2, 2, &cfg).unwrap();
        let loss = state.distillation_loss(&views).unwrap();

        let all: Vec<&Tensor> = views.global_views.iter().chain(&views.local_views).collect();
        let probs = |params: &ParamStore, img: &Tensor, center: Option<&Tensor>, tau: f64| {
            let mut t = Tape::new();
            let p = params.bind(&mut t, false);
            let l = state.net.logits(&mut t, &p, &[img]).unwrap();
            let mut l = t.value(l).clone().reshape(&[cfg.out_dim]).unwrap();
            if let Some(c) = center {
                l = l.zip_map(c, |a, b| a - b).unwrap();
            }
            softmax_temperature(&l, tau).unwrap()
        };
        let mut expect = 0.0;
        for (i, j) in views.pairs() {
            let pt = probs(&state.teacher, all[i], Some(&state.center), cfg.teacher_temp);
            let ps = probs(&state.student, all[j], None, cfg.student_temp);
            expect += cross_entropy(&pt, &ps).unwrap();
        }
        assert!((loss - expect).abs() < 1e-8 * expect.abs().max(1.0), "{loss} vs {expect}");
    }

    #[test]
    fn gradients_reach_student_only() {
        let cfg = tiny();
        let state = DistillationState::new(&cfg, &mut Rng::new(2)).unwrap();
        let views = make_views(&patch(4), "p", &mut Rng::new(1), 2, 2, &cfg).unwrap();
        let out = state.distillation(&[views]).unwrap();
        assert_eq!(out.student_grads.len(), state.student.len());
        assert!(out.student_grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
        // The teacher tape binds constants: no gradient can exist for them.
        let mut t = Tape::new();
        let tp = state.teacher.bind(&mut t, false);
        let imgs = [&Tensor::zeros(&[16, 16, 3])];
        let l = state.net.logits(&mut t, &tp, &imgs).unwrap();
        let s = t.sum(l).unwrap();
        assert!(!t.requires_grad(s));
    }

    #[test]
    fn ema_boundaries_and_contraction() {
        let cfg = tiny();
        let mut s = DistillationState::new(&cfg, &mut Rng::new(2)).unwrap();
        for v in s.student.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x += 0.5);
        }
        let teacher0 = s.teacher.clone();
        s.momentum = 1.0;
        s.ema_update();
        assert_eq!(s.teacher, teacher0);
        s.momentum = 0.0;
        s.ema_update();
        assert_eq!(s.teacher, s.student);

        let mut dst = ParamStore::new();
        dst.add("x", Tensor::zeros(&[3]));
        let mut src = ParamStore::new();
        src.add("x", Tensor::ones(&[3]));
        ema(&mut dst, &src, 0.996);
        assert!(dst.values()[0].data().iter().all(|&v| (v - 0.004).abs() < 1e-15));

        let mut rng = Rng::new(3);
        let mut t = ParamStore::new();
        t.add("x", Tensor::randn(&[20], 1.0, &mut rng));
        let mut st = ParamStore::new();
        st.add("x", Tensor::randn(&[20], 1.0, &mut rng));
        let before = t.clone();
        ema(&mut t, &st, 0.9);
        for ((a, b), s) in t.values()[0].data().iter().zip(before.values()[0].data()).zip(st.values()[0].data()) {
            assert!(((a - s).abs() - 0.9 * (b - s).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn center_update_arithmetic_and_limit() {
        let cfg = tiny();
        let mut s = DistillationState::new(&cfg, &mut Rng::new(2)).unwrap();
        let ones = Tensor::ones(&[4, cfg.out_dim]);
        s.center_update(&ones).unwrap();
        assert!(s.center.data().iter().all(|&c| (c - 0.1).abs() < 1e-15));
        let batch = Tensor::full(&[3, cfg.out_dim], 2.5);
        for _ in 0..400 {
            s.center_update(&batch).unwrap();
        }
        assert!(s.center.data().iter().all(|&c| (c - 2.5).abs() < 1e-12));
        assert!(s.center_update(&Tensor::ones(&[2, 3])).is_err());
    }

    #[test]
    fn teacher_is_sharper() {
        let mut rng = Rng::new(8);
        for _ in 0..1000 {
            let l = Tensor::randn(&[16], 1.0, &mut rng);
            let pt = softmax_temperature(&l, 0.04).unwrap();
            let ps = softmax_temperature(&l, 0.1).unwrap();
            let max = |t: &Tensor| t.data().iter().copied().fold(0.0, f64::max);
            assert!(max(&pt) >= max(&ps));
        }
    }

    #[test]
    fn one_step_reduces_loss_on_fixed_batch() {
        let cfg = tiny();
        let mut state = DistillationState::new(&cfg, &mut Rng::new(2)).unwrap();
        let views: Vec<ViewSet> =
            (0..4).map(|i| make_views(&patch(i), "p", &mut Rng::new(i), 2, 2, &cfg).unwrap()).collect();
        let before = state.distillation(&views).unwrap();
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut state.student, &before.student_grads);
        let after = state.distillation(&views).unwrap();
        assert!(after.loss < before.loss, "{} !< {}", after.loss, before.loss);
    }

    #[test]
    fn embeddings_deterministic_with_fixed_width() {
        let cfg = tiny();
        let state = DistillationState::new(&cfg, &mut Rng::new(2)).unwrap();
        let ex = state.extractor();
        let a = ex.extract_embedding(&patch(1)).unwrap();
        let b = ex.extract_embedding(&patch(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.width(), 8);
        assert!(matches!(ex.extract_embedding(&Tensor::zeros(&[8, 8, 3])), Err(Error::Dimension(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let mut a = DistillationState::new(&cfg, &mut Rng::new(2)).unwrap();
        a.center = Tensor::full(&[cfg.out_dim], 0.3);
        let mut b = DistillationState::new(&cfg, &mut Rng::new(99)).unwrap();
        b.load_checkpoint(&a.to_checkpoint()).unwrap();
        assert_eq!(a.teacher, b.teacher);
        assert_eq!(a.student, b.student);
        assert_eq!(a.center, b.center);
    }
}
