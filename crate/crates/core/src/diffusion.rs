//! Conditional latent diffusion: noise schedule, cross-attention U-Net,
//! noise-prediction loss and guided DDIM sampling.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::codec::Codec;
use crate::dino::Embedding;
use crate::error::{dim_err, param_err, Error, Result};
use crate::nn::{stack, timestep_embedding, Bound, Builder, Conv2d, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::optim::{clip_grad_norm, AdamW, Optimizer};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Variance tables indexed `1..=T`; index 0 is the noise-free state.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β from `beta_start` to `beta_end` inclusive over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(param_err!("invalid schedule: T={steps}, β {beta_start}→{beta_end}"));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(param_err!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`; returns `(z_t, ε)`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        self.check_t(t)?;
        let eps = Tensor::new(z0.shape(), rng.normal_vec(z0.len()))?;
        Ok((self.noise_with(z0, t, &eps)?, eps))
    }

    /// `q_sample` with a caller-supplied ε.
    pub fn noise_with(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.zip_map(eps, |z, e| a * z + b * e)
    }

    /// Evenly spaced decreasing timesteps, from `T` down to 1.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let big_t = self.steps();
        if steps == 0 || steps > big_t {
            return Err(param_err!("DDIM steps {steps} outside 1..={big_t}"));
        }
        if steps == 1 {
            return Ok(vec![big_t]);
        }
        let span = (big_t - 1) as f64 / (steps - 1) as f64;
        Ok((0..steps).rev().map(|i| 1 + (i as f64 * span).round() as usize).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondKind {
    #[default]
    Ssl,
    Class,
}

impl CondKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CondKind::Ssl => "ssl",
            CondKind::Class => "class",
        }
    }
}

/// One conditioning token source.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    Ssl(Embedding),
    Class(usize),
    /// The learned unconditional token.
    Null,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Channel widths at full and half latent resolution.
    pub widths: (usize, usize),
    pub heads: usize,
    pub time_dim: usize,
    pub drop_prob: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    // Derived from the codec, the embedding width and the experiment's
    // augmentation kind rather than configured directly.
    #[serde(skip, default = "derived::latent_side")]
    pub latent_side: usize,
    #[serde(skip, default = "derived::latent_channels")]
    pub latent_channels: usize,
    #[serde(skip)]
    pub cond: CondKind,
    /// Width of the conditioning token (embedding width in SSL mode).
    #[serde(skip, default = "derived::cond_width")]
    pub cond_width: usize,
    #[serde(skip, default = "derived::num_classes")]
    pub num_classes: usize,
}

mod derived {
    pub fn latent_side() -> usize {
        8
    }
    pub fn latent_channels() -> usize {
        4
    }
    pub fn cond_width() -> usize {
        64
    }
    pub fn num_classes() -> usize {
        2
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            latent_side: derived::latent_side(),
            latent_channels: derived::latent_channels(),
            widths: (32, 64),
            heads: 4,
            time_dim: 32,
            cond: CondKind::Ssl,
            cond_width: derived::cond_width(),
            num_classes: derived::num_classes(),
            drop_prob: 0.1,
            epochs: 10,
            batch_size: 32,
            lr: 5e-4,
        }
    }
}

impl DiffusionConfig {
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_side, self.latent_side, self.latent_channels]
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let (c1, c2) = self.widths;
        if !self.latent_side.is_multiple_of(2) || self.latent_side == 0 {
            return Err(dim_err!("latent side {} must be even", self.latent_side));
        }
        if self.heads == 0 || c1 % self.heads != 0 || c2 % self.heads != 0 {
            return Err(dim_err!("widths {c1}/{c2} not divisible by {} heads", self.heads));
        }
        if !self.time_dim.is_multiple_of(2) || self.cond_width == 0 {
            return Err(dim_err!("time dim must be even and cond width positive"));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(param_err!("drop probability {} outside [0, 1]", self.drop_prob));
        }
        Ok(())
    }
}

/// Anything that predicts the added noise for a batch of noisy latents.
pub trait EpsPredictor {
    /// `zt` is `B×h×w×d`; one timestep and conditioning per item.
    fn predict(&self, zt: &Tensor, timesteps: &[usize], conds: &[Conditioning]) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: LayerNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, time_dim: usize) -> Self {
        b.scoped(name, |b| ResBlock {
            norm1: LayerNorm::new(b, "n1", cin),
            conv1: Conv2d::new(b, "c1", cin, cout, 3, 1),
            time: Linear::new(b, "t", time_dim, cout),
            norm2: LayerNorm::new(b, "n2", cout),
            conv2: Conv2d::new(b, "c2", cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(b, "skip", cin, cout, 1, 1)),
        })
    }

    fn forward(&self, t: &mut Tape, p: &Bound, x: Var, temb: Var) -> Result<Var> {
        let shape = t.shape(x).to_vec();
        let pixels = shape[1] * shape[2];
        let h = self.norm1.forward(t, p, x)?;
        let h = t.gelu(h)?;
        let h = self.conv1.forward(t, p, h)?;
        let out_shape = t.shape(h).to_vec();
        let e = self.time.forward(t, p, temb)?;
        let e = t.repeat_rows(e, pixels)?;
        let e = t.reshape(e, &out_shape)?;
        let h = t.add(h, e)?;
        let h = self.norm2.forward(t, p, h)?;
        let h = t.gelu(h)?;
        let h = self.conv2.forward(t, p, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(t, p, x)?,
            None => x,
        };
        t.add(skip, h)
    }
}

/// Pre-norm cross-attention from latent pixels to the conditioning token.
#[derive(Clone, Debug)]
struct CrossAttn {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossAttn {
    fn new(b: &mut Builder, name: &str, width: usize, cond_width: usize, heads: usize) -> Self {
        b.scoped(name, |b| CrossAttn {
            norm: LayerNorm::new(b, "norm", width),
            attn: MultiHeadAttention::new(b, "attn", width, cond_width, heads),
        })
    }

    fn forward(&self, t: &mut Tape, p: &Bound, x: Var, context: Var, batch: usize) -> Result<Var> {
        let shape = t.shape(x).to_vec();
        let c = shape[3];
        let tokens = t.reshape(x, &[batch * shape[1] * shape[2], c])?;
        let n = self.norm.forward(t, p, tokens)?;
        let a = self.attn.forward(t, p, n, context, batch)?;
        let out = t.add(tokens, a)?;
        t.reshape(out, &shape)
    }
}

/// Two-resolution U-Net noise predictor.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DiffusionConfig,
    time1: Linear,
    time2: Linear,
    null_token: ParamId,
    class_table: Option<ParamId>,
    conv_in: Conv2d,
    res_hi: ResBlock,
    down: Conv2d,
    res_lo: ResBlock,
    attn_lo: CrossAttn,
    res_mid: ResBlock,
    up: Conv2d,
    res_up: ResBlock,
    attn_hi: CrossAttn,
    out_norm: LayerNorm,
    conv_out: Conv2d,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn new(config: &DiffusionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, rng);
        let (c1, c2) = config.widths;
        let (td, d, cw, h) = (config.time_dim, config.latent_channels, config.cond_width, config.heads);
        let time1 = Linear::new(&mut b, "time1", td, td);
        let time2 = Linear::new(&mut b, "time2", td, td);
        let null_token = b.randn("null_token", &[1, cw], 1.0);
        let class_table = (config.cond == CondKind::Class).then(|| b.randn("class_table", &[config.num_classes, cw], 1.0));
        Ok(Self {
            time1,
            time2,
            null_token,
            class_table,
            conv_in: Conv2d::new(&mut b, "conv_in", d, c1, 3, 1),
            res_hi: ResBlock::new(&mut b, "res_hi", c1, c1, td),
            down: Conv2d::new(&mut b, "down", c1, c2, 3, 2),
            res_lo: ResBlock::new(&mut b, "res_lo", c2, c2, td),
            attn_lo: CrossAttn::new(&mut b, "attn_lo", c2, cw, h),
            res_mid: ResBlock::new(&mut b, "res_mid", c2, c2, td),
            up: Conv2d::new(&mut b, "up", c2, c1, 3, 1),
            res_up: ResBlock::new(&mut b, "res_up", 2 * c1, c1, td),
            attn_hi: CrossAttn::new(&mut b, "attn_hi", c1, cw, h),
            out_norm: LayerNorm::new(&mut b, "out_norm", c1),
            conv_out: Conv2d::new(&mut b, "conv_out", c1, d, 3, 1),
            config: config.clone(),
            params,
        })
    }

    /// Conditioning tokens, one row per item.
    fn context(&self, t: &mut Tape, p: &Bound, conds: &[Conditioning]) -> Result<Var> {
        let cw = self.config.cond_width;
        let mut table = p[self.null_token];
        let mut class_rows = 0;
        if let Some(ct) = self.class_table {
            table = t.concat_rows(table, p[ct])?;
            class_rows = self.config.num_classes;
        }
        let mut ssl = Vec::new();
        let mut index = Vec::with_capacity(conds.len());
        for c in conds {
            index.push(match c {
                Conditioning::Null => 0,
                Conditioning::Class(k) => {
                    if self.config.cond != CondKind::Class {
                        return Err(param_err!("class conditioning given to an SSL-conditioned denoiser"));
                    }
                    if *k >= class_rows {
                        return Err(param_err!("class {k} outside 0..{class_rows}"));
                    }
                    1 + k
                }
                Conditioning::Ssl(e) => {
                    if self.config.cond != CondKind::Ssl {
                        return Err(param_err!("embedding conditioning given to a class-conditioned denoiser"));
                    }
                    if e.width() != cw {
                        return Err(dim_err!("embedding width {} vs conditioning width {cw}", e.width()));
                    }
                    ssl.extend_from_slice(e.as_slice());
                    1 + class_rows + ssl.len() / cw - 1
                }
            });
        }
        if !ssl.is_empty() {
            let rows = t.constant(Tensor::new(&[ssl.len() / cw, cw], ssl)?);
            table = t.concat_rows(table, rows)?;
        }
        t.gather_rows(table, &index)
    }

    /// Noise prediction for a `B×h×w×d` batch.
    pub fn forward(&self, t: &mut Tape, p: &Bound, zt: Var, timesteps: &[usize], conds: &[Conditioning]) -> Result<Var> {
        let shape = t.shape(zt).to_vec();
        if shape.len() != 4 || shape[1..] != self.config.latent_shape() {
            return Err(dim_err!("latent batch {shape:?}, denoiser expects B×{:?}", self.config.latent_shape()));
        }
        let batch = shape[0];
        if timesteps.len() != batch || conds.len() != batch {
            return Err(dim_err!("{batch} latents, {} timesteps, {} conditions", timesteps.len(), conds.len()));
        }
        let context = self.context(t, p, conds)?;
        let temb = t.constant(timestep_embedding(timesteps, self.config.time_dim)?);
        let temb = self.time1.forward(t, p, temb)?;
        let temb = t.gelu(temb)?;
        let temb = self.time2.forward(t, p, temb)?;
        let temb = t.gelu(temb)?;

        let h = self.conv_in.forward(t, p, zt)?;
        let skip = self.res_hi.forward(t, p, h, temb)?;
        let h = self.down.forward(t, p, skip)?;
        let h = self.res_lo.forward(t, p, h, temb)?;
        let h = self.attn_lo.forward(t, p, h, context, batch)?;
        let h = self.res_mid.forward(t, p, h, temb)?;
        let h = t.upsample2x(h)?;
        let h = self.up.forward(t, p, h)?;
        let h = t.concat_cols(h, skip)?;
        let h = self.res_up.forward(t, p, h, temb)?;
        let h = self.attn_hi.forward(t, p, h, context, batch)?;
        let h = self.out_norm.forward(t, p, h)?;
        let h = t.gelu(h)?;
        self.conv_out.forward(t, p, h)
    }

    /// Single-latent noise prediction.
    pub fn denoise_predict(&self, zt: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
        let batch = stack(&[zt])?;
        let out = self.predict(&batch, &[t], std::slice::from_ref(cond))?;
        out.reshape(zt.shape())
    }

    /// Mean squared noise-prediction error on a prepared draw.
    pub fn loss(&self, t: &mut Tape, p: &Bound, draw: &LdmDraw) -> Result<Var> {
        let zt = t.constant(draw.noisy.clone());
        let pred = self.forward(t, p, zt, &draw.timesteps, &draw.conds)?;
        let eps = t.constant(draw.noise.clone());
        let diff = t.sub(pred, eps)?;
        let sq = t.mul(diff, diff)?;
        t.mean(sq)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint()
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        self.params.load_checkpoint(ck)
    }
}

impl EpsPredictor for Denoiser {
    fn predict(&self, zt: &Tensor, timesteps: &[usize], conds: &[Conditioning]) -> Result<Tensor> {
        let batch = zt.shape()[0];
        let per = zt.len() / batch.max(1);
        let mut out = Vec::with_capacity(zt.len());
        for start in (0..batch).step_by(64) {
            let end = (start + 64).min(batch);
            let mut shape = zt.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, zt.data()[start * per..end * per].to_vec())?;
            let mut t = Tape::new();
            let p = self.params.bind(&mut t, false);
            let z = t.constant(chunk);
            let y = self.forward(&mut t, &p, z, &timesteps[start..end], &conds[start..end])?;
            out.extend_from_slice(t.value(y).data());
        }
        Tensor::new(zt.shape(), out)
    }
}

/// One training draw: timesteps, noised latents, the noise, and the
/// conditioning after dropout.
#[derive(Clone, Debug)]
pub struct LdmDraw {
    pub timesteps: Vec<usize>,
    pub noisy: Tensor,
    pub noise: Tensor,
    pub conds: Vec<Conditioning>,
    pub dropped: usize,
}

/// Sample `t ~ U{1..T}`, noise each latent, and swap conditioning for the
/// null token with probability `drop_prob`.
pub fn ldm_draw(
    schedule: &NoiseSchedule,
    z0: &[Tensor],
    conds: &[Conditioning],
    rng: &mut Rng,
    drop_prob: f64,
) -> Result<LdmDraw> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(param_err!("drop probability {drop_prob} outside [0, 1]"));
    }
    if z0.is_empty() || z0.len() != conds.len() {
        return Err(dim_err!("{} latents vs {} conditions", z0.len(), conds.len()));
    }
    let mut timesteps = Vec::with_capacity(z0.len());
    let mut noisy = Vec::with_capacity(z0.len());
    let mut noise = Vec::with_capacity(z0.len());
    let mut out_conds = Vec::with_capacity(z0.len());
    let mut dropped = 0;
    for (z, c) in z0.iter().zip(conds) {
        let t = 1 + rng.below(schedule.steps());
        let drop = rng.bernoulli(drop_prob);
        let (zt, eps) = schedule.q_sample(z, t, rng)?;
        timesteps.push(t);
        noisy.push(zt);
        noise.push(eps);
        if drop {
            dropped += 1;
            out_conds.push(Conditioning::Null);
        } else {
            out_conds.push(c.clone());
        }
    }
    Ok(LdmDraw {
        timesteps,
        noisy: stack(&noisy.iter().collect::<Vec<_>>())?,
        noise: stack(&noise.iter().collect::<Vec<_>>())?,
        conds: out_conds,
        dropped,
    })
}

/// Mean squared error between the drawn noise and `model`'s prediction.
pub fn ldm_loss(
    model: &impl EpsPredictor,
    schedule: &NoiseSchedule,
    z0: &[Tensor],
    conds: &[Conditioning],
    rng: &mut Rng,
    drop_prob: f64,
) -> Result<f64> {
    let draw = ldm_draw(schedule, z0, conds, rng, drop_prob)?;
    let pred = model.predict(&draw.noisy, &draw.timesteps, &draw.conds)?;
    let sq = pred.zip_map(&draw.noise, |a, b| (a - b) * (a - b))?;
    Ok(sq.mean())
}

/// `ε_u + s·(ε_c − ε_u)`, evaluated as `s·ε_c + (1−s)·ε_u` so that
/// `s = 0` and `s = 1` return an input exactly.
pub fn cfg_mix(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, |u, c| scale * c + (1.0 - scale) * u)
}

/// Deterministic DDIM (η = 0) with classifier-free guidance at every step.
/// Returns one latent per conditioning, each `h×w×d`.
pub fn ddim_sample(
    model: &impl EpsPredictor,
    schedule: &NoiseSchedule,
    conds: &[Conditioning],
    latent_shape: &[usize],
    steps: usize,
    guidance_scale: f64,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    let seq = schedule.ddim_timesteps(steps)?;
    let n = conds.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let per: usize = latent_shape.iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(latent_shape);
    let mut z = Tensor::new(&shape, rng.normal_vec(n * per))?;
    let nulls = vec![Conditioning::Null; n];
    let unconditional = conds.iter().all(|c| *c == Conditioning::Null);
    for (i, &t) in seq.iter().enumerate() {
        let t_next = seq.get(i + 1).copied().unwrap_or(0);
        let ts = vec![t; n];
        let eps = if unconditional {
            model.predict(&z, &ts, conds)?
        } else {
            let both = Tensor::new(&[&[2 * n][..], latent_shape].concat(), [z.data(), z.data()].concat())?;
            let all_conds: Vec<Conditioning> = conds.iter().chain(&nulls).cloned().collect();
            let pred = model.predict(&both, &[ts.clone(), ts].concat(), &all_conds)?;
            let (c, u) = pred.data().split_at(n * per);
            cfg_mix(&Tensor::new(&shape, c.to_vec())?, &Tensor::new(&shape, u.to_vec())?, guidance_scale)?
        };
        let (ab, ab_next) = (schedule.alpha_bar(t), schedule.alpha_bar(t_next));
        let data = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&zt, &e)| {
                let x0 = (zt - (1.0 - ab).sqrt() * e) / ab.sqrt();
                ab_next.sqrt() * x0 + (1.0 - ab_next).sqrt() * e
            })
            .collect();
        z = Tensor::new(&shape, data)?;
        if !z.is_finite() {
            return Err(Error::NonFinite("ddim step"));
        }
    }
    z.data().chunks(per).map(|c| Tensor::new(latent_shape, c.to_vec())).collect()
}

/// Trained codec + denoiser, producing pixel patches from conditioning.
pub struct Synthesizer<'a> {
    pub codec: &'a Codec,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
}

impl Synthesizer<'_> {
    /// DDIM in normalized latent space, then un-normalize and decode.
    pub fn synthesize(&self, conds: &[Conditioning], steps: usize, guidance_scale: f64, rng: &mut Rng) -> Result<Vec<Tensor>> {
        if self.codec.latent_std.is_none() {
            return Err(Error::State("codec checkpoint has no latent statistics".into()));
        }
        if self.codec.config.latent_shape() != self.denoiser.config.latent_shape() {
            return Err(dim_err!("codec and denoiser disagree on latent shape"));
        }
        let shape = self.denoiser.config.latent_shape();
        let z = ddim_sample(self.denoiser, self.schedule, conds, &shape, steps, guidance_scale, rng)?;
        let raw = z.iter().map(|z| Ok(self.codec.denormalize(z)?.data)).collect::<Result<Vec<_>>>()?;
        self.codec.decode_batch(&raw)
    }

    pub fn synthesize_patch(&self, cond: &Conditioning, steps: usize, guidance_scale: f64, rng: &mut Rng) -> Result<Tensor> {
        Ok(self.synthesize(std::slice::from_ref(cond), steps, guidance_scale, rng)?.remove(0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LdmEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub dropped_fraction: f64,
}

/// Train the denoiser on normalized latents paired with their conditioning.
pub fn train_ldm(
    cfg: &DiffusionConfig,
    latents: &[Tensor],
    conds: &[Conditioning],
    rng: &Rng,
    mut on_epoch: impl FnMut(&LdmEpoch),
) -> Result<Denoiser> {
    if latents.is_empty() || latents.len() != conds.len() {
        return Err(Error::Data(format!("{} latents vs {} conditions", latents.len(), conds.len())));
    }
    let schedule = cfg.schedule()?;
    let mut model = Denoiser::new(cfg, &mut rng.fork(0))?;
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut order_rng = rng.fork(1);
    let mut draw_rng = rng.fork(2);
    for epoch in 1..=cfg.epochs {
        let order = order_rng.permutation(latents.len());
        let (mut loss_sum, mut dropped, mut n) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let z: Vec<Tensor> = chunk.iter().map(|&i| latents[i].clone()).collect();
            let c: Vec<Conditioning> = chunk.iter().map(|&i| conds[i].clone()).collect();
            let draw = ldm_draw(&schedule, &z, &c, &mut draw_rng, cfg.drop_prob)?;
            let mut t = Tape::new();
            let p = model.params.bind(&mut t, true);
            let loss = model.loss(&mut t, &p, &draw)?;
            t.backward(loss)?;
            let mut grads = model.params.grads(&t, &p);
            clip_grad_norm(&mut grads, 1.0);
            opt.step(&mut model.params, &grads);
            loss_sum += t.value(loss).item() * chunk.len() as f64;
            dropped += draw.dropped;
            n += chunk.len();
        }
        on_epoch(&LdmEpoch { epoch, loss: loss_sum / n as f64, dropped_fraction: dropped as f64 / n as f64 });
    }
    Ok(model)
}
