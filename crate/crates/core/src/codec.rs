//! Convolutional VAE mapping patches to a downsampled latent grid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{dim_err, param_err, Error, Result};
use crate::nn::{stack, Bound, Builder, Conv2d, ParamStore};
use crate::optim::{AdamW, Optimizer};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub image_side: usize,
    pub channels: usize,
    /// One stride-2 block per entry; the scale factor is `2^len`.
    pub widths: Vec<usize>,
    pub latent_channels: usize,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            channels: 3,
            widths: vec![32, 64],
            latent_channels: 4,
            kl_weight: 1e-4,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

impl VaeConfig {
    pub fn scale_factor(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn latent_side(&self) -> usize {
        self.image_side / self.scale_factor()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_side(), self.latent_side(), self.latent_channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.latent_channels == 0 {
            return Err(param_err!("codec widths and latent channels must be positive"));
        }
        if !self.image_side.is_multiple_of(self.scale_factor()) {
            return Err(dim_err!("image side {} not divisible by f={}", self.image_side, self.scale_factor()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(param_err!("KL weight must be non-negative"));
        }
        Ok(())
    }
}

/// Latent grid of one patch, `h×w×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub data: Tensor,
    pub scale_factor: usize,
}

impl LatentTensor {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// `x + conv(gelu(conv(gelu(x))))`.
#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(b: &mut Builder, name: &str, width: usize) -> Self {
        b.scoped(name, |b| ResBlock { a: Conv2d::new(b, "a", width, width, 3, 1), b: Conv2d::new(b, "b", width, width, 3, 1) })
    }

    fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = t.gelu(x)?;
        let h = self.a.forward(t, p, h)?;
        let h = t.gelu(h)?;
        let h = self.b.forward(t, p, h)?;
        t.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: VaeConfig,
    stem: Conv2d,
    down: Vec<Conv2d>,
    enc_res: ResBlock,
    moments: Conv2d,
    dec_in: Conv2d,
    dec_res: ResBlock,
    up: Vec<Conv2d>,
    out: Conv2d,
    pub params: ParamStore,
    /// Global std of mean latents over the training set; set after training.
    pub latent_std: Option<f64>,
}

impl Codec {
    pub fn new(config: &VaeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, rng);
        let w = &config.widths;
        let top = *w.last().expect("validated non-empty");
        let d = config.latent_channels;
        let stem = Conv2d::new(&mut b, "enc.stem", config.channels, w[0], 3, 1);
        let down = (0..w.len())
            .map(|i| Conv2d::new(&mut b, &format!("enc.down{i}"), if i == 0 { w[0] } else { w[i - 1] }, w[i], 3, 2))
            .collect();
        let enc_res = ResBlock::new(&mut b, "enc.res", top);
        let moments = Conv2d::new(&mut b, "enc.moments", top, 2 * d, 1, 1);
        let dec_in = Conv2d::new(&mut b, "dec.in", d, top, 3, 1);
        let dec_res = ResBlock::new(&mut b, "dec.res", top);
        let up = (0..w.len())
            .rev()
            .map(|i| Conv2d::new(&mut b, &format!("dec.up{i}"), w[i], if i == 0 { w[0] } else { w[i - 1] }, 3, 1))
            .collect();
        let out = Conv2d::new(&mut b, "dec.out", w[0], config.channels, 3, 1);
        Ok(Self {
            config: config.clone(),
            stem,
            down,
            enc_res,
            moments,
            dec_in,
            dec_res,
            up,
            out,
            params,
            latent_std: None,
        })
    }

    /// Mean and log-variance latents for a `B×H×W×C` batch.
    pub fn encode_moments(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut h = self.stem.forward(t, p, x)?;
        for conv in &self.down {
            h = t.gelu(h)?;
            h = conv.forward(t, p, h)?;
        }
        h = self.enc_res.forward(t, p, h)?;
        h = t.gelu(h)?;
        let m = self.moments.forward(t, p, h)?;
        let d = self.config.latent_channels;
        Ok((t.slice_cols(m, 0, d)?, t.slice_cols(m, d, d)?))
    }

    /// Reconstruction in `[0, 1]` for a `B×h×w×d` latent batch.
    pub fn decode_var(&self, t: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let mut h = self.dec_in.forward(t, p, z)?;
        h = self.dec_res.forward(t, p, h)?;
        for conv in &self.up {
            h = t.gelu(h)?;
            h = t.upsample2x(h)?;
            h = conv.forward(t, p, h)?;
        }
        h = t.gelu(h)?;
        let h = self.out.forward(t, p, h)?;
        t.sigmoid(h)
    }

    fn check_patch(&self, patch: &Tensor) -> Result<()> {
        let &[h, w, c] = patch.shape() else {
            return Err(dim_err!("expected H×W×C patch, got {:?}", patch.shape()));
        };
        let f = self.config.scale_factor();
        if h % f != 0 || w % f != 0 {
            return Err(dim_err!("patch {h}×{w} not divisible by f={f}"));
        }
        if c != self.config.channels {
            return Err(dim_err!("patch has {c} channels, codec expects {}", self.config.channels));
        }
        Ok(())
    }

    /// Mean latent, or a reparameterized sample when `sample` is set.
    pub fn encode(&self, patch: &Tensor, rng: &mut Rng, sample: bool) -> Result<LatentTensor> {
        self.check_patch(patch)?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let x = t.constant(patch.clone().reshape(&[1, patch.shape()[0], patch.shape()[1], patch.shape()[2]])?);
        let (mu, logvar) = self.encode_moments(&mut t, &p, x)?;
        let mut z = t.value(mu).clone();
        if sample {
            let lv = t.value(logvar).data();
            for (zi, &l) in z.data_mut().iter_mut().zip(lv) {
                *zi += (0.5 * l).exp() * rng.normal();
            }
        }
        let s = z.shape()[1..].to_vec();
        Ok(LatentTensor { data: z.reshape(&s)?, scale_factor: self.config.scale_factor() })
    }

    /// Mean latents for many patches.
    pub fn encode_means(&self, patches: &[Tensor]) -> Result<Vec<LatentTensor>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(64) {
            for p in chunk {
                self.check_patch(p)?;
            }
            let batch = stack(&chunk.iter().collect::<Vec<_>>())?;
            let mut t = Tape::new();
            let p = self.params.bind(&mut t, false);
            let x = t.constant(batch);
            let (mu, _) = self.encode_moments(&mut t, &p, x)?;
            let per = t.value(mu).len() / chunk.len();
            let shape = &t.value(mu).shape()[1..];
            for z in t.value(mu).data().chunks(per) {
                out.push(LatentTensor {
                    data: Tensor::new(shape, z.to_vec())?,
                    scale_factor: self.config.scale_factor(),
                });
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<Tensor> {
        Ok(self.decode_batch(std::slice::from_ref(&z.data))?.remove(0))
    }

    pub fn decode_batch(&self, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        let expect = self.config.latent_shape();
        if let Some(bad) = latents.iter().find(|z| z.shape() != expect) {
            return Err(dim_err!("latent shape {:?}, codec expects {expect:?}", bad.shape()));
        }
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(64) {
            let mut t = Tape::new();
            let p = self.params.bind(&mut t, false);
            let z = t.constant(stack(&chunk.iter().collect::<Vec<_>>())?);
            let x = self.decode_var(&mut t, &p, z)?;
            let shape = &t.value(x).shape()[1..];
            let per = t.value(x).len() / chunk.len();
            for img in t.value(x).data().chunks(per) {
                out.push(Tensor::new(shape, img.to_vec())?);
            }
        }
        Ok(out)
    }

    /// ELBO surrogate on a batch: per-pixel MSE plus weighted KL (summed over
    /// latent elements, averaged over the batch). Returns `(loss, mse, kl)`.
    pub fn loss(&self, t: &mut Tape, p: &Bound, batch: &Tensor, rng: &mut Rng) -> Result<(Var, f64, f64)> {
        let n = batch.shape()[0] as f64;
        let x = t.constant(batch.clone());
        let (mu, logvar) = self.encode_moments(t, p, x)?;
        let half = t.scale(logvar, 0.5)?;
        let sigma = t.exp(half)?;
        let eps = t.constant(Tensor::new(t.shape(mu), rng.normal_vec(t.value(mu).len()))?);
        let noise = t.mul(sigma, eps)?;
        let z = t.add(mu, noise)?;
        let recon = self.decode_var(t, p, z)?;
        let diff = t.sub(recon, x)?;
        let sq = t.mul(diff, diff)?;
        let mse = t.mean(sq)?;

        let mu2 = t.mul(mu, mu)?;
        let var = t.exp(logvar)?;
        let a = t.add(mu2, var)?;
        let b = t.sub(a, logvar)?;
        let s = t.sum(b)?;
        let count = t.value(mu).len() as f64;
        let offset = t.constant(Tensor::scalar(count));
        let s = t.sub(s, offset)?;
        let kl = t.scale(s, 0.5 / n)?;
        let weighted = t.scale(kl, self.config.kl_weight)?;
        let loss = t.add(mse, weighted)?;
        Ok((loss, t.value(mse).item(), t.value(kl).item()))
    }

    /// Scale a raw latent into the unit-variance space diffusion runs in.
    pub fn normalize(&self, z: &LatentTensor) -> Result<Tensor> {
        let s = self.std()?;
        Ok(z.data.map(|v| v / s))
    }

    pub fn denormalize(&self, z: &Tensor) -> Result<LatentTensor> {
        let s = self.std()?;
        Ok(LatentTensor { data: z.map(|v| v * s), scale_factor: self.config.scale_factor() })
    }

    fn std(&self) -> Result<f64> {
        self.latent_std.ok_or_else(|| Error::State("codec has no latent statistics; train or load it first".into()))
    }

    /// Set the latent scale from the mean latents of `patches`.
    pub fn fit_latent_std(&mut self, patches: &[Tensor]) -> Result<f64> {
        let lat = self.encode_means(patches)?;
        let values: Vec<f64> = lat.iter().flat_map(|z| z.data.data().iter().copied()).collect();
        let std = population_std(&values);
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::NonFinite("latent std"));
        }
        self.latent_std = Some(std);
        Ok(std)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.params.to_checkpoint();
        ck.push("latent_stats", Tensor::scalar(self.std()?));
        Ok(ck)
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut params = ck.clone();
        params.records.retain(|(n, _)| n != "latent_stats");
        self.params.load_checkpoint(&params)?;
        self.latent_std = Some(ck.scalar("latent_stats")?);
        Ok(())
    }
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `½ Σ (μ² + σ² − 1 − log σ²)` for a diagonal Gaussian against `N(0, I)`.
pub fn kl_to_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub kl: f64,
}

/// Train the codec and fit its latent scale on the same patches.
pub fn train_vae(cfg: &VaeConfig, patches: &[Tensor], rng: &Rng, mut on_epoch: impl FnMut(&VaeEpoch)) -> Result<Codec> {
    if patches.is_empty() {
        return Err(Error::Data("no patches to train the codec on".into()));
    }
    let mut codec = Codec::new(cfg, &mut rng.fork(0))?;
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut order_rng = rng.fork(1);
    let mut noise_rng = rng.fork(2);
    for epoch in 1..=cfg.epochs {
        let order = order_rng.permutation(patches.len());
        let (mut loss_sum, mut mse_sum, mut kl_sum, mut n) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = stack(&chunk.iter().map(|&i| &patches[i]).collect::<Vec<_>>())?;
            let mut t = Tape::new();
            let p = codec.params.bind(&mut t, true);
            let (loss, mse, kl) = codec.loss(&mut t, &p, &batch, &mut noise_rng)?;
            t.backward(loss)?;
            let grads = codec.params.grads(&t, &p);
            opt.step(&mut codec.params, &grads);
            let w = chunk.len() as f64;
            loss_sum += t.value(loss).item() * w;
            mse_sum += mse * w;
            kl_sum += kl * w;
            n += w;
        }
        on_epoch(&VaeEpoch { epoch, loss: loss_sum / n, mse: mse_sum / n, kl: kl_sum / n });
    }
    codec.fit_latent_std(patches)?;
    Ok(codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn small() -> VaeConfig {
        VaeConfig { image_side: 16, widths: vec![4, 6], epochs: 6, batch_size: 8, lr: 3e-3, ..VaeConfig::default() }
    }

    fn blob(seed: u64, side: usize) -> Tensor {
        let mut r = Rng::new(seed);
        let (cy, cx, rad) = (r.uniform_range(4.0, 12.0), r.uniform_range(4.0, 12.0), r.uniform_range(2.0, 5.0));
        let tint = [r.uniform(), r.uniform(), r.uniform()];
        let mut d = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                let inside = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() < rad;
                for t in tint {
                    d.push(if inside { t } else { 0.9 });
                }
            }
        }
        Tensor::new(&[side, side, 3], d).unwrap()
    }

    #[test]
    fn latent_shape_for_32_f4_d4() {
        let c = Codec::new(&VaeConfig::default(), &mut Rng::new(1)).unwrap();
        let z = c.encode(&Tensor::full(&[32, 32, 3], 0.5), &mut Rng::new(1), false).unwrap();
        assert_eq!(z.shape(), [8, 8, 4]);
        assert_eq!(z.scale_factor, 4);
        let x = c.decode(&z).unwrap();
        assert_eq!(x.shape(), [32, 32, 3]);
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shape_round_trip_other_sizes() {
        let c = Codec::new(&small(), &mut Rng::new(1)).unwrap();
        for side in [8, 16, 24] {
            let z = c.encode(&Tensor::full(&[side, side, 3], 0.2), &mut Rng::new(1), false).unwrap();
            assert_eq!(z.shape(), [side / 4, side / 4, 4]);
        }
    }

    #[test]
    fn indivisible_and_mismatched_shapes_rejected() {
        let c = Codec::new(&small(), &mut Rng::new(1)).unwrap();
        assert!(matches!(c.encode(&Tensor::zeros(&[18, 18, 3]), &mut Rng::new(1), false), Err(Error::Dimension(_))));
        let z = LatentTensor { data: Tensor::zeros(&[3, 3, 4]), scale_factor: 4 };
        assert!(matches!(c.decode(&z), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_encoding_is_deterministic_and_sampling_is_not() {
        let c = Codec::new(&small(), &mut Rng::new(1)).unwrap();
        let x = blob(1, 16);
        let a = c.encode(&x, &mut Rng::new(1), false).unwrap();
        let b = c.encode(&x, &mut Rng::new(2), false).unwrap();
        assert_eq!(a, b);
        let s = c.encode(&x, &mut Rng::new(1), true).unwrap();
        assert_ne!(a, s);
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_to_standard_normal(&[0.0; 5], &[0.0; 5]), 0.0);
        let m = [0.5, -1.0, 2.0];
        assert!((kl_to_standard_normal(&m, &[0.0; 3]) - 0.5 * (0.25 + 1.0 + 4.0)).abs() < 1e-15);
        let mut r = Rng::new(4);
        for _ in 0..1000 {
            let mu: Vec<f64> = (0..4).map(|_| r.normal() * 2.0).collect();
            let lv: Vec<f64> = (0..4).map(|_| r.normal() * 3.0).collect();
            assert!(kl_to_standard_normal(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut r = Rng::new(11);
        let mu = [0.3f64, -0.7];
        let lv = [-0.4f64, 0.6];
        let n = 400_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for k in 0..2 {
                let s = (0.5 * lv[k]).exp();
                let z = mu[k] + s * r.normal();
                // log q(z) − log p(z)
                acc += -0.5 * ((z - mu[k]) / s).powi(2) - 0.5 * lv[k] + 0.5 * z * z;
            }
        }
        let mc = acc / n as f64;
        let exact = kl_to_standard_normal(&mu, &lv);
        assert!((mc - exact).abs() < 0.02 * exact, "{mc} vs {exact}");
    }

    #[test]
    fn loss_kl_term_matches_closed_form() {
        let c = Codec::new(&small(), &mut Rng::new(3)).unwrap();
        let batch = stack(&[&blob(1, 16), &blob(2, 16)]).unwrap();
        let mut t = Tape::new();
        let p = c.params.bind(&mut t, false);
        let (_, _, kl) = c.loss(&mut t, &p, &batch, &mut Rng::new(1)).unwrap();
        let mut t2 = Tape::new();
        let p2 = c.params.bind(&mut t2, false);
        let x = t2.constant(batch);
        let (mu, lv) = c.encode_moments(&mut t2, &p2, x).unwrap();
        let expect = kl_to_standard_normal(t2.value(mu).data(), t2.value(lv).data()) / 2.0;
        assert!((kl - expect).abs() < 1e-10 * expect.max(1.0));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = VaeConfig { image_side: 8, widths: vec![2, 3], latent_channels: 2, kl_weight: 0.1, ..small() };
        let c = Codec::new(&cfg, &mut Rng::new(5)).unwrap();
        let batch = stack(&[&Tensor::randn(&[8, 8, 3], 0.3, &mut Rng::new(2)).map(|v| v.abs().min(1.0))]).unwrap();
        let values: Vec<Tensor> = c.params.values().to_vec();
        let report = gradcheck::check(&values, 1e-5, 6, |t, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(c.loss(t, &p, &batch, &mut Rng::new(9))?.0)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn training_reduces_loss_and_sets_std() {
        let cfg = small();
        let patches: Vec<Tensor> = (0..32).map(|i| blob(i, 16)).collect();
        let mut losses = Vec::new();
        let codec = train_vae(&cfg, &patches, &Rng::new(1), |e| losses.push(e.loss)).unwrap();
        assert_eq!(losses.len(), cfg.epochs);
        assert!(losses[4] < losses[0], "{losses:?}");
        let std = codec.latent_std.unwrap();
        assert!(std > 0.0);
        let z = codec.encode(&patches[0], &mut Rng::new(1), false).unwrap();
        let back = codec.denormalize(&codec.normalize(&z).unwrap()).unwrap();
        assert!(back.data.max_abs_diff(&z.data) < 1e-12);
    }

    #[test]
    fn normalization_requires_stats() {
        let c = Codec::new(&small(), &mut Rng::new(1)).unwrap();
        let z = LatentTensor { data: Tensor::zeros(&[4, 4, 4]), scale_factor: 4 };
        assert!(matches!(c.normalize(&z), Err(Error::State(_))));
    }

    #[test]
    fn checkpoint_round_trip_keeps_latent_stats() {
        let mut a = Codec::new(&small(), &mut Rng::new(1)).unwrap();
        a.latent_std = Some(0.37);
        let mut b = Codec::new(&small(), &mut Rng::new(2)).unwrap();
        b.load_checkpoint(&a.to_checkpoint().unwrap()).unwrap();
        assert_eq!(b.latent_std, Some(0.37));
        assert_eq!(a.params, b.params);
    }
}
