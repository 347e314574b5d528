//! Acceptance suite. Every criterion runs in one sequential test so that
//! the runtime bounds are measured without competing test threads; each
//! prints one PASS/FAIL line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use duvsynth::autodiff::softmax_temperature;
use duvsynth::codec::VaeConfig;
use duvsynth::config::{Augmentation, ExperimentConfig};
use duvsynth::data::DataConfig;
use duvsynth::diffusion::{
    cfg_mix, ddim_sample, ldm_draw, make_schedule, CondKind, Conditioning, Denoiser, DiffusionConfig,
};
use duvsynth::dino::{ema, Embedding, ViewSet};
use duvsynth::eval::{aggregate_wsi, feature_stats, fid, GaussianStats, MALIGNANT};
use duvsynth::gradcheck;
use duvsynth::nn::{Bound, ParamStore};
use duvsynth::pipeline::{run_experiment, Workspace, ARMS};
use duvsynth::vit::{PatchPrediction, VitClassifier, VitConfig};
use duvsynth::{Rng, Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

/// Fixed random projection to a scalar so every output component carries
/// a distinct upstream gradient.
fn project(t: &mut Tape, x: Var, seed: u64) -> duvsynth::Result<Var> {
    let w = t.constant(rand_t(t.shape(x), seed));
    let p = t.mul(x, w)?;
    t.sum(p)
}

type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> duvsynth::Result<Var>>;

fn primitive_graphs() -> Vec<(&'static str, Vec<Tensor>, Graph)> {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[3, 4], 2);
    let r = rand_t(&[2, 4], 3);
    let c = rand_t(&[3, 2], 4);
    let target = softmax_temperature(&rand_t(&[3, 4], 5), 0.5).unwrap();
    vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.add(v[0], v[1])?; project(t, y, 9) })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; project(t, y, 9) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 9) })),
        ("scale", vec![a.clone()], Box::new(|t, v| { let y = t.scale(v[0], -1.3)?; project(t, y, 9) })),
        ("add_bias", vec![a.clone(), rand_t(&[4], 6)], Box::new(|t, v| { let y = t.add_bias(v[0], v[1])?; project(t, y, 9) })),
        ("exp", vec![a.clone()], Box::new(|t, v| { let y = t.exp(v[0])?; project(t, y, 9) })),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| { let y = t.sigmoid(v[0])?; project(t, y, 9) })),
        ("gelu", vec![a.map(|x| 2.0 * x)], Box::new(|t, v| { let y = t.gelu(v[0])?; project(t, y, 9) })),
        ("sum", vec![a.clone()], Box::new(|t, v| { let y = t.exp(v[0])?; t.sum(y) })),
        ("mean", vec![a.clone()], Box::new(|t, v| { let y = t.exp(v[0])?; t.mean(y) })),
        ("matmul", vec![a.clone(), rand_t(&[4, 5], 7)], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, 9) })),
        ("reshape", vec![a.clone()], Box::new(|t, v| { let y = t.reshape(v[0], &[2, 6])?; project(t, y, 9) })),
        (
            "layer_norm",
            vec![a.clone(), rand_t(&[4], 8), rand_t(&[4], 10)],
            Box::new(|t, v| { let y = t.layer_norm(v[0], v[1], v[2])?; project(t, y, 9) }),
        ),
        ("softmax", vec![a.clone()], Box::new(|t, v| { let y = t.softmax_temperature(v[0], 0.1)?; project(t, y, 9) })),
        ("log_softmax", vec![a.clone()], Box::new(|t, v| { let y = t.log_softmax_temperature(v[0], 0.7)?; project(t, y, 9) })),
        (
            "cross_entropy",
            vec![a.clone()],
            Box::new(move |t, v| { let p = t.softmax_temperature(v[0], 0.7)?; t.cross_entropy(&target, p) }),
        ),
        (
            "attention",
            vec![rand_t(&[6, 4], 11), rand_t(&[10, 4], 12), rand_t(&[10, 4], 13)],
            Box::new(|t, v| { let y = t.attention(v[0], v[1], v[2], 2, 2)?; project(t, y, 9) }),
        ),
        (
            "conv2d stride 1",
            vec![rand_t(&[2, 4, 4, 3], 14), Tensor::randn(&[27, 4], 0.3, &mut Rng::new(15))],
            Box::new(|t, v| { let y = t.conv2d(v[0], v[1], 3, 1)?; project(t, y, 9) }),
        ),
        (
            "conv2d stride 2",
            vec![rand_t(&[2, 4, 4, 3], 16), Tensor::randn(&[27, 4], 0.3, &mut Rng::new(17))],
            Box::new(|t, v| { let y = t.conv2d(v[0], v[1], 3, 2)?; project(t, y, 9) }),
        ),
        ("upsample2x", vec![rand_t(&[2, 3, 2, 3], 18)], Box::new(|t, v| { let y = t.upsample2x(v[0])?; project(t, y, 9) })),
        ("concat_rows", vec![a.clone(), r.clone()], Box::new(|t, v| { let y = t.concat_rows(v[0], v[1])?; project(t, y, 9) })),
        ("concat_cols", vec![a.clone(), c], Box::new(|t, v| { let y = t.concat_cols(v[0], v[1])?; project(t, y, 9) })),
        ("slice_cols", vec![a.clone()], Box::new(|t, v| { let y = t.slice_cols(v[0], 1, 2)?; project(t, y, 9) })),
        ("gather_rows", vec![a.clone()], Box::new(|t, v| { let y = t.gather_rows(v[0], &[2, 0, 2, 1])?; project(t, y, 9) })),
        ("repeat_rows", vec![r.clone()], Box::new(|t, v| { let y = t.repeat_rows(v[0], 3)?; project(t, y, 9) })),
        ("tile_rows", vec![r], Box::new(|t, v| { let y = t.tile_rows(v[0], 3)?; project(t, y, 9) })),
    ]
}

/// LN, QKV projections, attention, output projection, residual.
fn attention_block() -> (Vec<Tensor>, Graph) {
    let w = |s| Tensor::randn(&[8, 8], 0.4, &mut Rng::new(s));
    let inputs = vec![rand_t(&[8, 8], 20), w(21), w(22), w(23), w(24), Tensor::ones(&[8]), Tensor::zeros(&[8])];
    let g: Graph = Box::new(|t, v| {
        let h = t.layer_norm(v[0], v[5], v[6])?;
        let q = t.matmul(h, v[1])?;
        let k = t.matmul(h, v[2])?;
        let val = t.matmul(h, v[3])?;
        let a = t.attention(q, k, val, 2, 2)?;
        let o = t.matmul(a, v[4])?;
        let y = t.add(o, v[0])?;
        project(t, y, 25)
    });
    (inputs, g)
}

/// Residual block with timestep injection followed by cross-attention to a
/// single conditioning token, as used at each U-Net resolution.
fn unet_block() -> (Vec<Tensor>, Graph) {
    let (batch, side, cin, cout, tdim, cdim) = (2, 4, 3, 4, 5, 6);
    let s = |shape: &[usize], seed, std| Tensor::randn(shape, std, &mut Rng::new(seed));
    let inputs = vec![
        s(&[batch, side, side, cin], 30, 1.0),
        s(&[batch, tdim], 31, 1.0),
        s(&[batch, cdim], 32, 1.0),
        s(&[9 * cin, cout], 33, 0.3),
        s(&[tdim, cout], 34, 0.3),
        s(&[9 * cout, cout], 35, 0.3),
        s(&[cin, cout], 36, 0.3),
        s(&[cout, cout], 37, 0.4),
        s(&[cdim, cout], 38, 0.4),
        s(&[cdim, cout], 39, 0.4),
        s(&[cout, cout], 40, 0.4),
        Tensor::ones(&[cin]),
        Tensor::zeros(&[cin]),
        Tensor::ones(&[cout]),
        Tensor::zeros(&[cout]),
    ];
    let g: Graph = Box::new(move |t, v| {
        let pixels = side * side;
        let x = t.reshape(v[0], &[batch * pixels, cin])?;
        let h = t.layer_norm(x, v[11], v[12])?;
        let h = t.gelu(h)?;
        let h = t.reshape(h, &[batch, side, side, cin])?;
        let h = t.conv2d(h, v[3], 3, 1)?;
        let e = t.matmul(v[1], v[4])?;
        let e = t.repeat_rows(e, pixels)?;
        let e = t.reshape(e, &[batch, side, side, cout])?;
        let h = t.add(h, e)?;
        let h = t.reshape(h, &[batch * pixels, cout])?;
        let h = t.layer_norm(h, v[13], v[14])?;
        let h = t.gelu(h)?;
        let h = t.reshape(h, &[batch, side, side, cout])?;
        let h = t.conv2d(h, v[5], 3, 1)?;
        let skip = t.conv2d(v[0], v[6], 1, 1)?;
        let y = t.add(skip, h)?;
        let tokens = t.reshape(y, &[batch * pixels, cout])?;
        let q = t.matmul(tokens, v[7])?;
        let k = t.matmul(v[2], v[8])?;
        let val = t.matmul(v[2], v[9])?;
        let a = t.attention(q, k, val, batch, 2)?;
        let o = t.matmul(a, v[10])?;
        let out = t.add(tokens, o)?;
        project(t, out, 41)
    });
    (inputs, g)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut record = |name: &str, inputs: &[Tensor], g: &Graph, per_input: usize| -> Result<(), String> {
        let r = gradcheck::check(inputs, 1e-5, per_input, g).map_err(|e| format!("{name}: {e}"))?;
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, name.to_string());
        }
        ensure(r.max_rel_err < 1e-4, || format!("{name}: max rel err {:.2e} at {:?}", r.max_rel_err, r.worst))
    };
    let primitives = primitive_graphs();
    for (name, inputs, g) in &primitives {
        record(name, inputs, g, 64)?;
    }
    let (inputs, g) = attention_block();
    record("attention block", &inputs, &g, 64)?;
    let (inputs, g) = unet_block();
    record("u-net block", &inputs, &g, 64)?;

    let vit = VitConfig { image_side: 16, patch: 8, channels: 3, width: 8, depth: 1, heads: 2, mlp_ratio: 2 };
    let model = VitClassifier::new(&vit, &mut Rng::new(50)).map_err(|e| e.to_string())?;
    let mut inputs = vec![Tensor::randn(&[2 * 5, 8], 1.0, &mut Rng::new(51))];
    inputs.extend(model.params.values().iter().cloned());
    let backbone = model.backbone.clone();
    let layer: Graph = Box::new(move |t, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let y = backbone.encode(t, &p, v[0], 2)?;
        project(t, y, 52)
    });
    record("vit layer", &inputs, &layer, 24)?;

    let ldm = DiffusionConfig {
        timesteps: 50,
        latent_side: 4,
        latent_channels: 2,
        widths: (4, 6),
        heads: 2,
        time_dim: 4,
        cond: CondKind::Ssl,
        cond_width: 3,
        ..DiffusionConfig::default()
    };
    let d = Denoiser::new(&ldm, &mut Rng::new(60)).map_err(|e| e.to_string())?;
    let schedule = ldm.schedule().map_err(|e| e.to_string())?;
    let z0: Vec<Tensor> = (0..2).map(|i| rand_t(&[4, 4, 2], 61 + i)).collect();
    let conds = vec![Conditioning::Ssl(Embedding(vec![0.3, -1.0, 0.5])), Conditioning::Null];
    let draw = ldm_draw(&schedule, &z0, &conds, &mut Rng::new(63), 0.0).map_err(|e| e.to_string())?;
    let denoiser: Graph = Box::new(move |t, v| {
        let p = Bound::from_vars(v.to_vec());
        d.loss(t, &p, &draw)
    });
    let params: Vec<Tensor> = Denoiser::new(&ldm, &mut Rng::new(60)).unwrap().params.values().to_vec();
    record("full u-net loss", &params, &denoiser, 4)?;

    within(start.elapsed(), 60)?;
    Ok(format!(
        "{} primitives + 4 composites, worst {:.2e} ({}), {:.1}s",
        primitives.len(),
        worst.0,
        worst.1,
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let schedule = make_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let n = 100_000;
    let mut notes = Vec::new();
    // With 1e5 draws the standard error of the mean is √(1−ᾱ)/316; a
    // 1% relative bound on the mean at t=900 is only resolvable once
    // √ᾱ·z₀ is large against that, hence the second clean signal level.
    for z0 in [1.0, 100.0] {
        let x = Tensor::full(&[n], z0);
        for (k, t) in [100usize, 500, 900].into_iter().enumerate() {
            let mut rng = Rng::new(70 + k as u64);
            let (zt, _) = schedule.q_sample(&x, t, &mut rng).map_err(|e| e.to_string())?;
            let mean = zt.data().iter().sum::<f64>() / n as f64;
            let std = (zt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let ab = schedule.alpha_bar(t);
            let (em, es) = (ab.sqrt() * z0, (1.0 - ab).sqrt());
            ensure((std - es).abs() <= 0.01 * es, || format!("t={t}: std {std} vs {es}"))?;
            let mean_tol = if z0 == 1.0 { 0.01 * em.abs().max(es) } else { 0.01 * em.abs() };
            ensure((mean - em).abs() <= mean_tol, || format!("t={t} z0={z0}: mean {mean} vs {em}"))?;
            notes.push(format!("t{t}:{:.3}%", 100.0 * (mean - em).abs() / em.abs()));
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!("mean/std within 1% ({})", notes[3..].join(" ")))
}

/// Trace term by a second route: eigenvalues of Σa·Σb (similar to a
/// symmetric PSD matrix, so they are real and non-negative).
fn fid_oracle(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let prod = &a.cov * &b.cov;
    let eig = prod.complex_eigenvalues();
    let tr_sqrt: f64 = eig.iter().map(|z| z.re.max(0.0).sqrt()).sum();
    (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt
}

fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = Rng::new(seed);
    let m = DMatrix::from_fn(d, d, |_, _| rng.normal());
    &m * m.transpose() + DMatrix::identity(d, d) * 0.1
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(80);
    let feats: Vec<Vec<f64>> = (0..40).map(|_| rng.normal_vec(6)).collect();
    let a = feature_stats(&feats).map_err(|e| e.to_string())?;
    let self_fid = fid(&a, &a).map_err(|e| e.to_string())?;
    ensure(self_fid.abs() <= 1e-8, || format!("fid(a,a) = {self_fid}"))?;

    let m = DVector::from_vec(rng.normal_vec(6));
    let shifted = GaussianStats { mean: &a.mean + &m, cov: a.cov.clone() };
    let shift_fid = fid(&a, &shifted).map_err(|e| e.to_string())?;
    ensure((shift_fid - m.norm_squared()).abs() <= 1e-9, || format!("mean shift {shift_fid} vs {}", m.norm_squared()))?;

    let mut worst: f64 = 0.0;
    for s in 0..5 {
        let x = GaussianStats { mean: DVector::from_vec(rng.normal_vec(8)), cov: random_spd(8, 90 + s) };
        let y = GaussianStats { mean: DVector::from_vec(rng.normal_vec(8)), cov: random_spd(8, 190 + s) };
        let got = fid(&x, &y).map_err(|e| e.to_string())?;
        let want = fid_oracle(&x, &y);
        let rel = (got - want).abs() / want.abs();
        worst = worst.max(rel);
        ensure(rel <= 1e-6, || format!("spd case {s}: {got} vs oracle {want}"))?;
        let sym = fid(&y, &x).map_err(|e| e.to_string())?;
        ensure((got - sym).abs() <= 1e-9, || format!("asymmetric: {got} vs {sym}"))?;
    }
    within(start.elapsed(), 10)?;
    Ok(format!("self 0, shift exact, SPD worst rel {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = Rng::new(100);
    let c = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut rng);
    let u = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut rng);
    let err = |e: duvsynth::Error| e.to_string();
    ensure(cfg_mix(&c, &u, 0.0).map_err(err)? == u, || "s=0 is not the unconditional prediction".into())?;
    ensure(cfg_mix(&c, &u, 1.0).map_err(err)? == c, || "s=1 is not the conditional prediction".into())?;
    for _ in 0..50 {
        let s = rng.uniform_range(-3.0, 5.0);
        let plus = |a: &Tensor, b: &Tensor| a.zip_map(b, |x, y| x + y).map_err(err);
        let lhs = plus(&cfg_mix(&c, &u, s).map_err(err)?, &cfg_mix(&c, &u, 1.0 - s).map_err(err)?)?;
        let rhs = plus(&c, &u)?;
        let d = lhs.max_abs_diff(&rhs);
        ensure(d < 1e-12, || format!("affine property off by {d} at s={s}"))?;
    }

    let ldm = DiffusionConfig {
        timesteps: 100,
        latent_side: 4,
        latent_channels: 2,
        widths: (4, 6),
        heads: 2,
        time_dim: 4,
        cond: CondKind::Class,
        ..DiffusionConfig::default()
    };
    let model = Denoiser::new(&ldm, &mut Rng::new(101)).map_err(err)?;
    let schedule = ldm.schedule().map_err(err)?;
    let conds = vec![Conditioning::Class(0), Conditioning::Class(1), Conditioning::Null];
    let run = || ddim_sample(&model, &schedule, &conds, &ldm.latent_shape(), 10, 2.0, &mut Rng::new(102));
    let (a, b) = (run().map_err(err)?, run().map_err(err)?);
    let bits = |v: &[Tensor]| v.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect::<Vec<_>>();
    ensure(bits(&a) == bits(&b), || "DDIM differs across runs".into())?;
    Ok("s=0/s=1 exact, affine on 50 scales, DDIM bit-identical".into())
}

fn preds(labels: &[u8]) -> Vec<PatchPrediction> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let logits = if l == MALIGNANT { [0.0, 1.0] } else { [1.0, 0.0] };
            PatchPrediction::from_logits(format!("p{i}"), "w", logits)
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let err = |e: duvsynth::Error| e.to_string();
    let ten = |k: usize| (0..10).map(|i| u8::from(i < k)).collect::<Vec<_>>();
    ensure(aggregate_wsi("w", &preds(&ten(3)), 0.2).map_err(err)?.label == MALIGNANT, || "0.3 > 0.2 not malignant".into())?;
    ensure(aggregate_wsi("w", &preds(&ten(2)), 0.2).map_err(err)?.label != MALIGNANT, || "0.2 > 0.2 called malignant".into())?;
    let mut checked = 0usize;
    for j in 1..=12usize {
        for mask in 0u32..(1 << j) {
            let labels: Vec<u8> = (0..j).map(|i| ((mask >> i) & 1) as u8).collect();
            let base = aggregate_wsi("w", &preds(&labels), 0.2).map_err(err)?.label;
            for i in (0..j).filter(|&i| labels[i] == 0) {
                let mut up = labels.clone();
                up[i] = 1;
                let after = aggregate_wsi("w", &preds(&up), 0.2).map_err(err)?.label;
                ensure(!(base == MALIGNANT && after != MALIGNANT), || format!("flip at J={j} mask={mask:b} i={i}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("threshold examples exact, {checked} single flips monotone for J<=12"))
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ws = Workspace::new(dir.path());
    let start = Instant::now();
    let mut acc = Vec::new();
    let mut fids = Vec::new();
    for arm in ARMS {
        let cfg = ExperimentConfig::ci().with_augmentation(arm);
        let report = run_experiment(&cfg, &ws).map_err(|e| format!("{}: {e}", cfg.name))?;
        let a = report.mean("accuracy").ok_or("no accuracy")?;
        println!("    {}: accuracy {:.4}, {:.0}s", cfg.name, a, report.seconds);
        acc.push((arm, a));
        if arm != Augmentation::None {
            let f = report.mean("fid").ok_or_else(|| format!("{} has no fid", cfg.name))?;
            ensure(f.is_finite(), || format!("{} fid {f}", cfg.name))?;
            ensure(dir.path().join(format!("runs/{}/fid_report.csv", cfg.name)).exists(), || "fid report missing".into())?;
            fids.push((arm, f));
        }
    }
    let total = start.elapsed();
    // Shared generative stages are counted once; the three arms together
    // must fit the per-config budget.
    within(total, 30 * 60)?;
    let (none, ssl) = (acc[0].1, acc[1].1);
    ensure(ssl >= none, || format!("ssl accuracy {ssl:.4} below baseline {none:.4}"))?;
    let (fs, fc) = (fids[0].1, fids[1].1);
    let trend = if fs < fc { "ssl < class as expected" } else { "ssl >= class, expected trend not observed" };
    println!("    fid ssl {fs:.4}, class {fc:.4}: {trend}");
    Ok(format!(
        "accuracy none {:.4} <= ssl {:.4} (class {:.4}); fid ssl {fs:.3} class {fc:.3}; {:.0}s for all arms",
        none,
        ssl,
        acc[2].1,
        total.as_secs_f64()
    ))
}

fn micro_config() -> ExperimentConfig {
    let vit = VitConfig { image_side: 16, patch: 8, channels: 3, width: 16, depth: 1, heads: 2, mlp_ratio: 2 };
    let mut c = ExperimentConfig::ci();
    c.name = "determinism-ssl".into();
    c.seeds = vec![11];
    c.folds = 2;
    c.data = DataConfig { n_wsi: 10, wsi_side: 64, patch_side: 16, ..DataConfig::default() };
    c.ssl.vit = vit.clone();
    c.ssl.head_hidden = 16;
    c.ssl.out_dim = 32;
    c.ssl.epochs = 1;
    c.vae = VaeConfig { image_side: 16, widths: vec![4, 8], epochs: 1, ..c.vae };
    c.ldm.widths = (8, 8);
    c.ldm.heads = 2;
    c.ldm.time_dim = 8;
    c.ldm.epochs = 1;
    c.ldm.timesteps = 20;
    c.sampling.steps = 3;
    c.sampling.count_per_class = Some(9);
    c.classifier.vit = vit;
    c.classifier.train.epochs = 2;
    c.budget = Default::default();
    c
}

fn criterion_7() -> Outcome {
    let cfg = micro_config();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ws = Workspace::new(dir.path());
        let report = run_experiment(&cfg, &ws).map_err(|e| e.to_string())?;
        let read = |f: &str| std::fs::read(report.run_dir.join(f)).map_err(|e| e.to_string());
        outputs.push((read("summary.csv")?, read("folds.csv")?, read("fid_report.csv")?));
    }
    ensure(outputs[0] == outputs[1], || "summary CSVs differ between runs".into())?;
    Ok(format!("{} summary bytes identical across two fresh runs", outputs[0].0.len()))
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn criterion_8() -> Outcome {
    let mut rng = Rng::new(120);
    let store = |seed| {
        let mut s = ParamStore::new();
        s.add("a", Tensor::randn(&[3, 4], 1.0, &mut Rng::new(seed)));
        s.add("b", Tensor::randn(&[5], 1.0, &mut Rng::new(seed + 1)));
        s
    };
    let (teacher, student) = (store(1), store(3));
    let mut t0 = teacher.clone();
    ema(&mut t0, &student, 0.0);
    ensure(t0.values() == student.values(), || "m=0 does not copy the student".into())?;
    let mut t1 = teacher.clone();
    ema(&mut t1, &student, 1.0);
    ensure(t1.values() == teacher.values(), || "m=1 changes the teacher".into())?;

    for (g, l) in [(2usize, 0usize), (2, 2), (2, 6)] {
        let v = ViewSet {
            global_views: vec![Tensor::zeros(&[4, 4, 3]); g],
            local_views: vec![Tensor::zeros(&[2, 2, 3]); l],
            source_patch_id: "p".into(),
        };
        let want = g * (g + l - 1);
        ensure(v.pair_count() == want && v.pairs().len() == want, || format!("(g,l)=({g},{l}): {}", v.pair_count()))?;
    }

    for i in 0..1000 {
        let logits = Tensor::randn(&[16], 1.0 + (i % 5) as f64, &mut rng);
        let t = softmax_temperature(&logits, 0.04).map_err(|e| e.to_string())?;
        let s = softmax_temperature(&logits, 0.1).map_err(|e| e.to_string())?;
        let (ht, hs) = (entropy(t.data()), entropy(s.data()));
        ensure(ht < hs, || format!("vector {i}: teacher entropy {ht} not below student {hs}"))?;
    }
    Ok("EMA m=0/m=1 exact, pair counts 2/6/14, sharpening on 1000 vectors".into())
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 8] = [
        ("gradient integrity", criterion_1),
        ("diffusion marginal", criterion_2),
        ("fid oracle", criterion_3),
        ("guidance algebra and ddim determinism", criterion_4),
        ("slide aggregation", criterion_5),
        ("end-to-end toy experiment", criterion_6),
        ("run determinism", criterion_7),
        ("self-distillation mechanics", criterion_8),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                println!("criterion {}: FAIL {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

/// Reference bits recorded once; any change to the generator or its
/// seeding breaks reproducibility of stored experiments.
#[test]
fn rng_stream_is_frozen() {
    let mut r = Rng::new(42);
    let first: Vec<u64> = (0..3).map(|_| r.uniform().to_bits()).collect();
    assert_eq!(first, FROZEN);
}

const FROZEN: [u64; 3] = [4604317194420431787, 4606734539489062706, 4601373070768303508];
