//! Stage orchestration: dataset materialization, per-fold training of the
//! generative stack, synthesis, classifier training and evaluation.
//!
//! Layout under the output root:
//! `datasets/<key>/` holds the toy dataset, `cache/<stage>-<key>/` holds
//! reusable generative checkpoints and `runs/<name>/seed-<s>/fold-<k>/`
//! holds every per-fold artifact.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::codec::{train_vae, Codec};
use crate::config::{Augmentation, ExperimentConfig};
use crate::data::{self, csv_writer, read_csv, Dataset, Patch};
use crate::diffusion::{train_ldm, CondKind, Conditioning, Denoiser, Synthesizer};
use crate::dino::{train_dino, DistillationState, EmbeddingExtractor};
use crate::error::{data_err, Error, Result};
use crate::eval::{self, FoldSplit, Metrics, BENIGN, MALIGNANT};
use crate::nn::stack;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{train_classifier, LabeledPatch, PatchPrediction, VitClassifier};

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "DUVSYNTH_OUT";

const STAGE_SSL: u64 = 1;
const STAGE_VAE: u64 = 2;
const STAGE_LDM: u64 = 3;
const STAGE_SAMPLE: u64 = 4;
const STAGE_CLASSIFIER: u64 = 5;

/// Output root plus the cache policy.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    pub cache: bool,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), cache: true }
    }

    /// Root from `DUVSYNTH_OUT`, falling back to `./duvsynth-out`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("duvsynth-out"), PathBuf::from))
    }

    pub fn dataset_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root.join("datasets").join(&dataset_key(cfg)[..16])
    }

    pub fn run_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root.join("runs").join(&cfg.name)
    }

    pub fn fold_dir(&self, cfg: &ExperimentConfig, seed: u64, fold: usize) -> PathBuf {
        self.run_dir(cfg).join(format!("seed-{seed}")).join(format!("fold-{fold}"))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn dataset_key(cfg: &ExperimentConfig) -> String {
    sha256_hex(json!({ "data": cfg.data, "seed": cfg.data_seed }).to_string().as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

/// Generate the toy dataset unless an identical one already exists, then
/// read it back from disk so every run sees the quantized patches.
pub fn ensure_dataset(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Dataset> {
    let dir = ws.dataset_dir(cfg);
    if !dir.join("patches.csv").exists() {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let wsis = data::generate_toy_wsis(&cfg.data, &Rng::new(cfg.data_seed))?;
        for w in &wsis {
            data::write_wsi_images(w, &tmp.join("slides"))?;
        }
        Dataset::from_wsis(&wsis, &cfg.data)?.write(&tmp)?;
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    }
    Dataset::read(&dir)
}

/// One synthetic patch and its provenance.
#[derive(Clone, Debug)]
pub struct SyntheticPatch {
    pub filename: String,
    pub image: Tensor,
    pub label: u8,
    pub cond: CondKind,
    pub source_patch_id: String,
    pub source_wsi_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SyntheticRow {
    filename: String,
    class: u8,
    cond: String,
    seed: u64,
    source_patch_id: String,
    source_wsi_id: String,
}

/// Synthetic patches whose conditioning came from outside the fold's
/// training slides are dropped. Returns the kept patches and the number
/// excluded.
pub fn leakage_filter<'a>(synthetic: &'a [SyntheticPatch], split: &FoldSplit) -> (Vec<&'a SyntheticPatch>, usize) {
    let kept: Vec<&SyntheticPatch> = synthetic
        .iter()
        .filter(|s| s.source_wsi_id.is_empty() || split.train_wsi_ids.contains(&s.source_wsi_id))
        .collect();
    let excluded = synthetic.len() - kept.len();
    (kept, excluded)
}

/// Per-fold evaluation outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub seed: u64,
    pub fold: usize,
    pub n_wsi: usize,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidRow {
    pub pair: String,
    pub seed: u64,
    pub fold: usize,
    pub fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub augmentation: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// `mean±std`, in percent for rates.
    pub formatted: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub metrics: FoldMetrics,
    pub fid: Option<FidRow>,
}

#[derive(Serialize)]
struct TimingRow<'a> {
    stage: &'a str,
    seed: u64,
    fold: usize,
    seconds: f64,
}

/// Dataset plus bookkeeping shared by every fold of a run.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub ws: Workspace,
    pub dataset: Dataset,
    data_key: String,
    reads: RefCell<BTreeSet<PathBuf>>,
    timings: RefCell<Vec<(String, u64, usize, f64)>>,
}

impl Run {
    pub fn open(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Self> {
        cfg.validate()?;
        let dataset = ensure_dataset(cfg, ws).map_err(|e| e.in_stage("generate-data"))?;
        let dir = ws.dataset_dir(cfg);
        let mut reads: BTreeSet<PathBuf> = [dir.join("wsis.csv"), dir.join("patches.csv")].into();
        reads.extend(dataset.patches.iter().map(|p| dir.join("patches").join(format!("{}.png", p.patch_id))));
        Ok(Self {
            cfg: cfg.clone(),
            ws: ws.clone(),
            dataset,
            data_key: dataset_key(cfg),
            reads: RefCell::new(reads),
            timings: RefCell::new(Vec::new()),
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.ws.run_dir(&self.cfg)
    }

    pub fn folds(&self, seed: u64) -> Result<Vec<FoldSplit>> {
        let (ids, labels): (Vec<String>, Vec<u8>) = self.dataset.wsi_labels.iter().cloned().unzip();
        eval::make_folds(&ids, &labels, self.cfg.folds, self.cfg.val_fraction, &mut Rng::new(seed).fork(0))
    }

    pub fn fold(&self, seed: u64, index: usize) -> Result<Fold<'_>> {
        let split = self
            .folds(seed)?
            .into_iter()
            .nth(index)
            .ok_or_else(|| Error::Config(format!("fold {index} out of range 0..{}", self.cfg.folds)))?;
        Ok(Fold {
            run: self,
            seed,
            dir: self.ws.fold_dir(&self.cfg, seed, index),
            rng: Rng::new(seed).fork(100 + index as u64),
            split,
        })
    }

    fn timed<T>(&self, stage: &'static str, seed: u64, fold: usize, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let dir = self.ws.fold_dir(&self.cfg, seed, fold);
        let out = fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).and_then(|()| f()).map_err(|e| e.in_stage(stage))?;
        self.timings.borrow_mut().push((stage.to_string(), seed, fold, start.elapsed().as_secs_f64()));
        Ok(out)
    }

    /// Seconds spent per stage so far.
    pub fn stage_seconds(&self) -> Vec<(String, u64, usize, f64)> {
        self.timings.borrow().clone()
    }
}

/// One (seed, fold) slice of a run.
pub struct Fold<'r> {
    run: &'r Run,
    pub seed: u64,
    pub split: FoldSplit,
    pub dir: PathBuf,
    rng: Rng,
}

impl Fold<'_> {
    fn cfg(&self) -> &ExperimentConfig {
        &self.run.cfg
    }

    pub fn index(&self) -> usize {
        self.split.fold_index
    }

    fn patches_of<'s>(&'s self, ids: &'s [String]) -> Vec<&'s Patch> {
        self.run.dataset.patches_of(ids).collect()
    }

    pub fn train_patches(&self) -> Vec<&Patch> {
        self.patches_of(&self.split.train_wsi_ids)
    }

    pub fn val_patches(&self) -> Vec<&Patch> {
        self.patches_of(&self.split.val_wsi_ids)
    }

    pub fn test_patches(&self) -> Vec<&Patch> {
        self.patches_of(&self.split.test_wsi_ids)
    }

    /// At most `cap` training patches, drawn without replacement and kept
    /// in dataset order.
    fn budgeted(&self, cap: Option<usize>, stage: u64) -> Vec<&Patch> {
        let all = self.train_patches();
        match cap {
            Some(n) if n < all.len() => {
                let mut idx = self.rng.fork(1000 + stage).permutation(all.len());
                idx.truncate(n);
                idx.sort_unstable();
                idx.into_iter().map(|i| all[i]).collect()
            }
            _ => all,
        }
    }

    fn cache_key(&self, stage: &str, parts: serde_json::Value) -> String {
        let doc = json!({
            "stage": stage,
            "parts": parts,
            "data": self.run.data_key,
            "seed": self.seed,
            "fold": self.index(),
            "train": self.split.train_wsi_ids,
        });
        sha256_hex(doc.to_string().as_bytes())
    }

    fn ssl_key(&self) -> String {
        self.cache_key("ssl", json!({ "ssl": self.cfg().ssl, "budget": self.cfg().budget.ssl_patches }))
    }

    fn vae_key(&self) -> String {
        self.cache_key("vae", json!({ "vae": self.cfg().vae, "budget": self.cfg().budget.vae_patches }))
    }

    fn ldm_key(&self, kind: CondKind) -> String {
        let ssl = if kind == CondKind::Ssl { self.ssl_key() } else { String::new() };
        self.cache_key(
            "ldm",
            json!({
                "ldm": self.cfg().ldm_for(kind),
                "cond": kind.as_str(),
                "budget": self.cfg().budget.ldm_patches,
                "ssl": ssl,
                "vae": self.vae_key(),
            }),
        )
    }

    /// Fetch a checkpoint and its training log from the cache or train
    /// them, then place copies in the fold directory.
    fn cached(
        &self,
        stage: &str,
        key: &str,
        names: (&str, &str),
        train: impl FnOnce() -> Result<(Checkpoint, Vec<u8>)>,
    ) -> Result<Checkpoint> {
        let cache = self.run.ws.root.join("cache").join(format!("{stage}-{}", &key[..16]));
        let (ck_path, log_path) = (cache.join("model.ckpt"), cache.join("log.csv"));
        let (ck_bytes, log) = if self.run.ws.cache && ck_path.exists() && log_path.exists() {
            let mut reads = self.run.reads.borrow_mut();
            reads.insert(ck_path.clone());
            reads.insert(log_path.clone());
            (read_bytes(&ck_path)?, read_bytes(&log_path)?)
        } else {
            let (ck, log) = train()?;
            let bytes = ck.to_bytes();
            if self.run.ws.cache {
                let tmp = cache.with_extension("partial");
                write_bytes(&tmp.join("model.ckpt"), &bytes)?;
                write_bytes(&tmp.join("log.csv"), &log)?;
                if cache.exists() {
                    fs::remove_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
                }
                fs::rename(&tmp, &cache).map_err(|e| Error::io(&cache, e))?;
            }
            (bytes, log)
        };
        write_bytes(&self.dir.join(names.0), &ck_bytes)?;
        write_bytes(&self.dir.join(names.1), &log)?;
        Checkpoint::from_bytes(&ck_bytes)
    }

    fn images(patches: &[&Patch]) -> Vec<Tensor> {
        patches.iter().map(|p| p.image.clone()).collect()
    }

    fn fresh_teacher(&self) -> Result<DistillationState> {
        DistillationState::new(&self.cfg().ssl, &mut self.rng.fork(STAGE_SSL))
    }

    fn fresh_codec(&self) -> Result<Codec> {
        Codec::new(&self.cfg().vae, &mut self.rng.fork(STAGE_VAE))
    }

    fn fresh_denoiser(&self, kind: CondKind) -> Result<Denoiser> {
        Denoiser::new(&self.cfg().ldm_for(kind), &mut self.rng.fork(STAGE_LDM))
    }

    pub fn train_ssl(&self) -> Result<DistillationState> {
        self.run.timed("train-ssl", self.seed, self.index(), || {
            let ck = self.cached("ssl", &self.ssl_key(), ("teacher.ckpt", "ssl_log.csv"), || {
                let imgs = Self::images(&self.budgeted(self.cfg().budget.ssl_patches, STAGE_SSL));
                let mut log = Vec::new();
                let state = train_dino(&self.cfg().ssl, &imgs, &self.rng.fork(STAGE_SSL), |e| log.push(e.clone()))?;
                Ok((state.to_checkpoint(), csv_bytes(&log)?))
            })?;
            let mut state = self.fresh_teacher()?;
            state.load_checkpoint(&ck)?;
            Ok(state)
        })
    }

    pub fn train_vae(&self) -> Result<Codec> {
        self.run.timed("train-vae", self.seed, self.index(), || {
            let ck = self.cached("vae", &self.vae_key(), ("vae.ckpt", "vae_log.csv"), || {
                let imgs = Self::images(&self.budgeted(self.cfg().budget.vae_patches, STAGE_VAE));
                let mut log = Vec::new();
                let mut codec = train_vae(&self.cfg().vae, &imgs, &self.rng.fork(STAGE_VAE), |e| log.push(e.clone()))?;
                codec.fit_latent_std(&imgs)?;
                Ok((codec.to_checkpoint()?, csv_bytes(&log)?))
            })?;
            let mut codec = self.fresh_codec()?;
            codec.load_checkpoint(&ck)?;
            Ok(codec)
        })
    }

    /// `teacher` is required for SSL conditioning.
    pub fn train_ldm(&self, kind: CondKind, teacher: Option<&EmbeddingExtractor>, codec: &Codec) -> Result<Denoiser> {
        self.run.timed("train-ldm", self.seed, self.index(), || {
            let names = (ldm_name(kind), format!("ldm_{}_log.csv", kind.as_str()));
            let ck = self.cached("ldm", &self.ldm_key(kind), (&names.0, &names.1), || {
                let patches = self.budgeted(self.cfg().budget.ldm_patches, STAGE_LDM);
                let imgs = Self::images(&patches);
                let latents = codec
                    .encode_means(&imgs)?
                    .iter()
                    .map(|z| codec.normalize(z))
                    .collect::<Result<Vec<_>>>()?;
                let conds: Vec<Conditioning> = match kind {
                    CondKind::Ssl => {
                        let teacher = teacher.ok_or_else(|| Error::State("SSL conditioning needs a teacher".into()))?;
                        teacher.extract_batch(&imgs)?.into_iter().map(Conditioning::Ssl).collect()
                    }
                    CondKind::Class => patches.iter().map(|p| Conditioning::Class(usize::from(p.label))).collect(),
                };
                let mut log = Vec::new();
                let model =
                    train_ldm(&self.cfg().ldm_for(kind), &latents, &conds, &self.rng.fork(STAGE_LDM), |e| log.push(e.clone()))?;
                Ok((model.to_checkpoint(), csv_bytes(&log)?))
            })?;
            let mut model = self.fresh_denoiser(kind)?;
            model.load_checkpoint(&ck)?;
            Ok(model)
        })
    }

    /// Per-class synthesis. SSL conditioning draws embeddings uniformly
    /// from the fold's training patches of the target class.
    pub fn sample(
        &self,
        kind: CondKind,
        teacher: Option<&EmbeddingExtractor>,
        codec: &Codec,
        denoiser: &Denoiser,
    ) -> Result<Vec<SyntheticPatch>> {
        self.run.timed("sample", self.seed, self.index(), || {
            let s = &self.cfg().sampling;
            let train = self.train_patches();
            let per_class = s.per_class(train.len());
            let schedule = denoiser.config.schedule()?;
            let synth = Synthesizer { codec, denoiser, schedule: &schedule };
            let mut pick_rng = self.rng.fork(STAGE_SAMPLE).fork(0);
            let mut noise_rng = self.rng.fork(STAGE_SAMPLE).fork(1);
            let out_dir = self.dir.join(format!("synthetic-{}", kind.as_str()));
            if out_dir.exists() {
                fs::remove_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            }
            let mut out = Vec::new();
            for class in [BENIGN, MALIGNANT] {
                let pool: Vec<&Patch> = train.iter().copied().filter(|p| p.label == class).collect();
                let sources: Vec<Option<&Patch>> = match kind {
                    CondKind::Ssl if pool.is_empty() => return Err(data_err!("no training patches of class {class}")),
                    CondKind::Ssl => (0..per_class).map(|_| Some(pool[pick_rng.below(pool.len())])).collect(),
                    CondKind::Class => vec![None; per_class],
                };
                for chunk in sources.chunks(32) {
                    let conds = match kind {
                        CondKind::Ssl => {
                            let teacher =
                                teacher.ok_or_else(|| Error::State("SSL conditioning needs a teacher".into()))?;
                            let imgs: Vec<Tensor> = chunk.iter().flatten().map(|p| p.image.clone()).collect();
                            teacher.extract_batch(&imgs)?.into_iter().map(Conditioning::Ssl).collect()
                        }
                        CondKind::Class => vec![Conditioning::Class(usize::from(class)); chunk.len()],
                    };
                    let imgs = synth.synthesize(&conds, s.steps, s.guidance_scale, &mut noise_rng)?;
                    for (img, src) in imgs.into_iter().zip(chunk) {
                        let filename = format!("syn_c{class}_{:05}.png", out.len());
                        data::save_png(&img, &out_dir.join(&filename))?;
                        out.push(SyntheticPatch {
                            filename,
                            image: data::quantize(&img),
                            label: class,
                            cond: kind,
                            source_patch_id: src.map(|p| p.patch_id.clone()).unwrap_or_default(),
                            source_wsi_id: src.map(|p| p.wsi_id.clone()).unwrap_or_default(),
                        });
                    }
                }
            }
            let rows: Vec<SyntheticRow> = out
                .iter()
                .map(|p| SyntheticRow {
                    filename: p.filename.clone(),
                    class: p.label,
                    cond: kind.as_str().into(),
                    seed: self.seed,
                    source_patch_id: p.source_patch_id.clone(),
                    source_wsi_id: p.source_wsi_id.clone(),
                })
                .collect();
            write_rows(&out_dir.join("manifest.csv"), &rows)?;
            Ok(out)
        })
    }

    pub fn train_classifier(&self, synthetic: &[SyntheticPatch]) -> Result<VitClassifier> {
        self.run.timed("train-classifier", self.seed, self.index(), || {
            let (kept, _excluded) = leakage_filter(synthetic, &self.split);
            let labeled = |ps: Vec<&Patch>| -> Vec<LabeledPatch> {
                ps.into_iter().map(|p| LabeledPatch { image: p.image.clone(), label: p.label }).collect()
            };
            let real = labeled(self.train_patches());
            let val = labeled(self.val_patches());
            let syn: Vec<LabeledPatch> =
                kept.iter().map(|p| LabeledPatch { image: p.image.clone(), label: p.label }).collect();
            let c = &self.cfg().classifier;
            let mut log = Vec::new();
            let model =
                train_classifier(&c.vit, &c.train, &real, &syn, &val, &self.rng.fork(STAGE_CLASSIFIER), |e| log.push(e.clone()))?;
            model.params.to_checkpoint().save(self.dir.join("classifier.ckpt"))?;
            write_bytes(&self.dir.join("classifier_log.csv"), &csv_bytes(&log)?)?;
            Ok(model)
        })
    }

    /// Slide-level metrics on the test slides, plus FID between real
    /// training and synthetic teacher features when both are given.
    pub fn evaluate(
        &self,
        model: &VitClassifier,
        fid_inputs: Option<(&EmbeddingExtractor, &[SyntheticPatch])>,
    ) -> Result<FoldResult> {
        self.run.timed("evaluate", self.seed, self.index(), || {
            let test = self.test_patches();
            let mut preds = Vec::with_capacity(test.len());
            for chunk in test.chunks(64) {
                let batch = stack(&chunk.iter().map(|p| &p.image).collect::<Vec<_>>())?;
                for (p, l) in chunk.iter().zip(model.predict_logits(&batch)?) {
                    preds.push(PatchPrediction::from_logits(&p.patch_id, &p.wsi_id, l));
                }
            }
            let wsi = eval::aggregate_all(&preds, self.cfg().threshold)?;
            let truth: BTreeMap<String, u8> = self
                .run
                .dataset
                .wsi_labels
                .iter()
                .filter(|(id, _)| self.split.test_wsi_ids.contains(id))
                .cloned()
                .collect();
            let m = eval::confusion_metrics(&wsi, &truth)?;
            write_predictions(&self.dir, &test, &preds, &wsi, &truth)?;
            let metrics = fold_metrics(self.seed, self.index(), &m);
            write_rows(&self.dir.join("metrics.csv"), std::slice::from_ref(&metrics))?;
            let fid = match fid_inputs {
                // Covariance needs more samples than feature dimensions.
                Some((teacher, syn)) if syn.len() > teacher.width() => {
                    let real: Vec<Tensor> = self.train_patches().iter().map(|p| p.image.clone()).collect();
                    let fake: Vec<Tensor> = syn.iter().map(|p| p.image.clone()).collect();
                    let feats = |imgs: &[Tensor]| -> Result<Vec<Vec<f64>>> {
                        Ok(teacher.extract_batch(imgs)?.into_iter().map(|e| e.0).collect())
                    };
                    let value = eval::fid(&eval::feature_stats(&feats(&real)?)?, &eval::feature_stats(&feats(&fake)?)?)?;
                    let row = FidRow {
                        pair: format!("real-vs-{}", syn[0].cond.as_str()),
                        seed: self.seed,
                        fold: self.index(),
                        fid: value,
                    };
                    write_rows(&self.dir.join("fid.csv"), std::slice::from_ref(&row))?;
                    Some(row)
                }
                _ => None,
            };
            Ok(FoldResult { metrics, fid })
        })
    }

    fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if !path.exists() {
            return Err(Error::State(format!("{} missing; run `{stage}` for this fold first", path.display())));
        }
        self.run.reads.borrow_mut().insert(path.clone());
        Ok(path)
    }

    pub fn load_teacher(&self) -> Result<DistillationState> {
        let ck = Checkpoint::load(self.require("teacher.ckpt", "train-ssl")?)?;
        let mut s = self.fresh_teacher()?;
        s.load_checkpoint(&ck)?;
        Ok(s)
    }

    pub fn load_codec(&self) -> Result<Codec> {
        let ck = Checkpoint::load(self.require("vae.ckpt", "train-vae")?)?;
        let mut c = self.fresh_codec()?;
        c.load_checkpoint(&ck)?;
        Ok(c)
    }

    pub fn load_denoiser(&self, kind: CondKind) -> Result<Denoiser> {
        let ck = Checkpoint::load(self.require(&ldm_name(kind), "train-ldm")?)?;
        let mut d = self.fresh_denoiser(kind)?;
        d.load_checkpoint(&ck)?;
        Ok(d)
    }

    pub fn load_synthetic(&self, kind: CondKind) -> Result<Vec<SyntheticPatch>> {
        let dir = self.dir.join(format!("synthetic-{}", kind.as_str()));
        let manifest = self.require(&format!("synthetic-{}/manifest.csv", kind.as_str()), "sample")?;
        read_csv::<SyntheticRow>(&manifest)?
            .into_iter()
            .map(|r| {
                let path = dir.join(&r.filename);
                self.run.reads.borrow_mut().insert(path.clone());
                Ok(SyntheticPatch {
                    image: data::load_png(&path)?,
                    filename: r.filename,
                    label: r.class,
                    cond: kind,
                    source_patch_id: r.source_patch_id,
                    source_wsi_id: r.source_wsi_id,
                })
            })
            .collect()
    }

    pub fn load_classifier(&self) -> Result<VitClassifier> {
        let ck = Checkpoint::load(self.require("classifier.ckpt", "train-classifier")?)?;
        let mut m = VitClassifier::new(&self.cfg().classifier.vit, &mut Rng::new(0))?;
        m.params.load_checkpoint(&ck)?;
        Ok(m)
    }

    /// Teacher features of real training and synthetic patches for
    /// external plotting. Returns the file written.
    pub fn export_features(&self, teacher: &EmbeddingExtractor, synthetic: &[SyntheticPatch]) -> Result<PathBuf> {
        let path = self.dir.join("features.csv");
        let mut w = csv_writer(&path)?;
        let width = teacher.width();
        let mut header = vec!["source".to_string(), "patch_id".into(), "wsi_id".into(), "label".into()];
        header.extend((0..width).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        let real = self.train_patches();
        let mut rows: Vec<(String, String, String, u8, Tensor)> =
            real.iter().map(|p| ("real".into(), p.patch_id.clone(), p.wsi_id.clone(), p.label, p.image.clone())).collect();
        rows.extend(synthetic.iter().map(|s| {
            (s.cond.as_str().to_string(), s.filename.clone(), s.source_wsi_id.clone(), s.label, s.image.clone())
        }));
        for chunk in rows.chunks(64) {
            let imgs: Vec<Tensor> = chunk.iter().map(|r| r.4.clone()).collect();
            for (r, e) in chunk.iter().zip(teacher.extract_batch(&imgs)?) {
                let mut rec = vec![r.0.clone(), r.1.clone(), r.2.clone(), r.3.to_string()];
                rec.extend(e.0.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Every stage in order for this fold's augmentation arm.
    pub fn run_all(&self) -> Result<FoldResult> {
        let aug = self.cfg().augmentation;
        let Some(kind) = aug.cond_kind() else {
            let model = self.train_classifier(&[])?;
            return self.evaluate(&model, None);
        };
        let teacher = self.train_ssl()?.extractor();
        let codec = self.train_vae()?;
        let denoiser = self.train_ldm(kind, Some(&teacher), &codec)?;
        let synthetic = self.sample(kind, Some(&teacher), &codec, &denoiser)?;
        let model = self.train_classifier(&synthetic)?;
        let fid = self.cfg().sampling.fid.then_some((&teacher, synthetic.as_slice()));
        self.evaluate(&model, fid)
    }
}

fn ldm_name(kind: CondKind) -> String {
    format!("ldm_{}.ckpt", kind.as_str())
}

fn fold_metrics(seed: u64, fold: usize, m: &Metrics) -> FoldMetrics {
    FoldMetrics {
        seed,
        fold,
        n_wsi: m.total(),
        tp: m.tp,
        fn_: m.fn_,
        tn: m.tn,
        fp: m.fp,
        accuracy: m.accuracy,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
    }
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    patch_id: &'a str,
    wsi_id: &'a str,
    logit_benign: f64,
    logit_malignant: f64,
    predicted: u8,
    label: u8,
}

#[derive(Serialize)]
struct WsiRow<'a> {
    wsi_id: &'a str,
    malignant_fraction: f64,
    predicted: u8,
    label: u8,
}

fn write_predictions(
    dir: &Path,
    test: &[&Patch],
    preds: &[PatchPrediction],
    wsi: &[eval::WsiPrediction],
    truth: &BTreeMap<String, u8>,
) -> Result<()> {
    let rows: Vec<PredictionRow> = test
        .iter()
        .zip(preds)
        .map(|(p, q)| PredictionRow {
            patch_id: &p.patch_id,
            wsi_id: &p.wsi_id,
            logit_benign: q.logits[0],
            logit_malignant: q.logits[1],
            predicted: q.label,
            label: p.label,
        })
        .collect();
    write_rows(&dir.join("predictions.csv"), &rows)?;
    let rows: Vec<WsiRow> = wsi
        .iter()
        .map(|w| WsiRow {
            wsi_id: &w.wsi_id,
            malignant_fraction: w.patch_fraction_malignant,
            predicted: w.label,
            label: truth[&w.wsi_id],
        })
        .collect();
    write_rows(&dir.join("wsi_predictions.csv"), &rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of every fold metric and FID.
pub fn summarize(cfg: &ExperimentConfig, folds: &[FoldMetrics], fids: &[FidRow]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let mut push = |metric: &str, values: Vec<f64>, percent: bool| {
        if values.is_empty() {
            return;
        }
        let (mean, std) = mean_std(&values);
        let k = if percent { 100.0 } else { 1.0 };
        rows.push(SummaryRow {
            config: cfg.name.clone(),
            augmentation: cfg.augmentation.as_str().into(),
            metric: metric.into(),
            n: values.len(),
            mean,
            std,
            formatted: format!("{:.2}±{:.2}", mean * k, std * k),
        });
    };
    push("accuracy", folds.iter().map(|f| f.accuracy).collect(), true);
    push("sensitivity", folds.iter().filter_map(|f| f.sensitivity).collect(), true);
    push("specificity", folds.iter().filter_map(|f| f.specificity).collect(), true);
    push("fid", fids.iter().map(|f| f.fid).collect(), false);
    rows
}

/// Gather per-fold `metrics.csv` and `fid.csv` files of a run and write
/// `folds.csv`, `summary.csv` and `fid_report.csv` in the run directory.
pub fn write_reports(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<SummaryRow>> {
    let run_dir = ws.run_dir(cfg);
    let (mut folds, mut fids) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        for k in 0..cfg.folds {
            let dir = ws.fold_dir(cfg, seed, k);
            let metrics = dir.join("metrics.csv");
            if !metrics.exists() {
                return Err(Error::State(format!("{} missing; evaluate every fold first", metrics.display())));
            }
            folds.extend(read_csv::<FoldMetrics>(&metrics)?);
            if dir.join("fid.csv").exists() {
                fids.extend(read_csv::<FidRow>(&dir.join("fid.csv"))?);
            }
        }
    }
    let summary = summarize(cfg, &folds, &fids);
    write_rows(&run_dir.join("folds.csv"), &folds)?;
    write_rows(&run_dir.join("summary.csv"), &summary)?;
    write_rows(&run_dir.join("fid_report.csv"), &fids)?;
    Ok(summary)
}

#[derive(Serialize)]
struct ManifestRow {
    role: &'static str,
    path: String,
    sha256: String,
    bytes: u64,
}

fn manifest_row(role: &'static str, root: &Path, path: &Path) -> Result<ManifestRow> {
    let bytes = read_bytes(path)?;
    let rel = path.strip_prefix(root).unwrap_or(path);
    Ok(ManifestRow {
        role,
        path: rel.to_string_lossy().replace('\\', "/"),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Hash every file read (dataset, cache entries) and every file under the
/// run directory into `manifest.csv`.
fn write_manifest(run: &Run) -> Result<PathBuf> {
    let root = &run.ws.root;
    let run_dir = run.run_dir();
    let path = run_dir.join("manifest.csv");
    let mut rows = Vec::new();
    for p in run.reads.borrow().iter().filter(|p| !p.starts_with(&run_dir)) {
        rows.push(manifest_row("read", root, p)?);
    }
    let mut written: Vec<PathBuf> = walkdir::WalkDir::new(&run_dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path() != path)
        .map(|e| e.into_path())
        .collect();
    written.sort();
    for p in &written {
        rows.push(manifest_row("write", root, p)?);
    }
    write_rows(&path, &rows)?;
    Ok(path)
}

/// Outcome of a full cross-validated run.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub run_dir: PathBuf,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<SummaryRow>,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.iter().find(|r| r.metric == metric).map(|r| r.mean)
    }
}

/// Every stage for every seed and fold, then reports and the manifest.
pub fn run_experiment(cfg: &ExperimentConfig, ws: &Workspace) -> Result<ExperimentReport> {
    let start = Instant::now();
    let run = Run::open(cfg, ws)?;
    let run_dir = run.run_dir();
    if run_dir.exists() {
        fs::remove_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    }
    write_bytes(&run_dir.join("config.json"), cfg.to_json().as_bytes())?;
    let mut folds = Vec::new();
    for &seed in &cfg.seeds {
        for k in 0..cfg.folds {
            folds.push(run.fold(seed, k)?.run_all()?);
        }
    }
    let summary = write_reports(cfg, ws).map_err(|e| e.in_stage("evaluate"))?;
    let recorded = run.timings.borrow();
    let timings: Vec<TimingRow> =
        recorded.iter().map(|(s, seed, fold, sec)| TimingRow { stage: s, seed: *seed, fold: *fold, seconds: *sec }).collect();
    write_rows(&run_dir.join("timings.csv"), &timings)?;
    drop(recorded);
    write_manifest(&run)?;
    Ok(ExperimentReport { run_dir, folds, summary, seconds: start.elapsed().as_secs_f64() })
}

/// Augmentation arms compared in one experiment.
pub const ARMS: [Augmentation; 3] = [Augmentation::None, Augmentation::Ssl, Augmentation::Class];
