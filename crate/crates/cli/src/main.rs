use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use duvsynth::config::{Augmentation, ExperimentConfig};
use duvsynth::diffusion::CondKind;
use duvsynth::pipeline::{self, Fold, Run, Workspace, OUT_ENV};
use duvsynth::Result;

#[derive(Parser)]
#[command(name = "duvsynth", version, about = "SSL-guided latent diffusion augmentation on toy whole-slide images")]
struct Cli {
    /// Output root for datasets, caches and runs.
    #[arg(long, env = OUT_ENV, default_value = "duvsynth-out", global = true)]
    out: PathBuf,
    /// Retrain generative stages instead of reusing cached checkpoints.
    #[arg(long, global = true)]
    no_cache: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    preset: String,
    /// Seed to run; defaults to the config's first seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Augmentation arm; renames the run accordingly.
    #[arg(long, value_enum)]
    augmentation: Option<Arm>,
}

#[derive(Args, Clone)]
struct FoldArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args, Clone)]
struct CondArgs {
    #[command(flatten)]
    fold: FoldArgs,
    /// Conditioning kind; defaults to the augmentation arm's.
    #[arg(long, value_enum)]
    cond: Option<Cond>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the toy slides and write the tiled patch dataset.
    GenerateData(Common),
    /// Self-distillation pretraining of the embedding teacher.
    TrainSsl(FoldArgs),
    /// Train the latent autoencoder and fit its latent scale.
    TrainVae(FoldArgs),
    /// Train the conditional latent denoiser.
    TrainLdm(CondArgs),
    /// Synthesize labelled patches with guided DDIM.
    Sample {
        #[command(flatten)]
        args: CondArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance_scale: Option<f64>,
        #[arg(long)]
        count_per_class: Option<usize>,
    },
    /// Train the patch classifier on real plus synthetic patches.
    TrainClassifier(FoldArgs),
    /// Evaluate one fold, or write run reports when --fold is omitted.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Every stage for every seed and fold.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        /// Run all three augmentation arms in turn.
        #[arg(long)]
        all_arms: bool,
    },
    /// Teacher features of real and synthetic patches as CSV.
    ExportFeatures(CondArgs),
    /// Print the resolved config as JSON.
    PrintConfig(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Arm {
    None,
    Ssl,
    Class,
}

impl From<Arm> for Augmentation {
    fn from(a: Arm) -> Self {
        match a {
            Arm::None => Augmentation::None,
            Arm::Ssl => Augmentation::Ssl,
            Arm::Class => Augmentation::Class,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Cond {
    Ssl,
    Class,
}

impl From<Cond> for CondKind {
    fn from(c: Cond) -> Self {
        match c {
            Cond::Ssl => CondKind::Ssl,
            Cond::Class => CondKind::Class,
        }
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        if let Some(a) = self.augmentation {
            cfg = cfg.with_augmentation(a.into());
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn workspace(cli: &Cli) -> Workspace {
    Workspace { root: cli.out.clone(), cache: !cli.no_cache }
}

fn cond_of(cfg: &ExperimentConfig, c: Option<Cond>) -> CondKind {
    c.map(CondKind::from).or(cfg.augmentation.cond_kind()).unwrap_or_default()
}

fn with_fold<T>(ws: &Workspace, cfg: &ExperimentConfig, fold: usize, f: impl FnOnce(&Fold) -> Result<T>) -> Result<T> {
    let run = Run::open(cfg, ws)?;
    let fold = run.fold(cfg.seeds[0], fold)?;
    f(&fold)
}

fn teacher_if(fold: &Fold, kind: CondKind) -> Result<Option<duvsynth::dino::EmbeddingExtractor>> {
    Ok(match kind {
        CondKind::Ssl => Some(fold.load_teacher()?.extractor()),
        CondKind::Class => None,
    })
}

fn report(path: &std::path::Path) {
    println!("wrote {}", path.display());
}

fn run(cli: &Cli) -> Result<()> {
    let ws = workspace(cli);
    match &cli.command {
        Command::GenerateData(c) => {
            let cfg = c.config()?;
            let ds = pipeline::ensure_dataset(&cfg, &ws)?;
            let malignant = ds.patches.iter().filter(|p| p.label == 1).count();
            println!(
                "{} slides, {} patches ({malignant} malignant) in {}",
                ds.wsi_labels.len(),
                ds.patches.len(),
                ws.dataset_dir(&cfg).display()
            );
        }
        Command::TrainSsl(a) => {
            let cfg = a.common.config()?;
            with_fold(&ws, &cfg, a.fold, |f| f.train_ssl().map(|_| report(&f.dir.join("teacher.ckpt"))))?;
        }
        Command::TrainVae(a) => {
            let cfg = a.common.config()?;
            with_fold(&ws, &cfg, a.fold, |f| f.train_vae().map(|_| report(&f.dir.join("vae.ckpt"))))?;
        }
        Command::TrainLdm(a) => {
            let cfg = a.fold.common.config()?;
            let kind = cond_of(&cfg, a.cond);
            with_fold(&ws, &cfg, a.fold.fold, |f| {
                let teacher = teacher_if(f, kind)?;
                let codec = f.load_codec()?;
                f.train_ldm(kind, teacher.as_ref(), &codec).map_err(|e| e.in_stage("train-ldm"))?;
                report(&f.dir.join(format!("ldm_{}.ckpt", kind.as_str())));
                Ok(())
            })?;
        }
        Command::Sample { args, steps, guidance_scale, count_per_class } => {
            let mut cfg = args.fold.common.config()?;
            if let Some(s) = steps {
                cfg.sampling.steps = *s;
            }
            if let Some(g) = guidance_scale {
                cfg.sampling.guidance_scale = *g;
            }
            if count_per_class.is_some() {
                cfg.sampling.count_per_class = *count_per_class;
            }
            cfg.validate()?;
            let kind = cond_of(&cfg, args.cond);
            with_fold(&ws, &cfg, args.fold.fold, |f| {
                let teacher = teacher_if(f, kind)?;
                let codec = f.load_codec()?;
                let denoiser = f.load_denoiser(kind)?;
                let out = f.sample(kind, teacher.as_ref(), &codec, &denoiser)?;
                println!("{} synthetic patches", out.len());
                report(&f.dir.join(format!("synthetic-{}", kind.as_str())));
                Ok(())
            })?;
        }
        Command::TrainClassifier(a) => {
            let cfg = a.common.config()?;
            with_fold(&ws, &cfg, a.fold, |f| {
                let synthetic = match cfg.augmentation.cond_kind() {
                    Some(kind) => f.load_synthetic(kind)?,
                    None => Vec::new(),
                };
                f.train_classifier(&synthetic)?;
                report(&f.dir.join("classifier.ckpt"));
                Ok(())
            })?;
        }
        Command::Evaluate { common, fold: Some(k) } => {
            let cfg = common.config()?;
            with_fold(&ws, &cfg, *k, |f| {
                let model = f.load_classifier()?;
                let result = match cfg.augmentation.cond_kind() {
                    Some(kind) if cfg.sampling.fid => {
                        let teacher = f.load_teacher()?.extractor();
                        let synthetic = f.load_synthetic(kind)?;
                        f.evaluate(&model, Some((&teacher, &synthetic)))?
                    }
                    _ => f.evaluate(&model, None)?,
                };
                let m = &result.metrics;
                println!("accuracy {:.4} (tp {} fn {} tn {} fp {})", m.accuracy, m.tp, m.fn_, m.tn, m.fp);
                if let Some(fid) = result.fid {
                    println!("fid {} {:.4}", fid.pair, fid.fid);
                }
                Ok(())
            })?;
        }
        Command::Evaluate { common, fold: None } => {
            let cfg = common.config()?;
            for row in pipeline::write_reports(&cfg, &ws).map_err(|e| e.in_stage("evaluate"))? {
                println!("{} {} {}", row.config, row.metric, row.formatted);
            }
        }
        Command::RunExperiment { common, all_arms } => {
            let base = common.config()?;
            let configs: Vec<ExperimentConfig> = if *all_arms {
                pipeline::ARMS.iter().map(|&a| base.clone().with_augmentation(a)).collect()
            } else {
                vec![base]
            };
            for cfg in configs {
                let r = pipeline::run_experiment(&cfg, &ws)?;
                for row in &r.summary {
                    println!("{} {} {}", row.config, row.metric, row.formatted);
                }
                println!("{} finished in {:.1}s: {}", cfg.name, r.seconds, r.run_dir.display());
            }
        }
        Command::ExportFeatures(a) => {
            let cfg = a.fold.common.config()?;
            let kind = cond_of(&cfg, a.cond);
            with_fold(&ws, &cfg, a.fold.fold, |f| {
                let teacher = f.load_teacher()?.extractor();
                let synthetic = f.load_synthetic(kind).unwrap_or_default();
                report(&f.export_features(&teacher, &synthetic)?);
                Ok(())
            })?;
        }
        Command::PrintConfig(c) => println!("{}", c.config()?.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
