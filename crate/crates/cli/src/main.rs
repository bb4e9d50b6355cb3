//! `kcod`: synthetic OOD intent discovery from the command line.
//!
//! Subcommands:
//! - generate: blobs and an IND/OOD split
//! - pretrain: CE + KCL on the IND file
//! - cluster: contrastive clustering of the OOD file
//! - evaluate: ACC/ARI/NMI/SC and distance analysis of an assignments file
//! - estimate: over-cluster and count confident clusters
//! - pipeline: all of the above in one directory, optionally with `--sweep`
//!
//! Exit codes: 0 success, 2 usage or validation, 3 data, 4 divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kcod::cluster::{encode_representations, estimate_k, ClusterMode};
use kcod::data_io::load_jsonl;
use kcod::metrics::{EvalReport, NmiNormalization};
use kcod::model::EncoderModel;
use kcod::pipeline::{self, Manifest, RunConfig};
use kcod::{KcodError, Result};

#[derive(Parser)]
#[command(name = "kcod", version, about = "K-nearest neighbour contrastive OOD intent discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write ind.jsonl, ood.jsonl and manifest.json.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Pre-train on the IND file; writes a checkpoint and a loss CSV.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ind: PathBuf,
        #[command(flatten)]
        stage: StageFlags,
        #[command(flatten)]
        kcl: KclFlags,
    },
    /// Cluster the OOD file starting from a pre-trained checkpoint.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        stage: StageFlags,
        #[command(flatten)]
        clu: ClusterFlags,
    },
    /// Score an assignments file against the OOD labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        /// Features for distances and SC; raw inputs without it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "geometric")]
        nmi: NmiArg,
    },
    /// Estimate the number of OOD clusters with K' over-clustering.
    Estimate {
        #[arg(long)]
        ood: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k_prime: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// generate, pretrain, cluster and evaluate into one run directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        pretrain_batch: Option<usize>,
        #[command(flatten)]
        kcl: KclFlags,
        #[command(flatten)]
        stage: StageFlags,
        #[command(flatten)]
        clu: ClusterFlags,
        /// Also run the one-factor grids over K_kcl, threshold and K_neg.
        #[arg(long)]
        sweep: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    out: PathBuf,
    /// RunConfig JSON; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataFlags {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    center_scale: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    signal_dims: Option<usize>,
    #[arg(long)]
    nuisance_sigma: Option<f64>,
    #[arg(long)]
    ood_ratio: Option<f64>,
}

/// Epochs and batch size of the stage the subcommand runs.
#[derive(Args)]
struct StageFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct KclFlags {
    #[arg(long)]
    k_kcl: Option<usize>,
    /// Temperature of KCL and of the instance contrast.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct ClusterFlags {
    #[arg(long)]
    mode: Option<ClusterMode>,
    #[arg(long)]
    k_neg: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    tau_clu: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Cluster count; otherwise read from the manifest beside the OOD file.
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    estimate_c: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum NmiArg {
    Geometric,
    Arithmetic,
}

impl From<NmiArg> for NmiNormalization {
    fn from(a: NmiArg) -> Self {
        match a {
            NmiArg::Geometric => NmiNormalization::Geometric,
            NmiArg::Arithmetic => NmiNormalization::Arithmetic,
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Common {
    fn base(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => pipeline::load_run_config(p)?,
            None => RunConfig::default(),
        };
        set(&mut cfg.seed, self.seed);
        Ok(cfg)
    }
}

impl DataFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.classes, self.classes);
        set(&mut cfg.per_class, self.per_class);
        set(&mut cfg.dim, self.dim);
        set(&mut cfg.center_scale, self.center_scale);
        set(&mut cfg.noise_sigma, self.noise_sigma);
        if self.signal_dims.is_some() {
            cfg.signal_dims = self.signal_dims;
        }
        if self.nuisance_sigma.is_some() {
            cfg.nuisance_sigma = self.nuisance_sigma;
        }
        set(&mut cfg.ood_ratio, self.ood_ratio);
    }
}

impl KclFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.k_kcl, self.k_kcl);
        set(&mut cfg.tau, self.tau);
    }
}

impl ClusterFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.mode, self.mode);
        set(&mut cfg.k_neg, self.k_neg);
        set(&mut cfg.threshold, self.threshold);
        set(&mut cfg.tau_clu, self.tau_clu);
        set(&mut cfg.dropout, self.dropout);
        if self.c.is_some() {
            cfg.c = self.c;
        }
        cfg.estimate_c |= self.estimate_c;
    }
}

fn manifest_hint(ood: &Path) -> Result<Option<usize>> {
    match pipeline::manifest_beside(ood) {
        Some(p) => Ok(Some(Manifest::load(&p)?.ood_classes.len())),
        None => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, data } => {
            let mut cfg = common.base()?;
            data.apply(&mut cfg);
            let (ind, ood, _) = pipeline::generate(&cfg, &common.out)?;
            println!("wrote {} IND and {} OOD samples to {}", ind.len(), ood.len(), common.out.display());
        }
        Command::Pretrain { common, ind, stage, kcl } => {
            let mut cfg = common.base()?;
            set(&mut cfg.pretrain_epochs, stage.epochs);
            set(&mut cfg.pretrain_batch, stage.batch);
            kcl.apply(&mut cfg);
            cfg.validate()?;
            let data = load_jsonl(&ind)?;
            pipeline::run_pretrain(&cfg, &data, &common.out)?;
            println!("wrote {}", common.out.join(pipeline::PRETRAIN_CKPT).display());
        }
        Command::Cluster { common, ood, checkpoint, stage, clu } => {
            let mut cfg = common.base()?;
            set(&mut cfg.epochs, stage.epochs);
            set(&mut cfg.batch, stage.batch);
            clu.apply(&mut cfg);
            cfg.validate()?;
            let data = load_jsonl(&ood)?;
            let model = EncoderModel::load(&checkpoint)?;
            let hint = manifest_hint(&ood)?;
            let (_, summary) = pipeline::run_cluster(&cfg, &model, &data, hint, &common.out)?;
            println!(
                "{} clusters, mode {}, best epoch {}, best SC {}",
                summary.clusters,
                summary.mode,
                summary.best_epoch.map_or_else(|| "n/a".to_string(), |e| e.to_string()),
                summary.best_sc.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
            );
        }
        Command::Evaluate { pred, ood, checkpoint, out, nmi } => {
            let truth = load_jsonl(&ood)?;
            let pairs = pipeline::load_predictions(&pred)?;
            let model = checkpoint.as_deref().map(EncoderModel::load).transpose()?;
            let r = pipeline::run_evaluate(&pairs, &truth, model.as_ref(), nmi.into(), &out)?;
            print_report(&r);
        }
        Command::Estimate { ood, checkpoint, k_prime, seed } => {
            let data = load_jsonl(&ood)?;
            let model = EncoderModel::load(&checkpoint)?;
            let z = encode_representations(&model, &data)?;
            println!("{}", estimate_k(&z, k_prime, seed)?);
        }
        Command::Pipeline {
            common,
            data,
            pretrain_epochs,
            pretrain_batch,
            kcl,
            stage,
            clu,
            sweep,
        } => {
            let mut cfg = common.base()?;
            data.apply(&mut cfg);
            set(&mut cfg.pretrain_epochs, pretrain_epochs);
            set(&mut cfg.pretrain_batch, pretrain_batch);
            kcl.apply(&mut cfg);
            set(&mut cfg.epochs, stage.epochs);
            set(&mut cfg.batch, stage.batch);
            clu.apply(&mut cfg);
            cfg.validate()?;
            let threads = if sweep { sweep_threads()? } else { None };
            let r = pipeline::run_pipeline(&cfg, &common.out)?;
            print_report(&r);
            if sweep {
                let rows = pipeline::run_sweep(&cfg, &common.out, threads)?;
                println!("{} sweep cells in {}", rows.len(), common.out.join(pipeline::SWEEP_CSV).display());
            }
        }
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    let sc = r.sc.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!("acc {:.4} ari {:.4} nmi {:.4} sc {sc}", r.acc, r.ari, r.nmi);
}

fn sweep_threads() -> Result<Option<usize>> {
    match std::env::var("KCOD_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| KcodError::Parameter(format!("KCOD_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
