//! `dmsva` command line: `gen`, `train`, `eval`, `ablate`, `gradcheck`.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 input or config error, 3 numeric failure.

pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dmsva_core::evaluator::{
    cross_modal_recall, evaluate_dmsva, predictions, reports_csv, run_baseline, CopyOracle, EvalError, EvalReport, EvalSplit,
    FusionKind,
};
use dmsva_core::numkernel::Embedding;
use dmsva_core::synthgen::{build_world, make_dataset, read_dataset, write_dataset, Dataset, GenError};
use dmsva_core::trainer::{evaluate_loss, init_model, write_loss_csv, TrainError};
use dmsva_core::verify::{run_gradcheck, VerifyError};
use dmsva_core::{Checkpoint, LatentWorld, Trainer};

use config::RunConfig;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_JSON: &str = "eval_report.json";
pub const REPORT_CSV: &str = "eval_report.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Debug)]
pub enum Failure {
    Verification(String),
    Input(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Input(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Verification(m) | Failure::Input(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<GenError> for Failure {
    fn from(e: GenError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<VerifyError> for Failure {
    fn from(e: VerifyError) -> Self {
        Failure::Input(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dmsva", version, about = "Decoupled scene-voice alignment on a synthetic embedding world")]
#[command(after_help = "Any config field can be overridden as --section.field value, e.g. --train.lr 0.01")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the world, data, training and gradcheck seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the four-bank model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/dataset.jsonl`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out grid of the dataset's world.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the copy oracle (prediction = target) instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
    },
    /// Slot-count sweep against the fusion baselines.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every loss component's gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Splits `--a.b value` and `--a.b=value` overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Failure> {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            plain.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            plain.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| Failure::Input(format!("override --{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((plain, overrides))
}

/// Runs the command line and returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let (plain, overrides) = match split_overrides(args.into_iter().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(plain) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, overrides: &[(String, String)]) -> Result<(), Failure> {
    let resolve = |c: &Common| -> Result<RunConfig, Failure> {
        let cfg = RunConfig::resolve(c.config.as_deref(), c.seed, overrides)?;
        cfg.echo(&c.out)?;
        Ok(cfg)
    };
    match command {
        Command::Gen { common } => cmd_gen(&resolve(&common)?, &common.out),
        Command::Train { common, dataset, resume } => {
            let cfg = resolve(&common)?;
            let dataset = dataset.unwrap_or_else(|| common.out.join(DATASET_FILE));
            cmd_train(&cfg, &dataset, resume.as_deref(), &common.out)
        }
        Command::Eval { common, dataset, checkpoint, oracle } => {
            let cfg = resolve(&common)?;
            let dataset = dataset.unwrap_or_else(|| common.out.join(DATASET_FILE));
            let checkpoint = checkpoint.unwrap_or_else(|| common.out.join(CHECKPOINT_FILE));
            cmd_eval(&cfg, &dataset, (!oracle).then_some(checkpoint.as_path()), &common.out)
        }
        Command::Ablate { common } => cmd_ablate(&resolve(&common)?, &common.out),
        Command::Gradcheck { common } => cmd_gradcheck(&resolve(&common)?, &common.out),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn generate(cfg: &RunConfig) -> Result<(LatentWorld, Dataset), Failure> {
    let world = build_world(&cfg.world)?;
    let dataset = make_dataset(&world, cfg.data.n_samples as usize, cfg.data.mode_mix, cfg.data.seed)?;
    Ok((world, dataset))
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (_, dataset) = generate(cfg)?;
    let path = out.join(DATASET_FILE);
    write_dataset(&path, &dataset)?;
    let [s, sc, dc] = dataset.manifest.counts;
    println!("wrote {} pairs to {} (standard {s}, same-character {sc}, different-character {dc})", dataset.pairs.len(), path.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, dataset_path: &Path, resume: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let dataset = read_dataset(dataset_path)?;
    let dim = dataset.pairs.first().ok_or(TrainError::EmptyDataset)?.primary.a.dim();
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(Checkpoint::load(path)?)?.with_config(cfg.train.clone())?,
        None => Trainer::new(init_model(&cfg.train, dim)?, cfg.train.clone())?,
    };
    if trainer.model().dim() != dim {
        return Err(Failure::Input(format!("checkpoint dimension {} does not match dataset dimension {dim}", trainer.model().dim())));
    }
    let first_step = trainer.step();
    let every = cfg.train.checkpoint_every;
    if every > 0 {
        let dir = out.join(CHECKPOINT_DIR);
        fs::create_dir_all(&dir).map_err(|e| Failure::Input(format!("cannot create {}: {e}", dir.display())))?;
    }
    let history = trainer.run_until(&dataset.pairs, cfg.train.steps, |t, _| {
        if every > 0 && t.step() % every == 0 {
            t.checkpoint().save(&out.join(CHECKPOINT_DIR).join(format!("step_{:08}.bin", t.step())))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&out.join(CHECKPOINT_FILE))?;
    write_loss_csv(&out.join(LOSS_FILE), &history, first_step)?;
    let final_loss = evaluate_loss(trainer.model(), &dataset.pairs, &cfg.train.loss_weights)?;
    println!("trained steps {first_step}..{}; dataset loss {:.6}", trainer.step(), final_loss.total);
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, dataset_path: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let dataset = read_dataset(dataset_path)?;
    let world = build_world(&dataset.manifest.world)?;
    let split = EvalSplit::grid(&world, &cfg.eval);
    let report = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let train_cfg = ckpt.config.clone();
            let trainer = Trainer::from_checkpoint(ckpt)?;
            let model = if cfg.eval.use_ema { trainer.ema_model()? } else { trainer.into_model() };
            let mut report = evaluate_dmsva(&model, &world, &split, &cfg.eval, &train_cfg)?;
            report.steps = train_cfg.steps;
            report
        }
        None => {
            let preds = predictions(&CopyOracle, &split.pairs)?;
            let targets: Vec<Embedding> = split.pairs.iter().map(|p| p.primary.a.clone()).collect();
            EvalReport {
                model: "copy_oracle".into(),
                slot_count: None,
                recall_at_1: cross_modal_recall(&preds, &targets, 1)?,
                recall_at_5: cross_modal_recall(&preds, &targets, 5.min(targets.len()))?,
                mean_align_kl: None,
                timbre_margin: None,
                env_margin: None,
                eval_pairs: targets.len(),
                steps: 0,
                seed: cfg.eval.eval_seed,
            }
        }
    };
    write(&out.join(REPORT_JSON), report.to_json())?;
    write(&out.join(REPORT_CSV), reports_csv(std::slice::from_ref(&report)))?;
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}: recall@1 {:.4} recall@5 {:.4} timbre_margin {} env_margin {} ({} pairs)",
        report.model,
        report.recall_at_1,
        report.recall_at_5,
        opt(report.timbre_margin),
        opt(report.env_margin),
        report.eval_pairs
    );
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (world, dataset) = generate(cfg)?;
    let split = EvalSplit::grid(&world, &cfg.eval);
    let wants = |m: &str| cfg.ablate.models.iter().any(|x| x == m);
    let mut reports = Vec::new();
    for &n in cfg.ablate.n_values.iter().filter(|_| wants("dmsva")) {
        let train = dmsva_core::TrainConfig { slot_count: n, ..cfg.train.clone() };
        let fit = dmsva_core::fit(&dataset.pairs, &train)?;
        let model = if cfg.eval.use_ema { &fit.ema_model } else { &fit.model };
        reports.push(evaluate_dmsva(model, &world, &split, &cfg.eval, &train)?);
        println!("dmsva N={n}: recall@1 {:.4}", reports.last().expect("just pushed").recall_at_1);
    }
    for &n in cfg.ablate.n_values.iter().filter(|_| wants("attn_fusion")) {
        let train = dmsva_core::TrainConfig { slot_count: n, ..cfg.train.clone() };
        reports.push(run_baseline(FusionKind::AttnFusion, &dataset.pairs, &split, &train)?);
        println!("attn_fusion N={n}: recall@1 {:.4}", reports.last().expect("just pushed").recall_at_1);
    }
    if wants("concat_fusion") {
        reports.push(run_baseline(FusionKind::ConcatFusion, &dataset.pairs, &split, &cfg.train)?);
        println!("concat_fusion: recall@1 {:.4}", reports.last().expect("just pushed").recall_at_1);
    }
    let path = out.join(ABLATION_FILE);
    write(&path, reports_csv(&reports))?;
    println!("wrote {} rows to {}", reports.len(), path.display());
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let opts = cfg.gradcheck.options(&cfg.train);
    let report = run_gradcheck(&opts)?;
    write(&out.join(GRADCHECK_FILE), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    for c in &report.components {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<11} trials {} entries {} max relative error {:.3e}",
            c.component.label(),
            c.trials,
            c.checked_entries,
            c.max_relative_error
        );
    }
    if report.passed() {
        return Ok(());
    }
    let mut lines = Vec::new();
    for c in report.components.iter().filter(|c| !c.passed()) {
        let f = &c.failures[0];
        lines.push(format!(
            "{} failed in {} of {} bank checks; first at trial {} (seed {}), bank {}, index {}: analytic {:.6e} vs numeric {:.6e} (relative error {:.3e})",
            c.component.label(),
            c.failures.len(),
            4 * c.trials,
            f.trial,
            opts.seed,
            f.bank.short_name(),
            f.index,
            f.analytic,
            f.numeric,
            f.relative_error
        ));
    }
    Err(Failure::Verification(lines.join("\n")))
}
