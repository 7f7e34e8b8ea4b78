//! The `diffaug` binary: corpus generation, training, evaluation,
//! diagnostics, sweeps, and the gradient audit.
//!
//! Every plan field has a matching kebab-case flag; a config file of
//! `key = value` lines sets the same fields and flags override it.
//! The log level comes from `DIFFAUG_LOG`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::audit::{gradient_audit, AuditConfig};
use crate::corpus::{gen_corpus, load_corpus, load_pairs, save_corpus, CorpusSizes, VocabSpec};
use crate::diagnostics::{
    repr_divergence, saturation_by_layer, variance_gaps, weight_convergence, DivergenceMode,
};
use crate::encoder::EncodeMode;
use crate::pe::PeModule;
use crate::pipeline::{
    evaluate_dev, resume, run_schedule, sweep, write_loss_csv, write_metrics_csv, write_sweep_csv,
    AugmentationKind, Checkpoint, RunOutcome, TrainMask, TrainPlan,
};
use crate::{Error, Result};

/// Plan fields settable from a config file or mirrored CLI flags.
pub const CONFIG_KEYS: &[&str] = &[
    "layers",
    "hidden-dim",
    "n-heads",
    "max-len",
    "dropout-p",
    "pooling",
    "prefix-len",
    "schedule",
    "setting",
    "augmentation",
    "stage1-steps",
    "stage1-lr",
    "stage1-batch",
    "stage2-epochs",
    "stage2-lr",
    "stage2-batch",
    "alpha",
    "temperature",
    "eval-every",
    "seed",
    "bottleneck",
    "lora-scale",
    "inference",
    "keep-reparam",
    "kappa-mode",
    "train-theta1",
    "train-theta2",
    "train-phi",
];

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(format!("{key}: cannot parse '{value}': {e}")))
}

/// Applies one schema key. Setting `augmentation` also resets the
/// stage-2 trainability mask to that kind's default, so explicit
/// `train-*` keys must come after it.
pub fn apply_key(plan: &mut TrainPlan, key: &str, value: &str) -> Result<()> {
    match key {
        "layers" => plan.model.layers = parse_as(key, value)?,
        "hidden-dim" => plan.model.hidden_dim = parse_as(key, value)?,
        "n-heads" => plan.model.n_heads = parse_as(key, value)?,
        "max-len" => plan.model.max_len = parse_as(key, value)?,
        "dropout-p" => plan.model.dropout_p = parse_as(key, value)?,
        "pooling" => plan.model.pooling = value.parse()?,
        "prefix-len" => plan.model.prefix_len = parse_as(key, value)?,
        "schedule" => plan.schedule = value.parse()?,
        "setting" => plan.stage2.setting = value.parse()?,
        "augmentation" => {
            plan.augmentation = value.parse()?;
            plan.mask = TrainMask::for_kind(plan.augmentation);
        }
        "stage1-steps" => plan.stage1.steps = parse_as(key, value)?,
        "stage1-lr" => plan.stage1.learning_rate = parse_as(key, value)?,
        "stage1-batch" => plan.stage1.batch = parse_as(key, value)?,
        "stage2-epochs" => plan.stage2.epochs = parse_as(key, value)?,
        "stage2-lr" => plan.stage2.learning_rate = parse_as(key, value)?,
        "stage2-batch" => plan.stage2.batch = parse_as(key, value)?,
        "alpha" => plan.stage2.alpha = parse_as(key, value)?,
        "temperature" => plan.temperature = parse_as(key, value)?,
        "eval-every" => plan.eval_every = parse_as(key, value)?,
        "seed" => plan.seed = parse_as(key, value)?,
        "bottleneck" => plan.pe.bottleneck = parse_as(key, value)?,
        "lora-scale" => plan.pe.lora_scale = parse_as(key, value)?,
        "inference" => plan.inference = value.parse()?,
        "keep-reparam" => plan.keep_reparam = parse_as(key, value)?,
        "kappa-mode" => plan.kappa_mode = value.parse()?,
        "train-theta1" => plan.mask.theta1 = parse_as(key, value)?,
        "train-theta2" => plan.mask.theta2 = parse_as(key, value)?,
        "train-phi" => plan.mask.phi = parse_as(key, value)?,
        other => {
            return Err(Error::config(format!(
                "unknown config key '{other}' (see --help for the schema)"
            )))
        }
    }
    Ok(())
}

/// Parses a `key = value` config file (# starts a comment).
pub fn apply_config_file(plan: &mut TrainPlan, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "{}:{}: expected 'key = value', got '{raw}'",
                path.display(),
                i + 1
            )));
        };
        apply_key(plan, key.trim(), value.trim())?;
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(
    name = "diffaug",
    version,
    about = "Differentiable augmentation for contrastive sentence embeddings, desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic NLI/STS corpus into a directory
    GenData(GenDataArgs),
    /// Train per the configured schedule; writes checkpoints and CSVs
    Train(TrainArgs),
    /// Spearman correlation of a checkpoint on a scored-pair file
    Eval(EvalArgs),
    /// Divergence/convergence/saturation report for a checkpoint
    Diagnose(DiagnoseArgs),
    /// Repeat training across one axis; writes aggregated CSVs
    Sweep(SweepArgs),
    /// Finite-difference audit of all four objectives on a toy model
    GradCheck(GradCheckArgs),
}

/// Flags mirroring the config schema one-to-one.
#[derive(Args, Debug, Clone, Default)]
struct PlanArgs {
    /// Config file with `key = value` lines (flags override it)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, alias = "d")]
    hidden_dim: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    dropout_p: Option<f64>,
    /// first-token | mean | mask-token
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long, alias = "l")]
    prefix_len: Option<usize>,
    /// two-stage | joint | sup-unsup | sup-joint
    #[arg(long)]
    schedule: Option<String>,
    /// semi | supervised
    #[arg(long)]
    setting: Option<String>,
    /// prefix-different | prefix-same | prefix-fixed |
    /// prefix-tuning-only | dropout | token-replacement | adapter | lora
    #[arg(long)]
    augmentation: Option<String>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage1_lr: Option<f64>,
    #[arg(long)]
    stage1_batch: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    #[arg(long)]
    stage2_batch: Option<usize>,
    /// Auxiliary cross-entropy weight in stage 2
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Adapter/LoRA bottleneck dimension r
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    lora_scale: Option<f64>,
    /// concat-prefixes | average-embeddings
    #[arg(long)]
    inference: Option<String>,
    #[arg(long)]
    keep_reparam: Option<bool>,
    /// activations | weights
    #[arg(long)]
    kappa_mode: Option<String>,
    #[arg(long)]
    train_theta1: Option<bool>,
    #[arg(long)]
    train_theta2: Option<bool>,
    #[arg(long)]
    train_phi: Option<bool>,
}

impl PlanArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out: Vec<(&'static str, String)> = Vec::new();
        let mut push = |key: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((key, v));
            }
        };
        // augmentation first: it resets the trainability mask
        push("augmentation", self.augmentation.clone());
        push("layers", self.layers.map(|v| v.to_string()));
        push("hidden-dim", self.hidden_dim.map(|v| v.to_string()));
        push("n-heads", self.n_heads.map(|v| v.to_string()));
        push("max-len", self.max_len.map(|v| v.to_string()));
        push("dropout-p", self.dropout_p.map(|v| v.to_string()));
        push("pooling", self.pooling.clone());
        push("prefix-len", self.prefix_len.map(|v| v.to_string()));
        push("schedule", self.schedule.clone());
        push("setting", self.setting.clone());
        push("stage1-steps", self.stage1_steps.map(|v| v.to_string()));
        push("stage1-lr", self.stage1_lr.map(|v| v.to_string()));
        push("stage1-batch", self.stage1_batch.map(|v| v.to_string()));
        push("stage2-epochs", self.stage2_epochs.map(|v| v.to_string()));
        push("stage2-lr", self.stage2_lr.map(|v| v.to_string()));
        push("stage2-batch", self.stage2_batch.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("temperature", self.temperature.map(|v| v.to_string()));
        push("eval-every", self.eval_every.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("bottleneck", self.bottleneck.map(|v| v.to_string()));
        push("lora-scale", self.lora_scale.map(|v| v.to_string()));
        push("inference", self.inference.clone());
        push("keep-reparam", self.keep_reparam.map(|v| v.to_string()));
        push("kappa-mode", self.kappa_mode.clone());
        push("train-theta1", self.train_theta1.map(|v| v.to_string()));
        push("train-theta2", self.train_theta2.map(|v| v.to_string()));
        push("train-phi", self.train_phi.map(|v| v.to_string()));
        out
    }

    fn resolve(&self) -> Result<TrainPlan> {
        let mut plan = TrainPlan::toy();
        if let Some(path) = &self.config {
            apply_config_file(&mut plan, path)?;
        }
        for (key, value) in self.overrides() {
            apply_key(&mut plan, key, &value)?;
        }
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = VocabSpec::default().n_topics)]
    n_topics: usize,
    #[arg(long, default_value_t = VocabSpec::default().words_per_topic)]
    words_per_topic: usize,
    #[arg(long, default_value_t = VocabSpec::default().synonyms_per_word)]
    synonyms_per_word: usize,
    #[arg(long, default_value_t = VocabSpec::default().function_words)]
    function_words: usize,
    #[arg(long, default_value_t = CorpusSizes::default().unlabeled)]
    n_unlabeled: usize,
    #[arg(long, default_value_t = CorpusSizes::default().triplets)]
    n_triplets: usize,
    #[arg(long, default_value_t = CorpusSizes::default().sts_train)]
    n_sts_train: usize,
    #[arg(long, default_value_t = CorpusSizes::default().sts_dev)]
    n_sts_dev: usize,
    #[arg(long, default_value_t = CorpusSizes::default().sts_test)]
    n_sts_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    plan: PlanArgs,
    /// Corpus directory produced by gen-data
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Output directory (default `runs/<timestamp>`)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint (its stored plan wins)
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scored-pair JSONL (default `<data-dir>/sts_test.jsonl`)
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Saturation threshold ε
    #[arg(long, default_value_t = crate::diagnostics::DEFAULT_SATURATION_EPS)]
    epsilon: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// prefix-len | stage1-steps | alpha
    #[arg(long)]
    axis: String,
    /// Comma-separated values, e.g. `0,2,4,8`
    #[arg(long)]
    values: String,
    /// Parallel runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, alias = "d", default_value_t = 16)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, alias = "l", default_value_t = 4)]
    prefix_len: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses argv and executes one command. Exit codes: 0 success,
/// 1 configuration error, 2 runtime error.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("DIFFAUG_LOG", "info"),
    )
    .format_timestamp(None)
    .try_init();

    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn default_out_dir() -> PathBuf {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("run-{stamp}"))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec = VocabSpec {
        n_topics: args.n_topics,
        words_per_topic: args.words_per_topic,
        synonyms_per_word: args.synonyms_per_word,
        function_words: args.function_words,
    };
    let sizes = CorpusSizes {
        unlabeled: args.n_unlabeled,
        triplets: args.n_triplets,
        sts_train: args.n_sts_train,
        sts_dev: args.n_sts_dev,
        sts_test: args.n_sts_test,
    };
    let corpus = gen_corpus(&spec, &sizes, args.seed)?;
    save_corpus(&corpus, &args.out_dir)?;
    println!(
        "wrote corpus to {}: vocab {} ids, {} unlabeled, {} triplets, STS {}/{}/{}",
        args.out_dir.display(),
        corpus.vocab.vocab_size(),
        corpus.unlabeled.len(),
        corpus.triplets.len(),
        corpus.sts_train.len(),
        corpus.sts_dev.len(),
        corpus.sts_test.len()
    );
    Ok(())
}

fn print_report(outcome: &RunOutcome) {
    let fmt = |v: Option<f64>| {
        v.map(|x| format!("{x:.4}"))
            .unwrap_or_else(|| "undefined".into())
    };
    println!("steps trained: {}", outcome.report.trace.step);
    println!("best dev spearman: {}", fmt(outcome.report.best_dev));
    println!("final dev spearman: {}", fmt(outcome.report.final_dev));
    println!("test spearman: {}", fmt(outcome.report.test_spearman));
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.data_dir)?;
    let out_dir = args.out_dir.unwrap_or_else(default_out_dir);
    fs::create_dir_all(&out_dir)?;

    let outcome = if let Some(path) = &args.resume {
        log::info!("resuming from {}", path.display());
        let ckpt = Checkpoint::load(path)?;
        resume(ckpt, &corpus)?
    } else {
        let plan = args.plan.resolve()?;
        log::info!(
            "training: schedule {:?}, augmentation {}, seed {}",
            plan.schedule,
            plan.augmentation,
            plan.seed
        );
        run_schedule(&plan, &corpus)?
    };

    let layers = outcome.state.config.layers;
    write_metrics_csv(&outcome.report, layers, &out_dir.join("metrics.csv"))?;
    write_loss_csv(&outcome.report, &out_dir.join("losses.csv"))?;
    outcome.last.save(&out_dir.join("final.daug"))?;
    if let Some(best) = &outcome.best {
        best.save(&out_dir.join("best.daug"))?;
    }
    print_report(&outcome);
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let pairs_path = args
        .pairs
        .unwrap_or_else(|| args.data_dir.join("sts_test.jsonl"));
    let pairs = load_pairs(&pairs_path)?;
    if pairs.is_empty() {
        return Err(Error::input(format!(
            "{} holds no scored pairs",
            pairs_path.display()
        )));
    }
    match evaluate_dev(&ckpt.state, &pairs, ckpt.plan.inference)? {
        Some(rho) => println!("spearman: {rho:.4}"),
        None => println!("spearman: undefined (constant predictions or golds)"),
    }
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let corpus = load_corpus(&args.data_dir)?;
    let state = &ckpt.state;
    let probe: Vec<_> = corpus.sts_dev.iter().take(32).map(|p| p.s1.clone()).collect();
    if probe.is_empty() {
        return Err(Error::input("diagnose needs a non-empty sts_dev split"));
    }

    println!("checkpoint: {}", args.checkpoint.display());
    println!(
        "position: phase {}, step {} (global {})",
        ckpt.phase_index, ckpt.step_in_phase, ckpt.global_step
    );

    let pairs: Vec<_> = probe.iter().map(|s| (s.clone(), s.clone())).collect();
    let mode = if state.augmentation == AugmentationKind::Dropout {
        DivergenceMode::Dropout { seed: ckpt.plan.seed }
    } else {
        DivergenceMode::Eval
    };
    let delta = repr_divergence(
        &pairs,
        &state.config,
        &state.encoder,
        state.modules.first(),
        state.modules.second(),
        pairs.len(),
        mode,
    )?;
    println!("representation divergence (delta): {delta:.6}");

    if let Some(PeModule::Prefix(p)) = state.modules.first() {
        if p.prefix_len > 0 {
            let wc =
                weight_convergence(&state.config, &state.encoder, p, &probe, ckpt.plan.kappa_mode)?;
            println!("weight convergence (kappa): {:.6}", wc.aggregate);
            for (m, (k, v)) in wc
                .per_layer_key
                .iter()
                .zip(&wc.per_layer_value)
                .enumerate()
            {
                println!("  layer {m}: kappa_k {k:.6}, kappa_v {v:.6}");
            }
            let gaps = variance_gaps(&state.config, &state.encoder, p, &probe)?;
            for (m, g) in gaps.iter().enumerate() {
                println!("  layer {m}: variance gap {g:.6}");
            }
        }
    }

    let saturation = saturation_by_layer(
        &state.config,
        &state.encoder,
        state.modules.first(),
        &probe,
        args.epsilon,
    )?;
    for (m, s) in saturation.iter().enumerate() {
        println!("  layer {m}: saturation fraction {s:.4} (eps {})", args.epsilon);
    }

    if !corpus.sts_dev.is_empty() {
        match evaluate_dev(state, &corpus.sts_dev, ckpt.plan.inference)? {
            Some(rho) => println!("dev spearman: {rho:.4}"),
            None => println!("dev spearman: undefined"),
        }
    }
    let _ = EncodeMode::Eval;
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let corpus = load_corpus(&args.data_dir)?;
    let plan = args.plan.resolve()?;
    let axis = args.axis.parse()?;
    let values: Vec<f64> = args
        .values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::config(format!("bad sweep value '{v}': {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let out_dir = args.out_dir.unwrap_or_else(default_out_dir);
    let result = sweep(axis, &values, &plan, &corpus, args.jobs)?;
    write_sweep_csv(&result, &out_dir)?;
    println!("value,best_dev,final_dev,test_spearman");
    for row in &result.rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        println!(
            "{},{},{},{}",
            row.value,
            fmt(row.best_dev),
            fmt(row.final_dev),
            fmt(row.test_spearman)
        );
    }
    println!("CSVs in {}", out_dir.display());
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let audit = AuditConfig {
        layers: args.layers,
        hidden_dim: args.hidden_dim,
        n_heads: args.n_heads,
        prefix_len: args.prefix_len,
        batch: args.batch,
        seed: args.seed,
    };
    let results = gradient_audit(&audit)?;
    let mut worst: f64 = 0.0;
    for (name, err) in &results {
        println!("{name}: max relative error {err:.3e}");
        worst = worst.max(*err);
    }
    println!("overall max relative error {worst:.3e}");
    if worst >= 1e-5 {
        return Err(Error::Input(format!(
            "gradient audit failed: max relative error {worst:.3e} >= 1e-5"
        )));
    }
    Ok(())
}
