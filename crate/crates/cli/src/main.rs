//! `nextk`: data synthesis, teacher fitting, distillation, PPO fine-tuning
//! and evaluation from the command line.

mod config;
mod provenance;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use nextk::dataset::{generate_synthetic, prepare_dataset, PreparedData, SynthConfig};
use nextk::distill::pretrain_student;
use nextk::evalkit::{
    cutoff_sweep, evaluate, model_tradeoff, npcount, popularity_report, rerank_tradeoff,
    write_cutoff_csv, write_tradeoff_csv, Reranker, Scorer, Strategy, DEFAULT_ILD_LAMBDAS,
    DEFAULT_PCOUNT_LAMBDAS,
};
use nextk::nnet::{load_checkpoint, save_checkpoint, ModelParams};
use nextk::pipeline::{run_pipeline, PipelineInputs, PipelinePaths};
use nextk::ppo::finetune_cases;
use nextk::reward::{RewardKind, RewardSpec};
use nextk::seqcodec::Layout;
use nextk::teacher::{
    fit_shifting_teacher, generate_teacher_lists, read_teacher_lists, write_teacher_lists,
    MarkovTeacher, Teacher,
};

use config::{load_config, FinetuneConfig, SupervisedConfig};
use provenance::RunRecord;

const MODEL_FILE: &str = "model.ckpt";
const VALUE_FILE: &str = "value.ckpt";

#[derive(Parser)]
#[command(
    name = "nextk",
    version,
    about = "Generative Next-K sequential recommendation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-Markov interaction log with genre labels.
    SynthData(SynthArgs),
    /// Fit a teacher: first-order Markov counts or a shifting-trained decoder.
    FitTeacher(FitTeacherArgs),
    /// Write the teacher's Top-K list for every user's training prefix.
    GenTeacherLists(GenListsArgs),
    /// Train the generative student on teacher lists.
    Distill(DistillArgs),
    /// Align a distilled student with a list-level reward through PPO.
    Finetune(FinetuneArgs),
    /// Evaluate a model or teacher on the test users.
    Evaluate(EvaluateArgs),
    /// NDCG@k for k = 1..kmax under both inference strategies.
    SweepCutoff(SweepCutoffArgs),
    /// Accuracy versus diversity or popularity across lambda values.
    SweepTradeoff(SweepTradeoffArgs),
}

/// Dataset location and the leave-one-out split shared by all commands.
#[derive(Args, Clone)]
struct DataArgs {
    /// Directory holding interactions.csv (and optionally genres.csv).
    #[arg(long)]
    data: PathBuf,
    /// Seed choosing the validation users.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Number of users whose second-to-last item is held out for validation.
    #[arg(long, default_value_t = 128)]
    val_users: usize,
}

impl DataArgs {
    fn load(&self) -> Result<PreparedData> {
        prepare_dataset(&self.data, self.val_users, self.split_seed)
            .with_context(|| format!("loading dataset from {}", self.data.display()))
    }

    fn describe(&self) -> serde_json::Value {
        json!({ "dir": self.data, "split_seed": self.split_seed, "val_users": self.val_users })
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    genres: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with further generator settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherKind {
    Markov,
    Shifting,
}

#[derive(Args)]
struct FitTeacherArgs {
    #[arg(long, value_enum)]
    kind: TeacherKind,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Decay of the Markov teacher's older history terms.
    #[arg(long, default_value_t = nextk::teacher::DEFAULT_BETA)]
    beta: f64,
    /// Model and training settings (JSON) for the shifting teacher.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct GenListsArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Never list an item the user already interacted with.
    #[arg(long)]
    exclude_history: bool,
}

/// Flag overrides of the supervised training configuration.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut SupervisedConfig) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(p) = self.patience {
            cfg.train.patience = p;
        }
    }
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    teacher_lists: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Ndcg,
    Diversity,
    Pcount,
}

impl Objective {
    fn kind(self) -> RewardKind {
        match self {
            Objective::Ndcg => RewardKind::Ndcg,
            Objective::Diversity => RewardKind::NdcgPlusDiversity,
            Objective::Pcount => RewardKind::NdcgMinusPcount,
        }
    }
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory with the distilled student's model.ckpt (and optionally a
    /// value.ckpt to start the critic from).
    #[arg(long)]
    init: PathBuf,
    #[arg(long, value_enum)]
    objective: Objective,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    generators: Option<usize>,
    #[arg(long)]
    cache_m: Option<usize>,
    #[arg(long)]
    publish_every: Option<usize>,
    /// Episodes per generated batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_policy: Option<f64>,
    #[arg(long)]
    lr_value: Option<f64>,
    /// Pay the whole list reward at the last position.
    #[arg(long)]
    delayed_reward: bool,
    /// Run generation, optimisation and validation in one thread.
    #[arg(long)]
    single_threaded: bool,
    /// Wall-clock limit on optimisation.
    #[arg(long)]
    max_seconds: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Topk,
    Nextk,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Topk => Strategy::TopK,
            StrategyArg::Nextk => Strategy::NextK,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// A model directory (containing model.ckpt), a checkpoint file or a
    /// teacher file.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "nextk")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    exclude_history: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepCutoffArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    kmax: usize,
    #[arg(long)]
    exclude_history: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TradeoffMode {
    /// One fine-tuned model per lambda, decoded with Next-K.
    Rl,
    /// Maximal marginal relevance over the base model's scores.
    Mmr,
    /// Popularity-penalised re-ranking of the base model's scores.
    PopRerank,
}

#[derive(Args)]
struct SweepTradeoffArgs {
    #[arg(long, value_enum)]
    mode: TradeoffMode,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated lambda values. Defaults to 0,0.2,1,3 for MMR and 0,3,6
    /// for popularity re-ranking; in rl mode, to each run's recorded lambda.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Base model for the re-ranking modes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fine-tuned model directories for rl mode, one per lambda.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::FitTeacher(a) => fit_teacher(a),
        Command::GenTeacherLists(a) => gen_teacher_lists(a),
        Command::Distill(a) => distill(a),
        Command::Finetune(a) => finetune(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::SweepCutoff(a) => sweep_cutoff(a),
        Command::SweepTradeoff(a) => sweep_tradeoff(a),
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.users {
        cfg.num_users = v;
    }
    if let Some(v) = a.items {
        cfg.num_items = v;
    }
    if let Some(v) = a.genres {
        cfg.num_genres = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let data = generate_synthetic(&cfg)?;
    data.write(&a.out)?;
    log::info!(
        "wrote {} users, {} interactions over {} items to {}",
        data.log.users.len(),
        data.log.num_interactions(),
        cfg.num_items,
        a.out.display()
    );
    RunRecord::new("synth-data", cfg.seed, &cfg)?.write_dir(&a.out)
}

/// A model directory resolves to its `model.ckpt`.
fn model_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_scorer(path: &Path) -> Result<Teacher> {
    let file = model_path(path);
    Teacher::load(&file).with_context(|| format!("loading {}", file.display()))
}

fn fit_teacher(a: FitTeacherArgs) -> Result<()> {
    let data = a.data.load()?;
    match a.kind {
        TeacherKind::Markov => {
            let teacher =
                MarkovTeacher::fit(&data.split.train_sequences(), data.split.num_items, a.beta)?;
            Teacher::Markov(teacher).save(&a.out)?;
            let cfg = json!({ "kind": "markov", "beta": a.beta, "data": a.data.describe() });
            RunRecord::new("fit-teacher", 0, &cfg)?
                .input("output", &a.out)?
                .write_beside(&a.out)
        }
        TeacherKind::Shifting => {
            let mut cfg: SupervisedConfig = load_config(a.config.as_deref())?;
            a.train.apply(&mut cfg);
            let model = cfg.model_config(&data, 10, Layout::HistoryOnly)?;
            let log_path = provenance::sibling(&a.out, "train_log.csv");
            let outcome = fit_shifting_teacher(&data.split, &model, &cfg.train, Some(&log_path))?;
            save_checkpoint(&outcome.best, &a.out)?;
            log::info!(
                "best epoch {} with validation NDCG@10 {:.4}",
                outcome.best_epoch,
                outcome.best_val
            );
            let record = json!({ "kind": "shifting", "config": cfg, "model": model, "data": a.data.describe(),
                "best_epoch": outcome.best_epoch, "best_val_ndcg10": outcome.best_val });
            RunRecord::new("fit-teacher", cfg.train.seed, &record)?
                .input("output", &a.out)?
                .write_beside(&a.out)
        }
    }
}

fn gen_teacher_lists(a: GenListsArgs) -> Result<()> {
    let data = a.data.load()?;
    let teacher = load_scorer(&a.teacher)?;
    let lists = generate_teacher_lists(teacher.scorer(), &data.split, a.k, a.exclude_history)?;
    write_teacher_lists(&lists, &data.log.item_labels, &a.out)?;
    log::info!(
        "wrote {} teacher lists of length {}",
        lists.lists.len(),
        a.k
    );
    let cfg = json!({ "k": a.k, "exclude_history": a.exclude_history, "data": a.data.describe() });
    RunRecord::new("gen-teacher-lists", 0, &cfg)?
        .input("teacher", &model_path(&a.teacher))?
        .input("output", &a.out)?
        .write_beside(&a.out)
}

fn distill(a: DistillArgs) -> Result<()> {
    let data = a.data.load()?;
    let mut cfg: SupervisedConfig = load_config(a.config.as_deref())?;
    a.train.apply(&mut cfg);
    let lists = read_teacher_lists(&a.teacher_lists, &data.log.label_index())
        .with_context(|| format!("reading {}", a.teacher_lists.display()))?;
    let model = cfg.model_config(&data, lists.k, Layout::Generative)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let init = ModelParams::init(&model, cfg.train.seed)?;
    let outcome = pretrain_student(
        init,
        &lists,
        &data.split,
        &cfg.train,
        Some(&a.out.join("train_log.csv")),
    )?;
    save_checkpoint(&outcome.best, &a.out.join(MODEL_FILE))?;
    log::info!(
        "best epoch {} of {} with validation NDCG@10 {:.4}",
        outcome.best_epoch,
        outcome.epochs.len(),
        outcome.best_val
    );
    let record = json!({ "config": cfg, "model": model, "data": a.data.describe(),
        "best_epoch": outcome.best_epoch, "best_val_ndcg10": outcome.best_val, "stopped_early": outcome.stopped_early });
    RunRecord::new("distill", cfg.train.seed, &record)?
        .input("teacher_lists", &a.teacher_lists)?
        .input("model", &a.out.join(MODEL_FILE))?
        .write_dir(&a.out)
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let data = a.data.load()?;
    let mut cfg: FinetuneConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if a.delayed_reward {
        cfg.delayed_reward = true;
    }
    if let Some(v) = a.max_seconds {
        cfg.max_seconds = Some(v);
    }
    let p = &mut cfg.pipeline;
    if let Some(v) = a.generators {
        p.generators = v;
    }
    if let Some(v) = a.cache_m {
        p.cache_m = v;
    }
    if let Some(v) = a.publish_every {
        p.optimizer.publish_every = v;
    }
    if let Some(v) = a.batch_size {
        p.batch_size = v;
    }
    if let Some(v) = a.lr_policy {
        p.optimizer.ppo.lr_policy = v;
    }
    if let Some(v) = a.lr_value {
        p.optimizer.ppo.lr_value = v;
    }
    if let Some(v) = a.seed {
        p.optimizer.seed = v;
    }
    if a.single_threaded {
        p.single_threaded = true;
    }
    let seed = cfg.pipeline.optimizer.seed;

    let init_file = model_path(&a.init);
    let policy =
        load_checkpoint(&init_file).with_context(|| format!("loading {}", init_file.display()))?;
    if policy.config.layout != Layout::Generative {
        bail!("{} is not a generative model", init_file.display());
    }
    let value_file = a.init.join(VALUE_FILE);
    let value = if a.init.is_dir() && value_file.exists() {
        load_checkpoint(&value_file)?
    } else {
        ModelParams::value_from_policy(&policy, seed)?
    };
    let mut spec = RewardSpec::new(a.objective.kind(), a.lambda, policy.config.k);
    spec.delayed = cfg.delayed_reward;
    spec.validate(&data.catalog)?;

    let cases = finetune_cases(&data.split);
    let validation = data.split.validation_cases();
    if validation.is_empty() {
        bail!("fine-tuning selects checkpoints on validation users; --val-users must be positive");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let inputs = PipelineInputs {
        cases: &cases,
        validation: &validation,
        catalog: &data.catalog,
        spec: &spec,
    };
    let store = a.out.join("store");
    let paths = PipelinePaths {
        store: &store,
        logs: Some(&a.out),
    };
    let limit = cfg.max_seconds.map(Duration::from_secs_f64);
    let outcome = run_pipeline(
        &policy,
        &value,
        &inputs,
        &cfg.pipeline,
        cfg.steps,
        limit,
        &paths,
    )?;
    save_checkpoint(&outcome.best_policy, &a.out.join(MODEL_FILE))?;
    save_checkpoint(&outcome.best_value, &a.out.join(VALUE_FILE))?;
    log::info!(
        "{} steps in {:.1?}; best version {} with validation R {:.4}",
        outcome.optimizer.steps,
        outcome.elapsed,
        outcome.best_version,
        outcome.best_metric
    );
    let record = json!({
        "objective": spec.kind, "lambda": spec.lambda, "reward": spec, "config": cfg, "data": a.data.describe(),
        "checkpoint_versions": { "best": outcome.best_version, "final": outcome.optimizer.final_version,
            "published": outcome.optimizer.published.len() },
        "steps": outcome.optimizer.steps, "max_staleness": outcome.optimizer.max_staleness,
        "max_cache_len": outcome.max_cache_len, "corrupt_reads": outcome.corrupt_reads,
    });
    RunRecord::new("finetune", seed, &record)?
        .input("init", &init_file)?
        .input("model", &a.out.join(MODEL_FILE))?
        .write_dir(&a.out)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let data = a.data.load()?;
    let scorer = load_scorer(&a.checkpoint)?;
    let cases = data.split.test_cases();
    let strategy = Strategy::from(a.strategy);
    let report = evaluate(
        scorer.scorer(),
        &cases,
        &data.catalog,
        a.k,
        strategy,
        a.exclude_history,
    )?;
    let popular = popularity_report(&cases, &data.catalog, a.k)?;
    let np = npcount(&report, &popular)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    report.write_user_csv(&a.out.join("metrics_users.csv"))?;
    report.write_summary_json(
        &a.out.join("metrics.json"),
        json!({ "strategy": strategy.as_str(), "npcount": np, "exclude_history": a.exclude_history }),
    )?;
    println!(
        "NDCG@{k} {:.4}  Recall@{k} {:.4}  ILD@{k} {}  PCOUNT@{k} {:.4}  nPCOUNT@{k} {np:.4}",
        report.ndcg.mean,
        report.recall.mean,
        report
            .ild
            .map_or("n/a".to_string(), |v| format!("{:.4}", v.mean)),
        report.pcount.mean,
        k = a.k
    );
    let cfg = json!({ "strategy": strategy.as_str(), "k": a.k, "exclude_history": a.exclude_history,
        "data": a.data.describe() });
    RunRecord::new("evaluate", 0, &cfg)?
        .input("checkpoint", &model_path(&a.checkpoint))?
        .write_dir(&a.out)
}

fn sweep_cutoff(a: SweepCutoffArgs) -> Result<()> {
    let data = a.data.load()?;
    let scorer = load_scorer(&a.checkpoint)?;
    let rows = cutoff_sweep(
        scorer.scorer(),
        &data.split.test_cases(),
        a.kmax,
        a.exclude_history,
    )?;
    write_cutoff_csv(&rows, &a.out)?;
    let cfg =
        json!({ "kmax": a.kmax, "exclude_history": a.exclude_history, "data": a.data.describe() });
    RunRecord::new("sweep-cutoff", 0, &cfg)?
        .input("checkpoint", &model_path(&a.checkpoint))?
        .write_beside(&a.out)
}

fn sweep_tradeoff(a: SweepTradeoffArgs) -> Result<()> {
    let data = a.data.load()?;
    let cases = data.split.test_cases();
    let mut record = RunRecord::new("sweep-tradeoff", 0, &serde_json::Value::Null)?;
    let (rows, lambdas) = if a.mode == TradeoffMode::Rl {
        let dirs = a.checkpoints.clone().unwrap_or_default();
        if dirs.is_empty() {
            bail!("rl mode needs --checkpoints with one fine-tuned model directory per lambda");
        }
        let lambdas = match &a.lambdas {
            Some(l) if l.len() != dirs.len() => {
                bail!("{} lambdas given for {} checkpoints", l.len(), dirs.len())
            }
            Some(l) => l.clone(),
            None => dirs
                .iter()
                .map(|d| provenance::recorded_lambda(d))
                .collect::<Result<_>>()?,
        };
        let models = dirs
            .iter()
            .map(|d| load_scorer(d))
            .collect::<Result<Vec<_>>>()?;
        for d in &dirs {
            record = record.input("checkpoint", &model_path(d))?;
        }
        let pairs: Vec<(f64, &dyn Scorer)> = lambdas
            .iter()
            .copied()
            .zip(models.iter().map(|m| m.scorer()))
            .collect();
        (model_tradeoff(&pairs, &cases, &data.catalog, a.k)?, lambdas)
    } else {
        let base = a
            .checkpoint
            .as_ref()
            .context("re-ranking modes need --checkpoint with the base model")?;
        let (reranker, defaults): (Reranker, &[f64]) = if a.mode == TradeoffMode::Mmr {
            (Reranker::Mmr, &DEFAULT_ILD_LAMBDAS)
        } else {
            (Reranker::PopRerank, &DEFAULT_PCOUNT_LAMBDAS)
        };
        let lambdas = a.lambdas.clone().unwrap_or_else(|| defaults.to_vec());
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            bail!("lambdas must be non-negative");
        }
        let scorer = load_scorer(base)?;
        record = record.input("checkpoint", &model_path(base))?;
        (
            rerank_tradeoff(
                scorer.scorer(),
                &cases,
                &data.catalog,
                a.k,
                &lambdas,
                reranker,
            )?,
            lambdas,
        )
    };
    write_tradeoff_csv(&rows, a.k, &a.out)?;
    let mode = match a.mode {
        TradeoffMode::Rl => "rl",
        TradeoffMode::Mmr => "mmr",
        TradeoffMode::PopRerank => "pop-rerank",
    };
    record
        .with_config(
            &json!({ "mode": mode, "lambdas": lambdas, "k": a.k, "data": a.data.describe() }),
        )?
        .write_beside(&a.out)
}
