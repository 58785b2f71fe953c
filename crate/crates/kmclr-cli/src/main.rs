//! Command-line front end: dataset generation and ingestion, staged
//! training, ranking evaluation, the ablation variant set, and
//! hyperparameter sweeps.
//!
//! Every command writes its resolved configuration next to its outputs;
//! re-running from that file reproduces the run bit for bit. Errors print
//! one `error[class]: message` line; the exit code is 0 on success, 1 for
//! anything wrong with the invocation or data, and 2 for internal bugs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kmclr::checkpoint::{self, Checkpoint, CheckpointError, VocabTables};
use kmclr::eval::{evaluate, evaluate_full_catalog, EvalError, RankingReport, RunMeta};
use kmclr::experiment::{
    ablate, sweep_over, variant_config, SweepAxis, ABLATION_VARIANTS, DEFAULT_BUCKET_BOUNDARIES,
};
use kmclr::graph::{
    load_interactions, load_kg, split_leave_one_out, DatasetSplit, GraphError, InteractionGraph,
    InteractionSchema, KnowledgeGraph, Vocab,
};
use kmclr::kg::{sample_view_pair, write_view_pair, KgError};
use kmclr::synthetic::{self, read_schema, SyntheticConfig};
use kmclr::trainer::{final_embeddings, log_to_ndjson, train, TrainConfig, TrainError};

// ---------------------------------------------------------------------------
// error classification

enum ErrorClass {
    Usage,
    Config,
    Data,
    Io,
    Train,
    Internal,
}

struct CliError {
    class: ErrorClass,
    message: String,
}

impl CliError {
    fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        CliError {
            class: class.into(),
            message: message.into(),
        }
    }

    fn class_name(&self) -> &'static str {
        match self.class {
            ErrorClass::Usage => "usage",
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Io => "io",
            ErrorClass::Train => "train",
            ErrorClass::Internal => "internal",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.class {
            ErrorClass::Internal => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep the machine-parsable line to a single line
        let msg = self.message.replace('\n', " | ");
        write!(f, "error[{}]: {}", self.class_name(), msg)
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        let class = match &e {
            GraphError::Io { .. } => ErrorClass::Io,
            GraphError::Config(_) => ErrorClass::Config,
            _ => ErrorClass::Data,
        };
        CliError::new(class, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::new(ErrorClass::Config, e.to_string()),
            TrainError::Diverged { .. } => CliError::new(ErrorClass::Train, e.to_string()),
            TrainError::Graph(g) => g.into(),
            TrainError::Kg(k) => k.into(),
            TrainError::Eval(v) => v.into(),
            // contract violations and tensor/parameter shape errors are bugs
            other => CliError::new(ErrorClass::Internal, other.to_string()),
        }
    }
}

impl From<KgError> for CliError {
    fn from(e: KgError) -> Self {
        match e {
            KgError::Io { .. } => CliError::new(ErrorClass::Io, e.to_string()),
            KgError::Config(_) => CliError::new(ErrorClass::Config, e.to_string()),
            KgError::Sampler(_) => CliError::new(ErrorClass::Data, e.to_string()),
            other => CliError::new(ErrorClass::Internal, other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => CliError::new(ErrorClass::Config, e.to_string()),
            EvalError::Graph(g) => g.into(),
            EvalError::Contract(_) => CliError::new(ErrorClass::Data, e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let class = match &e {
            CheckpointError::Io { .. } => ErrorClass::Io,
            CheckpointError::Format(_) => ErrorClass::Data,
        };
        CliError::new(class, e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(ErrorClass::Io, format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// command definitions

#[derive(Parser)]
#[command(
    name = "kmclr",
    about = "Knowledge-enhanced multi-behavior recommender: train, evaluate, ablate, sweep",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory holding interactions.tsv, kg.tsv, and schema.txt
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Training configuration file (flat key = value; defaults apply to
    /// anything unset)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and reindex a dataset, writing its load report
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        /// Where to write the report (defaults to the data directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the staged training paradigm and write a checkpoint plus log
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Ablation variant to train (full, w/o-Mcl, w/o-Kcl, w/o-NorT)
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Rank held-out positives with a trained checkpoint
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint produced by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rank against the full catalog instead of sampled candidates
        #[arg(long)]
        full_catalog: bool,
    },
    /// Train and compare the full model against its reduced variants
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train one model per grid cell along a hyperparameter axis
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Axis to sweep: d, layers, alpha, or dropout; append =v1,v2,...
        /// to override the declared grid
        #[arg(long)]
        grid: String,
    },
    /// Generate a planted-preference synthetic dataset
    GenSynthetic {
        /// Output directory for interactions.tsv, kg.tsv, schema.txt
        #[arg(long)]
        out: PathBuf,
        /// Generator configuration file (flat key = value)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        behaviors: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        target_per_user: Option<usize>,
        #[arg(long)]
        aux_cover: Option<f64>,
        #[arg(long)]
        aux_extra: Option<f64>,
        #[arg(long)]
        cross_noise: Option<f64>,
        #[arg(long)]
        target_noise: Option<f64>,
        #[arg(long)]
        kg_noise: Option<f64>,
    },
}

// ---------------------------------------------------------------------------
// verbosity

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum Verbosity {
    Quiet = 0,
    Info = 1,
    Debug = 2,
}

/// Read from KMCLR_LOG (quiet|info|debug); unset means info.
fn verbosity() -> Verbosity {
    match std::env::var("KMCLR_LOG").as_deref() {
        Ok("quiet") => Verbosity::Quiet,
        Ok("debug") => Verbosity::Debug,
        _ => Verbosity::Info,
    }
}

macro_rules! info {
    ($v:expr, $($arg:tt)*) => {
        if $v >= Verbosity::Info {
            eprintln!($($arg)*);
        }
    };
}

// ---------------------------------------------------------------------------
// shared plumbing

struct Dataset {
    schema: InteractionSchema,
    graph: InteractionGraph,
    users: Vocab,
    items: Vocab,
    kg: KnowledgeGraph,
    entities: Vocab,
    relations: Vocab,
    interaction_report: String,
    kg_report: String,
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let schema = read_schema(&dir.join("schema.txt"))?;
    let (graph, users, items, report) = load_interactions(&dir.join("interactions.tsv"), &schema)?;
    let (kg, entities, relations, kg_report) = load_kg(&dir.join("kg.tsv"), &items)?;
    Ok(Dataset {
        schema,
        graph,
        users,
        items,
        kg,
        entities,
        relations,
        interaction_report: report.to_key_value(),
        kg_report: kg_report.to_key_value(),
    })
}

impl Dataset {
    fn vocab_tables(&self) -> VocabTables {
        VocabTables {
            users: self.users.tokens().to_vec(),
            items: self.items.tokens().to_vec(),
            entities: self.entities.tokens().to_vec(),
            relations: self.relations.tokens().to_vec(),
            behaviors: self.schema.behaviors.clone(),
            target_behavior: self.graph.target_behavior,
        }
    }
}

fn resolve_train_config(
    config: &Option<PathBuf>,
    seed: Option<u64>,
) -> Result<TrainConfig, CliError> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            TrainConfig::parse(&text).map_err(CliError::from)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_split(graph: &InteractionGraph, cfg: &TrainConfig) -> Result<DatasetSplit, CliError> {
    Ok(split_leave_one_out(graph, cfg.seed, cfg.num_negatives)?)
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content).map_err(|e| io_error(path, e))
}

// ---------------------------------------------------------------------------
// verbs

fn cmd_ingest(data: &DataArgs, out: &Option<PathBuf>) -> Result<(), CliError> {
    let v = verbosity();
    let ds = load_dataset(&data.data)?;
    let out_dir = out.clone().unwrap_or_else(|| data.data.clone());
    ensure_out_dir(&out_dir)?;
    let report = format!(
        "[interactions]\n{}[knowledge-graph]\n{}",
        ds.interaction_report, ds.kg_report
    );
    write_file(&out_dir.join("ingest.report.txt"), &report)?;
    let resolved = format!(
        "data = {}\nbehaviors = {}\ntarget = {}\n",
        data.data.display(),
        ds.schema.behaviors.join(","),
        ds.schema.target
    );
    write_file(&out_dir.join("ingest.config.txt"), &resolved)?;
    print!("{report}");
    info!(v, "ingest: report written to {}", out_dir.join("ingest.report.txt").display());
    Ok(())
}

fn stage_summaries(log: &[kmclr::trainer::LogRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut current = "";
    let mut first = 0usize;
    for (i, rec) in log.iter().enumerate() {
        if rec.stage != current {
            current = rec.stage;
            first = i;
        }
        let is_last = i + 1 == log.len() || log[i + 1].stage != current;
        if is_last {
            out.push(format!(
                "stage {}: {} epochs, bpr {:.4} -> {:.4}",
                current,
                i - first + 1,
                log[first].bpr,
                rec.bpr
            ));
        }
    }
    out
}

fn cmd_train(data: &DataArgs, run: &RunArgs, variant: &str) -> Result<(), CliError> {
    let v = verbosity();
    let ds = load_dataset(&data.data)?;
    let base = resolve_train_config(&run.config, run.seed)?;
    let cfg = variant_config(&base, variant)?;
    ensure_out_dir(&run.out)?;
    write_file(&run.out.join("config.resolved.txt"), &cfg.to_text())?;

    let split = make_split(&ds.graph, &cfg)?;
    info!(
        v,
        "training variant '{variant}' on {} users / {} items ({} test users)",
        ds.graph.num_users,
        ds.graph.num_items,
        split.test_positives.len()
    );

    let vocabs = ds.vocab_tables();
    let outcome = match train(&cfg, &split, &ds.kg) {
        Ok(outcome) => outcome,
        Err(TrainError::Diverged {
            stage,
            epoch,
            checkpoint: params,
            log,
        }) => {
            // keep the last finite state around for post-mortems
            checkpoint::save(&run.out.join("checkpoint.bin"), &params, &vocabs)?;
            write_file(&run.out.join("train_log.ndjson"), &log_to_ndjson(&log))?;
            return Err(CliError::new(
                ErrorClass::Train,
                format!(
                    "training diverged in stage {stage}, epoch {epoch}; \
                     last finite checkpoint and log written to {}",
                    run.out.display()
                ),
            ));
        }
        Err(other) => return Err(other.into()),
    };

    checkpoint::save(&run.out.join("checkpoint.bin"), &outcome.params, &vocabs)?;
    write_file(&run.out.join("train_log.ndjson"), &log_to_ndjson(&outcome.log))?;
    if cfg.dump_views {
        let pair = sample_view_pair(
            &split.train,
            &ds.kg,
            &outcome.params,
            cfg.layers,
            cfg.rho,
            cfg.retain_min,
            cfg.retain_max,
            cfg.seed,
        )?;
        write_view_pair(&pair, &run.out.join("views"))?;
    }

    if v >= Verbosity::Debug {
        for rec in &outcome.log {
            eprintln!("{} epoch {}: total {:.4}", rec.stage, rec.epoch, rec.total);
        }
    }
    for line in stage_summaries(&outcome.log) {
        info!(v, "{line}");
    }
    if let Some(hr) = outcome.best_val_hr {
        info!(v, "best validation HR@{}: {hr:.4}", cfg.eval_k);
    }
    println!(
        "trained variant '{variant}' ({} epochs); checkpoint: {}",
        outcome.log.len(),
        run.out.join("checkpoint.bin").display()
    );
    Ok(())
}

fn report_outputs(report: &RankingReport, out: &Path) -> Result<(), CliError> {
    write_file(&out.join("report.ndjson"), &report.to_ndjson())?;
    write_file(&out.join("report.txt"), &report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_evaluate(
    data: &DataArgs,
    run: &RunArgs,
    ckpt_path: &Path,
    full_catalog: bool,
) -> Result<(), CliError> {
    let ds = load_dataset(&data.data)?;
    let cfg = resolve_train_config(&run.config, run.seed)?;
    ensure_out_dir(&run.out)?;
    write_file(&run.out.join("config.resolved.txt"), &cfg.to_text())?;

    let ckpt: Checkpoint = checkpoint::load(ckpt_path)?;
    let expected = ds.vocab_tables();
    if ckpt.vocabs != expected {
        return Err(CliError::new(
            ErrorClass::Data,
            format!(
                "checkpoint vocabulary does not match the dataset at {} \
                 (checkpoint: {} users / {} items; data: {} users / {} items)",
                data.data.display(),
                ckpt.vocabs.users.len(),
                ckpt.vocabs.items.len(),
                expected.users.len(),
                expected.items.len()
            ),
        ));
    }

    let split = make_split(&ds.graph, &cfg)?;
    let (user_emb, item_emb) = final_embeddings(&cfg, &split.train, &ds.kg, &ckpt.params)?;
    let meta = RunMeta::new(&cfg.to_text(), cfg.seed);
    let report = if full_catalog {
        evaluate_full_catalog(
            &user_emb,
            &item_emb,
            &split,
            &split.train,
            cfg.eval_k,
            DEFAULT_BUCKET_BOUNDARIES,
            meta,
        )?
    } else {
        evaluate(
            &user_emb,
            &item_emb,
            &split,
            cfg.eval_k,
            DEFAULT_BUCKET_BOUNDARIES,
            meta,
        )?
    };
    report_outputs(&report, &run.out)
}

fn cmd_ablate(data: &DataArgs, run: &RunArgs) -> Result<(), CliError> {
    let v = verbosity();
    let ds = load_dataset(&data.data)?;
    let cfg = resolve_train_config(&run.config, run.seed)?;
    ensure_out_dir(&run.out)?;
    write_file(&run.out.join("config.resolved.txt"), &cfg.to_text())?;

    let split = make_split(&ds.graph, &cfg)?;
    info!(v, "running {} variants: {:?}", ABLATION_VARIANTS.len(), ABLATION_VARIANTS);
    let report = ablate(&cfg, &split, &ds.kg)?;
    write_file(&run.out.join("ablation.txt"), &report.to_table())?;
    write_file(&run.out.join("ablation.ndjson"), &report.to_ndjson())?;
    print!("{}", report.to_table());
    Ok(())
}

/// `--grid` accepts an axis name, optionally with explicit values:
/// `alpha` or `alpha=0.1,0.3`.
fn parse_grid(spec: &str) -> Result<(SweepAxis, Vec<f64>), CliError> {
    let (axis_name, values) = match spec.split_once('=') {
        Some((name, list)) => (name.trim(), Some(list)),
        None => (spec.trim(), None),
    };
    let axis: SweepAxis = axis_name
        .parse()
        .map_err(|e: String| CliError::new(ErrorClass::Usage, e))?;
    let values = match values {
        None => axis.grid().to_vec(),
        Some(list) => {
            let mut parsed = Vec::new();
            for (i, tok) in list.split(',').enumerate() {
                let tok = tok.trim();
                parsed.push(tok.parse::<f64>().map_err(|_| {
                    CliError::new(
                        ErrorClass::Usage,
                        format!("--grid value {} ('{tok}') is not a number", i + 1),
                    )
                })?);
            }
            parsed
        }
    };
    Ok((axis, values))
}

fn cmd_sweep(data: &DataArgs, run: &RunArgs, grid: &str) -> Result<(), CliError> {
    let v = verbosity();
    let (axis, values) = parse_grid(grid)?;
    let ds = load_dataset(&data.data)?;
    let cfg = resolve_train_config(&run.config, run.seed)?;
    ensure_out_dir(&run.out)?;
    write_file(&run.out.join("config.resolved.txt"), &cfg.to_text())?;

    let split = make_split(&ds.graph, &cfg)?;
    info!(v, "sweeping {} over {values:?}", axis.name());
    let report = sweep_over(&cfg, &split, &ds.kg, axis, &values)?;
    write_file(&run.out.join("sweep.tsv"), &report.to_tsv())?;
    write_file(&run.out.join("sweep.ndjson"), &report.to_ndjson())?;
    print!("{}", report.to_tsv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_synthetic(
    out: &Path,
    config: &Option<PathBuf>,
    seed: Option<u64>,
    overrides: [(Option<usize>, fn(&mut SyntheticConfig, usize)); 5],
    float_overrides: [(Option<f64>, fn(&mut SyntheticConfig, f64)); 5],
) -> Result<(), CliError> {
    let v = verbosity();
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            SyntheticConfig::parse(&text)?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    for (value, apply) in overrides {
        if let Some(value) = value {
            apply(&mut cfg, value);
        }
    }
    for (value, apply) in float_overrides {
        if let Some(value) = value {
            apply(&mut cfg, value);
        }
    }

    let dataset = synthetic::generate(&cfg)?;
    synthetic::write_dataset(&dataset, out)?;
    write_file(&out.join("synthetic.config.txt"), &cfg.to_text())?;
    info!(
        v,
        "planted {} clusters; target edges {}, total edges {}",
        cfg.clusters,
        dataset.graph.edges(dataset.graph.target_behavior).len(),
        dataset.graph.num_edges()
    );
    println!(
        "wrote {} users / {} items / {} behaviors, {} KG triples to {}",
        cfg.num_users,
        cfg.num_items,
        cfg.num_behaviors,
        dataset.kg.triples().len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest { data, out } => cmd_ingest(data, out),
        Command::Train { data, run, variant } => cmd_train(data, run, variant),
        Command::Evaluate {
            data,
            run,
            checkpoint,
            full_catalog,
        } => cmd_evaluate(data, run, checkpoint, *full_catalog),
        Command::Ablate { data, run } => cmd_ablate(data, run),
        Command::Sweep { data, run, grid } => cmd_sweep(data, run, grid),
        Command::GenSynthetic {
            out,
            config,
            seed,
            users,
            items,
            behaviors,
            clusters,
            target_per_user,
            aux_cover,
            aux_extra,
            cross_noise,
            target_noise,
            kg_noise,
        } => cmd_gen_synthetic(
            out,
            config,
            *seed,
            [
                (*users, |c, v| c.num_users = v),
                (*items, |c, v| c.num_items = v),
                (*behaviors, |c, v| c.num_behaviors = v),
                (*clusters, |c, v| c.clusters = v),
                (*target_per_user, |c, v| c.target_per_user = v),
            ],
            [
                (*aux_cover, |c, v| c.aux_cover = v),
                (*aux_extra, |c, v| c.aux_extra = v),
                (*cross_noise, |c, v| c.cross_noise = v),
                (*target_noise, |c, v| c.target_noise = v),
                (*kg_noise, |c, v| c.kg_noise = v),
            ],
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first_line = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("bad arguments")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", CliError::new(ErrorClass::Usage, first_line));
            eprintln!("run with --help for usage");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
