//! The staged training paradigm: pretrain the multi-behavior module, then
//! the knowledge module, then fine-tune the combination on the main
//! ranking loss — plus the ablation variants that drop each piece.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::eval::{evaluate, EvalError, RunMeta};
use crate::graph::{DatasetSplit, GraphError, InteractionGraph, KnowledgeGraph};
use crate::kg::{
    kcl_loss, kg_attention_aggregate, kg_ranking_loss, sample_corrupt_tails, sample_view_pair,
    KgError, KgVariant, ScoreOrder,
};
use crate::mul::{
    aggregate_cross_behavior, behavior_readout, mul_cl_loss, propagate_behavior, propagate_from,
    EncoderError, NormMode,
};
use crate::params::{init_params, Adam, ModelDims, ModuleTag, ParamError, ParameterSet};
use crate::seed;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

#[derive(thiserror::Error, Debug)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("training diverged (non-finite loss) in stage {stage}, epoch {epoch}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        /// Parameters as of the last completed epoch.
        checkpoint: Box<ParameterSet>,
        log: Vec<LogRecord>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Every knob of a run. `parse` reads the flat `key = value` config format;
/// `to_text` writes it back fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub layers: usize,
    pub eval_k: usize,
    pub tau: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_mul: f64,
    pub lr_kg: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub disable_mcl: bool,
    pub disable_kcl: bool,
    pub normal_training: bool,
    pub norm_mode: NormMode,
    pub rho: f64,
    pub retain_min: f64,
    pub retain_max: f64,
    pub behavior_dropout: f64,
    pub kg_loss_weight: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub num_negatives: usize,
    pub score_order: ScoreOrder,
    pub adam_weight_decay: f64,
    pub dump_views: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 32,
            layers: 2,
            eval_k: 10,
            tau: 0.2,
            alpha: 0.2,
            lambda1: 0.1,
            lambda2: 1e-4,
            lr_mul: 1e-3,
            lr_kg: 3e-4,
            epochs_stage1: 50,
            epochs_stage2: 50,
            epochs_stage3: 100,
            batch_size: 128,
            seed: 17,
            disable_mcl: false,
            disable_kcl: false,
            normal_training: false,
            norm_mode: NormMode::Symmetric,
            rho: 0.1,
            retain_min: 0.6,
            retain_max: 0.9,
            behavior_dropout: 0.0,
            kg_loss_weight: 1.0,
            patience: 10,
            val_fraction: 0.05,
            num_negatives: 99,
            score_order: ScoreOrder::TrueMinusCorrupt,
            adam_weight_decay: 0.0,
            dump_views: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.d == 0 || self.layers == 0 || self.eval_k == 0 || self.batch_size == 0 {
            return err("d, layers, eval_k, and batch_size must all be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return err(format!("alpha must be in [0,1], got {}", self.alpha));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.kg_loss_weight < 0.0 {
            return err("loss weights must be >= 0".into());
        }
        if self.lr_mul <= 0.0 || self.lr_kg <= 0.0 {
            return err("learning rates must be > 0".into());
        }
        if self.tau <= 0.0 {
            return err(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return err(format!("rho must be in [0,1), got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.retain_min)
            || !(0.0..=1.0).contains(&self.retain_max)
            || self.retain_min > self.retain_max
        {
            return err(format!(
                "retention interval must satisfy 0 <= a <= b <= 1, got [{}, {}]",
                self.retain_min, self.retain_max
            ));
        }
        if !(0.0..1.0).contains(&self.behavior_dropout) {
            return err(format!(
                "behavior_dropout must be in [0,1), got {}",
                self.behavior_dropout
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!(
                "val_fraction must be in [0,1), got {}",
                self.val_fraction
            ));
        }
        if self.adam_weight_decay < 0.0 {
            return err("adam_weight_decay must be >= 0".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<TrainConfig, TrainError> {
        let mut cfg = TrainConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(TrainError::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            let bad = |what: &str| {
                TrainError::Config(format!("line {}: {key}: invalid {what} '{value}'", lineno + 1))
            };
            match key {
                "d" => cfg.d = value.parse().map_err(|_| bad("integer"))?,
                "layers" => cfg.layers = value.parse().map_err(|_| bad("integer"))?,
                "eval_k" => cfg.eval_k = value.parse().map_err(|_| bad("integer"))?,
                "tau" => cfg.tau = value.parse().map_err(|_| bad("number"))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("number"))?,
                "lambda1" => cfg.lambda1 = value.parse().map_err(|_| bad("number"))?,
                "lambda2" => cfg.lambda2 = value.parse().map_err(|_| bad("number"))?,
                "lr_mul" => cfg.lr_mul = value.parse().map_err(|_| bad("number"))?,
                "lr_kg" => cfg.lr_kg = value.parse().map_err(|_| bad("number"))?,
                "epochs_stage1" => cfg.epochs_stage1 = value.parse().map_err(|_| bad("integer"))?,
                "epochs_stage2" => cfg.epochs_stage2 = value.parse().map_err(|_| bad("integer"))?,
                "epochs_stage3" => cfg.epochs_stage3 = value.parse().map_err(|_| bad("integer"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "disable_mcl" => cfg.disable_mcl = value.parse().map_err(|_| bad("bool"))?,
                "disable_kcl" => cfg.disable_kcl = value.parse().map_err(|_| bad("bool"))?,
                "normal_training" => {
                    cfg.normal_training = value.parse().map_err(|_| bad("bool"))?
                }
                "norm_mode" => cfg.norm_mode = value.parse().map_err(|e: String| {
                    TrainError::Config(format!("line {}: {e}", lineno + 1))
                })?,
                "rho" => cfg.rho = value.parse().map_err(|_| bad("number"))?,
                "retain_min" => cfg.retain_min = value.parse().map_err(|_| bad("number"))?,
                "retain_max" => cfg.retain_max = value.parse().map_err(|_| bad("number"))?,
                "behavior_dropout" => {
                    cfg.behavior_dropout = value.parse().map_err(|_| bad("number"))?
                }
                "kg_loss_weight" => {
                    cfg.kg_loss_weight = value.parse().map_err(|_| bad("number"))?
                }
                "patience" => cfg.patience = value.parse().map_err(|_| bad("integer"))?,
                "val_fraction" => cfg.val_fraction = value.parse().map_err(|_| bad("number"))?,
                "num_negatives" => cfg.num_negatives = value.parse().map_err(|_| bad("integer"))?,
                "score_order" => cfg.score_order = value.parse().map_err(|e: String| {
                    TrainError::Config(format!("line {}: {e}", lineno + 1))
                })?,
                "adam_weight_decay" => {
                    cfg.adam_weight_decay = value.parse().map_err(|_| bad("number"))?
                }
                "dump_views" => cfg.dump_views = value.parse().map_err(|_| bad("bool"))?,
                other => {
                    return Err(TrainError::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved config, parseable by `parse`.
    pub fn to_text(&self) -> String {
        let norm_mode = match self.norm_mode {
            NormMode::RawSum => "raw_sum",
            NormMode::Symmetric => "symmetric",
        };
        let score_order = match self.score_order {
            ScoreOrder::TrueMinusCorrupt => "true_minus_corrupt",
            ScoreOrder::CorruptMinusTrue => "corrupt_minus_true",
        };
        format!(
            "d = {}\nlayers = {}\neval_k = {}\ntau = {}\nalpha = {}\nlambda1 = {}\nlambda2 = {}\n\
             lr_mul = {}\nlr_kg = {}\nepochs_stage1 = {}\nepochs_stage2 = {}\nepochs_stage3 = {}\n\
             batch_size = {}\nseed = {}\ndisable_mcl = {}\ndisable_kcl = {}\nnormal_training = {}\n\
             norm_mode = {}\nrho = {}\nretain_min = {}\nretain_max = {}\nbehavior_dropout = {}\n\
             kg_loss_weight = {}\npatience = {}\nval_fraction = {}\nnum_negatives = {}\n\
             score_order = {}\nadam_weight_decay = {}\ndump_views = {}\n",
            self.d,
            self.layers,
            self.eval_k,
            self.tau,
            self.alpha,
            self.lambda1,
            self.lambda2,
            self.lr_mul,
            self.lr_kg,
            self.epochs_stage1,
            self.epochs_stage2,
            self.epochs_stage3,
            self.batch_size,
            self.seed,
            self.disable_mcl,
            self.disable_kcl,
            self.normal_training,
            norm_mode,
            self.rho,
            self.retain_min,
            self.retain_max,
            self.behavior_dropout,
            self.kg_loss_weight,
            self.patience,
            self.val_fraction,
            self.num_negatives,
            score_order,
            self.adam_weight_decay,
            self.dump_views,
        )
    }
}

/// One structured line of the training log. Absent loss terms stay `None`
/// so a record shows exactly which terms the variant optimizes.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LogRecord {
    pub stage: &'static str,
    pub epoch: usize,
    pub bpr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mul_cl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kcl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub td: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sm: Option<f64>,
    pub reg: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_hr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn log_to_ndjson(log: &[LogRecord]) -> String {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec).expect("log records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub log: Vec<LogRecord>,
    /// Best validation HR@K seen, if a validation slice existed.
    pub best_val_hr: Option<f64>,
}

/// Embedding combination: `(1-alpha) * mul + alpha * kg`, elementwise.
pub fn combine_embeddings(
    tape: &mut Tape,
    mul: NodeId,
    kg: NodeId,
    alpha: f64,
) -> Result<NodeId, TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Config(format!(
            "alpha must be in [0,1], got {alpha}"
        )));
    }
    let a = tape.scale(mul, 1.0 - alpha);
    let b = tape.scale(kg, alpha);
    Ok(tape.add(a, b)?)
}

/// Pairwise ranking loss over (user, positive, negative) triples.
pub fn bpr_loss(
    tape: &mut Tape,
    user_emb: NodeId,
    item_emb: NodeId,
    batch: &[(u32, u32, u32)],
) -> Result<NodeId, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Contract("empty ranking batch".into()));
    }
    let users: Vec<usize> = batch.iter().map(|t| t.0 as usize).collect();
    let pos: Vec<usize> = batch.iter().map(|t| t.1 as usize).collect();
    let neg: Vec<usize> = batch.iter().map(|t| t.2 as usize).collect();
    let u = tape.gather_rows(user_emb, &users)?;
    let ip = tape.gather_rows(item_emb, &pos)?;
    let ineg = tape.gather_rows(item_emb, &neg)?;
    let sp = tape.rowwise_dot(u, ip)?;
    let sn = tape.rowwise_dot(u, ineg)?;
    let diff = tape.sub(sp, sn)?;
    let per = tape.neg_log_sigmoid(diff);
    Ok(tape.sum_all(per))
}

/// Squared L2 norm of every learnable tensor in scope (`None` = all).
pub fn regularizer(
    tape: &mut Tape,
    params: &ParameterSet,
    module: Option<ModuleTag>,
) -> Result<NodeId, TrainError> {
    let mut total = None;
    for (id, p) in params.iter() {
        if module.is_some() && module != Some(p.module) {
            continue;
        }
        let node = tape.param(params, id);
        let sq = tape.sq_norm(node);
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    total.ok_or_else(|| TrainError::Contract("no parameters in regularizer scope".into()))
}

/// Assembles the run loss: `bpr + lambda1 * cl + lambda2 * reg`.
pub fn total_loss(
    tape: &mut Tape,
    bpr: NodeId,
    cl: Option<NodeId>,
    reg: Option<NodeId>,
    lambda1: f64,
    lambda2: f64,
) -> Result<NodeId, TrainError> {
    let mut total = bpr;
    if let Some(cl) = cl {
        if lambda1 != 0.0 {
            let scaled = tape.scale(cl, lambda1);
            total = tape.add(total, scaled)?;
        }
    }
    if let Some(reg) = reg {
        if lambda2 != 0.0 {
            let scaled = tape.scale(reg, lambda2);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// staged training
// ---------------------------------------------------------------------------

struct Ctx<'a> {
    cfg: &'a TrainConfig,
    /// Training edges (validation holdout already removed).
    train: InteractionGraph,
    kg: &'a KnowledgeGraph,
    /// Per-user observed target items (including validation positives), for
    /// negative rejection.
    target_pos: Vec<BTreeSet<u32>>,
    /// Validation slice as an evaluable split, if one could be carved out.
    val: Option<DatasetSplit>,
}

fn forward_mul(
    tape: &mut Tape,
    graph: &InteractionGraph,
    params: &ParameterSet,
    cfg: &TrainConfig,
) -> Result<(NodeId, NodeId, Vec<NodeId>), TrainError> {
    let behaviors: Vec<usize> = if cfg.disable_mcl {
        vec![graph.target_behavior]
    } else {
        (0..graph.num_behaviors).collect()
    };
    let mut layers = Vec::with_capacity(behaviors.len());
    let mut readout_users = Vec::with_capacity(behaviors.len());
    for &k in &behaviors {
        let bl = propagate_behavior(tape, graph, k, params, cfg.layers, cfg.norm_mode)?;
        let (ru, _ri) = behavior_readout(tape, &bl)?;
        readout_users.push(ru);
        layers.push(bl);
    }
    let fused = aggregate_cross_behavior(tape, &layers, params)?;
    Ok((fused.user, fused.item, readout_users))
}

/// Index of the target behavior within the readout list built by
/// `forward_mul` (it propagates either all behaviors or only the target).
fn readout_target_index(graph: &InteractionGraph, cfg: &TrainConfig) -> usize {
    if cfg.disable_mcl {
        0
    } else {
        graph.target_behavior
    }
}

/// Knowledge-module forward pass: per view, aggregate the KG, then run
/// interaction-graph propagation seeded with the aggregated item rows; the
/// module output is the mean of the two view readouts.
fn forward_kg(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &TrainConfig,
    kg: &KnowledgeGraph,
    num_items: usize,
    graphs: [&InteractionGraph; 2],
) -> Result<((NodeId, NodeId), [(NodeId, NodeId); 2]), TrainError> {
    let user0 = tape.param(
        params,
        params.id("kg.user").expect("kg.user is always registered"),
    );
    let item_rows: Vec<usize> = (0..num_items).collect();
    let mut views = Vec::with_capacity(2);
    for (slot, variant) in [KgVariant::Translational, KgVariant::Semantic]
        .into_iter()
        .enumerate()
    {
        let agg = kg_attention_aggregate(tape, kg, params, variant, cfg.layers)?;
        let item0 = tape.gather_rows(agg.output(), &item_rows)?;
        let g = graphs[slot];
        let (u, i) = if g.edges(0).is_empty() {
            // a fully dropped view: no propagation, raw tables stand in
            (user0, item0)
        } else {
            let bl = propagate_from(tape, g, 0, user0, item0, cfg.layers, cfg.norm_mode)?;
            let u = tape.mean_over(&bl.user)?;
            let i = tape.mean_over(&bl.item)?;
            (u, i)
        };
        views.push((u, i));
    }
    let user = tape.mean_over(&[views[0].0, views[1].0])?;
    let item = tape.mean_over(&[views[0].1, views[1].1])?;
    Ok(((user, item), [views[0], views[1]]))
}

fn single_behavior_graph(
    num_users: usize,
    num_items: usize,
    edges: &[(u32, u32)],
) -> Result<InteractionGraph, TrainError> {
    Ok(InteractionGraph::build(
        num_users,
        num_items,
        0,
        vec![edges.to_vec()],
    )?)
}

/// Keeps each non-target edge with probability `1 - rate`; a behavior that
/// would lose everything keeps its original edges instead.
fn dropout_behaviors(
    graph: &InteractionGraph,
    rate: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<InteractionGraph, TrainError> {
    if rate == 0.0 {
        return Ok(graph.clone());
    }
    let mut edges = Vec::with_capacity(graph.num_behaviors);
    for k in 0..graph.num_behaviors {
        let original = graph.edges(k);
        if k == graph.target_behavior {
            edges.push(original.to_vec());
            continue;
        }
        let kept: Vec<(u32, u32)> = original
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(1.0 - rate))
            .collect();
        edges.push(if kept.is_empty() && !original.is_empty() {
            original.to_vec()
        } else {
            kept
        });
    }
    Ok(InteractionGraph::build(
        graph.num_users,
        graph.num_items,
        graph.target_behavior,
        edges,
    )?)
}

/// Shuffled (user, positive, rejected-negative) triples for one epoch,
/// chunked by batch size.
fn ranking_batches(
    ctx: &Ctx,
    label: &str,
) -> Result<Vec<Vec<(u32, u32, u32)>>, TrainError> {
    let kt = ctx.train.target_behavior;
    let mut edges: Vec<(u32, u32)> = ctx.train.edges(kt).to_vec();
    let mut rng = seed::rng(ctx.cfg.seed, label);
    edges.shuffle(&mut rng);
    let num_items = ctx.train.num_items as u32;
    let mut triples = Vec::with_capacity(edges.len());
    for (u, i) in edges {
        let seen = &ctx.target_pos[u as usize];
        if seen.len() as u32 >= num_items {
            return Err(TrainError::Contract(format!(
                "user {u} interacted with every item; no ranking negative exists"
            )));
        }
        let neg = loop {
            let cand = rng.gen_range(0..num_items);
            if !seen.contains(&cand) {
                break cand;
            }
        };
        triples.push((u, i, neg));
    }
    Ok(triples
        .chunks(ctx.cfg.batch_size)
        .map(|c| c.to_vec())
        .collect())
}

fn distinct_users(batch: &[(u32, u32, u32)]) -> Vec<usize> {
    batch
        .iter()
        .map(|t| t.0 as usize)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Batch rows for the node-level contrast over stacked [users; items].
fn contrast_rows(batch: &[(u32, u32, u32)], num_users: usize) -> Vec<usize> {
    let users: BTreeSet<usize> = batch.iter().map(|t| t.0 as usize).collect();
    let items: BTreeSet<usize> = batch.iter().map(|t| num_users + t.1 as usize).collect();
    users.into_iter().chain(items).collect()
}

/// Which loss terms a stage optimizes.
#[derive(Clone, Copy)]
struct StagePlan {
    name: &'static str,
    mul_path: bool,
    kg_path: bool,
    combine: bool,
    mul_cl: bool,
    kcl: bool,
    kg_ranking: bool,
    reg_scope: Option<ModuleTag>,
}

struct EpochStats {
    batches: usize,
    bpr: f64,
    mul_cl: Option<f64>,
    kcl: Option<f64>,
    td: Option<f64>,
    sm: Option<f64>,
    reg: f64,
    total: f64,
}

fn run_stage(
    ctx: &Ctx,
    params: &mut ParameterSet,
    plan: StagePlan,
    epochs: usize,
    log: &mut Vec<LogRecord>,
) -> Result<(), TrainError> {
    if epochs == 0 {
        return Ok(());
    }
    let cfg = ctx.cfg;
    let lr_for = |p: &crate::params::Param| match p.module {
        ModuleTag::MultiBehavior => {
            if plan.mul_path {
                cfg.lr_mul
            } else {
                0.0
            }
        }
        ModuleTag::Knowledge => {
            if plan.kg_path {
                cfg.lr_kg
            } else {
                0.0
            }
        }
    };
    let mut adam = Adam::new(params, lr_for, cfg.adam_weight_decay);

    let mut best: Option<(f64, ParameterSet)> = None;
    let mut since_best = 0usize;

    let triples_all = ctx.kg.triples();
    for epoch in 0..epochs {
        let snapshot = params.clone();
        let prefix = format!("{}:{epoch}", plan.name);
        let mut note: Option<String> = None;

        // per-epoch graph work
        let epoch_graph = if plan.mul_path {
            let mut rng = seed::rng(cfg.seed, &format!("{prefix}:dropout"));
            Some(dropout_behaviors(&ctx.train, cfg.behavior_dropout, &mut rng)?)
        } else {
            None
        };
        let view_graphs = if plan.kg_path {
            let pair = sample_view_pair(
                &ctx.train,
                ctx.kg,
                params,
                cfg.layers,
                cfg.rho,
                cfg.retain_min,
                cfg.retain_max,
                seed::derive_seed(cfg.seed, &format!("{prefix}:views")),
            )?;
            if !pair.warnings.is_empty() {
                note = Some(pair.warnings.join("; "));
            }
            let g1 = single_behavior_graph(ctx.train.num_users, ctx.train.num_items, &pair.edges[0])?;
            let g2 = single_behavior_graph(ctx.train.num_users, ctx.train.num_items, &pair.edges[1])?;
            Some((g1, g2))
        } else {
            None
        };

        // per-epoch triple batches for the KG ranking losses
        let triple_chunks: Vec<Vec<(u32, u32, u32)>> = if plan.kg_ranking
            && !triples_all.is_empty()
        {
            let mut shuffled = triples_all.to_vec();
            let mut rng = seed::rng(cfg.seed, &format!("{prefix}:triples"));
            shuffled.shuffle(&mut rng);
            shuffled.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
        } else {
            Vec::new()
        };
        let mut corrupt_rng = seed::rng(cfg.seed, &format!("{prefix}:corrupt"));

        let batches = ranking_batches(ctx, &format!("{prefix}:batches"))?;
        let mut stats = EpochStats {
            batches: 0,
            bpr: 0.0,
            mul_cl: None,
            kcl: None,
            td: None,
            sm: None,
            reg: 0.0,
            total: 0.0,
        };

        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();

            let mul_emb = if plan.mul_path {
                let g = epoch_graph.as_ref().unwrap();
                Some(forward_mul(&mut tape, g, params, cfg)?)
            } else {
                None
            };
            let kg_emb = if plan.kg_path {
                let (g1, g2) = view_graphs.as_ref().unwrap();
                Some(forward_kg(
                    &mut tape,
                    params,
                    cfg,
                    ctx.kg,
                    ctx.train.num_items,
                    [g1, g2],
                )?)
            } else {
                None
            };

            let (user, item) = match (plan.combine, &mul_emb, &kg_emb) {
                (true, Some((mu, mi, _)), Some(((ku, ki), _))) => (
                    combine_embeddings(&mut tape, *mu, *ku, cfg.alpha)?,
                    combine_embeddings(&mut tape, *mi, *ki, cfg.alpha)?,
                ),
                (_, Some((mu, mi, _)), None) => (*mu, *mi),
                (_, None, Some(((ku, ki), _))) => (*ku, *ki),
                _ => return Err(TrainError::Contract("stage optimizes no module".into())),
            };

            let bpr = bpr_loss(&mut tape, user, item, batch)?;

            let mut cl_terms: Vec<(NodeId, &mut Option<f64>)> = Vec::new();
            let mut mul_cl_val = None;
            let mut kcl_val = None;
            if plan.mul_cl && cfg.lambda1 > 0.0 {
                let (_, _, readouts) = mul_emb.as_ref().unwrap();
                let users = distinct_users(batch);
                if readouts.len() >= 2 && users.len() >= 2 {
                    let target = readout_target_index(&ctx.train, cfg);
                    let term =
                        mul_cl_loss(&mut tape, readouts, target, &users, cfg.tau, false)?;
                    cl_terms.push((term, &mut mul_cl_val));
                }
            }
            if plan.kcl && cfg.lambda1 > 0.0 {
                let (_, views) = kg_emb.as_ref().unwrap();
                let rows = contrast_rows(batch, ctx.train.num_users);
                if rows.len() >= 2 {
                    let s1 = tape.concat_rows(&[views[0].0, views[0].1])?;
                    let s2 = tape.concat_rows(&[views[1].0, views[1].1])?;
                    let term = kcl_loss(&mut tape, s1, s2, &rows, cfg.tau)?;
                    cl_terms.push((term, &mut kcl_val));
                }
            }
            let cl = match cl_terms.len() {
                0 => None,
                _ => {
                    let mut acc = cl_terms[0].0;
                    for t in &cl_terms[1..] {
                        acc = tape.add(acc, t.0)?;
                    }
                    Some(acc)
                }
            };
            for (node, slot) in &mut cl_terms {
                **slot = Some(tape.value(*node).item());
            }

            let reg = if cfg.lambda2 > 0.0 {
                Some(regularizer(&mut tape, params, plan.reg_scope)?)
            } else {
                None
            };

            let mut total = total_loss(&mut tape, bpr, cl, reg, cfg.lambda1, cfg.lambda2)?;

            let mut td_val = None;
            let mut sm_val = None;
            if plan.kg_ranking && !triple_chunks.is_empty() && cfg.kg_loss_weight > 0.0 {
                let chunk = &triple_chunks[bi % triple_chunks.len()];
                let corrupts = sample_corrupt_tails(ctx.kg, chunk, &mut corrupt_rng)?;
                let td = kg_ranking_loss(
                    &mut tape,
                    params,
                    KgVariant::Translational,
                    chunk,
                    &corrupts,
                    cfg.score_order,
                )?;
                let sm = kg_ranking_loss(
                    &mut tape,
                    params,
                    KgVariant::Semantic,
                    chunk,
                    &corrupts,
                    cfg.score_order,
                )?;
                td_val = Some(tape.value(td).item());
                sm_val = Some(tape.value(sm).item());
                let both = tape.add(td, sm)?;
                let weighted = tape.scale(both, cfg.kg_loss_weight);
                total = tape.add(total, weighted)?;
            }

            let bpr_val = tape.value(bpr).item();
            let reg_val = reg.map(|r| tape.value(r).item()).unwrap_or(0.0);
            let total_val = tape.value(total).item();
            if !total_val.is_finite() {
                return Err(TrainError::Diverged {
                    stage: plan.name,
                    epoch,
                    checkpoint: Box::new(snapshot),
                    log: std::mem::take(log),
                });
            }

            tape.backward(total, params)?;
            if let Err(e) = adam.step(params) {
                return match e {
                    ParamError::NonFiniteGrad(_) | ParamError::NonFiniteValue(_) => {
                        Err(TrainError::Diverged {
                            stage: plan.name,
                            epoch,
                            checkpoint: Box::new(snapshot),
                            log: std::mem::take(log),
                        })
                    }
                    other => Err(other.into()),
                };
            }

            stats.batches += 1;
            stats.bpr += bpr_val;
            stats.reg += reg_val;
            stats.total += total_val;
            merge(&mut stats.mul_cl, mul_cl_val);
            merge(&mut stats.kcl, kcl_val);
            merge(&mut stats.td, td_val);
            merge(&mut stats.sm, sm_val);
        }

        // validation on clean graphs
        let val_hr = match &ctx.val {
            Some(val_split) => Some(validation_hr(ctx, params, plan, val_split)?),
            None => None,
        };

        let n = stats.batches.max(1) as f64;
        log.push(LogRecord {
            stage: plan.name,
            epoch,
            bpr: stats.bpr / n,
            mul_cl: stats.mul_cl.map(|v| v / n),
            kcl: stats.kcl.map(|v| v / n),
            td: stats.td.map(|v| v / n),
            sm: stats.sm.map(|v| v / n),
            reg: stats.reg / n,
            total: stats.total / n,
            val_hr,
            note,
        });

        if let Some(hr) = val_hr {
            let improved = best.as_ref().map(|(b, _)| hr > *b).unwrap_or(true);
            if improved {
                best = Some((hr, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > cfg.patience {
                    break;
                }
            }
        }
    }

    if let Some((_, best_params)) = best {
        *params = best_params;
    }
    Ok(())
}

fn merge(slot: &mut Option<f64>, v: Option<f64>) {
    if let Some(v) = v {
        *slot = Some(slot.unwrap_or(0.0) + v);
    }
}

/// Validation HR@K for the embeddings a stage is actually optimizing,
/// computed on the full (undropped) training graphs.
fn validation_hr(
    ctx: &Ctx,
    params: &ParameterSet,
    plan: StagePlan,
    val_split: &DatasetSplit,
) -> Result<f64, TrainError> {
    let cfg = ctx.cfg;
    let mut tape = Tape::new();
    let mul_emb = if plan.mul_path {
        Some(forward_mul(&mut tape, &ctx.train, params, cfg)?)
    } else {
        None
    };
    let kg_emb = if plan.kg_path {
        let full = single_behavior_graph(
            ctx.train.num_users,
            ctx.train.num_items,
            ctx.train.edges(ctx.train.target_behavior),
        )?;
        Some(forward_kg(
            &mut tape,
            params,
            cfg,
            ctx.kg,
            ctx.train.num_items,
            [&full, &full],
        )?)
    } else {
        None
    };
    let (user, item) = match (plan.combine, &mul_emb, &kg_emb) {
        (true, Some((mu, mi, _)), Some(((ku, ki), _))) => (
            combine_embeddings(&mut tape, *mu, *ku, cfg.alpha)?,
            combine_embeddings(&mut tape, *mi, *ki, cfg.alpha)?,
        ),
        (_, Some((mu, mi, _)), None) => (*mu, *mi),
        (_, None, Some(((ku, ki), _))) => (*ku, *ki),
        _ => unreachable!("stage plans always enable a module"),
    };
    let user_t = tape.value(user).clone();
    let item_t = tape.value(item).clone();
    let meta = RunMeta::new("validation", cfg.seed);
    let report = evaluate(&user_t, &item_t, val_split, cfg.eval_k, &[1], meta)?;
    Ok(report.hr)
}

/// Final user/item embeddings for a trained parameter set, using the full
/// training graphs (no sampling). This is what checkpoint consumers rank
/// with.
pub fn final_embeddings(
    cfg: &TrainConfig,
    train: &InteractionGraph,
    kg: &KnowledgeGraph,
    params: &ParameterSet,
) -> Result<(Tensor, Tensor), TrainError> {
    let mut tape = Tape::new();
    let (mu, mi, _) = forward_mul(&mut tape, train, params, cfg)?;
    let alpha = if cfg.disable_kcl { 0.0 } else { cfg.alpha };
    let (user, item) = if alpha == 0.0 {
        (mu, mi)
    } else {
        let full = single_behavior_graph(
            train.num_users,
            train.num_items,
            train.edges(train.target_behavior),
        )?;
        let ((ku, ki), _) = forward_kg(&mut tape, params, cfg, kg, train.num_items, [&full, &full])?;
        (
            combine_embeddings(&mut tape, mu, ku, alpha)?,
            combine_embeddings(&mut tape, mi, ki, alpha)?,
        )
    };
    Ok((tape.value(user).clone(), tape.value(item).clone()))
}

/// Carves a validation slice out of the training split: a fraction of the
/// users with >= 2 target interactions each give up one, which becomes
/// their validation positive.
fn build_validation(
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(InteractionGraph, Option<DatasetSplit>), TrainError> {
    let full = &split.train;
    let kt = full.target_behavior;
    if cfg.val_fraction == 0.0 {
        return Ok((full.clone(), None));
    }
    let mut eligible: Vec<u32> = (0..full.num_users as u32)
        .filter(|&u| full.user_neighbors(kt, u).len() >= 2)
        .collect();
    let take = ((eligible.len() as f64 * cfg.val_fraction).ceil() as usize).min(eligible.len());
    if take == 0 {
        return Ok((full.clone(), None));
    }
    let mut rng = seed::rng(cfg.seed, "validation:users");
    for slot in 0..take {
        let j = rng.gen_range(slot..eligible.len());
        eligible.swap(slot, j);
    }
    let mut val_users = eligible[..take].to_vec();
    val_users.sort_unstable();

    let mut pick_rng = seed::rng(cfg.seed, "validation:pick");
    let mut held = Vec::with_capacity(take);
    for &u in &val_users {
        let items = full.user_neighbors(kt, u);
        held.push((u, items[pick_rng.gen_range(0..items.len())]));
    }
    let held_set: BTreeSet<(u32, u32)> = held.iter().copied().collect();
    let edges: Vec<Vec<(u32, u32)>> = (0..full.num_behaviors)
        .map(|k| {
            full.edges(k)
                .iter()
                .copied()
                .filter(|e| k != kt || !held_set.contains(e))
                .collect()
        })
        .collect();
    let train = InteractionGraph::build(full.num_users, full.num_items, kt, edges)?;

    let mut neg_rng = seed::rng(cfg.seed, "validation:negatives");
    let mut candidates = Vec::with_capacity(held.len());
    for &(u, _) in &held {
        let interacted = full.interacted_any(u);
        let mut pool: Vec<u32> = (0..full.num_items as u32)
            .filter(|i| !interacted.contains(i))
            .collect();
        let take_n = cfg.num_negatives.min(pool.len());
        for slot in 0..take_n {
            let j = neg_rng.gen_range(slot..pool.len());
            pool.swap(slot, j);
        }
        pool.truncate(take_n);
        candidates.push(pool);
    }
    let val = DatasetSplit {
        train: train.clone(),
        test_positives: held,
        eval_candidates: candidates,
    };
    Ok((train, Some(val)))
}

/// Runs the configured training paradigm and returns the trained
/// parameters plus the per-epoch log.
pub fn train(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    kg: &KnowledgeGraph,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if kg.num_entities < split.train.num_items {
        return Err(TrainError::Config(format!(
            "knowledge graph covers {} entities but the data has {} items",
            kg.num_entities, split.train.num_items
        )));
    }

    let (train_graph, val) = build_validation(split, cfg)?;
    let target_pos: Vec<BTreeSet<u32>> = (0..split.train.num_users as u32)
        .map(|u| {
            split
                .train
                .user_neighbors(split.train.target_behavior, u)
                .iter()
                .copied()
                .collect()
        })
        .collect();
    let ctx = Ctx {
        cfg,
        train: train_graph,
        kg,
        target_pos,
        val,
    };

    let dims = ModelDims {
        num_users: ctx.train.num_users,
        num_items: ctx.train.num_items,
        num_entities: kg.num_entities,
        num_relations: kg.num_relations.max(1),
        d: cfg.d,
        layers: cfg.layers,
    };
    let mut init_rng = seed::rng(cfg.seed, "init");
    let mut params = init_params(&dims, &mut init_rng)?;
    let mut log = Vec::new();

    let kg_enabled = !cfg.disable_kcl;
    if cfg.normal_training {
        let plan = StagePlan {
            name: "normal",
            mul_path: true,
            kg_path: kg_enabled && cfg.alpha > 0.0,
            combine: kg_enabled && cfg.alpha > 0.0,
            mul_cl: !cfg.disable_mcl,
            kcl: kg_enabled,
            kg_ranking: kg_enabled,
            reg_scope: None,
        };
        let epochs = cfg.epochs_stage1 + cfg.epochs_stage2 + cfg.epochs_stage3;
        run_stage(&ctx, &mut params, plan, epochs, &mut log)?;
    } else {
        run_stage(
            &ctx,
            &mut params,
            StagePlan {
                name: "mul",
                mul_path: true,
                kg_path: false,
                combine: false,
                mul_cl: !cfg.disable_mcl,
                kcl: false,
                kg_ranking: false,
                reg_scope: Some(ModuleTag::MultiBehavior),
            },
            cfg.epochs_stage1,
            &mut log,
        )?;
        if kg_enabled {
            run_stage(
                &ctx,
                &mut params,
                StagePlan {
                    name: "kg",
                    mul_path: false,
                    kg_path: true,
                    combine: false,
                    mul_cl: false,
                    kcl: true,
                    kg_ranking: true,
                    reg_scope: Some(ModuleTag::Knowledge),
                },
                cfg.epochs_stage2,
                &mut log,
            )?;
        }
        let alpha_active = kg_enabled && cfg.alpha > 0.0;
        run_stage(
            &ctx,
            &mut params,
            StagePlan {
                name: "joint",
                mul_path: true,
                kg_path: alpha_active,
                combine: alpha_active,
                mul_cl: !cfg.disable_mcl,
                kcl: kg_enabled,
                kg_ranking: false,
                reg_scope: None,
            },
            cfg.epochs_stage3,
            &mut log,
        )?;
    }

    let best_val_hr = log
        .iter()
        .filter_map(|r| r.val_hr)
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        });
    Ok(TrainOutcome {
        params,
        log,
        best_val_hr,
    })
}
