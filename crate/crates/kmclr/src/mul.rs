//! Multi-behavior encoder: behavior-wise propagation, cross-behavior
//! aggregation, and the behavior-level contrastive loss.
//!
//! Propagation treats each behavior's interactions as its own bipartite
//! graph; a user layer is the (optionally degree-normalized) sum of its
//! item neighbors from the previous layer and vice versa. Aggregation
//! averages behaviors per layer, applies a shared linear-plus-sigmoid map,
//! then fuses the layer stack through a learned projection and PReLU.

use std::rc::Rc;

use crate::graph::InteractionGraph;
use crate::params::{ParamId, ParameterSet};
use crate::tape::{Edge, NodeId, Tape};
use crate::tensor::{TensorError, EPS};

#[derive(thiserror::Error, Debug)]
pub enum EncoderError {
    #[error("behavior {0} has no interactions")]
    EmptyBehavior(usize),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How neighbor sums are weighted during propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Literal unweighted neighbor sum.
    RawSum,
    /// 1/sqrt(deg_u * deg_i) per edge; the default (raw sums blow up with
    /// depth on dense graphs).
    Symmetric,
}

impl std::str::FromStr for NormMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw_sum" => Ok(NormMode::RawSum),
            "symmetric" => Ok(NormMode::Symmetric),
            other => Err(format!("unknown propagation mode '{other}'")),
        }
    }
}

/// Per-layer user and item tables of one behavior; index 0 is the raw
/// embedding table.
#[derive(Debug)]
pub struct BehaviorLayers {
    pub user: Vec<NodeId>,
    pub item: Vec<NodeId>,
}

impl BehaviorLayers {
    pub fn depth(&self) -> usize {
        self.user.len() - 1
    }
}

/// Weighted edge lists for one behavior: user-from-item and item-from-user.
pub fn propagation_edges(
    graph: &InteractionGraph,
    k: usize,
    mode: NormMode,
) -> (Rc<Vec<Edge>>, Rc<Vec<Edge>>) {
    let mut to_user = Vec::with_capacity(graph.edges(k).len());
    let mut to_item = Vec::with_capacity(graph.edges(k).len());
    for &(u, i) in graph.edges(k) {
        let w = match mode {
            NormMode::RawSum => 1.0,
            NormMode::Symmetric => {
                let du = graph.user_neighbors(k, u).len() as f64;
                let di = graph.item_neighbors(k, i).len() as f64;
                1.0 / (du * di).sqrt()
            }
        };
        to_user.push((u, i, w));
        to_item.push((i, u, w));
    }
    (Rc::new(to_user), Rc::new(to_item))
}

/// Runs `depth` propagation steps of behavior `k` starting from the raw
/// `mul.user` / `mul.item` tables.
pub fn propagate_behavior(
    tape: &mut Tape,
    graph: &InteractionGraph,
    k: usize,
    params: &ParameterSet,
    depth: usize,
    mode: NormMode,
) -> Result<BehaviorLayers, EncoderError> {
    if depth == 0 {
        return Err(EncoderError::Config("propagation depth must be >= 1".into()));
    }
    if graph.edges(k).is_empty() {
        return Err(EncoderError::EmptyBehavior(k));
    }
    let user0 = tape.param(params, pid(params, "mul.user"));
    let item0 = tape.param(params, pid(params, "mul.item"));
    propagate_from(tape, graph, k, user0, item0, depth, mode)
}

/// Propagation from explicit layer-0 nodes (shared by callers that hold
/// the raw tables as existing tape nodes).
pub fn propagate_from(
    tape: &mut Tape,
    graph: &InteractionGraph,
    k: usize,
    user0: NodeId,
    item0: NodeId,
    depth: usize,
    mode: NormMode,
) -> Result<BehaviorLayers, EncoderError> {
    let (to_user, to_item) = propagation_edges(graph, k, mode);
    let mut user = vec![user0];
    let mut item = vec![item0];
    for l in 0..depth {
        let next_u = tape.spmm(Rc::clone(&to_user), item[l], graph.num_users)?;
        let next_i = tape.spmm(Rc::clone(&to_item), user[l], graph.num_items)?;
        user.push(next_u);
        item.push(next_i);
    }
    Ok(BehaviorLayers { user, item })
}

/// Fused per-node embeddings after cross-behavior aggregation.
#[derive(Debug)]
pub struct FusedEmbeddings {
    pub user: NodeId,
    pub item: NodeId,
}

/// Cross-behavior aggregation: per layer, sigmoid of the behavior-mean
/// times a shared map; across layers, a learned projection of the layer
/// concatenation through PReLU. Users and items share the weights.
pub fn aggregate_cross_behavior(
    tape: &mut Tape,
    behaviors: &[BehaviorLayers],
    params: &ParameterSet,
) -> Result<FusedEmbeddings, EncoderError> {
    if behaviors.is_empty() {
        return Err(EncoderError::Aggregation("no behaviors to aggregate".into()));
    }
    let depth = behaviors[0].depth();
    if behaviors.iter().any(|b| b.depth() != depth) {
        return Err(EncoderError::Aggregation(
            "behaviors propagated to different depths".into(),
        ));
    }
    let w_u = tape.param(params, pid(params, "mul.w_u"));
    let w_l = tape.param(params, pid(params, "mul.w_l"));
    let slope = tape.param(params, pid(params, "mul.prelu"));

    let mut fused = [Vec::new(), Vec::new()]; // user layers, item layers
    for l in 0..=depth {
        let user_tables: Vec<NodeId> = behaviors.iter().map(|b| b.user[l]).collect();
        let item_tables: Vec<NodeId> = behaviors.iter().map(|b| b.item[l]).collect();
        for (side, tables) in [(0, user_tables), (1, item_tables)] {
            let mean = tape.mean_over(&tables)?;
            let mapped = tape.matmul_nt(mean, w_u)?;
            fused[side].push(tape.sigmoid(mapped));
        }
    }
    let mut out = [None, None];
    for side in 0..2 {
        let stacked = tape.concat_cols(&fused[side])?;
        let projected = tape.matmul(stacked, w_l)?;
        out[side] = Some(tape.prelu(projected, slope)?);
    }
    Ok(FusedEmbeddings {
        user: out[0].unwrap(),
        item: out[1].unwrap(),
    })
}

/// Per-behavior readout used by the contrastive loss: the layer mean of a
/// behavior's propagated tables.
pub fn behavior_readout(
    tape: &mut Tape,
    layers: &BehaviorLayers,
) -> Result<(NodeId, NodeId), EncoderError> {
    let user = tape.mean_over(&layers.user)?;
    let item = tape.mean_over(&layers.item)?;
    Ok((user, item))
}

/// InfoNCE over row-aligned batches: anchors[x] is positive with others[x]
/// and contrasted against every others[y] in the batch (y = x included).
/// Similarity is cosine scaled by 1/tau.
pub fn info_nce(
    tape: &mut Tape,
    anchors: NodeId,
    others: NodeId,
    tau: f64,
) -> Result<NodeId, EncoderError> {
    if tau <= 0.0 {
        return Err(EncoderError::Config(format!("temperature must be > 0, got {tau}")));
    }
    if tape.shape(anchors) != tape.shape(others) {
        return Err(EncoderError::Tensor(TensorError::DimMismatch {
            op: "info_nce",
            lhs: tape.shape(anchors),
            rhs: tape.shape(others),
        }));
    }
    let raw = tape.matmul_nt(anchors, others)?;
    let a_sq = tape.rowwise_dot(anchors, anchors)?;
    let o_sq = tape.rowwise_dot(others, others)?;
    let a_norm = tape.sqrt(a_sq);
    let o_norm = tape.sqrt(o_sq);
    let outer = tape.matmul_nt(a_norm, o_norm)?;
    // Norm products can genuinely vanish (all-zero rows); the exp-sum
    // denominator below cannot, so only this division is guarded.
    let outer = tape.add_scalar(outer, EPS);
    let cos = tape.div(raw, outer)?;
    let logits = tape.scale(cos, 1.0 / tau);
    let expd = tape.exp(logits);
    let row_sums = tape.sum_rows(expd);
    let log_denom = tape.log(row_sums);
    let pos = tape.diag(logits)?;
    let per_anchor = tape.sub(log_denom, pos)?;
    Ok(tape.sum_all(per_anchor))
}

/// Behavior-level contrastive loss: anchors come from the target behavior's
/// user readout, positives/negatives from each auxiliary behavior in turn.
///
/// `include_target_pair` also contrasts the target behavior against itself
/// (off by default; the self-pair carries no signal).
pub fn mul_cl_loss(
    tape: &mut Tape,
    behavior_user_tables: &[NodeId],
    target: usize,
    batch: &[usize],
    tau: f64,
    include_target_pair: bool,
) -> Result<NodeId, EncoderError> {
    if behavior_user_tables.len() < 2 {
        return Err(EncoderError::Contract(
            "behavior-level contrast needs >= 2 behaviors".into(),
        ));
    }
    if batch.len() < 2 {
        return Err(EncoderError::Contract(format!(
            "behavior-level contrast over a batch of {} is identically zero",
            batch.len()
        )));
    }
    if tau <= 0.0 {
        return Err(EncoderError::Config(format!("temperature must be > 0, got {tau}")));
    }
    let anchors = tape.gather_rows(behavior_user_tables[target], batch)?;
    let mut total: Option<NodeId> = None;
    for (k, &table) in behavior_user_tables.iter().enumerate() {
        if k == target && !include_target_pair {
            continue;
        }
        let others = tape.gather_rows(table, batch)?;
        let term = info_nce(tape, anchors, others, tau)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("at least one contrast pair"))
}

fn pid(params: &ParameterSet, name: &str) -> ParamId {
    params
        .id(name)
        .unwrap_or_else(|| panic!("parameter '{name}' missing from set"))
}
