//! Knowledge encoder: attentive KG aggregation, the two triple-scoring
//! models and their ranking losses, consistency-guided interaction-graph
//! view sampling, and the knowledge-aware contrastive loss.
//!
//! Two views of the knowledge graph are trained side by side: a
//! translational-distance view and a semantic-matching view. Each view owns
//! its entity/relation/projection tables; the attention aggregation weights
//! are shared. Structure-consistency scores computed from each view steer
//! the edge-dropout sampling of two interaction subgraphs, which in turn
//! feed the node-level contrastive loss.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{InteractionGraph, KnowledgeGraph};
use crate::mul::{info_nce, EncoderError};
use crate::params::{ParamId, ParameterSet};
use crate::seed;
use crate::tape::{NodeId, Tape};
use crate::tensor::{cosine, Tensor, TensorError, EPS};

#[derive(thiserror::Error, Debug)]
pub enum KgError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("sampler error: {0}")]
    Sampler(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Which knowledge-graph view a computation addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KgVariant {
    /// Translational-distance scoring (projected difference norm).
    Translational,
    /// Semantic-matching scoring (bilinear plus diagonal terms).
    Semantic,
}

impl KgVariant {
    pub fn prefix(self) -> &'static str {
        match self {
            KgVariant::Translational => "kg1",
            KgVariant::Semantic => "kg2",
        }
    }
}

fn view_param(params: &ParameterSet, variant: KgVariant, field: &str) -> ParamId {
    let name = format!("{}.{}", variant.prefix(), field);
    params
        .id(&name)
        .unwrap_or_else(|| panic!("parameter '{name}' missing from set"))
}

fn shared_param(params: &ParameterSet, name: &str) -> ParamId {
    params
        .id(name)
        .unwrap_or_else(|| panic!("parameter '{name}' missing from set"))
}

/// Result of attentive aggregation: per-hop entity tables (`layers[0]` is
/// the raw table) and, for inspection, the per-hop attention weight columns
/// aligned with `heads`.
#[derive(Debug)]
pub struct KgAggregation {
    pub layers: Vec<NodeId>,
    pub attention: Vec<NodeId>,
    pub heads: Vec<usize>,
}

impl KgAggregation {
    pub fn output(&self) -> NodeId {
        *self.layers.last().unwrap()
    }
}

/// Attentive aggregation over the full triple set of `kg`.
pub fn kg_attention_aggregate(
    tape: &mut Tape,
    kg: &KnowledgeGraph,
    params: &ParameterSet,
    variant: KgVariant,
    depth: usize,
) -> Result<KgAggregation, KgError> {
    aggregate_over_triples(tape, kg.triples(), kg.num_entities, params, variant, depth)
}

/// Attentive aggregation over an explicit triple subset (used by the
/// consistency subgraphs).
///
/// Per hop: every triple contributes its tail embedding to its head,
/// weighted by a neighborhood softmax of exp(sigmoid(W1 [head||rel||tail])
/// + b1); the head's own embedding is added and the sum passed through a
/// linear map, bias, and sigmoid. An entity without out-edges keeps only
/// its self term.
pub fn aggregate_over_triples(
    tape: &mut Tape,
    triples: &[(u32, u32, u32)],
    num_entities: usize,
    params: &ParameterSet,
    variant: KgVariant,
    depth: usize,
) -> Result<KgAggregation, KgError> {
    if depth == 0 {
        return Err(KgError::Config("aggregation depth must be >= 1".into()));
    }
    let entity_id = view_param(params, variant, "entity");
    let relation_id = view_param(params, variant, "relation");
    let w1 = tape.param(params, shared_param(params, "kg.att_w1"));
    let w2 = tape.param(params, shared_param(params, "kg.att_w2"));
    let b1 = tape.param(params, shared_param(params, "kg.att_b1"));
    let b2 = tape.param(params, shared_param(params, "kg.att_b2"));

    let heads: Vec<usize> = triples.iter().map(|t| t.0 as usize).collect();
    let rels: Vec<usize> = triples.iter().map(|t| t.1 as usize).collect();
    let tails: Vec<usize> = triples.iter().map(|t| t.2 as usize).collect();
    let d = params.value(entity_id).cols();

    let x0 = tape.param(params, entity_id);
    let mut layers = vec![x0];
    let mut attention = Vec::new();
    for _ in 0..depth {
        let x = *layers.last().unwrap();
        let agg = if heads.is_empty() {
            tape.constant(Tensor::zeros(num_entities, d))
        } else {
            let xh = tape.gather_rows(x, &heads)?;
            let xt = tape.gather_rows(x, &tails)?;
            let vr = tape.param_rows(params, relation_id, &rels)?;
            let cat = tape.concat_cols(&[xh, vr, xt])?;
            let logits = tape.matmul(cat, w1)?;
            let gated = tape.sigmoid(logits);
            let shifted = tape.add_scalar_node(gated, b1)?;
            let f_att = tape.exp(shifted);
            // Softmax over each head's neighborhood; the sums are strictly
            // positive, so no guard term here.
            let denom = tape.segment_sum(f_att, &heads, num_entities)?;
            let denom_rows = tape.gather_rows(denom, &heads)?;
            let weights = tape.div(f_att, denom_rows)?;
            attention.push(weights);
            let weighted = tape.mul_col_vec(xt, weights)?;
            tape.segment_sum(weighted, &heads, num_entities)?
        };
        let with_self = tape.add(x, agg)?;
        let mapped = tape.matmul_nt(with_self, w2)?;
        let biased = tape.add_scalar_node(mapped, b2)?;
        layers.push(tape.sigmoid(biased));
    }
    Ok(KgAggregation {
        layers,
        attention,
        heads,
    })
}

fn check_triples(
    params: &ParameterSet,
    variant: KgVariant,
    rels: &[u32],
) -> Result<(), KgError> {
    let relation_id = view_param(params, variant, "relation");
    let num_relations = params.value(relation_id).rows();
    for &r in rels {
        if r as usize >= num_relations {
            return Err(KgError::Lookup(format!(
                "relation {r} out of range (R={num_relations})"
            )));
        }
    }
    Ok(())
}

/// Scores a batch of triples under the view's model, aligned with input
/// order. Translational: minus the squared norm of the projected
/// translation residual (always <= 0). Semantic: bilinear head-tail term
/// plus both relation dot products plus a diagonal head-tail term.
pub fn triple_scores(
    tape: &mut Tape,
    params: &ParameterSet,
    variant: KgVariant,
    heads: &[u32],
    rels: &[u32],
    tails: &[u32],
) -> Result<NodeId, KgError> {
    if heads.len() != rels.len() || heads.len() != tails.len() {
        return Err(KgError::Contract(
            "heads/relations/tails must have equal length".into(),
        ));
    }
    if heads.is_empty() {
        return Err(KgError::Contract("empty triple batch".into()));
    }
    check_triples(params, variant, rels)?;
    let entity_id = view_param(params, variant, "entity");
    let relation_id = view_param(params, variant, "relation");
    let proj_id = view_param(params, variant, "proj");
    let d = params.value(entity_id).cols();

    // Group triples by relation so each group shares one projection block.
    let mut order: Vec<usize> = (0..heads.len()).collect();
    order.sort_by_key(|&i| rels[i]);

    let mut group_scores = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let r = rels[order[start]];
        let mut end = start;
        while end < order.len() && rels[order[end]] == r {
            end += 1;
        }
        let idx = &order[start..end];
        let h_rows: Vec<usize> = idx.iter().map(|&i| heads[i] as usize).collect();
        let t_rows: Vec<usize> = idx.iter().map(|&i| tails[i] as usize).collect();
        let r_rows: Vec<usize> = vec![r as usize; idx.len()];
        let h = tape.param_rows(params, entity_id, &h_rows)?;
        let t = tape.param_rows(params, entity_id, &t_rows)?;
        let vr = tape.param_rows(params, relation_id, &r_rows)?;
        let proj_rows: Vec<usize> = (r as usize * d..(r as usize + 1) * d).collect();
        let m_r = tape.param_rows(params, proj_id, &proj_rows)?;

        let score = match variant {
            KgVariant::Translational => {
                let hp = tape.matmul_nt(h, m_r)?;
                let tp = tape.matmul_nt(t, m_r)?;
                let diff = tape.sub(hp, tp)?;
                let resid = tape.add(diff, vr)?;
                let sq = tape.rowwise_dot(resid, resid)?;
                tape.scale(sq, -1.0)
            }
            KgVariant::Semantic => {
                let diag = tape.param(params, shared_param(params, "kg2.diag"));
                let tp = tape.matmul_nt(t, m_r)?;
                let bilinear = tape.rowwise_dot(h, tp)?;
                let hr = tape.rowwise_dot(h, vr)?;
                let tr = tape.rowwise_dot(t, vr)?;
                let td = tape.mul_row_vec(t, diag)?;
                let hd = tape.rowwise_dot(h, td)?;
                let s1 = tape.add(bilinear, hr)?;
                let s2 = tape.add(tr, hd)?;
                tape.add(s1, s2)?
            }
        };
        group_scores.push(score);
        start = end;
    }
    let grouped = if group_scores.len() == 1 {
        group_scores[0]
    } else {
        tape.concat_rows(&group_scores)?
    };
    // Undo the relation-sort so row i scores triple i.
    let mut inverse = vec![0usize; order.len()];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos;
    }
    Ok(tape.gather_rows(grouped, &inverse)?)
}

/// Convenience single-triple score.
pub fn transr_score(
    tape: &mut Tape,
    params: &ParameterSet,
    h: u32,
    r: u32,
    t: u32,
) -> Result<NodeId, KgError> {
    triple_scores(tape, params, KgVariant::Translational, &[h], &[r], &[t])
}

/// Convenience single-triple score.
pub fn tatec_score(
    tape: &mut Tape,
    params: &ParameterSet,
    h: u32,
    r: u32,
    t: u32,
) -> Result<NodeId, KgError> {
    triple_scores(tape, params, KgVariant::Semantic, &[h], &[r], &[t])
}

/// Which way the true/corrupt score difference enters the ranking loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreOrder {
    /// -ln sigmoid(f(true) - f(corrupt)): rewards the observed triple.
    /// The conventional order and the default.
    TrueMinusCorrupt,
    /// -ln sigmoid(f(corrupt) - f(true)): the source formulas as printed.
    CorruptMinusTrue,
}

impl std::str::FromStr for ScoreOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "true_minus_corrupt" => Ok(ScoreOrder::TrueMinusCorrupt),
            "corrupt_minus_true" => Ok(ScoreOrder::CorruptMinusTrue),
            other => Err(format!("unknown score order '{other}'")),
        }
    }
}

/// Uniformly samples one corrupted tail per triple, rejecting tails that
/// form an observed triple (and the original tail itself).
pub fn sample_corrupt_tails(
    kg: &KnowledgeGraph,
    triples: &[(u32, u32, u32)],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>, KgError> {
    let e = kg.num_entities as u32;
    if e < 2 {
        return Err(KgError::Sampler(
            "entity universe too small to corrupt tails".into(),
        ));
    }
    let mut out = Vec::with_capacity(triples.len());
    for &(h, r, t) in triples {
        let mut found = None;
        for _ in 0..1000 {
            let cand = rng.gen_range(0..e);
            if cand != t && !kg.has_triple(h, r, cand) {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(c) => out.push(c),
            None => {
                return Err(KgError::Sampler(format!(
                    "no valid corrupted tail for ({h},{r},{t}) after 1000 draws"
                )))
            }
        }
    }
    Ok(out)
}

/// Pairwise ranking loss over a triple batch: sum of -ln sigmoid of the
/// per-triple score difference, ordered per `order`.
pub fn kg_ranking_loss(
    tape: &mut Tape,
    params: &ParameterSet,
    variant: KgVariant,
    triples: &[(u32, u32, u32)],
    corrupt_tails: &[u32],
    order: ScoreOrder,
) -> Result<NodeId, KgError> {
    if triples.is_empty() {
        return Err(KgError::Contract("empty triple batch".into()));
    }
    if triples.len() != corrupt_tails.len() {
        return Err(KgError::Contract(
            "corrupt tails must align with triples".into(),
        ));
    }
    let heads: Vec<u32> = triples.iter().map(|t| t.0).collect();
    let rels: Vec<u32> = triples.iter().map(|t| t.1).collect();
    let tails: Vec<u32> = triples.iter().map(|t| t.2).collect();
    let s_true = triple_scores(tape, params, variant, &heads, &rels, &tails)?;
    let s_corrupt = triple_scores(tape, params, variant, &heads, &rels, corrupt_tails)?;
    let diff = match order {
        ScoreOrder::TrueMinusCorrupt => tape.sub(s_true, s_corrupt)?,
        ScoreOrder::CorruptMinusTrue => tape.sub(s_corrupt, s_true)?,
    };
    let per_triple = tape.neg_log_sigmoid(diff);
    Ok(tape.sum_all(per_triple))
}

/// Structure-consistency scores for the first `num_items` entities of one
/// view: the view's KG is edge-dropped twice (ratio `rho`, two derived
/// seeds), items are aggregated on both subgraphs, and each item's score is
/// its cosine agreement mapped to [0,1]. Forward-only; touches no
/// gradients.
pub fn consistency_scores(
    kg: &KnowledgeGraph,
    params: &ParameterSet,
    variant: KgVariant,
    depth: usize,
    rho: f64,
    seed_base: u64,
    num_items: usize,
) -> Result<Vec<f64>, KgError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(KgError::Config(format!(
            "dropout ratio must be in [0,1), got {rho}"
        )));
    }
    let keep = |label: &str| -> Vec<(u32, u32, u32)> {
        let mut rng = seed::rng(seed_base, label);
        kg.triples()
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(1.0 - rho))
            .collect()
    };
    let sub_a = keep("consistency:a");
    let sub_b = keep("consistency:b");

    let embed = |triples: &[(u32, u32, u32)]| -> Result<Tensor, KgError> {
        let mut tape = Tape::new();
        let agg = aggregate_over_triples(
            &mut tape,
            triples,
            kg.num_entities,
            params,
            variant,
            depth,
        )?;
        Ok(tape.value(agg.output()).clone())
    };
    let ea = embed(&sub_a)?;
    let eb = embed(&sub_b)?;

    let mut c = Vec::with_capacity(num_items);
    for i in 0..num_items {
        let (ra, rb) = (ea.row(i), eb.row(i));
        let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if ra == rb && na > 0.0 {
            // bitwise-equal rows agree exactly; skip the sqrt roundoff
            c.push(1.0);
        } else if na * nb < EPS {
            // agreement undefined for a zero embedding: neutral score
            c.push(0.5);
        } else {
            c.push(((cosine(ra, rb) + 1.0) / 2.0).clamp(0.0, 1.0));
        }
    }
    Ok(c)
}

/// Affine min-max map of `values` onto [a, b]; all-equal inputs map to the
/// interval midpoint.
pub fn min_max_to_interval(values: &[f64], a: f64, b: f64) -> Result<Vec<f64>, KgError> {
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
        return Err(KgError::Config(format!(
            "retention interval must satisfy 0 <= a <= b <= 1, got [{a}, {b}]"
        )));
    }
    let mn = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mx = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Ok(Vec::new());
    }
    if mx - mn < EPS {
        return Ok(vec![(a + b) / 2.0; values.len()]);
    }
    // Lerp form: t = 0 and t = 1 reproduce a and b bitwise; the clamp only
    // absorbs roundoff on interior points.
    Ok(values
        .iter()
        .map(|&v| {
            let t = (v - mn) / (mx - mn);
            (a * (1.0 - t) + b * t).clamp(a, b)
        })
        .collect())
}

/// Per-edge retention probabilities: sigmoid of the user-item embedding dot
/// scaled by the item's consistency score, min-max mapped onto [a, b].
pub fn edge_sampling_probabilities(
    edges: &[(u32, u32)],
    user_emb: &Tensor,
    item_emb: &Tensor,
    c: &[f64],
    a: f64,
    b: f64,
) -> Result<Vec<f64>, KgError> {
    let raw: Vec<f64> = edges
        .iter()
        .map(|&(u, i)| {
            let dot: f64 = user_emb
                .row(u as usize)
                .iter()
                .zip(item_emb.row(i as usize))
                .map(|(x, y)| x * y)
                .sum();
            let sig = 1.0 / (1.0 + (-dot).exp());
            sig * c[i as usize]
        })
        .collect();
    min_max_to_interval(&raw, a, b)
}

/// A consistency-guided pair of interaction subgraphs, one per KG view.
#[derive(Clone, Debug)]
pub struct ViewPair {
    /// Kept target-behavior edges, one list per view.
    pub edges: [Vec<(u32, u32)>; 2],
    /// The consistency vectors that generated them.
    pub consistency: [Vec<f64>; 2],
    pub warnings: Vec<String>,
}

/// Samples the two interaction subgraphs. Each view drops KG edges, scores
/// item consistency, converts it to per-edge retention probabilities, and
/// keeps each target edge by an independent Bernoulli draw. A view that
/// strands a previously connected user is resampled once; a persisting gap
/// is reported in `warnings`.
#[allow(clippy::too_many_arguments)]
pub fn sample_view_pair(
    train: &InteractionGraph,
    kg: &KnowledgeGraph,
    params: &ParameterSet,
    depth: usize,
    rho: f64,
    a: f64,
    b: f64,
    seed_base: u64,
) -> Result<ViewPair, KgError> {
    let kt = train.target_behavior;
    let target_edges = train.edges(kt);
    let user_emb = params.value(shared_param(params, "kg.user")).clone();

    let mut edges_out: [Vec<(u32, u32)>; 2] = [Vec::new(), Vec::new()];
    let mut c_out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut warnings = Vec::new();

    for (slot, variant) in [KgVariant::Translational, KgVariant::Semantic]
        .into_iter()
        .enumerate()
    {
        let c = consistency_scores(
            kg,
            params,
            variant,
            depth,
            rho,
            seed::derive_seed(seed_base, variant.prefix()),
            train.num_items,
        )?;
        // aggregated item rows of this view, detached
        let item_emb = {
            let mut tape = Tape::new();
            let agg = kg_attention_aggregate(&mut tape, kg, params, variant, depth)?;
            tape.value(agg.output()).clone()
        };
        let probs = edge_sampling_probabilities(target_edges, &user_emb, &item_emb, &c, a, b)?;

        let connected: Vec<u32> = (0..train.num_users as u32)
            .filter(|&u| !train.user_neighbors(kt, u).is_empty())
            .collect();
        let draw = |label: &str| -> Vec<(u32, u32)> {
            let mut rng = seed::rng(seed_base, label);
            target_edges
                .iter()
                .zip(&probs)
                .filter(|&(_, &p)| rng.gen_bool(p))
                .map(|(&e, _)| e)
                .collect()
        };
        let covered = |kept: &[(u32, u32)]| -> Vec<u32> {
            let have: HashSet<u32> = kept.iter().map(|e| e.0).collect();
            connected
                .iter()
                .copied()
                .filter(|u| !have.contains(u))
                .collect()
        };

        let first_label = format!("views:{}", variant.prefix());
        let mut kept = draw(&first_label);
        let mut missing = covered(&kept);
        if !missing.is_empty() {
            kept = draw(&format!("{first_label}:retry"));
            missing = covered(&kept);
            if !missing.is_empty() {
                warnings.push(format!(
                    "view {} left {} user(s) with no edges after resampling (first: user {})",
                    variant.prefix(),
                    missing.len(),
                    missing[0]
                ));
            }
        }
        edges_out[slot] = kept;
        c_out[slot] = c;
    }

    Ok(ViewPair {
        edges: edges_out,
        consistency: c_out,
        warnings,
    })
}

/// Writes a view pair's edge lists and consistency vectors for inspection.
pub fn write_view_pair(pair: &ViewPair, dir: &Path) -> Result<(), KgError> {
    let io_err = |path: &Path, source| KgError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (slot, name) in [(0, "view1"), (1, "view2")] {
        let mut edges = String::from("# user\titem\n");
        for &(u, i) in &pair.edges[slot] {
            let _ = writeln!(edges, "{u}\t{i}");
        }
        let path = dir.join(format!("{name}_edges.tsv"));
        std::fs::write(&path, edges).map_err(|e| io_err(&path, e))?;

        let mut cons = String::from("# item\tconsistency\n");
        for (i, c) in pair.consistency[slot].iter().enumerate() {
            let _ = writeln!(cons, "{i}\t{c}");
        }
        let path = dir.join(format!("{name}_consistency.tsv"));
        std::fs::write(&path, cons).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Node-level contrastive loss between the two views: the same batch rows
/// are gathered from both embedding tables; row x of one view is positive
/// with row x of the other and contrasted against the rest of the batch.
pub fn kcl_loss(
    tape: &mut Tape,
    view1: NodeId,
    view2: NodeId,
    batch: &[usize],
    tau: f64,
) -> Result<NodeId, KgError> {
    if batch.len() < 2 {
        return Err(KgError::Contract(format!(
            "node-level contrast over a batch of {} is identically zero",
            batch.len()
        )));
    }
    let anchors = tape.gather_rows(view1, batch)?;
    let others = tape.gather_rows(view2, batch)?;
    Ok(info_nce(tape, anchors, others, tau)?)
}
