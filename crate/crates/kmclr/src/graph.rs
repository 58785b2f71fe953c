//! Interaction and knowledge-graph data structures and their file formats.
//!
//! Both input formats are UTF-8 tab-separated files with three columns;
//! lines starting with `#` are comments. Raw ids are arbitrary tokens and
//! are densely reindexed on load; the token tables ride along so results
//! and checkpoints can be mapped back.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::seed;

#[derive(thiserror::Error, Debug)]
pub enum GraphError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("empty input: {path} contains no data rows")]
    EmptyInput { path: PathBuf },
    #[error("link error: {0}")]
    Link(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("config error: {0}")]
    Config(String),
}

/// Dense token table: index -> token and token -> index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: u32) -> &str {
        &self.tokens[i as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocab::new();
        for t in &tokens {
            v.intern(t);
        }
        assert_eq!(v.tokens.len(), tokens.len(), "duplicate tokens in vocab");
        v
    }
}

/// Declared behavior vocabulary for an interaction file and which behavior
/// is the prediction target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSchema {
    pub behaviors: Vec<String>,
    pub target: String,
}

impl InteractionSchema {
    pub fn target_index(&self) -> Result<usize, GraphError> {
        self.behaviors
            .iter()
            .position(|b| *b == self.target)
            .ok_or_else(|| {
                GraphError::Schema(format!(
                    "target behavior '{}' is not among the declared behaviors {:?}",
                    self.target, self.behaviors
                ))
            })
    }
}

/// Multi-behavior bipartite interaction graph with dense 0-based indices.
#[derive(Clone, Debug)]
pub struct InteractionGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub target_behavior: usize,
    /// Per behavior, deduplicated (user, item) pairs in sorted order.
    edges: Vec<Vec<(u32, u32)>>,
    edge_sets: Vec<HashSet<(u32, u32)>>,
    /// [behavior][user] -> item neighbors (sorted).
    user_adj: Vec<Vec<Vec<u32>>>,
    /// [behavior][item] -> user neighbors (sorted).
    item_adj: Vec<Vec<Vec<u32>>>,
}

impl InteractionGraph {
    /// Builds the indexed structure from raw per-behavior edge lists
    /// (deduplicating and sorting them).
    pub fn build(
        num_users: usize,
        num_items: usize,
        target_behavior: usize,
        mut edges: Vec<Vec<(u32, u32)>>,
    ) -> Result<Self, GraphError> {
        let num_behaviors = edges.len();
        if num_behaviors == 0 {
            return Err(GraphError::Schema("at least one behavior required".into()));
        }
        if target_behavior >= num_behaviors {
            return Err(GraphError::Schema(format!(
                "target behavior index {target_behavior} out of range (K={num_behaviors})"
            )));
        }
        let mut edge_sets = Vec::with_capacity(num_behaviors);
        let mut user_adj = vec![vec![Vec::new(); num_users]; num_behaviors];
        let mut item_adj = vec![vec![Vec::new(); num_items]; num_behaviors];
        for (k, list) in edges.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            for &(u, i) in list.iter() {
                if (u as usize) >= num_users || (i as usize) >= num_items {
                    return Err(GraphError::Schema(format!(
                        "edge ({u},{i}) out of range (I={num_users}, J={num_items})"
                    )));
                }
                user_adj[k][u as usize].push(i);
                item_adj[k][i as usize].push(u);
            }
            edge_sets.push(list.iter().copied().collect());
        }
        Ok(InteractionGraph {
            num_users,
            num_items,
            num_behaviors,
            target_behavior,
            edges,
            edge_sets,
            user_adj,
            item_adj,
        })
    }

    pub fn edges(&self, behavior: usize) -> &[(u32, u32)] {
        &self.edges[behavior]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, behavior: usize, user: u32, item: u32) -> bool {
        self.edge_sets[behavior].contains(&(user, item))
    }

    pub fn user_neighbors(&self, behavior: usize, user: u32) -> &[u32] {
        &self.user_adj[behavior][user as usize]
    }

    pub fn item_neighbors(&self, behavior: usize, item: u32) -> &[u32] {
        &self.item_adj[behavior][item as usize]
    }

    /// Train-interaction count of a user summed over all behaviors.
    pub fn user_degree_all(&self, user: u32) -> usize {
        (0..self.num_behaviors)
            .map(|k| self.user_adj[k][user as usize].len())
            .sum()
    }

    /// Items the user touched under any behavior.
    pub fn interacted_any(&self, user: u32) -> HashSet<u32> {
        let mut s = HashSet::new();
        for k in 0..self.num_behaviors {
            s.extend(self.user_adj[k][user as usize].iter().copied());
        }
        s
    }
}

/// Ingest statistics, rendered as `key=value` lines.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub rows_read: usize,
    pub comment_lines: usize,
    pub edges: usize,
    pub duplicates_dropped: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub triples: usize,
    pub self_loops: usize,
}

impl LoadReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rows_read={}", self.rows_read);
        let _ = writeln!(s, "comment_lines={}", self.comment_lines);
        if self.num_behaviors > 0 {
            let _ = writeln!(s, "edges={}", self.edges);
            let _ = writeln!(s, "duplicates_dropped={}", self.duplicates_dropped);
            let _ = writeln!(s, "num_users={}", self.num_users);
            let _ = writeln!(s, "num_items={}", self.num_items);
            let _ = writeln!(s, "num_behaviors={}", self.num_behaviors);
        } else {
            let _ = writeln!(s, "triples={}", self.triples);
            let _ = writeln!(s, "duplicates_dropped={}", self.duplicates_dropped);
            let _ = writeln!(s, "num_entities={}", self.num_entities);
            let _ = writeln!(s, "num_relations={}", self.num_relations);
            let _ = writeln!(s, "self_loops={}", self.self_loops);
        }
        s
    }
}

fn read_rows(path: &Path) -> Result<(Vec<(usize, [String; 3])>, usize), GraphError> {
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    let mut comments = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line_number = lineno + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            comments += 1;
            continue;
        }
        let mut cols = trimmed.split('\t');
        let (a, b, c) = (cols.next(), cols.next(), cols.next());
        let extra = cols.next();
        match (a, b, c, extra) {
            (Some(a), Some(b), Some(c), None)
                if !a.trim().is_empty() && !b.trim().is_empty() && !c.trim().is_empty() =>
            {
                rows.push((
                    line_number,
                    [a.trim().to_string(), b.trim().to_string(), c.trim().to_string()],
                ));
            }
            _ => {
                return Err(GraphError::Parse {
                    path: path.to_path_buf(),
                    line: line_number,
                    msg: "expected exactly 3 non-empty tab-separated columns".into(),
                });
            }
        }
    }
    Ok((rows, comments))
}

/// Loads `user <TAB> item <TAB> behavior` rows into an indexed graph.
///
/// Users and items are reindexed in first-appearance order; behavior
/// indices follow the declared order in `schema`.
pub fn load_interactions(
    path: &Path,
    schema: &InteractionSchema,
) -> Result<(InteractionGraph, Vocab, Vocab, LoadReport), GraphError> {
    let target = schema.target_index()?;
    let behavior_index: HashMap<&str, usize> = schema
        .behaviors
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), i))
        .collect();
    if behavior_index.len() != schema.behaviors.len() {
        return Err(GraphError::Schema("duplicate behavior names declared".into()));
    }

    let (rows, comment_lines) = read_rows(path)?;
    if rows.is_empty() {
        return Err(GraphError::EmptyInput {
            path: path.to_path_buf(),
        });
    }

    let mut users = Vocab::new();
    let mut items = Vocab::new();
    let mut edges: Vec<Vec<(u32, u32)>> = vec![Vec::new(); schema.behaviors.len()];
    let mut raw_rows = 0usize;
    for (line, [u_tok, i_tok, b_tok]) in &rows {
        let Some(&k) = behavior_index.get(b_tok.as_str()) else {
            return Err(GraphError::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!(
                    "unknown behavior '{}' (declared: {:?})",
                    b_tok, schema.behaviors
                ),
            });
        };
        let u = users.intern(u_tok);
        let i = items.intern(i_tok);
        edges[k].push((u, i));
        raw_rows += 1;
    }

    let graph = InteractionGraph::build(users.len(), items.len(), target, edges)?;
    let report = LoadReport {
        rows_read: raw_rows,
        comment_lines,
        edges: graph.num_edges(),
        duplicates_dropped: raw_rows - graph.num_edges(),
        num_users: graph.num_users,
        num_items: graph.num_items,
        num_behaviors: graph.num_behaviors,
        ..LoadReport::default()
    };
    Ok((graph, users, items, report))
}

/// Writes the canonical (sorted, deduplicated) edge set back to a file.
pub fn save_interactions(
    graph: &InteractionGraph,
    users: &Vocab,
    items: &Vocab,
    behaviors: &[String],
    path: &Path,
) -> Result<(), GraphError> {
    let mut out = String::from("# user\titem\tbehavior\n");
    for k in 0..graph.num_behaviors {
        for &(u, i) in graph.edges(k) {
            let _ = writeln!(out, "{}\t{}\t{}", users.token(u), items.token(i), &behaviors[k]);
        }
    }
    std::fs::write(path, out).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Item knowledge graph over entities; items occupy entity indices `[0, J)`.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    pub num_entities: usize,
    pub num_relations: usize,
    /// Deduplicated (head, relation, tail) triples in sorted order.
    triples: Vec<(u32, u32, u32)>,
    triple_set: HashSet<(u32, u32, u32)>,
    /// Per head entity: (relation, tail) out-edges.
    out_neighbors: Vec<Vec<(u32, u32)>>,
}

impl KnowledgeGraph {
    pub fn build(
        num_entities: usize,
        num_relations: usize,
        mut triples: Vec<(u32, u32, u32)>,
    ) -> Result<Self, GraphError> {
        triples.sort_unstable();
        triples.dedup();
        let mut out_neighbors = vec![Vec::new(); num_entities];
        for &(h, r, t) in &triples {
            if (h as usize) >= num_entities || (t as usize) >= num_entities {
                return Err(GraphError::Schema(format!(
                    "triple entity out of range: ({h},{r},{t}) with E={num_entities}"
                )));
            }
            if (r as usize) >= num_relations {
                return Err(GraphError::Schema(format!(
                    "triple relation out of range: ({h},{r},{t}) with R={num_relations}"
                )));
            }
            out_neighbors[h as usize].push((r, t));
        }
        let triple_set = triples.iter().copied().collect();
        Ok(KnowledgeGraph {
            num_entities,
            num_relations,
            triples,
            triple_set,
            out_neighbors,
        })
    }

    pub fn triples(&self) -> &[(u32, u32, u32)] {
        &self.triples
    }

    pub fn has_triple(&self, h: u32, r: u32, t: u32) -> bool {
        self.triple_set.contains(&(h, r, t))
    }

    /// (relation, tail) out-edges of a head entity.
    pub fn neighbors(&self, head: u32) -> &[(u32, u32)] {
        &self.out_neighbors[head as usize]
    }
}

/// Loads `head <TAB> relation <TAB> tail` triples.
///
/// Head/tail tokens matching an item id resolve to that item's entity
/// index; a `item:`-prefixed token *must* resolve and otherwise raises a
/// link error; any other token becomes a fresh non-item entity with index
/// >= J. Self-loop triples are accepted and counted in the load report.
pub fn load_kg(
    path: &Path,
    items: &Vocab,
) -> Result<(KnowledgeGraph, Vocab, Vocab, LoadReport), GraphError> {
    let (rows, comment_lines) = read_rows(path)?;
    if rows.is_empty() {
        return Err(GraphError::EmptyInput {
            path: path.to_path_buf(),
        });
    }

    let mut entities = Vocab::from_tokens(items.tokens().to_vec());
    let mut relations = Vocab::new();
    let resolve = |tok: &str, entities: &mut Vocab| -> Result<u32, GraphError> {
        if let Some(itemish) = tok.strip_prefix("item:") {
            return items.get(itemish).ok_or_else(|| {
                GraphError::Link(format!(
                    "'{tok}' references item '{itemish}' absent from the interaction data"
                ))
            });
        }
        Ok(entities.intern(tok))
    };

    let mut triples = Vec::with_capacity(rows.len());
    let mut self_loops = 0usize;
    for (_line, [h_tok, r_tok, t_tok]) in &rows {
        let h = resolve(h_tok, &mut entities)?;
        let t = resolve(t_tok, &mut entities)?;
        let r = relations.intern(r_tok);
        if h == t {
            self_loops += 1;
        }
        triples.push((h, r, t));
    }
    let raw = triples.len();
    let kg = KnowledgeGraph::build(entities.len(), relations.len(), triples)?;
    let report = LoadReport {
        rows_read: raw,
        comment_lines,
        duplicates_dropped: raw - kg.triples().len(),
        num_entities: kg.num_entities,
        num_relations: kg.num_relations,
        triples: kg.triples().len(),
        self_loops,
        ..LoadReport::default()
    };
    Ok((kg, entities, relations, report))
}

pub fn save_kg(
    kg: &KnowledgeGraph,
    entities: &Vocab,
    relations: &Vocab,
    path: &Path,
) -> Result<(), GraphError> {
    let mut out = String::from("# head\trelation\ttail\n");
    for &(h, r, t) in kg.triples() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            entities.token(h),
            relations.token(r),
            entities.token(t)
        );
    }
    std::fs::write(path, out).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Leave-one-out split: one held-out target interaction per eligible user,
/// plus that user's fixed negative-candidate pool for ranking.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: InteractionGraph,
    /// (user, held-out item), ascending by user.
    pub test_positives: Vec<(u32, u32)>,
    /// Sampled negative items per test user, parallel to `test_positives`.
    pub eval_candidates: Vec<Vec<u32>>,
}

/// Holds out one random target-behavior interaction per user with at least
/// two of them, and samples up to `num_negatives` ranking negatives per
/// test user from the items that user never touched under any behavior.
/// Deterministic under `seed`.
pub fn split_leave_one_out(
    graph: &InteractionGraph,
    seed: u64,
    num_negatives: usize,
) -> Result<DatasetSplit, GraphError> {
    let kt = graph.target_behavior;
    let mut pick_rng = seed::rng(seed, "split:holdout");
    let mut held: Vec<(u32, u32)> = Vec::new();
    let mut held_set: HashSet<(u32, u32)> = HashSet::new();
    for u in 0..graph.num_users as u32 {
        let items = graph.user_neighbors(kt, u);
        if items.len() < 2 {
            continue;
        }
        let pick = items[pick_rng.gen_range(0..items.len())];
        held.push((u, pick));
        held_set.insert((u, pick));
    }
    if held.is_empty() {
        return Err(GraphError::Split(
            "no user has >= 2 target-behavior interactions; nothing to hold out".into(),
        ));
    }

    let mut edges: Vec<Vec<(u32, u32)>> = Vec::with_capacity(graph.num_behaviors);
    for k in 0..graph.num_behaviors {
        let list = graph
            .edges(k)
            .iter()
            .copied()
            .filter(|e| k != kt || !held_set.contains(e))
            .collect();
        edges.push(list);
    }
    let train = InteractionGraph::build(graph.num_users, graph.num_items, kt, edges)?;

    let mut neg_rng = seed::rng(seed, "split:negatives");
    let mut eval_candidates = Vec::with_capacity(held.len());
    for &(u, _) in &held {
        let interacted = graph.interacted_any(u);
        let mut pool: Vec<u32> = (0..graph.num_items as u32)
            .filter(|i| !interacted.contains(i))
            .collect();
        // partial Fisher-Yates: draw min(num_negatives, |pool|) without replacement
        let take = num_negatives.min(pool.len());
        for slot in 0..take {
            let j = neg_rng.gen_range(slot..pool.len());
            pool.swap(slot, j);
        }
        pool.truncate(take);
        eval_candidates.push(pool);
    }

    Ok(DatasetSplit {
        train,
        test_positives: held,
        eval_candidates,
    })
}

/// Assigns each test user to the interval of `boundaries` containing their
/// total train-interaction count; counts at or above the last boundary land
/// in the overflow bucket. Returns indices parallel to `test_positives`.
pub fn sparsity_buckets(
    split: &DatasetSplit,
    boundaries: &[usize],
) -> Result<Vec<usize>, GraphError> {
    if boundaries.is_empty() {
        return Err(GraphError::Config("sparsity boundaries must be non-empty".into()));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GraphError::Config(
            "sparsity boundaries must be strictly increasing".into(),
        ));
    }
    Ok(split
        .test_positives
        .iter()
        .map(|&(u, _)| {
            let count = split.train.user_degree_all(u);
            boundaries.iter().position(|&b| count < b).unwrap_or(boundaries.len())
        })
        .collect())
}

/// Human-readable interval label for bucket `idx` under `boundaries`.
pub fn bucket_label(boundaries: &[usize], idx: usize) -> String {
    if idx == 0 {
        format!("[0,{})", boundaries[0])
    } else if idx < boundaries.len() {
        format!("[{},{})", boundaries[idx - 1], boundaries[idx])
    } else {
        format!("[{},inf)", boundaries[boundaries.len() - 1])
    }
}
