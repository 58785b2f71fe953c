//! Planted-preference synthetic data: clustered users and items, auxiliary
//! behaviors that are noisy supersets of the target preferences, and a
//! knowledge graph linking items of the same cluster. Every signal has a
//! noise knob so sweeps can degrade it gradually.

use rand::Rng;

use crate::graph::{GraphError, InteractionGraph, InteractionSchema, KnowledgeGraph, Vocab};
use crate::seed;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub clusters: usize,
    /// Target interactions planted per user, all inside the user's cluster.
    pub target_per_user: usize,
    /// Probability that each planted target edge is mirrored into each
    /// auxiliary behavior (behavior correlation; 1 = aux are supersets).
    pub aux_cover: f64,
    /// Probability that each remaining in-cluster item also appears in an
    /// auxiliary behavior (behavior correlation).
    pub aux_extra: f64,
    /// Probability that each out-of-cluster item leaks into an auxiliary
    /// behavior (cross-cluster noise).
    pub cross_noise: f64,
    /// Probability that a planted target edge is rewired to a random item.
    pub target_noise: f64,
    /// Probability that a KG triple's tail is rewired to a wrong entity of
    /// the same kind (0 = fully informative KG).
    pub kg_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 50,
            num_items: 30,
            num_behaviors: 3,
            clusters: 5,
            target_per_user: 3,
            aux_cover: 1.0,
            aux_extra: 0.5,
            cross_noise: 0.05,
            target_noise: 0.0,
            kg_noise: 0.0,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    /// Flat `key = value` dump, parseable by [`SyntheticConfig::parse`].
    pub fn to_text(&self) -> String {
        format!(
            "num_users = {}\nnum_items = {}\nnum_behaviors = {}\nclusters = {}\n\
             target_per_user = {}\naux_cover = {}\naux_extra = {}\ncross_noise = {}\n\
             target_noise = {}\nkg_noise = {}\nseed = {}\n",
            self.num_users,
            self.num_items,
            self.num_behaviors,
            self.clusters,
            self.target_per_user,
            self.aux_cover,
            self.aux_extra,
            self.cross_noise,
            self.target_noise,
            self.kg_noise,
            self.seed,
        )
    }

    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut cfg = SyntheticConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| GraphError::Config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected 'key = value'".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(format!("duplicate key '{key}'")));
            }
            let int = |v: &str| -> Result<usize, GraphError> {
                v.parse().map_err(|_| bad(format!("'{v}' is not a count")))
            };
            let float = |v: &str| -> Result<f64, GraphError> {
                v.parse().map_err(|_| bad(format!("'{v}' is not a number")))
            };
            match key {
                "num_users" => cfg.num_users = int(value)?,
                "num_items" => cfg.num_items = int(value)?,
                "num_behaviors" => cfg.num_behaviors = int(value)?,
                "clusters" => cfg.clusters = int(value)?,
                "target_per_user" => cfg.target_per_user = int(value)?,
                "aux_cover" => cfg.aux_cover = float(value)?,
                "aux_extra" => cfg.aux_extra = float(value)?,
                "cross_noise" => cfg.cross_noise = float(value)?,
                "target_noise" => cfg.target_noise = float(value)?,
                "kg_noise" => cfg.kg_noise = float(value)?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| bad(format!("'{value}' is not a seed")))?
                }
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug)]
pub struct SyntheticData {
    pub graph: InteractionGraph,
    pub kg: KnowledgeGraph,
    pub schema: InteractionSchema,
    pub users: Vocab,
    pub items: Vocab,
    pub entities: Vocab,
    pub relations: Vocab,
}

fn behavior_names(k: usize) -> Vec<String> {
    // last behavior is the target
    let mut names: Vec<String> = (0..k.saturating_sub(1)).map(|i| format!("aux{i}")).collect();
    names.push("buy".to_string());
    names
}

/// Generates the planted dataset. Deterministic per config.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData, GraphError> {
    let c = cfg.clusters;
    if c == 0 || cfg.num_users == 0 || cfg.num_items == 0 || cfg.num_behaviors == 0 {
        return Err(GraphError::Config(
            "users, items, behaviors, and clusters must all be >= 1".into(),
        ));
    }
    if cfg.num_items < c {
        return Err(GraphError::Config(format!(
            "{} items cannot cover {c} clusters",
            cfg.num_items
        )));
    }
    let smallest_cluster = (0..c)
        .map(|cl| (0..cfg.num_items).filter(|i| i % c == cl).count())
        .min()
        .unwrap();
    if cfg.target_per_user > smallest_cluster {
        return Err(GraphError::Config(format!(
            "target_per_user {} exceeds the {} items of the smallest cluster",
            cfg.target_per_user, smallest_cluster
        )));
    }
    for (name, v) in [
        ("aux_cover", cfg.aux_cover),
        ("aux_extra", cfg.aux_extra),
        ("cross_noise", cfg.cross_noise),
        ("target_noise", cfg.target_noise),
        ("kg_noise", cfg.kg_noise),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(GraphError::Config(format!("{name} must be in [0,1], got {v}")));
        }
    }

    let mut rng = seed::rng(cfg.seed, "synthetic");
    let cluster_of_item = |i: u32| (i as usize) % c;
    let cluster_items: Vec<Vec<u32>> = (0..c)
        .map(|cl| (0..cfg.num_items as u32).filter(|&i| cluster_of_item(i) == cl).collect())
        .collect();

    // planted target preferences
    let target_idx = cfg.num_behaviors - 1;
    let mut per_user_targets: Vec<Vec<u32>> = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let cl = u % c;
        let mut pool = cluster_items[cl].clone();
        for slot in 0..cfg.target_per_user {
            let j = rng.gen_range(slot..pool.len());
            pool.swap(slot, j);
        }
        pool.truncate(cfg.target_per_user);
        if cfg.target_noise > 0.0 {
            for item in pool.iter_mut() {
                if rng.gen_bool(cfg.target_noise) {
                    *item = rng.gen_range(0..cfg.num_items as u32);
                }
            }
        }
        per_user_targets.push(pool);
    }

    // behaviors: auxiliaries are noisy supersets of the target set
    let mut edges: Vec<Vec<(u32, u32)>> = vec![Vec::new(); cfg.num_behaviors];
    for (u, targets) in per_user_targets.iter().enumerate() {
        let uu = u as u32;
        let cl = u % c;
        for &i in targets {
            edges[target_idx].push((uu, i));
        }
        for k in 0..cfg.num_behaviors {
            if k == target_idx {
                continue;
            }
            for &i in targets {
                if cfg.aux_cover >= 1.0 || rng.gen_bool(cfg.aux_cover) {
                    edges[k].push((uu, i));
                }
            }
            for &i in &cluster_items[cl] {
                if !targets.contains(&i) && rng.gen_bool(cfg.aux_extra) {
                    edges[k].push((uu, i));
                }
            }
            if cfg.cross_noise > 0.0 {
                for i in 0..cfg.num_items as u32 {
                    if cluster_of_item(i) != cl && rng.gen_bool(cfg.cross_noise) {
                        edges[k].push((uu, i));
                    }
                }
            }
        }
    }
    let graph = InteractionGraph::build(cfg.num_users, cfg.num_items, target_idx, edges)?;

    // knowledge graph: items + one attribute entity per cluster;
    // r0 links each item to its cluster attribute, r1 rings the cluster
    let num_entities = cfg.num_items + c;
    let attr_entity = |cl: usize| (cfg.num_items + cl) as u32;
    let mut triples = Vec::new();
    for i in 0..cfg.num_items as u32 {
        let cl = cluster_of_item(i);
        let attr = if cfg.kg_noise > 0.0 && rng.gen_bool(cfg.kg_noise) && c > 1 {
            let mut wrong = rng.gen_range(0..c - 1);
            if wrong >= cl {
                wrong += 1;
            }
            attr_entity(wrong)
        } else {
            attr_entity(cl)
        };
        triples.push((i, 0, attr));

        let ring = &cluster_items[cl];
        if ring.len() > 1 {
            let pos = ring.iter().position(|&x| x == i).unwrap();
            let next = ring[(pos + 1) % ring.len()];
            let tail = if cfg.kg_noise > 0.0 && rng.gen_bool(cfg.kg_noise) {
                loop {
                    let cand = rng.gen_range(0..cfg.num_items as u32);
                    if cand != i {
                        break cand;
                    }
                }
            } else {
                next
            };
            triples.push((i, 1, tail));
        }
    }
    let kg = KnowledgeGraph::build(num_entities, 2, triples)?;

    let behaviors = behavior_names(cfg.num_behaviors);
    let schema = InteractionSchema {
        behaviors: behaviors.clone(),
        target: behaviors[target_idx].clone(),
    };
    let users = Vocab::from_tokens((0..cfg.num_users).map(|u| format!("u{u}")).collect());
    let items = Vocab::from_tokens((0..cfg.num_items).map(|i| format!("i{i}")).collect());
    let mut entity_tokens: Vec<String> = items.tokens().to_vec();
    entity_tokens.extend((0..c).map(|cl| format!("attr{cl}")));
    let entities = Vocab::from_tokens(entity_tokens);
    let relations = Vocab::from_tokens(vec!["has_attr".into(), "related".into()]);

    Ok(SyntheticData {
        graph,
        kg,
        schema,
        users,
        items,
        entities,
        relations,
    })
}

/// Writes the dataset in the on-disk layout the loaders expect:
/// `interactions.tsv`, `kg.tsv`, and `schema.txt`.
pub fn write_dataset(data: &SyntheticData, dir: &std::path::Path) -> Result<(), GraphError> {
    std::fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    crate::graph::save_interactions(
        &data.graph,
        &data.users,
        &data.items,
        &data.schema.behaviors,
        &dir.join("interactions.tsv"),
    )?;
    crate::graph::save_kg(&data.kg, &data.entities, &data.relations, &dir.join("kg.tsv"))?;
    let schema_text = format!(
        "behaviors = {}\ntarget = {}\n",
        data.schema.behaviors.join(","),
        data.schema.target
    );
    let path = dir.join("schema.txt");
    std::fs::write(&path, schema_text).map_err(|source| GraphError::Io { path, source })
}

/// Parses `schema.txt` written by `write_dataset`.
pub fn read_schema(path: &std::path::Path) -> Result<InteractionSchema, GraphError> {
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut behaviors = None;
    let mut target = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| GraphError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: "expected 'key = value'".into(),
        })?;
        match key.trim() {
            "behaviors" => {
                behaviors = Some(
                    value
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect::<Vec<_>>(),
                )
            }
            "target" => target = Some(value.trim().to_string()),
            other => {
                return Err(GraphError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("unknown schema key '{other}'"),
                })
            }
        }
    }
    let behaviors = behaviors
        .ok_or_else(|| GraphError::Schema(format!("{}: missing 'behaviors'", path.display())))?;
    let target =
        target.ok_or_else(|| GraphError::Schema(format!("{}: missing 'target'", path.display())))?;
    let schema = InteractionSchema { behaviors, target };
    schema.target_index()?;
    Ok(schema)
}
