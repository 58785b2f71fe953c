//! End-to-end acceptance suite. Each test covers one release gate and
//! prints a single `[n/9] ... PASS` line (visible with `--nocapture`);
//! the ninth is diagnostic-only and reports MISS instead of failing,
//! since its claim depends on the dataset shape.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use kmclr::checkpoint;
use kmclr::eval::{evaluate, RunMeta};
use kmclr::experiment::{ablate, run_experiment, sweep_over, SweepAxis};
use kmclr::gradcheck::{check_gradients, CheckSettings};
use kmclr::graph::{DatasetSplit, InteractionGraph, KnowledgeGraph, split_leave_one_out};
use kmclr::kg::{
    aggregate_over_triples, consistency_scores, edge_sampling_probabilities, kcl_loss,
    kg_ranking_loss, min_max_to_interval, KgVariant, ScoreOrder,
};
use kmclr::mul::{
    aggregate_cross_behavior, behavior_readout, info_nce, mul_cl_loss, propagate_behavior,
    propagate_from, NormMode,
};
use kmclr::params::{init_params, normal, ModelDims, ParameterSet};
use kmclr::seed;
use kmclr::tape::{NodeId, Tape};
use kmclr::tensor::Tensor;
use kmclr::trainer::{
    bpr_loss, combine_embeddings, final_embeddings, regularizer, total_loss, train, TrainConfig,
};

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

// ---------------------------------------------------------------------------
// 1. finite-difference gradient suite
// ---------------------------------------------------------------------------

/// One randomly sized model instance: a small multi-behavior graph, a small
/// entity graph, and fixed batches. The parameter set lives outside so the
/// finite-difference driver can perturb it.
struct Instance {
    graph: InteractionGraph,
    kg: KnowledgeGraph,
    layers: usize,
    mode: NormMode,
    tau: f64,
    user_batch: Vec<usize>,
    rank_batch: Vec<(u32, u32, u32)>,
    triples: Vec<(u32, u32, u32)>,
    corrupt: Vec<u32>,
    /// Two random target-edge subsets standing in for sampled views.
    view_graphs: [InteractionGraph; 2],
    /// Fixed random linear functionals that reduce user/item/entity tables
    /// to a scalar, giving every output coordinate gradient.
    ro_user: Tensor,
    ro_item: Tensor,
    ro_entity: Tensor,
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Instance, ParameterSet) {
    let users = rng.gen_range(3..=10usize);
    let items = rng.gen_range(3..=10usize);
    let behaviors = rng.gen_range(2..=3usize);
    let entities = rng.gen_range(items..=10usize);
    let relations = rng.gen_range(1..=3usize);
    let d = rng.gen_range(2..=8usize);
    let layers = rng.gen_range(1..=3usize);

    let mut edge_sets = Vec::with_capacity(behaviors);
    for _ in 0..behaviors {
        let mut edges = Vec::new();
        for u in 0..users as u32 {
            for i in 0..items as u32 {
                if rng.gen_bool(0.35) {
                    edges.push((u, i));
                }
            }
        }
        if edges.is_empty() {
            edges.push((rng.gen_range(0..users as u32), rng.gen_range(0..items as u32)));
        }
        edge_sets.push(edges);
    }
    let target = behaviors - 1;
    let graph = InteractionGraph::build(users, items, target, edge_sets).unwrap();

    let mut triples = BTreeSet::new();
    for h in 0..entities as u32 {
        for _ in 0..rng.gen_range(1..=2) {
            let t = loop {
                let c = rng.gen_range(0..entities as u32);
                if c != h {
                    break c;
                }
            };
            triples.insert((h, rng.gen_range(0..relations as u32), t));
        }
    }
    let triples: Vec<_> = triples.into_iter().collect();
    let kg = KnowledgeGraph::build(entities, relations, triples.clone()).unwrap();

    let corrupt: Vec<u32> = triples
        .iter()
        .map(|&(_, _, t)| loop {
            let c = rng.gen_range(0..entities as u32);
            if c != t {
                break c;
            }
        })
        .collect();

    let params = init_params(
        &ModelDims {
            num_users: users,
            num_items: items,
            num_entities: entities,
            num_relations: relations,
            d,
            layers,
        },
        rng,
    )
    .unwrap();

    let batch_len = rng.gen_range(2..=users.min(4));
    let mut user_batch: Vec<usize> = (0..users).collect();
    for i in (1..user_batch.len()).rev() {
        user_batch.swap(i, rng.gen_range(0..=i));
    }
    user_batch.truncate(batch_len);

    let rank_batch: Vec<(u32, u32, u32)> = (0..rng.gen_range(2..=5))
        .map(|_| {
            (
                rng.gen_range(0..users as u32),
                rng.gen_range(0..items as u32),
                rng.gen_range(0..items as u32),
            )
        })
        .collect();

    let target_edges = graph.edges(target).to_vec();
    let view_graphs = [0, 1].map(|_| {
        let mut kept: Vec<(u32, u32)> = target_edges
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.7))
            .collect();
        if kept.is_empty() {
            kept = target_edges.clone();
        }
        InteractionGraph::build(users, items, 0, vec![kept]).unwrap()
    });

    let inst = Instance {
        graph,
        kg,
        layers,
        mode: if rng.gen_bool(0.5) { NormMode::RawSum } else { NormMode::Symmetric },
        tau: [0.2, 0.5, 1.0][rng.gen_range(0..3)],
        user_batch,
        rank_batch,
        triples,
        corrupt,
        view_graphs,
        ro_user: normal(users, d, 1.0, rng),
        ro_item: normal(items, d, 1.0, rng),
        ro_entity: normal(entities, d, 1.0, rng),
    };
    (inst, params)
}

/// Contracts a table against a fixed functional, yielding a scalar.
fn readout(tape: &mut Tape, node: NodeId, weights: &Tensor) -> NodeId {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(node, w).unwrap();
    tape.sum_all(prod)
}

/// The knowledge-path forward shared by the node-level contrast checks:
/// attentive aggregation per scoring view, item rows propagated over that
/// view's interaction subgraph, then users and items stacked per view.
fn forward_views(tape: &mut Tape, params: &ParameterSet, inst: &Instance) -> [NodeId; 2] {
    let user0 = tape.param(params, params.id("kg.user").unwrap());
    let item_rows: Vec<usize> = (0..inst.graph.num_items).collect();
    [KgVariant::Translational, KgVariant::Semantic].map(|variant| {
        let slot = if variant == KgVariant::Translational { 0 } else { 1 };
        let agg = aggregate_over_triples(
            tape,
            inst.kg.triples(),
            inst.kg.num_entities,
            params,
            variant,
            inst.layers,
        )
        .unwrap();
        let item0 = tape.gather_rows(agg.output(), &item_rows).unwrap();
        let bl =
            propagate_from(tape, &inst.view_graphs[slot], 0, user0, item0, inst.layers, inst.mode)
                .unwrap();
        let u = tape.mean_over(&bl.user).unwrap();
        let i = tape.mean_over(&bl.item).unwrap();
        tape.concat_rows(&[u, i]).unwrap()
    })
}

/// Rows contrasted by the node-level loss: batch users plus batch items
/// offset past the user block.
fn contrast_rows(inst: &Instance) -> Vec<usize> {
    let users: BTreeSet<usize> = inst.rank_batch.iter().map(|t| t.0 as usize).collect();
    let items: BTreeSet<usize> = inst
        .rank_batch
        .iter()
        .map(|t| inst.graph.num_users + t.1 as usize)
        .collect();
    users.into_iter().chain(items).collect()
}

/// Combined user/item embeddings: the multi-behavior fusion blended with
/// the knowledge-path tables.
fn forward_combined(
    tape: &mut Tape,
    params: &ParameterSet,
    inst: &Instance,
    alpha: f64,
) -> (NodeId, NodeId) {
    let mut layer_stacks = Vec::new();
    for k in 0..inst.graph.num_behaviors {
        layer_stacks
            .push(propagate_behavior(tape, &inst.graph, k, params, inst.layers, inst.mode).unwrap());
    }
    let fused = aggregate_cross_behavior(tape, &layer_stacks, params).unwrap();

    let user0 = tape.param(params, params.id("kg.user").unwrap());
    let item_rows: Vec<usize> = (0..inst.graph.num_items).collect();
    let mut view_users = Vec::new();
    let mut view_items = Vec::new();
    for (slot, variant) in [KgVariant::Translational, KgVariant::Semantic].into_iter().enumerate() {
        let agg = aggregate_over_triples(
            tape,
            inst.kg.triples(),
            inst.kg.num_entities,
            params,
            variant,
            inst.layers,
        )
        .unwrap();
        let item0 = tape.gather_rows(agg.output(), &item_rows).unwrap();
        let bl =
            propagate_from(tape, &inst.view_graphs[slot], 0, user0, item0, inst.layers, inst.mode)
                .unwrap();
        view_users.push(tape.mean_over(&bl.user).unwrap());
        view_items.push(tape.mean_over(&bl.item).unwrap());
    }
    let kg_user = tape.mean_over(&view_users).unwrap();
    let kg_item = tape.mean_over(&view_items).unwrap();
    let user = combine_embeddings(tape, fused.user, kg_user, alpha).unwrap();
    let item = combine_embeddings(tape, fused.item, kg_item, alpha).unwrap();
    (user, item)
}

#[test]
fn a1_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let settings = CheckSettings::default();
    let mut worst: f64 = 0.0;
    let instances = 20;

    // (suite label, loss builder over a fixed random instance)
    type Builder = Box<dyn Fn(&mut Tape, &ParameterSet, &Instance) -> NodeId>;
    let suites: Vec<(&str, Builder)> = vec![
        (
            "behavior propagation",
            Box::new(|tape, p, inst| {
                let bl = propagate_behavior(
                    tape,
                    &inst.graph,
                    inst.graph.target_behavior,
                    p,
                    inst.layers,
                    inst.mode,
                )
                .unwrap();
                let u = readout(tape, *bl.user.last().unwrap(), &inst.ro_user);
                let i = readout(tape, *bl.item.last().unwrap(), &inst.ro_item);
                tape.add(u, i).unwrap()
            }),
        ),
        (
            "cross-behavior aggregation",
            Box::new(|tape, p, inst| {
                let mut stacks = Vec::new();
                for k in 0..inst.graph.num_behaviors {
                    stacks.push(
                        propagate_behavior(tape, &inst.graph, k, p, inst.layers, inst.mode)
                            .unwrap(),
                    );
                }
                let fused = aggregate_cross_behavior(tape, &stacks, p).unwrap();
                let u = readout(tape, fused.user, &inst.ro_user);
                let i = readout(tape, fused.item, &inst.ro_item);
                tape.add(u, i).unwrap()
            }),
        ),
        (
            "attentive entity aggregation",
            Box::new(|tape, p, inst| {
                let variant = if inst.layers % 2 == 0 {
                    KgVariant::Translational
                } else {
                    KgVariant::Semantic
                };
                let agg = aggregate_over_triples(
                    tape,
                    inst.kg.triples(),
                    inst.kg.num_entities,
                    p,
                    variant,
                    inst.layers.min(2),
                )
                .unwrap();
                readout(tape, agg.output(), &inst.ro_entity)
            }),
        ),
        (
            "behavior-level contrastive loss",
            Box::new(|tape, p, inst| {
                let mut readouts = Vec::new();
                for k in 0..inst.graph.num_behaviors {
                    let bl =
                        propagate_behavior(tape, &inst.graph, k, p, inst.layers, inst.mode)
                            .unwrap();
                    let (ru, _) = behavior_readout(tape, &bl).unwrap();
                    readouts.push(ru);
                }
                mul_cl_loss(
                    tape,
                    &readouts,
                    inst.graph.target_behavior,
                    &inst.user_batch,
                    inst.tau,
                    false,
                )
                .unwrap()
            }),
        ),
        (
            "translational ranking loss",
            Box::new(|tape, p, inst| {
                kg_ranking_loss(
                    tape,
                    p,
                    KgVariant::Translational,
                    &inst.triples,
                    &inst.corrupt,
                    ScoreOrder::TrueMinusCorrupt,
                )
                .unwrap()
            }),
        ),
        (
            "semantic ranking loss",
            Box::new(|tape, p, inst| {
                kg_ranking_loss(
                    tape,
                    p,
                    KgVariant::Semantic,
                    &inst.triples,
                    &inst.corrupt,
                    ScoreOrder::CorruptMinusTrue,
                )
                .unwrap()
            }),
        ),
        (
            "node-level contrastive loss",
            Box::new(|tape, p, inst| {
                let [s1, s2] = forward_views(tape, p, inst);
                kcl_loss(tape, s1, s2, &contrast_rows(inst), inst.tau).unwrap()
            }),
        ),
        (
            "pairwise ranking loss",
            Box::new(|tape, p, inst| {
                let (user, item) = forward_combined(tape, p, inst, 0.3);
                bpr_loss(tape, user, item, &inst.rank_batch).unwrap()
            }),
        ),
        (
            "joint objective",
            Box::new(|tape, p, inst| {
                let (user, item) = forward_combined(tape, p, inst, 0.4);
                let bpr = bpr_loss(tape, user, item, &inst.rank_batch).unwrap();
                let mut readouts = Vec::new();
                for k in 0..inst.graph.num_behaviors {
                    let bl =
                        propagate_behavior(tape, &inst.graph, k, p, inst.layers, inst.mode)
                            .unwrap();
                    let (ru, _) = behavior_readout(tape, &bl).unwrap();
                    readouts.push(ru);
                }
                let mcl = mul_cl_loss(
                    tape,
                    &readouts,
                    inst.graph.target_behavior,
                    &inst.user_batch,
                    inst.tau,
                    false,
                )
                .unwrap();
                let [s1, s2] = forward_views(tape, p, inst);
                let kcl = kcl_loss(tape, s1, s2, &contrast_rows(inst), inst.tau).unwrap();
                let cl = tape.add(mcl, kcl).unwrap();
                let reg = regularizer(tape, p, None).unwrap();
                let joint = total_loss(tape, bpr, Some(cl), Some(reg), 0.1, 0.01).unwrap();
                let td = kg_ranking_loss(
                    tape,
                    p,
                    KgVariant::Translational,
                    &inst.triples,
                    &inst.corrupt,
                    ScoreOrder::TrueMinusCorrupt,
                )
                .unwrap();
                let sm = kg_ranking_loss(
                    tape,
                    p,
                    KgVariant::Semantic,
                    &inst.triples,
                    &inst.corrupt,
                    ScoreOrder::TrueMinusCorrupt,
                )
                .unwrap();
                let ranking = tape.add(td, sm).unwrap();
                let ranking = tape.scale(ranking, 0.5);
                tape.add(joint, ranking).unwrap()
            }),
        ),
    ];

    for (label, build) in &suites {
        for case in 0..instances {
            let mut rng = seed::rng(0xACCE97, &format!("fd:{label}:{case}"));
            let (inst, mut params) = random_instance(&mut rng);
            let mut coord_rng = seed::rng(0xACCE97, &format!("fd-coords:{label}:{case}"));
            let max_rel =
                check_gradients(&mut params, &settings, &mut coord_rng, |tape, p| {
                    build(tape, p, &inst)
                })
                .unwrap_or_else(|e| panic!("{label} instance {case}: {e}"));
            worst = worst.max(max_rel);
        }
    }

    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "gradient suite took {elapsed:.2?}, budget is 60 s"
    );
    assert!(
        worst < 1e-4,
        "worst relative error on gradient-bearing coordinates is {worst:.3e}"
    );
    println!(
        "[1/9] finite-difference gradients: 9 paths x {instances} instances, \
         worst rel err {worst:.2e} < 1e-4, {elapsed:.2?} ... PASS"
    );
}

// ---------------------------------------------------------------------------
// 2. propagation vs dense oracle
// ---------------------------------------------------------------------------

/// Applies the dense (optionally degree-normalized) bipartite adjacency to
/// the stacked tables `depth` times.
fn dense_powers(
    g: &InteractionGraph,
    k: usize,
    user0: &Tensor,
    item0: &Tensor,
    depth: usize,
    mode: NormMode,
) -> Vec<(Tensor, Tensor)> {
    let (nu, ni, d) = (g.num_users, g.num_items, user0.cols());
    let n = nu + ni;
    let mut adj = Tensor::zeros(n, n);
    for &(u, i) in g.edges(k) {
        let w = match mode {
            NormMode::RawSum => 1.0,
            NormMode::Symmetric => {
                let du = g.user_neighbors(k, u).len() as f64;
                let di = g.item_neighbors(k, i).len() as f64;
                1.0 / (du * di).sqrt()
            }
        };
        adj.set(u as usize, nu + i as usize, w);
        adj.set(nu + i as usize, u as usize, w);
    }
    let mut stacked = Tensor::zeros(n, d);
    for r in 0..nu {
        stacked.row_mut(r).copy_from_slice(user0.row(r));
    }
    for r in 0..ni {
        stacked.row_mut(nu + r).copy_from_slice(item0.row(r));
    }
    let mut out = Vec::new();
    for _ in 0..depth {
        stacked = adj.matmul(&stacked);
        let mut u = Tensor::zeros(nu, d);
        let mut i = Tensor::zeros(ni, d);
        for r in 0..nu {
            u.row_mut(r).copy_from_slice(stacked.row(r));
        }
        for r in 0..ni {
            i.row_mut(r).copy_from_slice(stacked.row(nu + r));
        }
        out.push((u, i));
    }
    out
}

#[test]
fn a2_propagation_matches_dense_adjacency_powers() {
    let mut max_diff: f64 = 0.0;
    let mut cases = 0;
    for case in 0..20 {
        let mut rng = seed::rng(0xDE45E, &format!("oracle:{case}"));
        let users = rng.gen_range(2..=10usize);
        let items = rng.gen_range(2..=10usize);
        let d = rng.gen_range(2..=6usize);
        let depth = rng.gen_range(1..=3usize);
        let mut edges = Vec::new();
        for u in 0..users as u32 {
            for i in 0..items as u32 {
                if rng.gen_bool(0.4) {
                    edges.push((u, i));
                }
            }
        }
        if edges.is_empty() {
            edges.push((0, 0));
        }
        let g = InteractionGraph::build(users, items, 0, vec![edges]).unwrap();
        let user0 = normal(users, d, 1.0, &mut rng);
        let item0 = normal(items, d, 1.0, &mut rng);

        for mode in [NormMode::RawSum, NormMode::Symmetric] {
            let mut tape = Tape::new();
            let u0 = tape.constant(user0.clone());
            let i0 = tape.constant(item0.clone());
            let layers = propagate_from(&mut tape, &g, 0, u0, i0, depth, mode).unwrap();
            let want = dense_powers(&g, 0, &user0, &item0, depth, mode);
            for l in 1..=depth {
                let got_u = tape.value(layers.user[l]);
                let got_i = tape.value(layers.item[l]);
                let (want_u, want_i) = &want[l - 1];
                for r in 0..users {
                    for c in 0..d {
                        max_diff = max_diff.max((got_u.get(r, c) - want_u.get(r, c)).abs());
                    }
                }
                for r in 0..items {
                    for c in 0..d {
                        max_diff = max_diff.max((got_i.get(r, c) - want_i.get(r, c)).abs());
                    }
                }
            }
            cases += 1;
        }
    }
    assert!(
        max_diff < 1e-10,
        "propagation deviates from the dense oracle by {max_diff:.3e}"
    );
    println!(
        "[2/9] propagation vs dense adjacency powers: {cases} cases, \
         max abs diff {max_diff:.2e} < 1e-10 ... PASS"
    );
}

// ---------------------------------------------------------------------------
// 3. closed-form loss identities
// ---------------------------------------------------------------------------

#[test]
fn a3_loss_identities_hold_exactly() {
    let tol = 1e-12;

    // Identical rows make every in-batch similarity equal, so each anchor
    // contributes exactly ln(batch) regardless of temperature.
    let mut max_err: f64 = 0.0;
    for (b, d, v, tau) in [(2, 3, 0.7, 0.2), (5, 4, -1.3, 0.5), (8, 6, 0.01, 1.0)] {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::filled(b, d, v));
        let loss = info_nce(&mut tape, t, t, tau).unwrap();
        let want = b as f64 * (b as f64).ln();
        max_err = max_err.max((tape.value(loss).item() - want).abs());

        // node-level contrast between two identical views
        let rows: Vec<usize> = (0..b).collect();
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::filled(b + 2, d, v));
        let loss = kcl_loss(&mut tape, t, t, &rows, tau).unwrap();
        max_err = max_err.max((tape.value(loss).item() - want).abs());
    }

    // Behavior-level contrast sums one such term per auxiliary behavior.
    for (k, b) in [(2usize, 4usize), (3, 3), (4, 6)] {
        let mut tape = Tape::new();
        let tables: Vec<NodeId> = (0..k)
            .map(|_| tape.constant(Tensor::filled(b + 1, 5, 0.4)))
            .collect();
        let batch: Vec<usize> = (0..b).collect();
        let loss = mul_cl_loss(&mut tape, &tables, k - 1, &batch, 0.3, false).unwrap();
        let want = (k - 1) as f64 * b as f64 * (b as f64).ln();
        max_err = max_err.max((tape.value(loss).item() - want).abs());
    }

    // A tied ranking pair scores -ln sigmoid(0) = ln 2.
    let ln2 = std::f64::consts::LN_2;
    for n in [1usize, 4, 9] {
        let mut tape = Tape::new();
        let mut rng = seed::rng(3, "bpr-ties");
        let u = tape.constant(normal(6, 4, 1.0, &mut rng));
        let i = tape.constant(normal(7, 4, 1.0, &mut rng));
        let batch: Vec<(u32, u32, u32)> = (0..n as u32).map(|x| (x % 6, x % 7, x % 7)).collect();
        let loss = bpr_loss(&mut tape, u, i, &batch).unwrap();
        max_err = max_err.max((tape.value(loss).item() - n as f64 * ln2).abs());
    }

    // Entity tables with identical rows tie every corrupted triple against
    // its original under both scoring models and both orderings.
    let (e, r, d) = (6usize, 2usize, 4usize);
    let mut rng = seed::rng(4, "kg-ties");
    let mut params = init_params(
        &ModelDims {
            num_users: 3,
            num_items: 3,
            num_entities: e,
            num_relations: r,
            d,
            layers: 1,
        },
        &mut rng,
    )
    .unwrap();
    for name in ["kg1.entity", "kg2.entity"] {
        let id = params.id(name).unwrap();
        *params.value_mut(id) = Tensor::filled(e, d, 0.3);
    }
    let triples: Vec<(u32, u32, u32)> = vec![(0, 0, 1), (2, 1, 3), (4, 0, 5), (1, 1, 0)];
    let corrupt: Vec<u32> = triples.iter().map(|&(_, _, t)| (t + 1) % e as u32).collect();
    for variant in [KgVariant::Translational, KgVariant::Semantic] {
        for order in [ScoreOrder::TrueMinusCorrupt, ScoreOrder::CorruptMinusTrue] {
            let mut tape = Tape::new();
            let loss =
                kg_ranking_loss(&mut tape, &params, variant, &triples, &corrupt, order).unwrap();
            let want = triples.len() as f64 * ln2;
            max_err = max_err.max((tape.value(loss).item() - want).abs());
        }
    }

    assert!(
        max_err < tol,
        "worst deviation from the closed-form value is {max_err:.3e}"
    );
    println!(
        "[3/9] loss identities (B ln B contrast, ln 2 ties): \
         max deviation {max_err:.2e} < 1e-12 ... PASS"
    );
}

// ---------------------------------------------------------------------------
// 4. retention-probability contract
// ---------------------------------------------------------------------------

#[test]
fn a4_retention_probabilities_stay_in_interval() {
    let mut rng = seed::rng(0x5A7, "retention");
    let n = 10_000usize;
    let mut checked = 0usize;

    for &(a, b) in &[(0.6, 0.9), (0.1, 0.7), (0.0, 1.0), (0.33, 0.34)] {
        // raw interface
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mapped = min_max_to_interval(&values, a, b).unwrap();
        assert!(mapped.iter().all(|&p| (a..=b).contains(&p)));
        let lo = mapped.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mapped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo == a && hi == b, "endpoints [{lo}, {hi}] != [{a}, {b}]");

        // full pipeline: scored edges scaled by per-item agreement
        let (users, items, d) = (60usize, 40usize, 8usize);
        let ue = normal(users, d, 1.0, &mut rng);
        let ie = normal(items, d, 1.0, &mut rng);
        let c: Vec<f64> = (0..items).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let edges: Vec<(u32, u32)> = (0..n)
            .map(|_| (rng.gen_range(0..users as u32), rng.gen_range(0..items as u32)))
            .collect();
        let probs = edge_sampling_probabilities(&edges, &ue, &ie, &c, a, b).unwrap();
        assert_eq!(probs.len(), n);
        assert!(probs.iter().all(|&p| (a..=b).contains(&p)));
        let lo = probs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo == a && hi == b, "endpoints [{lo}, {hi}] != [{a}, {b}]");
        checked += 2 * n;
    }

    // Without edge dropping the two agreement subgraphs are identical, so
    // every item must score exactly 1.
    let entities = 9usize;
    let triples: Vec<(u32, u32, u32)> = (0..entities as u32)
        .flat_map(|h| [(h, 0, (h + 1) % entities as u32), (h, 1, (h + 3) % entities as u32)])
        .collect();
    let kg = KnowledgeGraph::build(entities, 2, triples).unwrap();
    let params = init_params(
        &ModelDims {
            num_users: 4,
            num_items: 5,
            num_entities: entities,
            num_relations: 2,
            d: 6,
            layers: 2,
        },
        &mut rng,
    )
    .unwrap();
    for variant in [KgVariant::Translational, KgVariant::Semantic] {
        let c = consistency_scores(&kg, &params, variant, 2, 0.0, 99, 5).unwrap();
        assert!(
            c.iter().all(|&x| x == 1.0),
            "zero dropout must force full agreement, got {c:?}"
        );
    }

    println!(
        "[4/9] retention probabilities: {checked} random inputs in [a,b], \
         endpoints exact, zero dropout gives agreement 1.0 ... PASS"
    );
}

// ---------------------------------------------------------------------------
// 5. planted-structure recovery
// ---------------------------------------------------------------------------

/// Training setup shared by the recovery and determinism gates: paper-style
/// staging with learning rates raised to suit the tiny planted dataset.
fn recovery_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        lr_mul: 1e-2,
        lr_kg: 1e-2,
        val_fraction: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn a5_recovers_planted_preferences() {
    let t0 = Instant::now();
    let data = kmclr::synthetic::generate(&kmclr::synthetic::SyntheticConfig::default()).unwrap();
    let split = split_leave_one_out(&data.graph, 101, 29).unwrap();

    let mut hrs = Vec::new();
    for seed in [21, 22, 23, 24, 25] {
        let cfg = recovery_config(seed);
        let total_epochs = cfg.epochs_stage1 + cfg.epochs_stage2 + cfg.epochs_stage3;
        assert!(total_epochs <= 200, "budget is 200 epochs, configured {total_epochs}");
        let result = run_experiment(&cfg, &split, &data.kg).unwrap();
        hrs.push(result.report.hr);
    }
    let med = median(hrs.clone());
    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "recovery runs took {elapsed:.2?}, budget is 2 minutes"
    );
    assert!(
        med >= 0.9,
        "median HR@10 over 5 seeds is {med:.4} (< 0.9); all: {hrs:?}"
    );
    println!(
        "[5/9] planted-preference recovery: median HR@10 {med:.4} >= 0.9 \
         over 5 seeds, 200-epoch budget, {elapsed:.2?} ... PASS"
    );
}

// ---------------------------------------------------------------------------
// 6. ablation ordering
// ---------------------------------------------------------------------------

#[test]
fn a6_ablations_cost_measurable_accuracy() {
    let data = kmclr::synthetic::generate(&kmclr::synthetic::SyntheticConfig {
        aux_extra: 0.4,
        cross_noise: 0.05,
        target_noise: 0.15,
        ..kmclr::synthetic::SyntheticConfig::default()
    })
    .unwrap();
    let split = split_leave_one_out(&data.graph, 101, 29).unwrap();
    let base = TrainConfig {
        alpha: 0.4,
        lr_mul: 1e-2,
        lr_kg: 1e-2,
        epochs_stage1: 40,
        epochs_stage2: 60,
        epochs_stage3: 80,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };

    let mut per_variant: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let mut last_table = String::new();
    for seed in [21, 22, 23, 24, 25] {
        let cfg = TrainConfig { seed, ..base.clone() };
        let report = ablate(&cfg, &split, &data.kg).unwrap();
        for row in &report.rows {
            per_variant.entry(row.variant.to_string()).or_default().push(row.hr);
        }
        last_table = report.to_table();
    }
    let med = |v: &str| median(per_variant[v].clone());
    let (full, wo_mcl, wo_kcl) = (med("full"), med("w/o-Mcl"), med("w/o-Kcl"));
    let margin_mcl = full - wo_mcl;
    let margin_kcl = full - wo_kcl;

    // The report and margins are always produced, pass or fail.
    let report_path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation_margins.txt");
    let report_text = format!
        ("median HR@10 over 5 seeds:\n  full     {full:.4}\n  w/o-Mcl  {wo_mcl:.4}\n  w/o-Kcl  {wo_kcl:.4}\nmargins: full - w/o-Mcl = {margin_mcl:+.4}, full - w/o-Kcl = {margin_kcl:+.4}\n\nlast seed's single-run table:\n{last_table}");
    std::fs::write(&report_path, &report_text).unwrap();
    println!(
        "ablation margins: vs w/o-Mcl {margin_mcl:+.4}, vs w/o-Kcl {margin_kcl:+.4} \
         (report: {})",
        report_path.display()
    );

    assert!(
        margin_mcl >= 0.01,
        "behavior-contrast ablation margin {margin_mcl:+.4} < 0.01; report at {}",
        report_path.display()
    );
    assert!(
        margin_kcl >= 0.01,
        "node-contrast ablation margin {margin_kcl:+.4} < 0.01; report at {}",
        report_path.display()
    );
    println!(
        "[6/9] ablation ordering: full {full:.4} beats w/o-Mcl by {margin_mcl:+.4} \
         and w/o-Kcl by {margin_kcl:+.4} (both >= 0.01) ... PASS"
    );
}

// ---------------------------------------------------------------------------
// 7. bitwise determinism
// ---------------------------------------------------------------------------

#[test]
fn a7_identical_seeds_reproduce_bitwise() {
    let data = kmclr::synthetic::generate(&kmclr::synthetic::SyntheticConfig::default()).unwrap();
    let split = split_leave_one_out(&data.graph, 101, 29).unwrap();
    let cfg = TrainConfig {
        epochs_stage1: 6,
        epochs_stage2: 6,
        epochs_stage3: 8,
        ..recovery_config(33)
    };

    let run = || {
        let outcome = train(&cfg, &split, &data.kg).unwrap();
        let (ue, ie) = final_embeddings(&cfg, &split.train, &data.kg, &outcome.params).unwrap();
        let meta = RunMeta::new(&cfg.to_text(), cfg.seed);
        let report = evaluate(&ue, &ie, &split, cfg.eval_k, &[4, 8], meta).unwrap();
        let vocabs = checkpoint::VocabTables {
            users: data.users.tokens().to_vec(),
            items: data.items.tokens().to_vec(),
            entities: data.entities.tokens().to_vec(),
            relations: data.relations.tokens().to_vec(),
            behaviors: data.schema.behaviors.clone(),
            target_behavior: data.graph.target_behavior,
        };
        let bytes = checkpoint::to_bytes(&outcome.params, &vocabs);
        (bytes, report.to_ndjson(), kmclr::trainer::log_to_ndjson(&outcome.log))
    };

    let (bytes1, report1, log1) = run();
    let (bytes2, report2, log2) = run();
    assert!(bytes1 == bytes2, "checkpoint bytes differ between identical runs");
    assert_eq!(report1, report2, "evaluation reports differ between identical runs");
    assert_eq!(log1, log2, "training logs differ between identical runs");
    println!(
        "[7/9] determinism: two identical runs produced bitwise-equal \
         checkpoints ({} bytes), reports, and logs ... PASS",
        bytes1.len()
    );
}

// ---------------------------------------------------------------------------
// 8. random-embedding baseline
// ---------------------------------------------------------------------------

#[test]
fn a8_random_embeddings_rank_at_chance() {
    let (users, items, d, negatives) = (1200usize, 130usize, 16usize, 99usize);
    let mut rng = seed::rng(7, "chance-baseline");

    let mut test_positives = Vec::with_capacity(users);
    let mut eval_candidates = Vec::with_capacity(users);
    let mut train_edges = Vec::with_capacity(users);
    for u in 0..users as u32 {
        let pos = rng.gen_range(0..items as u32);
        let mut negs = BTreeSet::new();
        while negs.len() < negatives {
            let c = rng.gen_range(0..items as u32);
            if c != pos {
                negs.insert(c);
            }
        }
        test_positives.push((u, pos));
        eval_candidates.push(negs.into_iter().collect::<Vec<u32>>());
        train_edges.push((u, (pos + 1) % items as u32));
    }
    let split = DatasetSplit {
        train: InteractionGraph::build(users, items, 0, vec![train_edges]).unwrap(),
        test_positives,
        eval_candidates,
    };

    let ue = normal(users, d, 1.0, &mut rng);
    let ie = normal(items, d, 1.0, &mut rng);
    let report = evaluate(&ue, &ie, &split, 10, &[4, 8], RunMeta::new("baseline", 7)).unwrap();

    assert!(report.users_evaluated >= 1000);
    assert!(
        (report.hr - 0.10).abs() <= 0.02,
        "random embeddings scored HR@10 {:.4}, expected 0.10 +/- 0.02",
        report.hr
    );
    println!(
        "[8/9] chance baseline: HR@10 {:.4} within 0.10 +/- 0.02 over {} users \
         with 100 candidates ... PASS",
        report.hr, report.users_evaluated
    );
}

// ---------------------------------------------------------------------------
// 9. sweep shape (diagnostic: logged, never failed)
// ---------------------------------------------------------------------------

#[test]
fn a9_sweep_shape_logged() {
    // depth: deeper propagation should pay on a dataset whose auxiliary
    // behaviors only partially mirror the held-out structure
    let depth_data = kmclr::synthetic::generate(&kmclr::synthetic::SyntheticConfig {
        num_users: 200,
        num_items: 80,
        clusters: 10,
        target_per_user: 3,
        aux_cover: 0.34,
        aux_extra: 0.25,
        cross_noise: 0.0,
        target_noise: 0.0,
        kg_noise: 0.1,
        ..kmclr::synthetic::SyntheticConfig::default()
    })
    .unwrap();
    let depth_split = split_leave_one_out(&depth_data.graph, 101, 49).unwrap();
    let (mut l1s, mut l3s) = (Vec::new(), Vec::new());
    for seed in [21, 22, 23, 24, 25] {
        let cfg = TrainConfig {
            seed,
            d: 8,
            lr_mul: 1e-2,
            lr_kg: 1e-2,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let rep = sweep_over(&cfg, &depth_split, &depth_data.kg, SweepAxis::Layers, &[1.0, 3.0])
            .unwrap();
        l1s.push(rep.cells[0].hr.unwrap());
        l3s.push(rep.cells[1].hr.unwrap());
    }
    let (l1, l3) = (median(l1s), median(l3s));
    let depth_ok = l3 >= l1;

    // blend weight: an interior grid point should win when both modules
    // carry complementary signal
    let alpha_data = kmclr::synthetic::generate(&kmclr::synthetic::SyntheticConfig {
        num_users: 200,
        num_items: 60,
        clusters: 10,
        aux_extra: 0.4,
        cross_noise: 0.05,
        target_noise: 0.15,
        kg_noise: 0.2,
        ..kmclr::synthetic::SyntheticConfig::default()
    })
    .unwrap();
    let alpha_split = split_leave_one_out(&alpha_data.graph, 101, 49).unwrap();
    let mut interior = 0;
    for seed in [21, 22, 23, 24, 25] {
        let cfg = TrainConfig {
            seed,
            lr_mul: 1e-2,
            lr_kg: 1e-2,
            epochs_stage1: 40,
            epochs_stage2: 60,
            epochs_stage3: 80,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let rep = sweep_over(
            &cfg,
            &alpha_split,
            &alpha_data.kg,
            SweepAxis::Alpha,
            &[0.1, 0.2, 0.3, 0.4],
        )
        .unwrap();
        let (best, _) = rep.best().unwrap();
        if best == 1 || best == 2 {
            interior += 1;
        }
    }
    let alpha_ok = interior >= 3;

    let verdict = |ok: bool| if ok { "ok" } else { "MISS" };
    println!(
        "[9/9] sweep shape (diagnostic only): depth median HR L3 {l3:.4} vs L1 {l1:.4} [{}]; \
         interior blend-weight maximizer in {interior}/5 seeds [{}] ... {}",
        verdict(depth_ok),
        verdict(alpha_ok),
        if depth_ok && alpha_ok { "PASS" } else { "MISS (logged, not enforced)" }
    );
}
