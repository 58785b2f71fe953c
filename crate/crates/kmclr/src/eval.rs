//! Leave-one-out ranking evaluation: HR@K / NDCG@K, sparsity-bucket
//! breakdowns, and report serialization (structured records plus a
//! human-readable table).

use serde_json::json;

use crate::graph::{bucket_label, sparsity_buckets, DatasetSplit, GraphError, InteractionGraph};
use crate::tensor::Tensor;

#[derive(thiserror::Error, Debug)]
pub enum EvalError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Hit indicator: 1 iff the positive's rank is within the cutoff.
pub fn hr_at_k(rank: usize, k: usize, num_candidates: usize) -> Result<f64, EvalError> {
    check_rank(rank, k, num_candidates)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

/// Positional discount: 1/log2(rank+1) within the cutoff, else 0.
/// With one relevant item per user this is the full normalized score.
pub fn ndcg_at_k(rank: usize, k: usize, num_candidates: usize) -> Result<f64, EvalError> {
    check_rank(rank, k, num_candidates)?;
    Ok(if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    })
}

fn check_rank(rank: usize, k: usize, num_candidates: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::Config("cutoff K must be >= 1".into()));
    }
    if rank == 0 || rank > num_candidates {
        return Err(EvalError::Contract(format!(
            "rank {rank} outside candidate range 1..={num_candidates}"
        )));
    }
    Ok(())
}

/// 1-based rank of the positive among itself plus `negatives`, scored by
/// the dot product with `user_vec`. Ties rank the lower item index first,
/// which makes the result independent of candidate order.
pub fn rank_of_positive(
    user_vec: &[f64],
    item_emb: &Tensor,
    positive: u32,
    negatives: &[u32],
) -> usize {
    let score = |i: u32| -> f64 {
        user_vec
            .iter()
            .zip(item_emb.row(i as usize))
            .map(|(a, b)| a * b)
            .sum()
    };
    let sp = score(positive);
    let mut rank = 1;
    for &c in negatives {
        let sc = score(c);
        if sc > sp || (sc == sp && c < positive) {
            rank += 1;
        }
    }
    rank
}

/// Provenance stamped into every report.
#[derive(Clone, Debug)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl RunMeta {
    pub fn new(resolved_config: &str, seed: u64) -> Self {
        RunMeta {
            config_hash: format!("{:016x}", crate::seed::fnv1a(resolved_config)),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BucketMetrics {
    pub label: String,
    pub size: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug)]
pub struct RankingReport {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub buckets: Vec<BucketMetrics>,
    pub meta: RunMeta,
}

impl RankingReport {
    /// One structured record per scope (global first, then buckets).
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let global = json!({
            "scope": "global",
            "k": self.k,
            "hr": self.hr,
            "ndcg": self.ndcg,
            "users": self.users_evaluated,
            "skipped": self.users_skipped,
            "config_hash": self.meta.config_hash,
            "seed": self.meta.seed,
            "version": self.meta.version,
        });
        out.push_str(&global.to_string());
        out.push('\n');
        for b in &self.buckets {
            let rec = json!({
                "scope": "bucket",
                "k": self.k,
                "label": b.label,
                "size": b.size,
                "hr": b.hr,
                "ndcg": b.ndcg,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "HR@{k} = {hr:.4}   NDCG@{k} = {ndcg:.4}   ({n} users, {s} skipped)\n",
            k = self.k,
            hr = self.hr,
            ndcg = self.ndcg,
            n = self.users_evaluated,
            s = self.users_skipped,
        ));
        if !self.buckets.is_empty() {
            out.push_str(&format!(
                "{:<12} {:>6} {:>8} {:>8}\n",
                "bucket", "users", "hr", "ndcg"
            ));
            for b in &self.buckets {
                out.push_str(&format!(
                    "{:<12} {:>6} {:>8.4} {:>8.4}\n",
                    b.label, b.size, b.hr, b.ndcg
                ));
            }
        }
        out
    }
}

/// Scores every test user's candidate list (1 positive + sampled
/// negatives) and averages HR@K and NDCG@K, with a per-sparsity-bucket
/// breakdown. Users whose candidate list is empty are skipped and counted.
pub fn evaluate(
    user_emb: &Tensor,
    item_emb: &Tensor,
    split: &DatasetSplit,
    k: usize,
    boundaries: &[usize],
    meta: RunMeta,
) -> Result<RankingReport, EvalError> {
    if k == 0 {
        return Err(EvalError::Config("cutoff K must be >= 1".into()));
    }
    let bucket_of = sparsity_buckets(split, boundaries)?;
    let num_buckets = boundaries.len() + 1;
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); num_buckets];
    let mut skipped = 0usize;

    for (idx, &(u, pos)) in split.test_positives.iter().enumerate() {
        let negatives = &split.eval_candidates[idx];
        if negatives.is_empty() {
            skipped += 1;
            continue;
        }
        let rank = rank_of_positive(user_emb.row(u as usize), item_emb, pos, negatives);
        let n_cand = negatives.len() + 1;
        let hr = hr_at_k(rank, k, n_cand)?;
        let ndcg = ndcg_at_k(rank, k, n_cand)?;
        let b = bucket_of[idx];
        sums[b].0 += 1;
        sums[b].1 += hr;
        sums[b].2 += ndcg;
    }

    let evaluated: usize = sums.iter().map(|s| s.0).sum();
    if evaluated == 0 {
        return Err(EvalError::Contract(
            "no test user had a candidate list to score".into(),
        ));
    }
    let hr_total: f64 = sums.iter().map(|s| s.1).sum();
    let ndcg_total: f64 = sums.iter().map(|s| s.2).sum();
    let buckets = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(b, s)| BucketMetrics {
            label: bucket_label(boundaries, b),
            size: s.0,
            hr: s.1 / s.0 as f64,
            ndcg: s.2 / s.0 as f64,
        })
        .collect();

    Ok(RankingReport {
        k,
        hr: hr_total / evaluated as f64,
        ndcg: ndcg_total / evaluated as f64,
        users_evaluated: evaluated,
        users_skipped: skipped,
        buckets,
        meta,
    })
}

/// Full-catalog variant: every item the user never touched in training is
/// a candidate. Slower and not the default protocol; kept behind a flag.
pub fn evaluate_full_catalog(
    user_emb: &Tensor,
    item_emb: &Tensor,
    split: &DatasetSplit,
    train: &InteractionGraph,
    k: usize,
    boundaries: &[usize],
    meta: RunMeta,
) -> Result<RankingReport, EvalError> {
    let mut widened = DatasetSplit {
        train: clone_graph(train),
        test_positives: split.test_positives.clone(),
        eval_candidates: Vec::with_capacity(split.test_positives.len()),
    };
    for &(u, pos) in &split.test_positives {
        let interacted = train.interacted_any(u);
        let negs: Vec<u32> = (0..train.num_items as u32)
            .filter(|&i| i != pos && !interacted.contains(&i))
            .collect();
        widened.eval_candidates.push(negs);
    }
    evaluate(user_emb, item_emb, &widened, k, boundaries, meta)
}

fn clone_graph(g: &InteractionGraph) -> InteractionGraph {
    let edges = (0..g.num_behaviors).map(|k| g.edges(k).to_vec()).collect();
    InteractionGraph::build(g.num_users, g.num_items, g.target_behavior, edges)
        .expect("re-building a valid graph cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;
    use crate::seed;

    fn meta() -> RunMeta {
        RunMeta::new("test", 0)
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!(hr_at_k(1, 10, 100).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(1, 10, 100).unwrap(), 1.0);
        assert_eq!(hr_at_k(11, 10, 100).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(11, 10, 100).unwrap(), 0.0);
        assert!((ndcg_at_k(3, 10, 100).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_monotone_in_rank_and_k() {
        for k in 1..12 {
            let mut prev_hr = f64::INFINITY;
            let mut prev_ndcg = f64::INFINITY;
            for rank in 1..=20 {
                let hr = hr_at_k(rank, k, 20).unwrap();
                let ndcg = ndcg_at_k(rank, k, 20).unwrap();
                assert!(hr <= prev_hr && ndcg <= prev_ndcg);
                prev_hr = hr;
                prev_ndcg = ndcg;
            }
        }
        for rank in [1usize, 5, 13] {
            let mut prev_hr = 0.0;
            let mut prev_ndcg = 0.0;
            for k in 1..=20 {
                let hr = hr_at_k(rank, k, 20).unwrap();
                let ndcg = ndcg_at_k(rank, k, 20).unwrap();
                assert!(hr >= prev_hr && ndcg >= prev_ndcg);
                prev_hr = hr;
                prev_ndcg = ndcg;
            }
        }
    }

    #[test]
    fn out_of_range_rank_is_contract_error() {
        assert!(matches!(hr_at_k(0, 10, 100), Err(EvalError::Contract(_))));
        assert!(matches!(hr_at_k(101, 10, 100), Err(EvalError::Contract(_))));
        assert!(matches!(ndcg_at_k(0, 10, 5), Err(EvalError::Contract(_))));
        assert!(matches!(hr_at_k(1, 0, 5), Err(EvalError::Config(_))));
    }

    /// split where each of `n` users has one train edge and one held-out
    /// positive, with the provided candidates.
    fn synthetic_split(
        n: usize,
        num_items: usize,
        positives: Vec<(u32, u32)>,
        candidates: Vec<Vec<u32>>,
    ) -> DatasetSplit {
        let train_edges: Vec<(u32, u32)> = (0..n as u32).map(|u| (u, 0)).collect();
        DatasetSplit {
            train: InteractionGraph::build(n, num_items, 0, vec![train_edges]).unwrap(),
            test_positives: positives,
            eval_candidates: candidates,
        }
    }

    #[test]
    fn forced_ranking_hits_perfectly() {
        // positive duplicates the user vector; negatives orthogonal
        let user = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let item = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let split = synthetic_split(1, 3, vec![(0, 0)], vec![vec![1, 2]]);
        let rep = evaluate(&user, &item, &split, 1, &[5], meta()).unwrap();
        assert_eq!(rep.hr, 1.0);
        assert_eq!(rep.ndcg, 1.0);
    }

    #[test]
    fn random_embeddings_rank_uniformly() {
        let n = 1000;
        let j = 120;
        let mut rng = seed::rng(31, "eval-random");
        let user = normal(n, 8, 1.0, &mut rng);
        let item = normal(j, 8, 1.0, &mut rng);
        let mut positives = Vec::new();
        let mut candidates = Vec::new();
        for u in 0..n as u32 {
            let pos = u % j as u32;
            positives.push((u, pos));
            let negs: Vec<u32> = (0..j as u32).filter(|&i| i != pos).take(99).collect();
            candidates.push(negs);
        }
        let split = synthetic_split(n, j, positives, candidates);
        let rep = evaluate(&user, &item, &split, 10, &[5], meta()).unwrap();
        assert!(
            (rep.hr - 0.10).abs() <= 0.02,
            "HR@10 = {} not within 0.10 +- 0.02",
            rep.hr
        );
    }

    #[test]
    fn zero_embeddings_follow_index_tie_break() {
        let n = 7;
        let j = 10;
        let user = Tensor::zeros(n, 3);
        let item = Tensor::zeros(j, 3);
        let mut positives = Vec::new();
        let mut candidates = Vec::new();
        for u in 0..n as u32 {
            let pos = (u + 2) % j as u32;
            positives.push((u, pos));
            candidates.push((0..j as u32).filter(|&i| i != pos).collect::<Vec<_>>());
        }
        let split = synthetic_split(n, j, positives.clone(), candidates.clone());
        let rep = evaluate(&user, &item, &split, 3, &[5], meta()).unwrap();
        // analytic: every score ties, so rank = 1 + #negatives below the index
        let mut hr_sum = 0.0;
        let mut ndcg_sum = 0.0;
        for (idx, &(_, pos)) in positives.iter().enumerate() {
            let rank = 1 + candidates[idx].iter().filter(|&&c| c < pos).count();
            hr_sum += hr_at_k(rank, 3, j).unwrap();
            ndcg_sum += ndcg_at_k(rank, 3, j).unwrap();
        }
        assert!((rep.hr - hr_sum / n as f64).abs() < 1e-15);
        assert!((rep.ndcg - ndcg_sum / n as f64).abs() < 1e-15);
    }

    #[test]
    fn candidate_order_does_not_matter() {
        let mut rng = seed::rng(77, "perm");
        let user = normal(4, 5, 1.0, &mut rng);
        let item = normal(12, 5, 1.0, &mut rng);
        let positives: Vec<(u32, u32)> = (0..4u32).map(|u| (u, u)).collect();
        let forward: Vec<Vec<u32>> = (0..4u32)
            .map(|u| (0..12u32).filter(|&i| i != u).collect())
            .collect();
        let reversed: Vec<Vec<u32>> = forward
            .iter()
            .map(|v| v.iter().rev().copied().collect())
            .collect();
        let a = evaluate(
            &user,
            &item,
            &synthetic_split(4, 12, positives.clone(), forward),
            5,
            &[3],
            meta(),
        )
        .unwrap();
        let b = evaluate(
            &user,
            &item,
            &synthetic_split(4, 12, positives, reversed),
            5,
            &[3],
            meta(),
        )
        .unwrap();
        assert_eq!(a.hr, b.hr);
        assert_eq!(a.ndcg, b.ndcg);
    }

    #[test]
    fn bucket_weighted_average_reconstructs_global() {
        // vary train degrees so multiple buckets fill
        let n = 30;
        let j = 25;
        let mut edges = Vec::new();
        for u in 0..n as u32 {
            for i in 0..=(u % 7) {
                edges.push((u, i));
            }
        }
        let train = InteractionGraph::build(n, j, 0, vec![edges]).unwrap();
        let mut rng = seed::rng(5, "buckets");
        let user = normal(n, 6, 1.0, &mut rng);
        let item = normal(j, 6, 1.0, &mut rng);
        let positives: Vec<(u32, u32)> = (0..n as u32).map(|u| (u, 20 + u % 5)).collect();
        let candidates: Vec<Vec<u32>> = (0..n as u32)
            .map(|u| (8..20u32).filter(|&i| i != 20 + u % 5).collect())
            .collect();
        let split = DatasetSplit {
            train,
            test_positives: positives,
            eval_candidates: candidates,
        };
        let rep = evaluate(&user, &item, &split, 5, &[2, 4, 6], meta()).unwrap();
        let total: usize = rep.buckets.iter().map(|b| b.size).sum();
        assert_eq!(total, rep.users_evaluated);
        let hr_avg: f64 = rep.buckets.iter().map(|b| b.hr * b.size as f64).sum::<f64>() / total as f64;
        let ndcg_avg: f64 =
            rep.buckets.iter().map(|b| b.ndcg * b.size as f64).sum::<f64>() / total as f64;
        assert!((hr_avg - rep.hr).abs() < 1e-12);
        assert!((ndcg_avg - rep.ndcg).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_list_is_skipped_and_counted() {
        let user = Tensor::filled(2, 2, 0.5);
        let item = Tensor::filled(4, 2, 0.5);
        let split = synthetic_split(2, 4, vec![(0, 1), (1, 2)], vec![vec![0, 3], vec![]]);
        let rep = evaluate(&user, &item, &split, 2, &[5], meta()).unwrap();
        assert_eq!(rep.users_evaluated, 1);
        assert_eq!(rep.users_skipped, 1);
    }

    #[test]
    fn report_serializes_both_ways() {
        let user = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let item = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let split = synthetic_split(1, 2, vec![(0, 0)], vec![vec![1]]);
        let rep = evaluate(&user, &item, &split, 1, &[5], meta()).unwrap();
        let nd = rep.to_ndjson();
        let first: serde_json::Value = serde_json::from_str(nd.lines().next().unwrap()).unwrap();
        assert_eq!(first["scope"], "global");
        assert_eq!(first["hr"], 1.0);
        assert!(rep.to_table().contains("HR@1"));
    }

    #[test]
    fn full_catalog_excludes_train_positives() {
        // user 0 trained on item 0; full catalog ranks items 1..4
        let train = InteractionGraph::build(1, 4, 0, vec![vec![(0, 0)]]).unwrap();
        let user = Tensor::from_rows(&[vec![1.0, 0.0]]);
        // item 0 would outscore the positive but is excluded by training
        let item = Tensor::from_rows(&[
            vec![9.0, 0.0],
            vec![1.0, 0.0],
            vec![0.5, 0.0],
            vec![0.25, 0.0],
        ]);
        let split = DatasetSplit {
            train: clone_graph(&train),
            test_positives: vec![(0, 1)],
            eval_candidates: vec![vec![2, 3]],
        };
        let rep = evaluate_full_catalog(&user, &item, &split, &train, 1, &[5], meta()).unwrap();
        assert_eq!(rep.hr, 1.0);
    }
}
