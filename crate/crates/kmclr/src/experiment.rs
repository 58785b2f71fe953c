//! End-to-end experiment drivers: a single train-then-evaluate run, the
//! four-variant ablation set, and one-axis hyperparameter sweeps.

use std::fmt::Write as _;
use std::str::FromStr;

use serde_json::json;

use crate::eval::{evaluate, RankingReport, RunMeta};
use crate::graph::{DatasetSplit, KnowledgeGraph};
use crate::tensor::Tensor;
use crate::trainer::{final_embeddings, train, TrainConfig, TrainError, TrainOutcome};

/// Training-degree boundaries for the sparsity buckets of full reports.
pub const DEFAULT_BUCKET_BOUNDARIES: &[usize] = &[4, 8];

pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub report: RankingReport,
    pub user_emb: Tensor,
    pub item_emb: Tensor,
}

/// Trains under `cfg` and ranks the held-out positives with the final
/// embeddings. The split is shared by the caller so repeated calls (other
/// variants, other sweep cells) are paired comparisons.
pub fn run_experiment(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    kg: &KnowledgeGraph,
) -> Result<ExperimentResult, TrainError> {
    let outcome = train(cfg, split, kg)?;
    let (user_emb, item_emb) = final_embeddings(cfg, &split.train, kg, &outcome.params)?;
    let meta = RunMeta::new(&cfg.to_text(), cfg.seed);
    let report = evaluate(
        &user_emb,
        &item_emb,
        split,
        cfg.eval_k,
        DEFAULT_BUCKET_BOUNDARIES,
        meta,
    )?;
    Ok(ExperimentResult {
        outcome,
        report,
        user_emb,
        item_emb,
    })
}

/// Ablation variants, in report order.
pub const ABLATION_VARIANTS: [&str; 4] = ["full", "w/o-Mcl", "w/o-Kcl", "w/o-NorT"];

/// Maps a variant label to its config: `w/o-Mcl` drops the multi-behavior
/// contrastive task, `w/o-Kcl` drops the knowledge path entirely, and
/// `w/o-NorT` replaces the staged paradigm with one jointly-weighted stage.
pub fn variant_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig, TrainError> {
    let mut cfg = base.clone();
    match variant {
        "full" => {}
        "w/o-Mcl" => cfg.disable_mcl = true,
        "w/o-Kcl" => cfg.disable_kcl = true,
        "w/o-NorT" => cfg.normal_training = true,
        other => {
            return Err(TrainError::Config(format!(
                "unknown variant '{other}' (expected one of {ABLATION_VARIANTS:?})"
            )))
        }
    }
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: &'static str,
    pub hr: f64,
    pub ndcg: f64,
}

pub struct AblationReport {
    pub k: usize,
    pub rows: Vec<AblationRow>,
    pub meta: RunMeta,
}

impl AblationReport {
    fn row(&self, variant: &str) -> &AblationRow {
        self.rows.iter().find(|r| r.variant == variant).unwrap()
    }

    /// HR margins of the full model over each reduced variant.
    pub fn margins(&self) -> Vec<(&'static str, f64)> {
        let full = self.row("full").hr;
        self.rows
            .iter()
            .filter(|r| r.variant != "full")
            .map(|r| (r.variant, full - r.hr))
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant    HR@{:<4} NDCG@{}", self.k, self.k);
        for r in &self.rows {
            let _ = writeln!(out, "{:<10} {:.4}  {:.4}", r.variant, r.hr, r.ndcg);
        }
        for (variant, margin) in self.margins() {
            let _ = writeln!(out, "margin full vs {variant}: {margin:+.4}");
        }
        out
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let rec = json!({
                "scope": "variant",
                "variant": r.variant,
                "k": self.k,
                "hr": r.hr,
                "ndcg": r.ndcg,
                "seed": self.meta.seed,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        for (variant, margin) in self.margins() {
            let rec = json!({
                "scope": "margin",
                "versus": variant,
                "hr_margin": margin,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

/// Runs all four ablation variants on one shared split.
pub fn ablate(
    base: &TrainConfig,
    split: &DatasetSplit,
    kg: &KnowledgeGraph,
) -> Result<AblationReport, TrainError> {
    let mut rows = Vec::with_capacity(ABLATION_VARIANTS.len());
    for variant in ABLATION_VARIANTS {
        let cfg = variant_config(base, variant)?;
        let result = run_experiment(&cfg, split, kg)?;
        rows.push(AblationRow {
            variant,
            hr: result.report.hr,
            ndcg: result.report.ndcg,
        });
    }
    Ok(AblationReport {
        k: base.eval_k,
        rows,
        meta: RunMeta::new(&base.to_text(), base.seed),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Dimension,
    Layers,
    Alpha,
    Dropout,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Dimension => "d",
            SweepAxis::Layers => "layers",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Dropout => "dropout",
        }
    }

    /// The declared grid for this axis.
    pub fn grid(self) -> &'static [f64] {
        match self {
            SweepAxis::Dimension => &[8.0, 16.0, 32.0, 64.0],
            SweepAxis::Layers => &[1.0, 2.0, 3.0, 4.0],
            SweepAxis::Alpha => &[0.1, 0.2, 0.3, 0.4],
            SweepAxis::Dropout => &[0.0, 0.2, 0.4, 0.6],
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: f64) -> Result<(), TrainError> {
        let as_count = |v: f64, what: &str| -> Result<usize, TrainError> {
            if v.fract() != 0.0 || v < 1.0 || v > 4096.0 {
                return Err(TrainError::Config(format!(
                    "{what} grid value must be a small positive integer, got {v}"
                )));
            }
            Ok(v as usize)
        };
        match self {
            SweepAxis::Dimension => cfg.d = as_count(value, "d")?,
            SweepAxis::Layers => cfg.layers = as_count(value, "layers")?,
            SweepAxis::Alpha => cfg.alpha = value,
            SweepAxis::Dropout => cfg.behavior_dropout = value,
        }
        Ok(())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "d" | "dim" | "dimension" => Ok(SweepAxis::Dimension),
            "l" | "layers" => Ok(SweepAxis::Layers),
            "alpha" => Ok(SweepAxis::Alpha),
            "dropout" => Ok(SweepAxis::Dropout),
            other => Err(format!(
                "unknown sweep axis '{other}' (expected d, layers, alpha, or dropout)"
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub value: f64,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
    /// Present when the cell's training run diverged.
    pub error: Option<String>,
}

pub struct SweepReport {
    pub axis: &'static str,
    pub k: usize,
    pub cells: Vec<SweepCell>,
    pub meta: RunMeta,
}

impl SweepReport {
    /// Index and HR of the best completed cell, if any completed.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.hr.map(|hr| (i, hr)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Tab-separated matrix, one row per cell, with each cell's HR delta
    /// relative to the best cell.
    pub fn to_tsv(&self) -> String {
        let best = self.best().map(|(_, hr)| hr);
        let mut out = format!("{}\thr\tndcg\trel_delta_hr\tstatus\n", self.axis);
        for c in &self.cells {
            match (c.hr, c.ndcg) {
                (Some(hr), Some(ndcg)) => {
                    let rel = match best {
                        Some(b) if b > 0.0 => format!("{:.6}", (hr - b) / b),
                        _ => "0.000000".to_string(),
                    };
                    let _ = writeln!(out, "{}\t{hr:.6}\t{ndcg:.6}\t{rel}\tok", c.value);
                }
                _ => {
                    let _ = writeln!(out, "{}\t\t\t\tfailed", c.value);
                }
            }
        }
        out
    }

    pub fn to_ndjson(&self) -> String {
        let best = self.best().map(|(_, hr)| hr);
        let mut out = String::new();
        for c in &self.cells {
            let rec = json!({
                "scope": "sweep-cell",
                "axis": self.axis,
                "value": c.value,
                "k": self.k,
                "hr": c.hr,
                "ndcg": c.ndcg,
                "rel_delta_hr": match (c.hr, best) {
                    (Some(hr), Some(b)) if b > 0.0 => Some((hr - b) / b),
                    (Some(_), Some(_)) => Some(0.0),
                    _ => None,
                },
                "error": c.error,
                "seed": self.meta.seed,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

/// Sweeps one axis over an explicit value list, training one model per
/// cell with the shared seed. A diverging cell is marked failed and the
/// sweep continues; anything else aborts it.
pub fn sweep_over(
    base: &TrainConfig,
    split: &DatasetSplit,
    kg: &KnowledgeGraph,
    axis: SweepAxis,
    values: &[f64],
) -> Result<SweepReport, TrainError> {
    if values.is_empty() {
        return Err(TrainError::Config("sweep needs at least one grid value".into()));
    }
    let mut cells = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, value)?;
        match run_experiment(&cfg, split, kg) {
            Ok(result) => cells.push(SweepCell {
                value,
                hr: Some(result.report.hr),
                ndcg: Some(result.report.ndcg),
                error: None,
            }),
            Err(TrainError::Diverged { stage, epoch, .. }) => cells.push(SweepCell {
                value,
                hr: None,
                ndcg: None,
                error: Some(format!("diverged in stage {stage} at epoch {epoch}")),
            }),
            Err(other) => return Err(other),
        }
    }
    Ok(SweepReport {
        axis: axis.name(),
        k: base.eval_k,
        cells,
        meta: RunMeta::new(&base.to_text(), base.seed),
    })
}

/// Sweeps one axis over its declared grid.
pub fn sweep(
    base: &TrainConfig,
    split: &DatasetSplit,
    kg: &KnowledgeGraph,
    axis: SweepAxis,
) -> Result<SweepReport, TrainError> {
    sweep_over(base, split, kg, axis, axis.grid())
}
