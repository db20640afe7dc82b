//! Ablation sweeps over modules, loss weights and set distances.

use serde::{Deserialize, Serialize};

use crate::cha::{AlignOptions, AlignmentWeights, Distance, Solver};
use crate::error::{Error, Result};
use crate::eval::{render_table, MetricReport, TableRow};
use crate::model::{Decoding, Model, ModelConfig};
use crate::ot::{OtMode, SinkhornConfig};
use crate::pipeline::{run, Prepared};
use crate::text::{TextRules, Vocabulary};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    Modules,
    Weights,
    Distance,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::Modules => "modules",
            Sweep::Weights => "weights",
            Sweep::Distance => "distance",
        }
    }
}

/// The eight weight settings of the loss-weight table, as (alpha, gamma, beta).
pub const WEIGHT_ROWS: [(f64, f64, f64); 8] = [
    (0.3, 0.4, 0.3),
    (0.4, 0.2, 0.4),
    (0.5, 0.2, 0.3),
    (0.6, 0.2, 0.2),
    (0.7, 0.2, 0.1),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
];

pub const MODULE_ROWS: [&str; 4] = ["Base", "+VFP", "+VFP+TFP+CHA", "+VFP+TFP+CHA+RPE"];

/// Model and training settings of one sweep row.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Module rows. Base has one coarse token grid, no alignment loss and no
/// relative positions; each later row switches one group back on.
pub fn module_variant(label: &str, model: &ModelConfig, train: &TrainConfig) -> Result<Variant> {
    let (pyramid, align, rpe) = match label {
        "Base" => (false, false, false),
        "+VFP" => (true, false, false),
        "+VFP+TFP+CHA" => (true, true, false),
        "+VFP+TFP+CHA+RPE" => (true, true, true),
        other => return Err(Error::Config(format!("unknown module row {other}"))),
    };
    let mut m = model.clone();
    m.pyramid = pyramid;
    m.rpe_in_decoder = rpe;
    let mut t = train.clone();
    if !align {
        t.weights = AlignmentWeights::ZERO;
    }
    Ok(Variant { label: label.to_string(), model: m, train: t })
}

pub fn variants(sweep: Sweep, model: &ModelConfig, train: &TrainConfig) -> Result<Vec<Variant>> {
    match sweep {
        Sweep::Modules => MODULE_ROWS.iter().map(|l| module_variant(l, model, train)).collect(),
        Sweep::Weights => Ok(WEIGHT_ROWS
            .iter()
            .map(|&(alpha, gamma, beta)| Variant {
                label: format!("({alpha:.1}, {gamma:.1}, {beta:.1})"),
                model: model.clone(),
                train: TrainConfig { weights: AlignmentWeights { alpha, gamma, beta }, ..train.clone() },
            })
            .collect()),
        Sweep::Distance => Ok(Distance::ALL
            .iter()
            .map(|&distance| Variant {
                label: distance.label().to_string(),
                model: model.clone(),
                train: TrainConfig { distance, ..train.clone() },
            })
            .collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: Option<MetricReport>,
    pub grounding: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// Mean alignment loss of one model under the exact solver and a
/// near-zero-regularization Sinkhorn run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverCheck {
    pub exact: f64,
    pub sinkhorn: f64,
    pub sigma: f64,
    pub relative_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub sweep: Sweep,
    pub seed: u64,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
    pub solver_check: Option<SolverCheck>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let rows: Vec<TableRow> = self
            .rows
            .iter()
            .map(|r| {
                let cell = match (&r.metrics, &r.error) {
                    (Some(m), _) => Ok(m.clone()),
                    (None, Some(e)) => Err(e.clone()),
                    (None, None) => Err("no result".to_string()),
                };
                (r.label.clone(), cell)
            })
            .collect();
        let mut out = render_table(&format!("Ablation: {} (seed {})", self.sweep.name(), self.seed), &rows);
        if let Some(c) = &self.solver_check {
            out += &format!(
                "solver check: exact {:.6} vs sinkhorn(sigma={}) {:.6}, relative gap {:.4}\n",
                c.exact, c.sigma, c.sinkhorn, c.relative_gap
            );
        }
        out
    }
}

pub const CHECK_SIGMA: f64 = 1e-3;

/// Balanced Sinkhorn at `CHECK_SIGMA` against the exact solver, averaged over `data`.
pub fn solver_check(model: &Model, data: &[Prepared], weights: &AlignmentWeights, unit_features: bool) -> Result<SolverCheck> {
    if data.is_empty() {
        return Err(Error::Empty("no samples for the solver check".into()));
    }
    let w = if weights.is_zero() { AlignmentWeights::default() } else { *weights };
    let exact = AlignOptions { solver: Solver::Exact, unit_features, ..Default::default() };
    let sink = AlignOptions {
        solver: Solver::Sinkhorn,
        unit_features,
        sinkhorn: SinkhornConfig { sigma: CHECK_SIGMA, max_iter: 20_000, tol: 1e-10, mode: OtMode::Balanced, ..Default::default() },
        ..Default::default()
    };
    let (mut e, mut s) = (0.0, 0.0);
    for p in data {
        e += model.alignment(&p.example.patches, &p.example.text, &w, &exact)?.total;
        s += model.alignment(&p.example.patches, &p.example.text, &w, &sink)?.total;
    }
    let n = data.len() as f64;
    let (exact, sinkhorn) = (e / n, s / n);
    Ok(SolverCheck { exact, sinkhorn, sigma: CHECK_SIGMA, relative_gap: (sinkhorn - exact).abs() / exact.abs().max(1e-12) })
}

/// Train and score every row of a sweep with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    sweep: Sweep,
    train: &[Prepared],
    test: &[Prepared],
    vocab: &Vocabulary,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    decoding: Decoding,
    rules: &TextRules,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut solver = None;
    for v in variants(sweep, model, train_cfg)? {
        log::info!("ablation {}: {}", sweep.name(), v.label);
        let row = match run(train, test, vocab, &v.model, &v.train, decoding, rules) {
            Ok(out) => {
                if sweep == Sweep::Distance && v.train.distance == Distance::Wasserstein {
                    solver = Some(solver_check(&out.checkpoint.model, test, &v.train.weights, v.train.unit_features)?);
                }
                AblationRow {
                    label: v.label,
                    grounding: out.summary.grounding,
                    final_loss: Some(out.summary.final_loss),
                    metrics: Some(out.summary.metrics),
                    error: None,
                }
            }
            Err(e) => AblationRow { label: v.label, metrics: None, grounding: None, final_loss: None, error: Some(e.to_string()) },
        };
        rows.push(row);
    }
    Ok(AblationReport { sweep, seed: train_cfg.seed, epochs: train_cfg.epochs, rows, solver_check: solver })
}
