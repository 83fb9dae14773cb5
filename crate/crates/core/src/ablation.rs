//! Ablation grid over iteration count and the normalization/flip toggles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distill::NormalizationToggles;
use crate::error::Result;
use crate::eval::evaluate_prepared;
use crate::model::{CountingModel, PreparedSample};
use crate::refine::RefineOptions;
use crate::train::{train_model, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub iterations: usize,
    pub exemplar_norm: bool,
    pub spatial_norm: bool,
    pub flip: bool,
}

impl AblationCell {
    pub fn options(&self) -> RefineOptions {
        RefineOptions {
            iterations: self.iterations,
            normalization: NormalizationToggles {
                exemplar: self.exemplar_norm,
                spatial: self.spatial_norm,
            },
            flip: self.flip,
        }
    }

    pub fn label(&self) -> String {
        let mark = |b| if b { "on" } else { "off" };
        format!(
            "N={} EN={} SN={} flip={}",
            self.iterations,
            mark(self.exemplar_norm),
            mark(self.spatial_norm),
            mark(self.flip)
        )
    }

    /// `base` with this cell's refinement options.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.refine = self.options();
        cfg
    }
}

/// Iteration sweep with every toggle on, followed by the normalization and
/// flip rows at `max_iterations`.
pub fn ablation_grid(max_iterations: usize) -> Vec<AblationCell> {
    let cell = |iterations, exemplar_norm, spatial_norm, flip| AblationCell {
        iterations,
        exemplar_norm,
        spatial_norm,
        flip,
    };
    let mut grid: Vec<AblationCell> = (1..=max_iterations).map(|n| cell(n, true, true, true)).collect();
    let n = max_iterations;
    grid.extend([
        cell(n, false, false, true),
        cell(n, true, false, true),
        cell(n, false, true, true),
        cell(n, true, true, false),
        cell(n, true, true, true),
    ]);
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<32} {:>6} {:>10} {:>10}\n", "cell", "seed", "MAE", "RMSE");
        for r in &self.rows {
            let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
            let _ = write!(
                s,
                "{:<32} {:>6} {:>10} {:>10}",
                r.cell.label(),
                r.seed,
                num(r.mae),
                num(r.rmse)
            );
            if let Some(e) = &r.error {
                let _ = write!(s, "  failed: {e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates every grid cell for every seed. A failing cell is
/// recorded and the rest proceed. Cells with identical configurations are
/// trained once.
pub fn run_ablation(
    train_data: &[PreparedSample],
    eval_data: &[PreparedSample],
    base: &TrainConfig,
    grid: &[AblationCell],
    seeds: &[u64],
    split: &str,
) -> Result<AblationTable> {
    base.validate()?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for &seed in seeds {
        for cell in grid {
            if let Some(done) = rows.iter().find(|r| r.cell == *cell && r.seed == seed) {
                rows.push(done.clone());
                continue;
            }
            let cfg = TrainConfig {
                seed,
                ..cell.config(base)
            };
            let result = CountingModel::new(cfg.model_config())
                .and_then(|m| train_model(m, train_data, &cfg))
                .and_then(|out| evaluate_prepared(&out.model, eval_data, split));
            let row = match result {
                Ok(rep) => AblationRow {
                    cell: *cell,
                    seed,
                    mae: Some(rep.mae),
                    rmse: Some(rep.rmse),
                    error: None,
                },
                Err(e) => {
                    log::warn!("ablation cell {} seed {seed} failed: {e}", cell.label());
                    AblationRow {
                        cell: *cell,
                        seed,
                        mae: None,
                        rmse: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            log::info!("{} seed {seed}: {:?}", cell.label(), row.mae);
            rows.push(row);
        }
    }
    Ok(AblationTable {
        split: split.to_string(),
        rows,
    })
}
