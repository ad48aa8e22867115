//! Grid runs over batching strategy, batch size and component variants.

use std::path::Path;

use log::{info, warn};
use serde::Serialize;

use crate::batching::Strategy;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Component, Disabled, Model};
use crate::training::{train, TrainConfig};

/// A named set of disabled components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub disable: Disabled,
}

impl Variant {
    /// Presets:
    ///
    /// | name       | disabled                          |
    /// |------------|-----------------------------------|
    /// | `baseline` | intra, inter, pe, moe, gate, focal |
    /// | `intra`    | inter, pe, moe, gate, focal       |
    /// | `inter`    | intra, moe, gate, focal           |
    /// | `both`     | moe, gate, focal                  |
    /// | `all`      | nothing                           |
    /// | `isolated` | inter, pe, gate                   |
    pub fn preset(name: &str) -> Result<Self> {
        use Component::*;
        let off: &[Component] = match name {
            "baseline" => &[Intra, Inter, Pe, Moe, Gate, Focal],
            "intra" => &[Inter, Pe, Moe, Gate, Focal],
            "inter" => &[Intra, Moe, Gate, Focal],
            "both" => &[Moe, Gate, Focal],
            "all" => &[],
            "isolated" => &[Inter, Pe, Gate],
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}` (expected baseline, intra, inter, both, all, isolated)"
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            disable: Disabled::of(off),
        })
    }

    /// The five component rows, from plain backbone to the full model.
    pub fn component_rows() -> Vec<Self> {
        ["baseline", "intra", "inter", "both", "all"]
            .into_iter()
            .map(|n| Self::preset(n).expect("known preset"))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub strategies: Vec<Strategy>,
    pub batch_sizes: Vec<usize>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.strategies.len() * self.batch_sizes.len() * self.variants.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub strategy: String,
    pub batch_size: usize,
    pub variant: String,
    pub disable: String,
    pub seeds: usize,
    pub mean_f1_mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub mean_f1_std: f64,
    pub status: String,
    /// Per-seed test mean F1, `;`-separated.
    pub per_seed: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_seed(base: &RunConfig, data: &Dataset, train_cfg: &TrainConfig, variant: &Variant) -> Result<f64> {
    let model_cfg = crate::model::ModelConfig {
        disable: variant.disable.clone(),
        ..base.resolve_model(data)
    };
    let (model, mut store) = Model::new(model_cfg, train_cfg.seed)?;
    Ok(train(&model, &mut store, data, train_cfg, None)?.test.report.mean_f1)
}

/// Trains every cell for every seed on `data` and reports the test mean F1.
/// A failing cell is marked and the grid continues.
pub fn run_grid(base: &RunConfig, data: &Dataset, grid: &Grid) -> Vec<CellResult> {
    let mut out = Vec::with_capacity(grid.cells());
    for &strategy in &grid.strategies {
        for &batch_size in &grid.batch_sizes {
            for variant in &grid.variants {
                let mut scores = Vec::new();
                let mut status = "ok".to_string();
                for &seed in &grid.seeds {
                    let cfg = TrainConfig {
                        strategy,
                        batch_size,
                        seed,
                        ..base.train.clone()
                    };
                    match run_seed(base, data, &cfg, variant) {
                        Ok(f1) => scores.push(f1),
                        Err(e) => {
                            warn!("cell {strategy}/{batch_size}/{} seed {seed} failed: {e}", variant.name);
                            status = format!("failed: {e}");
                            break;
                        }
                    }
                }
                let (mean, std) = if scores.len() == grid.seeds.len() && !scores.is_empty() {
                    mean_std(&scores)
                } else {
                    (f64::NAN, f64::NAN)
                };
                info!("{strategy} batch {batch_size} {}: {mean:.4} ± {std:.4}", variant.name);
                out.push(CellResult {
                    strategy: strategy.to_string(),
                    batch_size,
                    variant: variant.name.clone(),
                    disable: variant.disable.to_string(),
                    seeds: grid.seeds.len(),
                    mean_f1_mean: mean,
                    mean_f1_std: std,
                    status,
                    per_seed: scores.iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>().join(";"),
                });
            }
        }
    }
    out
}

pub fn write_csv(results: &[CellResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in results {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn presets() {
        let rows = Variant::component_rows();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].disable.to_string(), "intra,inter,pe,moe,gate,focal");
        assert_eq!(rows[4].disable, Disabled::none());
        assert!(Variant::preset("isolated").unwrap().disable.enabled(Component::Intra));
        assert!(Variant::preset("everything").is_err());
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_writes_one_row_per_cell() {
        let syn = SyntheticConfig {
            sessions: 3,
            session_length: 300,
            ..SyntheticConfig::default()
        };
        let mut base = RunConfig::default();
        base.model.d_model = 4;
        base.model.heads = 1;
        base.model.experts = 1;
        base.model.conv_blocks = 1;
        base.train.epochs = 1;
        let data = Dataset::prepare(&generate_synthetic(&syn).unwrap(), &base.window, Some(6)).unwrap();
        let grid = Grid {
            strategies: vec![Strategy::TimeSequential, Strategy::Shuffled],
            batch_sizes: vec![0, 8],
            variants: vec![Variant::preset("all").unwrap()],
            seeds: vec![1, 2],
        };
        let rows = run_grid(&base, &data, &grid);
        assert_eq!(rows.len(), 4);
        assert!(rows[0].status.starts_with("failed"));
        assert!(rows[0].mean_f1_mean.is_nan());
        assert_eq!(rows[1].status, "ok");
        assert_eq!(rows[1].per_seed.split(';').count(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        write_csv(&rows, &path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        assert_eq!(reader.records().count(), 4);
        assert!(reader.headers().unwrap().iter().any(|h| h == "mean_f1_std"));
    }
}
