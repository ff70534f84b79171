use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{run, ExperimentConfig, ExperimentError, RunOutcome, SplitKind};
use crate::models::{EmbeddingKind, HyperSize};

/// Ablation grids over a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Hypernetwork sizes S, M and L.
    HyperSize,
    /// `λ_θ ∈ {0, 5e-5, 5e-3, 5e-1}` × `λ_h = λ_v ∈ {0, 1e-5, 1e-3}`.
    LambdaGrid,
    /// Linear one-hot versus convolutional embedding.
    Embedding,
    /// Unseen-client Dirichlet concentration from 0.1 to 1.0.
    Extrapolation,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hyper-size" => Ok(Preset::HyperSize),
            "lambda-grid" => Ok(Preset::LambdaGrid),
            "embedding" => Ok(Preset::Embedding),
            "extrapolation" => Ok(Preset::Extrapolation),
            other => Err(format!("unknown preset `{other}` (hyper-size, lambda-grid, embedding, extrapolation)")),
        }
    }
}

pub const LAMBDA_THETA_GRID: [f64; 4] = [0.0, 5e-5, 5e-3, 5e-1];
pub const LAMBDA_SHARED_GRID: [f64; 3] = [0.0, 1e-5, 1e-3];

impl Preset {
    /// Named cells of the grid, each a full configuration.
    pub fn cells(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Preset::HyperSize => [HyperSize::Small, HyperSize::Medium, HyperSize::Large]
                .into_iter()
                .map(|s| (format!("hyper-{}", s.label()), with(&|c| c.model.hyper = s)))
                .collect(),
            Preset::LambdaGrid => LAMBDA_THETA_GRID
                .iter()
                .flat_map(|&lt| LAMBDA_SHARED_GRID.iter().map(move |&ls| (lt, ls)))
                .map(|(lt, ls)| {
                    let cfg = with(&|c| {
                        c.train.lambda_theta = lt;
                        c.train.lambda_h = ls;
                        c.train.lambda_v = ls;
                    });
                    (format!("ltheta-{lt}_lhv-{ls}"), cfg)
                })
                .collect(),
            Preset::Embedding => [("mlp", EmbeddingKind::LinearOneHot), ("cnn", EmbeddingKind::LenetConv)]
                .into_iter()
                .map(|(name, k)| (format!("embed-{name}"), with(&|c| c.model.embedding = k)))
                .collect(),
            Preset::Extrapolation => (1..=10)
                .map(|i| {
                    let a = i as f64 / 10.0;
                    let cfg = with(&|c| {
                        c.data.split = SplitKind::Extrapolation;
                        c.data.alpha_new = a;
                    });
                    (format!("alpha-new-{a}"), cfg)
                })
                .collect(),
        }
    }
}

/// Runs every cell of a preset into `out/<cell>/` and writes
/// `out/summary.csv` with each cell's final row.
pub fn sweep(
    base: &ExperimentConfig,
    preset: Preset,
    out: &Path,
) -> Result<Vec<(String, RunOutcome)>, ExperimentError> {
    fs::create_dir_all(out).map_err(|e| ExperimentError::io(out, e))?;
    let mut results = Vec::new();
    let mut summary = String::from("cell,round,train_client_acc,unseen_client_acc\n");
    for (name, mut cfg) in preset.cells(base) {
        cfg.run.out = out.join(&name);
        let outcome = run(&cfg, false)?;
        if let Some(last) = outcome.rows.last() {
            let unseen = last.unseen_client_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(summary, "{name},{},{},{unseen}", last.round, last.train_client_acc);
        }
        results.push((name, outcome));
    }
    let path = out.join("summary.csv");
    fs::write(&path, summary).map_err(|e| ExperimentError::io(&path, e))?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let base = ExperimentConfig::default();
        assert_eq!(Preset::HyperSize.cells(&base).len(), 3);
        assert_eq!(Preset::Embedding.cells(&base).len(), 2);
        assert_eq!(Preset::Extrapolation.cells(&base).len(), 10);
        let grid = Preset::LambdaGrid.cells(&base);
        assert_eq!(grid.len(), 12);
        let mut names: Vec<_> = grid.iter().map(|(n, _)| n.clone()).collect();
        names.dedup();
        assert_eq!(names.len(), 12);
        assert!(grid.iter().all(|(_, c)| c.train.lambda_h == c.train.lambda_v));
    }
}
