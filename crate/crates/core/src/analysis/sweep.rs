use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

use super::{invert, stream, FeatureTarget, InversionSpec, Pipeline};

/// How sweep targets are drawn from generated images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    SpatialMean,
    RandomPixel,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial_mean" => Ok(Self::SpatialMean),
            "random_pixel" => Ok(Self::RandomPixel),
            other => Err(Error::invalid(
                "target_mode",
                format!("`{other}` (expected spatial_mean|random_pixel)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub sizes: Vec<usize>,
    pub targets: usize,
    pub repeats: usize,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    #[serde(default)]
    pub target_mode: TargetMode,
}

impl SweepSpec {
    fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::Precondition("sweep needs at least one grid size".into()));
        }
        if self.targets == 0 || self.repeats == 0 {
            return Err(Error::Precondition("targets and repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Seed of target `t` in repeat `r`.
    pub fn target_seed(&self, repeat: usize, target: usize) -> u64 {
        derive_seed(derive_seed(self.seed, repeat as u64), target as u64)
    }
}

/// One inversion of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub grid_size: usize,
    pub repeat: usize,
    pub target: usize,
    pub target_seed: u64,
    pub best_loss: f64,
    pub best_step: usize,
    pub reconstruction_cosine: f64,
    pub initial_cosine: f64,
}

/// Aggregate over all targets and repeats of one grid size. Standard
/// deviations are population (ddof = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub grid_size: usize,
    pub runs: usize,
    pub mean_cosine: f64,
    pub std_cosine: f64,
    /// Spread of the per-repeat mean cosines.
    pub std_repeat_means: f64,
    pub mean_best_loss: f64,
    pub std_best_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub spec: SweepSpec,
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SweepOutput {
    /// Grid size with the highest mean cosine (first on ties).
    pub fn best_grid_size(&self) -> usize {
        let mut best = &self.rows[0];
        for row in &self.rows[1..] {
            if row.mean_cosine > best.mean_cosine {
                best = row;
            }
        }
        best.grid_size
    }

    /// Whether grid size 0 has the lowest mean cosine; `None` when 0 was
    /// not swept or is the only size.
    pub fn grid0_is_worst(&self) -> Option<bool> {
        let zero = self.rows.iter().find(|r| r.grid_size == 0)?;
        let others: Vec<_> = self.rows.iter().filter(|r| r.grid_size != 0).collect();
        if others.is_empty() {
            return None;
        }
        Some(others.iter().all(|r| zero.mean_cosine <= r.mean_cosine))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::invalid("csv", e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid("csv", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "rows": self.rows,
            "best_grid_size": self.best_grid_size(),
            "grid0_is_worst": self.grid0_is_worst(),
        })
    }
}

/// Inverts `targets × repeats` LayerY targets at every grid size. Target
/// `t` of repeat `r` and its initial vectors are shared by all sizes.
pub fn grid_size_sweep<T: Scalar>(pipe: &Pipeline<'_, T>, spec: &SweepSpec) -> Result<SweepOutput> {
    spec.validate()?;
    let pairs: Vec<(usize, usize)> = (0..spec.repeats)
        .flat_map(|r| (0..spec.targets).map(move |t| (r, t)))
        .collect();
    let targets = pairs
        .par_iter()
        .map(|&(r, t)| {
            let seed = spec.target_seed(r, t);
            let target = match spec.target_mode {
                TargetMode::SpatialMean => FeatureTarget::SpatialMean { seed },
                TargetMode::RandomPixel => FeatureTarget::RandomPixel { seed },
            };
            target.resolve(pipe)
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = spec
        .sizes
        .iter()
        .flat_map(|&g| (0..pairs.len()).map(move |k| (g, k)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(g, k)| {
            let (r, t) = pairs[k];
            let target_seed = spec.target_seed(r, t);
            let inv = InversionSpec {
                target: targets[k].clone(),
                grid_size: g,
                steps: spec.steps,
                step_size: spec.step_size,
                seed: derive_seed(target_seed, stream::INIT),
                init: None,
            };
            let res = invert(pipe, &inv)?;
            Ok(SweepRun {
                grid_size: g,
                repeat: r,
                target: t,
                target_seed,
                best_loss: res.best_loss,
                best_step: res.best_step,
                reconstruction_cosine: res.reconstruction_cosine,
                initial_cosine: res.initial_cosine,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = spec
        .sizes
        .iter()
        .map(|&g| {
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.grid_size == g).collect();
            let cos: Vec<f64> = mine.iter().map(|r| r.reconstruction_cosine).collect();
            let loss: Vec<f64> = mine.iter().map(|r| r.best_loss).collect();
            let repeat_means: Vec<f64> = (0..spec.repeats)
                .map(|rep| {
                    let xs: Vec<f64> = mine
                        .iter()
                        .filter(|r| r.repeat == rep)
                        .map(|r| r.reconstruction_cosine)
                        .collect();
                    mean_std(&xs).0
                })
                .collect();
            let (mean_cosine, std_cosine) = mean_std(&cos);
            let (mean_best_loss, std_best_loss) = mean_std(&loss);
            SweepRow {
                grid_size: g,
                runs: mine.len(),
                mean_cosine,
                std_cosine,
                std_repeat_means: mean_std(&repeat_means).1,
                mean_best_loss,
                std_best_loss,
            }
        })
        .collect();
    Ok(SweepOutput {
        spec: spec.clone(),
        runs,
        rows,
    })
}
