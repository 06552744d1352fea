//! Grid evaluation over guidance scale `w` and interpolation weight `u` for a
//! fixed head set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{HeadId, PerturbMethod, PerturbSpec};
use crate::dit::{Cond, DitWeights};
use crate::error::{Error, Result};
use crate::objectives::{Objective, ObjectiveId};
use crate::sampler::{sample, GuidanceConfig};
use crate::search::Pair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub heads: Vec<HeadId>,
    pub method: PerturbMethod,
    pub tau: f64,
    pub w_grid: Vec<f64>,
    pub u_grid: Vec<f64>,
    pub pairs: Vec<Pair>,
    /// Base guidance; `w_pert`, `cond` and `seed` are set per cell and pair.
    pub guidance: GuidanceConfig,
    pub objective: ObjectiveId,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_grid.is_empty() || self.u_grid.is_empty() {
            return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
        }
        if self.pairs.is_empty() {
            return Err(Error::InvalidArgument("at least one (cond, seed) pair is required".into()));
        }
        for &u in &self.u_grid {
            PerturbSpec::new(self.heads.iter().copied(), self.method, u, self.tau)?;
        }
        for &w in &self.w_grid {
            GuidanceConfig {
                w_pert: w,
                ..self.guidance.clone()
            }
            .validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub w: f64,
    pub u: f64,
    pub pair: usize,
    pub cond: Cond,
    pub seed: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// One row per `(w, u, pair)`, `w` outermost.
    pub rows: Vec<SweepRow>,
    /// Mean score per cell, indexed `[w][u]`.
    pub matrix: Vec<Vec<f64>>,
    pub w_grid: Vec<f64>,
    pub u_grid: Vec<f64>,
}

impl SweepResult {
    /// `(w, u, mean score)` of the best cell; the first one in grid order on
    /// ties.
    pub fn best(&self) -> (f64, f64, f64) {
        let mut best = (self.w_grid[0], self.u_grid[0], self.matrix[0][0]);
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                if s > best.2 {
                    best = (self.w_grid[i], self.u_grid[j], s);
                }
            }
        }
        best
    }
}

pub fn sweep(weights: &DitWeights, cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let objective: &dyn Objective = &cfg.objective;
    let jobs: Vec<(f64, f64, usize)> = cfg
        .w_grid
        .iter()
        .flat_map(|&w| {
            cfg.u_grid
                .iter()
                .flat_map(move |&u| (0..cfg.pairs.len()).map(move |p| (w, u, p)))
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(w, u, p)| {
            let (cond, seed) = cfg.pairs[p];
            let spec = PerturbSpec::new(cfg.heads.iter().copied(), cfg.method, u, cfg.tau)?;
            let g = GuidanceConfig {
                w_pert: w,
                cond,
                seed,
                ..cfg.guidance.clone()
            };
            let img = sample(weights, &g, &spec)?.export_image();
            Ok(SweepRow {
                w,
                u,
                pair: p,
                cond,
                seed,
                score: objective.score(&img, cond)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = cfg.pairs.len();
    let matrix = rows
        .chunks(m * cfg.u_grid.len())
        .map(|w_rows| {
            w_rows
                .chunks(m)
                .map(|cell| cell.iter().map(|r| r.score).sum::<f64>() / m as f64)
                .collect()
        })
        .collect();
    Ok(SweepResult {
        rows,
        matrix,
        w_grid: cfg.w_grid.clone(),
        u_grid: cfg.u_grid.clone(),
    })
}
