//! Behavior-space archive: a regular grid over the translation components of
//! the pose, each cell keeping the lowest-cost solution ever offered to it.
//!
//! Ranges are sized from the warm-start solution statistics: per behavior
//! dimension the grid spans `[mean - gamma*std, mean + gamma*std]` with a
//! floor on the standard deviation so a collapsed warm start still yields a
//! searchable region. Out-of-range behaviors clip into the boundary cells.

use rand::Rng;
use thiserror::Error;

use crate::pose::PoseParam;

/// Minimum per-dimension standard deviation (meters) when sizing ranges.
pub const SIGMA_FLOOR: f64 = 0.005;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive sizing needs at least 2 solutions, got {0}")]
    TooFewSolutions(usize),
    #[error("behavior space must have 2 or 3 dimensions, got {0}")]
    BadDimensions(usize),
}

#[derive(Debug, Clone)]
pub struct CellEntry {
    pub params: PoseParam,
    pub cost: f64,
}

/// Result of offering a solution to the archive.
#[derive(Debug, Clone, Copy)]
pub struct OfferOutcome {
    pub accepted: bool,
    /// The cell was empty before this offer.
    pub new_cell: bool,
    /// Incumbent cost minus candidate cost for filled cells; for empty cells
    /// the offset of the candidate below the worst seed cost. Discoveries
    /// outrank improvements regardless of this value.
    pub improvement: f64,
}

#[derive(Debug, Clone)]
pub struct Archive {
    dims: usize,
    bins: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cells: Vec<Option<CellEntry>>,
    offers: u64,
    accepts: u64,
    discovery_baseline: Option<f64>,
}

/// Behavior projection: the (x, y) translation of the pose, plus z in 3-D
/// behavior mode.
pub fn behavior(params: &PoseParam, dims: usize) -> [f64; 3] {
    let t = params.translation();
    [t.x, t.y, if dims == 3 { t.z } else { 0.0 }]
}

impl Archive {
    /// Sizes the grid from solutions: per behavior dimension the range is
    /// `[mean - gamma*std, mean + gamma*std]` over the population statistics
    /// of the solutions' behaviors, with the standard deviation floored.
    pub fn from_solutions(
        solutions: &[(PoseParam, f64)],
        gamma: f64,
        bins: usize,
        dims: usize,
    ) -> Result<Self, ArchiveError> {
        if solutions.len() < 2 {
            return Err(ArchiveError::TooFewSolutions(solutions.len()));
        }
        if dims != 2 && dims != 3 {
            return Err(ArchiveError::BadDimensions(dims));
        }
        let n = solutions.len() as f64;
        let mut lo = Vec::with_capacity(dims);
        let mut hi = Vec::with_capacity(dims);
        for d in 0..dims {
            let mean = solutions
                .iter()
                .map(|(p, _)| behavior(p, dims)[d])
                .sum::<f64>()
                / n;
            let var = solutions
                .iter()
                .map(|(p, _)| (behavior(p, dims)[d] - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = var.sqrt().max(SIGMA_FLOOR);
            lo.push(mean - gamma * std);
            hi.push(mean + gamma * std);
        }
        Ok(Self {
            dims,
            bins,
            lo,
            hi,
            cells: vec![None; bins.pow(dims as u32)],
            offers: 0,
            accepts: 0,
            discovery_baseline: None,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn range(&self, dim: usize) -> (f64, f64) {
        (self.lo[dim], self.hi[dim])
    }

    pub fn offers(&self) -> u64 {
        self.offers
    }

    pub fn accepts(&self) -> u64 {
        self.accepts
    }

    pub fn filled(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Cell coordinates for a pose, clipped into range.
    pub fn cell_coords(&self, params: &PoseParam) -> [u32; 3] {
        let b = behavior(params, self.dims);
        let mut coords = [0u32; 3];
        for d in 0..self.dims {
            let width = (self.hi[d] - self.lo[d]) / self.bins as f64;
            let idx = ((b[d] - self.lo[d]) / width).floor();
            coords[d] = idx.clamp(0.0, (self.bins - 1) as f64) as u32;
        }
        coords
    }

    fn flat_index(&self, coords: [u32; 3]) -> usize {
        let mut idx = 0usize;
        for d in (0..self.dims).rev() {
            idx = idx * self.bins + coords[d] as usize;
        }
        idx
    }

    /// MAP-Elites insertion: replace the incumbent only on strict cost
    /// improvement.
    pub fn offer(&mut self, params: PoseParam, cost: f64) -> OfferOutcome {
        self.offers += 1;
        if self.discovery_baseline.is_none() {
            self.discovery_baseline = Some(cost);
        }
        let idx = self.flat_index(self.cell_coords(&params));
        match &self.cells[idx] {
            Some(entry) => {
                let improvement = entry.cost - cost;
                if cost < entry.cost {
                    self.cells[idx] = Some(CellEntry { params, cost });
                    self.accepts += 1;
                    OfferOutcome {
                        accepted: true,
                        new_cell: false,
                        improvement,
                    }
                } else {
                    OfferOutcome {
                        accepted: false,
                        new_cell: false,
                        improvement,
                    }
                }
            }
            None => {
                let improvement = self.discovery_baseline.unwrap_or(0.0) - cost;
                self.cells[idx] = Some(CellEntry { params, cost });
                self.accepts += 1;
                OfferOutcome {
                    accepted: true,
                    new_cell: true,
                    improvement,
                }
            }
        }
    }

    /// Seeds the archive and records the worst seed cost as the baseline for
    /// scoring later cell discoveries.
    pub fn seed(&mut self, entries: &[(PoseParam, f64)]) {
        for (_, cost) in entries {
            let base = self.discovery_baseline.get_or_insert(*cost);
            if *cost > *base {
                *base = *cost;
            }
        }
        for (params, cost) in entries {
            self.offer(*params, *cost);
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, &CellEntry)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|e| (i, e)))
    }

    pub fn entry_at(&self, coords: [u32; 3]) -> Option<&CellEntry> {
        self.cells[self.flat_index(coords)].as_ref()
    }

    pub fn coords_of_flat(&self, idx: usize) -> [u32; 3] {
        let mut rest = idx;
        let mut coords = [0u32; 3];
        for d in 0..self.dims {
            coords[d] = (rest % self.bins) as u32;
            rest /= self.bins;
        }
        coords
    }

    pub fn best_cost(&self) -> Option<f64> {
        self.cells()
            .map(|(_, e)| e.cost)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }

    /// Up to `n` lowest-cost cells, ties broken by cell index.
    pub fn best_cells(&self, n: usize) -> Vec<(usize, &CellEntry)> {
        let mut filled: Vec<(usize, &CellEntry)> = self.cells().collect();
        filled.sort_by(|a, b| {
            a.1.cost
                .partial_cmp(&b.1.cost)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        filled.truncate(n);
        filled
    }

    /// Mean cost of the `n` best cells (the estimate-set quality metric).
    pub fn mean_best_cost(&self, n: usize) -> f64 {
        let best = self.best_cells(n);
        if best.is_empty() {
            return f64::INFINITY;
        }
        best.iter().map(|(_, e)| e.cost).sum::<f64>() / best.len() as f64
    }

    /// A uniformly random filled cell, for emitter restarts.
    pub fn random_elite<R: Rng>(&self, rng: &mut R) -> Option<&CellEntry> {
        let filled: Vec<&CellEntry> = self.cells.iter().flatten().collect();
        if filled.is_empty() {
            return None;
        }
        Some(filled[rng.random_range(0..filled.len())])
    }

    /// CSV dump for heatmap plotting: cell coordinates, cost, translation,
    /// rotation encoding.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.dims {
            2 => out.push_str("cell_x,cell_y,cost,tx,ty,tz,r6_0,r6_1,r6_2,r6_3,r6_4,r6_5\n"),
            _ => out.push_str("cell_x,cell_y,cell_z,cost,tx,ty,tz,r6_0,r6_1,r6_2,r6_3,r6_4,r6_5\n"),
        }
        for (idx, entry) in self.cells() {
            let c = self.coords_of_flat(idx);
            let p = &entry.params;
            if self.dims == 2 {
                out.push_str(&format!("{},{},", c[0], c[1]));
            } else {
                out.push_str(&format!("{},{},{},", c[0], c[1], c[2]));
            }
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                entry.cost,
                p.t[0],
                p.t[1],
                p.t[2],
                p.r6[0],
                p.r6[1],
                p.r6[2],
                p.r6[3],
                p.r6[4],
                p.r6[5]
            ));
        }
        out
    }
}
