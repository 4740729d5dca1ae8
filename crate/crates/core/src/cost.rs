//! Volumetric semantic cost functions.
//!
//! The ground-truth cost is discrete: free and occupied points pay `c_max`
//! when their signed distance has the wrong sign, known-SDF points pay the
//! absolute value mismatch. The relaxed cost replaces the indicators with
//! hinge violations scaled by `scale_free` and reports, per point, the
//! magnitude of a spatial gradient that pushes the point toward its feasible
//! level set:
//!
//! - free:     magnitude `scale_free * max(0, eps - sdf)`, direction `-grad sdf`
//! - occupied: magnitude `scale_free * max(0, eps + sdf)`, direction `+grad sdf`
//! - known(v): magnitude `|sdf - v|`, direction `sign(sdf - v) * grad sdf`
//!
//! The total relaxed cost is the sum of magnitudes. Those per-point gradients
//! are exactly the gradient of the half-squared hinge energy (when the SDF
//! gradient has unit norm), so [`CostEval`] carries both numbers: `cost` for
//! ranking and reporting, `energy` as the smooth scalar whose parameter
//! gradient `grad` is. Finite-difference checks difference `energy` in
//! trilinear SDF mode, where `grad` is exact; optimization runs on the fast
//! nearest-voxel mode.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::points::SemanticPointSet;
use crate::pose::{rot6_backprop, DegenerateRotation, PoseParam, RigidTransform};
use crate::sdf::SdfGrid;

/// Optional linear ramp of `scale_free` over the first SGD iterations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annealing {
    pub start_scale: f64,
    pub ramp_iters: u32,
}

/// Parameters of both cost functions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Target level set for free-space points, strictly negative (meters).
    pub epsilon: f64,
    /// Scale of free/occupied violations in the relaxed cost.
    pub scale_free: f64,
    /// Indicator penalty of the ground-truth cost.
    pub c_max: f64,
    /// Relative weight of known-SDF violations (the formulas above use 1).
    pub known_scale: f64,
    pub annealing: Option<Annealing>,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            epsilon: -0.01,
            scale_free: 20.0,
            c_max: 100_000.0,
            known_scale: 1.0,
            annealing: None,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epsilon >= 0.0 {
            return Err(format!("epsilon must be negative, got {}", self.epsilon));
        }
        if self.scale_free <= 0.0 {
            return Err(format!("scale_free must be positive, got {}", self.scale_free));
        }
        if self.c_max <= 1.0 {
            return Err(format!("c_max must be much larger than 1, got {}", self.c_max));
        }
        if self.known_scale <= 0.0 {
            return Err(format!("known_scale must be positive, got {}", self.known_scale));
        }
        Ok(())
    }

    /// Effective free/occupied scale at an SGD iteration: ramps linearly from
    /// `start_scale` to `scale_free` when annealing is enabled.
    pub fn scale_free_at(&self, iteration: u32) -> f64 {
        match self.annealing {
            None => self.scale_free,
            Some(a) => {
                if a.ramp_iters == 0 || iteration >= a.ramp_iters {
                    self.scale_free
                } else {
                    let f = iteration as f64 / a.ramp_iters as f64;
                    a.start_scale + (self.scale_free - a.start_scale) * f
                }
            }
        }
    }
}

/// Which SDF lookup the relaxed cost uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdfMode {
    /// Stored per-voxel value and unit gradient; fast, piecewise constant.
    Nearest,
    /// Interpolated value with the exact interpolant gradient; used by the
    /// finite-difference certification suite. Queries must stay in the grid.
    Trilinear,
}

/// One relaxed evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CostEval {
    /// Sum of per-point violation magnitudes (the reported objective).
    pub cost: f64,
    /// Half-squared hinge form; `grad` is its parameter gradient.
    pub energy: f64,
    /// Gradient in the `[t, r6]` layout of [`PoseParam::to_vec9`].
    pub grad: [f64; 9],
}

/// Ground-truth cost (exact indicator semantics).
pub fn ground_truth_cost(
    x: &SemanticPointSet,
    t: &RigidTransform,
    sdf: &SdfGrid,
    cfg: &CostConfig,
) -> f64 {
    ground_truth_cost_capped(x, t, sdf, cfg, f64::INFINITY)
}

/// Ground-truth cost with an early-exit cutoff: once the partial sum exceeds
/// `cutoff` the scan stops and the partial sum is returned. Membership tests
/// against a threshold at or below `cutoff` are unaffected.
pub fn ground_truth_cost_capped(
    x: &SemanticPointSet,
    t: &RigidTransform,
    sdf: &SdfGrid,
    cfg: &CostConfig,
    cutoff: f64,
) -> f64 {
    let mut acc = 0.0;
    for (p, v) in x.known() {
        let q = t.apply(p);
        let value = match sdf.query_in_grid(&q) {
            Some((value, _)) => value,
            None => sdf.query(&q).0,
        };
        acc += (v - value).abs();
        if acc > cutoff {
            return acc;
        }
    }
    for p in x.occupied() {
        let q = t.apply(p);
        // outside the grid is outside the object: the indicator fires
        let value = sdf.query_in_grid(&q).map_or(1.0, |(value, _)| value);
        if value >= 0.0 {
            acc += cfg.c_max;
            if acc > cutoff {
                return acc;
            }
        }
    }
    for p in x.free() {
        let q = t.apply(p);
        // outside the grid the signed distance is positive: no violation
        if let Some((value, _)) = sdf.query_in_grid(&q) {
            if value <= 0.0 {
                acc += cfg.c_max;
                if acc > cutoff {
                    return acc;
                }
            }
        }
    }
    acc
}

/// Relaxed cost and analytic gradient on the nearest-voxel SDF.
pub fn relaxed_cost(
    x: &SemanticPointSet,
    params: &PoseParam,
    sdf: &SdfGrid,
    cfg: &CostConfig,
) -> Result<CostEval, DegenerateRotation> {
    relaxed_cost_eval(x, params, sdf, cfg, None, SdfMode::Nearest)
}

/// Relaxed cost with explicit annealing iteration and SDF mode.
pub fn relaxed_cost_eval(
    x: &SemanticPointSet,
    params: &PoseParam,
    sdf: &SdfGrid,
    cfg: &CostConfig,
    iteration: Option<u32>,
    mode: SdfMode,
) -> Result<CostEval, DegenerateRotation> {
    let t = params.to_transform()?;
    let scale = iteration.map_or(cfg.scale_free, |i| cfg.scale_free_at(i));

    let mut cost = 0.0;
    let mut energy = 0.0;
    let mut grad_t = Vector3::zeros();
    let mut grad_rot = Matrix3::zeros();

    let mut accumulate = |point: &Vector3<f64>, magnitude: f64, spatial: Vector3<f64>, class_scale: f64| {
        cost += magnitude;
        energy += magnitude * magnitude / (2.0 * class_scale);
        grad_t += spatial;
        grad_rot += spatial * point.transpose();
    };

    let lookup = |q: &Vector3<f64>| -> Option<(f64, Vector3<f64>)> {
        match mode {
            SdfMode::Nearest => sdf.query_in_grid(q),
            SdfMode::Trilinear => Some(sdf.query_trilinear(q)),
        }
    };

    for (p, v) in x.known() {
        let q = t.apply(p);
        let (value, dir) = lookup(&q).unwrap_or_else(|| sdf.query(&q));
        let residual = value - v;
        let magnitude = cfg.known_scale * residual.abs();
        let spatial = dir * (cfg.known_scale * residual);
        accumulate(p, magnitude, spatial, cfg.known_scale);
    }
    for p in x.occupied() {
        let q = t.apply(p);
        let (value, dir) = lookup(&q).unwrap_or_else(|| sdf.query(&q));
        let violation = (cfg.epsilon + value).max(0.0);
        if violation > 0.0 {
            let magnitude = scale * violation;
            accumulate(p, magnitude, dir * magnitude, scale);
        }
    }
    for p in x.free() {
        let q = t.apply(p);
        // a free point outside the grid cannot violate (sdf > 0 > epsilon)
        let Some((value, dir)) = lookup(&q) else { continue };
        let violation = (cfg.epsilon - value).max(0.0);
        if violation > 0.0 {
            let magnitude = scale * violation;
            accumulate(p, magnitude, dir * (-magnitude), scale);
        }
    }

    let r6 = rot6_backprop(&params.col_a1(), &params.col_a2(), &grad_rot)?;
    Ok(CostEval {
        cost,
        energy,
        grad: [
            grad_t.x, grad_t.y, grad_t.z, r6[0], r6[1], r6[2], r6[3], r6[4], r6[5],
        ],
    })
}

/// Relaxed cost only, skipping gradient accumulation. Candidate scoring in
/// the evolutionary loops calls this many times per iteration.
pub fn relaxed_cost_value(
    x: &SemanticPointSet,
    params: &PoseParam,
    sdf: &SdfGrid,
    cfg: &CostConfig,
) -> Result<f64, DegenerateRotation> {
    let t = params.to_transform()?;
    let mut cost = 0.0;
    for (p, v) in x.known() {
        let q = t.apply(p);
        let value = match sdf.query_in_grid(&q) {
            Some((value, _)) => value,
            None => sdf.query(&q).0,
        };
        cost += cfg.known_scale * (value - v).abs();
    }
    for p in x.occupied() {
        let q = t.apply(p);
        let value = match sdf.query_in_grid(&q) {
            Some((value, _)) => value,
            None => sdf.query(&q).0,
        };
        cost += cfg.scale_free * (cfg.epsilon + value).max(0.0);
    }
    for p in x.free() {
        let q = t.apply(p);
        if let Some((value, _)) = sdf.query_in_grid(&q) {
            cost += cfg.scale_free * (cfg.epsilon - value).max(0.0);
        }
    }
    Ok(cost)
}

/// Evaluates a population of poses in parallel. Output order matches the
/// input; degenerate parameters yield per-element errors.
pub fn batch_relaxed_cost(
    x: &SemanticPointSet,
    params: &[PoseParam],
    sdf: &SdfGrid,
    cfg: &CostConfig,
) -> Vec<Result<CostEval, DegenerateRotation>> {
    params
        .par_iter()
        .map(|p| relaxed_cost(x, p, sdf, cfg))
        .collect()
}

/// Diagnostic decomposition of a relaxed evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub total: f64,
    pub free_subtotal: f64,
    pub occupied_subtotal: f64,
    pub known_subtotal: f64,
    /// Violation magnitude per free point, in observation order.
    pub free_violations: Vec<f64>,
    pub occupied_violations: Vec<f64>,
    pub known_violations: Vec<f64>,
}

pub fn cost_report(
    x: &SemanticPointSet,
    t: &RigidTransform,
    sdf: &SdfGrid,
    cfg: &CostConfig,
) -> CostReport {
    let scale = cfg.scale_free;
    let mut report = CostReport {
        total: 0.0,
        free_subtotal: 0.0,
        occupied_subtotal: 0.0,
        known_subtotal: 0.0,
        free_violations: Vec::with_capacity(x.free().len()),
        occupied_violations: Vec::with_capacity(x.occupied().len()),
        known_violations: Vec::with_capacity(x.known().len()),
    };
    for (p, v) in x.known() {
        let q = t.apply(p);
        let value = sdf.query(&q).0;
        let m = cfg.known_scale * (value - v).abs();
        report.known_subtotal += m;
        report.known_violations.push(m);
    }
    for p in x.occupied() {
        let q = t.apply(p);
        let value = sdf.query(&q).0;
        let m = scale * (cfg.epsilon + value).max(0.0);
        report.occupied_subtotal += m;
        report.occupied_violations.push(m);
    }
    for p in x.free() {
        let q = t.apply(p);
        let m = match sdf.query_in_grid(&q) {
            Some((value, _)) => scale * (cfg.epsilon - value).max(0.0),
            None => 0.0,
        };
        report.free_subtotal += m;
        report.free_violations.push(m);
    }
    report.total = report.free_subtotal + report.occupied_subtotal + report.known_subtotal;
    report
}
