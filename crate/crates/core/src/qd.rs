//! Quality-diversity registration.
//!
//! Initial poses are independently refined by Adam on the relaxed cost; the
//! refined solutions size and seed a behavior-space archive; one of two CMA
//! emitters fine-tunes the archive; the lowest-cost cells become the estimate
//! set. A gradient-free emitter and a plain-warm-start mode exist as
//! ablations.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{Archive, ArchiveError, OfferOutcome};
use crate::cmaes::CmaEs;
use crate::cost::{relaxed_cost_eval, relaxed_cost_value, CostConfig, SdfMode};
use crate::points::{SemanticPointSet, Workspace};
use crate::pose::{sample_uniform_pose, PoseParam, RigidTransform, TransformJson};
use crate::sdf::SdfGrid;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("registration needs at least 2 initial poses, got {0}")]
    TooFewStarts(usize),
    #[error("warm start produced fewer than 2 usable solutions")]
    WarmStartCollapsed,
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

/// Which optimizer refines the archive after the warm start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Gradient arborescence: CMA-ES over coefficients of the objective and
    /// measure gradients.
    CmaMega,
    /// CMA-ES directly in the 9-dim parameter space.
    CmaMe,
    /// Warm start only (ablation).
    SgdOnly,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QdConfig {
    /// Archive half-width in warm-start standard deviations.
    pub gamma: f64,
    /// Emitter iterations (n_qd).
    pub iterations: u32,
    /// Candidates per emitter iteration.
    pub batch: usize,
    /// Initial CMA step size.
    pub sigma0: f64,
    /// Adam iterations per warm-start pose.
    pub sgd_iterations: u32,
    /// Peak Adam learning rate.
    pub sgd_lr: f64,
    /// The learning rate anneals to zero and resets to the peak with this
    /// period.
    pub lr_reset_period: u32,
    /// Estimates returned (and size of the initial pose set).
    pub estimate_size: usize,
    /// Archive bins per behavior dimension.
    pub bins: usize,
    /// Include z translation in the behavior space.
    pub behavior_3d: bool,
}

impl Default for QdConfig {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            iterations: 100,
            batch: 10,
            sigma0: 0.05,
            sgd_iterations: 500,
            sgd_lr: 0.01,
            lr_reset_period: 50,
            estimate_size: 30,
            bins: 20,
            behavior_3d: false,
        }
    }
}

impl QdConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("gamma", self.gamma),
            ("sigma0", self.sigma0),
            ("sgd_lr", self.sgd_lr),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.batch < 2 {
            return Err(format!("batch must be at least 2, got {}", self.batch));
        }
        if self.estimate_size == 0 || self.bins == 0 || self.lr_reset_period == 0 {
            return Err("estimate_size, bins and lr_reset_period must be positive".into());
        }
        Ok(())
    }

    pub fn behavior_dims(&self) -> usize {
        if self.behavior_3d {
            3
        } else {
            2
        }
    }
}

struct Adam {
    m: [f64; 9],
    v: [f64; 9],
    t: u32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Self {
            m: [0.0; 9],
            v: [0.0; 9],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64; 9], grad: &[f64; 9], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..9 {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Cosine-annealed learning rate with warm restarts every `period`.
fn lr_at(peak: f64, period: u32, iteration: u32) -> f64 {
    let phase = (iteration % period) as f64 / period as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Independently optimizes each pose by Adam on the relaxed cost, returning
/// the best-seen iterate and its cost per input pose (order preserved).
///
/// A step that lands on degenerate rotation parameters is repaired by
/// re-encoding the previous iterate's rotation. Poses that are degenerate on
/// entry are returned unchanged with infinite cost.
pub fn sgd_warm_start(
    x: &SemanticPointSet,
    starts: &[PoseParam],
    sdf: &SdfGrid,
    cost_cfg: &CostConfig,
    qd: &QdConfig,
) -> Vec<(PoseParam, f64)> {
    starts
        .par_iter()
        .map(|start| {
            let Ok(mut last_rotation) = start.to_transform().map(|t| t.rotation) else {
                return (*start, f64::INFINITY);
            };
            let mut params = *start;
            let mut adam = Adam::new();
            let mut best = (*start, f64::INFINITY);
            for it in 0..qd.sgd_iterations {
                let eval = match relaxed_cost_eval(x, &params, sdf, cost_cfg, Some(it), SdfMode::Nearest)
                {
                    Ok(eval) => eval,
                    Err(_) => {
                        params.reorthonormalize(&last_rotation);
                        match relaxed_cost_eval(x, &params, sdf, cost_cfg, Some(it), SdfMode::Nearest)
                        {
                            Ok(eval) => eval,
                            Err(_) => break,
                        }
                    }
                };
                last_rotation = params
                    .to_transform()
                    .map(|t| t.rotation)
                    .unwrap_or(last_rotation);
                if eval.cost < best.1 {
                    best = (params, eval.cost);
                }
                let mut vec9 = params.to_vec9();
                adam.step(&mut vec9, &eval.grad, lr_at(qd.sgd_lr, qd.lr_reset_period, it));
                params = PoseParam::from_vec9(&vec9);
            }
            // score the final iterate too
            if let Ok(final_cost) = relaxed_cost_value(x, &params, sdf, cost_cfg) {
                if final_cost < best.1 {
                    best = (params, final_cost);
                }
            }
            best
        })
        .collect()
}

/// Per-iteration emitter statistics, used for method-comparison plots.
#[derive(Debug, Clone, Serialize)]
pub struct IterationStats {
    pub iteration: u32,
    pub filled: usize,
    pub best_cost: f64,
    /// Mean cost of the `estimate_size` best cells.
    pub mean_best_cost: f64,
    pub restarts: u32,
}

pub type QdTrace = Vec<IterationStats>;

/// Ranks candidate indices for the CMA update: new-cell discoveries first,
/// then improvements, then rejections, each tier ordered by improvement.
fn improvement_ranking(outcomes: &[(OfferOutcome, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..outcomes.len()).collect();
    let tier = |o: &OfferOutcome| {
        if o.new_cell {
            2
        } else if o.accepted {
            1
        } else {
            0
        }
    };
    idx.sort_by(|&a, &b| {
        let (oa, ca) = &outcomes[a];
        let (ob, cb) = &outcomes[b];
        tier(ob)
            .cmp(&tier(oa))
            .then(
                ob.improvement
                    .partial_cmp(&oa.improvement)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(ca.partial_cmp(cb).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.cmp(&b))
    });
    idx
}

/// Offers a candidate, mapping degenerate parameters to a rejected outcome.
fn offer_candidate(
    archive: &mut Archive,
    x: &SemanticPointSet,
    sdf: &SdfGrid,
    cost_cfg: &CostConfig,
    params_vec: &[f64; 9],
    cost: Option<f64>,
) -> (OfferOutcome, f64) {
    match cost {
        Some(c) if c.is_finite() => {
            let params = PoseParam::from_vec9(params_vec);
            (archive.offer(params, c), c)
        }
        _ => {
            let _ = (x, sdf, cost_cfg);
            (
                OfferOutcome {
                    accepted: false,
                    new_cell: false,
                    improvement: f64::NEG_INFINITY,
                },
                f64::INFINITY,
            )
        }
    }
}

const EMITTER_SIGMA_COLLAPSE: f64 = 1e-8;
const EMITTER_STALL_ITERS: u32 = 50;

fn restart_theta(
    archive: &Archive,
    workspace: &Workspace,
    rng: &mut ChaCha8Rng,
) -> PoseParam {
    match archive.random_elite(rng) {
        Some(entry) => entry.params,
        None => sample_uniform_pose(workspace, rng),
    }
}

/// Gradient-arborescence emitter: a search point follows the cost gradient
/// while CMA-ES adapts coefficients over the objective and measure gradients;
/// branched candidates populate the archive.
pub fn cma_mega(
    archive: &mut Archive,
    x: &SemanticPointSet,
    sdf: &SdfGrid,
    cost_cfg: &CostConfig,
    qd: &QdConfig,
    workspace: &Workspace,
    rng: &mut ChaCha8Rng,
) -> QdTrace {
    let coeff_dim = 1 + archive.dims(); // objective + one per measure
    let mut theta = restart_theta(archive, workspace, rng);
    let mut cma = CmaEs::new(DVector::zeros(coeff_dim), qd.sigma0, qd.batch);
    let mut stall = 0u32;
    let mut restarts = 0u32;
    let mut trace = Vec::with_capacity(qd.iterations as usize);

    for iteration in 0..qd.iterations {
        let eval = match relaxed_cost_eval(x, &theta, sdf, cost_cfg, None, SdfMode::Nearest) {
            Ok(eval) => eval,
            Err(_) => {
                theta = restart_theta(archive, workspace, rng);
                cma = CmaEs::new(DVector::zeros(coeff_dim), qd.sigma0, qd.batch);
                stall = 0;
                restarts += 1;
                trace.push(stats(iteration, archive, qd, restarts));
                continue;
            }
        };

        // branching directions: normalized descent on the objective plus the
        // constant selectors of the behavior (translation) coordinates
        let grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut directions: Vec<[f64; 9]> = Vec::with_capacity(coeff_dim);
        let mut obj_dir = [0.0; 9];
        if grad_norm > 1e-12 {
            for i in 0..9 {
                obj_dir[i] = -eval.grad[i] / grad_norm;
            }
        }
        directions.push(obj_dir);
        for d in 0..archive.dims() {
            let mut m_dir = [0.0; 9];
            m_dir[d] = 1.0; // translation components lead the parameter vector
            directions.push(m_dir);
        }

        let coeffs = cma.ask(rng);
        let theta_vec = theta.to_vec9();
        let candidates: Vec<[f64; 9]> = coeffs
            .iter()
            .map(|c| {
                let mut v = theta_vec;
                for (k, dir) in directions.iter().enumerate() {
                    for i in 0..9 {
                        v[i] += c[k] * dir[i];
                    }
                }
                v
            })
            .collect();

        let costs: Vec<Option<f64>> = candidates
            .par_iter()
            .map(|v| relaxed_cost_value(x, &PoseParam::from_vec9(v), sdf, cost_cfg).ok())
            .collect();

        let outcomes: Vec<(OfferOutcome, f64)> = candidates
            .iter()
            .zip(&costs)
            .map(|(v, c)| offer_candidate(archive, x, sdf, cost_cfg, v, *c))
            .collect();

        let ranked = improvement_ranking(&outcomes);
        cma.tell(&coeffs, &ranked);

        // move the search point by weighted recombination of the ranked steps
        let mut new_theta = theta_vec;
        for (w, &idx) in cma.weights().iter().zip(ranked.iter()) {
            for i in 0..9 {
                new_theta[i] += w * (candidates[idx][i] - theta_vec[i]);
            }
        }
        theta = PoseParam::from_vec9(&new_theta);

        if outcomes.iter().any(|(o, _)| o.accepted) {
            stall = 0;
        } else {
            stall += 1;
        }
        if cma.sigma() < EMITTER_SIGMA_COLLAPSE || stall >= EMITTER_STALL_ITERS || theta.is_degenerate()
        {
            theta = restart_theta(archive, workspace, rng);
            cma = CmaEs::new(DVector::zeros(coeff_dim), qd.sigma0, qd.batch);
            stall = 0;
            restarts += 1;
        }
        trace.push(stats(iteration, archive, qd, restarts));
    }
    trace
}

/// Gradient-free emitter: CMA-ES samples candidates directly in parameter
/// space, ranked by archive improvement.
pub fn cma_me(
    archive: &mut Archive,
    x: &SemanticPointSet,
    sdf: &SdfGrid,
    cost_cfg: &CostConfig,
    qd: &QdConfig,
    workspace: &Workspace,
    rng: &mut ChaCha8Rng,
) -> QdTrace {
    let mut theta = restart_theta(archive, workspace, rng);
    let mut cma = CmaEs::new(DVector::from_row_slice(&theta.to_vec9()), qd.sigma0, qd.batch);
    let mut stall = 0u32;
    let mut restarts = 0u32;
    let mut trace = Vec::with_capacity(qd.iterations as usize);

    for iteration in 0..qd.iterations {
        let samples = cma.ask(rng);
        let candidates: Vec<[f64; 9]> = samples
            .iter()
            .map(|s| std::array::from_fn(|i| s[i]))
            .collect();
        let costs: Vec<Option<f64>> = candidates
            .par_iter()
            .map(|v| relaxed_cost_value(x, &PoseParam::from_vec9(v), sdf, cost_cfg).ok())
            .collect();
        let outcomes: Vec<(OfferOutcome, f64)> = candidates
            .iter()
            .zip(&costs)
            .map(|(v, c)| offer_candidate(archive, x, sdf, cost_cfg, v, *c))
            .collect();

        let ranked = improvement_ranking(&outcomes);
        cma.tell(&samples, &ranked);

        if outcomes.iter().any(|(o, _)| o.accepted) {
            stall = 0;
        } else {
            stall += 1;
        }
        if cma.sigma() < EMITTER_SIGMA_COLLAPSE || stall >= EMITTER_STALL_ITERS {
            theta = restart_theta(archive, workspace, rng);
            cma = CmaEs::new(DVector::from_row_slice(&theta.to_vec9()), qd.sigma0, qd.batch);
            stall = 0;
            restarts += 1;
        }
        trace.push(stats(iteration, archive, qd, restarts));
    }
    trace
}

fn stats(iteration: u32, archive: &Archive, qd: &QdConfig, restarts: u32) -> IterationStats {
    IterationStats {
        iteration,
        filled: archive.filled(),
        best_cost: archive.best_cost().unwrap_or(f64::INFINITY),
        mean_best_cost: archive.mean_best_cost(qd.estimate_size),
        restarts,
    }
}

/// One returned hypothesis.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub params: PoseParam,
    pub transform: RigidTransform,
    pub cost: f64,
    pub cell: [u32; 3],
}

/// The hypothesis set: lowest-cost archive cells, one estimate per cell.
#[derive(Debug, Clone)]
pub struct EstimateSet {
    pub estimates: Vec<Estimate>,
    /// Fewer filled cells existed than requested.
    pub shortfall: bool,
}

impl EstimateSet {
    pub fn best(&self) -> Option<&Estimate> {
        self.estimates
            .iter()
            .min_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap_or(std::cmp::Ordering::Equal))
    }

    pub fn transforms(&self) -> Vec<RigidTransform> {
        self.estimates.iter().map(|e| e.transform).collect()
    }

    pub fn params(&self) -> Vec<PoseParam> {
        self.estimates.iter().map(|e| e.params).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "shortfall": self.shortfall,
            "estimates": self.estimates.iter().map(|e| {
                let t = TransformJson::from(&e.transform);
                serde_json::json!({
                    "R": t.r,
                    "t": t.t,
                    "cost": e.cost,
                    "cell": [e.cell[0], e.cell[1], e.cell[2]],
                })
            }).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, String> {
        let estimates = value
            .get("estimates")
            .and_then(|e| e.as_array())
            .ok_or("missing 'estimates' array")?;
        let shortfall = value
            .get("shortfall")
            .and_then(|s| s.as_bool())
            .unwrap_or(false);
        let mut out = Vec::with_capacity(estimates.len());
        for entry in estimates {
            let parsed: TransformJson = serde_json::from_value(
                serde_json::json!({"R": entry.get("R"), "t": entry.get("t")}),
            )
            .map_err(|e| e.to_string())?;
            let transform = RigidTransform::from(&parsed);
            let cost = entry
                .get("cost")
                .and_then(|c| c.as_f64())
                .ok_or("missing cost")?;
            let cell = entry
                .get("cell")
                .and_then(|c| c.as_array())
                .map(|c| {
                    let mut out = [0u32; 3];
                    for (slot, v) in out.iter_mut().zip(c) {
                        *slot = v.as_u64().unwrap_or(0) as u32;
                    }
                    out
                })
                .unwrap_or([0; 3]);
            out.push(Estimate {
                params: PoseParam::from(transform),
                transform,
                cost,
                cell,
            });
        }
        Ok(Self {
            estimates: out,
            shortfall,
        })
    }
}

/// Full registration outcome, including the archive for dumps and the
/// per-iteration trace for method comparisons.
pub struct RegisterOutcome {
    pub estimates: EstimateSet,
    pub archive: Archive,
    pub trace: QdTrace,
}

/// Registers the observation: warm start, archive sizing and seeding with the
/// refined poses plus the carryover set (re-scored on the current
/// observation), emitter refinement, then extraction of the lowest-cost
/// cells.
pub fn register(
    x: &SemanticPointSet,
    starts: &[PoseParam],
    carryover: &[PoseParam],
    sdf: &SdfGrid,
    cost_cfg: &CostConfig,
    qd: &QdConfig,
    optimizer: Optimizer,
    workspace: &Workspace,
    rng: &mut ChaCha8Rng,
) -> Result<RegisterOutcome, RegisterError> {
    if starts.len() < 2 {
        return Err(RegisterError::TooFewStarts(starts.len()));
    }
    let warm = sgd_warm_start(x, starts, sdf, cost_cfg, qd);
    let usable: Vec<(PoseParam, f64)> = warm
        .into_iter()
        .filter(|(_, c)| c.is_finite())
        .collect();
    if usable.len() < 2 {
        return Err(RegisterError::WarmStartCollapsed);
    }

    let mut archive = Archive::from_solutions(&usable, qd.gamma, qd.bins, qd.behavior_dims())?;

    let mut seeds = usable;
    for p in carryover {
        // carryover solutions cannot keep stale costs across data updates
        if let Ok(cost) = relaxed_cost_value(x, p, sdf, cost_cfg) {
            seeds.push((*p, cost));
        }
    }
    archive.seed(&seeds);

    let trace = match optimizer {
        Optimizer::CmaMega => cma_mega(&mut archive, x, sdf, cost_cfg, qd, workspace, rng),
        Optimizer::CmaMe => cma_me(&mut archive, x, sdf, cost_cfg, qd, workspace, rng),
        Optimizer::SgdOnly => Vec::new(),
    };

    // the estimate set has the size of the initial pose set
    let wanted = starts.len();
    let best = archive.best_cells(wanted);
    let estimates: Vec<Estimate> = best
        .iter()
        .filter_map(|(idx, entry)| {
            let transform = entry.params.to_transform().ok()?;
            Some(Estimate {
                params: entry.params,
                transform,
                cost: entry.cost,
                cell: archive.coords_of_flat(*idx),
            })
        })
        .collect();
    let shortfall = estimates.len() < wanted;
    Ok(RegisterOutcome {
        estimates: EstimateSet {
            estimates,
            shortfall,
        },
        archive,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::points::synthetic_point_set;
    use crate::shapes;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn sphere_grid() -> SdfGrid {
        let mesh = Arc::new(shapes::icosphere(0.06, 2));
        SdfGrid::build(mesh, 0.01, 0.05).unwrap()
    }

    /// Contacts on a 0.06-radius sphere centered at the origin, plus free
    /// space around it.
    fn sphere_scene() -> SemanticPointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut known = Vec::new();
        for _ in 0..6 {
            known.push((crate::pose::sample_unit_vector(&mut rng) * 0.06, 0.0));
        }
        let mut free = Vec::new();
        for _ in 0..300 {
            let p = crate::pose::sample_unit_vector(&mut rng)
                * rng.random_range(0.09..0.2);
            free.push(p);
        }
        synthetic_point_set(free, vec![], known)
    }

    fn workspace() -> Workspace {
        Workspace::new(Vector3::repeat(-0.2), Vector3::repeat(0.2)).unwrap()
    }

    fn quick_qd() -> QdConfig {
        QdConfig {
            sgd_iterations: 120,
            iterations: 40,
            estimate_size: 8,
            ..QdConfig::default()
        }
    }

    #[test]
    fn lr_schedule_resets_to_peak() {
        assert_eq!(lr_at(0.01, 50, 0), 0.01);
        assert_eq!(lr_at(0.01, 50, 50), 0.01);
        assert!(lr_at(0.01, 50, 49) < 0.001);
        assert!(lr_at(0.01, 50, 25) < 0.01);
    }

    #[test]
    fn warm_start_never_worsens_and_zero_cost_is_kept() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let cfg = CostConfig::default();
        let qd = quick_qd();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ws = workspace();
        let mut starts: Vec<PoseParam> =
            (0..6).map(|_| sample_uniform_pose(&ws, &mut rng)).collect();
        // identity is the true pose here (object frame == world frame):
        // contacts are exactly on the surface
        starts.push(PoseParam::identity());
        let initial: Vec<f64> = starts
            .iter()
            .map(|p| relaxed_cost_value(&x, p, &grid, &cfg).unwrap())
            .collect();
        let refined = sgd_warm_start(&x, &starts, &grid, &cfg, &qd);
        assert_eq!(refined.len(), starts.len());
        for ((_, cost), init) in refined.iter().zip(&initial) {
            assert!(cost <= init, "refined {cost} > initial {init}");
        }
    }

    #[test]
    fn warm_start_is_deterministic() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let cfg = CostConfig::default();
        let qd = quick_qd();
        let ws = workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let starts: Vec<PoseParam> = (0..4).map(|_| sample_uniform_pose(&ws, &mut rng)).collect();
        let a = sgd_warm_start(&x, &starts, &grid, &cfg, &qd);
        let b = sgd_warm_start(&x, &starts, &grid, &cfg, &qd);
        for (ea, eb) in a.iter().zip(&b) {
            assert_eq!(ea.0, eb.0);
            assert_eq!(ea.1, eb.1);
        }
    }

    #[test]
    fn degenerate_start_reports_infinite_cost() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let degenerate = PoseParam::new(Vector3::zeros(), [1.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let out = sgd_warm_start(&x, &[degenerate], &grid, &CostConfig::default(), &quick_qd());
        assert!(out[0].1.is_infinite());
    }

    #[test]
    fn zero_iterations_leave_archive_unchanged() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let cfg = CostConfig::default();
        let qd = QdConfig {
            iterations: 0,
            ..quick_qd()
        };
        let ws = workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sols = vec![
            (sample_uniform_pose(&ws, &mut rng), 5.0),
            (sample_uniform_pose(&ws, &mut rng), 7.0),
        ];
        let mut archive = Archive::from_solutions(&sols, 3.0, 20, 2).unwrap();
        archive.seed(&sols);
        let before: Vec<(usize, f64)> = archive.cells().map(|(i, e)| (i, e.cost)).collect();
        cma_mega(&mut archive, &x, &grid, &cfg, &qd, &ws, &mut rng);
        let after: Vec<(usize, f64)> = archive.cells().map(|(i, e)| (i, e.cost)).collect();
        assert_eq!(before, after);
        cma_me(&mut archive, &x, &grid, &cfg, &qd, &ws, &mut rng);
        let after_me: Vec<(usize, f64)> = archive.cells().map(|(i, e)| (i, e.cost)).collect();
        assert_eq!(before, after_me);
    }

    #[test]
    fn emitters_never_raise_best_cost_and_fill_cells() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let cfg = CostConfig::default();
        let qd = quick_qd();
        let ws = workspace();
        for optimizer in [Optimizer::CmaMega, Optimizer::CmaMe] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let starts: Vec<PoseParam> =
                (0..6).map(|_| sample_uniform_pose(&ws, &mut rng)).collect();
            let out = register(&x, &starts, &[], &grid, &cfg, &qd, optimizer, &ws, &mut rng)
                .unwrap();
            let mut last_best = f64::INFINITY;
            let mut last_filled = 0usize;
            for s in &out.trace {
                assert!(s.best_cost <= last_best + 1e-12);
                assert!(s.filled >= last_filled);
                last_best = s.best_cost;
                last_filled = s.filled;
            }
            assert!(out.archive.filled() >= starts.len().min(out.archive.bins()));
        }
    }

    #[test]
    fn seeding_dominance_and_true_pose_survives() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let cfg = CostConfig::default();
        let qd = quick_qd();
        let ws = workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let starts: Vec<PoseParam> = (0..5).map(|_| sample_uniform_pose(&ws, &mut rng)).collect();
        // carryover contains the true pose
        let carryover = vec![PoseParam::identity()];
        let true_cost = relaxed_cost_value(&x, &PoseParam::identity(), &grid, &cfg).unwrap();
        let out = register(
            &x,
            &starts,
            &carryover,
            &grid,
            &cfg,
            &qd,
            Optimizer::CmaMega,
            &ws,
            &mut rng,
        )
        .unwrap();
        let best = out.estimates.best().unwrap();
        assert!(
            best.cost <= true_cost + 1e-12,
            "best {} vs seeded true pose {}",
            best.cost,
            true_cost
        );
    }

    #[test]
    fn register_is_deterministic_and_cells_distinct() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let cfg = CostConfig::default();
        let qd = quick_qd();
        let ws = workspace();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let starts: Vec<PoseParam> =
                (0..6).map(|_| sample_uniform_pose(&ws, &mut rng)).collect();
            register(&x, &starts, &[], &grid, &cfg, &qd, Optimizer::CmaMega, &ws, &mut rng)
                .unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.estimates.estimates.len(), b.estimates.estimates.len());
        for (ea, eb) in a.estimates.estimates.iter().zip(&b.estimates.estimates) {
            assert_eq!(ea.params, eb.params);
            assert_eq!(ea.cost, eb.cost);
            assert_eq!(ea.cell, eb.cell);
        }
        // all estimates come from distinct cells
        let mut cells: Vec<[u32; 3]> = a.estimates.estimates.iter().map(|e| e.cell).collect();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), a.estimates.estimates.len());
    }

    #[test]
    fn too_few_starts_rejected() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let ws = workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let starts = vec![PoseParam::identity()];
        assert!(matches!(
            register(
                &x,
                &starts,
                &[],
                &grid,
                &CostConfig::default(),
                &quick_qd(),
                Optimizer::SgdOnly,
                &ws,
                &mut rng
            ),
            Err(RegisterError::TooFewStarts(1))
        ));
    }

    #[test]
    fn sgd_only_matches_emitterless_archive() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let cfg = CostConfig::default();
        let qd = quick_qd();
        let ws = workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let starts: Vec<PoseParam> = (0..6).map(|_| sample_uniform_pose(&ws, &mut rng)).collect();
        let out = register(&x, &starts, &[], &grid, &cfg, &qd, Optimizer::SgdOnly, &ws, &mut rng)
            .unwrap();
        assert!(out.trace.is_empty());
        // archive holds exactly the warm-start solutions (collisions allowed)
        assert!(out.archive.filled() <= starts.len());
        assert!(out.archive.filled() >= 2);
    }

    #[test]
    fn estimate_set_json_round_trip() {
        let grid = sphere_grid();
        let x = sphere_scene();
        let cfg = CostConfig::default();
        let qd = quick_qd();
        let ws = workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let starts: Vec<PoseParam> = (0..4).map(|_| sample_uniform_pose(&ws, &mut rng)).collect();
        let out = register(&x, &starts, &[], &grid, &cfg, &qd, Optimizer::CmaMe, &ws, &mut rng)
            .unwrap();
        let json = out.estimates.to_json();
        let text = serde_json::to_string_pretty(&json).unwrap();
        let parsed = EstimateSet::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(parsed.estimates.len(), out.estimates.estimates.len());
        for (a, b) in parsed.estimates.iter().zip(&out.estimates.estimates) {
            assert!((a.cost - b.cost).abs() < 1e-12);
            assert_eq!(a.cell, b.cell);
            assert!((a.transform.translation - b.transform.translation).norm() < 1e-12);
        }
    }
}
