//! Iterative registration across probes.
//!
//! The first registration starts from poses drawn uniformly over the
//! workspace and SO(3). Afterwards each registration seeds the archive with
//! the previous estimate set and restarts the warm start from Gaussian
//! perturbations of the previous best estimate, which helps escape stale
//! local minima as the observation grows. The object is assumed stationary
//! across probes.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::cost::CostConfig;
use crate::points::{SemanticPointSet, Workspace};
use crate::pose::{
    normal_sample, sample_uniform_pose, sample_unit_vector, PoseParam, RigidTransform,
};
use crate::qd::{register, EstimateSet, Optimizer, QdConfig, RegisterError, RegisterOutcome};
use crate::sdf::SdfGrid;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    /// Translation perturbation, meters per axis.
    pub sigma_t: f64,
    /// Rotation perturbation: the angle of a random-axis rotation, radians.
    pub sigma_r: f64,
    /// Initial pose count (and the estimate-set size).
    pub estimate_size: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            sigma_t: 0.05,
            sigma_r: 0.3,
            estimate_size: 30,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.sigma_t < 0.0 || self.sigma_r < 0.0 {
            return Err("perturbation noise must be non-negative".into());
        }
        if self.estimate_size < 2 {
            return Err("estimate_size must be at least 2".into());
        }
        Ok(())
    }
}

/// `n` perturbations of a transform: translation plus `N(0, sigma_t^2 I)`,
/// rotation left-multiplied by a random-axis rotation with angle
/// `N(0, sigma_r^2)` via the exponential map.
pub fn perturb_initialization<R: Rng>(
    base: &RigidTransform,
    n: usize,
    cfg: &OnlineConfig,
    rng: &mut R,
) -> Vec<PoseParam> {
    (0..n)
        .map(|_| {
            let dt = Vector3::new(
                normal_sample(rng) * cfg.sigma_t,
                normal_sample(rng) * cfg.sigma_t,
                normal_sample(rng) * cfg.sigma_t,
            );
            let angle = normal_sample(rng) * cfg.sigma_r;
            let axis = sample_unit_vector(rng);
            let delta = RigidTransform::from_axis_angle(&axis, angle);
            PoseParam::from(RigidTransform::new(
                delta.rotation * base.rotation,
                base.translation + dt,
            ))
        })
        .collect()
}

/// One emitted estimate set plus bookkeeping.
#[derive(Debug, Clone)]
pub struct SessionStep {
    pub probe_index: u32,
    pub estimates: EstimateSet,
    pub best_cost: f64,
    /// The observation was empty; the previous estimates were re-emitted.
    pub skipped: bool,
    /// (free, occupied, known) sizes of the observation registered against.
    pub counts: (usize, usize, usize),
}

/// Loop state of the online update.
pub struct Session {
    online: OnlineConfig,
    qd: QdConfig,
    cost: CostConfig,
    optimizer: Optimizer,
    workspace: Workspace,
    rng: ChaCha8Rng,
    starts: Vec<PoseParam>,
    carryover: Vec<PoseParam>,
    last: Option<EstimateSet>,
    probe_counter: u32,
}

impl Session {
    pub fn new(
        online: OnlineConfig,
        qd: QdConfig,
        cost: CostConfig,
        optimizer: Optimizer,
        workspace: Workspace,
        seed: u64,
    ) -> Self {
        Self {
            online,
            qd,
            cost,
            optimizer,
            workspace,
            rng: ChaCha8Rng::seed_from_u64(seed),
            starts: Vec::new(),
            carryover: Vec::new(),
            last: None,
            probe_counter: 0,
        }
    }

    /// Registers one observation update and advances the loop state. An
    /// empty observation skips registration and re-emits the previous
    /// estimates flagged as skipped.
    pub fn step(&mut self, x: &SemanticPointSet, sdf: &SdfGrid) -> Result<SessionStep, RegisterError> {
        let probe_index = self.probe_counter;
        self.probe_counter += 1;
        if x.is_empty() {
            let estimates = self.last.clone().unwrap_or(EstimateSet {
                estimates: Vec::new(),
                shortfall: true,
            });
            let best_cost = estimates.best().map_or(f64::INFINITY, |e| e.cost);
            return Ok(SessionStep {
                probe_index,
                estimates,
                best_cost,
                skipped: true,
                counts: (0, 0, 0),
            });
        }

        if self.starts.is_empty() {
            self.starts = (0..self.online.estimate_size)
                .map(|_| sample_uniform_pose(&self.workspace, &mut self.rng))
                .collect();
        }

        let RegisterOutcome { estimates, .. } = register(
            x,
            &self.starts,
            &self.carryover,
            sdf,
            &self.cost,
            &self.qd,
            self.optimizer,
            &self.workspace,
            &mut self.rng,
        )?;

        self.carryover = estimates.params();
        let best = estimates.best().expect("registration returns at least one estimate");
        let best_cost = best.cost;
        self.starts = perturb_initialization(
            &best.transform,
            self.online.estimate_size,
            &self.online,
            &mut self.rng,
        );
        self.last = Some(estimates.clone());
        Ok(SessionStep {
            probe_index,
            estimates,
            best_cost,
            skipped: false,
            counts: x.counts(),
        })
    }
}

/// Runs a whole probe stream through a fresh session.
pub fn run_session<'a>(
    observations: impl IntoIterator<Item = &'a SemanticPointSet>,
    sdf: &SdfGrid,
    online: OnlineConfig,
    qd: QdConfig,
    cost: CostConfig,
    optimizer: Optimizer,
    workspace: Workspace,
    seed: u64,
) -> Result<Vec<SessionStep>, RegisterError> {
    let mut session = Session::new(online, qd, cost, optimizer, workspace, seed);
    let mut steps = Vec::new();
    for x in observations {
        steps.push(session.step(x, sdf)?);
    }
    Ok(steps)
}
