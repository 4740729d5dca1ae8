//! Ground-truth plausible sets and the diversity score.
//!
//! The plausible set is computed by brute force: a translation grid around
//! the true transform crossed with uniformly sampled rotations, every
//! candidate scored with the discrete ground-truth cost and kept when it is
//! within `delta` of the true transform's cost. The diversity score compares
//! an estimate set against the plausible set with the Chamfer transform
//! distance:
//!
//! - coverage: mean over plausible transforms of the distance to the nearest
//!   estimate (penalizes missing modes);
//! - plausibility: mean over estimates of the distance to the nearest
//!   plausible transform (penalizes implausible estimates);
//! - their sum, lower is better.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cost::{ground_truth_cost, ground_truth_cost_capped, CostConfig};
use crate::points::SemanticPointSet;
use crate::pose::{sample_uniform_rotation, RigidTransform, TransformJson};
use crate::sdf::SdfGrid;

const CACHE_MAGIC: &[u8; 4] = b"PSET";
const CACHE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("delta must be positive, got {0}")]
    BadDelta(f64),
    #[error("diversity score is undefined for an empty {0} set")]
    EmptySet(&'static str),
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad plausible-set cache: {0}")]
    BadCache(String),
}

/// Suboptimality thresholds for the standard evaluation objects, keyed by
/// name.
pub fn named_delta(object: &str) -> Option<f64> {
    match object {
        "real-drill" => Some(0.001),
        "real-mustard" => Some(0.0003),
        "sim-drill" => Some(0.001),
        "sim-mustard" => Some(0.0003),
        "sim-hammer" => Some(0.001),
        "sim-cracker" => Some(0.0005),
        "sim-spam" => Some(0.0003),
        "sim-clamp" => Some(0.0007),
        _ => None,
    }
}

/// Translation offset grid around the true transform.
#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub cells: [u32; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            min: [-0.1, -0.2, 0.0],
            max: [0.15, 0.2, 0.1],
            cells: [15, 15, 15],
        }
    }
}

impl GridSpec {
    /// Same spans at 9 cells per dimension, for cheaper evaluation runs.
    pub fn reduced() -> Self {
        Self {
            cells: [9, 9, 9],
            ..Self::default()
        }
    }

    /// Offsets at the cell centers, x fastest.
    pub fn offsets(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::new();
        for k in 0..self.cells[2] {
            for j in 0..self.cells[1] {
                for i in 0..self.cells[0] {
                    let f = |d: usize, idx: u32| {
                        self.min[d]
                            + (idx as f64 + 0.5) * (self.max[d] - self.min[d])
                                / self.cells[d] as f64
                    };
                    out.push(Vector3::new(f(0, i), f(1, j), f(2, k)));
                }
            }
        }
        out
    }
}

/// Transforms within `delta` of the true transform's ground-truth cost.
#[derive(Debug, Clone)]
pub struct PlausibleSet {
    pub transforms: Vec<RigidTransform>,
    pub delta: f64,
    /// Ground-truth cost of the true transform.
    pub baseline_cost: f64,
}

/// Membership predicate shared by the brute-force sweep and direct checks.
pub fn is_plausible(
    x: &SemanticPointSet,
    t: &RigidTransform,
    sdf: &SdfGrid,
    baseline: f64,
    delta: f64,
    cfg: &CostConfig,
) -> bool {
    let cutoff = baseline + delta;
    ground_truth_cost_capped(x, t, sdf, cfg, cutoff) - baseline < delta
}

/// Brute-force plausible set around `t_star`: every translation-grid offset
/// combined with every sampled rotation, plus `extra_candidates`, all scored
/// with the ground-truth cost. `t_star` itself is always a member.
#[allow(clippy::too_many_arguments)]
pub fn compute_plausible_set(
    x: &SemanticPointSet,
    t_star: &RigidTransform,
    sdf: &SdfGrid,
    delta: f64,
    grid: &GridSpec,
    n_rotations: usize,
    rng: &mut ChaCha8Rng,
    extra_candidates: &[RigidTransform],
    cfg: &CostConfig,
) -> Result<PlausibleSet, EvalError> {
    if delta <= 0.0 {
        return Err(EvalError::BadDelta(delta));
    }
    let baseline = ground_truth_cost(x, t_star, sdf, cfg);
    let rotations: Vec<Matrix3<f64>> =
        (0..n_rotations).map(|_| sample_uniform_rotation(rng)).collect();
    let offsets = grid.offsets();

    // evaluation-order speedup: free points nearest the true surface violate
    // first for near-miss candidates, so the capped scan exits sooner; the
    // sum (and thus membership) is order-independent
    let x = reorder_free_by_truth_proximity(x, t_star, sdf);
    let x = &x;

    let mut transforms = vec![*t_star];
    for t in extra_candidates {
        if is_plausible(x, t, sdf, baseline, delta, cfg) {
            transforms.push(*t);
        }
    }

    // candidate index = offset-major, rotation-minor; chunked evaluation
    // keeps the retained members in deterministic order
    let total = offsets.len() * rotations.len();
    const CHUNK: usize = 1_000_000;
    let mut start = 0usize;
    while start < total {
        let end = (start + CHUNK).min(total);
        let mut members: Vec<RigidTransform> = (start..end)
            .into_par_iter()
            .filter_map(|idx| {
                let off = offsets[idx / rotations.len()];
                let rot = rotations[idx % rotations.len()];
                let t = RigidTransform::new(rot, t_star.translation + off);
                is_plausible(x, &t, sdf, baseline, delta, cfg).then_some(t)
            })
            .collect();
        transforms.append(&mut members);
        start = end;
    }

    Ok(PlausibleSet {
        transforms,
        delta,
        baseline_cost: baseline,
    })
}

fn reorder_free_by_truth_proximity(
    x: &SemanticPointSet,
    t_star: &RigidTransform,
    sdf: &SdfGrid,
) -> SemanticPointSet {
    let mut indexed: Vec<(f64, &Vector3<f64>)> = x
        .free()
        .iter()
        .map(|p| (sdf.query(&t_star.apply(p)).0.abs(), p))
        .collect();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    crate::points::synthetic_point_set(
        indexed.into_iter().map(|(_, p)| *p).collect(),
        x.occupied().to_vec(),
        x.known().to_vec(),
    )
}

/// Coverage, plausibility, and their sum. All in meters squared.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PdScore {
    pub coverage: f64,
    pub plausibility: f64,
    pub plausible_diversity: f64,
}

/// A transformed surface cloud in coordinate-planar layout, so the
/// nearest-neighbor scans compile to straight-line vectorizable loops.
struct Cloud {
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
}

impl Cloud {
    fn from_transform(t: &RigidTransform, surface_pts: &[Vector3<f64>]) -> Self {
        let n = surface_pts.len();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for p in surface_pts {
            let q = t.apply(p);
            xs.push(q.x);
            ys.push(q.y);
            zs.push(q.z);
        }
        Self { xs, ys, zs }
    }

    fn len(&self) -> usize {
        self.xs.len()
    }

    #[inline]
    fn nearest_sq(&self, px: f64, py: f64, pz: f64) -> f64 {
        let n = self.xs.len();
        let chunks = n / 4 * 4;
        let mut best = [f64::INFINITY; 4];
        let (xs, ys, zs) = (&self.xs[..n], &self.ys[..n], &self.zs[..n]);
        let mut i = 0;
        // four independent min lanes keep the loop branchless and pipelined
        while i < chunks {
            for lane in 0..4 {
                let dx = xs[i + lane] - px;
                let dy = ys[i + lane] - py;
                let dz = zs[i + lane] - pz;
                best[lane] = best[lane].min(dx * dx + dy * dy + dz * dz);
            }
            i += 4;
        }
        let mut out = best[0].min(best[1]).min(best[2].min(best[3]));
        while i < n {
            let dx = xs[i] - px;
            let dy = ys[i] - py;
            let dz = zs[i] - pz;
            out = out.min(dx * dx + dy * dy + dz * dz);
            i += 1;
        }
        out
    }
}

/// Chamfer with an abandon threshold: returns infinity as soon as the
/// running value provably exceeds `cap`. Below the cap the result equals
/// [`crate::pose::chamfer`] exactly, so minima computed with a shrinking cap
/// are exact.
fn chamfer_capped(a: &Cloud, b: &Cloud, cap: f64) -> f64 {
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let abort1 = cap * na;
    let mut s1 = 0.0;
    for i in 0..a.len() {
        s1 += b.nearest_sq(a.xs[i], a.ys[i], a.zs[i]);
        if s1 > abort1 {
            return f64::INFINITY;
        }
    }
    let m1 = s1 / na;
    let abort2 = (cap - m1) * nb;
    let mut s2 = 0.0;
    for i in 0..b.len() {
        s2 += a.nearest_sq(b.xs[i], b.ys[i], b.zs[i]);
        if s2 > abort2 {
            return f64::INFINITY;
        }
    }
    m1 + s2 / nb
}

/// Scores an estimate set against the plausible set over shared surface
/// samples.
///
/// Both directions compute an exact minimum per query with two prunings that
/// never change the result: candidates are visited nearest-centroid first
/// under a Chamfer lower bound (all clouds are the same rigidly moved sample
/// set, so a centroid gap `g > 2r` implies Chamfer at least `2 (g - 2r)^2`,
/// and once that bound passes the best value the remaining, farther
/// candidates are skipped), and each evaluation abandons once it provably
/// exceeds the best value so far.
pub fn plausible_diversity(
    plausible: &[RigidTransform],
    estimates: &[RigidTransform],
    surface_pts: &[Vector3<f64>],
) -> Result<PdScore, EvalError> {
    if plausible.is_empty() {
        return Err(EvalError::EmptySet("plausible"));
    }
    if estimates.is_empty() {
        return Err(EvalError::EmptySet("estimate"));
    }
    let centroid = surface_pts.iter().sum::<Vector3<f64>>() / surface_pts.len() as f64;
    let radius = surface_pts
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0f64, f64::max);
    let estimate_clouds: Vec<Cloud> = estimates
        .iter()
        .map(|t| Cloud::from_transform(t, surface_pts))
        .collect();
    let estimate_centroids: Vec<Vector3<f64>> =
        estimates.iter().map(|t| t.apply(&centroid)).collect();
    let member_centroids: Vec<Vector3<f64>> =
        plausible.iter().map(|t| t.apply(&centroid)).collect();

    let proximity_order = |centroids: &[Vector3<f64>], c: &Vector3<f64>| -> Vec<usize> {
        let mut order: Vec<usize> = (0..centroids.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (centroids[a] - c).norm_squared();
            let db = (centroids[b] - c).norm_squared();
            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    };
    let lower_bound = |gap: f64| {
        if gap > 2.0 * radius {
            2.0 * (gap - 2.0 * radius).powi(2)
        } else {
            0.0
        }
    };

    // coverage: nearest estimate per plausible member
    let member_mins: Vec<f64> = plausible
        .par_iter()
        .zip(member_centroids.par_iter())
        .map(|(p, c)| {
            let cloud = Cloud::from_transform(p, surface_pts);
            let mut best = f64::INFINITY;
            for j in proximity_order(&estimate_centroids, c) {
                let gap = (estimate_centroids[j] - c).norm();
                if lower_bound(gap) >= best {
                    break;
                }
                let d = chamfer_capped(&cloud, &estimate_clouds[j], best);
                if d < best {
                    best = d;
                }
            }
            best
        })
        .collect();
    let coverage = member_mins.iter().sum::<f64>() / plausible.len() as f64;

    // plausibility: nearest plausible member per estimate, member clouds
    // transformed on the fly
    let estimate_mins: Vec<f64> = estimate_clouds
        .par_iter()
        .zip(estimate_centroids.par_iter())
        .map(|(cloud, c)| {
            let mut best = f64::INFINITY;
            for j in proximity_order(&member_centroids, c) {
                let gap = (member_centroids[j] - c).norm();
                if lower_bound(gap) >= best {
                    break;
                }
                let member_cloud = Cloud::from_transform(&plausible[j], surface_pts);
                let d = chamfer_capped(cloud, &member_cloud, best);
                if d < best {
                    best = d;
                }
            }
            best
        })
        .collect();
    let plausibility = estimate_mins.iter().sum::<f64>() / estimates.len() as f64;

    Ok(PdScore {
        coverage,
        plausibility,
        plausible_diversity: coverage + plausibility,
    })
}

impl PlausibleSet {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "delta": self.delta,
            "baseline_cost": self.baseline_cost,
            "transforms": self.transforms.iter().map(|t| {
                serde_json::to_value(TransformJson::from(t)).unwrap()
            }).collect::<Vec<_>>(),
        })
    }

    /// File name for a cached set, keyed by scene content, delta, and the
    /// rotation-sampling seed.
    pub fn cache_file_name(scene_hash: &[u8; 32], delta: f64, seed: u64) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(scene_hash);
        h.update(delta.to_le_bytes());
        h.update(seed.to_le_bytes());
        let digest = h.finalize();
        let hex: String = digest.iter().take(16).map(|b| format!("{b:02x}")).collect();
        format!("{hex}.pset")
    }

    pub fn save(
        &self,
        path: impl AsRef<Path>,
        scene_hash: &[u8; 32],
        seed: u64,
    ) -> Result<(), EvalError> {
        let mut buf = Vec::with_capacity(58 + self.transforms.len() * 96);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(scene_hash);
        buf.extend_from_slice(&self.delta.to_le_bytes());
        buf.extend_from_slice(&self.baseline_cost.to_le_bytes());
        buf.extend_from_slice(&seed.to_le_bytes());
        buf.extend_from_slice(&(self.transforms.len() as u32).to_le_bytes());
        for t in &self.transforms {
            let j = TransformJson::from(t);
            for v in j.r.iter().chain(j.t.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Loads a cached set along with the scene hash and seed it was computed
    /// under; the caller decides whether those match its scene.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, [u8; 32], u64), EvalError> {
        let bytes = std::fs::read(path)?;
        let bad = |m: &str| EvalError::BadCache(m.to_string());
        if bytes.len() < 66 {
            return Err(bad("file too short"));
        }
        if &bytes[0..4] != CACHE_MAGIC {
            return Err(bad("wrong magic"));
        }
        if u16::from_le_bytes(bytes[4..6].try_into().unwrap()) != CACHE_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut scene_hash = [0u8; 32];
        scene_hash.copy_from_slice(&bytes[6..38]);
        let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let delta = f64_at(38);
        let baseline_cost = f64_at(46);
        let seed = u64::from_le_bytes(bytes[54..62].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[62..66].try_into().unwrap()) as usize;
        if bytes.len() != 66 + count * 96 {
            return Err(bad("length mismatch"));
        }
        let mut transforms = Vec::with_capacity(count);
        for i in 0..count {
            let base = 66 + i * 96;
            let mut vals = [0.0f64; 12];
            for (k, v) in vals.iter_mut().enumerate() {
                *v = f64_at(base + k * 8);
            }
            let j = TransformJson {
                r: vals[0..9].try_into().unwrap(),
                t: vals[9..12].try_into().unwrap(),
            };
            transforms.push(RigidTransform::from(&j));
        }
        Ok((
            Self {
                transforms,
                delta,
                baseline_cost,
            },
            scene_hash,
            seed,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::points::synthetic_point_set;
    use crate::pose::{sample_uniform_pose, transform_distance};
    use crate::points::Workspace;
    use crate::shapes;
    use rand::Rng;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn random_transforms(n: usize, seed: u64) -> Vec<RigidTransform> {
        let ws = Workspace::new(Vector3::repeat(-0.2), Vector3::repeat(0.2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| sample_uniform_pose(&ws, &mut rng).to_transform().unwrap())
            .collect()
    }

    fn surface_points(seed: u64) -> Vec<Vector3<f64>> {
        let mesh = shapes::box_mesh(Vector3::new(0.1, 0.15, 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mesh.sample_surface(50, &mut rng)
    }

    /// Independent double-loop oracle over `transform_distance`.
    fn oracle_pd(
        plausible: &[RigidTransform],
        estimates: &[RigidTransform],
        pts: &[Vector3<f64>],
    ) -> PdScore {
        let coverage = plausible
            .iter()
            .map(|p| {
                estimates
                    .iter()
                    .map(|e| transform_distance(p, e, pts))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / plausible.len() as f64;
        let plausibility = estimates
            .iter()
            .map(|e| {
                plausible
                    .iter()
                    .map(|p| transform_distance(p, e, pts))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / estimates.len() as f64;
        PdScore {
            coverage,
            plausibility,
            plausible_diversity: coverage + plausibility,
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let pts = surface_points(1);
        for (np, ne, seed) in [(5, 3, 2), (20, 20, 3), (1, 7, 4), (13, 1, 5)] {
            let p = random_transforms(np, seed);
            let e = random_transforms(ne, seed + 100);
            let ours = plausible_diversity(&p, &e, &pts).unwrap();
            let oracle = oracle_pd(&p, &e, &pts);
            assert!((ours.coverage - oracle.coverage).abs() < 1e-12);
            assert!((ours.plausibility - oracle.plausibility).abs() < 1e-12);
            assert!((ours.plausible_diversity - oracle.plausible_diversity).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_sets_score_zero() {
        let pts = surface_points(6);
        let p = random_transforms(10, 7);
        let score = plausible_diversity(&p, &p, &pts).unwrap();
        assert_eq!(score.coverage, 0.0);
        assert_eq!(score.plausibility, 0.0);
        assert_eq!(score.plausible_diversity, 0.0);
    }

    #[test]
    fn subset_estimates_have_zero_plausibility() {
        let pts = surface_points(8);
        let p = random_transforms(12, 9);
        let score = plausible_diversity(&p, &p[..3], &pts).unwrap();
        assert_eq!(score.plausibility, 0.0);
        assert!(score.coverage > 0.0);
    }

    #[test]
    fn duplicates_never_help_and_members_never_hurt_coverage() {
        let pts = surface_points(10);
        let p = random_transforms(10, 11);
        let mut estimates = random_transforms(4, 12);
        let base = plausible_diversity(&p, &estimates, &pts).unwrap();

        // duplicating an estimate changes nothing
        let mut dup = estimates.clone();
        dup.push(estimates[0]);
        let with_dup = plausible_diversity(&p, &dup, &pts).unwrap();
        assert!((with_dup.coverage - base.coverage).abs() < 1e-15);
        assert!(with_dup.plausibility <= base.plausibility + 1e-15);

        // adding a plausible-set member cannot increase coverage
        estimates.push(p[0]);
        let with_member = plausible_diversity(&p, &estimates, &pts).unwrap();
        assert!(with_member.coverage <= base.coverage + 1e-15);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let pts = surface_points(13);
        let p = random_transforms(3, 14);
        assert!(matches!(
            plausible_diversity(&[], &p, &pts),
            Err(EvalError::EmptySet("plausible"))
        ));
        assert!(matches!(
            plausible_diversity(&p, &[], &pts),
            Err(EvalError::EmptySet("estimate"))
        ));
    }

    fn sphere_scene() -> (SdfGrid, SemanticPointSet) {
        let mesh = Arc::new(shapes::icosphere(0.06, 2));
        let grid = SdfGrid::build(mesh, 0.01, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut known = Vec::new();
        for _ in 0..4 {
            known.push((crate::pose::sample_unit_vector(&mut rng) * 0.06, 0.0));
        }
        let free: Vec<Vector3<f64>> = (0..100)
            .map(|_| crate::pose::sample_unit_vector(&mut rng) * rng.random_range(0.1..0.2))
            .collect();
        (grid, synthetic_point_set(free, vec![], known))
    }

    #[test]
    fn vacuous_delta_retains_every_candidate() {
        let (grid, x) = sphere_scene();
        let spec = GridSpec {
            min: [-0.02, -0.02, -0.02],
            max: [0.02, 0.02, 0.02],
            cells: [3, 3, 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = compute_plausible_set(
            &x,
            &RigidTransform::identity(),
            &grid,
            1e12,
            &spec,
            10,
            &mut rng,
            &[],
            &CostConfig::default(),
        )
        .unwrap();
        assert_eq!(set.transforms.len(), 27 * 10 + 1);
        assert_eq!(set.transforms[0], RigidTransform::identity());
    }

    #[test]
    fn members_verified_against_uncapped_cost() {
        let (grid, x) = sphere_scene();
        let spec = GridSpec {
            min: [-0.03, -0.03, -0.03],
            max: [0.03, 0.03, 0.03],
            cells: [5, 5, 5],
        };
        let cfg = CostConfig::default();
        let delta = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t_star = RigidTransform::identity();
        let set = compute_plausible_set(
            &x, &t_star, &grid, delta, &spec, 40, &mut rng, &[], &cfg,
        )
        .unwrap();
        assert!(!set.transforms.is_empty());
        // every member satisfies the definition under the full cost
        for t in &set.transforms {
            let c = ground_truth_cost(&x, t, &grid, &cfg);
            assert!(
                c - set.baseline_cost < delta,
                "member violates: {c} vs baseline {}",
                set.baseline_cost
            );
        }
    }

    #[test]
    fn bad_delta_rejected() {
        let (grid, x) = sphere_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            compute_plausible_set(
                &x,
                &RigidTransform::identity(),
                &grid,
                0.0,
                &GridSpec::default(),
                5,
                &mut rng,
                &[],
                &CostConfig::default(),
            ),
            Err(EvalError::BadDelta(_))
        ));
    }

    #[test]
    fn cache_round_trip_preserves_members() {
        let transforms = random_transforms(7, 20);
        let set = PlausibleSet {
            transforms,
            delta: 0.0005,
            baseline_cost: 0.0123,
        };
        let dir = tempfile::tempdir().unwrap();
        let hash = [7u8; 32];
        let path = dir.path().join(PlausibleSet::cache_file_name(&hash, set.delta, 3));
        set.save(&path, &hash, 3).unwrap();
        let (loaded, loaded_hash, seed) = PlausibleSet::load(&path).unwrap();
        assert_eq!(loaded_hash, hash);
        assert_eq!(seed, 3);
        assert_eq!(loaded.delta, set.delta);
        assert_eq!(loaded.baseline_cost, set.baseline_cost);
        assert_eq!(loaded.transforms.len(), set.transforms.len());
        for (a, b) in loaded.transforms.iter().zip(&set.transforms) {
            assert_eq!(a.translation, b.translation);
            assert_eq!(a.rotation, b.rotation);
        }
    }

    /// Two rotation-sampling seeds give sets that score close to each other:
    /// the difference is bounded by the grid quantization scale.
    #[test]
    fn seed_stability_within_quantization_scale() {
        let (grid, x) = sphere_scene();
        let spec = GridSpec {
            min: [-0.03, -0.03, -0.03],
            max: [0.03, 0.03, 0.03],
            cells: [5, 5, 5],
        };
        let cfg = CostConfig::default();
        let delta = 0.02;
        let compute = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            compute_plausible_set(
                &x,
                &RigidTransform::identity(),
                &grid,
                delta,
                &spec,
                300,
                &mut rng,
                &[],
                &cfg,
            )
            .unwrap()
        };
        let a = compute(1);
        let b = compute(2);
        let pts = surface_points(30);
        let score = plausible_diversity(&a.transforms, &b.transforms, &pts).unwrap();
        // translation cells are 12 mm wide; allow a few cell diagonals
        let cell = 0.06 / 5.0;
        let bound = 8.0 * 3.0 * cell * cell;
        assert!(
            score.plausible_diversity < bound,
            "pd {} vs bound {bound}",
            score.plausible_diversity
        );
    }
}
