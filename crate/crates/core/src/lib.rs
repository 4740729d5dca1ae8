//! Pose registration from volumetric semantic points.
//!
//! Estimates a diverse set of plausible rigid-object poses from 3D points
//! labeled as free space, occupied space, or known signed distance (contact
//! points are the `Known(0)` special case). The pipeline:
//!
//! - [`mesh`] / [`sdf`]: triangle-mesh signed distance queries and the padded
//!   voxel SDF grid all cost evaluations run against.
//! - [`points`]: the observation set with per-point semantics, built through a
//!   density-bounding free-space voxel grid.
//! - [`pose`]: SE(3) transforms, the 9-parameter optimization encoding
//!   (translation + two-column rotation), and the Chamfer-based transform
//!   distance used in evaluation.
//! - [`cost`]: the discrete ground-truth cost and its differentiable
//!   relaxation with analytic gradients.
//! - [`qd`] / [`archive`] / [`cmaes`]: quality-diversity registration —
//!   Adam warm starts seed a behavior-space archive over (x, y) translation,
//!   refined by gradient-guided or gradient-free CMA emitters.
//! - [`online`]: iterative re-registration as probes add data.
//! - [`eval`]: brute-force plausible-set computation and the
//!   coverage + plausibility diversity score.
//! - [`sim`]: a deterministic straight-line probing simulator that produces
//!   contact points and swept free-space voxels against a posed mesh.

pub mod archive;
pub mod cmaes;
pub mod cost;
pub mod eval;
pub mod mesh;
pub mod online;
pub mod points;
pub mod qd;
pub mod pose;
pub mod sdf;
pub mod shapes;
pub mod sim;

pub use cost::CostConfig;
pub use points::{SemanticPointSet, Semantics, Workspace};
pub use pose::{PoseParam, RigidTransform};
pub use qd::{EstimateSet, Optimizer, QdConfig};
pub use sdf::SdfGrid;
