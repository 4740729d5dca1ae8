//! Deterministic geometric probing simulator.
//!
//! A scene fixes an object mesh at a ground-truth placement inside a
//! workspace and a sequence of straight-line probes. Executing a probe casts
//! a bundle of parallel rays (the probe cylinder) against the posed mesh:
//! the first hit produces a surface contact, and the traversed segment,
//! stopped one probe radius short of contact, marks free-space voxels. The
//! workspace boundary is labeled free space up front.
//!
//! Estimation works with world-to-object transforms (the frame the SDF lives
//! in), so the registration ground truth is the inverse of the scene
//! placement; see [`Scene::registration_truth`].

use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mesh::{MeshError, TriangleMesh};
use crate::points::{
    Contact, FreeVoxelGrid, PointsError, Provenance, SemanticPointSet, Workspace,
};
use crate::pose::{RigidTransform, TransformJson};

pub const BUILTIN_SCENES: [&str; 4] = ["box", "cylinder", "sphere", "drill-like"];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown scene '{name}'; available: {}", BUILTIN_SCENES.join(", "))]
    UnknownScene { name: String },
    #[error("probe index {index} out of range ({count} probes)")]
    BadProbeIndex { index: usize, count: usize },
    #[error("probe {index} starts inside the object")]
    OriginInsideObject { index: usize },
    #[error("bad scene config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Points(#[from] PointsError),
}

/// A straight-line probing motion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub max_travel: f64,
    pub radius: f64,
}

impl Probe {
    fn origin_v(&self) -> Vector3<f64> {
        Vector3::from(self.origin)
    }

    fn direction_v(&self) -> Vector3<f64> {
        Vector3::from(self.direction).normalize()
    }
}

/// Soft-contact emulation: scatter surface points in a patch around a hit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub max_points: usize,
    pub patch_radius: f64,
}

/// Result of one probe execution.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub probe_index: u32,
    /// First surface hit, world frame.
    pub contact: Option<Vector3<f64>>,
    /// Extra contact-patch surface points (world frame, empty unless patch
    /// emulation is on).
    pub patch_points: Vec<Vector3<f64>>,
    /// Free voxel centers swept by this probe, excluding the contact voxel.
    pub swept_centers: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub mesh: Arc<TriangleMesh>,
    /// Object-to-world placement.
    pub pose: RigidTransform,
    pub workspace: Workspace,
    pub probes: Vec<Probe>,
    pub r_free: f64,
    pub r_target: f64,
    pub d_pad: f64,
    /// Suboptimality threshold for this object's plausible set.
    pub delta: f64,
    pub seed: u64,
    pub contact_patch: Option<PatchConfig>,
}

impl Scene {
    /// The transform registration estimates: world points into the object
    /// frame.
    pub fn registration_truth(&self) -> RigidTransform {
        self.pose.inverse()
    }

    /// Fresh free-space grid with the workspace boundary pre-marked.
    pub fn boundary_grid(&self) -> Result<FreeVoxelGrid, SceneError> {
        let mut grid = FreeVoxelGrid::new(self.r_free, self.workspace.min())?;
        let boundary = self.workspace.boundary_free_points(self.r_free)?;
        grid.add_points(&boundary, Provenance::Boundary);
        Ok(grid)
    }

    /// Executes one probe: rays against the posed mesh, free-space marking
    /// into `free_grid`.
    pub fn execute_probe(
        &self,
        index: usize,
        free_grid: &mut FreeVoxelGrid,
    ) -> Result<ProbeResult, SceneError> {
        let probe = *self
            .probes
            .get(index)
            .ok_or(SceneError::BadProbeIndex {
                index,
                count: self.probes.len(),
            })?;
        let to_object = self.pose.inverse();
        let origin = probe.origin_v();
        let dir = probe.direction_v();
        if self.mesh.contains(&to_object.apply(&origin)) {
            return Err(SceneError::OriginInsideObject { index });
        }

        // probe cylinder approximated by the center ray plus a ring of
        // parallel rays at the probe radius
        let (u, v) = orthonormal_basis(&dir);
        let mut ray_origins = vec![origin];
        for k in 0..8 {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
            ray_origins.push(origin + (u * a.cos() + v * a.sin()) * probe.radius);
        }

        let obj_dir = to_object.rotation * dir;
        let mut stop_t = probe.max_travel;
        let mut contact_world: Option<Vector3<f64>> = None;
        for ray_origin in &ray_origins {
            let obj_origin = to_object.apply(ray_origin);
            if let Some((t, hit_obj, _)) = self.mesh.ray_hit(&obj_origin, &obj_dir, probe.max_travel)
            {
                // the earliest hit stops the whole probe body
                if t < stop_t {
                    stop_t = t;
                    contact_world = Some(self.pose.apply(&hit_obj));
                }
            }
        }

        // sweep: all rays traverse [0, stop_t - radius]
        let sweep_len = (stop_t - probe.radius).max(0.0);
        let mut local = FreeVoxelGrid::new(self.r_free, self.workspace.min())?;
        if sweep_len > 0.0 {
            let steps = (sweep_len / (self.r_free * 0.45)).ceil() as usize;
            let mut samples = Vec::with_capacity(ray_origins.len() * (steps + 1));
            for ray_origin in &ray_origins {
                for s in 0..=steps {
                    let t = sweep_len * s as f64 / steps as f64;
                    samples.push(ray_origin + dir * t);
                }
            }
            local.add_points(&samples, Provenance::Probe(index as u32));
        }
        if let Some(c) = &contact_world {
            local.unmark(c);
        }
        let swept_centers: Vec<Vector3<f64>> =
            local.export_centers().iter().map(|(c, _)| *c).collect();
        free_grid.add_points(&swept_centers, Provenance::Probe(index as u32));
        if let Some(c) = &contact_world {
            // a later ring sample must not claim the contact voxel either
            free_grid.unmark(c);
        }

        let patch_points = match (&contact_world, &self.contact_patch) {
            (Some(c), Some(patch)) => self.sample_patch(index, c, patch),
            _ => Vec::new(),
        };

        Ok(ProbeResult {
            probe_index: index as u32,
            contact: contact_world,
            patch_points,
            swept_centers,
        })
    }

    fn sample_patch(
        &self,
        index: usize,
        contact_world: &Vector3<f64>,
        patch: &PatchConfig,
    ) -> Vec<Vector3<f64>> {
        let hit_obj = self.pose.inverse().apply(contact_world);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9e3779b9));
        let mut out = Vec::new();
        // rejection sample surface points near the hit
        for _ in 0..40 {
            if out.len() >= patch.max_points {
                break;
            }
            for s in self.mesh.sample_surface(64, &mut rng) {
                if (s - hit_obj).norm() <= patch.patch_radius {
                    out.push(self.pose.apply(&s));
                    if out.len() >= patch.max_points {
                        break;
                    }
                }
            }
        }
        out
    }

    /// Digest of everything the observation after `probes_done` probes is a
    /// function of; keys plausible-set caches.
    pub fn content_hash(&self, probes_done: usize) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.mesh.content_hash());
        let t = TransformJson::from(&self.pose);
        for v in t.r.iter().chain(t.t.iter()) {
            h.update(v.to_le_bytes());
        }
        for v in [self.r_free, self.r_target, self.d_pad, self.delta] {
            h.update(v.to_le_bytes());
        }
        h.update(self.seed.to_le_bytes());
        h.update((probes_done as u64).to_le_bytes());
        for p in &self.probes {
            for v in p.origin.iter().chain(p.direction.iter()) {
                h.update(v.to_le_bytes());
            }
            h.update(p.max_travel.to_le_bytes());
            h.update(p.radius.to_le_bytes());
        }
        h.finalize().into()
    }

    /// A named scene with deterministic geometry for the given seed. Probes
    /// are aimed relative to the sampled placement so several always make
    /// contact.
    pub fn builtin(name: &str, seed: u64) -> Result<Scene, SceneError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mesh, delta, lateral_scale): (TriangleMesh, f64, f64) = match name {
            "box" => (crate::shapes::box_mesh(Vector3::new(0.09, 0.12, 0.18)), 0.0005, 1.0),
            "cylinder" => (crate::shapes::cylinder(0.045, 0.16, 72), 0.0003, 0.7),
            "sphere" => (crate::shapes::icosphere(0.06, 3), 0.0003, 0.6),
            "drill-like" => (crate::shapes::l_prism(0.18, 0.06, 0.06, 0.18, 0.06), 0.001, 1.0),
            other => {
                return Err(SceneError::UnknownScene {
                    name: other.to_string(),
                })
            }
        };
        let workspace = Workspace::new(Vector3::repeat(-0.25), Vector3::repeat(0.25))?;
        // placement: small random translation, yaw up to ~0.2 rad
        let translation = Vector3::new(
            rng.random_range(-0.015..0.015),
            rng.random_range(-0.015..0.015),
            rng.random_range(-0.01..0.01),
        );
        let yaw = rng.random_range(-0.2..0.2);
        let pose = RigidTransform::new(
            RigidTransform::from_axis_angle(&Vector3::z(), yaw).rotation,
            translation,
        );
        let c = pose.translation;

        // probes approach along an axis with lateral offsets in the
        // perpendicular plane; offsets beyond the object silhouette probe
        // free space
        let plan: [(Vector3<f64>, f64, f64); 8] = [
            (Vector3::x(), 0.0, 0.0),
            (Vector3::x(), 0.04, 0.02),
            (Vector3::x(), -0.04, -0.02),
            (Vector3::x(), 0.15, 0.0), // miss
            (Vector3::y(), 0.03, -0.03),
            (Vector3::y(), -0.03, 0.04),
            (-Vector3::x(), 0.02, 0.03),
            (-Vector3::x(), 0.0, 0.16), // miss above
        ];
        let probes = plan
            .iter()
            .map(|(axis, la, lb)| {
                let (u, v) = orthonormal_basis(axis);
                let origin = c + axis * 0.22 + u * (la * lateral_scale) + v * (lb * lateral_scale);
                Probe {
                    origin: origin.into(),
                    direction: (-axis).into(),
                    max_travel: 0.45,
                    radius: 0.01,
                }
            })
            .collect();

        Ok(Scene {
            name: name.to_string(),
            mesh: Arc::new(mesh),
            pose,
            workspace,
            probes,
            r_free: 0.025,
            r_target: 0.01,
            d_pad: 0.05,
            delta,
            seed,
            contact_patch: None,
        })
    }
}

fn orthonormal_basis(dir: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if dir.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = dir.cross(&helper).normalize();
    let v = dir.cross(&u).normalize();
    (u, v)
}

/// Cumulative probe execution: boundary free space up front, then one
/// observation snapshot per executed probe.
pub struct ProbeRun<'a> {
    scene: &'a Scene,
    free_grid: FreeVoxelGrid,
    contacts: Vec<Contact>,
    next_probe: usize,
}

impl<'a> ProbeRun<'a> {
    pub fn new(scene: &'a Scene) -> Result<Self, SceneError> {
        Ok(Self {
            scene,
            free_grid: scene.boundary_grid()?,
            contacts: Vec::new(),
            next_probe: 0,
        })
    }

    pub fn remaining(&self) -> usize {
        self.scene.probes.len() - self.next_probe
    }

    /// Executes the next probe and returns its result with the cumulative
    /// observation.
    pub fn step(&mut self) -> Result<(ProbeResult, SemanticPointSet), SceneError> {
        let index = self.next_probe;
        let result = self.scene.execute_probe(index, &mut self.free_grid)?;
        self.next_probe += 1;
        if let Some(c) = result.contact {
            self.contacts.push(Contact {
                position: c,
                value: 0.0,
                provenance: Provenance::Probe(index as u32),
            });
        }
        for p in &result.patch_points {
            self.contacts.push(Contact {
                position: *p,
                value: 0.0,
                provenance: Provenance::Probe(index as u32),
            });
        }
        let observation = SemanticPointSet::assemble(&self.free_grid, &self.contacts, &[]);
        Ok((result, observation))
    }

    /// Runs every remaining probe.
    pub fn run_all(&mut self) -> Result<Vec<(ProbeResult, SemanticPointSet)>, SceneError> {
        let mut out = Vec::with_capacity(self.remaining());
        while self.remaining() > 0 {
            out.push(self.step()?);
        }
        Ok(out)
    }
}

/// On-disk scene description (TOML or JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub name: String,
    /// Builtin mesh id; exclusive with `mesh_path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_path: Option<String>,
    pub pose: PoseConfig,
    pub workspace: Workspace,
    pub probes: Vec<Probe>,
    pub r_free: f64,
    pub r_target: f64,
    pub d_pad: f64,
    pub delta: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact_patch: Option<PatchConfig>,
}

/// Placement as translation plus a (w, x, y, z) quaternion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    pub translation: [f64; 3],
    pub quaternion: [f64; 4],
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<Self, SceneError> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| SceneError::BadConfig(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| SceneError::BadConfig(e.to_string()))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SceneError::BadConfig(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        cfg.into_scene(path.parent().unwrap_or(Path::new(".")))
    }

    pub fn into_scene(self, base_dir: &Path) -> Result<Scene, SceneError> {
        let mesh = match (&self.mesh_builtin, &self.mesh_path) {
            (Some(id), None) => match id.as_str() {
                "box" => crate::shapes::box_mesh(Vector3::new(0.09, 0.12, 0.18)),
                "cylinder" => crate::shapes::cylinder(0.045, 0.16, 72),
                "sphere" => crate::shapes::icosphere(0.06, 3),
                "drill-like" => crate::shapes::l_prism(0.18, 0.06, 0.06, 0.18, 0.06),
                other => {
                    return Err(SceneError::UnknownScene {
                        name: other.to_string(),
                    })
                }
            },
            (None, Some(p)) => TriangleMesh::load(base_dir.join(p))?,
            _ => {
                return Err(SceneError::BadConfig(
                    "exactly one of mesh_builtin or mesh_path is required".into(),
                ))
            }
        };
        let q = self.pose.quaternion;
        let pose = RigidTransform::from_quaternion(
            q[0],
            q[1],
            q[2],
            q[3],
            Vector3::from(self.pose.translation),
        );
        Ok(Scene {
            name: self.name,
            mesh: Arc::new(mesh),
            pose,
            workspace: self.workspace,
            probes: self.probes,
            r_free: self.r_free,
            r_target: self.r_target,
            d_pad: self.d_pad,
            delta: self.delta,
            seed: self.seed,
            contact_patch: self.contact_patch,
        })
    }

    pub fn from_scene(scene: &Scene, mesh_ref: MeshRef) -> Self {
        let q = rotation_to_quaternion(&scene.pose);
        let (mesh_builtin, mesh_path) = match mesh_ref {
            MeshRef::Builtin(id) => (Some(id), None),
            MeshRef::Path(p) => (None, Some(p)),
        };
        Self {
            name: scene.name.clone(),
            mesh_builtin,
            mesh_path,
            pose: PoseConfig {
                translation: scene.pose.translation.into(),
                quaternion: q,
            },
            workspace: scene.workspace,
            probes: scene.probes.clone(),
            r_free: scene.r_free,
            r_target: scene.r_target,
            d_pad: scene.d_pad,
            delta: scene.delta,
            seed: scene.seed,
            contact_patch: scene.contact_patch,
        }
    }
}

pub enum MeshRef {
    Builtin(String),
    Path(String),
}

fn rotation_to_quaternion(t: &RigidTransform) -> [f64; 4] {
    let q = nalgebra::UnitQuaternion::from_matrix(&t.rotation);
    [q.w, q.i, q.j, q.k]
}
