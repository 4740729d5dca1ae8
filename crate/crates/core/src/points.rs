//! Semantic observations: world-frame points labeled free, occupied, or
//! known signed distance.
//!
//! Free-space volumes (robot sweeps, camera rays, workspace boundaries) are
//! funneled through a [`FreeVoxelGrid`] so the exported free points are voxel
//! centers with bounded density, no matter how many raw samples were added.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-point semantic label.
///
/// `Known(v)` asserts the signed distance at the point is exactly `v`;
/// contact points on the surface use `Known(0.0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Semantics {
    Free,
    Occupied,
    Known(f64),
}

/// Where a point came from. Kept for debugging and plots; never affects cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Produced by the probe with this index.
    Probe(u32),
    /// Workspace boundary tiling.
    Boundary,
    /// Traced from a depth-camera ray.
    CameraRay,
    /// Constructed directly (tests, file import).
    Synthetic,
}

#[derive(Debug, Error)]
pub enum PointsError {
    #[error("workspace box is degenerate: min {min:?} must be strictly below max {max:?} on every axis")]
    DegenerateWorkspace {
        min: [f64; 3],
        max: [f64; 3],
    },
    #[error("free-space resolution must be positive, got {0}")]
    BadResolution(f64),
}

/// Axis-aligned box bounding where the object could possibly be.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Workspace {
    min: [f64; 3],
    max: [f64; 3],
}

impl Workspace {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self, PointsError> {
        if (0..3).any(|i| min[i] >= max[i]) {
            return Err(PointsError::DegenerateWorkspace {
                min: min.into(),
                max: max.into(),
            });
        }
        Ok(Self {
            min: min.into(),
            max: max.into(),
        })
    }

    pub fn min(&self) -> Vector3<f64> {
        Vector3::from(self.min)
    }

    pub fn max(&self) -> Vector3<f64> {
        Vector3::from(self.max)
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max() - self.min()
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min() + self.max()) * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Points tiling the six faces of the box at spacing at most `r_free`.
    ///
    /// Per axis the lattice has `max(1, ceil(extent / r_free))` intervals with
    /// endpoints on the corners, so shared edges and corners appear exactly
    /// once. A spacing larger than the box degenerates to the 8 corners.
    pub fn boundary_free_points(&self, r_free: f64) -> Result<Vec<Vector3<f64>>, PointsError> {
        if r_free <= 0.0 {
            return Err(PointsError::BadResolution(r_free));
        }
        let ext = self.extent();
        let n: Vec<usize> = (0..3)
            .map(|i| ((ext[i] / r_free).ceil() as usize).max(1))
            .collect();
        let mut pts = Vec::new();
        for i in 0..=n[0] {
            for j in 0..=n[1] {
                for k in 0..=n[2] {
                    let on_boundary = i == 0 || i == n[0] || j == 0 || j == n[1] || k == 0 || k == n[2];
                    if !on_boundary {
                        continue;
                    }
                    pts.push(Vector3::new(
                        self.min[0] + ext[0] * i as f64 / n[0] as f64,
                        self.min[1] + ext[1] * j as f64 / n[1] as f64,
                        self.min[2] + ext[2] * k as f64 / n[2] as f64,
                    ));
                }
            }
        }
        Ok(pts)
    }
}

/// Voxel grid that downsamples free-space claims to one point per voxel.
///
/// Adding a point marks its containing voxel; marking is idempotent, so the
/// exported centers are independent of insertion multiplicity. Keys are kept
/// in a sorted map so export order is deterministic.
#[derive(Debug, Clone)]
pub struct FreeVoxelGrid {
    resolution: f64,
    origin: Vector3<f64>,
    marked: BTreeMap<[i64; 3], Provenance>,
}

impl FreeVoxelGrid {
    pub fn new(resolution: f64, origin: Vector3<f64>) -> Result<Self, PointsError> {
        if resolution <= 0.0 {
            return Err(PointsError::BadResolution(resolution));
        }
        Ok(Self {
            resolution,
            origin,
            marked: BTreeMap::new(),
        })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    fn key_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        let mut key = [0i64; 3];
        for i in 0..3 {
            key[i] = ((p[i] - self.origin[i]) / self.resolution).floor() as i64;
        }
        key
    }

    /// Marks the voxel containing each point. The first provenance to claim a
    /// voxel wins; re-adding is a no-op.
    pub fn add_points(&mut self, points: &[Vector3<f64>], provenance: Provenance) {
        for p in points {
            self.marked.entry(self.key_of(p)).or_insert(provenance);
        }
    }

    pub fn len(&self) -> usize {
        self.marked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marked.is_empty()
    }

    pub fn contains_point(&self, p: &Vector3<f64>) -> bool {
        self.marked.contains_key(&self.key_of(p))
    }

    /// Removes the voxel containing `p`, if marked.
    pub fn unmark(&mut self, p: &Vector3<f64>) {
        self.marked.remove(&self.key_of(p));
    }

    /// One center per marked voxel, ordered by voxel key.
    pub fn export_centers(&self) -> Vec<(Vector3<f64>, Provenance)> {
        self.marked
            .iter()
            .map(|(key, prov)| {
                let c = Vector3::new(
                    self.origin[0] + (key[0] as f64 + 0.5) * self.resolution,
                    self.origin[1] + (key[1] as f64 + 0.5) * self.resolution,
                    self.origin[2] + (key[2] as f64 + 0.5) * self.resolution,
                );
                (c, *prov)
            })
            .collect()
    }
}

/// A surface contact: a point with a known signed distance value (0 when the
/// touch is on the surface).
#[derive(Debug, Clone, Copy)]
pub struct Contact {
    pub position: Vector3<f64>,
    pub value: f64,
    pub provenance: Provenance,
}

/// The full observation: world points partitioned by semantics.
///
/// Immutable once assembled; ordering is deterministic (free by voxel key,
/// known by insertion, occupied by insertion) so downstream optimization is
/// reproducible from a seed.
#[derive(Debug, Clone, Default)]
pub struct SemanticPointSet {
    free: Vec<Vector3<f64>>,
    occupied: Vec<Vector3<f64>>,
    known: Vec<(Vector3<f64>, f64)>,
    free_provenance: Vec<Provenance>,
    occupied_provenance: Vec<Provenance>,
    known_provenance: Vec<Provenance>,
}

impl SemanticPointSet {
    pub fn assemble(
        free_grid: &FreeVoxelGrid,
        contacts: &[Contact],
        occupied: &[(Vector3<f64>, Provenance)],
    ) -> Self {
        let mut set = SemanticPointSet::default();
        for (center, prov) in free_grid.export_centers() {
            set.free.push(center);
            set.free_provenance.push(prov);
        }
        for c in contacts {
            set.known.push((c.position, c.value));
            set.known_provenance.push(c.provenance);
        }
        for (p, prov) in occupied {
            set.occupied.push(*p);
            set.occupied_provenance.push(*prov);
        }
        set
    }

    pub fn free(&self) -> &[Vector3<f64>] {
        &self.free
    }

    pub fn occupied(&self) -> &[Vector3<f64>] {
        &self.occupied
    }

    pub fn known(&self) -> &[(Vector3<f64>, f64)] {
        &self.known
    }

    pub fn free_provenance(&self) -> &[Provenance] {
        &self.free_provenance
    }

    /// (free, occupied, known) counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.free.len(), self.occupied.len(), self.known.len())
    }

    pub fn len(&self) -> usize {
        self.free.len() + self.occupied.len() + self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// On-disk observation format shared by the simulator, registration, and
/// evaluation commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationFile {
    pub free: Vec<[f64; 3]>,
    pub occupied: Vec<[f64; 3]>,
    pub known: Vec<[f64; 4]>,
    pub r_free: f64,
    pub workspace: Workspace,
}

impl ObservationFile {
    pub fn from_points(set: &SemanticPointSet, r_free: f64, workspace: Workspace) -> Self {
        Self {
            free: set.free.iter().map(|p| [p.x, p.y, p.z]).collect(),
            occupied: set.occupied.iter().map(|p| [p.x, p.y, p.z]).collect(),
            known: set
                .known
                .iter()
                .map(|(p, v)| [p.x, p.y, p.z, *v])
                .collect(),
            r_free,
            workspace,
        }
    }

    /// Rebuilds the point set. File points carry no provenance, so imported
    /// points are tagged [`Provenance::Synthetic`].
    pub fn to_points(&self) -> SemanticPointSet {
        let mut set = SemanticPointSet::default();
        for p in &self.free {
            set.free.push(Vector3::new(p[0], p[1], p[2]));
            set.free_provenance.push(Provenance::Synthetic);
        }
        for p in &self.occupied {
            set.occupied.push(Vector3::new(p[0], p[1], p[2]));
            set.occupied_provenance.push(Provenance::Synthetic);
        }
        for p in &self.known {
            set.known.push((Vector3::new(p[0], p[1], p[2]), p[3]));
            set.known_provenance.push(Provenance::Synthetic);
        }
        set
    }
}

/// Test-only constructor for building observations without a voxel grid.
pub fn synthetic_point_set(
    free: Vec<Vector3<f64>>,
    occupied: Vec<Vector3<f64>>,
    known: Vec<(Vector3<f64>, f64)>,
) -> SemanticPointSet {
    let mut set = SemanticPointSet::default();
    set.free_provenance = vec![Provenance::Synthetic; free.len()];
    set.occupied_provenance = vec![Provenance::Synthetic; occupied.len()];
    set.known_provenance = vec![Provenance::Synthetic; known.len()];
    set.free = free;
    set.occupied = occupied;
    set.known = known;
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_workspace() -> Workspace {
        Workspace::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn degenerate_workspace_rejected() {
        let r = Workspace::new(Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 1.0));
        assert!(matches!(r, Err(PointsError::DegenerateWorkspace { .. })));
    }

    /// Surface lattice count oracle: a cube tiled with n intervals per edge
    /// has (n+1)^3 - (n-1)^3 boundary points.
    fn cube_surface_count(n: i64) -> usize {
        let full = (n + 1).pow(3);
        let interior = (n - 1).max(0).pow(3);
        (full - interior) as usize
    }

    #[test]
    fn boundary_points_unit_cube() {
        let w = unit_workspace();
        let pts = w.boundary_free_points(0.5).unwrap();
        assert_eq!(pts.len(), cube_surface_count(2));
        assert_eq!(pts.len(), 26);
        // All points on the boundary, pairwise distinct.
        for p in &pts {
            let on_face = (0..3).any(|i| p[i] == 0.0 || p[i] == 1.0);
            assert!(on_face, "{p:?} not on a face");
        }
        for (a, i) in pts.iter().zip(0..) {
            for b in &pts[i + 1..] {
                assert!((a - b).norm() > 1e-12);
            }
        }
    }

    #[test]
    fn boundary_points_coarse_spacing_gives_corners() {
        let w = unit_workspace();
        let pts = w.boundary_free_points(5.0).unwrap();
        assert_eq!(pts.len(), 8);
        for p in &pts {
            for i in 0..3 {
                assert!(p[i] == 0.0 || p[i] == 1.0);
            }
        }
    }

    #[test]
    fn free_grid_marking_is_idempotent() {
        let mut grid = FreeVoxelGrid::new(0.1, Vector3::zeros()).unwrap();
        let inside: Vec<_> = (0..1000)
            .map(|i| Vector3::new(0.35 + 1e-5 * i as f64, 0.32, 0.31))
            .collect();
        grid.add_points(&inside, Provenance::Synthetic);
        assert_eq!(grid.len(), 1);
        let centers = grid.export_centers();
        assert!((centers[0].0 - Vector3::new(0.35, 0.35, 0.35)).norm() < 1e-12);
    }

    #[test]
    fn free_grid_lattice_points_one_center_each() {
        let mut grid = FreeVoxelGrid::new(0.1, Vector3::zeros()).unwrap();
        let lattice: Vec<_> = (0..5)
            .flat_map(|i| (0..5).map(move |j| Vector3::new(0.2 * i as f64 + 0.05, 0.2 * j as f64 + 0.05, 0.05)))
            .collect();
        grid.add_points(&lattice, Provenance::Synthetic);
        assert_eq!(grid.len(), 25);
    }

    #[test]
    fn free_grid_empty_input_unchanged() {
        let mut grid = FreeVoxelGrid::new(0.1, Vector3::zeros()).unwrap();
        grid.add_points(&[], Provenance::Synthetic);
        assert!(grid.is_empty());
    }

    #[test]
    fn export_independent_of_insertion_order() {
        let pts: Vec<_> = (0..40)
            .map(|i| Vector3::new((i * 7 % 13) as f64 * 0.03, (i * 5 % 11) as f64 * 0.04, 0.02))
            .collect();
        let mut fwd = FreeVoxelGrid::new(0.05, Vector3::zeros()).unwrap();
        fwd.add_points(&pts, Provenance::Synthetic);
        let mut rev_pts = pts.clone();
        rev_pts.reverse();
        let mut rev = FreeVoxelGrid::new(0.05, Vector3::zeros()).unwrap();
        rev.add_points(&rev_pts, Provenance::Synthetic);
        // Duplicate everything once more; export must not change.
        rev.add_points(&pts, Provenance::Synthetic);
        let a: Vec<_> = fwd.export_centers().iter().map(|(c, _)| *c).collect();
        let b: Vec<_> = rev.export_centers().iter().map(|(c, _)| *c).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn assemble_contacts_only() {
        let grid = FreeVoxelGrid::new(0.1, Vector3::zeros()).unwrap();
        let contacts: Vec<_> = (0..3)
            .map(|i| Contact {
                position: Vector3::new(i as f64, 0.0, 0.0),
                value: 0.0,
                provenance: Provenance::Probe(i),
            })
            .collect();
        let set = SemanticPointSet::assemble(&grid, &contacts, &[]);
        assert_eq!(set.counts(), (0, 0, 3));
        assert!(set.known().iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn assemble_is_deterministic() {
        let mut grid = FreeVoxelGrid::new(0.05, Vector3::zeros()).unwrap();
        let pts: Vec<_> = (0..200)
            .map(|i| Vector3::new((i % 17) as f64 * 0.021, (i % 7) as f64 * 0.013, (i % 5) as f64 * 0.033))
            .collect();
        grid.add_points(&pts, Provenance::Boundary);
        let set1 = SemanticPointSet::assemble(&grid, &[], &[]);
        let set2 = SemanticPointSet::assemble(&grid, &[], &[]);
        assert_eq!(set1.free(), set2.free());
    }

    #[test]
    fn observation_file_round_trip() {
        let set = synthetic_point_set(
            vec![Vector3::new(0.1, 0.2, 0.3)],
            vec![Vector3::new(0.4, 0.5, 0.6)],
            vec![(Vector3::new(0.7, 0.8, 0.9), 0.01)],
        );
        let file = ObservationFile::from_points(&set, 0.025, unit_workspace());
        let json = serde_json::to_string(&file).unwrap();
        let parsed: ObservationFile = serde_json::from_str(&json).unwrap();
        let back = parsed.to_points();
        assert_eq!(back.free(), set.free());
        assert_eq!(back.occupied(), set.occupied());
        assert_eq!(back.known(), set.known());
        assert_eq!(parsed.r_free, 0.025);
    }

    #[test]
    fn observation_file_rejects_unknown_keys() {
        let bad = r#"{"free":[],"occupied":[],"known":[],"r_free":0.01,"workspace":{"min":[0,0,0],"max":[1,1,1]},"extra":1}"#;
        assert!(serde_json::from_str::<ObservationFile>(bad).is_err());
    }
}
