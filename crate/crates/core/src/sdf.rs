//! Precomputed voxel signed distance grids.
//!
//! The grid covers the mesh bounding box inflated by a padding margin; each
//! voxel stores the signed distance and a unit gradient at its center. Lookups
//! are nearest-voxel (the optimization path). A trilinear mode interpolates
//! values and differentiates the interpolant exactly; the finite-difference
//! test suites use it because nearest-voxel lookups are piecewise constant.
//! Queries outside the grid fall back to the exact mesh query.

use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mesh::TriangleMesh;

/// Default cap on voxel count; grids for table-scale objects at 5 mm
/// resolution with 50 mm padding stay well under it.
pub const DEFAULT_VOXEL_BUDGET: usize = 20_000_000;

const CACHE_MAGIC: &[u8; 4] = b"SDFG";
const CACHE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SdfError {
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("padding must be positive, got {0}")]
    BadPadding(f64),
    #[error(
        "grid would need {requested} voxels, over the budget of {budget}; \
         try a resolution of at least {suggested:.4} m"
    )]
    VoxelBudget {
        requested: usize,
        budget: usize,
        suggested: f64,
    },
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad cache file: {0}")]
    BadCache(String),
}

/// Voxelized signed distance field with per-voxel unit gradients and an exact
/// mesh fallback for queries outside the padded box. Immutable once built;
/// queries are pure and safe to run from any number of threads.
#[derive(Debug, Clone)]
pub struct SdfGrid {
    origin: Vector3<f64>,
    resolution: f64,
    dims: [u32; 3],
    values: Vec<f32>,
    gradients: Vec<[f32; 3]>,
    padding: f64,
    mesh: Arc<TriangleMesh>,
}

impl SdfGrid {
    /// Builds the grid from the mesh with the default voxel budget.
    pub fn build(mesh: Arc<TriangleMesh>, r_target: f64, d_pad: f64) -> Result<Self, SdfError> {
        Self::build_with_budget(mesh, r_target, d_pad, DEFAULT_VOXEL_BUDGET)
    }

    pub fn build_with_budget(
        mesh: Arc<TriangleMesh>,
        r_target: f64,
        d_pad: f64,
        budget: usize,
    ) -> Result<Self, SdfError> {
        if r_target <= 0.0 {
            return Err(SdfError::BadResolution(r_target));
        }
        if d_pad <= 0.0 {
            return Err(SdfError::BadPadding(d_pad));
        }
        let (bb_min, bb_max) = mesh.bounds();
        let origin = bb_min - Vector3::repeat(d_pad);
        let span = bb_max - bb_min + Vector3::repeat(2.0 * d_pad);
        // the 1e-9 guard keeps exact multiples from rounding up a cell
        let dims: [u32; 3] =
            std::array::from_fn(|i| (((span[i] / r_target) - 1e-9).ceil() as u32).max(1));
        let total = dims.iter().map(|&d| d as usize).product::<usize>();
        if total > budget {
            let volume: f64 = span.iter().product();
            let suggested = (volume / budget as f64).cbrt();
            return Err(SdfError::VoxelBudget {
                requested: total,
                budget,
                suggested,
            });
        }

        let nx = dims[0] as usize;
        let ny = dims[1] as usize;
        let nz = dims[2] as usize;
        let center = |i: usize, j: usize, k: usize| {
            Vector3::new(
                origin.x + (i as f64 + 0.5) * r_target,
                origin.y + (j as f64 + 0.5) * r_target,
                origin.z + (k as f64 + 0.5) * r_target,
            )
        };
        let values: Vec<f32> = (0..total)
            .into_par_iter()
            .map(|idx| {
                let i = idx % nx;
                let j = (idx / nx) % ny;
                let k = idx / (nx * ny);
                mesh.signed_distance(&center(i, j, k)).0 as f32
            })
            .collect();

        // gradients: normalized central differences (one-sided at the faces)
        let value_at = |i: usize, j: usize, k: usize| values[i + nx * (j + ny * k)] as f64;
        let gradients: Vec<[f32; 3]> = (0..total)
            .into_par_iter()
            .map(|idx| {
                let i = idx % nx;
                let j = (idx / nx) % ny;
                let k = idx / (nx * ny);
                let diff = |c: usize, n: usize, get: &dyn Fn(usize) -> f64| -> f64 {
                    if n == 1 {
                        0.0
                    } else if c == 0 {
                        get(1) - get(0)
                    } else if c == n - 1 {
                        get(n - 1) - get(n - 2)
                    } else {
                        (get(c + 1) - get(c - 1)) / 2.0
                    }
                };
                let gx = diff(i, nx, &|c| value_at(c, j, k));
                let gy = diff(j, ny, &|c| value_at(i, c, k));
                let gz = diff(k, nz, &|c| value_at(i, j, c));
                let g = Vector3::new(gx, gy, gz);
                let n = g.norm();
                let unit = if n > 1e-6 {
                    g / n
                } else {
                    // flat spot (medial axis through the stencil): fall back
                    // to the exact mesh gradient
                    mesh.signed_distance(&center(i, j, k)).1
                };
                [unit.x as f32, unit.y as f32, unit.z as f32]
            })
            .collect();

        Ok(Self {
            origin,
            resolution: r_target,
            dims,
            values,
            gradients,
            padding: d_pad,
            mesh,
        })
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn padding(&self) -> f64 {
        self.padding
    }

    pub fn mesh(&self) -> &Arc<TriangleMesh> {
        &self.mesh
    }

    pub fn voxel_count(&self) -> usize {
        self.values.len()
    }

    pub fn voxel_center(&self, i: u32, j: u32, k: u32) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + (i as f64 + 0.5) * self.resolution,
            self.origin.y + (j as f64 + 0.5) * self.resolution,
            self.origin.z + (k as f64 + 0.5) * self.resolution,
        )
    }

    fn flat(&self, i: u32, j: u32, k: u32) -> usize {
        i as usize + self.dims[0] as usize * (j as usize + self.dims[1] as usize * k as usize)
    }

    pub fn value_at(&self, i: u32, j: u32, k: u32) -> f64 {
        self.values[self.flat(i, j, k)] as f64
    }

    pub fn gradient_at(&self, i: u32, j: u32, k: u32) -> Vector3<f64> {
        let g = self.gradients[self.flat(i, j, k)];
        Vector3::new(g[0] as f64, g[1] as f64, g[2] as f64)
    }

    /// True when `p` lies within the grid volume (the padded box).
    pub fn in_grid(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| {
            p[i] >= self.origin[i]
                && p[i] <= self.origin[i] + self.dims[i] as f64 * self.resolution
        })
    }

    /// Nearest-voxel value and stored unit gradient; exact mesh fallback
    /// outside the grid.
    pub fn query(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self.query_in_grid(p) {
            Some(hit) => hit,
            None => self.fallback(p),
        }
    }

    /// Nearest-voxel lookup, or `None` outside the grid. Lets hot loops treat
    /// the out-of-grid case specially (a free-space point outside the padded
    /// box is always strictly outside the object).
    #[inline]
    pub fn query_in_grid(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let mut idx = [0u32; 3];
        for i in 0..3 {
            let c = (p[i] - self.origin[i]) / self.resolution;
            if c < 0.0 {
                return None;
            }
            let cell = c as u32; // truncation == floor for non-negative
            if cell >= self.dims[i] {
                // points exactly on the max face map to the last voxel
                if p[i] <= self.origin[i] + self.dims[i] as f64 * self.resolution {
                    idx[i] = self.dims[i] - 1;
                    continue;
                }
                return None;
            }
            idx[i] = cell;
        }
        let flat = self.flat(idx[0], idx[1], idx[2]);
        let g = self.gradients[flat];
        Some((
            self.values[flat] as f64,
            Vector3::new(g[0] as f64, g[1] as f64, g[2] as f64),
        ))
    }

    /// Exact mesh query for a point outside the grid. Such points are outside
    /// the mesh (the grid covers it with padding), so the sign is positive
    /// and no containment test is needed.
    fn fallback(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (closest, _) = self.mesh.closest_point(p);
        let diff = p - closest;
        let dist = diff.norm();
        if dist < 1e-12 {
            return (0.0, Vector3::z());
        }
        (dist, diff / dist)
    }

    /// Batch query; output order matches input order.
    pub fn query_batch(&self, points: &[Vector3<f64>]) -> Vec<(f64, Vector3<f64>)> {
        points.iter().map(|p| self.query(p)).collect()
    }

    /// Trilinear value interpolation with the exact gradient of the
    /// interpolant (not normalized). Clamps to the outermost cell layer, so
    /// it is only meaningful for points inside the grid.
    pub fn query_trilinear(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let mut base = [0u32; 3];
        let mut frac = [0.0f64; 3];
        for i in 0..3 {
            let c = (p[i] - self.origin[i]) / self.resolution - 0.5;
            let max_base = (self.dims[i] - 2).max(0);
            let b = c.floor().clamp(0.0, max_base as f64);
            base[i] = b as u32;
            frac[i] = (c - b).clamp(0.0, 1.0);
        }
        let v = |di: u32, dj: u32, dk: u32| {
            self.value_at(base[0] + di, base[1] + dj, base[2] + dk)
        };
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        // interpolate along x, then y, then z
        let c00 = v(0, 0, 0) * (1.0 - fx) + v(1, 0, 0) * fx;
        let c10 = v(0, 1, 0) * (1.0 - fx) + v(1, 1, 0) * fx;
        let c01 = v(0, 0, 1) * (1.0 - fx) + v(1, 0, 1) * fx;
        let c11 = v(0, 1, 1) * (1.0 - fx) + v(1, 1, 1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        let value = c0 * (1.0 - fz) + c1 * fz;

        let inv_r = 1.0 / self.resolution;
        let dx = ((v(1, 0, 0) - v(0, 0, 0)) * (1.0 - fy) + (v(1, 1, 0) - v(0, 1, 0)) * fy)
            * (1.0 - fz)
            + ((v(1, 0, 1) - v(0, 0, 1)) * (1.0 - fy) + (v(1, 1, 1) - v(0, 1, 1)) * fy) * fz;
        let dy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
        let dz = c1 - c0;
        (value, Vector3::new(dx, dy, dz) * inv_r)
    }

    /// Cache key for this mesh + build parameters combination.
    pub fn cache_key(mesh: &TriangleMesh, r_target: f64, d_pad: f64) -> String {
        let mut h = Sha256::new();
        h.update(mesh.content_hash());
        h.update(r_target.to_le_bytes());
        h.update(d_pad.to_le_bytes());
        h.update(CACHE_VERSION.to_le_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the binary cache: magic, version, origin, resolution, dims,
    /// values (f32, x fastest), then per-voxel gradients (3 x f32).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SdfError> {
        let mut buf = Vec::with_capacity(38 + self.values.len() * 16);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        for c in self.origin.iter() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.extend_from_slice(&self.resolution.to_le_bytes());
        for d in self.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for g in &self.gradients {
            for c in g {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Loads a cache file, reattaching the mesh for out-of-grid fallback. The
    /// padding is recovered from the gap between the mesh bounds and the grid
    /// origin.
    pub fn load(path: impl AsRef<Path>, mesh: Arc<TriangleMesh>) -> Result<Self, SdfError> {
        let bytes = std::fs::read(path)?;
        let bad = |m: &str| SdfError::BadCache(m.to_string());
        if bytes.len() < 50 {
            return Err(bad("file too short for header"));
        }
        if &bytes[0..4] != CACHE_MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let origin = Vector3::new(f64_at(6), f64_at(14), f64_at(22));
        let resolution = f64_at(30);
        let dims: [u32; 3] = std::array::from_fn(|i| {
            u32::from_le_bytes(bytes[38 + 4 * i..42 + 4 * i].try_into().unwrap())
        });
        let total = dims.iter().map(|&d| d as usize).product::<usize>();
        let expected = 50 + total * 4 + total * 12;
        if bytes.len() != expected {
            return Err(bad(&format!(
                "expected {expected} bytes for dims {dims:?}, got {}",
                bytes.len()
            )));
        }
        let mut values = Vec::with_capacity(total);
        let mut off = 50;
        for _ in 0..total {
            values.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let mut gradients = Vec::with_capacity(total);
        for _ in 0..total {
            let g: [f32; 3] = std::array::from_fn(|i| {
                f32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap())
            });
            gradients.push(g);
            off += 12;
        }
        let (bb_min, _) = mesh.bounds();
        let padding = (0..3)
            .map(|i| bb_min[i] - origin[i])
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        Ok(Self {
            origin,
            resolution,
            dims,
            values,
            gradients,
            padding,
            mesh,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere_grid(res: f64) -> SdfGrid {
        let mesh = Arc::new(shapes::icosphere(1.0, 3));
        SdfGrid::build(mesh, res, 0.05).unwrap()
    }

    #[test]
    fn sphere_grid_dims_and_center_value() {
        let grid = unit_sphere_grid(0.1);
        for d in grid.dims() {
            assert!((20..=22).contains(&d), "dims {:?}", grid.dims());
        }
        // voxel nearest the origin reads close to -1
        let (v, _) = grid.query(&Vector3::zeros());
        assert!((v + 1.0).abs() < 0.1 + shapes::chord_error(grid.mesh()), "center {v}");
    }

    #[test]
    fn box_extent_dims_are_exact_arithmetic() {
        let mesh = Arc::new(shapes::box_mesh(Vector3::new(0.2, 0.2, 0.2)));
        let grid = SdfGrid::build(mesh, 0.01, 0.05).unwrap();
        assert_eq!(grid.dims(), [30, 30, 30]);
    }

    #[test]
    fn bad_parameters_rejected() {
        let mesh = Arc::new(shapes::box_mesh(Vector3::new(0.2, 0.2, 0.2)));
        assert!(matches!(
            SdfGrid::build(mesh.clone(), 0.0, 0.05),
            Err(SdfError::BadResolution(_))
        ));
        assert!(matches!(
            SdfGrid::build(mesh.clone(), -0.1, 0.05),
            Err(SdfError::BadResolution(_))
        ));
        assert!(matches!(
            SdfGrid::build(mesh, 0.01, 0.0),
            Err(SdfError::BadPadding(_))
        ));
    }

    #[test]
    fn voxel_budget_suggests_coarser_resolution() {
        let mesh = Arc::new(shapes::box_mesh(Vector3::new(0.2, 0.2, 0.2)));
        match SdfGrid::build_with_budget(mesh, 0.001, 0.05, 1000) {
            Err(SdfError::VoxelBudget { suggested, .. }) => {
                assert!(suggested > 0.001);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn voxel_centers_read_back_exactly() {
        let grid = unit_sphere_grid(0.25);
        let [nx, ny, nz] = grid.dims();
        for (i, j, k) in [(0, 0, 0), (nx - 1, ny - 1, nz - 1), (nx / 2, ny / 3, nz / 2)] {
            let c = grid.voxel_center(i, j, k);
            let (v, g) = grid.query(&c);
            assert_eq!(v, grid.value_at(i, j, k));
            assert_eq!(g, grid.gradient_at(i, j, k));
        }
    }

    #[test]
    fn batch_matches_pointwise_and_preserves_order() {
        let grid = unit_sphere_grid(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..100)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        let batch = grid.query_batch(&pts);
        assert_eq!(batch.len(), pts.len());
        for (p, out) in pts.iter().zip(&batch) {
            assert_eq!(*out, grid.query(p));
        }
        assert!(grid.query_batch(&[]).is_empty());
    }

    #[test]
    fn out_of_grid_fallback_matches_analytic_sphere() {
        let grid = unit_sphere_grid(0.1);
        let chord = shapes::chord_error(grid.mesh());
        let p = Vector3::new(2.1, 0.3, -0.4); // ~1 m beyond the padded box
        assert!(!grid.in_grid(&p));
        let (v, g) = grid.query(&p);
        assert!((v - (p.norm() - 1.0)).abs() < chord + 1e-3, "value {v}");
        assert!(g.dot(&p.normalize()) > 0.999);
    }

    #[test]
    fn stored_gradients_are_unit_norm() {
        let grid = unit_sphere_grid(0.15);
        let [nx, ny, nz] = grid.dims();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let n = grid.gradient_at(i, j, k).norm();
                    assert!((n - 1.0).abs() < 1e-6, "voxel ({i},{j},{k}) norm {n}");
                }
            }
        }
    }

    #[test]
    fn adjacent_values_satisfy_lipschitz_bound() {
        let grid = unit_sphere_grid(0.15);
        let [nx, ny, nz] = grid.dims();
        let bound = 3.0f64.sqrt() * grid.resolution();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = grid.value_at(i, j, k);
                    if i + 1 < nx {
                        assert!((grid.value_at(i + 1, j, k) - v).abs() <= bound);
                    }
                    if j + 1 < ny {
                        assert!((grid.value_at(i, j + 1, k) - v).abs() <= bound);
                    }
                    if k + 1 < nz {
                        assert!((grid.value_at(i, j, k + 1) - v).abs() <= bound);
                    }
                }
            }
        }
    }

    #[test]
    fn grid_sign_matches_parity_away_from_surface() {
        let grid = unit_sphere_grid(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let p = crate::pose::sample_unit_vector(&mut rng) * rng.random_range(0.0..1.4);
            let (v, _) = grid.query(&p);
            if v.abs() <= grid.resolution() {
                continue; // within a voxel of the surface the sign may flip
            }
            assert_eq!(v < 0.0, grid.mesh().contains(&p), "at {p:?} value {v}");
        }
    }

    /// Moving half a voxel along the reported gradient should change the
    /// value by about that distance (trilinear mode; nearest-voxel lookups
    /// are piecewise constant and not differenceable).
    #[test]
    fn gradient_step_consistency_trilinear() {
        let grid = unit_sphere_grid(0.05);
        let h = grid.resolution() / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 200 {
            let r = rng.random_range(0.2..0.85);
            let p = crate::pose::sample_unit_vector(&mut rng) * r;
            if (r - 1.0f64).abs() < 2.0 * grid.resolution() {
                continue;
            }
            let (v0, g) = grid.query_trilinear(&p);
            let dir = g.normalize();
            let (v1, _) = grid.query_trilinear(&(p + dir * h));
            let delta = v1 - v0;
            assert!(
                (delta - h).abs() <= 0.3 * h,
                "at {p:?}: step {delta} expected {h}"
            );
            checked += 1;
        }
    }

    #[test]
    fn trilinear_matches_values_at_centers() {
        let grid = unit_sphere_grid(0.2);
        let [nx, ny, nz] = grid.dims();
        for (i, j, k) in [(1, 1, 1), (nx - 2, ny - 2, nz - 2), (nx / 2, ny / 2, 1)] {
            let c = grid.voxel_center(i, j, k);
            let (v, _) = grid.query_trilinear(&c);
            assert!((v - grid.value_at(i, j, k)).abs() < 1e-9);
        }
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let grid = unit_sphere_grid(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sphere.sdfg");
        grid.save(&path).unwrap();
        let loaded = SdfGrid::load(&path, grid.mesh().clone()).unwrap();
        assert_eq!(loaded.dims(), grid.dims());
        assert_eq!(loaded.resolution(), grid.resolution());
        assert_eq!(loaded.origin(), grid.origin());
        assert!((loaded.padding() - grid.padding()).abs() < 1e-6);
        let [nx, ny, nz] = grid.dims();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    assert_eq!(loaded.value_at(i, j, k), grid.value_at(i, j, k));
                    assert_eq!(loaded.gradient_at(i, j, k), grid.gradient_at(i, j, k));
                }
            }
        }
    }

    #[test]
    fn cache_key_depends_on_mesh_and_parameters() {
        let sphere = shapes::icosphere(1.0, 1);
        let box_m = shapes::box_mesh(Vector3::new(1.0, 1.0, 1.0));
        let k1 = SdfGrid::cache_key(&sphere, 0.1, 0.05);
        let k2 = SdfGrid::cache_key(&sphere, 0.2, 0.05);
        let k3 = SdfGrid::cache_key(&box_m, 0.1, 0.05);
        assert_ne!(k1, k2);
        assert_ne!(k1, k3);
        assert_eq!(k1, SdfGrid::cache_key(&sphere, 0.1, 0.05));
    }

    #[test]
    fn corrupt_cache_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sdfg");
        std::fs::write(&path, b"not a cache").unwrap();
        let mesh = Arc::new(shapes::box_mesh(Vector3::new(1.0, 1.0, 1.0)));
        assert!(matches!(
            SdfGrid::load(&path, mesh),
            Err(SdfError::BadCache(_))
        ));
    }
}
