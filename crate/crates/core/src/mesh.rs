//! Triangle meshes with exact signed distance queries.
//!
//! Meshes are loaded from ASCII OBJ or binary STL, validated for closedness
//! (every edge shared by exactly two triangles), and indexed by an AABB tree
//! for closest-point and ray queries. The signed distance of a point is the
//! distance to the closest surface point, negative inside, with inside-ness
//! decided by ray-crossing parity.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("unsupported mesh format: {0} (expected .obj or .stl)")]
    UnknownFormat(String),
    #[error("triangle {tri} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { tri: usize, index: u32, count: usize },
    #[error("mesh is not watertight: {open_edges} edges are not shared by exactly two triangles")]
    OpenSurface { open_edges: usize },
    #[error("mesh has no triangles")]
    Empty,
}

/// A watertight-checked triangle mesh with a bounding-volume tree for
/// closest-point and ray queries. Immutable after construction.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    watertight: bool,
    bvh: Bvh,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        if triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        for (tri, idx) in triangles.iter().enumerate() {
            for &i in idx {
                if i as usize >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange {
                        tri,
                        index: i,
                        count: vertices.len(),
                    });
                }
            }
        }
        let watertight = open_edge_count(&triangles) == 0;
        let bvh = Bvh::build(&vertices, &triangles);
        Ok(Self {
            vertices,
            triangles,
            watertight,
            bvh,
        })
    }

    /// Loads a mesh, requiring a closed surface.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let mesh = Self::load_allow_open(path)?;
        if !mesh.watertight {
            return Err(MeshError::OpenSurface {
                open_edges: open_edge_count(&mesh.triangles),
            });
        }
        Ok(mesh)
    }

    /// Loads without the watertightness requirement. Signed queries on an open
    /// mesh are unreliable; callers opt in knowingly.
    pub fn load_allow_open(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let path = path.as_ref();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        if ext != "obj" && ext != "stl" {
            return Err(MeshError::UnknownFormat(ext));
        }
        let bytes = fs::read(path).map_err(|source| MeshError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (vertices, triangles) = match ext.as_str() {
            "obj" => parse_obj(&bytes, path)?,
            _ => parse_binary_stl(&bytes, path)?,
        };
        Self::new(vertices, triangles)
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn is_watertight(&self) -> bool {
        self.watertight
    }

    pub fn triangle_vertices(&self, tri: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[tri];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_normal(&self, tri: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle_vertices(tri);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 1e-18 {
            n / len
        } else {
            Vector3::z()
        }
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            min = min.inf(v);
            max = max.sup(v);
        }
        (min, max)
    }

    /// Closest surface point to `p` and the triangle it lies on.
    pub fn closest_point(&self, p: &Vector3<f64>) -> (Vector3<f64>, usize) {
        self.bvh.closest_point(self, p)
    }

    /// Nearest ray hit within `max_t`, as `(t, point, triangle)`.
    pub fn ray_hit(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_t: f64,
    ) -> Option<(f64, Vector3<f64>, usize)> {
        self.bvh.nearest_hit(self, origin, dir, max_t)
    }

    /// Inside test by ray-crossing parity. Uses a fixed direction and retries
    /// with deterministic jitter when a crossing lands within 1e-9 of a
    /// triangle edge or vertex.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let base = Vector3::new(0.577_215_664_9, 0.618_033_988_7, 0.693_147_180_6).normalize();
        for attempt in 0u32..64 {
            let dir = if attempt == 0 {
                base
            } else {
                // splitmix-style hash for a reproducible jitter sequence
                let mut s = attempt as u64 * 0x9e37_79b9_7f4a_7c15;
                let mut next = || {
                    s = s.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1);
                    ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
                };
                (base + Vector3::new(next(), next(), next()) * 0.37).normalize()
            };
            if let Some(crossings) = self.bvh.count_crossings(self, p, &dir) {
                return crossings % 2 == 1;
            }
        }
        // every retry grazed an edge; treat as outside
        false
    }

    /// The exact signed distance and its unit gradient.
    ///
    /// The magnitude is the distance to the closest surface point `x'`; the
    /// sign is negative inside (ray parity). The gradient is the normalized
    /// `p - x'`, flipped inside so it always points toward increasing signed
    /// distance. Exactly on the surface the value is 0 and the gradient is
    /// the closest triangle's normal.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (closest, tri) = self.closest_point(p);
        let diff = p - closest;
        let dist = diff.norm();
        if dist < 1e-12 {
            return (0.0, self.triangle_normal(tri));
        }
        if self.contains(p) {
            (-dist, -diff / dist)
        } else {
            (dist, diff / dist)
        }
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    fn triangle_area(&self, tri: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(tri);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Uniform surface samples: area-weighted triangle choice plus uniform
    /// barycentric coordinates.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vector3<f64>> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cumulative.push(acc);
        }
        let total = acc;
        (0..n)
            .map(|_| {
                let r = rng.random_range(0.0..total);
                let tri = cumulative.partition_point(|&a| a < r).min(self.triangles.len() - 1);
                let [a, b, c] = self.triangle_vertices(tri);
                let mut u: f64 = rng.random_range(0.0..1.0);
                let mut v: f64 = rng.random_range(0.0..1.0);
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        fs::write(path, out)
    }

    pub fn save_stl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(&[0u8; 80]);
        buf.extend_from_slice(&(self.triangles.len() as u32).to_le_bytes());
        for t in 0..self.triangles.len() {
            let n = self.triangle_normal(t);
            for c in [n.x, n.y, n.z] {
                buf.extend_from_slice(&(c as f32).to_le_bytes());
            }
            for v in self.triangle_vertices(t) {
                for c in [v.x, v.y, v.z] {
                    buf.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
            buf.extend_from_slice(&0u16.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)
    }

    /// Content digest over vertices and indices, used to key SDF caches.
    pub fn content_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.vertices {
            for c in [v.x, v.y, v.z] {
                h.update(c.to_le_bytes());
            }
        }
        for t in &self.triangles {
            for &i in t {
                h.update(i.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

fn open_edge_count(triangles: &[[u32; 3]]) -> usize {
    let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
    for t in triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let key = (a.min(b), a.max(b));
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts.values().filter(|&&c| c != 2).count()
}

fn parse_obj(bytes: &[u8], path: &Path) -> Result<(Vec<Vector3<f64>>, Vec<[u32; 3]>), MeshError> {
    let text = std::str::from_utf8(bytes).map_err(|_| MeshError::Parse {
        path: path.display().to_string(),
        reason: "not valid UTF-8".into(),
    })?;
    let err = |line_no: usize, reason: String| MeshError::Parse {
        path: path.display().to_string(),
        reason: format!("line {}: {}", line_no + 1, reason),
    };
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut coords = [0.0; 3];
                for c in &mut coords {
                    let tok = fields
                        .next()
                        .ok_or_else(|| err(line_no, "vertex needs 3 coordinates".into()))?;
                    *c = tok
                        .parse()
                        .map_err(|_| err(line_no, format!("bad coordinate '{tok}'")))?;
                }
                vertices.push(Vector3::from(coords));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in fields {
                    let first = tok.split('/').next().unwrap_or(tok);
                    let i: i64 = first
                        .parse()
                        .map_err(|_| err(line_no, format!("bad face index '{tok}'")))?;
                    if i < 1 {
                        return Err(err(line_no, format!("face index {i} must be positive")));
                    }
                    idx.push((i - 1) as u32);
                }
                if idx.len() < 3 {
                    return Err(err(line_no, "face needs at least 3 vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {} // comments, normals, groups, materials
        }
    }
    Ok((vertices, triangles))
}

fn parse_binary_stl(
    bytes: &[u8],
    path: &Path,
) -> Result<(Vec<Vector3<f64>>, Vec<[u32; 3]>), MeshError> {
    let err = |reason: &str| MeshError::Parse {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    if bytes.len() < 84 {
        return Err(err("file shorter than the 84-byte binary STL header"));
    }
    let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    let expected = 84 + count * 50;
    if bytes.len() < expected {
        return Err(err(&format!(
            "expected {expected} bytes for {count} triangles, got {}",
            bytes.len()
        )));
    }
    // STL repeats vertices per facet; merge exact duplicates so edge-sharing
    // (and thus the watertight check) is observable.
    let mut vertex_ids: HashMap<[u32; 3], u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::with_capacity(count);
    for f in 0..count {
        let base = 84 + f * 50 + 12; // skip the facet normal
        let mut tri = [0u32; 3];
        for (v, slot) in tri.iter_mut().enumerate() {
            let off = base + v * 12;
            let bits = [
                u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()),
                u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()),
                u32::from_le_bytes(bytes[off + 8..off + 12].try_into().unwrap()),
            ];
            let next_id = vertices.len() as u32;
            let id = *vertex_ids.entry(bits).or_insert_with(|| {
                vertices.push(Vector3::new(
                    f32::from_bits(bits[0]) as f64,
                    f32::from_bits(bits[1]) as f64,
                    f32::from_bits(bits[2]) as f64,
                ));
                next_id
            });
            *slot = id;
        }
        triangles.push(tri);
    }
    Ok((vertices, triangles))
}

/// Closest point on a triangle (Ericson, Real-Time Collision Detection).
fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Möller-Trumbore. Returns `(t, u, v, det)`; `u, v` are barycentric
/// coordinates of the hit and `det` indicates how parallel the ray is.
fn ray_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Option<(f64, f64, f64, f64)> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv;
    if !(-1e-9..=1.0 + 1e-9).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < -1e-9 || u + v > 1.0 + 1e-9 {
        return None;
    }
    let t = e2.dot(&qvec) * inv;
    Some((t, u, v, det))
}

#[derive(Debug, Clone)]
struct BvhNode {
    min: Vector3<f64>,
    max: Vector3<f64>,
    /// Leaf when `count > 0`: triangles `order[start..start+count]`.
    /// Internal otherwise: children at `start` and `start + 1`.
    start: u32,
    count: u32,
}

/// Binary AABB tree over triangles, median-split on the longest axis.
#[derive(Debug, Clone)]
struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

const BVH_LEAF_SIZE: usize = 4;

impl Bvh {
    fn build(vertices: &[Vector3<f64>], triangles: &[[u32; 3]]) -> Self {
        let centroids: Vec<Vector3<f64>> = triangles
            .iter()
            .map(|t| {
                (vertices[t[0] as usize] + vertices[t[1] as usize] + vertices[t[2] as usize]) / 3.0
            })
            .collect();
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let mut nodes = Vec::new();
        let bounds = |tris: &[u32]| {
            let mut min = Vector3::repeat(f64::INFINITY);
            let mut max = Vector3::repeat(f64::NEG_INFINITY);
            for &t in tris {
                for &vi in &triangles[t as usize] {
                    min = min.inf(&vertices[vi as usize]);
                    max = max.sup(&vertices[vi as usize]);
                }
            }
            (min, max)
        };
        // worklist of (node index, range) to avoid recursion
        nodes.push(BvhNode {
            min: Vector3::zeros(),
            max: Vector3::zeros(),
            start: 0,
            count: 0,
        });
        let mut stack = vec![(0usize, 0usize, triangles.len())];
        while let Some((node_idx, lo, hi)) = stack.pop() {
            let (min, max) = bounds(&order[lo..hi]);
            let count = hi - lo;
            if count <= BVH_LEAF_SIZE {
                nodes[node_idx] = BvhNode {
                    min,
                    max,
                    start: lo as u32,
                    count: count as u32,
                };
                continue;
            }
            let ext = max - min;
            let axis = if ext.x >= ext.y && ext.x >= ext.z {
                0
            } else if ext.y >= ext.z {
                1
            } else {
                2
            };
            let mid = lo + count / 2;
            order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
                centroids[a as usize][axis]
                    .partial_cmp(&centroids[b as usize][axis])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let left = nodes.len();
            nodes.push(BvhNode {
                min: Vector3::zeros(),
                max: Vector3::zeros(),
                start: 0,
                count: 0,
            });
            nodes.push(BvhNode {
                min: Vector3::zeros(),
                max: Vector3::zeros(),
                start: 0,
                count: 0,
            });
            nodes[node_idx] = BvhNode {
                min,
                max,
                start: left as u32,
                count: 0,
            };
            stack.push((left, lo, mid));
            stack.push((left + 1, mid, hi));
        }
        Self { nodes, order }
    }

    fn box_dist_sq(node: &BvhNode, p: &Vector3<f64>) -> f64 {
        let mut d = 0.0;
        for i in 0..3 {
            let v = if p[i] < node.min[i] {
                node.min[i] - p[i]
            } else if p[i] > node.max[i] {
                p[i] - node.max[i]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    fn closest_point(&self, mesh: &TriangleMesh, p: &Vector3<f64>) -> (Vector3<f64>, usize) {
        let mut best_d = f64::INFINITY;
        let mut best = (Vector3::zeros(), 0usize);
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if Self::box_dist_sq(node, p) >= best_d {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let [a, b, c] = mesh.triangle_vertices(t as usize);
                    let q = closest_point_on_triangle(p, &a, &b, &c);
                    let d = (p - q).norm_squared();
                    if d < best_d {
                        best_d = d;
                        best = (q, t as usize);
                    }
                }
            } else {
                let l = node.start as usize;
                let r = l + 1;
                let dl = Self::box_dist_sq(&self.nodes[l], p);
                let dr = Self::box_dist_sq(&self.nodes[r], p);
                // push the farther child first so the nearer is explored first
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }

    fn ray_box(node: &BvhNode, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, max_t: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = max_t;
        for i in 0..3 {
            let a = (node.min[i] - origin[i]) * inv_dir[i];
            let b = (node.max[i] - origin[i]) * inv_dir[i];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    fn nearest_hit(
        &self,
        mesh: &TriangleMesh,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_t: f64,
    ) -> Option<(f64, Vector3<f64>, usize)> {
        let inv = Vector3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<(f64, Vector3<f64>, usize)> = None;
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            let limit = best.map_or(max_t, |(t, _, _)| t);
            if !Self::ray_box(node, origin, &inv, limit) {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let [a, b, c] = mesh.triangle_vertices(t as usize);
                    if let Some((hit_t, _, _, _)) = ray_triangle(origin, dir, &a, &b, &c) {
                        if hit_t > 1e-12 && hit_t <= limit && best.map_or(true, |(bt, _, _)| hit_t < bt)
                        {
                            best = Some((hit_t, origin + dir * hit_t, t as usize));
                        }
                    }
                }
            } else {
                stack.push(node.start as usize);
                stack.push(node.start as usize + 1);
            }
        }
        best
    }

    /// Crossing count for the parity test. `None` when any hit grazes an edge
    /// or vertex (barycentric coordinate within 1e-9 of the boundary), which
    /// signals the caller to retry with a jittered direction.
    fn count_crossings(&self, mesh: &TriangleMesh, p: &Vector3<f64>, dir: &Vector3<f64>) -> Option<u32> {
        let inv = Vector3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut crossings = 0u32;
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if !Self::ray_box(node, p, &inv, f64::INFINITY) {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let [a, b, c] = mesh.triangle_vertices(t as usize);
                    if let Some((hit_t, u, v, det)) = ray_triangle(p, dir, &a, &b, &c) {
                        if hit_t <= 1e-12 {
                            continue;
                        }
                        let w = 1.0 - u - v;
                        if u < 1e-9 || v < 1e-9 || w < 1e-9 || det.abs() < 1e-12 {
                            return None;
                        }
                        crossings += 1;
                    }
                }
            } else {
                stack.push(node.start as usize);
                stack.push(node.start as usize + 1);
            }
        }
        Some(crossings)
    }
}
