//! Procedural watertight meshes used by the probing scenes and tests.

use nalgebra::Vector3;

use crate::mesh::TriangleMesh;

/// Axis-aligned box centered at the origin with the given full extents.
pub fn box_mesh(extents: Vector3<f64>) -> TriangleMesh {
    let h = extents / 2.0;
    let mut vertices = Vec::with_capacity(8);
    for &z in &[-h.z, h.z] {
        for &y in &[-h.y, h.y] {
            for &x in &[-h.x, h.x] {
                vertices.push(Vector3::new(x, y, z));
            }
        }
    }
    // indices: bit 0 = +x, bit 1 = +y, bit 2 = +z
    let quads: [[u32; 4]; 6] = [
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
    ];
    let mut triangles = Vec::with_capacity(12);
    for q in quads {
        triangles.push([q[0], q[1], q[2]]);
        triangles.push([q[0], q[2], q[3]]);
    }
    TriangleMesh::new(vertices, triangles).expect("box mesh is well-formed")
}

/// Icosphere: subdivided icosahedron with vertices projected to `radius`.
pub fn icosphere(radius: f64, subdivisions: u32) -> TriangleMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let mut vertices: Vec<Vector3<f64>> = raw
        .iter()
        .map(|&(x, y, z)| Vector3::new(x, y, z).normalize() * radius)
        .collect();
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: std::collections::HashMap<(u32, u32), u32> =
            std::collections::HashMap::new();
        let mut mid = |a: u32, b: u32, vertices: &mut Vec<Vector3<f64>>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let m = ((vertices[a as usize] + vertices[b as usize]) / 2.0).normalize() * radius;
                vertices.push(m);
                (vertices.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        triangles = next;
    }
    TriangleMesh::new(vertices, triangles).expect("icosphere is well-formed")
}

/// Largest radial shortfall of the tessellation: the sphere surface lies
/// within `[radius - chord_error, radius]` of the origin.
pub fn chord_error(sphere: &TriangleMesh) -> f64 {
    let r_max = sphere
        .vertices()
        .iter()
        .map(|v| v.norm())
        .fold(0.0f64, f64::max);
    let (closest, _) = sphere.closest_point(&Vector3::zeros());
    r_max - closest.norm()
}

/// Closed cylinder along z, centered at the origin.
pub fn cylinder(radius: f64, height: f64, segments: u32) -> TriangleMesh {
    assert!(segments >= 3);
    let n = segments;
    let hz = height / 2.0;
    let mut vertices = Vec::with_capacity(2 * n as usize + 2);
    for i in 0..n {
        let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        vertices.push(Vector3::new(radius * a.cos(), radius * a.sin(), -hz));
    }
    for i in 0..n {
        let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        vertices.push(Vector3::new(radius * a.cos(), radius * a.sin(), hz));
    }
    let bottom_center = vertices.len() as u32;
    vertices.push(Vector3::new(0.0, 0.0, -hz));
    let top_center = vertices.len() as u32;
    vertices.push(Vector3::new(0.0, 0.0, hz));

    let mut triangles = Vec::with_capacity(4 * n as usize);
    for i in 0..n {
        let j = (i + 1) % n;
        let (b0, b1) = (i, j);
        let (t0, t1) = (n + i, n + j);
        triangles.push([b0, b1, t1]);
        triangles.push([b0, t1, t0]);
        triangles.push([bottom_center, b1, b0]);
        triangles.push([top_center, t0, t1]);
    }
    TriangleMesh::new(vertices, triangles).expect("cylinder is well-formed")
}

/// An L-shaped prism: a long base bar with a column rising from one end,
/// extruded along y and centered at the origin. Irregular enough to act as a
/// drill-like asymmetric test object.
pub fn l_prism(
    base_length: f64,
    base_height: f64,
    column_width: f64,
    total_height: f64,
    depth: f64,
) -> TriangleMesh {
    assert!(column_width < base_length && base_height < total_height);
    let (w, h1, t, h2, d) = (base_length, base_height, column_width, total_height, depth);
    // polygon in the x-z plane; P6 splits the left wall so the cap
    // triangulation introduces no T-junctions
    let poly = [
        (0.0, 0.0),
        (w, 0.0),
        (w, h1),
        (t, h1),
        (t, h2),
        (0.0, h2),
        (0.0, h1),
    ];
    let cap: [[u32; 3]; 5] = [[0, 1, 2], [0, 2, 3], [0, 3, 6], [6, 3, 4], [6, 4, 5]];

    let mut vertices = Vec::with_capacity(14);
    for &y in &[d / 2.0, -d / 2.0] {
        for &(x, z) in &poly {
            vertices.push(Vector3::new(x, y, z));
        }
    }
    let mut triangles = Vec::with_capacity(24);
    for tri in cap {
        triangles.push(tri); // front (y = +d/2)
        triangles.push([tri[0] + 7, tri[2] + 7, tri[1] + 7]); // back, reversed
    }
    for i in 0..7u32 {
        let j = (i + 1) % 7;
        triangles.push([i, j, j + 7]);
        triangles.push([i, j + 7, i + 7]);
    }

    // center on the bounding box
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for v in &vertices {
        min = min.inf(v);
        max = max.sup(v);
    }
    let center = (min + max) / 2.0;
    for v in &mut vertices {
        *v -= center;
    }
    TriangleMesh::new(vertices, triangles).expect("L-prism is well-formed")
}
