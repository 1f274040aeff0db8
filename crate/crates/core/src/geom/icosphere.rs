//! Unit icosphere by recursive subdivision of an icosahedron.

use std::collections::HashMap;

use nalgebra::Vector3;

use super::Mesh;
use crate::{Error, Result};

/// Subdivision ceiling. Level 6 is already 40962 vertices; anything beyond
/// that is a caller bug, not a use case.
const MAX_LEVEL: u32 = 8;

/// Build a unit-radius icosphere with `level` rounds of 4-to-1 subdivision.
///
/// Vertex and face counts are `10 * 4^level + 2` and `20 * 4^level`. The
/// vertex set is closed under mirroring across x = 0: the base icosahedron
/// places vertices at cyclic permutations of (0, ±1, ±φ), and subdivision
/// midpoints inherit the symmetry exactly (negation and normalization are
/// bitwise mirror-safe in IEEE arithmetic).
///
/// Vertex order is deterministic: the 12 base vertices first, then midpoints
/// in order of first appearance while scanning faces.
pub fn icosphere(level: u32) -> Result<Mesh> {
    if level > MAX_LEVEL {
        return Err(Error::Capacity(format!(
            "icosphere level {level} exceeds maximum {MAX_LEVEL}"
        )));
    }
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut vertices: Vec<Vector3<f64>> = raw
        .iter()
        .map(|&[x, y, z]| Vector3::new(x, y, z).normalize())
        .collect();
    let mut faces: Vec<[usize; 3]> = vec![
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

    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let m01 = midpoint(&mut vertices, &mut midpoints, f[0], f[1]);
            let m12 = midpoint(&mut vertices, &mut midpoints, f[1], f[2]);
            let m20 = midpoint(&mut vertices, &mut midpoints, f[2], f[0]);
            next_faces.push([f[0], m01, m20]);
            next_faces.push([f[1], m12, m01]);
            next_faces.push([f[2], m20, m12]);
            next_faces.push([m01, m12, m20]);
        }
        faces = next_faces;
    }

    Ok(Mesh { vertices, faces })
}

/// Index of the normalized midpoint of edge (a, b), creating it on first use.
/// The key is the sorted index pair, so both faces sharing an edge agree.
fn midpoint(
    vertices: &mut Vec<Vector3<f64>>,
    cache: &mut HashMap<(usize, usize), usize>,
    a: usize,
    b: usize,
) -> usize {
    let key = (a.min(b), a.max(b));
    if let Some(&idx) = cache.get(&key) {
        return idx;
    }
    let m = ((vertices[a] + vertices[b]) / 2.0).normalize();
    let idx = vertices.len();
    vertices.push(m);
    cache.insert(key, idx);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_subdivision_formula() {
        for level in 0..=4 {
            let mesh = icosphere(level).unwrap();
            let scale = 4usize.pow(level);
            assert_eq!(mesh.vertices.len(), 10 * scale + 2, "level {level}");
            assert_eq!(mesh.faces.len(), 20 * scale, "level {level}");
        }
    }

    #[test]
    fn level_three_has_canonical_size() {
        let mesh = icosphere(3).unwrap();
        assert_eq!(mesh.vertices.len(), 642);
        assert_eq!(mesh.faces.len(), 1280);
    }

    #[test]
    fn vertices_lie_on_unit_sphere() {
        let mesh = icosphere(3).unwrap();
        for v in &mesh.vertices {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn is_closed_manifold() {
        for level in 0..=3 {
            icosphere(level).unwrap().validate_closed_manifold().unwrap();
        }
    }

    #[test]
    fn faces_wind_counter_clockwise_outward() {
        let mesh = icosphere(2).unwrap();
        for f in &mesh.faces {
            let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
            let n = (b - a).cross(&(c - a));
            let centroid = (a + b + c) / 3.0;
            assert!(n.dot(&centroid) > 0.0);
        }
    }

    #[test]
    fn vertex_set_closed_under_mirroring() {
        // Every vertex's mirror image is itself a vertex, bit-exactly.
        let mesh = icosphere(3).unwrap();
        for v in &mesh.vertices {
            let m = super::super::reflect_x(*v);
            assert!(
                mesh.vertices.iter().any(|u| u == &m),
                "mirror of {v:?} missing"
            );
        }
    }

    #[test]
    fn rejects_excessive_level() {
        assert!(matches!(icosphere(9), Err(Error::Capacity(_))));
    }
}
