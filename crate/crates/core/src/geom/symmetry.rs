//! Bilateral symmetry across the x = 0 plane.
//!
//! Shape parameters live in a reduced space with one value per *free*
//! vertex; expansion mirrors each paired value to its partner and pins
//! on-plane vertices to x = 0. Reduction is the adjoint of expansion, which
//! is what routes full-vertex gradients back to the free parameters.

use nalgebra::Vector3;

use super::{reflect_x, FreeShapeParams};
use crate::{Error, Result};

/// Pairing of mesh vertices under mirroring across x = 0.
///
/// `pairs` lists each mirrored couple once, smaller index first, sorted by
/// that index. `on_plane` lists vertices with |x| within tolerance of the
/// plane, ascending. Free-parameter order is all pairs first (one value per
/// pair, owned by the smaller index), then the on-plane vertices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymmetryMap {
    pub pairs: Vec<(usize, usize)>,
    pub on_plane: Vec<usize>,
    pub vertex_count: usize,
}

impl SymmetryMap {
    pub fn free_count(&self) -> usize {
        self.pairs.len() + self.on_plane.len()
    }

    /// For each vertex, the index of its mirror partner (itself if on-plane).
    pub fn mirror_vertex(&self) -> Vec<usize> {
        let mut mirror = vec![usize::MAX; self.vertex_count];
        for &(i, j) in &self.pairs {
            mirror[i] = j;
            mirror[j] = i;
        }
        for &k in &self.on_plane {
            mirror[k] = k;
        }
        mirror
    }
}

/// Classify every vertex as on-plane or one half of a mirrored pair.
///
/// A vertex with |x| <= `tol` is on-plane; any other vertex must have a
/// partner within `tol` of its exact mirror image, or the mesh is rejected.
pub fn build_symmetry(vertices: &[Vector3<f64>], tol: f64) -> Result<SymmetryMap> {
    let n = vertices.len();
    let mut assigned = vec![false; n];
    let mut pairs = Vec::new();
    let mut on_plane = Vec::new();

    for i in 0..n {
        if assigned[i] {
            continue;
        }
        if vertices[i].x.abs() <= tol {
            on_plane.push(i);
            assigned[i] = true;
            continue;
        }
        let target = reflect_x(vertices[i]);
        let mut best: Option<(usize, f64)> = None;
        for (j, v) in vertices.iter().enumerate() {
            if j == i || assigned[j] {
                continue;
            }
            let d = (v - target).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, d)) if d <= tol => {
                pairs.push((i.min(j), i.max(j)));
                assigned[i] = true;
                assigned[j] = true;
            }
            _ => return Err(Error::AsymmetricMesh { index: i, tol }),
        }
    }

    Ok(SymmetryMap {
        pairs,
        on_plane,
        vertex_count: n,
    })
}

/// Expand free parameters to the full vertex set.
///
/// Paired vertices receive the free value and its mirror image; on-plane
/// vertices receive the free value with x forced to exactly zero. The output
/// is therefore mirror-symmetric by construction.
pub fn expand_symmetric(map: &SymmetryMap, free: &FreeShapeParams) -> Result<Vec<Vector3<f64>>> {
    if free.values.len() != map.free_count() {
        return Err(Error::shape(format!(
            "expected {} free values, got {}",
            map.free_count(),
            free.values.len()
        )));
    }
    let mut full = vec![Vector3::zeros(); map.vertex_count];
    for (f, &(i, j)) in map.pairs.iter().enumerate() {
        full[i] = free.values[f];
        full[j] = reflect_x(free.values[f]);
    }
    let base = map.pairs.len();
    for (f, &k) in map.on_plane.iter().enumerate() {
        let v = free.values[base + f];
        full[k] = Vector3::new(0.0, v.y, v.z);
    }
    Ok(full)
}

/// Adjoint of [`expand_symmetric`]: pull a full-vertex gradient back to the
/// free parameters. Pair gradients sum the direct and mirrored contributions;
/// on-plane gradients drop the x component, matching the pinned coordinate.
pub fn reduce_symmetric(map: &SymmetryMap, full: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    if full.len() != map.vertex_count {
        return Err(Error::shape(format!(
            "expected {} vertex values, got {}",
            map.vertex_count,
            full.len()
        )));
    }
    let mut free = vec![Vector3::zeros(); map.free_count()];
    for (f, &(i, j)) in map.pairs.iter().enumerate() {
        free[f] = full[i] + reflect_x(full[j]);
    }
    let base = map.pairs.len();
    for (f, &k) in map.on_plane.iter().enumerate() {
        free[base + f] = Vector3::new(0.0, full[k].y, full[k].z);
    }
    Ok(free)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{icosphere, ShapeRole};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const TOL: f64 = 1e-8;

    fn random_free(map: &SymmetryMap, rng: &mut StdRng) -> FreeShapeParams {
        FreeShapeParams {
            values: (0..map.free_count())
                .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
            role: ShapeRole::Deformation,
        }
    }

    #[test]
    fn icosphere_level_three_partition() {
        let mesh = icosphere(3).unwrap();
        let map = build_symmetry(&mesh.vertices, TOL).unwrap();
        assert_eq!(map.pairs.len(), 305);
        assert_eq!(map.on_plane.len(), 32);
        assert_eq!(map.free_count(), 337);
        assert_eq!(map.vertex_count, 642);
    }

    #[test]
    fn pairs_are_sorted_and_disjoint() {
        let mesh = icosphere(2).unwrap();
        let map = build_symmetry(&mesh.vertices, TOL).unwrap();
        let mut seen = vec![false; map.vertex_count];
        for &(i, j) in &map.pairs {
            assert!(i < j);
            assert!(!seen[i] && !seen[j]);
            seen[i] = true;
            seen[j] = true;
        }
        for &k in &map.on_plane {
            assert!(!seen[k]);
            seen[k] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert!(map.pairs.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn expansion_is_exactly_mirror_symmetric() {
        let mesh = icosphere(3).unwrap();
        let map = build_symmetry(&mesh.vertices, TOL).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let full = expand_symmetric(&map, &random_free(&map, &mut rng)).unwrap();
        let mirror = map.mirror_vertex();
        for (i, v) in full.iter().enumerate() {
            assert_eq!(reflect_x(*v), full[mirror[i]]);
        }
        for &k in &map.on_plane {
            assert_eq!(full[k].x, 0.0);
        }
    }

    #[test]
    fn reduce_is_adjoint_of_expand() {
        // <expand(x), y> == <x, reduce(y)> for arbitrary x, y: the defining
        // property that makes reduce the correct gradient pullback.
        let mesh = icosphere(1).unwrap();
        let map = build_symmetry(&mesh.vertices, TOL).unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_free(&map, &mut rng);
            let y: Vec<Vector3<f64>> = (0..map.vertex_count)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let ex = expand_symmetric(&map, &x).unwrap();
            let ry = reduce_symmetric(&map, &y).unwrap();
            let lhs: f64 = ex.iter().zip(&y).map(|(a, b)| a.dot(b)).sum();
            let rhs: f64 = x.values.iter().zip(&ry).map(|(a, b)| a.dot(b)).sum();
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn rejects_asymmetric_cloud() {
        let pts = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.1, 0.0),
        ];
        match build_symmetry(&pts, 1e-6) {
            Err(Error::AsymmetricMesh { index: 0, .. }) => {}
            other => panic!("expected AsymmetricMesh, got {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_free_length() {
        let mesh = icosphere(1).unwrap();
        let map = build_symmetry(&mesh.vertices, TOL).unwrap();
        let bad = FreeShapeParams::zeros(map.free_count() + 1, ShapeRole::Deformation);
        assert!(expand_symmetric(&map, &bad).is_err());
    }
}
