//! Mesh substrate: icosphere topology, mirror-symmetric shape parameters,
//! cotangent Laplacian, and convex-hull mean-shape initialization.
//!
//! Everything here is immutable after construction and safe to share across
//! threads during loss evaluation.

mod hull;
mod icosphere;
mod laplacian;
mod symmetry;

pub use hull::{convex_hull, init_mean_shape, ConvexHull3};
pub use icosphere::icosphere;
pub use laplacian::{cotangent_laplacian, laplacian_apply, LaplacianOperator};
pub use symmetry::{build_symmetry, expand_symmetric, reduce_symmetric, SymmetryMap};

use nalgebra::Vector3;

/// Triangle mesh: vertex positions plus a fixed triangle list.
///
/// Faces are counter-clockwise when viewed from outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// Check the closed-manifold invariants: every face index in range,
    /// every undirected edge shared by exactly two faces, and Euler
    /// characteristic `V - E + F = 2`.
    pub fn validate_closed_manifold(&self) -> crate::Result<()> {
        let nv = self.vertices.len();
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(self.faces.len() * 3);
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v >= nv {
                    return Err(crate::Error::geometry(format!(
                        "face {fi} references vertex {v} out of range ({nv} vertices)"
                    )));
                }
            }
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        let mut distinct = 0usize;
        let mut i = 0;
        while i < edges.len() {
            let mut j = i + 1;
            while j < edges.len() && edges[j] == edges[i] {
                j += 1;
            }
            if j - i != 2 {
                return Err(crate::Error::geometry(format!(
                    "edge ({}, {}) shared by {} faces, expected 2",
                    edges[i].0,
                    edges[i].1,
                    j - i
                )));
            }
            distinct += 1;
            i = j;
        }
        let euler = nv as i64 - distinct as i64 + self.faces.len() as i64;
        if euler != 2 {
            return Err(crate::Error::geometry(format!(
                "Euler characteristic {euler}, expected 2"
            )));
        }
        Ok(())
    }
}

/// Whether free shape parameters hold mean-shape positions or deformations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeRole {
    MeanShape,
    Deformation,
}

/// The free (symmetry-reduced) shape parameters: one 3D value per free
/// vertex. Expansion through a [`SymmetryMap`] yields the full vertex set.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeShapeParams {
    pub values: Vec<Vector3<f64>>,
    pub role: ShapeRole,
}

impl FreeShapeParams {
    pub fn zeros(free_count: usize, role: ShapeRole) -> Self {
        FreeShapeParams {
            values: vec![Vector3::zeros(); free_count],
            role,
        }
    }
}

/// Mirror a point across the x = 0 plane.
#[inline]
pub fn reflect_x(p: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-p.x, p.y, p.z)
}
