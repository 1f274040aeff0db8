//! Cotangent-weighted graph Laplacian over a fixed triangulation.
//!
//! The operator is L = D - W with w_ij = (cot a_ij + cot b_ij) / 2, where
//! a_ij and b_ij are the angles opposite edge (i, j) in its two incident
//! triangles. With this sign, x' L x >= 0 for symmetric weight matrices with
//! nonnegative weights, and applying L to a convex surface points along the
//! outward vertex direction.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::Mesh;
use crate::{Error, Result};

/// Cotangent magnitudes above this are treated as numerically degenerate and
/// clamped; it corresponds to angles within ~1e-6 radians of 0 or pi.
const COT_CLAMP: f64 = 1e6;

/// Triangles with area at or below this are rejected outright.
const MIN_FACE_AREA: f64 = 1e-12;

/// Sparse symmetric Laplacian in compressed row form. Row i occupies
/// `indices[indptr[i]..indptr[i + 1]]`, columns ascending, diagonal included.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianOperator {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl LaplacianOperator {
    /// Multiply by a stack of per-vertex 3D values.
    pub fn apply(&self, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        if vertices.len() != self.n {
            return Err(Error::shape(format!(
                "operator is {}x{} but input has {} vertices",
                self.n,
                self.n,
                vertices.len()
            )));
        }
        let out = crate::par::map_indexed(self.n, |i| {
            let mut acc = Vector3::zeros();
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.values[k] * vertices[self.indices[k]];
            }
            acc
        });
        Ok(out)
    }
}

/// Apply the operator to per-vertex values; see [`LaplacianOperator::apply`].
pub fn laplacian_apply(
    op: &LaplacianOperator,
    vertices: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>> {
    op.apply(vertices)
}

/// Assemble the cotangent Laplacian of `mesh`.
///
/// Each triangle contributes cot(angle at the opposite corner) / 2 to the
/// weight of each of its edges. Cotangents are clamped to +-1e6 to keep
/// near-degenerate corners finite; zero-area faces are an error.
pub fn cotangent_laplacian(mesh: &Mesh) -> Result<LaplacianOperator> {
    let n = mesh.vertices.len();
    let mut weights: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];

    for (fi, f) in mesh.faces.iter().enumerate() {
        let p = [
            mesh.vertices[f[0]],
            mesh.vertices[f[1]],
            mesh.vertices[f[2]],
        ];
        let area2 = (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
        if area2 <= 2.0 * MIN_FACE_AREA {
            return Err(Error::geometry(format!(
                "face {fi} is degenerate (area {:.3e})",
                area2 / 2.0
            )));
        }
        // Corner c is opposite edge (a, b).
        for (c, a, b) in [(0, 1, 2), (1, 2, 0), (2, 0, 1)] {
            let u = p[a] - p[c];
            let v = p[b] - p[c];
            let cross = u.cross(&v).norm();
            let cot = if cross > 0.0 {
                (u.dot(&v) / cross).clamp(-COT_CLAMP, COT_CLAMP)
            } else {
                COT_CLAMP
            };
            let (i, j) = (f[a], f[b]);
            *weights[i].entry(j).or_insert(0.0) += cot / 2.0;
            *weights[j].entry(i).or_insert(0.0) += cot / 2.0;
        }
    }

    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for (i, row) in weights.iter().enumerate() {
        let degree: f64 = row.values().sum();
        let mut placed_diag = false;
        for (&j, &w) in row {
            if !placed_diag && j > i {
                indices.push(i);
                values.push(degree);
                placed_diag = true;
            }
            indices.push(j);
            values.push(-w);
        }
        if !placed_diag {
            indices.push(i);
            values.push(degree);
        }
        indptr.push(indices.len());
    }

    Ok(LaplacianOperator {
        n,
        indptr,
        indices,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::icosphere;
    use nalgebra::DMatrix;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dense(op: &LaplacianOperator) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(op.n, op.n);
        for i in 0..op.n {
            for k in op.indptr[i]..op.indptr[i + 1] {
                m[(i, op.indices[k])] = op.values[k];
            }
        }
        m
    }

    #[test]
    fn rows_sum_to_zero() {
        let mesh = icosphere(3).unwrap();
        let op = cotangent_laplacian(&mesh).unwrap();
        for i in 0..op.n {
            let s: f64 = (op.indptr[i]..op.indptr[i + 1]).map(|k| op.values[k]).sum();
            assert!(s.abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn matrix_is_symmetric() {
        let mesh = icosphere(2).unwrap();
        let m = dense(&cotangent_laplacian(&mesh).unwrap());
        for i in 0..m.nrows() {
            for j in 0..i {
                assert!((m[(i, j)] - m[(j, i)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn apply_matches_dense_product() {
        // Oracle: materialize the matrix and multiply densely.
        let mesh = icosphere(2).unwrap();
        let op = cotangent_laplacian(&mesh).unwrap();
        let m = dense(&op);
        let mut rng = StdRng::seed_from_u64(3);
        let x: Vec<Vector3<f64>> = (0..op.n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let fast = op.apply(&x).unwrap();
        for c in 0..3 {
            let col = DMatrix::from_iterator(op.n, 1, x.iter().map(|v| v[c]));
            let want = &m * col;
            for i in 0..op.n {
                assert!((fast[i][c] - want[(i, 0)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_form_is_nonnegative() {
        let mesh = icosphere(2).unwrap();
        let op = cotangent_laplacian(&mesh).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let x: Vec<Vector3<f64>> = (0..op.n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let lx = op.apply(&x).unwrap();
            let q: f64 = x.iter().zip(&lx).map(|(a, b)| a.dot(b)).sum();
            assert!(q >= -1e-10, "x'Lx = {q}");
        }
    }

    #[test]
    fn sphere_positions_map_outward() {
        // On a convex sphere the Laplacian of the positions points along the
        // outward normal, i.e. along the position itself.
        let mesh = icosphere(3).unwrap();
        let op = cotangent_laplacian(&mesh).unwrap();
        let lv = op.apply(&mesh.vertices).unwrap();
        for (v, l) in mesh.vertices.iter().zip(&lv) {
            let cos = l.dot(v) / (l.norm() * v.norm());
            assert!(cos > 0.99, "cosine {cos}");
        }
    }

    #[test]
    fn constant_field_is_annihilated() {
        let mesh = icosphere(2).unwrap();
        let op = cotangent_laplacian(&mesh).unwrap();
        let ones = vec![Vector3::new(1.0, 1.0, 1.0); op.n];
        for l in op.apply(&ones).unwrap() {
            assert!(l.norm() < 1e-11);
        }
    }

    #[test]
    fn rejects_degenerate_face() {
        let mesh = Mesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(2.0, 0.0, 0.0),
            ],
            faces: vec![[0, 1, 2]],
        };
        assert!(matches!(
            cotangent_laplacian(&mesh),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn rejects_size_mismatch() {
        let mesh = icosphere(1).unwrap();
        let op = cotangent_laplacian(&mesh).unwrap();
        assert!(op.apply(&mesh.vertices[..5]).is_err());
    }
}
