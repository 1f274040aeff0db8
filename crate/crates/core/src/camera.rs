//! Weak-perspective cameras, keypoint structure-from-motion, and similarity
//! alignment.
//!
//! A camera is (s, t, q): uniform scale, 2D translation in normalized image
//! units, and a unit quaternion (w, x, y, z) with w >= 0 so each rotation has
//! one representative. Projection drops z after rotating:
//! x = s * (R(q) P)_xy + t.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Quaternion norms below this are rejected as unrecoverable.
const QUAT_ZERO_TOL: f64 = 1e-12;

/// Weak-perspective camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Positive uniform scale.
    pub s: f64,
    /// Translation in normalized image coordinates.
    pub t: Vector2<f64>,
    /// Unit quaternion (w, x, y, z), canonical sign w >= 0.
    pub q: Vector4<f64>,
}

impl Camera {
    /// Validate and canonicalize camera parameters.
    pub fn new(s: f64, t: Vector2<f64>, q: Vector4<f64>) -> Result<Camera> {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::geometry(format!(
                "camera scale must be positive and finite, got {s}"
            )));
        }
        if !t.x.is_finite() || !t.y.is_finite() {
            return Err(Error::geometry("camera translation must be finite".to_string()));
        }
        let q = quat_canonical(quat_normalize(q)?);
        Ok(Camera { s, t, q })
    }

    /// Identity camera: unit scale, no translation, no rotation.
    pub fn identity() -> Camera {
        Camera {
            s: 1.0,
            t: Vector2::zeros(),
            q: Vector4::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotation(self.q)
    }
}

/// Per-instance 2D keypoint observations in normalized image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointObservations {
    pub points: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
}

impl KeypointObservations {
    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Structure-from-motion output: mean 3D keypoints, one camera per instance,
/// and per-instance RMS reprojection residual over visible keypoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SfmResult {
    pub keypoints: Vec<Vector3<f64>>,
    pub cameras: Vec<Camera>,
    pub residuals: Vec<f64>,
}

/// Normalize a quaternion, rejecting effectively-zero input.
pub fn quat_normalize(q: Vector4<f64>) -> Result<Vector4<f64>> {
    let n = q.norm();
    if !n.is_finite() || n < QUAT_ZERO_TOL {
        return Err(Error::InvalidRotation(format!(
            "quaternion norm {n:.3e} is not usable"
        )));
    }
    Ok(q / n)
}

/// Pick the double-cover representative with w >= 0 (ties broken by the first
/// nonzero component).
pub fn quat_canonical(q: Vector4<f64>) -> Vector4<f64> {
    for c in 0..4 {
        if q[c] > 0.0 {
            return q;
        }
        if q[c] < 0.0 {
            return -q;
        }
    }
    q
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_rotation(q: Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion (w >= 0) of a rotation matrix, via the largest-pivot
/// branch for stability.
pub fn rotation_to_quat(r: &Matrix3<f64>) -> Vector4<f64> {
    let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Vector4::new(
            s / 4.0,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            s / 4.0,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            s / 4.0,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            s / 4.0,
        )
    };
    quat_canonical(q.normalize())
}

/// Rotate a point set by a unit quaternion. A slightly denormalized
/// quaternion is renormalized; a zero quaternion is an error.
pub fn quat_rotate(q: Vector4<f64>, points: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    let r = quat_to_rotation(quat_normalize(q)?);
    Ok(points.iter().map(|p| r * p).collect())
}

/// Project points through a weak-perspective camera.
pub fn project(cam: &Camera, points: &[Vector3<f64>]) -> Vec<Vector2<f64>> {
    let r = cam.rotation();
    points
        .iter()
        .map(|p| {
            let rp = r * p;
            Vector2::new(cam.s * rp.x + cam.t.x, cam.s * rp.y + cam.t.y)
        })
        .collect()
}

/// Partial derivatives of the rotation matrix with respect to the four
/// quaternion components, at a unit quaternion.
fn rotation_jacobian(q: Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        2.0 * Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0),
        2.0 * Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x),
        2.0 * Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y),
        2.0 * Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0),
    ]
}

/// Gradients pulled back through [`project`].
#[derive(Clone, Debug)]
pub struct ProjectionGrads {
    pub d_s: f64,
    pub d_t: Vector2<f64>,
    /// Quaternion gradient projected onto the tangent of the unit sphere at
    /// q, i.e. the gradient of the renormalized parameterization.
    pub d_q: Vector4<f64>,
    pub d_points: Vec<Vector3<f64>>,
}

/// Pull an upstream gradient on the projected points back to the camera
/// parameters and the 3D points.
pub fn project_vjp(
    cam: &Camera,
    points: &[Vector3<f64>],
    upstream: &[Vector2<f64>],
) -> Result<ProjectionGrads> {
    if points.len() != upstream.len() {
        return Err(Error::shape(format!(
            "{} points but {} upstream gradients",
            points.len(),
            upstream.len()
        )));
    }
    let r = cam.rotation();
    let dr = rotation_jacobian(cam.q);
    let mut d_s = 0.0;
    let mut d_t = Vector2::zeros();
    let mut d_q = Vector4::zeros();
    let mut d_points = Vec::with_capacity(points.len());
    for (p, g) in points.iter().zip(upstream) {
        let rp = r * p;
        d_s += g.x * rp.x + g.y * rp.y;
        d_t += g;
        for c in 0..4 {
            let dp = dr[c] * p;
            d_q[c] += cam.s * (g.x * dp.x + g.y * dp.y);
        }
        d_points.push(cam.s * (g.x * r.row(0).transpose() + g.y * r.row(1).transpose()));
    }
    d_q -= cam.q * d_q.dot(&cam.q);
    Ok(ProjectionGrads {
        d_s,
        d_t,
        d_q,
        d_points,
    })
}

/// Squared discrepancy between two cameras:
/// (s_a - s_b)^2 + |t_a - t_b|^2 + 2 (1 - <q_a, q_b>^2).
///
/// The rotation term is invariant to the quaternion double cover and zero
/// exactly when the rotations coincide.
pub fn camera_distance(a: &Camera, b: &Camera) -> f64 {
    let dq = a.q.dot(&b.q);
    (a.s - b.s).powi(2) + (a.t - b.t).norm_squared() + 2.0 * (1.0 - dq * dq)
}

/// Gradient of [`camera_distance`] with respect to the first camera.
#[derive(Clone, Copy, Debug)]
pub struct CameraGrad {
    pub d_s: f64,
    pub d_t: Vector2<f64>,
    /// Tangent-projected at a.q.
    pub d_q: Vector4<f64>,
}

pub fn camera_distance_grad(a: &Camera, b: &Camera) -> (f64, CameraGrad) {
    let dq = a.q.dot(&b.q);
    let value = (a.s - b.s).powi(2) + (a.t - b.t).norm_squared() + 2.0 * (1.0 - dq * dq);
    let mut d_q = -4.0 * dq * b.q;
    d_q -= a.q * d_q.dot(&a.q);
    (
        value,
        CameraGrad {
            d_s: 2.0 * (a.s - b.s),
            d_t: 2.0 * (a.t - b.t),
            d_q,
        },
    )
}

/// Similarity transform p -> scale * rotation * p + translation.
#[derive(Clone, Copy, Debug)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Least-squares similarity (Procrustes with scale, reflection allowed)
/// mapping `src` onto `dst`, minimizing sum |s R a + t - b|^2.
pub fn align_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::shape(format!(
            "alignment needs two equal point sets of >= 3, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mu_src = src.iter().sum::<Vector3<f64>>() / n;
    let mu_dst = dst.iter().sum::<Vector3<f64>>() / n;
    let var_src = src.iter().map(|p| (p - mu_src).norm_squared()).sum::<f64>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        cov += (b - mu_dst) * (a - mu_src).transpose() / n;
    }
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    if var_src < 1e-18 || sv[1] <= 1e-9 * sv[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Degeneracy(
            "alignment points span a degenerate subspace".to_string(),
        ));
    }
    let rotation = svd.u.unwrap() * svd.v_t.unwrap();
    let scale = (sv[0] + sv[1] + sv[2]) / var_src;
    let translation = mu_dst - scale * (rotation * mu_src);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Coefficient row of u' Q v for the 6-vector packing of symmetric Q:
/// (q11, q12, q13, q22, q23, q33).
fn gram_row(u: Vector3<f64>, v: Vector3<f64>) -> [f64; 6] {
    [
        u[0] * v[0],
        u[0] * v[1] + u[1] * v[0],
        u[0] * v[2] + u[2] * v[0],
        u[1] * v[1],
        u[1] * v[2] + u[2] * v[1],
        u[2] * v[2],
    ]
}

/// Nearest proper rotation to a 3x3 matrix, by SVD.
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let det = (u * v_t).determinant();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum())) * v_t
}

/// The rotation whose projection of x-mirrored structure matches this
/// rotation's projection of the original: negate x in the two projection
/// rows and complete the third by cross product.
fn mirror_camera_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let mut r1 = r.row(0).transpose();
    let mut r2 = r.row(1).transpose();
    r1.x = -r1.x;
    r2.x = -r2.x;
    let r3 = r1.cross(&r2);
    Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()])
}

/// Recover mean keypoint structure and per-instance cameras from 2D keypoint
/// observations by rank-3 factorization.
///
/// Missing entries are imputed from per-keypoint column means and refined by
/// alternating factorize / re-impute rounds. The metric upgrade solves the
/// scaled-orthographic Gram constraints (equal-norm, orthogonal projection
/// rows per camera) in least squares. `lr_pairs` lists (left, right)
/// keypoint index pairs; when non-empty they fix the reflection (left mean
/// x < 0) and align the best-fit symmetry plane to x = 0, with the cameras
/// compensated so projections are unchanged. Cameras are polished by a short
/// gradient refinement of the visible reprojection error; the structure is
/// left as factorized so its centering and alignment survive.
pub fn sfm_factorize(
    obs: &[KeypointObservations],
    lr_pairs: &[(usize, usize)],
) -> Result<SfmResult> {
    let n_inst = obs.len();
    if n_inst < 3 {
        return Err(Error::data(format!(
            "structure from motion needs >= 3 instances, got {n_inst}"
        )));
    }
    let k = obs[0].points.len();
    if k < 4 {
        return Err(Error::data(format!(
            "structure from motion needs >= 4 keypoints, got {k}"
        )));
    }
    for (i, o) in obs.iter().enumerate() {
        if o.points.len() != k || o.visible.len() != k {
            return Err(Error::data(format!(
                "instance {i} has {} keypoints and {} flags, expected {k}",
                o.points.len(),
                o.visible.len()
            )));
        }
        if o.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::data(format!("instance {i} has non-finite keypoints")));
        }
        if o.visible_count() < 4 {
            return Err(Error::data(format!(
                "instance {i} has fewer than 4 visible keypoints"
            )));
        }
    }
    for &(l, r) in lr_pairs {
        if l >= k || r >= k {
            return Err(Error::data(format!(
                "left/right pair ({l}, {r}) out of range for {k} keypoints"
            )));
        }
    }

    // Measurement matrix: rows 2i, 2i+1 hold instance i's x and y
    // coordinates. Missing entries start at the per-keypoint mean of the
    // visible entries for the same coordinate.
    let mut w = DMatrix::zeros(2 * n_inst, k);
    let mut missing = Vec::new();
    for kp in 0..k {
        let mut sum = Vector2::zeros();
        let mut count = 0.0;
        for o in obs {
            if o.visible[kp] {
                sum += o.points[kp];
                count += 1.0;
            }
        }
        if count == 0.0 {
            return Err(Error::data(format!("keypoint {kp} is never visible")));
        }
        let mean = sum / count;
        for (i, o) in obs.iter().enumerate() {
            if o.visible[kp] {
                w[(2 * i, kp)] = o.points[kp].x;
                w[(2 * i + 1, kp)] = o.points[kp].y;
            } else {
                w[(2 * i, kp)] = mean.x;
                w[(2 * i + 1, kp)] = mean.y;
                missing.push((i, kp));
            }
        }
    }

    let factor = |w: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        let row_means = DVector::from_iterator(2 * n_inst, (0..2 * n_inst).map(|r| w.row(r).mean()));
        let mut centered = w.clone();
        for r in 0..2 * n_inst {
            centered.row_mut(r).add_scalar_mut(-row_means[r]);
        }
        let svd = centered.svd(true, true);
        let sv = &svd.singular_values;
        if sv.len() < 3 || sv[2] <= 1e-9 * sv[0] {
            return Err(Error::DegenerateMotion(
                "measurement matrix has rank < 3; cameras or structure are degenerate"
                    .to_string(),
            ));
        }
        let u = svd.u.as_ref().unwrap();
        let v_t = svd.v_t.as_ref().unwrap();
        let mut motion = DMatrix::zeros(2 * n_inst, 3);
        let mut structure = DMatrix::zeros(3, k);
        for c in 0..3 {
            let root = sv[c].sqrt();
            for r in 0..2 * n_inst {
                motion[(r, c)] = u[(r, c)] * root;
            }
            for j in 0..k {
                structure[(c, j)] = v_t[(c, j)] * root;
            }
        }
        Ok((motion, structure, row_means))
    };

    // Alternate factorization and re-imputation so hidden entries settle on
    // the rank-3 model's predictions.
    let rounds = if missing.is_empty() { 0 } else { 10 };
    for _ in 0..rounds {
        let (motion, structure, row_means) = factor(&w)?;
        for &(i, kp) in &missing {
            for coord in 0..2 {
                let r = 2 * i + coord;
                let pred = motion.row(r).transpose().dot(&structure.column(kp)) + row_means[r];
                w[(r, kp)] = pred;
            }
        }
    }
    let (motion, structure, _) = factor(&w)?;

    // Metric upgrade: find symmetric Q = G G' making each camera's two rows
    // equal-norm and orthogonal, with the first camera's row norm fixed to 1.
    let mut a = DMatrix::zeros(2 * n_inst + 1, 6);
    let mut rhs = DVector::zeros(2 * n_inst + 1);
    for i in 0..n_inst {
        let ai = Vector3::new(motion[(2 * i, 0)], motion[(2 * i, 1)], motion[(2 * i, 2)]);
        let bi = Vector3::new(
            motion[(2 * i + 1, 0)],
            motion[(2 * i + 1, 1)],
            motion[(2 * i + 1, 2)],
        );
        let eq = gram_row(ai, ai);
        let bq = gram_row(bi, bi);
        for c in 0..6 {
            a[(2 * i, c)] = eq[c] - bq[c];
        }
        let orth = gram_row(ai, bi);
        for c in 0..6 {
            a[(2 * i + 1, c)] = orth[c];
        }
    }
    let a0 = Vector3::new(motion[(0, 0)], motion[(0, 1)], motion[(0, 2)]);
    let norm_row = gram_row(a0, a0);
    for c in 0..6 {
        a[(2 * n_inst, c)] = norm_row[c];
    }
    rhs[2 * n_inst] = 1.0;
    let svd = a.svd(true, true);
    if svd.singular_values[5] <= 1e-12 * svd.singular_values[0] {
        return Err(Error::DegenerateMotion(
            "metric upgrade is underdetermined; camera motion is too restricted".to_string(),
        ));
    }
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::DegenerateMotion(format!("metric upgrade failed: {e}")))?;
    let q_mat = Matrix3::new(
        sol[0], sol[1], sol[2], sol[1], sol[3], sol[4], sol[2], sol[4], sol[5],
    );
    let eig = nalgebra::SymmetricEigen::new(q_mat);
    let lam_max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    if !lam_max.is_finite() || lam_max <= 0.0 {
        return Err(Error::DegenerateMotion(
            "metric upgrade produced a non-positive Gram matrix".to_string(),
        ));
    }
    let floor = 1e-12 * lam_max;
    let roots = eig.eigenvalues.map(|l| l.max(floor).sqrt());
    let g = eig.eigenvectors * Matrix3::from_diagonal(&roots);
    let g_inv = Matrix3::from_diagonal(&roots.map(|r| 1.0 / r)) * eig.eigenvectors.transpose();

    let metric_motion = &motion * g;
    let mut b: Vec<Vector3<f64>> = (0..k)
        .map(|j| g_inv * Vector3::new(structure[(0, j)], structure[(1, j)], structure[(2, j)]))
        .collect();

    // Per-camera scale and rotation from the metric motion rows.
    let mut scales = Vec::with_capacity(n_inst);
    let mut rotations = Vec::with_capacity(n_inst);
    for i in 0..n_inst {
        let ai = Vector3::new(
            metric_motion[(2 * i, 0)],
            metric_motion[(2 * i, 1)],
            metric_motion[(2 * i, 2)],
        );
        let bi = Vector3::new(
            metric_motion[(2 * i + 1, 0)],
            metric_motion[(2 * i + 1, 1)],
            metric_motion[(2 * i + 1, 2)],
        );
        let (na, nb) = (ai.norm(), bi.norm());
        if na < 1e-12 || nb < 1e-12 {
            return Err(Error::DegenerateMotion(format!(
                "camera {i} has a vanishing projection row"
            )));
        }
        scales.push((na + nb) / 2.0);
        let r1 = ai / na;
        let r2 = bi / nb;
        let r3 = r1.cross(&r2);
        let stacked = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
        rotations.push(nearest_rotation(&stacked));
    }

    // Orthographic data cannot distinguish the structure from its mirror
    // image; both choices reproject identically. Canonical pick: the one
    // whose first camera is closest to the identity rotation (largest w in
    // canonical form). Left/right labels below can override this.
    {
        let q0 = rotation_to_quat(&rotations[0]);
        let q0m = rotation_to_quat(&mirror_camera_rotation(&rotations[0]));
        if q0m[0] > q0[0] {
            for p in &mut b {
                p.x = -p.x;
            }
            for r in &mut rotations {
                *r = mirror_camera_rotation(r);
            }
        }
    }

    // Gauge fixing from left/right keypoint labels: align the symmetry plane
    // to x = 0, canonicalize the roll about x, and resolve the reflection.
    if !lr_pairs.is_empty() {
        let pairs: Vec<(usize, usize)> = lr_pairs.iter().copied().filter(|&(l, r)| l != r).collect();
        if !pairs.is_empty() {
            let mut outer = Matrix3::zeros();
            for &(l, r) in &pairs {
                let d = b[l] - b[r];
                outer += d * d.transpose();
            }
            let eig = nalgebra::SymmetricEigen::new(outer);
            let mut max_c = 0;
            for c in 1..3 {
                if eig.eigenvalues[c] > eig.eigenvalues[max_c] {
                    max_c = c;
                }
            }
            let normal: Vector3<f64> = eig.eigenvectors.column(max_c).into();

            // Rotation taking the plane normal to e_x.
            let e_x = Vector3::new(1.0, 0.0, 0.0);
            let axis = normal.cross(&e_x);
            let sin = axis.norm();
            let cos = normal.dot(&e_x);
            let u_rot = if sin < 1e-12 {
                if cos > 0.0 {
                    Matrix3::identity()
                } else {
                    Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0))
                }
            } else {
                let k_hat = axis / sin;
                let k_cross = Matrix3::new(
                    0.0, -k_hat.z, k_hat.y, k_hat.z, 0.0, -k_hat.x, -k_hat.y, k_hat.x, 0.0,
                );
                Matrix3::identity() + sin * k_cross + (1.0 - cos) * k_cross * k_cross
            };
            for p in &mut b {
                *p = u_rot * *p;
            }
            // Plane offset from pair midpoints, removed along x.
            let offset = pairs
                .iter()
                .map(|&(l, r)| (b[l].x + b[r].x) / 2.0)
                .sum::<f64>()
                / pairs.len() as f64;
            for p in &mut b {
                p.x -= offset;
            }

            // Roll about x: principal yz direction to +z, sign so the first
            // keypoint has z >= 0.
            let mut yz = Matrix2::zeros();
            for p in &b {
                let v = Vector2::new(p.y, p.z);
                yz += v * v.transpose();
            }
            let eig2 = nalgebra::SymmetricEigen::new(yz);
            let dir = if eig2.eigenvalues[0] >= eig2.eigenvalues[1] {
                eig2.eigenvectors.column(0)
            } else {
                eig2.eigenvectors.column(1)
            };
            let (py, pz) = {
                let u = Vector2::new(dir[0], dir[1]).normalize();
                (u.x, u.y)
            };
            let mut roll = Matrix3::new(1.0, 0.0, 0.0, 0.0, pz, -py, 0.0, py, pz);
            if (roll * b[0]).z < 0.0 {
                // Compose a half turn about x, still a proper rotation.
                roll = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)) * roll;
            }
            for p in &mut b {
                *p = roll * *p;
            }
            // Cameras see p' = (roll * u_rot) p plus a shift along the
            // plane normal; the shift is absorbed when t is set from the
            // visible centroids below, so only rotations need compensating.
            let total = roll * u_rot;
            for r in &mut rotations {
                *r *= total.transpose();
            }

            // Reflection: left keypoints belong at x < 0.
            let mean_left = pairs.iter().map(|&(l, _)| b[l].x).sum::<f64>() / pairs.len() as f64;
            if mean_left > 0.0 {
                for p in &mut b {
                    p.x = -p.x;
                }
                for r in &mut rotations {
                    *r = mirror_camera_rotation(r);
                }
            }
        }
    }

    // Translations from visible centroids; with centered structure the
    // centroid of s (R B)_xy vanishes, so this is the least-squares t.
    let mut cameras = Vec::with_capacity(n_inst);
    for (i, o) in obs.iter().enumerate() {
        let mut centroid = Vector2::zeros();
        let mut count = 0.0;
        for (p, &vis) in o.points.iter().zip(&o.visible) {
            if vis {
                centroid += p;
                count += 1.0;
            }
        }
        centroid /= count;
        // Visible-only centroid of the projected structure, so partial
        // visibility does not bias t.
        let mut proj_centroid = Vector2::zeros();
        for (kp, &vis) in o.visible.iter().enumerate() {
            if vis {
                let rp = rotations[i] * b[kp];
                proj_centroid += scales[i] * Vector2::new(rp.x, rp.y);
            }
        }
        proj_centroid /= count;
        cameras.push(Camera::new(
            scales[i].max(1e-6),
            centroid - proj_centroid,
            rotation_to_quat(&rotations[i]),
        )?);
    }

    refine_cameras(&mut cameras, obs, &b);

    let residuals = obs
        .iter()
        .zip(&cameras)
        .map(|(o, cam)| {
            let proj = project(cam, &b);
            let mut sq = 0.0;
            let mut count = 0.0;
            for (kp, &vis) in o.visible.iter().enumerate() {
                if vis {
                    sq += (proj[kp] - o.points[kp]).norm_squared();
                    count += 1.0;
                }
            }
            (sq / count).sqrt()
        })
        .collect();

    Ok(SfmResult {
        keypoints: b,
        cameras,
        residuals,
    })
}

/// Polish cameras by Adam on the mean squared visible reprojection error,
/// holding the structure fixed. Keeps the best iterate; warns if no progress
/// was possible on a non-trivial residual.
fn refine_cameras(cameras: &mut [Camera], obs: &[KeypointObservations], b: &[Vector3<f64>]) {
    const ITERS: usize = 200;
    const LR: f64 = 5e-3;
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    let total_visible: f64 = obs.iter().map(|o| o.visible_count() as f64).sum();
    let loss_of = |cams: &[Camera]| -> f64 {
        let mut total = 0.0;
        for (o, cam) in obs.iter().zip(cams) {
            let proj = project(cam, b);
            for (kp, &vis) in o.visible.iter().enumerate() {
                if vis {
                    total += (proj[kp] - o.points[kp]).norm_squared();
                }
            }
        }
        total / total_visible
    };

    let initial = loss_of(cameras);
    let mut best = initial;
    let mut best_cams = cameras.to_vec();
    // Per-camera Adam state over the 7 parameters (s, t, q).
    let mut m = vec![[0.0; 7]; cameras.len()];
    let mut v = vec![[0.0; 7]; cameras.len()];

    for step in 1..=ITERS {
        for (i, o) in obs.iter().enumerate() {
            let cam = &cameras[i];
            let proj = project(cam, b);
            let upstream: Vec<Vector2<f64>> = proj
                .iter()
                .zip(&o.points)
                .zip(&o.visible)
                .map(|((p, x), &vis)| {
                    if vis {
                        2.0 * (p - x) / total_visible
                    } else {
                        Vector2::zeros()
                    }
                })
                .collect();
            let grads = match project_vjp(cam, b, &upstream) {
                Ok(g) => g,
                Err(_) => return,
            };
            let g = [
                grads.d_s,
                grads.d_t.x,
                grads.d_t.y,
                grads.d_q[0],
                grads.d_q[1],
                grads.d_q[2],
                grads.d_q[3],
            ];
            let mut delta = [0.0; 7];
            for c in 0..7 {
                m[i][c] = BETA1 * m[i][c] + (1.0 - BETA1) * g[c];
                v[i][c] = BETA2 * v[i][c] + (1.0 - BETA2) * g[c] * g[c];
                let mh = m[i][c] / (1.0 - BETA1.powi(step as i32));
                let vh = v[i][c] / (1.0 - BETA2.powi(step as i32));
                delta[c] = LR * mh / (vh.sqrt() + EPS);
            }
            let cam = &mut cameras[i];
            cam.s = (cam.s - delta[0]).max(1e-3);
            cam.t.x -= delta[1];
            cam.t.y -= delta[2];
            let mut q = cam.q - Vector4::new(delta[3], delta[4], delta[5], delta[6]);
            if let Ok(qn) = quat_normalize(q) {
                q = qn;
            } else {
                q = cam.q;
            }
            cam.q = q;
        }
        let loss = loss_of(cameras);
        if loss < best {
            best = loss;
            best_cams = cameras.to_vec();
        }
    }
    cameras.copy_from_slice(&best_cams);
    for cam in cameras.iter_mut() {
        cam.q = quat_canonical(cam.q);
    }
    if best >= initial * (1.0 - 1e-9) && initial > 1e-14 {
        eprintln!(
            "warning: camera refinement made no progress (residual {best:.3e}); keeping best iterate"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_unit_quat(rng: &mut StdRng) -> Vector4<f64> {
        loop {
            let q = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() > 0.1 {
                return quat_canonical(q.normalize());
            }
        }
    }

    fn random_camera(rng: &mut StdRng) -> Camera {
        Camera {
            s: rng.gen_range(0.5..2.0),
            t: Vector2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
            q: random_unit_quat(rng),
        }
    }

    fn random_point(rng: &mut StdRng) -> Vector3<f64> {
        Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
    }

    /// Rodrigues rotation about a unit axis, the reference construction.
    fn axis_angle_matrix(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = Matrix3::new(
            0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0,
        );
        Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * k * k
    }

    #[test]
    fn identity_quaternion_is_a_no_op() {
        let q = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let p = vec![Vector3::new(1.0, 2.0, 3.0)];
        let out = quat_rotate(q, &p).unwrap();
        assert_eq!(out[0], p[0]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let q = Vector4::new(h, 0.0, 0.0, h);
        let out = quat_rotate(q, &[Vector3::new(1.0, 0.0, 0.0)]).unwrap();
        assert!((out[0] - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn quaternion_rotation_matches_axis_angle() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..50 {
            let axis = random_point(&mut rng).normalize();
            let angle: f64 = rng.gen_range(-3.0..3.0);
            let q = Vector4::new(
                (angle / 2.0).cos(),
                (angle / 2.0).sin() * axis.x,
                (angle / 2.0).sin() * axis.y,
                (angle / 2.0).sin() * axis.z,
            );
            let r = quat_to_rotation(q);
            let want = axis_angle_matrix(axis, angle);
            assert!((r - want).norm() < 1e-12);
            assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
            let p = random_point(&mut rng);
            assert!(((r * p).norm() - p.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        let q = Vector4::zeros();
        assert!(matches!(
            quat_rotate(q, &[Vector3::x()]),
            Err(Error::InvalidRotation(_))
        ));
    }

    #[test]
    fn quaternion_matrix_round_trip() {
        let mut rng = StdRng::seed_from_u64(22);
        for _ in 0..100 {
            let q = random_unit_quat(&mut rng);
            let back = rotation_to_quat(&quat_to_rotation(q));
            assert!((back - q).norm() < 1e-9, "{q:?} vs {back:?}");
        }
    }

    #[test]
    fn projection_examples() {
        let cam = Camera::identity();
        let out = project(&cam, &[Vector3::new(1.0, 2.0, 3.0)]);
        assert_eq!(out[0], Vector2::new(1.0, 2.0));

        let cam = Camera::new(
            2.0,
            Vector2::new(1.0, 1.0),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
        )
        .unwrap();
        let out = project(&cam, &[Vector3::new(1.0, 2.0, 3.0)]);
        assert_eq!(out[0], Vector2::new(3.0, 5.0));
    }

    #[test]
    fn projection_is_translation_equivariant() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..20 {
            let cam = random_camera(&mut rng);
            let p = random_point(&mut rng);
            let v = random_point(&mut rng);
            let base = project(&cam, &[p])[0];
            let moved = project(&cam, &[p + v])[0];
            let rv = cam.rotation() * v;
            let want = base + cam.s * Vector2::new(rv.x, rv.y);
            assert!((moved - want).norm() < 1e-12);
        }
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        // Directional derivatives of u . project(cam, P) along random
        // parameter directions, against central differences. Quaternion
        // steps walk the renormalized path, matching the tangent-projected
        // gradient.
        let mut rng = StdRng::seed_from_u64(24);
        let h = 1e-6;
        for _ in 0..100 {
            let cam = random_camera(&mut rng);
            let points: Vec<Vector3<f64>> = (0..5).map(|_| random_point(&mut rng)).collect();
            let upstream: Vec<Vector2<f64>> = (0..5)
                .map(|_| Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let phi = |cam: &Camera, pts: &[Vector3<f64>]| -> f64 {
                project(cam, pts)
                    .iter()
                    .zip(&upstream)
                    .map(|(p, u)| p.dot(u))
                    .sum()
            };
            let g = project_vjp(&cam, &points, &upstream).unwrap();

            // Scale.
            let mut ca = cam;
            let mut cb = cam;
            ca.s += h;
            cb.s -= h;
            let fd = (phi(&ca, &points) - phi(&cb, &points)) / (2.0 * h);
            assert!((fd - g.d_s).abs() < 1e-6 * (1.0 + fd.abs()), "s: {fd} vs {}", g.d_s);

            // Translation.
            for c in 0..2 {
                let mut ca = cam;
                let mut cb = cam;
                ca.t[c] += h;
                cb.t[c] -= h;
                let fd = (phi(&ca, &points) - phi(&cb, &points)) / (2.0 * h);
                assert!((fd - g.d_t[c]).abs() < 1e-6 * (1.0 + fd.abs()));
            }

            // Quaternion along a random tangent step, renormalized.
            let dq = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let mut ca = cam;
            let mut cb = cam;
            ca.q = (cam.q + h * dq).normalize();
            cb.q = (cam.q - h * dq).normalize();
            let fd = (phi(&ca, &points) - phi(&cb, &points)) / (2.0 * h);
            let want = g.d_q.dot(&dq);
            assert!((fd - want).abs() < 1e-6 * (1.0 + fd.abs()), "q: {fd} vs {want}");

            // Points.
            for (i, _) in points.iter().enumerate() {
                let dir = random_point(&mut rng);
                let mut pa = points.clone();
                let mut pb = points.clone();
                pa[i] += h * dir;
                pb[i] -= h * dir;
                let fd = (phi(&cam, &pa) - phi(&cam, &pb)) / (2.0 * h);
                let want = g.d_points[i].dot(&dir);
                assert!((fd - want).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn camera_distance_examples() {
        let a = Camera::identity();
        assert_eq!(camera_distance(&a, &a), 0.0);

        let mut rng = StdRng::seed_from_u64(25);
        let c = random_camera(&mut rng);
        let mut neg = c;
        neg.q = -c.q;
        assert!(camera_distance(&c, &neg).abs() < 1e-12);

        // Half turn about x: orthogonal quaternions.
        let b = Camera {
            s: 1.0,
            t: Vector2::zeros(),
            q: Vector4::new(0.0, 1.0, 0.0, 0.0),
        };
        assert!((camera_distance(&a, &b) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn camera_distance_is_a_sampled_pseudometric() {
        let mut rng = StdRng::seed_from_u64(26);
        for _ in 0..30 {
            let a = random_camera(&mut rng);
            let b = random_camera(&mut rng);
            let d_ab = camera_distance(&a, &b);
            let d_ba = camera_distance(&b, &a);
            assert!(d_ab >= 0.0);
            assert!((d_ab - d_ba).abs() < 1e-12);
            if d_ab < 1e-15 {
                for _ in 0..5 {
                    let p = random_point(&mut rng);
                    let pa = project(&a, &[p])[0];
                    let pb = project(&b, &[p])[0];
                    assert!((pa - pb).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn camera_distance_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(27);
        let h = 1e-6;
        for _ in 0..100 {
            let a = random_camera(&mut rng);
            let b = random_camera(&mut rng);
            let (_, g) = camera_distance_grad(&a, &b);

            let mut aa = a;
            let mut ab = a;
            aa.s += h;
            ab.s -= h;
            let fd = (camera_distance(&aa, &b) - camera_distance(&ab, &b)) / (2.0 * h);
            assert!((fd - g.d_s).abs() < 1e-5 * (1.0 + fd.abs()));

            for c in 0..2 {
                let mut aa = a;
                let mut ab = a;
                aa.t[c] += h;
                ab.t[c] -= h;
                let fd = (camera_distance(&aa, &b) - camera_distance(&ab, &b)) / (2.0 * h);
                assert!((fd - g.d_t[c]).abs() < 1e-5 * (1.0 + fd.abs()));
            }

            let dq = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let mut aa = a;
            let mut ab = a;
            aa.q = (a.q + h * dq).normalize();
            ab.q = (a.q - h * dq).normalize();
            let fd = (camera_distance(&aa, &b) - camera_distance(&ab, &b)) / (2.0 * h);
            let want = g.d_q.dot(&dq);
            assert!((fd - want).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn alignment_examples() {
        let mut rng = StdRng::seed_from_u64(28);
        let a: Vec<Vector3<f64>> = (0..10).map(|_| random_point(&mut rng)).collect();

        let id = align_similarity(&a, &a).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-10);
        assert!(id.translation.norm() < 1e-12);

        let b: Vec<Vector3<f64>> = a
            .iter()
            .map(|p| 2.0 * p + Vector3::new(1.0, 1.0, 1.0))
            .collect();
        let sim = align_similarity(&a, &b).unwrap();
        assert!((sim.scale - 2.0).abs() < 1e-12);
        assert!((sim.rotation - Matrix3::identity()).norm() < 1e-10);
        assert!((sim.translation - Vector3::new(1.0, 1.0, 1.0)).norm() < 1e-10);
    }

    #[test]
    fn alignment_recovers_random_similarity() {
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..20 {
            let a: Vec<Vector3<f64>> = (0..12).map(|_| random_point(&mut rng)).collect();
            let r = quat_to_rotation(random_unit_quat(&mut rng));
            let s = rng.gen_range(0.3..3.0);
            let t = random_point(&mut rng);
            let b: Vec<Vector3<f64>> = a.iter().map(|p| s * (r * p) + t).collect();
            let sim = align_similarity(&a, &b).unwrap();
            for (pa, pb) in a.iter().zip(&b) {
                assert!((sim.apply(*pa) - pb).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn alignment_rejects_degenerate_span() {
        let line: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            align_similarity(&line, &line),
            Err(Error::Degeneracy(_))
        ));
    }

    /// Random non-coplanar keypoints plus random cameras, projected exactly.
    fn synthetic_scene(
        n_inst: usize,
        n_kp: usize,
        seed: u64,
    ) -> (Vec<Vector3<f64>>, Vec<Camera>, Vec<KeypointObservations>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut b: Vec<Vector3<f64>> = (0..n_kp).map(|_| random_point(&mut rng)).collect();
        let centroid = b.iter().sum::<Vector3<f64>>() / n_kp as f64;
        for p in &mut b {
            *p -= centroid;
        }
        let cameras: Vec<Camera> = (0..n_inst)
            .map(|_| Camera {
                s: rng.gen_range(0.7..1.3),
                t: Vector2::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
                q: random_unit_quat(&mut rng),
            })
            .collect();
        let obs = cameras
            .iter()
            .map(|cam| KeypointObservations {
                points: project(cam, &b),
                visible: vec![true; n_kp],
            })
            .collect();
        (b, cameras, obs)
    }

    /// Flip a recovered scene through x = 0; reprojections are unchanged.
    fn mirror_scene(mut result: SfmResult) -> SfmResult {
        for p in &mut result.keypoints {
            p.x = -p.x;
        }
        for cam in &mut result.cameras {
            cam.q = rotation_to_quat(&mirror_camera_rotation(&cam.rotation()));
        }
        result
    }

    #[test]
    fn sfm_recovers_noiseless_scene() {
        let (b_true, cams_true, obs) = synthetic_scene(8, 15, 31);
        let mut result = sfm_factorize(&obs, &[]).unwrap();

        for r in &result.residuals {
            assert!(*r < 1e-8, "residual {r}");
        }

        // Without left/right labels the recovered scene may be the mirror
        // image of the truth; both reproject identically, so take whichever
        // hypothesis aligns with a proper rotation.
        let mut sim = align_similarity(&result.keypoints, &b_true).unwrap();
        if sim.rotation.determinant() < 0.0 {
            result = mirror_scene(result);
            sim = align_similarity(&result.keypoints, &b_true).unwrap();
        }
        assert!(sim.rotation.determinant() > 0.0);

        let scale = (b_true.iter().map(|p| p.norm_squared()).sum::<f64>() / 15.0).sqrt();
        let rmse = (result
            .keypoints
            .iter()
            .zip(&b_true)
            .map(|(a, c)| (sim.apply(*a) - c).norm_squared())
            .sum::<f64>()
            / 15.0)
            .sqrt();
        assert!(rmse < 1e-6 * scale, "rmse {rmse}, scale {scale}");

        // Cameras act on the aligned structure through R_rec R_align', which
        // should match the true rotation.
        for (rec, truth) in result.cameras.iter().zip(&cams_true) {
            let r_aligned = rec.rotation() * sim.rotation.transpose();
            let rel = r_aligned * truth.rotation().transpose();
            let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            let deg = cos.acos().to_degrees();
            assert!(deg < 0.1, "rotation error {deg} degrees");
        }
    }

    #[test]
    fn sfm_rejects_shared_camera() {
        let mut rng = StdRng::seed_from_u64(33);
        let b: Vec<Vector3<f64>> = (0..10).map(|_| random_point(&mut rng)).collect();
        let cam = random_camera(&mut rng);
        let obs: Vec<KeypointObservations> = (0..5)
            .map(|_| KeypointObservations {
                points: project(&cam, &b),
                visible: vec![true; 10],
            })
            .collect();
        assert!(matches!(
            sfm_factorize(&obs, &[]),
            Err(Error::DegenerateMotion(_))
        ));
    }

    #[test]
    fn sfm_handles_hidden_keypoints() {
        let (b_true, _, mut obs) = synthetic_scene(12, 15, 35);
        let mut rng = StdRng::seed_from_u64(36);
        for o in &mut obs {
            for v in o.visible.iter_mut() {
                if rng.gen_range(0.0..1.0) < 0.2 {
                    *v = false;
                }
            }
            while o.visible_count() < 6 {
                let i = rng.gen_range(0..o.visible.len());
                o.visible[i] = true;
            }
        }
        let result = sfm_factorize(&obs, &[]).unwrap();
        let sim = align_similarity(&result.keypoints, &b_true).unwrap();
        let scale = (b_true.iter().map(|p| p.norm_squared()).sum::<f64>() / 15.0).sqrt();
        let rmse = (result
            .keypoints
            .iter()
            .zip(&b_true)
            .map(|(a, c)| (sim.apply(*a) - c).norm_squared())
            .sum::<f64>()
            / 15.0)
            .sqrt();
        assert!(rmse < 2e-2 * scale, "rmse {rmse}, scale {scale}");
    }

    #[test]
    fn sfm_aligns_symmetry_plane_and_reflection() {
        // Mirror-symmetric structure with labeled left/right pairs; the
        // recovered keypoints must sit symmetrically about x = 0 with left
        // labels on the negative side.
        let mut rng = StdRng::seed_from_u64(37);
        let mut b = Vec::new();
        let mut lr = Vec::new();
        for _ in 0..6 {
            let p = Vector3::new(
                rng.gen_range(0.2..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let left = Vector3::new(-p.x, p.y, p.z);
            lr.push((b.len(), b.len() + 1));
            b.push(left);
            b.push(p);
        }
        b.push(Vector3::new(0.0, 0.7, 0.1));
        b.push(Vector3::new(0.0, -0.4, 0.6));
        let centroid = b.iter().sum::<Vector3<f64>>() / b.len() as f64;
        for p in &mut b {
            *p -= centroid;
        }
        // Scatter through a random frame so the plane is not axis-aligned.
        let frame = quat_to_rotation(random_unit_quat(&mut rng));
        let scattered: Vec<Vector3<f64>> = b.iter().map(|p| frame * p).collect();
        let obs: Vec<KeypointObservations> = (0..10)
            .map(|_| {
                let cam = random_camera(&mut rng);
                KeypointObservations {
                    points: project(&cam, &scattered),
                    visible: vec![true; scattered.len()],
                }
            })
            .collect();

        let result = sfm_factorize(&obs, &lr).unwrap();
        let kps = &result.keypoints;
        for &(l, r) in &lr {
            assert!(
                (kps[l].x + kps[r].x).abs() < 1e-6,
                "pair ({l}, {r}) not mirrored: {} vs {}",
                kps[l].x,
                kps[r].x
            );
            assert!((kps[l].y - kps[r].y).abs() < 1e-6);
            assert!((kps[l].z - kps[r].z).abs() < 1e-6);
            assert!(kps[l].x < 0.0, "left keypoint {l} has x = {}", kps[l].x);
        }
        for r in &result.residuals {
            assert!(*r < 1e-6, "residual {r}");
        }
    }
}
