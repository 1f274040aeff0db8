//! Convex hulls via quickhull, and hull-based mean-shape initialization.

use nalgebra::Vector3;

use super::{reflect_x, FreeShapeParams, Mesh, ShapeRole, SymmetryMap};
use crate::{Error, Result};

/// Convex hull of a point cloud. `vertices` is the subset of input points on
/// the hull, in ascending input order; faces wind counter-clockwise outward.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexHull3 {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl ConvexHull3 {
    /// Outward unit normal and plane offset (n . p = d) per face.
    pub fn face_planes(&self) -> Vec<(Vector3<f64>, f64)> {
        self.faces
            .iter()
            .map(|f| {
                let (a, b, c) = (
                    self.vertices[f[0]],
                    self.vertices[f[1]],
                    self.vertices[f[2]],
                );
                let n = (b - a).cross(&(c - a)).normalize();
                (n, n.dot(&a))
            })
            .collect()
    }

    /// Largest signed distance from `p` to any face plane; <= 0 means inside.
    pub fn signed_distance(&self, p: Vector3<f64>) -> f64 {
        self.face_planes()
            .iter()
            .map(|(n, d)| n.dot(&p) - d)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Enclosed volume by the divergence theorem.
    pub fn volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let (a, b, c) = (
                    self.vertices[f[0]],
                    self.vertices[f[1]],
                    self.vertices[f[2]],
                );
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }
}

struct QFace {
    verts: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

impl QFace {
    fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Build a face from three point indices, oriented away from `interior`.
fn make_face(
    points: &[Vector3<f64>],
    mut verts: [usize; 3],
    interior: Vector3<f64>,
    scale: f64,
) -> Result<QFace> {
    let (a, b, c) = (points[verts[0]], points[verts[1]], points[verts[2]]);
    let raw = (b - a).cross(&(c - a));
    if raw.norm() <= 1e-14 * scale * scale {
        return Err(Error::geometry(
            "hull construction produced a degenerate face".to_string(),
        ));
    }
    let mut normal = raw.normalize();
    if normal.dot(&interior) > normal.dot(&a) {
        verts.swap(1, 2);
        normal = -normal;
    }
    let offset = normal.dot(&points[verts[0]]);
    Ok(QFace {
        verts,
        normal,
        offset,
        outside: Vec::new(),
        alive: true,
    })
}

/// Compute the convex hull of `points` with quickhull.
///
/// Points within 1e-10 of the bounding-box diagonal from a face plane are
/// treated as on the hull, comfortably inside the 1e-9 containment bound the
/// result guarantees. Fewer than four points, or an effectively collinear or
/// coplanar cloud (tetrahedron volume <= 1e-10 * scale^3), is a degeneracy
/// error.
pub fn convex_hull(points: &[Vector3<f64>]) -> Result<ConvexHull3> {
    let n = points.len();
    if n < 4 {
        return Err(Error::Degeneracy(format!(
            "convex hull needs at least 4 points, got {n}"
        )));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let scale = (hi - lo).norm();
    if scale == 0.0 {
        return Err(Error::Degeneracy("all points coincide".to_string()));
    }
    let eps = 1e-10 * scale;

    // Initial simplex: the most distant pair among the six axis extremes,
    // then the point farthest from their line, then from their plane.
    let mut extremes = Vec::with_capacity(6);
    for axis in [0, 1, 2] {
        let min_i = (0..n).min_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let max_i = (0..n).max_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        extremes.push(min_i.unwrap());
        extremes.push(max_i.unwrap());
    }
    let (mut i0, mut i1, mut best) = (0, 0, -1.0);
    for &a in &extremes {
        for &b in &extremes {
            let d = (points[a] - points[b]).norm();
            if d > best {
                best = d;
                i0 = a;
                i1 = b;
            }
        }
    }
    if best <= eps {
        return Err(Error::Degeneracy("all points coincide".to_string()));
    }
    let dir = (points[i1] - points[i0]).normalize();
    let i2 = (0..n)
        .max_by(|&a, &b| {
            let da = (points[a] - points[i0]).cross(&dir).norm();
            let db = (points[b] - points[i0]).cross(&dir).norm();
            da.total_cmp(&db)
        })
        .unwrap();
    if (points[i2] - points[i0]).cross(&dir).norm() <= eps {
        return Err(Error::Degeneracy("input points are collinear".to_string()));
    }
    let plane_n = (points[i1] - points[i0])
        .cross(&(points[i2] - points[i0]))
        .normalize();
    let i3 = (0..n)
        .max_by(|&a, &b| {
            let da = (points[a] - points[i0]).dot(&plane_n).abs();
            let db = (points[b] - points[i0]).dot(&plane_n).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    let e1 = points[i1] - points[i0];
    let e2 = points[i2] - points[i0];
    let e3 = points[i3] - points[i0];
    let volume = e1.cross(&e2).dot(&e3).abs() / 6.0;
    if volume <= 1e-10 * scale * scale * scale {
        return Err(Error::Degeneracy(format!(
            "input points are coplanar (simplex volume {volume:.3e})"
        )));
    }

    let interior = (points[i0] + points[i1] + points[i2] + points[i3]) / 4.0;
    let mut faces = vec![
        make_face(points, [i0, i1, i2], interior, scale)?,
        make_face(points, [i0, i1, i3], interior, scale)?,
        make_face(points, [i0, i2, i3], interior, scale)?,
        make_face(points, [i1, i2, i3], interior, scale)?,
    ];

    let simplex = [i0, i1, i2, i3];
    for (p, point) in points.iter().enumerate() {
        if simplex.contains(&p) {
            continue;
        }
        let mut best_face = None;
        let mut best_dist = eps;
        for (fi, face) in faces.iter().enumerate() {
            let d = face.distance(point);
            if d > best_dist {
                best_dist = d;
                best_face = Some(fi);
            }
        }
        if let Some(fi) = best_face {
            faces[fi].outside.push(p);
        }
    }

    let mut remaining = faces.iter().map(|f| f.outside.len()).sum::<usize>();
    let iteration_cap = 4 * n + 16;
    let mut iterations = 0;
    while remaining > 0 {
        iterations += 1;
        if iterations > iteration_cap {
            return Err(Error::geometry(
                "hull construction failed to converge".to_string(),
            ));
        }

        // Apex: the single farthest outside point over all live faces.
        let (mut apex, mut apex_dist) = (usize::MAX, -1.0);
        for face in faces.iter().filter(|f| f.alive) {
            for &p in &face.outside {
                let d = face.distance(&points[p]);
                if d > apex_dist {
                    apex_dist = d;
                    apex = p;
                }
            }
        }

        // Every live face the apex sees gets replaced.
        let visible: Vec<usize> = (0..faces.len())
            .filter(|&fi| faces[fi].alive && faces[fi].distance(&points[apex]) > eps)
            .collect();

        // Horizon: directed edges of visible faces whose reverse is not also
        // on a visible face.
        let mut directed = Vec::new();
        for &fi in &visible {
            let v = faces[fi].verts;
            directed.push((v[0], v[1]));
            directed.push((v[1], v[2]));
            directed.push((v[2], v[0]));
        }
        let horizon: Vec<(usize, usize)> = directed
            .iter()
            .copied()
            .filter(|&(a, b)| !directed.contains(&(b, a)))
            .collect();

        let mut orphans = Vec::new();
        for &fi in &visible {
            faces[fi].alive = false;
            orphans.append(&mut faces[fi].outside);
        }
        orphans.sort_unstable();
        orphans.dedup();

        let first_new = faces.len();
        for &(a, b) in &horizon {
            faces.push(make_face(points, [a, b, apex], interior, scale)?);
        }
        for p in orphans {
            if p == apex {
                continue;
            }
            let mut best_face = None;
            let mut best_dist = eps;
            for (fi, face) in faces.iter().enumerate().skip(first_new) {
                let d = face.distance(&points[p]);
                if d > best_dist {
                    best_dist = d;
                    best_face = Some(fi);
                }
            }
            if let Some(fi) = best_face {
                faces[fi].outside.push(p);
            }
        }
        remaining = faces
            .iter()
            .filter(|f| f.alive)
            .map(|f| f.outside.len())
            .sum();
    }

    // Compact to hull vertices in ascending input order.
    let mut used: Vec<usize> = faces
        .iter()
        .filter(|f| f.alive)
        .flat_map(|f| f.verts)
        .collect();
    used.sort_unstable();
    used.dedup();
    let mut remap = vec![usize::MAX; n];
    for (new, &old) in used.iter().enumerate() {
        remap[old] = new;
    }
    let hull = ConvexHull3 {
        vertices: used.iter().map(|&i| points[i]).collect(),
        faces: faces
            .iter()
            .filter(|f| f.alive)
            .map(|f| [remap[f.verts[0]], remap[f.verts[1]], remap[f.verts[2]]])
            .collect(),
    };
    Mesh {
        vertices: hull.vertices.clone(),
        faces: hull.faces.clone(),
    }
    .validate_closed_manifold()
    .map_err(|e| Error::geometry(format!("hull surface is not a closed manifold: {e}")))?;
    Ok(hull)
}

/// Initialize symmetric mean-shape parameters by projecting a sphere onto a
/// convex hull.
///
/// From the hull centroid, a ray through each sphere vertex direction is
/// intersected with the nearest hull face; the hits are then symmetrized by
/// averaging each mirror pair, so the result is exactly bilaterally
/// symmetric even when the hull is not. Topology is untouched: the sphere's
/// face list keeps serving the expanded shape.
pub fn init_mean_shape(
    hull: &ConvexHull3,
    sphere: &Mesh,
    map: &SymmetryMap,
) -> Result<FreeShapeParams> {
    if sphere.vertices.len() != map.vertex_count {
        return Err(Error::shape(format!(
            "symmetry map covers {} vertices but sphere has {}",
            map.vertex_count,
            sphere.vertices.len()
        )));
    }
    let centroid = hull.vertices.iter().sum::<Vector3<f64>>() / hull.vertices.len() as f64;
    let planes = hull.face_planes();
    for (n, d) in &planes {
        if n.dot(&centroid) >= *d {
            return Err(Error::geometry(
                "hull does not strictly contain its centroid".to_string(),
            ));
        }
    }

    let mut projected = Vec::with_capacity(sphere.vertices.len());
    for v in &sphere.vertices {
        let dir = v.normalize();
        let mut t_hit = f64::INFINITY;
        for (n, d) in &planes {
            let denom = n.dot(&dir);
            if denom > 1e-12 {
                let t = (d - n.dot(&centroid)) / denom;
                if t > 0.0 && t < t_hit {
                    t_hit = t;
                }
            }
        }
        if !t_hit.is_finite() {
            return Err(Error::geometry(
                "projection ray escaped the hull".to_string(),
            ));
        }
        projected.push(centroid + t_hit * dir);
    }

    let mut values = Vec::with_capacity(map.free_count());
    for &(i, j) in &map.pairs {
        values.push((projected[i] + reflect_x(projected[j])) / 2.0);
    }
    for &k in &map.on_plane {
        values.push(Vector3::new(0.0, projected[k].y, projected[k].z));
    }
    Ok(FreeShapeParams {
        values,
        role: ShapeRole::MeanShape,
    })
}
