//! Soft differentiable silhouette rasterization and hard textured
//! rasterization.
//!
//! The soft rasterizer turns a mesh into a grayscale coverage image that is
//! differentiable in the vertices and the camera: each projected triangle
//! contributes a per-pixel coverage probability (a logistic of its signed
//! squared distance to the pixel center), and probabilities combine by
//! noisy-or. As the softness scale shrinks, the image converges to the
//! binary silhouette. The hard rasterizer is a conventional z-buffer scan
//! conversion used to texture pixels once geometry is frozen.
//!
//! Coordinate convention, fixed here and relied on for bit-exact outputs:
//! pixel `(x, y)` has center `((x + 0.5) / W * 2 - 1, (y + 0.5) / H * 2 - 1)`
//! in normalized device coordinates, with y increasing downward.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera, ProjectionGrads};
use crate::grid::Grid;
use crate::par;
use crate::texture::{self, TextureImage, UVAtlas};
use crate::{Error, Result};

/// Grayscale coverage image, values in `[0, 1]`, row-major, y down.
pub type SilhouetteImage = Grid<f64>;

/// RGB image with values in `[0, 1]`, row-major, y down.
pub type RgbImage = Grid<Vector3<f64>>;

/// Softness scale used by training when none is specified.
pub const DEFAULT_SIGMA: f64 = 1e-4;

/// Raster dimensions and softness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub width: usize,
    pub height: usize,
    /// Softness of the silhouette edge, in squared normalized units.
    pub sigma: f64,
    /// Projected triangles with absolute area below this are skipped, so
    /// slivers cannot emit non-finite gradients.
    pub near_clamp: f64,
}

impl RasterConfig {
    pub fn new(width: usize, height: usize, sigma: f64) -> Result<RasterConfig> {
        if width < 8 || height < 8 {
            return Err(Error::shape(format!(
                "raster size {width}x{height} is below the 8x8 minimum"
            )));
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::shape(format!("sigma must be positive and finite, got {sigma}")));
        }
        Ok(RasterConfig {
            width,
            height,
            sigma,
            near_clamp: 1e-12,
        })
    }

    /// Center of pixel `(x, y)` in normalized coordinates.
    #[inline]
    pub fn pixel_center(&self, x: usize, y: usize) -> Vector2<f64> {
        Vector2::new(
            (x as f64 + 0.5) / self.width as f64 * 2.0 - 1.0,
            (y as f64 + 0.5) / self.height as f64 * 2.0 - 1.0,
        )
    }
}

/// One covered pixel of a [`FragmentBuffer`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub face: usize,
    /// Barycentric weights of the pixel center, ordered like the face's
    /// vertices; non-negative and summing to 1.
    pub bary: [f64; 3],
    /// Rotated z of the interpolated point; smaller is closer.
    pub depth: f64,
}

/// Z-buffered scan conversion output: the nearest fragment per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentBuffer {
    pub pixels: Grid<Option<Fragment>>,
}

impl FragmentBuffer {
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    /// Binary occupancy as a grayscale image.
    pub fn coverage(&self) -> SilhouetteImage {
        Grid::from_vec(
            self.pixels.width(),
            self.pixels.height(),
            self.pixels
                .data()
                .iter()
                .map(|f| if f.is_some() { 1.0 } else { 0.0 })
                .collect(),
        )
    }
}

#[inline]
fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

#[inline]
fn logistic(g: f64) -> f64 {
    if g >= 0.0 {
        1.0 / (1.0 + (-g).exp())
    } else {
        let e = g.exp();
        e / (1.0 + e)
    }
}

/// Distance from `p` to segment `ab` and its gradients with respect to the
/// endpoints. The gradient treats the foot-point parameter as fixed, which
/// is exact: at the optimum the parameter's own derivative drops out.
fn segment_distance_grad(
    a: &Vector2<f64>,
    b: &Vector2<f64>,
    p: &Vector2<f64>,
) -> (f64, Vector2<f64>, Vector2<f64>) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-30 {
        return ((p - a).norm(), Vector2::zeros(), Vector2::zeros());
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    let diff = p - a - ab * t;
    let dist = diff.norm();
    if dist < 1e-15 {
        // On the segment; the normal is undefined but every use multiplies
        // by a factor that vanishes at zero distance.
        return (dist, Vector2::zeros(), Vector2::zeros());
    }
    let n = diff / dist;
    (dist, -n * (1.0 - t), -n * t)
}

fn point_in_triangle(tri: &[Vector2<f64>; 3], p: &Vector2<f64>) -> bool {
    let area2 = cross2(&(tri[1] - tri[0]), &(tri[2] - tri[0]));
    let sgn = if area2 >= 0.0 { 1.0 } else { -1.0 };
    (0..3).all(|i| sgn * cross2(&(tri[(i + 1) % 3] - tri[i]), &(p - tri[i])) >= 0.0)
}

/// Signed distance from `p` to the triangle boundary: positive inside,
/// negative outside, zero on the boundary, continuous everywhere.
pub fn signed_distance_2d(tri: &[Vector2<f64>; 3], p: &Vector2<f64>) -> f64 {
    let mut dist = f64::INFINITY;
    for i in 0..3 {
        let (d, _, _) = segment_distance_grad(&tri[i], &tri[(i + 1) % 3], p);
        dist = dist.min(d);
    }
    if point_in_triangle(tri, p) {
        dist
    } else {
        -dist
    }
}

/// Signed distance plus its gradient with respect to the three corners.
/// Only the nearest edge's endpoints receive gradient.
fn signed_distance_grad(tri: &[Vector2<f64>; 3], p: &Vector2<f64>) -> (f64, [Vector2<f64>; 3]) {
    let mut best = f64::INFINITY;
    let mut best_edge = 0;
    let mut best_ga = Vector2::zeros();
    let mut best_gb = Vector2::zeros();
    for i in 0..3 {
        let (d, ga, gb) = segment_distance_grad(&tri[i], &tri[(i + 1) % 3], p);
        if d < best {
            best = d;
            best_edge = i;
            best_ga = ga;
            best_gb = gb;
        }
    }
    let sign = if point_in_triangle(tri, p) { 1.0 } else { -1.0 };
    let mut grads = [Vector2::zeros(); 3];
    grads[best_edge] = best_ga * sign;
    grads[(best_edge + 1) % 3] = best_gb * sign;
    (sign * best, grads)
}

/// A projected triangle bound to a pixel-column range.
struct BinnedTri {
    face: usize,
    verts: [usize; 3],
    tri: [Vector2<f64>; 3],
    x0: usize,
    x1: usize,
}

/// Convert a normalized-coordinate interval (already margin-expanded) to an
/// inclusive pixel-index range; `None` when it misses the image.
fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let scale = n as f64 / 2.0;
    let i0 = ((lo + 1.0) * scale - 0.5).ceil().max(0.0);
    let i1 = ((hi + 1.0) * scale - 0.5).floor().min(n as f64 - 1.0);
    if i1 < i0 {
        return None;
    }
    Some((i0 as usize, i1 as usize))
}

/// Project faces and bucket them by the pixel rows their (margin-expanded)
/// bounding boxes touch. Each row's list keeps ascending face order, which
/// fixes the per-pixel combination order independent of threading.
fn bin_triangles(
    proj: &[Vector2<f64>],
    faces: &[[usize; 3]],
    cfg: &RasterConfig,
    margin: f64,
) -> (Vec<BinnedTri>, Vec<Vec<u32>>) {
    let mut tris = Vec::new();
    let mut rows = vec![Vec::new(); cfg.height];
    for (fi, f) in faces.iter().enumerate() {
        let tri = [proj[f[0]], proj[f[1]], proj[f[2]]];
        let area2 = cross2(&(tri[1] - tri[0]), &(tri[2] - tri[0]));
        if area2.is_nan() || area2.abs() < 2.0 * cfg.near_clamp {
            continue;
        }
        let (x_lo, x_hi) = tri.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
            (a.0.min(p.x), a.1.max(p.x))
        });
        let (y_lo, y_hi) = tri.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
            (a.0.min(p.y), a.1.max(p.y))
        });
        let Some((x0, x1)) = pixel_span(x_lo - margin, x_hi + margin, cfg.width) else {
            continue;
        };
        let Some((y0, y1)) = pixel_span(y_lo - margin, y_hi + margin, cfg.height) else {
            continue;
        };
        let id = tris.len() as u32;
        tris.push(BinnedTri {
            face: fi,
            verts: *f,
            tri,
            x0,
            x1,
        });
        for row in rows.iter_mut().take(y1 + 1).skip(y0) {
            row.push(id);
        }
    }
    (tris, rows)
}

fn check_finite(vertices: &[Vector3<f64>], op: &'static str) -> Result<()> {
    for (i, v) in vertices.iter().enumerate() {
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
            return Err(Error::numeric(op, format!("vertex {i} is not finite")));
        }
    }
    Ok(())
}

/// Beyond this distance (in normalized units) outside a triangle, its
/// coverage probability underflows so far that `1 - p` rounds to exactly 1;
/// skipping such pixels leaves the output bit-identical.
fn cull_radius(sigma: f64) -> f64 {
    (46.0 * sigma).sqrt()
}

/// Differentiable soft silhouette: per pixel, one minus the product of the
/// per-face miss probabilities `1 - logistic(sign(d) d^2 / sigma)`.
pub fn soft_silhouette(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    cam: &Camera,
    cfg: &RasterConfig,
) -> Result<SilhouetteImage> {
    check_finite(vertices, "soft_silhouette")?;
    let proj = camera::project(cam, vertices);
    let r_cut = cull_radius(cfg.sigma);
    let (tris, rows) = bin_triangles(&proj, faces, cfg, r_cut);
    let row_data = par::map_indexed(cfg.height, |y| {
        let mut miss = vec![1.0f64; cfg.width];
        for id in &rows[y] {
            let t = &tris[*id as usize];
            for (x, m) in miss.iter_mut().enumerate().take(t.x1 + 1).skip(t.x0) {
                let p = cfg.pixel_center(x, y);
                let d = signed_distance_2d(&t.tri, &p);
                if d <= -r_cut {
                    continue;
                }
                *m *= 1.0 - logistic(d * d.abs() / cfg.sigma);
            }
        }
        miss.iter().map(|m| 1.0 - m).collect::<Vec<f64>>()
    });
    Ok(Grid::from_vec(
        cfg.width,
        cfg.height,
        row_data.into_iter().flatten().collect(),
    ))
}

/// Gradients of a scalar function of the soft silhouette with respect to the
/// vertices and the camera, given the function's per-pixel gradient.
///
/// Derivation: coverage `c = 1 - prod_k (1 - p_k)` gives
/// `dc/dg_j = p_j (1 - p_j) prod_{k != j} (1 - p_k) = p_j prod_k (1 - p_k)`,
/// and `dg/dd = 2 |d| / sigma`, which vanishes at `d = 0` and so cancels the
/// normal-direction singularity of the distance gradient there.
pub fn soft_silhouette_vjp(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    cam: &Camera,
    cfg: &RasterConfig,
    upstream: &SilhouetteImage,
) -> Result<ProjectionGrads> {
    check_finite(vertices, "soft_silhouette")?;
    if upstream.width() != cfg.width || upstream.height() != cfg.height {
        return Err(Error::shape(format!(
            "upstream is {}x{} but raster is {}x{}",
            upstream.width(),
            upstream.height(),
            cfg.width,
            cfg.height
        )));
    }
    let proj = camera::project(cam, vertices);
    let r_cut = cull_radius(cfg.sigma);
    let (tris, rows) = bin_triangles(&proj, faces, cfg, r_cut);
    let row_grads = par::map_indexed(cfg.height, |y| {
        let mut d_proj = vec![Vector2::<f64>::zeros(); vertices.len()];
        // Reconstruct the per-pixel miss product, then scatter gradients.
        let mut miss = vec![1.0f64; cfg.width];
        for id in &rows[y] {
            let t = &tris[*id as usize];
            for (x, m) in miss.iter_mut().enumerate().take(t.x1 + 1).skip(t.x0) {
                let p = cfg.pixel_center(x, y);
                let d = signed_distance_2d(&t.tri, &p);
                if d <= -r_cut {
                    continue;
                }
                *m *= 1.0 - logistic(d * d.abs() / cfg.sigma);
            }
        }
        for id in &rows[y] {
            let t = &tris[*id as usize];
            for (x, &mx) in miss.iter().enumerate().take(t.x1 + 1).skip(t.x0) {
                let up = *upstream.get(x, y);
                if up == 0.0 || mx == 0.0 {
                    continue;
                }
                let center = cfg.pixel_center(x, y);
                let (d, d_tri) = signed_distance_grad(&t.tri, &center);
                if d <= -r_cut {
                    continue;
                }
                let prob = logistic(d * d.abs() / cfg.sigma);
                let coef = up * prob * mx * (2.0 * d.abs() / cfg.sigma);
                for k in 0..3 {
                    d_proj[t.verts[k]] += d_tri[k] * coef;
                }
            }
        }
        d_proj
    });
    let mut d_proj = vec![Vector2::<f64>::zeros(); vertices.len()];
    for row in &row_grads {
        for (total, g) in d_proj.iter_mut().zip(row) {
            *total += g;
        }
    }
    camera::project_vjp(cam, vertices, &d_proj)
}

/// Include a boundary pixel only when it lies on a top or left edge, so
/// triangles sharing an edge cover each pixel exactly once. `e` is the edge
/// function at the pixel, `d` the edge direction, for a positively oriented
/// (y-down) triangle.
#[inline]
fn edge_covers(e: f64, d: &Vector2<f64>) -> bool {
    e > 0.0 || (e == 0.0 && ((d.y == 0.0 && d.x > 0.0) || d.y < 0.0))
}

/// Z-buffered scan conversion at pixel centers. Depth is the interpolated
/// rotated z (smaller is closer); depth ties keep the lower face index.
pub fn rasterize_hard(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    cam: &Camera,
    cfg: &RasterConfig,
) -> FragmentBuffer {
    let proj = camera::project(cam, vertices);
    let rot = camera::quat_rotate(cam.q, vertices).expect("camera quaternion is unit");
    let (tris, rows) = bin_triangles(&proj, faces, cfg, 0.0);
    let row_data = par::map_indexed(cfg.height, |y| {
        let mut row: Vec<Option<Fragment>> = vec![None; cfg.width];
        for id in &rows[y] {
            let t = &tris[*id as usize];
            let area2 = cross2(&(t.tri[1] - t.tri[0]), &(t.tri[2] - t.tri[0]));
            // Rewind to positive orientation; remember where corners 1 and 2
            // went so barycentrics land on the original corners.
            let (i1, i2) = if area2 > 0.0 { (1, 2) } else { (2, 1) };
            let (a, b, c) = (t.tri[0], t.tri[i1], t.tri[i2]);
            let (ab, bc, ca) = (b - a, c - b, a - c);
            let inv_area = 1.0 / area2.abs();
            for (x, slot) in row.iter_mut().enumerate().take(t.x1 + 1).skip(t.x0) {
                let p = cfg.pixel_center(x, y);
                let e0 = cross2(&ab, &(p - a));
                let e1 = cross2(&bc, &(p - b));
                let e2 = cross2(&ca, &(p - c));
                if !(edge_covers(e0, &ab) && edge_covers(e1, &bc) && edge_covers(e2, &ca)) {
                    continue;
                }
                let mut bary = [0.0f64; 3];
                bary[0] = e1 * inv_area;
                bary[i1] = e2 * inv_area;
                bary[i2] = e0 * inv_area;
                let depth = bary[0] * rot[t.verts[0]].z
                    + bary[1] * rot[t.verts[1]].z
                    + bary[2] * rot[t.verts[2]].z;
                let closer = match slot {
                    Some(f) => depth < f.depth,
                    None => true,
                };
                if closer {
                    *slot = Some(Fragment {
                        face: t.face,
                        bary,
                        depth,
                    });
                }
            }
        }
        row
    });
    FragmentBuffer {
        pixels: Grid::from_vec(
            cfg.width,
            cfg.height,
            row_data.into_iter().flatten().collect(),
        ),
    }
}

/// Collect the texture-space sampling coordinate of every covered pixel, in
/// row-major pixel order, together with its flat pixel index.
fn covered_coords(buf: &FragmentBuffer, uv: &UVAtlas) -> Result<(Vec<usize>, Vec<Vector2<f64>>)> {
    let mut idx = Vec::new();
    let mut coords = Vec::new();
    for (i, frag) in buf.pixels.data().iter().enumerate() {
        let Some(f) = frag else { continue };
        let Some(corners) = uv.face_uvs.get(f.face) else {
            return Err(Error::shape(format!(
                "fragment references face {} but the atlas has {}",
                f.face,
                uv.face_uvs.len()
            )));
        };
        let p = corners[0] * f.bary[0] + corners[1] * f.bary[1] + corners[2] * f.bary[2];
        // UVs in [0,1] map to the sampler's [-1,1]; u indexes columns and
        // v rows.
        idx.push(i);
        coords.push(Vector2::new(2.0 * p.x - 1.0, 2.0 * p.y - 1.0));
    }
    Ok((idx, coords))
}

/// Color covered pixels by sampling the texture at the barycentric blend of
/// the face's corner UVs; uncovered pixels are black. Linear in `tex`.
pub fn render_textured(
    buf: &FragmentBuffer,
    uv: &UVAtlas,
    tex: &TextureImage,
) -> Result<RgbImage> {
    let (idx, coords) = covered_coords(buf, uv)?;
    let samples = texture::bilinear_sample(tex, &coords)?;
    let mut img = Grid::filled(buf.width(), buf.height(), Vector3::zeros());
    for (i, color) in idx.into_iter().zip(samples) {
        img.data_mut()[i] = color;
    }
    Ok(img)
}

/// Gradient of [`render_textured`] with respect to the texture: the upstream
/// image scattered through the fixed bilinear sampling weights.
pub fn render_textured_vjp(
    buf: &FragmentBuffer,
    uv: &UVAtlas,
    tex_width: usize,
    tex_height: usize,
    upstream: &RgbImage,
) -> Result<Grid<Vector3<f64>>> {
    if upstream.width() != buf.width() || upstream.height() != buf.height() {
        return Err(Error::shape(format!(
            "upstream is {}x{} but buffer is {}x{}",
            upstream.width(),
            upstream.height(),
            buf.width(),
            buf.height()
        )));
    }
    let (idx, coords) = covered_coords(buf, uv)?;
    let ups: Vec<Vector3<f64>> = idx.iter().map(|&i| upstream.data()[i]).collect();
    texture::bilinear_image_vjp(tex_width, tex_height, &coords, &ups)
}
