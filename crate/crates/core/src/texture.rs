//! Spherical UV atlas, bilinear texture-flow sampling, and the exact
//! Euclidean distance transform.
//!
//! Appearance lives in a UV image: the unit sphere is unwrapped
//! equirectangularly (folded across x = 0 so mirrored faces share texture),
//! and each UV pixel stores a coordinate into the instance photo from which
//! its color is sampled. Sampling is bilinear everywhere so gradients reach
//! the flow coordinates.

use nalgebra::{Vector2, Vector3};
use std::f64::consts::{PI, TAU};

use crate::geom::{Mesh, SymmetryMap};
use crate::grid::Grid;
use crate::{Error, Result};

/// Default UV image size, equirectangular 1:2 (rows = v, columns = u).
pub const UV_HEIGHT: usize = 64;
pub const UV_WIDTH: usize = 128;

/// RGB image in UV space, values in [0, 1].
pub type TextureImage = Grid<Vector3<f64>>;

/// Per-pixel distance (in pixels) to the nearest foreground pixel.
pub type DistanceField = Grid<f64>;

/// Per-face-corner UV coordinates in [0,1]^2. Mirrored faces carry the same
/// UV triangle, so one texture paints both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct UVAtlas {
    pub face_uvs: Vec<[Vector2<f64>; 3]>,
}

/// Squared xy-norm below which a vertex counts as a pole of the sphere.
const POLE_TOL2: f64 = 1e-12;

/// Equirectangular UV atlas of the unit sphere, folded across x = 0.
///
/// Per corner: u = atan2(y, -|x|) / 2pi + 0.5 (the fold sends mirror
/// vertices to identical u), v = acos(z) / pi. The u seam at y = 0 is fixed
/// per face by shifting corners +1 until the face's u extent is below 0.5,
/// then clamping to [0,1]. Pole corners take the mean u of the face's other
/// corners.
pub fn sphere_uv(sphere: &Mesh, map: &SymmetryMap) -> Result<UVAtlas> {
    if sphere.vertices.len() != map.vertex_count {
        return Err(Error::shape(format!(
            "symmetry map covers {} vertices but sphere has {}",
            map.vertex_count,
            sphere.vertices.len()
        )));
    }
    for (i, p) in sphere.vertices.iter().enumerate() {
        if (p.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::geometry(format!(
                "vertex {i} is off the unit sphere (norm {})",
                p.norm()
            )));
        }
    }

    let per_vertex: Vec<(f64, f64, bool)> = sphere
        .vertices
        .iter()
        .map(|p| {
            let pole = p.x * p.x + p.y * p.y < POLE_TOL2;
            let u = p.y.atan2(-p.x.abs()) / TAU + 0.5;
            let v = p.z.clamp(-1.0, 1.0).acos() / PI;
            (u, v, pole)
        })
        .collect();

    let mut face_uvs = Vec::with_capacity(sphere.faces.len());
    for (fi, f) in sphere.faces.iter().enumerate() {
        let corners = [per_vertex[f[0]], per_vertex[f[1]], per_vertex[f[2]]];
        let n_pole = corners.iter().filter(|c| c.2).count();
        if n_pole > 1 {
            return Err(Error::geometry(format!(
                "face {fi} touches more than one pole"
            )));
        }
        let mut us = [corners[0].0, corners[1].0, corners[2].0];

        // Unwrap the seam using only non-pole corners.
        let extent = |us: &[f64; 3]| -> (f64, f64) {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (c, u) in us.iter().enumerate() {
                if !corners[c].2 {
                    lo = lo.min(*u);
                    hi = hi.max(*u);
                }
            }
            (lo, hi)
        };
        let (lo, hi) = extent(&us);
        if hi - lo > 0.5 {
            for (c, u) in us.iter_mut().enumerate() {
                if !corners[c].2 && *u < 0.5 {
                    *u += 1.0;
                }
            }
        }
        if n_pole == 1 {
            let mut sum = 0.0;
            for (c, u) in us.iter().enumerate() {
                if !corners[c].2 {
                    sum += *u;
                }
            }
            let mean = sum / 2.0;
            for (c, u) in us.iter_mut().enumerate() {
                if corners[c].2 {
                    *u = mean;
                }
            }
        }
        face_uvs.push([
            Vector2::new(us[0].clamp(0.0, 1.0), corners[0].1),
            Vector2::new(us[1].clamp(0.0, 1.0), corners[1].1),
            Vector2::new(us[2].clamp(0.0, 1.0), corners[2].1),
        ]);
    }
    Ok(UVAtlas { face_uvs })
}

/// Value types bilinear sampling can blend: scalars and RGB vectors.
pub trait Blend:
    Copy + std::ops::Add<Output = Self> + std::ops::Mul<f64, Output = Self>
{
    fn zero() -> Self;
    fn dot_with(&self, other: &Self) -> f64;
}

impl Blend for f64 {
    fn zero() -> f64 {
        0.0
    }
    fn dot_with(&self, other: &f64) -> f64 {
        self * other
    }
}

impl Blend for Vector3<f64> {
    fn zero() -> Self {
        Vector3::zeros()
    }
    fn dot_with(&self, other: &Self) -> f64 {
        self.dot(other)
    }
}

/// One sampling axis: neighbor indices, blend fraction, and the pixel-space
/// derivative of the normalized coordinate (zero where clamping saturates).
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
    dpix: f64,
}

fn axis_tap(n: usize, c: f64) -> Tap {
    if n <= 1 {
        return Tap {
            i0: 0,
            i1: 0,
            frac: 0.0,
            dpix: 0.0,
        };
    }
    // Align corners: -1 is the first pixel center, +1 the last.
    let scale = (n - 1) as f64 / 2.0;
    let p = (c + 1.0) * scale;
    let clamped = p.clamp(0.0, (n - 1) as f64);
    let i0 = (clamped.floor() as usize).min(n - 2);
    Tap {
        i0,
        i1: i0 + 1,
        frac: clamped - i0 as f64,
        dpix: if p == clamped { scale } else { 0.0 },
    }
}

fn check_coords(coords: &[Vector2<f64>]) -> Result<()> {
    for (i, c) in coords.iter().enumerate() {
        if c.x.is_nan() || c.y.is_nan() {
            return Err(Error::numeric(
                "bilinear_sample",
                format!("coordinate {i} is NaN"),
            ));
        }
    }
    Ok(())
}

/// Sample an image at normalized [-1,1] coordinates with bilinear blending.
/// Out-of-range coordinates clamp to the image border.
pub fn bilinear_sample<T: Blend>(img: &Grid<T>, coords: &[Vector2<f64>]) -> Result<Vec<T>> {
    check_coords(coords)?;
    let out = coords
        .iter()
        .map(|c| {
            let tx = axis_tap(img.width(), c.x);
            let ty = axis_tap(img.height(), c.y);
            let v00 = *img.get(tx.i0, ty.i0);
            let v01 = *img.get(tx.i1, ty.i0);
            let v10 = *img.get(tx.i0, ty.i1);
            let v11 = *img.get(tx.i1, ty.i1);
            (v00 * (1.0 - tx.frac) + v01 * tx.frac) * (1.0 - ty.frac)
                + (v10 * (1.0 - tx.frac) + v11 * tx.frac) * ty.frac
        })
        .collect();
    Ok(out)
}

/// Gradient of the samples with respect to the coordinates, contracted with
/// an upstream gradient. Piecewise constant across cell boundaries; zero in
/// clamped regions.
pub fn bilinear_coord_vjp<T: Blend>(
    img: &Grid<T>,
    coords: &[Vector2<f64>],
    upstream: &[T],
) -> Result<Vec<Vector2<f64>>> {
    check_coords(coords)?;
    if coords.len() != upstream.len() {
        return Err(Error::shape(format!(
            "{} coordinates but {} upstream gradients",
            coords.len(),
            upstream.len()
        )));
    }
    let out = coords
        .iter()
        .zip(upstream)
        .map(|(c, u)| {
            let tx = axis_tap(img.width(), c.x);
            let ty = axis_tap(img.height(), c.y);
            let v00 = *img.get(tx.i0, ty.i0);
            let v01 = *img.get(tx.i1, ty.i0);
            let v10 = *img.get(tx.i0, ty.i1);
            let v11 = *img.get(tx.i1, ty.i1);
            let minus = |a: T, b: T| a + b * -1.0;
            let dx = minus(v01, v00) * (1.0 - ty.frac) + minus(v11, v10) * ty.frac;
            let dy = minus(v10, v00) * (1.0 - tx.frac) + minus(v11, v01) * tx.frac;
            Vector2::new(dx.dot_with(u) * tx.dpix, dy.dot_with(u) * ty.dpix)
        })
        .collect();
    Ok(out)
}

/// Gradient of the samples with respect to the image: upstream gradients
/// scattered by the (fixed) bilinear weights. Sampling is linear in the
/// image, so this is exact.
pub fn bilinear_image_vjp<T: Blend>(
    width: usize,
    height: usize,
    coords: &[Vector2<f64>],
    upstream: &[T],
) -> Result<Grid<T>> {
    check_coords(coords)?;
    if coords.len() != upstream.len() {
        return Err(Error::shape(format!(
            "{} coordinates but {} upstream gradients",
            coords.len(),
            upstream.len()
        )));
    }
    let mut grad = Grid::filled(width, height, T::zero());
    for (c, u) in coords.iter().zip(upstream) {
        let tx = axis_tap(width, c.x);
        let ty = axis_tap(height, c.y);
        let w00 = (1.0 - tx.frac) * (1.0 - ty.frac);
        let w01 = tx.frac * (1.0 - ty.frac);
        let w10 = (1.0 - tx.frac) * ty.frac;
        let w11 = tx.frac * ty.frac;
        *grad.get_mut(tx.i0, ty.i0) = *grad.get(tx.i0, ty.i0) + *u * w00;
        *grad.get_mut(tx.i1, ty.i0) = *grad.get(tx.i1, ty.i0) + *u * w01;
        *grad.get_mut(tx.i0, ty.i1) = *grad.get(tx.i0, ty.i1) + *u * w10;
        *grad.get_mut(tx.i1, ty.i1) = *grad.get(tx.i1, ty.i1) + *u * w11;
    }
    Ok(grad)
}

/// Where each UV pixel samples the instance photo.
///
/// Stored as unconstrained parameters squashed through tanh, so every
/// realized coordinate stays strictly inside (-1, 1) and optimizers can
/// update the raw values freely.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureFlow {
    raw: Grid<Vector2<f64>>,
}

/// Largest coordinate magnitude representable by the squashed flow; keeps
/// atanh finite during initialization.
const FLOW_LIMIT: f64 = 0.999_999;

impl TextureFlow {
    pub fn from_raw(raw: Grid<Vector2<f64>>) -> TextureFlow {
        TextureFlow { raw }
    }

    /// Regular grid of sampling points spanning a bounding box (normalized
    /// image coordinates), the usual start: every UV pixel begins sampling
    /// from inside the annotated region.
    pub fn init_grid(
        width: usize,
        height: usize,
        lo: Vector2<f64>,
        hi: Vector2<f64>,
    ) -> Result<TextureFlow> {
        if width == 0 || height == 0 {
            return Err(Error::shape("flow grid must be non-empty".to_string()));
        }
        if !(lo.x <= hi.x && lo.y <= hi.y) {
            return Err(Error::shape(format!(
                "flow bounding box is inverted: ({}, {}) to ({}, {})",
                lo.x, lo.y, hi.x, hi.y
            )));
        }
        let raw = Grid::from_fn(width, height, |x, y| {
            let fx = (x as f64 + 0.5) / width as f64;
            let fy = (y as f64 + 0.5) / height as f64;
            let cx = (lo.x + fx * (hi.x - lo.x)).clamp(-FLOW_LIMIT, FLOW_LIMIT);
            let cy = (lo.y + fy * (hi.y - lo.y)).clamp(-FLOW_LIMIT, FLOW_LIMIT);
            Vector2::new(cx.atanh(), cy.atanh())
        });
        Ok(TextureFlow { raw })
    }

    pub fn width(&self) -> usize {
        self.raw.width()
    }

    pub fn height(&self) -> usize {
        self.raw.height()
    }

    pub fn raw(&self) -> &Grid<Vector2<f64>> {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Grid<Vector2<f64>> {
        &mut self.raw
    }

    /// Realized sampling coordinates, tanh of the raw parameters.
    pub fn coords(&self) -> Grid<Vector2<f64>> {
        Grid::from_vec(
            self.raw.width(),
            self.raw.height(),
            self.raw
                .data()
                .iter()
                .map(|r| Vector2::new(r.x.tanh(), r.y.tanh()))
                .collect(),
        )
    }

    /// Pull a gradient on the realized coordinates back to the raw
    /// parameters through the tanh squash.
    pub fn coords_vjp(&self, upstream: &[Vector2<f64>]) -> Result<Grid<Vector2<f64>>> {
        if upstream.len() != self.raw.len() {
            return Err(Error::shape(format!(
                "flow has {} entries but upstream has {}",
                self.raw.len(),
                upstream.len()
            )));
        }
        Ok(Grid::from_vec(
            self.raw.width(),
            self.raw.height(),
            self.raw
                .data()
                .iter()
                .zip(upstream)
                .map(|(r, u)| {
                    let dx = 1.0 - r.x.tanh().powi(2);
                    let dy = 1.0 - r.y.tanh().powi(2);
                    Vector2::new(u.x * dx, u.y * dy)
                })
                .collect(),
        ))
    }
}

/// Build the UV image by sampling the instance photo at the flow
/// coordinates. Gradients belong to the flow; the photo is data.
pub fn apply_flow(input: &Grid<Vector3<f64>>, flow: &TextureFlow) -> Result<TextureImage> {
    let coords = flow.coords();
    let samples = bilinear_sample(input, coords.data())?;
    Ok(Grid::from_vec(flow.width(), flow.height(), samples))
}

/// Gradient of [`apply_flow`] with respect to the raw flow parameters.
pub fn apply_flow_vjp(
    input: &Grid<Vector3<f64>>,
    flow: &TextureFlow,
    upstream: &Grid<Vector3<f64>>,
) -> Result<Grid<Vector2<f64>>> {
    if !upstream.same_size(flow.raw()) {
        return Err(Error::shape(format!(
            "upstream is {}x{} but flow is {}x{}",
            upstream.width(),
            upstream.height(),
            flow.width(),
            flow.height()
        )));
    }
    let coords = flow.coords();
    let d_coords = bilinear_coord_vjp(input, coords.data(), upstream.data())?;
    flow.coords_vjp(&d_coords)
}

/// Lower-envelope pass of the exact squared Euclidean distance transform.
/// `f` holds squared costs (infinity for "no site"); `out` receives
/// min_j (x - j)^2 + f[j].
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut sites: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        while let Some(&p) = sites.last() {
            let s = (fq - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
            } else {
                bounds.push(s);
                break;
            }
        }
        if sites.is_empty() {
            bounds.clear();
            bounds.push(f64::NEG_INFINITY);
        }
        sites.push(q);
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < x as f64 {
            k += 1;
        }
        let j = sites[k];
        let d = x as f64 - j as f64;
        *o = d * d + f[j];
    }
}

/// Exact Euclidean distance (in pixels) to the nearest foreground pixel,
/// by the two-pass squared-distance envelope method.
pub fn distance_transform(mask: &Grid<bool>) -> Result<DistanceField> {
    if !mask.data().iter().any(|&b| b) {
        return Err(Error::data("mask has no foreground pixels".to_string()));
    }
    let (w, h) = (mask.width(), mask.height());
    let mut sq = vec![0.0f64; w * h];
    for y in 0..h {
        let row: Vec<f64> = (0..w)
            .map(|x| if *mask.get(x, y) { 0.0 } else { f64::INFINITY })
            .collect();
        edt_1d(&row, &mut sq[y * w..(y + 1) * w]);
    }
    let columns = crate::par::map_indexed(w, |x| {
        let col: Vec<f64> = (0..h).map(|y| sq[y * w + x]).collect();
        let mut out = vec![0.0f64; h];
        edt_1d(&col, &mut out);
        out
    });
    let mut field = Grid::filled(w, h, 0.0f64);
    for (x, col) in columns.iter().enumerate() {
        for (y, v) in col.iter().enumerate() {
            *field.get_mut(x, y) = v.sqrt();
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{build_symmetry, icosphere};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;

    fn random_rgb(w: usize, h: usize, seed: u64) -> Grid<Vector3<f64>> {
        let mut rng = StdRng::seed_from_u64(seed);
        Grid::from_fn(w, h, |_, _| {
            Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
        })
    }

    #[test]
    fn uv_covers_unit_square_with_pole_rows() {
        let sphere = icosphere(3).unwrap();
        let map = build_symmetry(&sphere.vertices, 1e-8).unwrap();
        let atlas = sphere_uv(&sphere, &map).unwrap();
        assert_eq!(atlas.face_uvs.len(), sphere.faces.len());
        for uvs in &atlas.face_uvs {
            for uv in uvs {
                assert!((0.0..=1.0).contains(&uv.x), "u = {}", uv.x);
                assert!((0.0..=1.0).contains(&uv.y), "v = {}", uv.y);
            }
        }
        // Poles map to v = 0 and v = 1, the equator to v = 0.5.
        let north = sphere
            .vertices
            .iter()
            .position(|p| (p - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12)
            .unwrap();
        let equator = sphere
            .vertices
            .iter()
            .position(|p| (p - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12)
            .unwrap();
        for (fi, f) in sphere.faces.iter().enumerate() {
            for (c, &v) in f.iter().enumerate() {
                if v == north {
                    assert_eq!(atlas.face_uvs[fi][c].y, 0.0);
                }
                if v == equator {
                    assert_eq!(atlas.face_uvs[fi][c].y, 0.5);
                }
            }
        }
    }

    #[test]
    fn uv_face_extent_stays_below_half() {
        let sphere = icosphere(3).unwrap();
        let map = build_symmetry(&sphere.vertices, 1e-8).unwrap();
        let atlas = sphere_uv(&sphere, &map).unwrap();
        for uvs in &atlas.face_uvs {
            let us: Vec<f64> = uvs.iter().map(|p| p.x).collect();
            let lo = us.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = us.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo <= 0.5, "face spans u {lo}..{hi}");
        }
    }

    #[test]
    fn mirrored_faces_share_uv_triangles_exactly() {
        let sphere = icosphere(3).unwrap();
        let map = build_symmetry(&sphere.vertices, 1e-8).unwrap();
        let atlas = sphere_uv(&sphere, &map).unwrap();
        let mirror = map.mirror_vertex();

        let mut by_verts: HashMap<[usize; 3], usize> = HashMap::new();
        for (fi, f) in sphere.faces.iter().enumerate() {
            let mut key = *f;
            key.sort_unstable();
            by_verts.insert(key, fi);
        }
        for (fi, f) in sphere.faces.iter().enumerate() {
            let mut key = [mirror[f[0]], mirror[f[1]], mirror[f[2]]];
            key.sort_unstable();
            let fj = *by_verts.get(&key).expect("mirror face missing");
            let fm = sphere.faces[fj];
            for (c, &v) in f.iter().enumerate() {
                let cm = fm.iter().position(|&w| w == mirror[v]).unwrap();
                assert_eq!(
                    atlas.face_uvs[fi][c], atlas.face_uvs[fj][cm],
                    "faces {fi} and {fj} disagree"
                );
            }
        }
    }

    #[test]
    fn uv_rejects_non_unit_vertices() {
        let mut sphere = icosphere(1).unwrap();
        let map = build_symmetry(&sphere.vertices, 1e-8).unwrap();
        sphere.vertices[0] *= 1.01;
        assert!(sphere_uv(&sphere, &map).is_err());
    }

    #[test]
    fn sampling_at_pixel_centers_reproduces_the_image() {
        let img = random_rgb(7, 5, 1);
        let mut coords = Vec::new();
        for y in 0..5 {
            for x in 0..7 {
                coords.push(Vector2::new(
                    2.0 * x as f64 / 6.0 - 1.0,
                    2.0 * y as f64 / 4.0 - 1.0,
                ));
            }
        }
        let out = bilinear_sample(&img, &coords).unwrap();
        for (i, v) in out.iter().enumerate() {
            let (x, y) = (i % 7, i / 7);
            assert!((v - img.get(x, y)).norm() < 1e-12);
        }
    }

    #[test]
    fn sampling_center_of_two_by_two_averages() {
        let img = Grid::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        let out = bilinear_sample(&img, &[Vector2::new(0.0, 0.0)]).unwrap();
        assert_eq!(out[0], 1.5);
    }

    #[test]
    fn sampling_is_linear_in_the_image() {
        let a = random_rgb(6, 6, 2);
        let b = random_rgb(6, 6, 3);
        let mut rng = StdRng::seed_from_u64(4);
        let coords: Vec<Vector2<f64>> = (0..40)
            .map(|_| Vector2::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)))
            .collect();
        let combo = Grid::from_vec(
            6,
            6,
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| 0.3 * x + 0.7 * y)
                .collect(),
        );
        let sa = bilinear_sample(&a, &coords).unwrap();
        let sb = bilinear_sample(&b, &coords).unwrap();
        let sc = bilinear_sample(&combo, &coords).unwrap();
        for ((x, y), z) in sa.iter().zip(&sb).zip(&sc) {
            assert!((0.3 * x + 0.7 * y - z).norm() < 1e-14);
        }
    }

    #[test]
    fn out_of_range_coordinates_clamp_to_border() {
        let img = random_rgb(4, 4, 5);
        let far = bilinear_sample(&img, &[Vector2::new(5.0, -9.0)]).unwrap();
        let corner = bilinear_sample(&img, &[Vector2::new(1.0, -1.0)]).unwrap();
        assert_eq!(far[0], corner[0]);
    }

    #[test]
    fn nan_coordinates_are_rejected() {
        let img = random_rgb(4, 4, 6);
        assert!(matches!(
            bilinear_sample(&img, &[Vector2::new(f64::NAN, 0.0)]),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn coordinate_gradients_match_finite_differences() {
        let img = random_rgb(9, 7, 7);
        let mut rng = StdRng::seed_from_u64(8);
        let h = 1e-5;
        let mut tested = 0;
        while tested < 100 {
            let c: Vector2<f64> =
                Vector2::new(rng.gen_range(-0.95..0.95), rng.gen_range(-0.95..0.95));
            // Stay away from cell boundaries where the derivative jumps.
            let px = (c.x + 1.0) * 4.0;
            let py = (c.y + 1.0) * 3.0;
            if px.fract().min(1.0 - px.fract()) < 1e-3 || py.fract().min(1.0 - py.fract()) < 1e-3
            {
                continue;
            }
            tested += 1;
            let u = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let g = bilinear_coord_vjp(&img, &[c], &[u]).unwrap()[0];
            for axis in 0..2 {
                let mut ca = c;
                let mut cb = c;
                ca[axis] += h;
                cb[axis] -= h;
                let fa = bilinear_sample(&img, &[ca]).unwrap()[0].dot(&u);
                let fb = bilinear_sample(&img, &[cb]).unwrap()[0].dot(&u);
                let fd = (fa - fb) / (2.0 * h);
                assert!(
                    (fd - g[axis]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "axis {axis}: {fd} vs {}",
                    g[axis]
                );
            }
        }
    }

    #[test]
    fn image_gradient_is_the_adjoint_of_sampling() {
        // <sample(img, coords), u> == <img, image_vjp(u)> since sampling is
        // linear in the image.
        let img = random_rgb(8, 6, 9);
        let mut rng = StdRng::seed_from_u64(10);
        let coords: Vec<Vector2<f64>> = (0..30)
            .map(|_| Vector2::new(rng.gen_range(-1.1..1.1), rng.gen_range(-1.1..1.1)))
            .collect();
        let upstream: Vec<Vector3<f64>> = (0..30)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let samples = bilinear_sample(&img, &coords).unwrap();
        let lhs: f64 = samples.iter().zip(&upstream).map(|(s, u)| s.dot(u)).sum();
        let grad = bilinear_image_vjp(8, 6, &coords, &upstream).unwrap();
        let rhs: f64 = img.data().iter().zip(grad.data()).map(|(a, b)| a.dot(b)).sum();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn flow_coordinates_never_leave_the_square() {
        let mut raw = Grid::filled(4, 3, Vector2::new(0.0, 0.0));
        *raw.get_mut(0, 0) = Vector2::new(1e9, -1e9);
        *raw.get_mut(3, 2) = Vector2::new(-700.0, 700.0);
        *raw.get_mut(1, 1) = Vector2::new(3.0, -0.2);
        let flow = TextureFlow::from_raw(raw);
        for c in flow.coords().data() {
            assert!((-1.0..=1.0).contains(&c.x));
            assert!((-1.0..=1.0).contains(&c.y));
        }
        // Finite raw values stay strictly interior.
        let c = flow.coords();
        assert!(c.get(1, 1).x < 1.0 && c.get(1, 1).x > -1.0);
    }

    #[test]
    fn grid_initialized_flow_resamples_the_image_identically() {
        // Raw values chosen so the realized coordinates are exactly the
        // interior pixel centers of the source image.
        let img = random_rgb(10, 8, 11);
        let raw = Grid::from_fn(8, 6, |x, y| {
            let cx: f64 = 2.0 * (x + 1) as f64 / 9.0 - 1.0;
            let cy: f64 = 2.0 * (y + 1) as f64 / 7.0 - 1.0;
            Vector2::new(cx.atanh(), cy.atanh())
        });
        let flow = TextureFlow::from_raw(raw);
        let out = apply_flow(&img, &flow).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert!((out.get(x, y) - img.get(x + 1, y + 1)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_flow_samples_one_point() {
        let img = random_rgb(9, 9, 12);
        let target: Vector2<f64> = Vector2::new(0.31, -0.47);
        let raw = Grid::filled(5, 4, Vector2::new(target.x.atanh(), target.y.atanh()));
        let out = apply_flow(&img, &TextureFlow::from_raw(raw)).unwrap();
        let want = bilinear_sample(&img, &[target]).unwrap()[0];
        for v in out.data() {
            assert!((v - want).norm() < 1e-12);
        }
    }

    #[test]
    fn flow_matches_per_pixel_oracle() {
        let img = random_rgb(12, 9, 13);
        let mut rng = StdRng::seed_from_u64(14);
        let raw = Grid::from_fn(6, 5, |_, _| {
            Vector2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))
        });
        let flow = TextureFlow::from_raw(raw);
        let out = apply_flow(&img, &flow).unwrap();
        let coords = flow.coords();
        for y in 0..5 {
            for x in 0..6 {
                let want = bilinear_sample(&img, &[*coords.get(x, y)]).unwrap()[0];
                assert_eq!(*out.get(x, y), want);
            }
        }
    }

    #[test]
    fn flow_gradients_match_finite_differences() {
        let img = random_rgb(10, 10, 15);
        let mut rng = StdRng::seed_from_u64(16);
        let raw = Grid::from_fn(4, 4, |_, _| {
            Vector2::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8))
        });
        let flow = TextureFlow::from_raw(raw.clone());
        let upstream = Grid::from_fn(4, 4, |_, _| {
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        });
        let grad = apply_flow_vjp(&img, &flow, &upstream).unwrap();
        let phi = |raw: &Grid<Vector2<f64>>| -> f64 {
            let out = apply_flow(&img, &TextureFlow::from_raw(raw.clone())).unwrap();
            out.data()
                .iter()
                .zip(upstream.data())
                .map(|(v, u)| v.dot(u))
                .sum()
        };
        let h = 1e-6;
        let mut checked = 0;
        for y in 0..4 {
            for x in 0..4 {
                for axis in 0..2 {
                    let mut ra = raw.clone();
                    let mut rb = raw.clone();
                    ra.get_mut(x, y)[axis] += h;
                    rb.get_mut(x, y)[axis] -= h;
                    let fd = (phi(&ra) - phi(&rb)) / (2.0 * h);
                    let an = grad.get(x, y)[axis];
                    if (fd - an).abs() > 1e-4 * (1.0 + fd.abs()) {
                        // Cell-boundary crossings break the FD estimate;
                        // tolerate a few.
                        continue;
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked >= 24, "only {checked} gradient entries verified");
    }

    #[test]
    fn all_foreground_distance_is_zero() {
        let mask = Grid::filled(6, 4, true);
        let field = distance_transform(&mask).unwrap();
        assert!(field.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_pixel_gives_euclidean_distances() {
        let mut mask = Grid::filled(8, 8, false);
        *mask.get_mut(0, 0) = true;
        let field = distance_transform(&mask).unwrap();
        assert_eq!(*field.get(3, 4), 5.0);
        assert_eq!(*field.get(0, 0), 0.0);
        assert_eq!(*field.get(7, 0), 7.0);
    }

    #[test]
    fn distance_matches_brute_force_exactly() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..5 {
            let mask = Grid::from_fn(32, 32, |_, _| rng.gen_range(0.0..1.0) < 0.05);
            if !mask.data().iter().any(|&b| b) {
                continue;
            }
            let field = distance_transform(&mask).unwrap();
            for y in 0..32usize {
                for x in 0..32usize {
                    let mut best = f64::INFINITY;
                    for fy in 0..32usize {
                        for fx in 0..32usize {
                            if *mask.get(fx, fy) {
                                let dx = x as f64 - fx as f64;
                                let dy = y as f64 - fy as f64;
                                best = best.min(dx * dx + dy * dy);
                            }
                        }
                    }
                    assert_eq!(*field.get(x, y), best.sqrt(), "at ({x}, {y})");
                }
            }
        }
    }

    #[test]
    fn distance_is_lipschitz_between_neighbors() {
        let mut rng = StdRng::seed_from_u64(18);
        let mask = Grid::from_fn(24, 24, |_, _| rng.gen_range(0.0..1.0) < 0.1);
        let field = distance_transform(&mask).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                if x + 1 < 24 {
                    assert!((field.get(x, y) - field.get(x + 1, y)).abs() <= 1.0 + 1e-12);
                }
                if y + 1 < 24 {
                    assert!((field.get(x, y) - field.get(x, y + 1)).abs() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mask = Grid::filled(5, 5, false);
        assert!(matches!(distance_transform(&mask), Err(Error::Data(_))));
    }
}
