//! The training objective: per-instance loss terms and their analytic
//! gradients with respect to every parameter block.
//!
//! Shape and cameras are trained against four data terms (keypoint
//! reprojection, mask consistency, camera regression, and their
//! regularizers); texture flow is trained separately against the masked
//! photo and the mask's distance field. Gradient routing is strict: data
//! terms project through the structure-from-motion camera, so the predicted
//! camera learns only from the regression term, and the texture terms touch
//! nothing but the flow.

use nalgebra::{DMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera, CameraGrad, KeypointObservations};
use crate::geom::{
    expand_symmetric, reduce_symmetric, FreeShapeParams, LaplacianOperator, ShapeRole,
    SymmetryMap,
};
use crate::grid::Grid;
use crate::render::{self, RasterConfig, RgbImage};
use crate::texture::{self, DistanceField, TextureFlow, UVAtlas};
use crate::{Error, Result};

/// Smoothing floor inside the reprojection norm, so its gradient exists at
/// an exact match.
const REPROJ_EPS: f64 = 1e-8;

/// Entropy epsilon keeping `log` finite on zero assignment weights.
const ENTROPY_EPS: f64 = 1e-12;

/// One training image with its annotations and precomputed helpers.
#[derive(Clone, Debug)]
pub struct InstanceAnnotation {
    /// RGB image, values in [0, 1].
    pub image: RgbImage,
    /// Foreground mask, same dimensions as the image.
    pub mask: Grid<bool>,
    /// Normalized keypoint locations with visibility flags.
    pub keypoints: KeypointObservations,
    /// Structure-from-motion camera estimate for this instance.
    pub sfm_camera: Camera,
    /// Distance field of the mask (pixels to nearest foreground).
    pub dfield: DistanceField,
}

impl InstanceAnnotation {
    pub fn new(
        image: RgbImage,
        mask: Grid<bool>,
        keypoints: KeypointObservations,
        sfm_camera: Camera,
    ) -> Result<InstanceAnnotation> {
        if !image.same_size(&mask) {
            return Err(Error::shape(format!(
                "image is {}x{} but mask is {}x{}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        if keypoints.points.len() != keypoints.visible.len() {
            return Err(Error::shape(format!(
                "{} keypoints but {} visibility flags",
                keypoints.points.len(),
                keypoints.visible.len()
            )));
        }
        let dfield = texture::distance_transform(&mask)?;
        Ok(InstanceAnnotation {
            image,
            mask,
            keypoints,
            sfm_camera,
            dfield,
        })
    }
}

/// Soft assignment of each keypoint to mesh vertices, stored as logits so
/// optimization is unconstrained; rows of the realized matrix are softmax
/// distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointAssignment {
    /// K x |V| logits.
    pub logits: DMatrix<f64>,
}

impl KeypointAssignment {
    /// Uniform assignment: all logits zero.
    pub fn uniform(keypoints: usize, vertices: usize) -> KeypointAssignment {
        KeypointAssignment {
            logits: DMatrix::zeros(keypoints, vertices),
        }
    }

    pub fn keypoint_count(&self) -> usize {
        self.logits.nrows()
    }

    pub fn vertex_count(&self) -> usize {
        self.logits.ncols()
    }

    /// The realized assignment matrix: row-wise softmax of the logits.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut a = self.logits.clone();
        for mut row in a.row_iter_mut() {
            let max = row.max();
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row /= sum;
        }
        a
    }

    /// Expected keypoint positions `A V`.
    pub fn keypoint_positions(&self, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        let a = self.matrix();
        if a.ncols() != vertices.len() {
            return Err(Error::shape(format!(
                "assignment covers {} vertices but the mesh has {}",
                a.ncols(),
                vertices.len()
            )));
        }
        Ok((0..a.nrows())
            .map(|k| {
                let mut p = Vector3::zeros();
                for (v, vert) in vertices.iter().enumerate() {
                    p += vert * a[(k, v)];
                }
                p
            })
            .collect())
    }
}

/// Pull a gradient on the softmax output back to the logits:
/// `dl = a .* (u - <a, u>)` per row.
fn softmax_rows_vjp(a: &DMatrix<f64>, upstream: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for k in 0..a.nrows() {
        let dot: f64 = (0..a.ncols()).map(|v| a[(k, v)] * upstream[(k, v)]).sum();
        for v in 0..a.ncols() {
            out[(k, v)] = a[(k, v)] * (upstream[(k, v)] - dot);
        }
    }
    out
}

/// Loss weights and the raster settings the mask term renders with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub w_reproj: f64,
    pub w_mask: f64,
    pub w_cam: f64,
    pub w_smooth: f64,
    pub w_def: f64,
    pub w_vert2kp: f64,
    pub w_texture: f64,
    pub w_dt: f64,
    pub raster: RasterConfig,
}

impl ObjectiveConfig {
    /// Default weights, chosen to bring the initial term magnitudes within
    /// one order of magnitude on the synthetic suite.
    pub fn new(raster: RasterConfig) -> ObjectiveConfig {
        ObjectiveConfig {
            w_reproj: 1.0,
            w_mask: 1.0,
            w_cam: 1.0,
            w_smooth: 0.1,
            w_def: 1.0,
            w_vert2kp: 0.1,
            w_texture: 1.0,
            w_dt: 1.0,
            raster,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("w_reproj", self.w_reproj),
            ("w_mask", self.w_mask),
            ("w_cam", self.w_cam),
            ("w_smooth", self.w_smooth),
            ("w_def", self.w_def),
            ("w_vert2kp", self.w_vert2kp),
            ("w_texture", self.w_texture),
            ("w_dt", self.w_dt),
        ];
        for (name, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::shape(format!(
                    "{name} must be a non-negative finite weight, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term values of the shape/camera objective, serialized per logging
/// step as one JSON line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub reproj: f64,
    pub mask: f64,
    pub cam: f64,
    pub smooth: f64,
    pub def: f64,
    pub vert2kp: f64,
    pub total: f64,
}

/// Gradients of the weighted total, one entry per parameter block.
#[derive(Clone, Debug)]
pub struct GradBlocks {
    /// Gradient on the free mean-shape parameters.
    pub mean_shape: Vec<Vector3<f64>>,
    /// Gradient on this instance's free deformation parameters.
    pub deform: Vec<Vector3<f64>>,
    /// Gradient on the assignment logits.
    pub logits: DMatrix<f64>,
    /// Gradient on the predicted camera.
    pub camera: CameraGrad,
}

/// Everything [`total_objective`] reports for one instance.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub values: LossValues,
    pub grads: GradBlocks,
}

/// Shared model structure the per-instance objective needs.
pub struct ModelContext<'a> {
    pub map: &'a SymmetryMap,
    pub faces: &'a [[usize; 3]],
    pub laplacian: &'a LaplacianOperator,
}

/// The parameter blocks entering one instance's objective.
pub struct InstanceParams<'a> {
    pub mean_shape: &'a FreeShapeParams,
    pub deform: &'a FreeShapeParams,
    pub assign: &'a KeypointAssignment,
    pub camera: &'a Camera,
}

/// Keypoint reprojection: smoothed Euclidean distance between each visible
/// annotation and the projection of its expected vertex position, averaged
/// over visible keypoints. Projects through the SfM camera, so no camera
/// gradient is produced.
pub struct ReprojLoss {
    pub value: f64,
    pub d_vertices: Vec<Vector3<f64>>,
    pub d_logits: DMatrix<f64>,
    /// Number of visible keypoints that entered the average.
    pub visible: usize,
}

pub fn loss_reproj(
    vertices: &[Vector3<f64>],
    assign: &KeypointAssignment,
    ann: &InstanceAnnotation,
) -> Result<ReprojLoss> {
    let a = assign.matrix();
    if a.nrows() != ann.keypoints.points.len() {
        return Err(Error::shape(format!(
            "assignment has {} keypoints but the annotation has {}",
            a.nrows(),
            ann.keypoints.points.len()
        )));
    }
    let positions = assign.keypoint_positions(vertices)?;
    let n_vis = ann.keypoints.visible.iter().filter(|&&v| v).count();
    if n_vis == 0 {
        eprintln!("warning: instance has no visible keypoints; skipping reprojection term");
        return Ok(ReprojLoss {
            value: 0.0,
            d_vertices: vec![Vector3::zeros(); vertices.len()],
            d_logits: DMatrix::zeros(a.nrows(), a.ncols()),
            visible: 0,
        });
    }
    let proj = camera::project(&ann.sfm_camera, &positions);
    let mut value = 0.0;
    let mut d_proj = vec![Vector2::zeros(); positions.len()];
    for (k, p) in proj.iter().enumerate() {
        if !ann.keypoints.visible[k] {
            continue;
        }
        let r = ann.keypoints.points[k] - p;
        let dist = (r.norm_squared() + REPROJ_EPS).sqrt();
        value += dist / n_vis as f64;
        d_proj[k] = -r / (dist * n_vis as f64);
    }
    // Pull back through the projection (camera gradients discarded: the SfM
    // camera is data), then through the expectation A V.
    let pg = camera::project_vjp(&ann.sfm_camera, &positions, &d_proj)?;
    let mut d_vertices = vec![Vector3::zeros(); vertices.len()];
    let mut d_a = DMatrix::zeros(a.nrows(), a.ncols());
    for k in 0..a.nrows() {
        let gp = pg.d_points[k];
        if gp == Vector3::zeros() {
            continue;
        }
        for (v, vert) in vertices.iter().enumerate() {
            d_vertices[v] += gp * a[(k, v)];
            d_a[(k, v)] = gp.dot(vert);
        }
    }
    Ok(ReprojLoss {
        value,
        d_vertices,
        d_logits: softmax_rows_vjp(&a, &d_a),
        visible: n_vis,
    })
}

/// Mask consistency: mean squared difference between the annotated mask and
/// the soft silhouette rendered through the SfM camera.
pub struct MaskLoss {
    pub value: f64,
    pub d_vertices: Vec<Vector3<f64>>,
}

pub fn loss_mask(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    ann: &InstanceAnnotation,
    raster: &RasterConfig,
) -> Result<MaskLoss> {
    if raster.width != ann.mask.width() || raster.height != ann.mask.height() {
        return Err(Error::shape(format!(
            "raster is {}x{} but mask is {}x{}",
            raster.width,
            raster.height,
            ann.mask.width(),
            ann.mask.height()
        )));
    }
    let soft = render::soft_silhouette(vertices, faces, &ann.sfm_camera, raster)?;
    let n = (raster.width * raster.height) as f64;
    let mut value = 0.0;
    let mut upstream = Grid::filled(raster.width, raster.height, 0.0);
    for i in 0..soft.len() {
        let s = if ann.mask.data()[i] { 1.0 } else { 0.0 };
        let r = soft.data()[i] - s;
        value += r * r / n;
        upstream.data_mut()[i] = 2.0 * r / n;
    }
    let grads = render::soft_silhouette_vjp(vertices, faces, &ann.sfm_camera, raster, &upstream)?;
    Ok(MaskLoss {
        value,
        d_vertices: grads.d_points,
    })
}

/// Camera regression: squared distance between the predicted and the SfM
/// camera, the only term that reaches the predicted camera.
pub fn loss_cam(pred: &Camera, sfm: &Camera) -> (f64, CameraGrad) {
    camera::camera_distance_grad(pred, sfm)
}

/// Shape smoothness: mean squared Laplacian residual per vertex.
pub struct SmoothLoss {
    pub value: f64,
    pub d_vertices: Vec<Vector3<f64>>,
}

pub fn loss_smooth(vertices: &[Vector3<f64>], lap: &LaplacianOperator) -> Result<SmoothLoss> {
    let lv = lap.apply(vertices)?;
    let n = vertices.len() as f64;
    let value = lv.iter().map(|r| r.norm_squared()).sum::<f64>() / n;
    // d/dV of |LV|^2 / n is 2 L^T (LV) / n, and L is symmetric.
    let mut llv = lap.apply(&lv)?;
    for g in llv.iter_mut() {
        *g *= 2.0 / n;
    }
    Ok(SmoothLoss {
        value,
        d_vertices: llv,
    })
}

/// Deformation magnitude: mean squared vertex displacement measured on the
/// expanded (full) mesh, so the symmetry bookkeeping does not bias it.
pub struct DefLoss {
    pub value: f64,
    /// Gradient on the free deformation parameters.
    pub d_free: Vec<Vector3<f64>>,
}

pub fn loss_def(delta: &FreeShapeParams, map: &SymmetryMap) -> Result<DefLoss> {
    let full = expand_symmetric(map, delta)?;
    let n = full.len() as f64;
    let value = full.iter().map(|d| d.norm_squared()).sum::<f64>() / n;
    let d_full: Vec<Vector3<f64>> = full.iter().map(|d| d * (2.0 / n)).collect();
    Ok(DefLoss {
        value,
        d_free: reduce_symmetric(map, &d_full)?,
    })
}

/// Assignment entropy: mean per-keypoint entropy of the assignment rows,
/// driving each keypoint toward a concentrated vertex neighborhood.
pub struct Vert2KpLoss {
    pub value: f64,
    pub d_logits: DMatrix<f64>,
}

pub fn loss_vert2kp(assign: &KeypointAssignment) -> Vert2KpLoss {
    let a = assign.matrix();
    let k_count = a.nrows() as f64;
    let mut value = 0.0;
    let mut d_a = DMatrix::zeros(a.nrows(), a.ncols());
    for k in 0..a.nrows() {
        for v in 0..a.ncols() {
            let p = a[(k, v)];
            let lg = (p + ENTROPY_EPS).ln();
            value -= p * lg / k_count;
            d_a[(k, v)] = -(lg + p / (p + ENTROPY_EPS)) / k_count;
        }
    }
    Vert2KpLoss {
        value,
        d_logits: softmax_rows_vjp(&a, &d_a),
    }
}

/// Texture consistency: masked L1 between the photo and the textured
/// rendering, averaged over foreground pixels and channels. Geometry and
/// camera are treated as constants; the gradient reaches only the flow.
pub struct TextureLoss {
    pub value: f64,
    /// Gradient on the raw (pre-squash) flow parameters.
    pub d_flow: Grid<Vector2<f64>>,
}

pub fn loss_texture(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    cam: &Camera,
    uv: &UVAtlas,
    flow: &TextureFlow,
    ann: &InstanceAnnotation,
    raster: &RasterConfig,
) -> Result<TextureLoss> {
    if raster.width != ann.image.width() || raster.height != ann.image.height() {
        return Err(Error::shape(format!(
            "raster is {}x{} but image is {}x{}",
            raster.width,
            raster.height,
            ann.image.width(),
            ann.image.height()
        )));
    }
    let n_fg = ann.mask.data().iter().filter(|&&m| m).count();
    if n_fg == 0 {
        eprintln!("warning: instance has empty foreground; skipping texture term");
        return Ok(TextureLoss {
            value: 0.0,
            d_flow: Grid::filled(flow.width(), flow.height(), Vector2::zeros()),
        });
    }
    let tex = texture::apply_flow(&ann.image, flow)?;
    let buf = render::rasterize_hard(vertices, faces, cam, raster);
    let rendered = render::render_textured(&buf, uv, &tex)?;
    let denom = 3.0 * n_fg as f64;
    let mut value = 0.0;
    let mut upstream = Grid::filled(raster.width, raster.height, Vector3::zeros());
    for i in 0..rendered.len() {
        if !ann.mask.data()[i] {
            continue;
        }
        let diff = rendered.data()[i] - ann.image.data()[i];
        for c in 0..3 {
            value += diff[c].abs() / denom;
            upstream.data_mut()[i][c] = diff[c].signum() / denom;
        }
    }
    let d_tex = render::render_textured_vjp(&buf, uv, tex.width(), tex.height(), &upstream)?;
    let d_flow = texture::apply_flow_vjp(&ann.image, flow, &d_tex)?;
    Ok(TextureLoss {
        value,
        d_flow,
    })
}

/// Distance-transform prior: mean sampled mask distance at the flow
/// targets, zero exactly when every target lands on foreground.
pub fn loss_dt(flow: &TextureFlow, dfield: &DistanceField) -> Result<TextureLoss> {
    let coords = flow.coords();
    let samples = texture::bilinear_sample(dfield, coords.data())?;
    let n = samples.len() as f64;
    let value = samples.iter().sum::<f64>() / n;
    let upstream = vec![1.0 / n; samples.len()];
    let d_coords = texture::bilinear_coord_vjp(dfield, coords.data(), &upstream)?;
    Ok(TextureLoss {
        value,
        d_flow: flow.coords_vjp(&d_coords)?,
    })
}

fn check_term(name: &'static str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::numeric(name, format!("term evaluated to {value}")));
    }
    Ok(value)
}

/// The weighted shape/camera objective for one instance, with gradients
/// routed to every trainable block. Texture terms are separate (stage two).
pub fn total_objective(
    ctx: &ModelContext,
    params: &InstanceParams,
    ann: &InstanceAnnotation,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if params.mean_shape.role != ShapeRole::MeanShape {
        return Err(Error::shape("mean_shape block has the wrong role".to_string()));
    }
    if params.deform.role != ShapeRole::Deformation {
        return Err(Error::shape("deform block has the wrong role".to_string()));
    }
    if params.mean_shape.values.len() != params.deform.values.len() {
        return Err(Error::shape(format!(
            "mean shape has {} free entries but deformation has {}",
            params.mean_shape.values.len(),
            params.deform.values.len()
        )));
    }

    // V = expand(mean + delta); expansion is linear, so both blocks receive
    // the same reduced gradient from losses on V.
    let combined = FreeShapeParams {
        values: params
            .mean_shape
            .values
            .iter()
            .zip(&params.deform.values)
            .map(|(m, d)| m + d)
            .collect(),
        role: ShapeRole::MeanShape,
    };
    let vertices = expand_symmetric(ctx.map, &combined)?;

    let reproj = loss_reproj(&vertices, params.assign, ann)?;
    let mask = loss_mask(&vertices, ctx.faces, ann, &cfg.raster)?;
    let (cam_value, cam_grad) = loss_cam(params.camera, &ann.sfm_camera);
    let smooth = loss_smooth(&vertices, ctx.laplacian)?;
    let def = loss_def(params.deform, ctx.map)?;
    let vert2kp = loss_vert2kp(params.assign);

    let values = LossValues {
        reproj: check_term("reproj", reproj.value)?,
        mask: check_term("mask", mask.value)?,
        cam: check_term("cam", cam_value)?,
        smooth: check_term("smooth", smooth.value)?,
        def: check_term("def", def.value)?,
        vert2kp: check_term("vert2kp", vert2kp.value)?,
        total: 0.0,
    };
    let total = cfg.w_reproj * values.reproj
        + cfg.w_mask * values.mask
        + cfg.w_cam * values.cam
        + cfg.w_smooth * values.smooth
        + cfg.w_def * values.def
        + cfg.w_vert2kp * values.vert2kp;
    let values = LossValues {
        total: check_term("total", total)?,
        ..values
    };

    // Route gradients. Losses on the full vertex set pull back through the
    // symmetry expansion into both shape blocks.
    let mut d_vertices = vec![Vector3::zeros(); vertices.len()];
    for (i, dv) in d_vertices.iter_mut().enumerate() {
        *dv = reproj.d_vertices[i] * cfg.w_reproj
            + mask.d_vertices[i] * cfg.w_mask
            + smooth.d_vertices[i] * cfg.w_smooth;
    }
    let d_shared = reduce_symmetric(ctx.map, &d_vertices)?;
    let mut d_deform = d_shared.clone();
    for (g, dd) in d_deform.iter_mut().zip(&def.d_free) {
        *g += dd * cfg.w_def;
    }
    let mut d_logits = reproj.d_logits;
    d_logits *= cfg.w_reproj;
    d_logits += vert2kp.d_logits * cfg.w_vert2kp;

    Ok(LossReport {
        values,
        grads: GradBlocks {
            mean_shape: d_shared,
            deform: d_deform,
            logits: d_logits,
            camera: CameraGrad {
                d_s: cam_grad.d_s * cfg.w_cam,
                d_t: cam_grad.d_t * cfg.w_cam,
                d_q: cam_grad.d_q * cfg.w_cam,
            },
        },
    })
}

/// The stage-two texture objective: weighted masked L1 plus the
/// distance-field prior, gradients on the raw flow only.
pub struct TextureReport {
    pub texture: f64,
    pub dt: f64,
    pub total: f64,
    pub d_flow: Grid<Vector2<f64>>,
}

pub fn texture_objective(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    cam: &Camera,
    uv: &UVAtlas,
    flow: &TextureFlow,
    ann: &InstanceAnnotation,
    cfg: &ObjectiveConfig,
) -> Result<TextureReport> {
    cfg.validate()?;
    let tex = loss_texture(vertices, faces, cam, uv, flow, ann, &cfg.raster)?;
    let dt = loss_dt(flow, &ann.dfield)?;
    let texture = check_term("texture", tex.value)?;
    let dt_value = check_term("dt", dt.value)?;
    let total = check_term("texture_total", cfg.w_texture * texture + cfg.w_dt * dt_value)?;
    let d_flow = Grid::from_vec(
        flow.width(),
        flow.height(),
        tex.d_flow
            .data()
            .iter()
            .zip(dt.d_flow.data())
            .map(|(a, b)| a * cfg.w_texture + b * cfg.w_dt)
            .collect(),
    );
    Ok(TextureReport {
        texture,
        dt: dt_value,
        total,
        d_flow,
    })
}
