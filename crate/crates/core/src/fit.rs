//! Collection-level training, novel-instance fitting, deformation analysis,
//! texture transfer, and bit-exact checkpointing.
//!
//! The model couples shared blocks (a symmetry-reduced mean shape and the
//! keypoint assignment logits) with per-instance blocks (a symmetry-reduced
//! deformation, a weak-perspective camera, and a texture flow). There is no
//! learned predictor network: all blocks are free variables optimized
//! directly against the reconstruction objective, in two stages. Stage one
//! ([`train_shape`]) fits shape, assignment, and cameras on mini-batches with
//! an annealed silhouette softness; stage two ([`train_texture`]) fits
//! texture flows only and leaves every shape and camera byte untouched.
//!
//! Determinism is a contract, not an accident: mini-batch composition is a
//! pure function of (seed, stage, absolute step), gradients are reduced in a
//! fixed order, and checkpoints serialize the optimizer moments, so resuming
//! from a checkpoint reproduces an uninterrupted run bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{
    self, Camera, CameraGrad, KeypointObservations, SfmResult, quat_canonical, quat_normalize,
    rotation_to_quat,
};
use crate::error::Error;
use crate::geom::{
    build_symmetry, convex_hull, cotangent_laplacian, expand_symmetric, icosphere,
    init_mean_shape, FreeShapeParams, LaplacianOperator, Mesh, ShapeRole, SymmetryMap,
};
use crate::grid::Grid;
use crate::objective::{
    texture_objective, total_objective, GradBlocks, InstanceAnnotation, InstanceParams,
    KeypointAssignment, LossValues, ModelContext, ObjectiveConfig,
};
use crate::render::{rasterize_hard, render_textured, RasterConfig, RgbImage};
use crate::texture::{apply_flow, sphere_uv, TextureFlow, UVAtlas, UV_HEIGHT, UV_WIDTH};
use crate::{par, Result};

/// Icosphere subdivision level of the full-resolution model.
pub const DEFAULT_LEVEL: u32 = 3;

/// Leading bytes of the checkpoint container.
pub const CHECKPOINT_MAGIC: &[u8] = b"MESHFITCKPT1\n";

/// Version stamped into (and required from) checkpoint headers.
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Mirror-pair matching tolerance used when rebuilding icosphere structure.
const SYMMETRY_TOL: f64 = 1e-8;

/// Cameras never shrink below this scale, keeping projections invertible.
const SCALE_FLOOR: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Optimizer configuration and adaptive-moment state
// ---------------------------------------------------------------------------

/// Optimization schedule. The seed is mandatory: every run is a pure function
/// of (config, dataset), and two runs with the same inputs produce
/// bit-identical checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Base step size for all parameter blocks.
    pub step_size: f64,
    /// First-moment decay rate.
    pub beta1: f64,
    /// Second-moment decay rate.
    pub beta2: f64,
    /// Denominator stabilizer.
    pub epsilon: f64,
    /// Stage-one iterations (mini-batch steps).
    pub shape_iters: u64,
    /// Stage-two iterations (mini-batch steps).
    pub texture_iters: u64,
    /// Instances per mini-batch (clamped to the collection size).
    pub batch_size: usize,
    /// Seed for the batch shuffle; required, no implicit entropy.
    pub seed: u64,
    /// Multiplier applied to the silhouette softness every
    /// `sigma_decay_every` stage-one steps; 1.0 disables annealing.
    pub sigma_decay: f64,
    /// Annealing period in steps (>= 1).
    pub sigma_decay_every: u64,
}

impl OptimizerConfig {
    pub fn new(seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shape_iters: 6000,
            texture_iters: 1500,
            batch_size: 8,
            seed,
            sigma_decay: 0.5,
            sigma_decay_every: 1500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::shape(format!(
                "step size must be positive and finite, got {}",
                self.step_size
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::shape(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::shape(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::shape("batch size must be at least 1".to_string()));
        }
        if !(self.sigma_decay > 0.0 && self.sigma_decay <= 1.0) {
            return Err(Error::shape(format!(
                "sigma decay must lie in (0, 1], got {}",
                self.sigma_decay
            )));
        }
        if self.sigma_decay_every == 0 {
            return Err(Error::shape(
                "sigma decay period must be at least 1 step".to_string(),
            ));
        }
        Ok(())
    }
}

/// Bias-corrected adaptive-moment estimate for one flat parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps on this block.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One descent step: `params -= step_size * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(
        &mut self,
        opt: &OptimizerConfig,
        params: &mut [f64],
        grads: &[f64],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer block holds {} entries but got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - opt.beta1.powf(self.t as f64);
        let c2 = 1.0 - opt.beta2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = opt.beta1 * self.m[i] + (1.0 - opt.beta1) * g;
            self.v[i] = opt.beta2 * self.v[i] + (1.0 - opt.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= opt.step_size * m_hat / (v_hat.sqrt() + opt.epsilon);
        }
        Ok(())
    }
}

fn flat_from_vectors(values: &[Vector3<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * 3);
    for v in values {
        out.extend_from_slice(&[v.x, v.y, v.z]);
    }
    out
}

fn vectors_from_flat(flat: &[f64]) -> Vec<Vector3<f64>> {
    flat.chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

/// Row-major (keypoint-major) flattening of the logits matrix.
fn flat_from_matrix(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn matrix_from_flat(flat: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |r, c| flat[r * cols + c])
}

/// Camera block order: scale, translation x/y, quaternion w/x/y/z.
fn camera_to_flat(cam: &Camera) -> [f64; 7] {
    [cam.s, cam.t.x, cam.t.y, cam.q[0], cam.q[1], cam.q[2], cam.q[3]]
}

fn flat_from_flow(raw: &Grid<Vector2<f64>>) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len() * 2);
    for v in raw.data() {
        out.extend_from_slice(&[v.x, v.y]);
    }
    out
}

/// Step a symmetry-reduced shape block. `scale` multiplies the gradient
/// (used for batch averaging).
fn step_free(
    adam: &mut AdamState,
    opt: &OptimizerConfig,
    free: &mut FreeShapeParams,
    grad: &[Vector3<f64>],
    scale: f64,
) -> Result<()> {
    if grad.len() != free.values.len() {
        return Err(Error::shape(format!(
            "shape block has {} free entries but gradient has {}",
            free.values.len(),
            grad.len()
        )));
    }
    let mut p = flat_from_vectors(&free.values);
    let mut g = flat_from_vectors(grad);
    for x in &mut g {
        *x *= scale;
    }
    adam.step(opt, &mut p, &g)?;
    free.values = vectors_from_flat(&p);
    Ok(())
}

fn step_logits(
    adam: &mut AdamState,
    opt: &OptimizerConfig,
    logits: &mut DMatrix<f64>,
    grad: &DMatrix<f64>,
) -> Result<()> {
    let mut p = flat_from_matrix(logits);
    let g = flat_from_matrix(grad);
    adam.step(opt, &mut p, &g)?;
    *logits = matrix_from_flat(&p, logits.nrows(), logits.ncols());
    Ok(())
}

/// Step a camera block, then restore the manifold constraints: scale is
/// floored, the quaternion is renormalized and put in canonical sign. When
/// the sign flips, the first moment of the quaternion entries flips with it
/// so momentum keeps pointing the same way in the new representative.
fn step_camera(
    adam: &mut AdamState,
    opt: &OptimizerConfig,
    cam: &mut Camera,
    grad: &CameraGrad,
    scale: f64,
) -> Result<()> {
    let mut p = camera_to_flat(cam);
    let g = [
        grad.d_s * scale,
        grad.d_t.x * scale,
        grad.d_t.y * scale,
        grad.d_q[0] * scale,
        grad.d_q[1] * scale,
        grad.d_q[2] * scale,
        grad.d_q[3] * scale,
    ];
    adam.step(opt, &mut p, &g)?;
    let s = p[0].max(SCALE_FLOOR);
    let t = Vector2::new(p[1], p[2]);
    // A quaternion the update has made unusable is an optimization blowup,
    // not bad input data; report it as such.
    let qn = quat_normalize(Vector4::new(p[3], p[4], p[5], p[6])).map_err(|e| {
        Error::numeric("camera update".to_string(), format!("quaternion left the unit sphere: {e}"))
    })?;
    let qc = quat_canonical(qn);
    if qn.dot(&qc) < 0.0 {
        for i in 3..7 {
            adam.m[i] = -adam.m[i];
        }
    }
    *cam = Camera { s, t, q: qc };
    Ok(())
}

fn step_flow(
    adam: &mut AdamState,
    opt: &OptimizerConfig,
    flow: &mut TextureFlow,
    grad: &Grid<Vector2<f64>>,
    scale: f64,
) -> Result<()> {
    if !flow.raw().same_size(grad) {
        return Err(Error::shape(format!(
            "flow is {}x{} but gradient is {}x{}",
            flow.width(),
            flow.height(),
            grad.width(),
            grad.height()
        )));
    }
    let mut p = flat_from_flow(flow.raw());
    let mut g = flat_from_flow(grad);
    for x in &mut g {
        *x *= scale;
    }
    adam.step(opt, &mut p, &g)?;
    let (w, h) = (flow.width(), flow.height());
    *flow.raw_mut() = Grid::from_vec(
        w,
        h,
        p.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Deterministic mini-batch schedule
// ---------------------------------------------------------------------------

/// Training stage; each gets a disjoint family of shuffle streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Shape,
    Texture,
}

impl Stage {
    fn stream_base(self) -> u64 {
        match self {
            Stage::Shape => 1,
            Stage::Texture => 1 << 32,
        }
    }
}

/// Mini-batch steps needed to visit every instance once.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    let b = batch_size.min(n).max(1);
    n.div_ceil(b) as u64
}

/// The instance indices of one mini-batch, as a pure function of the inputs.
/// Each epoch shuffles `0..n` with a stream derived from (stage, epoch) and
/// walks it in chunks, so every instance is visited exactly once per epoch
/// and a resumed run sees the same batches an uninterrupted run would.
pub fn batch_for_step(seed: u64, stage: Stage, n: usize, batch_size: usize, step: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let b = batch_size.min(n).max(1);
    let spe = steps_per_epoch(n, b);
    let epoch = step / spe;
    let pos = (step % spe) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage.stream_base().wrapping_add(epoch));
    order.shuffle(&mut rng);
    let lo = pos * b;
    let hi = ((pos + 1) * b).min(n);
    order[lo..hi].to_vec()
}

/// Silhouette softness at an absolute stage-one step.
pub fn annealed_sigma(base: f64, opt: &OptimizerConfig, step: u64) -> f64 {
    let k = step / opt.sigma_decay_every;
    base * opt.sigma_decay.powf(k as f64)
}

// ---------------------------------------------------------------------------
// Model and training state
// ---------------------------------------------------------------------------

/// Per-instance trainable blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceState {
    /// Symmetry-reduced deformation added to the mean shape.
    pub deform: FreeShapeParams,
    /// Predicted weak-perspective camera.
    pub camera: Camera,
    /// Texture sampling flow.
    pub flow: TextureFlow,
}

/// The category-level model: fixed structure, shared blocks, and one
/// [`InstanceState`] per training instance. `mesh` keeps the unit icosphere
/// vertices; realized shapes always come from expanding `mean_shape` plus a
/// deformation, so bilateral symmetry holds by construction at every step.
#[derive(Clone, Debug)]
pub struct CollectionModel {
    pub mesh: Mesh,
    pub map: SymmetryMap,
    pub laplacian: LaplacianOperator,
    pub uv: UVAtlas,
    /// Factorization result the model was initialized from (3D keypoints and
    /// per-instance cameras used as targets by the camera-consistency term).
    pub sfm: SfmResult,
    pub icosphere_level: u32,
    pub mean_shape: FreeShapeParams,
    pub kp_logits: KeypointAssignment,
    pub instances: Vec<InstanceState>,
}

impl CollectionModel {
    pub fn vertex_count(&self) -> usize {
        self.mesh.vertices.len()
    }

    pub fn free_count(&self) -> usize {
        self.map.free_count()
    }

    pub fn keypoint_count(&self) -> usize {
        self.kp_logits.logits.nrows()
    }

    /// Mean shape plus instance deformation, still symmetry-reduced.
    pub fn combined_free(&self, index: usize) -> Result<FreeShapeParams> {
        let inst = self
            .instances
            .get(index)
            .ok_or_else(|| Error::shape(format!("instance index {index} out of range")))?;
        if inst.deform.values.len() != self.mean_shape.values.len() {
            return Err(Error::shape(format!(
                "mean shape has {} free entries but deformation has {}",
                self.mean_shape.values.len(),
                inst.deform.values.len()
            )));
        }
        Ok(FreeShapeParams {
            values: self
                .mean_shape
                .values
                .iter()
                .zip(&inst.deform.values)
                .map(|(m, d)| m + d)
                .collect(),
            role: ShapeRole::MeanShape,
        })
    }

    /// Expanded vertices of one instance's shape.
    pub fn vertices_for(&self, index: usize) -> Result<Vec<Vector3<f64>>> {
        expand_symmetric(&self.map, &self.combined_free(index)?)
    }

    /// Expanded vertices of the mean shape.
    pub fn mean_vertices(&self) -> Result<Vec<Vector3<f64>>> {
        expand_symmetric(&self.map, &self.mean_shape)
    }
}

/// Optimizer state for stage one, one block per trainable parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeOptState {
    pub mean: AdamState,
    pub logits: AdamState,
    pub deforms: Vec<AdamState>,
    pub cameras: Vec<AdamState>,
}

/// Optimizer state for stage two.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureOptState {
    pub flows: Vec<AdamState>,
}

/// A model mid-training: absolute step counters plus optimizer moments.
/// This is the checkpointed unit; serializing it and reloading continues the
/// run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: CollectionModel,
    pub shape_steps: u64,
    pub texture_steps: u64,
    pub shape_opt: Option<ShapeOptState>,
    pub texture_opt: Option<TextureOptState>,
}

impl TrainState {
    pub fn new(model: CollectionModel) -> TrainState {
        TrainState {
            model,
            shape_steps: 0,
            texture_steps: 0,
            shape_opt: None,
            texture_opt: None,
        }
    }
}

/// One stage-one step of the loss trace (batch means).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub values: LossValues,
}

/// One stage-two step of the loss trace (batch means).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureTraceEntry {
    pub step: u64,
    pub texture: f64,
    pub dt: f64,
    pub total: f64,
}

/// Mean total loss per epoch, from a stage-one trace.
pub fn epoch_mean_totals(trace: &[TraceEntry], n: usize, batch_size: usize) -> Vec<(u64, f64)> {
    let spe = steps_per_epoch(n, batch_size);
    let mut acc: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
    for e in trace {
        let slot = acc.entry(e.step / spe).or_insert((0.0, 0));
        slot.0 += e.values.total;
        slot.1 += 1;
    }
    acc.into_iter().map(|(ep, (s, c))| (ep, s / c as f64)).collect()
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Initial texture flow: a regular grid over the mask's bounding box in
/// normalized image coordinates, so every texture pixel starts sampling from
/// the annotated foreground region.
fn initial_flow(ann: &InstanceAnnotation) -> Result<TextureFlow> {
    let (w, h) = (ann.mask.width(), ann.mask.height());
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    for y in 0..h {
        for x in 0..w {
            if *ann.mask.get(x, y) {
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if min_x == usize::MAX {
        return Err(Error::data("mask has no foreground pixels".to_string()));
    }
    let lo = Vector2::new(
        2.0 * min_x as f64 / w as f64 - 1.0,
        2.0 * min_y as f64 / h as f64 - 1.0,
    );
    let hi = Vector2::new(
        2.0 * (max_x + 1) as f64 / w as f64 - 1.0,
        2.0 * (max_y + 1) as f64 / h as f64 - 1.0,
    );
    TextureFlow::init_grid(UV_WIDTH, UV_HEIGHT, lo, hi)
}

/// Build the initial model from factorized cameras and 3D keypoints, at the
/// full [`DEFAULT_LEVEL`] resolution. Also stamps each annotation's
/// `sfm_camera`, which the data terms project through during training.
pub fn init_model(anns: &mut [InstanceAnnotation], sfm: &SfmResult) -> Result<CollectionModel> {
    init_model_with_level(anns, sfm, DEFAULT_LEVEL)
}

/// [`init_model`] at an explicit icosphere level (lower levels make cheap
/// test models; the serialized format records the level either way).
pub fn init_model_with_level(
    anns: &mut [InstanceAnnotation],
    sfm: &SfmResult,
    level: u32,
) -> Result<CollectionModel> {
    if anns.is_empty() {
        return Err(Error::shape("cannot build a model from zero instances".to_string()));
    }
    if sfm.cameras.len() != anns.len() {
        return Err(Error::shape(format!(
            "{} annotations but {} factorized cameras",
            anns.len(),
            sfm.cameras.len()
        )));
    }
    let k = sfm.keypoints.len();
    for (i, ann) in anns.iter().enumerate() {
        if ann.keypoints.points.len() != k {
            return Err(Error::shape(format!(
                "instance {i} has {} keypoints but the factorization has {k}",
                ann.keypoints.points.len()
            )));
        }
    }
    let sphere = icosphere(level)?;
    let map = build_symmetry(&sphere.vertices, SYMMETRY_TOL)?;
    let laplacian = cotangent_laplacian(&sphere)?;
    let uv = sphere_uv(&sphere, &map)?;
    let hull = convex_hull(&sfm.keypoints)?;
    let mean_shape = init_mean_shape(&hull, &sphere, &map)?;
    let kp_logits = KeypointAssignment::uniform(k, sphere.vertices.len());
    let mut instances = Vec::with_capacity(anns.len());
    for (i, ann) in anns.iter_mut().enumerate() {
        ann.sfm_camera = sfm.cameras[i];
        instances.push(InstanceState {
            deform: FreeShapeParams::zeros(map.free_count(), ShapeRole::Deformation),
            camera: sfm.cameras[i],
            flow: initial_flow(ann)?,
        });
    }
    Ok(CollectionModel {
        mesh: sphere,
        map,
        laplacian,
        uv,
        sfm: sfm.clone(),
        icosphere_level: level,
        mean_shape,
        kp_logits,
        instances,
    })
}

// ---------------------------------------------------------------------------
// Stage one: shape, assignment, cameras
// ---------------------------------------------------------------------------

fn ensure_finite_grads(step: u64, g: &GradBlocks) -> Result<()> {
    let finite_vecs = |vs: &[Vector3<f64>]| vs.iter().all(|v| v.iter().all(|x| x.is_finite()));
    let cam_ok = g.camera.d_s.is_finite()
        && g.camera.d_t.iter().all(|x| x.is_finite())
        && g.camera.d_q.iter().all(|x| x.is_finite());
    if finite_vecs(&g.mean_shape)
        && finite_vecs(&g.deform)
        && g.logits.iter().all(|x| x.is_finite())
        && cam_ok
    {
        Ok(())
    } else {
        Err(Error::numeric(
            format!("gradient at step {step}"),
            "non-finite gradient component".to_string(),
        ))
    }
}

fn check_shape_opt(model: &CollectionModel, opt_state: &ShapeOptState) -> Result<()> {
    let free3 = model.free_count() * 3;
    let kv = model.keypoint_count() * model.vertex_count();
    let n = model.instances.len();
    if opt_state.mean.m.len() != free3
        || opt_state.logits.m.len() != kv
        || opt_state.deforms.len() != n
        || opt_state.cameras.len() != n
        || opt_state.deforms.iter().any(|a| a.m.len() != free3)
        || opt_state.cameras.iter().any(|a| a.m.len() != 7)
    {
        return Err(Error::shape(
            "optimizer state does not match the model's block sizes".to_string(),
        ));
    }
    Ok(())
}

/// Run `opt.shape_iters` stage-one steps: adaptive-moment descent over the
/// mean shape, assignment logits, and every instance's deformation and
/// camera, on mini-batches of instances. Continues from `state`'s absolute
/// step counter, so schedules (batching, annealing) are resume-invariant.
///
/// Any non-finite loss or gradient aborts *before* parameters change, so the
/// state still holds the last good iterate. Returns the per-step loss trace.
pub fn train_shape(
    state: &mut TrainState,
    anns: &[InstanceAnnotation],
    opt: &OptimizerConfig,
    obj: &ObjectiveConfig,
) -> Result<Vec<TraceEntry>> {
    opt.validate()?;
    obj.validate()?;
    let n = state.model.instances.len();
    if n == 0 {
        return Err(Error::shape("model has no instances".to_string()));
    }
    if anns.len() != n {
        return Err(Error::shape(format!(
            "model has {n} instances but {} annotations were given",
            anns.len()
        )));
    }
    if opt.shape_iters == 0 {
        return Ok(Vec::new());
    }
    if state.shape_opt.is_none() {
        let free3 = state.model.free_count() * 3;
        let kv = state.model.keypoint_count() * state.model.vertex_count();
        state.shape_opt = Some(ShapeOptState {
            mean: AdamState::new(free3),
            logits: AdamState::new(kv),
            deforms: vec![AdamState::new(free3); n],
            cameras: vec![AdamState::new(7); n],
        });
    }
    check_shape_opt(&state.model, state.shape_opt.as_ref().unwrap())?;

    let base_sigma = obj.raster.sigma;
    let mut trace = Vec::with_capacity(opt.shape_iters as usize);
    for _ in 0..opt.shape_iters {
        let step = state.shape_steps;
        let mut cfg = *obj;
        cfg.raster.sigma = annealed_sigma(base_sigma, opt, step);
        let batch = batch_for_step(opt.seed, Stage::Shape, n, opt.batch_size, step);

        // Evaluate the batch in parallel; results come back in batch order.
        let reports = {
            let model = &state.model;
            let ctx = ModelContext {
                map: &model.map,
                faces: &model.mesh.faces,
                laplacian: &model.laplacian,
            };
            let results = par::map_indexed(batch.len(), |bi| {
                let i = batch[bi];
                let inst = &model.instances[i];
                let params = InstanceParams {
                    mean_shape: &model.mean_shape,
                    deform: &inst.deform,
                    assign: &model.kp_logits,
                    camera: &inst.camera,
                };
                total_objective(&ctx, &params, &anns[i], &cfg)
            });
            let mut reports = Vec::with_capacity(batch.len());
            for r in results {
                let rep = r?;
                ensure_finite_grads(step, &rep.grads)?;
                reports.push(rep);
            }
            reports
        };

        // Deterministic reduction: shared blocks get batch-mean gradients,
        // accumulated in batch order.
        let inv_b = 1.0 / batch.len() as f64;
        let free = state.model.free_count();
        let mut mean_grad = vec![Vector3::zeros(); free];
        let mut logits_grad = DMatrix::zeros(
            state.model.keypoint_count(),
            state.model.vertex_count(),
        );
        let mut values = LossValues {
            reproj: 0.0,
            mask: 0.0,
            cam: 0.0,
            smooth: 0.0,
            def: 0.0,
            vert2kp: 0.0,
            total: 0.0,
        };
        for rep in &reports {
            for (acc, g) in mean_grad.iter_mut().zip(&rep.grads.mean_shape) {
                *acc += g * inv_b;
            }
            logits_grad += &rep.grads.logits;
            values.reproj += rep.values.reproj * inv_b;
            values.mask += rep.values.mask * inv_b;
            values.cam += rep.values.cam * inv_b;
            values.smooth += rep.values.smooth * inv_b;
            values.def += rep.values.def * inv_b;
            values.vert2kp += rep.values.vert2kp * inv_b;
            values.total += rep.values.total * inv_b;
        }
        logits_grad *= inv_b;

        let TrainState {
            model, shape_opt, ..
        } = state;
        let opt_state = shape_opt.as_mut().unwrap();
        step_free(&mut opt_state.mean, opt, &mut model.mean_shape, &mean_grad, 1.0)?;
        step_logits(
            &mut opt_state.logits,
            opt,
            &mut model.kp_logits.logits,
            &logits_grad,
        )?;
        for (bi, &i) in batch.iter().enumerate() {
            let rep = &reports[bi];
            step_free(
                &mut opt_state.deforms[i],
                opt,
                &mut model.instances[i].deform,
                &rep.grads.deform,
                inv_b,
            )?;
            step_camera(
                &mut opt_state.cameras[i],
                opt,
                &mut model.instances[i].camera,
                &rep.grads.camera,
                inv_b,
            )?;
        }

        trace.push(TraceEntry { step, values });
        state.shape_steps += 1;
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Stage two: texture flows
// ---------------------------------------------------------------------------

/// Run `opt.texture_iters` stage-two steps: adaptive-moment descent over the
/// texture flows only. Shape and camera blocks are read, never written;
/// [`shape_camera_digest`] is bit-identical before and after.
pub fn train_texture(
    state: &mut TrainState,
    anns: &[InstanceAnnotation],
    opt: &OptimizerConfig,
    obj: &ObjectiveConfig,
) -> Result<Vec<TextureTraceEntry>> {
    opt.validate()?;
    obj.validate()?;
    let n = state.model.instances.len();
    if n == 0 {
        return Err(Error::shape("model has no instances".to_string()));
    }
    if anns.len() != n {
        return Err(Error::shape(format!(
            "model has {n} instances but {} annotations were given",
            anns.len()
        )));
    }
    if opt.texture_iters == 0 {
        return Ok(Vec::new());
    }
    if state.texture_opt.is_none() {
        state.texture_opt = Some(TextureOptState {
            flows: state
                .model
                .instances
                .iter()
                .map(|inst| AdamState::new(inst.flow.width() * inst.flow.height() * 2))
                .collect(),
        });
    }
    {
        let opt_state = state.texture_opt.as_ref().unwrap();
        if opt_state.flows.len() != n
            || opt_state
                .flows
                .iter()
                .zip(&state.model.instances)
                .any(|(a, inst)| a.m.len() != inst.flow.width() * inst.flow.height() * 2)
        {
            return Err(Error::shape(
                "optimizer state does not match the model's flow sizes".to_string(),
            ));
        }
    }

    // Shape and cameras are frozen for the whole stage; expand each
    // instance's vertices once.
    let all_vertices = {
        let model = &state.model;
        let results = par::map_indexed(n, |i| model.vertices_for(i));
        let mut v = Vec::with_capacity(n);
        for r in results {
            v.push(r?);
        }
        v
    };

    let mut trace = Vec::with_capacity(opt.texture_iters as usize);
    for _ in 0..opt.texture_iters {
        let step = state.texture_steps;
        let batch = batch_for_step(opt.seed, Stage::Texture, n, opt.batch_size, step);

        let reports = {
            let model = &state.model;
            let results = par::map_indexed(batch.len(), |bi| {
                let i = batch[bi];
                let inst = &model.instances[i];
                texture_objective(
                    &all_vertices[i],
                    &model.mesh.faces,
                    &inst.camera,
                    &model.uv,
                    &inst.flow,
                    &anns[i],
                    obj,
                )
            });
            let mut reports = Vec::with_capacity(batch.len());
            for r in results {
                let rep = r?;
                if !rep.d_flow.data().iter().all(|v| v.x.is_finite() && v.y.is_finite()) {
                    return Err(Error::numeric(
                        format!("texture gradient at step {step}"),
                        "non-finite gradient component".to_string(),
                    ));
                }
                reports.push(rep);
            }
            reports
        };

        let inv_b = 1.0 / batch.len() as f64;
        let mut entry = TextureTraceEntry {
            step,
            texture: 0.0,
            dt: 0.0,
            total: 0.0,
        };
        for rep in &reports {
            entry.texture += rep.texture * inv_b;
            entry.dt += rep.dt * inv_b;
            entry.total += rep.total * inv_b;
        }

        let TrainState {
            model, texture_opt, ..
        } = state;
        let opt_state = texture_opt.as_mut().unwrap();
        for (bi, &i) in batch.iter().enumerate() {
            step_flow(
                &mut opt_state.flows[i],
                opt,
                &mut model.instances[i].flow,
                &reports[bi].d_flow,
                inv_b,
            )?;
        }

        trace.push(entry);
        state.texture_steps += 1;
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Camera resectioning
// ---------------------------------------------------------------------------

/// The 24 orientation-preserving signed axis permutations: a uniform cover of
/// rotation space coarse enough that the nearest seed is always within about
/// 31 degrees of any rotation, fine enough that least squares plus local
/// refinement reaches the optimum.
fn rotation_seeds() -> Vec<Matrix3<f64>> {
    let perms: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut seeds = Vec::with_capacity(24);
    for perm in perms {
        for bits in 0..8u32 {
            let signs: [f64; 3] = [
                if bits & 1 == 0 { 1.0 } else { -1.0 },
                if bits & 2 == 0 { 1.0 } else { -1.0 },
                if bits & 4 == 0 { 1.0 } else { -1.0 },
            ];
            let mut r = Matrix3::zeros();
            for (row, &axis) in perm.iter().enumerate() {
                r[(row, axis)] = signs[row];
            }
            if (r.determinant() - 1.0).abs() < 1e-9 {
                seeds.push(r);
            }
        }
    }
    seeds
}

/// Closed-form scale and translation minimizing `sum |s a_xy + t - b|^2` for
/// a fixed rotation, with the residual sum it achieves.
fn lsq_scale_translation(
    rotated: &[Vector3<f64>],
    obs: &[Vector2<f64>],
) -> Option<(f64, Vector2<f64>, f64)> {
    let n = rotated.len() as f64;
    let mut saa = 0.0;
    let mut sa = Vector2::zeros();
    let mut sab = 0.0;
    let mut sb = Vector2::zeros();
    for (p, b) in rotated.iter().zip(obs) {
        let a = Vector2::new(p.x, p.y);
        saa += a.norm_squared();
        sa += a;
        sb += *b;
        sab += a.dot(b);
    }
    let m = Matrix3::new(saa, sa.x, sa.y, sa.x, n, 0.0, sa.y, 0.0, n);
    let rhs = Vector3::new(sab, sb.x, sb.y);
    let sol = m.lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) || sol[0] <= 0.0 {
        return None;
    }
    let s = sol[0];
    let t = Vector2::new(sol[1], sol[2]);
    let mut sse = 0.0;
    for (p, b) in rotated.iter().zip(obs) {
        sse += (Vector2::new(s * p.x + t.x, s * p.y + t.y) - b).norm_squared();
    }
    Some((s, t, sse))
}

/// Local descent on the mean squared reprojection error, with a step-size
/// ladder so the final iterate settles well inside the coarse grid's
/// resolution.
fn refine_camera(cam0: Camera, pts: &[Vector3<f64>], obs: &[Vector2<f64>]) -> Result<Camera> {
    let phases: [(u64, f64); 3] = [(200, 1e-2), (200, 1e-3), (100, 1e-4)];
    let mut cam = cam0;
    let mut adam = AdamState::new(7);
    let inv = 1.0 / pts.len() as f64;
    let mut hyper = OptimizerConfig::new(0);
    for (iters, lr) in phases {
        hyper.step_size = lr;
        for _ in 0..iters {
            let proj = camera::project(&cam, pts);
            let upstream: Vec<Vector2<f64>> = proj
                .iter()
                .zip(obs)
                .map(|(p, b)| 2.0 * inv * (p - b))
                .collect();
            let g = camera::project_vjp(&cam, pts, &upstream)?;
            let grad = CameraGrad {
                d_s: g.d_s,
                d_t: g.d_t,
                d_q: g.d_q,
            };
            step_camera(&mut adam, &hyper, &mut cam, &grad, 1.0)?;
        }
    }
    Ok(cam)
}

/// Estimate a weak-perspective camera from 2D observations of known 3D
/// points: try every rotation seed with closed-form scale/translation, keep
/// the best reprojection, then refine locally. Needs at least 4 visible
/// keypoints.
pub fn resection_camera(
    points: &[Vector3<f64>],
    obs: &KeypointObservations,
) -> Result<Camera> {
    if points.len() != obs.points.len() {
        return Err(Error::shape(format!(
            "{} model keypoints but {} observations",
            points.len(),
            obs.points.len()
        )));
    }
    let mut vis_pts = Vec::new();
    let mut vis_obs = Vec::new();
    for (i, (&p, &x)) in points.iter().zip(&obs.points).enumerate() {
        if obs.visible[i] {
            vis_pts.push(p);
            vis_obs.push(x);
        }
    }
    if vis_pts.len() < 4 {
        return Err(Error::shape(format!(
            "resectioning needs at least 4 visible keypoints, got {}",
            vis_pts.len()
        )));
    }
    let mut best: Option<(f64, Camera)> = None;
    for r in rotation_seeds() {
        let rotated: Vec<Vector3<f64>> = vis_pts.iter().map(|p| r * p).collect();
        if let Some((s, t, sse)) = lsq_scale_translation(&rotated, &vis_obs) {
            let cam = Camera::new(s.max(SCALE_FLOOR), t, rotation_to_quat(&r))?;
            if best.as_ref().is_none_or(|(b, _)| sse < *b) {
                best = Some((sse, cam));
            }
        }
    }
    let (_, cam0) = best.ok_or_else(|| {
        Error::geometry("resectioning found no usable camera seed".to_string())
    })?;
    refine_camera(cam0, &vis_pts, &vis_obs)
}

// ---------------------------------------------------------------------------
// Novel-instance fitting
// ---------------------------------------------------------------------------

/// Result of fitting the trained model to one annotated image.
#[derive(Clone, Debug)]
pub struct FittedInstance {
    pub deform: FreeShapeParams,
    pub camera: Camera,
    pub flow: TextureFlow,
    /// Camera estimated by resectioning before any descent.
    pub resectioned: Camera,
    pub shape_trace: Vec<TraceEntry>,
    pub texture_trace: Vec<TextureTraceEntry>,
}

/// Fit the model to a novel annotated instance. The shared blocks (mean
/// shape, assignment) are frozen; only this instance's deformation, camera,
/// and flow are optimized, on the same two-stage schedule as training. The
/// camera is initialized by resectioning against the model's 3D keypoints,
/// and that estimate also serves as the camera-consistency target.
pub fn fit_instance(
    model: &CollectionModel,
    ann: &InstanceAnnotation,
    opt: &OptimizerConfig,
    obj: &ObjectiveConfig,
) -> Result<FittedInstance> {
    opt.validate()?;
    obj.validate()?;
    let mean_vertices = model.mean_vertices()?;
    let kp3 = model.kp_logits.keypoint_positions(&mean_vertices)?;
    if ann.keypoints.points.len() != kp3.len() {
        return Err(Error::shape(format!(
            "annotation has {} keypoints but the model has {}",
            ann.keypoints.points.len(),
            kp3.len()
        )));
    }
    let resectioned = resection_camera(&kp3, &ann.keypoints)?;
    let mut local = ann.clone();
    local.sfm_camera = resectioned;

    let mut deform = FreeShapeParams::zeros(model.free_count(), ShapeRole::Deformation);
    let mut cam = resectioned;
    let mut adam_deform = AdamState::new(model.free_count() * 3);
    let mut adam_cam = AdamState::new(7);
    let base_sigma = obj.raster.sigma;
    let ctx = ModelContext {
        map: &model.map,
        faces: &model.mesh.faces,
        laplacian: &model.laplacian,
    };

    let mut shape_trace = Vec::with_capacity(opt.shape_iters as usize);
    for step in 0..opt.shape_iters {
        let mut cfg = *obj;
        cfg.raster.sigma = annealed_sigma(base_sigma, opt, step);
        let params = InstanceParams {
            mean_shape: &model.mean_shape,
            deform: &deform,
            assign: &model.kp_logits,
            camera: &cam,
        };
        let rep = total_objective(&ctx, &params, &local, &cfg)?;
        ensure_finite_grads(step, &rep.grads)?;
        step_free(&mut adam_deform, opt, &mut deform, &rep.grads.deform, 1.0)?;
        step_camera(&mut adam_cam, opt, &mut cam, &rep.grads.camera, 1.0)?;
        shape_trace.push(TraceEntry {
            step,
            values: rep.values,
        });
    }

    let combined = FreeShapeParams {
        values: model
            .mean_shape
            .values
            .iter()
            .zip(&deform.values)
            .map(|(m, d)| m + d)
            .collect(),
        role: ShapeRole::MeanShape,
    };
    let vertices = expand_symmetric(&model.map, &combined)?;
    let mut flow = initial_flow(&local)?;
    let mut adam_flow = AdamState::new(flow.width() * flow.height() * 2);
    let mut texture_trace = Vec::with_capacity(opt.texture_iters as usize);
    for step in 0..opt.texture_iters {
        let rep = texture_objective(
            &vertices,
            &model.mesh.faces,
            &cam,
            &model.uv,
            &flow,
            &local,
            obj,
        )?;
        if !rep
            .d_flow
            .data()
            .iter()
            .all(|v| v.x.is_finite() && v.y.is_finite())
        {
            return Err(Error::numeric(
                format!("texture gradient at step {step}"),
                "non-finite gradient component".to_string(),
            ));
        }
        step_flow(&mut adam_flow, opt, &mut flow, &rep.d_flow, 1.0)?;
        texture_trace.push(TextureTraceEntry {
            step,
            texture: rep.texture,
            dt: rep.dt,
            total: rep.total,
        });
    }

    Ok(FittedInstance {
        deform,
        camera: cam,
        flow,
        resectioned,
        shape_trace,
        texture_trace,
    })
}

// ---------------------------------------------------------------------------
// Deformation PCA
// ---------------------------------------------------------------------------

/// Principal modes of the per-instance deformations.
#[derive(Clone, Debug)]
pub struct DeformationModes {
    /// Mean expanded deformation, one vector per mesh vertex.
    pub mean: Vec<Vector3<f64>>,
    /// Orthonormal modes, largest-variance first, each one vector per vertex.
    pub modes: Vec<Vec<Vector3<f64>>>,
    /// Sample variances along each mode, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Per-instance coordinates in the mode basis, `[instance][mode]`.
    pub coefficients: Vec<Vec<f64>>,
}

/// PCA over a set of expanded deformation fields via the Gram matrix: with N
/// instances and 3|V| coordinates, the N x N eigenproblem gives identical
/// nonzero spectrum to the covariance at a fraction of the cost. Modes whose
/// Gram eigenvalue is numerically zero are reported as zero vectors with zero
/// coefficients.
pub fn pca_from_deformations(
    deltas: &[Vec<Vector3<f64>>],
    n_modes: usize,
) -> Result<DeformationModes> {
    if n_modes == 0 {
        return Err(Error::shape("requested zero modes".to_string()));
    }
    let n = deltas.len();
    if n < n_modes + 1 {
        return Err(Error::shape(format!(
            "PCA with {n_modes} modes needs at least {} instances, got {n}",
            n_modes + 1
        )));
    }
    let d = deltas[0].len();
    if d == 0 || deltas.iter().any(|x| x.len() != d) {
        return Err(Error::shape(
            "deformation sets must be non-empty and equally sized".to_string(),
        ));
    }
    let mut mean = vec![Vector3::zeros(); d];
    for delta in deltas {
        for (m, v) in mean.iter_mut().zip(delta) {
            *m += v / n as f64;
        }
    }
    let rows: Vec<Vec<f64>> = deltas
        .iter()
        .map(|delta| {
            let centered: Vec<Vector3<f64>> =
                delta.iter().zip(&mean).map(|(v, m)| v - m).collect();
            flat_from_vectors(&centered)
        })
        .collect();
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = dot;
            gram[(j, i)] = dot;
        }
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let trace: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let tol = 1e-12 * trace.max(1.0);

    let mut modes = Vec::with_capacity(n_modes);
    let mut eigenvalues = Vec::with_capacity(n_modes);
    let mut flat_modes: Vec<Option<Vec<f64>>> = Vec::with_capacity(n_modes);
    for &oj in order.iter().take(n_modes) {
        let lam = eig.eigenvalues[oj].max(0.0);
        eigenvalues.push(lam / (n - 1) as f64);
        if lam <= tol {
            modes.push(vec![Vector3::zeros(); d]);
            flat_modes.push(None);
            continue;
        }
        let col = eig.eigenvectors.column(oj);
        let mut u = vec![0.0; d * 3];
        for (i, row) in rows.iter().enumerate() {
            let w = col[i] / lam.sqrt();
            for (acc, x) in u.iter_mut().zip(row) {
                *acc += w * x;
            }
        }
        modes.push(vectors_from_flat(&u));
        flat_modes.push(Some(u));
    }
    let coefficients = rows
        .iter()
        .map(|row| {
            flat_modes
                .iter()
                .map(|mode| match mode {
                    Some(u) => row.iter().zip(u).map(|(a, b)| a * b).sum(),
                    None => 0.0,
                })
                .collect()
        })
        .collect();
    Ok(DeformationModes {
        mean,
        modes,
        eigenvalues,
        coefficients,
    })
}

/// PCA over the model's per-instance deformations (expanded to full
/// vertices, so the modes live in mesh space).
pub fn pca_deformations(model: &CollectionModel, n_modes: usize) -> Result<DeformationModes> {
    let mut deltas = Vec::with_capacity(model.instances.len());
    for inst in &model.instances {
        deltas.push(expand_symmetric(&model.map, &inst.deform)?);
    }
    pca_from_deformations(&deltas, n_modes)
}

// ---------------------------------------------------------------------------
// Texture transfer
// ---------------------------------------------------------------------------

/// Render instance `shape_of`'s geometry wearing instance `texture_of`'s
/// texture (its flow applied to its own photograph), under an arbitrary
/// camera. With `shape_of == texture_of` this is exactly the instance's own
/// textured render.
pub fn texture_transfer(
    model: &CollectionModel,
    shape_of: usize,
    texture_of: usize,
    anns: &[InstanceAnnotation],
    cam: &Camera,
    raster: &RasterConfig,
) -> Result<RgbImage> {
    let n = model.instances.len();
    if anns.len() != n {
        return Err(Error::shape(format!(
            "model has {n} instances but {} annotations were given",
            anns.len()
        )));
    }
    if shape_of >= n || texture_of >= n {
        return Err(Error::shape(format!(
            "instance index out of range: shape {shape_of}, texture {texture_of}, count {n}"
        )));
    }
    let vertices = model.vertices_for(shape_of)?;
    let texture = apply_flow(&anns[texture_of].image, &model.instances[texture_of].flow)?;
    let frags = rasterize_hard(&vertices, &model.mesh.faces, cam, raster);
    render_textured(&frags, &model.uv, &texture)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlockDesc {
    name: String,
    len: usize,
}

/// Checkpoint container header. The payload that follows is the
/// concatenation of the listed blocks, each a run of little-endian 64-bit
/// floats, in exactly the listed order:
/// `mean_shape`, `kp_logits`, then `deform/{i}`, `camera/{i}`, `flow/{i}` per
/// instance, then (when present) the stage-one optimizer blocks
/// `adam/mean_shape/{m,v,t}`, `adam/kp_logits/{m,v,t}`,
/// `adam/deform/{i}/{m,v,t}`, `adam/camera/{i}/{m,v,t}`, and finally (when
/// present) the stage-two blocks `adam/flow/{i}/{m,v,t}`. Camera blocks hold
/// [s, tx, ty, qw, qx, qy, qz]; `t` blocks hold the step counter as one f64.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    icosphere_level: u32,
    vertex_count: usize,
    free_count: usize,
    keypoint_count: usize,
    instance_count: usize,
    flow_width: usize,
    flow_height: usize,
    shape_steps: u64,
    texture_steps: u64,
    sfm: SfmResult,
    blocks: Vec<BlockDesc>,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn adam_group(prefix: &str, st: &AdamState, out: &mut Vec<(String, Vec<f64>)>) {
    out.push((format!("{prefix}/m"), st.m.clone()));
    out.push((format!("{prefix}/v"), st.v.clone()));
    out.push((format!("{prefix}/t"), vec![st.t as f64]));
}

fn model_blocks(model: &CollectionModel) -> Vec<(String, Vec<f64>)> {
    let mut blocks = Vec::new();
    blocks.push(("mean_shape".to_string(), flat_from_vectors(&model.mean_shape.values)));
    blocks.push(("kp_logits".to_string(), flat_from_matrix(&model.kp_logits.logits)));
    for (i, inst) in model.instances.iter().enumerate() {
        blocks.push((format!("deform/{i}"), flat_from_vectors(&inst.deform.values)));
        blocks.push((format!("camera/{i}"), camera_to_flat(&inst.camera).to_vec()));
        blocks.push((format!("flow/{i}"), flat_from_flow(inst.flow.raw())));
    }
    blocks
}

/// Hash of the shape and camera bytes only (mean shape, logits, deformations,
/// cameras) — the blocks stage two must not touch.
pub fn shape_camera_digest(model: &CollectionModel) -> String {
    let mut hasher = Sha256::new();
    for (name, data) in model_blocks(&CollectionModel {
        // Flows excluded: zero-size stand-ins keep the block list aligned
        // without hashing flow contents.
        instances: model
            .instances
            .iter()
            .map(|inst| InstanceState {
                deform: inst.deform.clone(),
                camera: inst.camera,
                flow: TextureFlow::from_raw(Grid::from_vec(1, 1, vec![Vector2::zeros()])),
            })
            .collect(),
        ..model.clone()
    }) {
        if name.starts_with("flow/") {
            continue;
        }
        hasher.update(name.as_bytes());
        for x in data {
            hasher.update(x.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

/// Serialize a [`TrainState`] to the checkpoint container format.
pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let model = &state.model;
    let (flow_width, flow_height) = match model.instances.first() {
        Some(inst) => (inst.flow.width(), inst.flow.height()),
        None => (0, 0),
    };
    for (i, inst) in model.instances.iter().enumerate() {
        if inst.flow.width() != flow_width || inst.flow.height() != flow_height {
            return Err(Error::data(format!(
                "instance {i} flow is {}x{} but instance 0 is {flow_width}x{flow_height}",
                inst.flow.width(),
                inst.flow.height()
            )));
        }
        if inst.deform.values.len() != model.free_count() {
            return Err(Error::shape(format!(
                "instance {i} deformation has {} free entries, expected {}",
                inst.deform.values.len(),
                model.free_count()
            )));
        }
    }
    if model.mean_shape.values.len() != model.free_count() {
        return Err(Error::shape(format!(
            "mean shape has {} free entries, expected {}",
            model.mean_shape.values.len(),
            model.free_count()
        )));
    }

    let mut blocks = model_blocks(model);
    if let Some(opt_state) = &state.shape_opt {
        check_shape_opt(model, opt_state)?;
        adam_group("adam/mean_shape", &opt_state.mean, &mut blocks);
        adam_group("adam/kp_logits", &opt_state.logits, &mut blocks);
        for i in 0..model.instances.len() {
            adam_group(&format!("adam/deform/{i}"), &opt_state.deforms[i], &mut blocks);
            adam_group(&format!("adam/camera/{i}"), &opt_state.cameras[i], &mut blocks);
        }
    }
    if let Some(opt_state) = &state.texture_opt {
        if opt_state.flows.len() != model.instances.len() {
            return Err(Error::shape(
                "texture optimizer state does not match the instance count".to_string(),
            ));
        }
        for (i, st) in opt_state.flows.iter().enumerate() {
            if st.m.len() != flow_width * flow_height * 2 {
                return Err(Error::shape(format!(
                    "texture optimizer block {i} has {} entries, expected {}",
                    st.m.len(),
                    flow_width * flow_height * 2
                )));
            }
            adam_group(&format!("adam/flow/{i}"), st, &mut blocks);
        }
    }

    let mut payload = Vec::new();
    let mut descs = Vec::with_capacity(blocks.len());
    for (name, data) in &blocks {
        descs.push(BlockDesc {
            name: name.clone(),
            len: data.len(),
        });
        for x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        icosphere_level: model.icosphere_level,
        vertex_count: model.vertex_count(),
        free_count: model.free_count(),
        keypoint_count: model.keypoint_count(),
        instance_count: model.instances.len(),
        flow_width,
        flow_height,
        shape_steps: state.shape_steps,
        texture_steps: state.texture_steps,
        sfm: model.sfm.clone(),
        blocks: descs,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::data(format!("cannot encode checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(
        CHECKPOINT_MAGIC.len() + 8 + header_json.len() + payload.len(),
    );
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Walk the declared blocks in order, insisting on exact names and lengths.
struct BlockReader<'a> {
    blocks: &'a [BlockDesc],
    floats: &'a [f64],
    index: usize,
    offset: usize,
}

impl<'a> BlockReader<'a> {
    fn next(&mut self, name: &str, len: usize) -> Result<&'a [f64]> {
        let desc = self.blocks.get(self.index).ok_or_else(|| {
            Error::data(format!("checkpoint is missing block {name}"))
        })?;
        if desc.name != name || desc.len != len {
            return Err(Error::data(format!(
                "checkpoint block mismatch: expected {name} ({len} values), found {} ({} values)",
                desc.name, desc.len
            )));
        }
        let end = self.offset + len;
        if end > self.floats.len() {
            return Err(Error::data(format!(
                "checkpoint payload too short for block {name}"
            )));
        }
        let slice = &self.floats[self.offset..end];
        self.index += 1;
        self.offset = end;
        Ok(slice)
    }

    fn peek_name(&self) -> Option<&str> {
        self.blocks.get(self.index).map(|d| d.name.as_str())
    }

    fn adam(&mut self, prefix: &str, len: usize) -> Result<AdamState> {
        let m = self.next(&format!("{prefix}/m"), len)?.to_vec();
        let v = self.next(&format!("{prefix}/v"), len)?.to_vec();
        let t_raw = self.next(&format!("{prefix}/t"), 1)?[0];
        if !t_raw.is_finite() || t_raw < 0.0 || t_raw.fract() != 0.0 || t_raw > 9.0e15 {
            return Err(Error::data(format!(
                "checkpoint block {prefix}/t holds {t_raw}, not a step count"
            )));
        }
        Ok(AdamState {
            m,
            v,
            t: t_raw as u64,
        })
    }
}

fn camera_from_flat(vals: &[f64]) -> Result<Camera> {
    if vals.len() != 7 {
        return Err(Error::data(format!(
            "camera block holds {} values, expected 7",
            vals.len()
        )));
    }
    if !vals.iter().all(|v| v.is_finite()) || vals[0] <= 0.0 {
        return Err(Error::data("camera block holds non-finite or non-positive values".to_string()));
    }
    let q = Vector4::new(vals[3], vals[4], vals[5], vals[6]);
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::data(format!(
            "camera quaternion norm {} is not unit",
            q.norm()
        )));
    }
    // Bits are preserved exactly: the stored quaternion was already
    // normalized, so no renormalization is applied here.
    Ok(Camera {
        s: vals[0],
        t: Vector2::new(vals[1], vals[2]),
        q,
    })
}

/// Deserialize a [`TrainState`] from checkpoint container bytes. The fixed
/// structure (mesh, symmetry, Laplacian, UV atlas) is rebuilt from the
/// recorded icosphere level; everything trainable is restored bit-exactly
/// after the payload hash is verified.
pub fn state_from_checkpoint_bytes(data: &[u8]) -> Result<TrainState> {
    if data.len() < CHECKPOINT_MAGIC.len() + 8 || !data.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::data("not a checkpoint file (bad magic)".to_string()));
    }
    let rest = &data[CHECKPOINT_MAGIC.len()..];
    let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < header_len {
        return Err(Error::data("checkpoint truncated inside header".to_string()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| Error::data(format!("cannot parse checkpoint header: {e}")))?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint schema version {}",
            header.schema_version
        )));
    }
    let payload = &rest[header_len..];
    if !payload.len().is_multiple_of(8) {
        return Err(Error::data("checkpoint payload is not a whole number of floats".to_string()));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::data("checkpoint payload checksum mismatch".to_string()));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let sphere = icosphere(header.icosphere_level)?;
    if sphere.vertices.len() != header.vertex_count {
        return Err(Error::data(format!(
            "icosphere level {} has {} vertices but the checkpoint records {}",
            header.icosphere_level,
            sphere.vertices.len(),
            header.vertex_count
        )));
    }
    let map = build_symmetry(&sphere.vertices, SYMMETRY_TOL)?;
    if map.free_count() != header.free_count {
        return Err(Error::data(format!(
            "symmetry map has {} free parameters but the checkpoint records {}",
            map.free_count(),
            header.free_count
        )));
    }
    if header.sfm.keypoints.len() != header.keypoint_count {
        return Err(Error::data(format!(
            "checkpoint records {} keypoints but its factorization holds {}",
            header.keypoint_count,
            header.sfm.keypoints.len()
        )));
    }
    let laplacian = cotangent_laplacian(&sphere)?;
    let uv = sphere_uv(&sphere, &map)?;

    let free3 = header.free_count * 3;
    let kv = header.keypoint_count * header.vertex_count;
    let flow_len = header.flow_width * header.flow_height * 2;
    let n = header.instance_count;
    let mut reader = BlockReader {
        blocks: &header.blocks,
        floats: &floats,
        index: 0,
        offset: 0,
    };

    let mean_shape = FreeShapeParams {
        values: vectors_from_flat(reader.next("mean_shape", free3)?),
        role: ShapeRole::MeanShape,
    };
    let kp_logits = KeypointAssignment {
        logits: matrix_from_flat(
            reader.next("kp_logits", kv)?,
            header.keypoint_count,
            header.vertex_count,
        ),
    };
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let deform = FreeShapeParams {
            values: vectors_from_flat(reader.next(&format!("deform/{i}"), free3)?),
            role: ShapeRole::Deformation,
        };
        let camera = camera_from_flat(reader.next(&format!("camera/{i}"), 7)?)?;
        let raw = reader.next(&format!("flow/{i}"), flow_len)?;
        let flow = TextureFlow::from_raw(Grid::from_vec(
            header.flow_width,
            header.flow_height,
            raw.chunks_exact(2)
                .map(|c| Vector2::new(c[0], c[1]))
                .collect(),
        ));
        instances.push(InstanceState {
            deform,
            camera,
            flow,
        });
    }

    let shape_opt = if reader.peek_name() == Some("adam/mean_shape/m") {
        let mean = reader.adam("adam/mean_shape", free3)?;
        let logits = reader.adam("adam/kp_logits", kv)?;
        let mut deforms = Vec::with_capacity(n);
        let mut cameras = Vec::with_capacity(n);
        for i in 0..n {
            deforms.push(reader.adam(&format!("adam/deform/{i}"), free3)?);
            cameras.push(reader.adam(&format!("adam/camera/{i}"), 7)?);
        }
        Some(ShapeOptState {
            mean,
            logits,
            deforms,
            cameras,
        })
    } else {
        None
    };
    let texture_opt = if reader.peek_name() == Some("adam/flow/0/m") {
        let mut flows = Vec::with_capacity(n);
        for i in 0..n {
            flows.push(reader.adam(&format!("adam/flow/{i}"), flow_len)?);
        }
        Some(TextureOptState { flows })
    } else {
        None
    };
    if reader.index != header.blocks.len() {
        return Err(Error::data(format!(
            "checkpoint holds unexpected extra block {}",
            header.blocks[reader.index].name
        )));
    }
    if reader.offset != floats.len() {
        return Err(Error::data("checkpoint payload longer than its block table".to_string()));
    }
    if header.sfm.cameras.len() != n {
        return Err(Error::data(format!(
            "checkpoint factorization holds {} cameras but records {n} instances",
            header.sfm.cameras.len()
        )));
    }

    Ok(TrainState {
        model: CollectionModel {
            mesh: sphere,
            map,
            laplacian,
            uv,
            sfm: header.sfm,
            icosphere_level: header.icosphere_level,
            mean_shape,
            kp_logits,
            instances,
        },
        shape_steps: header.shape_steps,
        texture_steps: header.texture_steps,
        shape_opt,
        texture_opt,
    })
}

/// Write a checkpoint file.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(state)?)?;
    Ok(())
}

/// Read a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let data = std::fs::read(path)?;
    state_from_checkpoint_bytes(&data).map_err(|e| match e {
        Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
