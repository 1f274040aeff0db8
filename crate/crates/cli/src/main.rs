//! Command-line driver for the reconstruction library: dataset synthesis,
//! camera factorization, collection training, single-instance fitting,
//! novel-view rendering, deformation-mode export, texture transfer, and
//! metric evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use meshfit_core::camera::{
    quat_to_rotation, rotation_to_quat, sfm_factorize, Camera, KeypointObservations,
};
use meshfit_core::fit::{
    fit_instance, init_model, load_checkpoint, pca_deformations, save_checkpoint, texture_transfer,
    train_shape, train_texture, CollectionModel, OptimizerConfig, TrainState,
};
use meshfit_core::geom::{expand_symmetric, FreeShapeParams, ShapeRole};
use meshfit_core::grid::Grid;
use meshfit_core::io::{
    eval_metrics, export_obj, load_dataset, load_sidecar, read_json, rgb_to_bytes, synth_generate,
    write_json, write_ppm, EvalInstance, SynthSpec,
};
use meshfit_core::objective::{InstanceAnnotation, ObjectiveConfig};
use meshfit_core::render::{rasterize_hard, render_textured, RasterConfig, DEFAULT_SIGMA};
use meshfit_core::texture::apply_flow;
use meshfit_core::{Error, Result};

const EXIT_USAGE: i32 = 1;
const EXIT_DATA: i32 = 2;
const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "meshfit",
    version,
    about = "Category-level deformable mesh reconstruction from annotated images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated dataset with a ground-truth sidecar.
    Synth(SynthArgs),
    /// Factorize keypoint tracks into per-instance cameras and mean 3D keypoints.
    Sfm(SfmArgs),
    /// Train a collection model: shape stage, texture stage, or both.
    Train(TrainArgs),
    /// Fit the trained model to a single annotated instance.
    Fit(FitArgs),
    /// Render a trained instance from its predicted view and novel viewpoints.
    Render(RenderArgs),
    /// Export deformation principal modes as displaced meshes.
    Pca(PcaArgs),
    /// Render one instance's shape with another instance's texture.
    Transfer(TransferArgs),
    /// Evaluate mask IoU and keypoint accuracy; write a metrics report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of instances to generate.
    #[arg(long, default_value_t = 40)]
    instances: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Scale of the per-instance deformation coefficients.
    #[arg(long, default_value_t = 0.15)]
    amplitude: f64,
}

#[derive(Args)]
struct SfmArgs {
    /// Dataset manifest to factorize.
    #[arg(long)]
    data: PathBuf,
    /// Output JSON file for cameras, mean keypoints, and residuals.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Shape,
    Texture,
    All,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest to train on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and loss traces.
    #[arg(long)]
    out: PathBuf,
    /// Which stage(s) to run.
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    stage: StageArg,
    /// JSON file holding `objective` and/or `optimizer` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the optimizer seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from this checkpoint instead of initializing a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Trained collection-model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest holding the instance to fit.
    #[arg(long)]
    data: PathBuf,
    /// Index of the instance within the manifest.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output directory for the fitted mesh, camera, and traces.
    #[arg(long)]
    out: PathBuf,
    /// JSON file holding `objective` and/or `optimizer` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the optimizer seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    /// Trained collection-model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest (source of the texture-flow images).
    #[arg(long)]
    data: PathBuf,
    /// Instance to render.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output directory for the rendered views.
    #[arg(long)]
    out: PathBuf,
    /// Rotations around the vertical axis, in degrees; 0 is the predicted view.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 60.0, 180.0, -60.0])]
    views: Vec<f64>,
    /// Square render side in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct PcaArgs {
    /// Trained collection-model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for mode meshes and the eigenvalue summary.
    #[arg(long)]
    out: PathBuf,
    /// Number of leading modes to export.
    #[arg(long, default_value_t = 3)]
    modes: usize,
}

#[derive(Args)]
struct TransferArgs {
    /// Trained collection-model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest (source of the texture-flow images).
    #[arg(long)]
    data: PathBuf,
    /// Instance whose shape and camera are rendered.
    #[arg(long)]
    shape: usize,
    /// Instance whose texture is applied.
    #[arg(long)]
    texture: usize,
    /// Output image file (binary pixmap).
    #[arg(long)]
    out: PathBuf,
    /// Square render side in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained collection-model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest to evaluate against.
    #[arg(long)]
    data: PathBuf,
    /// Output JSON file for the metrics report.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar for vertex-error metrics.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Keypoint thresholds as fractions of the larger image side, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2])]
    pck: Vec<f64>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here too; they are not failures.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let code = match err {
            Error::Numeric { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Sfm(a) => cmd_sfm(a),
        Command::Train(a) => cmd_train(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Render(a) => cmd_render(a),
        Command::Pca(a) => cmd_pca(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Optional overrides loaded from `--config`; anything absent keeps its
/// default. Unknown keys are rejected so typos fail loudly.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    objective: Option<ObjectiveConfig>,
    #[serde(default)]
    optimizer: Option<OptimizerConfig>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => read_json(p),
        None => Ok(ConfigFile::default()),
    }
}

/// Materialize the configs: the objective defaults to the dataset's image
/// dimensions, the optimizer to its stock settings; `--seed` wins over the
/// config file's seed.
fn resolve_configs(
    file: ConfigFile,
    seed: Option<u64>,
    width: usize,
    height: usize,
) -> Result<(ObjectiveConfig, OptimizerConfig)> {
    let obj = match file.objective {
        Some(o) => o,
        None => ObjectiveConfig::new(RasterConfig::new(width, height, DEFAULT_SIGMA)?),
    };
    let mut opt = file.optimizer.unwrap_or_else(|| OptimizerConfig::new(0));
    if let Some(s) = seed {
        opt.seed = s;
    }
    Ok((obj, opt))
}

fn observations(anns: &[InstanceAnnotation]) -> Vec<KeypointObservations> {
    anns.iter().map(|a| a.keypoints.clone()).collect()
}

/// Copy the model's factorization cameras onto freshly loaded annotations,
/// which carry placeholders until a model assigns them.
fn stamp_sfm_cameras(anns: &mut [InstanceAnnotation], model: &CollectionModel) -> Result<()> {
    if anns.len() != model.instances.len() {
        return Err(Error::Data(format!(
            "checkpoint was trained on {} instances but the dataset has {}",
            model.instances.len(),
            anns.len()
        )));
    }
    for (ann, cam) in anns.iter_mut().zip(&model.sfm.cameras) {
        ann.sfm_camera = *cam;
    }
    Ok(())
}

fn check_index(index: usize, len: usize, what: &str) -> Result<()> {
    if index >= len {
        return Err(Error::Data(format!(
            "{what} index {index} is out of range for {len} instances"
        )));
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 64);
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| Error::Data(format!("trace serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// The instance camera rotated by `degrees` around the object's vertical
/// axis, for turntable views.
fn orbit_camera(cam: &Camera, degrees: f64) -> Result<Camera> {
    let th = degrees.to_radians();
    let ry = Matrix3::new(
        th.cos(),
        0.0,
        th.sin(),
        0.0,
        1.0,
        0.0,
        -th.sin(),
        0.0,
        th.cos(),
    );
    let r = quat_to_rotation(cam.q) * ry;
    Camera::new(cam.s, cam.t, rotation_to_quat(&r))
}

/// Expanded vertices of the model's mean shape displaced by `deform`.
fn fitted_vertices(model: &CollectionModel, deform: &FreeShapeParams) -> Result<Vec<Vector3<f64>>> {
    if deform.values.len() != model.mean_shape.values.len() {
        return Err(Error::Data(format!(
            "deformation has {} free entries but the mean shape has {}",
            deform.values.len(),
            model.mean_shape.values.len()
        )));
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
    expand_symmetric(&model.map, &combined)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::new(a.seed);
    spec.instances = a.instances;
    spec.size = a.size;
    spec.amplitude = a.amplitude;
    let (manifest, _sidecar) = synth_generate(&spec, &a.out)?;
    println!(
        "wrote {} instances ({} keypoints, {}x{}) to {}",
        manifest.instances.len(),
        manifest.keypoint_count(),
        a.size,
        a.size,
        a.out.display()
    );
    println!("manifest: {}", a.out.join("manifest.json").display());
    println!("ground truth: {}", a.out.join("ground_truth.json").display());
    Ok(())
}

fn cmd_sfm(a: SfmArgs) -> Result<()> {
    let (manifest, anns) = load_dataset(&a.data)?;
    let sfm = sfm_factorize(&observations(&anns), &manifest.lr_index_pairs()?)?;
    let mean_residual = sfm.residuals.iter().sum::<f64>() / sfm.residuals.len().max(1) as f64;
    write_json(&a.out, &sfm)?;
    println!(
        "factorized {} instances / {} keypoints; mean reprojection residual {mean_residual:.3e}",
        sfm.cameras.len(),
        sfm.keypoints.len()
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (manifest, mut anns) = load_dataset(&a.data)?;
    if anns.is_empty() {
        return Err(Error::Data("dataset has no instances".to_string()));
    }
    let (width, height) = (anns[0].image.width(), anns[0].image.height());
    let (obj, opt) = resolve_configs(load_config(a.config.as_deref())?, a.seed, width, height)?;

    let mut state = match &a.checkpoint {
        Some(path) => {
            let state = load_checkpoint(path)?;
            stamp_sfm_cameras(&mut anns, &state.model)?;
            println!(
                "resumed from {} (shape step {}, texture step {})",
                path.display(),
                state.shape_steps,
                state.texture_steps
            );
            state
        }
        None => {
            let sfm = sfm_factorize(&observations(&anns), &manifest.lr_index_pairs()?)?;
            TrainState::new(init_model(&mut anns, &sfm)?)
        }
    };

    fs::create_dir_all(&a.out)?;
    if matches!(a.stage, StageArg::Shape | StageArg::All) {
        let trace = train_shape(&mut state, &anns, &opt, &obj)?;
        if let Some(last) = trace.last() {
            println!(
                "shape stage: {} steps, final batch loss {:.6}",
                trace.len(),
                last.values.total
            );
        }
        write_jsonl(&a.out.join("trace_shape.jsonl"), &trace)?;
    }
    if matches!(a.stage, StageArg::Texture | StageArg::All) {
        let trace = train_texture(&mut state, &anns, &opt, &obj)?;
        if let Some(last) = trace.last() {
            println!(
                "texture stage: {} steps, final batch loss {:.6}",
                trace.len(),
                last.total
            );
        }
        write_jsonl(&a.out.join("trace_texture.jsonl"), &trace)?;
    }
    let ckpt = a.out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &state)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

/// Camera parameters written alongside a fitted mesh.
#[derive(Serialize)]
struct FitSummary {
    camera: Camera,
    resectioned: Camera,
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let (_, anns) = load_dataset(&a.data)?;
    check_index(a.index, anns.len(), "instance")?;
    let ann = &anns[a.index];
    let (obj, opt) = resolve_configs(
        load_config(a.config.as_deref())?,
        a.seed,
        ann.image.width(),
        ann.image.height(),
    )?;

    let fitted = fit_instance(&state.model, ann, &opt, &obj)?;
    fs::create_dir_all(&a.out)?;
    let vertices = fitted_vertices(&state.model, &fitted.deform)?;
    let texture = apply_flow(&ann.image, &fitted.flow)?;
    export_obj(
        &a.out.join("fitted.obj"),
        &vertices,
        &state.model.mesh.faces,
        &state.model.uv,
        &texture,
    )?;
    write_json(
        &a.out.join("camera.json"),
        &FitSummary {
            camera: fitted.camera,
            resectioned: fitted.resectioned,
        },
    )?;
    write_jsonl(&a.out.join("trace_shape.jsonl"), &fitted.shape_trace)?;
    write_jsonl(&a.out.join("trace_texture.jsonl"), &fitted.texture_trace)?;
    if let Some(last) = fitted.shape_trace.last() {
        println!("shape descent: final loss {:.6}", last.values.total);
    }
    if let Some(last) = fitted.texture_trace.last() {
        println!("texture descent: final loss {:.6}", last.total);
    }
    println!("wrote {}", a.out.join("fitted.obj").display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let (_, anns) = load_dataset(&a.data)?;
    check_index(a.index, state.model.instances.len(), "instance")?;
    if anns.len() != state.model.instances.len() {
        return Err(Error::Data(format!(
            "checkpoint was trained on {} instances but the dataset has {}",
            state.model.instances.len(),
            anns.len()
        )));
    }
    let raster = RasterConfig::new(a.size, a.size, DEFAULT_SIGMA)?;
    let vertices = state.model.vertices_for(a.index)?;
    let texture = apply_flow(&anns[a.index].image, &state.model.instances[a.index].flow)?;
    let base = state.model.instances[a.index].camera;
    fs::create_dir_all(&a.out)?;
    for (k, &deg) in a.views.iter().enumerate() {
        let cam = orbit_camera(&base, deg)?;
        let buf = rasterize_hard(&vertices, &state.model.mesh.faces, &cam, &raster);
        let img = render_textured(&buf, &state.model.uv, &texture)?;
        let path = a.out.join(format!("view_{k:02}_{deg}deg.ppm"));
        write_ppm(&path, &rgb_to_bytes(&img))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Eigenvalues and per-instance coordinates written next to the mode meshes.
#[derive(Serialize)]
struct PcaSummary {
    eigenvalues: Vec<f64>,
    coefficients: Vec<Vec<f64>>,
}

fn cmd_pca(a: PcaArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let modes = pca_deformations(&state.model, a.modes)?;
    let mean_vertices = state.model.mean_vertices()?;
    let gray = Grid::filled(64, 32, Vector3::new(0.72, 0.72, 0.72));
    fs::create_dir_all(&a.out)?;
    for (j, mode) in modes.modes.iter().enumerate() {
        let scale = 2.0 * modes.eigenvalues[j].sqrt();
        for (suffix, sign) in [("plus", 1.0), ("minus", -1.0)] {
            let displaced: Vec<Vector3<f64>> = mean_vertices
                .iter()
                .zip(&modes.mean)
                .zip(mode)
                .map(|((v, dm), dj)| v + dm + dj * (sign * scale))
                .collect();
            let path = a.out.join(format!("mode{j}_{suffix}.obj"));
            export_obj(
                &path,
                &displaced,
                &state.model.mesh.faces,
                &state.model.uv,
                &gray,
            )?;
            println!("wrote {}", path.display());
        }
        println!("mode {j}: variance {:.6e}", modes.eigenvalues[j]);
    }
    write_json(
        &a.out.join("pca.json"),
        &PcaSummary {
            eigenvalues: modes.eigenvalues,
            coefficients: modes.coefficients,
        },
    )?;
    println!("wrote {}", a.out.join("pca.json").display());
    Ok(())
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let (_, anns) = load_dataset(&a.data)?;
    check_index(a.shape, state.model.instances.len(), "shape")?;
    check_index(a.texture, state.model.instances.len(), "texture")?;
    let raster = RasterConfig::new(a.size, a.size, DEFAULT_SIGMA)?;
    let cam = state.model.instances[a.shape].camera;
    let img = texture_transfer(&state.model, a.shape, a.texture, &anns, &cam, &raster)?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_ppm(&a.out, &rgb_to_bytes(&img))?;
    println!(
        "rendered shape {} with texture {} to {}",
        a.shape,
        a.texture,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let (_, mut anns) = load_dataset(&a.data)?;
    stamp_sfm_cameras(&mut anns, &state.model)?;
    let sidecar = a.sidecar.as_deref().map(load_sidecar).transpose()?;

    let mut preds = Vec::with_capacity(anns.len());
    for i in 0..anns.len() {
        let vertices = state.model.vertices_for(i)?;
        let keypoints = state.model.kp_logits.keypoint_positions(&vertices)?;
        preds.push(EvalInstance {
            vertices,
            camera_sfm: state.model.sfm.cameras[i],
            camera_pred: state.model.instances[i].camera,
            keypoints,
        });
    }
    let report = eval_metrics(
        &state.model.mesh.faces,
        &preds,
        &anns,
        &a.pck,
        sidecar.as_ref(),
    )?;
    println!(
        "mean IoU: {:.4} (factorization cameras), {:.4} (predicted cameras)",
        report.mean_iou_sfm, report.mean_iou_pred
    );
    for (t, p) in report.pck_thresholds.iter().zip(&report.pck) {
        println!("PCK@{t}: {p:.4}");
    }
    write_json(&a.out, &report)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
