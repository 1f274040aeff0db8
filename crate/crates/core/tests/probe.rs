//! TEMPORARY probe against /tmp/accpilot2 — deleted before commit.

use meshfit_core::camera::quat_to_rotation;
use meshfit_core::fit::{load_checkpoint, pca_deformations};
use meshfit_core::io::{load_dataset, load_sidecar, pixel_from_normalized};
use meshfit_core::objective::{loss_texture, loss_vert2kp};
use meshfit_core::render::{RasterConfig, DEFAULT_SIGMA};
use meshfit_core::texture::bilinear_sample;
use nalgebra::{DMatrix, Matrix3, Vector3};
use std::path::Path;

#[test]
fn probe_pilot_metrics() {
    let data = Path::new("/tmp/accpilot2/data");
    let (_, anns) = load_dataset(&data.join("manifest.json")).unwrap();
    let sidecar = load_sidecar(&data.join("ground_truth.json")).unwrap();
    let state = load_checkpoint(Path::new("/tmp/accpilot2/train/checkpoint.bin")).unwrap();
    let model = &state.model;

    // Entropy
    let ent = loss_vert2kp(&model.kp_logits).value;
    let base = (model.vertex_count() as f64).ln();
    println!(
        "entropy: {ent:.4} baseline {base:.4} ratio {:.4}",
        ent / base
    );

    // C6 foreground L1 via loss_texture per instance
    let raster = RasterConfig::new(64, 64, DEFAULT_SIGMA).unwrap();
    let mut l1_sum = 0.0;
    let mut dt_sum = 0.0;
    let mut on_fg = 0usize;
    let mut total_samples = 0usize;
    for (i, ann) in anns.iter().enumerate() {
        let verts = model.vertices_for(i).unwrap();
        let inst = &model.instances[i];
        let tl = loss_texture(
            &verts,
            &model.mesh.faces,
            &inst.camera,
            &model.uv,
            &inst.flow,
            ann,
            &raster,
        )
        .unwrap();
        l1_sum += tl.value;
        let coords = inst.flow.coords();
        let d = bilinear_sample(&ann.dfield, coords.data()).unwrap();
        dt_sum += d.iter().sum::<f64>() / d.len() as f64;
        for c in coords.data() {
            let p = pixel_from_normalized(*c, ann.image.width(), ann.image.height());
            let x = (p.x.round().max(0.0) as usize).min(ann.image.width() - 1);
            let y = (p.y.round().max(0.0) as usize).min(ann.image.height() - 1);
            total_samples += 1;
            if *ann.mask.get(x, y) {
                on_fg += 1;
            }
        }
    }
    let n = anns.len() as f64;
    println!(
        "fg L1 mean: {:.5}   dt mean: {:.5} px   on-fg frac: {:.5}",
        l1_sum / n,
        dt_sum / n,
        on_fg as f64 / total_samples as f64
    );

    // --- C7: gauge from cameras ---
    // Learned world x maps to GT world y = sigma*Rg*x + t, so the learned
    // camera rotations satisfy R_i = R_i^gt * Rg.
    let mut m = Matrix3::<f64>::zeros();
    let mut sig_sum = 0.0;
    for (i, inst) in model.instances.iter().enumerate() {
        let rg = quat_to_rotation(sidecar.instances[i].camera.q);
        let rl = quat_to_rotation(inst.camera.q);
        m += rg.transpose() * rl;
        sig_sum += inst.camera.s / sidecar.instances[i].camera.s;
    }
    let svd3 = m.svd(true, true);
    let (u3, v3t) = (svd3.u.unwrap(), svd3.v_t.unwrap());
    let det = (u3 * v3t).determinant();
    let rg = u3 * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum())) * v3t;
    let mut resid = 0.0;
    for (i, inst) in model.instances.iter().enumerate() {
        let rgt = quat_to_rotation(sidecar.instances[i].camera.q);
        let rl = quat_to_rotation(inst.camera.q);
        resid += (rl - rgt * rg).norm() / model.instances.len() as f64;
    }
    // GT camera scale already includes the per-instance fill factor; sigma
    // from scale ratios is still the best available global estimate.
    let sigma = sig_sum / model.instances.len() as f64;
    println!("camera gauge: det {det:.3} resid {resid:.4} sigma {sigma:.4}");

    let learned_mean = model.mean_vertices().unwrap();
    let c_l = learned_mean.iter().sum::<Vector3<f64>>() / learned_mean.len() as f64;
    let t = -sigma * rg * c_l;

    // GT closed-form mode fields evaluated at the aligned learned vertices,
    // pulled back into the learned frame.
    let nv = learned_mean.len();
    let mut field_a = Vec::with_capacity(nv);
    let mut field_b = Vec::with_capacity(nv);
    for x in &learned_mean {
        let y = sigma * rg * x + t;
        let u = Vector3::new(y.x, y.y / 0.75, y.z / 1.25).normalize();
        let a = u * (0.3 * (std::f64::consts::PI * u.z).sin());
        let b = Vector3::new(0.0, 0.4 * u.y, 0.0);
        field_a.push(rg.transpose() * a);
        field_b.push(rg.transpose() * b);
    }

    // GT dominant axis at learned correspondence: SVD of the actual
    // generated deformation set expressed through the closed forms.
    let n_inst = model.instances.len();
    let mut gt = DMatrix::zeros(n_inst, nv * 3);
    for (i, inst) in sidecar.instances.iter().enumerate() {
        let [ca, cb] = inst.coefficients;
        for v in 0..nv {
            let d = (field_a[v] * ca + field_b[v] * cb) * sidecar.amplitude;
            gt[(i, 3 * v)] = d.x;
            gt[(i, 3 * v + 1)] = d.y;
            gt[(i, 3 * v + 2)] = d.z;
        }
    }
    let col_mean = gt.row_mean();
    for mut row in gt.row_iter_mut() {
        row -= &col_mean;
    }
    let svd = gt.svd(false, true);
    let vt = svd.v_t.unwrap();
    let gt_axis: Vec<f64> = vt.row(0).iter().copied().collect();
    let sv: Vec<f64> = svd.singular_values.iter().take(3).copied().collect();
    println!("GT field singular values: {sv:?}");

    let modes = pca_deformations(model, 4).unwrap();
    println!("learned eigenvalues: {:?}", modes.eigenvalues);
    for j in 0..2 {
        let top: Vec<f64> = modes.modes[j]
            .iter()
            .flat_map(|v| [v.x, v.y, v.z])
            .collect();
        let dot: f64 = top.iter().zip(&gt_axis).map(|(a, b)| a * b).sum();
        let na: f64 = top.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = gt_axis.iter().map(|b| b * b).sum::<f64>().sqrt();
        println!(
            "learned mode {j} |cosine| vs GT dominant axis: {:.4}",
            (dot / na / nb).abs()
        );
    }

    // Scale of learned deformations vs GT deformations
    let mean_def: f64 = model
        .instances
        .iter()
        .map(|inst| {
            let d = meshfit_core::geom::expand_symmetric(&model.map, &inst.deform).unwrap();
            (d.iter().map(|v| v.norm_squared()).sum::<f64>() / d.len() as f64).sqrt()
        })
        .sum::<f64>()
        / n;
    println!("learned per-vertex deform RMS: {mean_def:.5}");
}
