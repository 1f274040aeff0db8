//! Dataset IO: manifest loading, bit-exact image files, synthetic dataset
//! generation, mesh export, and evaluation metrics.
//!
//! Images are stored as 8-bit binary portable graymaps (masks) and pixmaps
//! (RGB), so every read/write round-trips bit-exactly without codec
//! dependencies. Coordinates are normalized everywhere inside the crate;
//! pixel coordinates appear only in the manifest and the conversion helpers
//! here.

use std::collections::{HashMap, HashSet};
use std::f64::consts::TAU;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera, KeypointObservations};
use crate::geom::{build_symmetry, icosphere};
use crate::grid::Grid;
use crate::objective::InstanceAnnotation;
use crate::render::{self, RasterConfig, RgbImage, DEFAULT_SIGMA};
use crate::texture::{self, TextureImage, UVAtlas, UV_HEIGHT, UV_WIDTH};
use crate::{par, Error, Result};

/// Manifest schema understood by this build.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Hard cap on pixels per image file, guarding against absurd headers.
const MAX_PIXELS: usize = 1 << 26;

// ---------------------------------------------------------------------------
// Portable anymap (P5/P6) files
// ---------------------------------------------------------------------------

/// Parse a PNM header: magic, whitespace/comment-separated width, height,
/// maxval, then exactly one whitespace byte before the raster. Returns the
/// dimensions and the raster offset.
fn parse_pnm_header(data: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    if data.len() < 2 || &data[..2] != magic {
        return Err(bad(format!(
            "expected magic {}{}",
            magic[0] as char, magic[1] as char
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and # comments.
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("truncated header".to_string()));
        }
        let text = std::str::from_utf8(&data[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| bad(format!("header field {text} is not a valid size")))?;
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after maxval".to_string()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("only 8-bit files are supported, maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero image dimension".to_string()));
    }
    if w.saturating_mul(h) > MAX_PIXELS {
        return Err(Error::Capacity(format!(
            "{}: {w}x{h} exceeds the pixel cap",
            path.display()
        )));
    }
    Ok((w, h, pos))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Read an 8-bit binary graymap.
pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    let data = read_file(path)?;
    let (w, h, offset) = parse_pnm_header(&data, b"P5", path)?;
    let raster = &data[offset..];
    if raster.len() != w * h {
        return Err(Error::Data(format!(
            "{}: raster has {} bytes, expected {}",
            path.display(),
            raster.len(),
            w * h
        )));
    }
    Ok(Grid::from_vec(w, h, raster.to_vec()))
}

/// Write an 8-bit binary graymap.
pub fn write_pgm(path: &Path, img: &Grid<u8>) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.len() + 32);
    write!(bytes, "P5\n{} {}\n255\n", img.width(), img.height()).expect("vec write");
    bytes.extend_from_slice(img.data());
    write_file(path, &bytes)
}

/// Read an 8-bit binary pixmap.
pub fn read_ppm(path: &Path) -> Result<Grid<[u8; 3]>> {
    let data = read_file(path)?;
    let (w, h, offset) = parse_pnm_header(&data, b"P6", path)?;
    let raster = &data[offset..];
    if raster.len() != 3 * w * h {
        return Err(Error::Data(format!(
            "{}: raster has {} bytes, expected {}",
            path.display(),
            raster.len(),
            3 * w * h
        )));
    }
    let pixels = raster
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(Grid::from_vec(w, h, pixels))
}

/// Write an 8-bit binary pixmap.
pub fn write_ppm(path: &Path, img: &Grid<[u8; 3]>) -> Result<()> {
    let mut bytes = Vec::with_capacity(3 * img.len() + 32);
    write!(bytes, "P6\n{} {}\n255\n", img.width(), img.height()).expect("vec write");
    for px in img.data() {
        bytes.extend_from_slice(px);
    }
    write_file(path, &bytes)
}

/// Quantize a unit-interval channel to a byte (clamped, rounded).
pub fn quantize_channel(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantize a float RGB image for writing.
pub fn rgb_to_bytes(img: &RgbImage) -> Grid<[u8; 3]> {
    Grid::from_vec(
        img.width(),
        img.height(),
        img.data()
            .iter()
            .map(|c| [quantize_channel(c.x), quantize_channel(c.y), quantize_channel(c.z)])
            .collect(),
    )
}

/// Decode a byte image to unit-interval floats.
pub fn bytes_to_rgb(img: &Grid<[u8; 3]>) -> RgbImage {
    Grid::from_vec(
        img.width(),
        img.height(),
        img.data()
            .iter()
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
            .collect(),
    )
}

/// Encode a mask as a 0/255 graymap.
pub fn mask_to_bytes(mask: &Grid<bool>) -> Grid<u8> {
    Grid::from_vec(
        mask.width(),
        mask.height(),
        mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect(),
    )
}

/// Binarize a graymap at half intensity.
pub fn bytes_to_mask(img: &Grid<u8>) -> Grid<bool> {
    Grid::from_vec(
        img.width(),
        img.height(),
        img.data().iter().map(|&b| b as f64 / 255.0 >= 0.5).collect(),
    )
}

// ---------------------------------------------------------------------------
// Coordinate conventions
// ---------------------------------------------------------------------------

/// Normalized [-1, 1] coordinates to continuous pixel coordinates, where the
/// center of pixel (i, j) sits at (i + 0.5, j + 0.5).
pub fn pixel_from_normalized(p: Vector2<f64>, width: usize, height: usize) -> Vector2<f64> {
    Vector2::new(
        (p.x + 1.0) * width as f64 / 2.0,
        (p.y + 1.0) * height as f64 / 2.0,
    )
}

/// Continuous pixel coordinates to normalized [-1, 1] coordinates.
pub fn normalized_from_pixel(p: Vector2<f64>, width: usize, height: usize) -> Vector2<f64> {
    Vector2::new(
        2.0 * p.x / width as f64 - 1.0,
        2.0 * p.y / height as f64 - 1.0,
    )
}

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

/// Serialize a value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Read and deserialize a JSON file.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let data = read_file(path)?;
    serde_json::from_slice(&data)
        .map_err(|e| Error::Data(format!("{} is not valid: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// One annotated keypoint in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestKeypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// One instance entry: file paths relative to the manifest plus keypoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub keypoints: Vec<ManifestKeypoint>,
}

/// Dataset description: keypoint vocabulary with left/right pairing and the
/// per-instance annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub width: usize,
    pub height: usize,
    pub keypoint_names: Vec<String>,
    /// Mirror-symmetric keypoint pairs as [left name, right name].
    pub lr_pairs: Vec<[String; 2]>,
    pub instances: Vec<ManifestInstance>,
}

impl DatasetManifest {
    pub fn keypoint_count(&self) -> usize {
        self.keypoint_names.len()
    }

    /// Structural checks: schema version, unique names and ids, consistent
    /// left/right pairs, uniform keypoint counts, coordinates in bounds.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "manifest schema version {} is not supported (expected {})",
                self.schema_version, MANIFEST_SCHEMA_VERSION
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Data("manifest image dimensions are zero".to_string()));
        }
        let mut names = HashSet::new();
        for n in &self.keypoint_names {
            if !names.insert(n.as_str()) {
                return Err(Error::Data(format!("duplicate keypoint name {n}")));
            }
        }
        let mut paired = HashSet::new();
        for [l, r] in &self.lr_pairs {
            if l == r {
                return Err(Error::Data(format!("keypoint {l} is paired with itself")));
            }
            for n in [l, r] {
                if !names.contains(n.as_str()) {
                    return Err(Error::Data(format!("pair references unknown keypoint {n}")));
                }
                if !paired.insert(n.as_str()) {
                    return Err(Error::Data(format!("keypoint {n} appears in two pairs")));
                }
            }
        }
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::Data(format!("duplicate instance id {}", inst.id)));
            }
            if inst.keypoints.len() != self.keypoint_names.len() {
                return Err(Error::Data(format!(
                    "instance {}: {} keypoints, manifest declares {}",
                    inst.id,
                    inst.keypoints.len(),
                    self.keypoint_names.len()
                )));
            }
            for (k, kp) in inst.keypoints.iter().enumerate() {
                if !kp.x.is_finite() || !kp.y.is_finite() {
                    return Err(Error::Data(format!(
                        "instance {}: keypoint {} is not finite",
                        inst.id, self.keypoint_names[k]
                    )));
                }
                if kp.visible
                    && !(0.0..=self.width as f64).contains(&kp.x)
                    || kp.visible && !(0.0..=self.height as f64).contains(&kp.y)
                {
                    return Err(Error::Data(format!(
                        "instance {}: keypoint {} at ({}, {}) is outside the {}x{} image",
                        inst.id, self.keypoint_names[k], kp.x, kp.y, self.width, self.height
                    )));
                }
            }
        }
        Ok(())
    }

    /// Left/right pairs as keypoint indices, for the factorization gauge.
    pub fn lr_index_pairs(&self) -> Result<Vec<(usize, usize)>> {
        let index: HashMap<&str, usize> = self
            .keypoint_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        self.lr_pairs
            .iter()
            .map(|[l, r]| {
                let li = *index
                    .get(l.as_str())
                    .ok_or_else(|| Error::Data(format!("unknown keypoint {l}")))?;
                let ri = *index
                    .get(r.as_str())
                    .ok_or_else(|| Error::Data(format!("unknown keypoint {r}")))?;
                Ok((li, ri))
            })
            .collect()
    }
}

/// Write a manifest as pretty JSON.
pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    write_json(path, manifest)
}

/// Read and validate a manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(path)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Load a dataset: decode images and masks, normalize keypoints, and
/// precompute mask distance fields, in manifest order. Instances load in
/// parallel. Cameras start at identity; the structure-from-motion stage
/// fills them in.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<InstanceAnnotation>)> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let loaded = par::map_indexed(manifest.instances.len(), |i| {
        load_instance(&manifest, base, i)
    });
    let annotations = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((manifest, annotations))
}

fn load_instance(
    manifest: &DatasetManifest,
    base: &Path,
    index: usize,
) -> Result<InstanceAnnotation> {
    let inst = &manifest.instances[index];
    let with_id = |e: Error| Error::Data(format!("instance {}: {e}", inst.id));
    let image = bytes_to_rgb(&read_ppm(&base.join(&inst.image)).map_err(with_id)?);
    let mask = bytes_to_mask(&read_pgm(&base.join(&inst.mask)).map_err(with_id)?);
    if image.width() != manifest.width || image.height() != manifest.height {
        return Err(Error::Data(format!(
            "instance {}: image is {}x{}, manifest declares {}x{}",
            inst.id,
            image.width(),
            image.height(),
            manifest.width,
            manifest.height
        )));
    }
    if mask.width() != manifest.width || mask.height() != manifest.height {
        return Err(Error::Data(format!(
            "instance {}: mask is {}x{}, manifest declares {}x{}",
            inst.id,
            mask.width(),
            mask.height(),
            manifest.width,
            manifest.height
        )));
    }
    let keypoints = KeypointObservations {
        points: inst
            .keypoints
            .iter()
            .map(|kp| {
                normalized_from_pixel(Vector2::new(kp.x, kp.y), manifest.width, manifest.height)
            })
            .collect(),
        visible: inst.keypoints.iter().map(|kp| kp.visible).collect(),
    };
    InstanceAnnotation::new(image, mask, keypoints, Camera::identity()).map_err(with_id)
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

/// Parameters of the synthetic dataset generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub instances: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Scale of the per-instance deformation coefficients.
    pub amplitude: f64,
    /// Colors blended into each instance's procedural texture.
    pub palette: Vec<Vector3<f64>>,
}

impl SynthSpec {
    pub fn new(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            instances: 40,
            size: 64,
            amplitude: 0.25,
            palette: vec![
                Vector3::new(0.85, 0.25, 0.20),
                Vector3::new(0.95, 0.75, 0.20),
                Vector3::new(0.20, 0.55, 0.85),
                Vector3::new(0.25, 0.75, 0.45),
                Vector3::new(0.90, 0.90, 0.90),
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Data("need at least one instance".to_string()));
        }
        if self.size < 8 {
            return Err(Error::Data(format!("image size {} is below 8", self.size)));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::Data(format!(
                "deformation amplitude {} must be non-negative",
                self.amplitude
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::Data("palette is empty".to_string()));
        }
        for c in &self.palette {
            if !(0.0..=1.0).contains(&c.x) || !(0.0..=1.0).contains(&c.y) || !(0.0..=1.0).contains(&c.z)
            {
                return Err(Error::Data(format!("palette color {c:?} leaves [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Ground truth for one generated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthInstanceTruth {
    pub camera: Camera,
    /// Coefficients of the two deformation modes.
    pub coefficients: [f64; 2],
}

/// Ground-truth sidecar written next to a synthetic dataset, for evaluation
/// only. Instance shapes are reconstructed from the stored mean, modes,
/// amplitude, and coefficients, so the file stays compact and the
/// reconstruction is exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub schema_version: u32,
    /// Icosphere subdivision level of the mesh topology.
    pub subdivision: u32,
    pub amplitude: f64,
    pub mean_vertices: Vec<Vector3<f64>>,
    /// Radial inflation mode.
    pub mode_inflate: Vec<Vector3<f64>>,
    /// Vertical stretch mode.
    pub mode_stretch: Vec<Vector3<f64>>,
    /// Mesh vertex index of each keypoint, in manifest keypoint order.
    pub attachments: Vec<usize>,
    pub instances: Vec<SynthInstanceTruth>,
}

impl SynthSidecar {
    /// Reconstruct the exact ground-truth vertices of one instance.
    pub fn instance_vertices(&self, index: usize) -> Result<Vec<Vector3<f64>>> {
        let inst = self.instances.get(index).ok_or_else(|| {
            Error::Data(format!(
                "instance {index} out of range ({} in sidecar)",
                self.instances.len()
            ))
        })?;
        if self.mode_inflate.len() != self.mean_vertices.len()
            || self.mode_stretch.len() != self.mean_vertices.len()
        {
            return Err(Error::shape(
                "sidecar mode vectors disagree with the mean shape".to_string(),
            ));
        }
        let [ca, cb] = inst.coefficients;
        Ok(self
            .mean_vertices
            .iter()
            .zip(&self.mode_inflate)
            .zip(&self.mode_stretch)
            .map(|((m, a), b)| m + (a * ca + b * cb) * self.amplitude)
            .collect())
    }
}

/// Read a ground-truth sidecar.
pub fn load_sidecar(path: &Path) -> Result<SynthSidecar> {
    read_json(path)
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Pick keypoint attachments on the ground-truth mesh: five well-spread
/// left/right vertex pairs plus the top and bottom on-plane vertices.
/// Returns (attachment vertex ids, names, left/right name pairs).
fn select_attachments(
    vertices: &[Vector3<f64>],
    mirror: &[usize],
) -> (Vec<usize>, Vec<String>, Vec<[String; 2]>) {
    // Left-side candidates, one per mirror pair.
    let lefts: Vec<usize> = (0..vertices.len())
        .filter(|&v| mirror[v] != v && vertices[v].x < 0.0)
        .collect();
    // Farthest-point sampling for spread, seeded at the lowest candidate.
    let start = lefts
        .iter()
        .copied()
        .min_by(|&a, &b| vertices[a].y.total_cmp(&vertices[b].y).then(a.cmp(&b)))
        .expect("mirror pairs exist on an icosphere");
    let mut chosen = vec![start];
    while chosen.len() < 5 {
        let next = lefts
            .iter()
            .copied()
            .filter(|v| !chosen.contains(v))
            .max_by(|&a, &b| {
                let da = chosen
                    .iter()
                    .map(|&c| (vertices[a] - vertices[c]).norm())
                    .fold(f64::INFINITY, f64::min);
                let db = chosen
                    .iter()
                    .map(|&c| (vertices[b] - vertices[c]).norm())
                    .fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("more than five candidate pairs");
        chosen.push(next);
    }
    let on_plane: Vec<usize> = (0..vertices.len()).filter(|&v| mirror[v] == v).collect();
    let top = on_plane
        .iter()
        .copied()
        .max_by(|&a, &b| vertices[a].y.total_cmp(&vertices[b].y).then(b.cmp(&a)))
        .expect("on-plane vertices exist");
    let bottom = on_plane
        .iter()
        .copied()
        .min_by(|&a, &b| vertices[a].y.total_cmp(&vertices[b].y).then(a.cmp(&b)))
        .expect("on-plane vertices exist");

    let mut attachments = Vec::with_capacity(12);
    let mut names = Vec::with_capacity(12);
    let mut pairs = Vec::with_capacity(5);
    for (k, &left) in chosen.iter().enumerate() {
        attachments.push(left);
        names.push(format!("left_{k}"));
        attachments.push(mirror[left]);
        names.push(format!("right_{k}"));
        pairs.push([format!("left_{k}"), format!("right_{k}")]);
    }
    attachments.push(top);
    names.push("center_top".to_string());
    attachments.push(bottom);
    names.push("center_bottom".to_string());
    (attachments, names, pairs)
}

/// Generate a synthetic dataset on disk: deformed anisotropic spheres under
/// random bounded-elevation cameras, with procedural textures, hard-raster
/// masks, exact keypoint projections, and a ground-truth sidecar.
///
/// Layout under `out_dir`: `manifest.json`, `ground_truth.json`,
/// `images/<id>.ppm`, `masks/<id>.pgm`. Deterministic for a fixed spec.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<(DatasetManifest, SynthSidecar)> {
    spec.validate()?;
    let mesh = icosphere(3)?;
    let map = build_symmetry(&mesh.vertices, 1e-8)?;
    let uv = texture::sphere_uv(&mesh, &map)?;
    let mirror = map.mirror_vertex();

    // Ground-truth mean: anisotropic sphere. Modes are functions of the
    // unit-sphere positions, so both are exactly mirror symmetric.
    let mean_vertices: Vec<Vector3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| Vector3::new(v.x, 0.75 * v.y, 1.25 * v.z))
        .collect();
    let mode_inflate: Vec<Vector3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| v * (0.3 * (std::f64::consts::PI * v.z).sin()))
        .collect();
    let mode_stretch: Vec<Vector3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| Vector3::new(0.0, 0.4 * v.y, 0.0))
        .collect();
    let (attachments, names, lr_pairs) = select_attachments(&mesh.vertices, &mirror);

    fs::create_dir_all(out_dir.join("images"))
        .and_then(|_| fs::create_dir_all(out_dir.join("masks")))
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut sidecar = SynthSidecar {
        schema_version: MANIFEST_SCHEMA_VERSION,
        subdivision: 3,
        amplitude: spec.amplitude,
        mean_vertices,
        mode_inflate,
        mode_stretch,
        attachments,
        instances: Vec::with_capacity(spec.instances),
    };

    let raster = RasterConfig::new(spec.size, spec.size, DEFAULT_SIGMA)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut instances = Vec::with_capacity(spec.instances);
    for i in 0..spec.instances {
        // Fixed draw order per instance keeps the stream reproducible. The
        // inflation coefficient is drawn at 0.4x the stretch coefficient's
        // range so the family has one clearly dominant variation axis.
        let ca = 0.4 * rng.gen_range(-1.0..1.0);
        let cb = rng.gen_range(-1.0..1.0);
        let azimuth = rng.gen_range(0.0..TAU);
        let elevation = rng.gen_range(-0.5..0.5);
        let fill = rng.gen_range(0.75..0.95);
        let tx = rng.gen_range(-0.05..0.05);
        let ty = rng.gen_range(-0.05..0.05);
        let color_a = rng.gen_range(0..spec.palette.len());
        let color_b = if spec.palette.len() > 1 {
            (color_a + 1 + rng.gen_range(0..spec.palette.len() - 1)) % spec.palette.len()
        } else {
            color_a
        };
        let freq_u = rng.gen_range(0.5..2.5);
        let freq_v = rng.gen_range(0.5..2.5);
        let phase = rng.gen_range(0.0..TAU);

        sidecar.instances.push(SynthInstanceTruth {
            camera: Camera::identity(),
            coefficients: [ca, cb],
        });
        let vertices = sidecar.instance_vertices(i)?;

        // Scale so the whole object stays inside the frame at any amplitude.
        let radius = vertices
            .iter()
            .map(|v| v.norm())
            .fold(0.0f64, f64::max)
            .max(1e-9);
        let s = fill * 0.95 / radius;
        let q = camera::rotation_to_quat(&(rot_x(elevation) * rot_y(azimuth)));
        let cam = Camera::new(s, Vector2::new(tx, ty), q)?;
        sidecar.instances[i].camera = cam;

        let texture_img: TextureImage = Grid::from_fn(UV_WIDTH, UV_HEIGHT, |x, y| {
            let u = x as f64 / (UV_WIDTH - 1) as f64;
            let v = y as f64 / (UV_HEIGHT - 1) as f64;
            let alpha = 0.5 + 0.5 * (TAU * (freq_u * u + freq_v * v) + phase).sin();
            spec.palette[color_a] * alpha + spec.palette[color_b] * (1.0 - alpha)
        });

        let buf = render::rasterize_hard(&vertices, &mesh.faces, &cam, &raster);
        let mask = Grid::from_vec(
            spec.size,
            spec.size,
            buf.pixels.data().iter().map(|f| f.is_some()).collect(),
        );
        let image = render::render_textured(&buf, &uv, &texture_img)?;

        let id = format!("inst_{i:03}");
        write_ppm(&out_dir.join(format!("images/{id}.ppm")), &rgb_to_bytes(&image))?;
        write_pgm(&out_dir.join(format!("masks/{id}.pgm")), &mask_to_bytes(&mask))?;

        let attach_points: Vec<Vector3<f64>> =
            sidecar.attachments.iter().map(|&a| vertices[a]).collect();
        let proj = camera::project(&cam, &attach_points);
        let keypoints = proj
            .iter()
            .map(|p| {
                let px = pixel_from_normalized(*p, spec.size, spec.size);
                ManifestKeypoint {
                    x: px.x,
                    y: px.y,
                    visible: true,
                }
            })
            .collect();
        instances.push(ManifestInstance {
            id: id.clone(),
            image: format!("images/{id}.ppm"),
            mask: format!("masks/{id}.pgm"),
            keypoints,
        });
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        width: spec.size,
        height: spec.size,
        keypoint_names: names,
        lr_pairs,
        instances,
    };
    save_manifest(&out_dir.join("manifest.json"), &manifest)?;
    write_json(&out_dir.join("ground_truth.json"), &sidecar)?;
    Ok((manifest, sidecar))
}

// ---------------------------------------------------------------------------
// Mesh export
// ---------------------------------------------------------------------------

/// Export a textured mesh: a text mesh file with per-corner texture
/// coordinates (seam corners get duplicated records), a companion material
/// file, and the texture as a binary pixmap, all next to `path`.
pub fn export_obj(
    path: &Path,
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    uv: &UVAtlas,
    texture_img: &TextureImage,
) -> Result<()> {
    if uv.face_uvs.len() != faces.len() {
        return Err(Error::shape(format!(
            "{} faces but {} texture triangles",
            faces.len(),
            uv.face_uvs.len()
        )));
    }
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v >= vertices.len() {
                return Err(Error::shape(format!(
                    "face {fi} references vertex {v} out of range"
                )));
            }
        }
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    // One texture-coordinate record per distinct (vertex, uv) pair: interior
    // vertices share a record, seam and pole corners split.
    let mut vt_index: HashMap<(usize, u64, u64), usize> = HashMap::new();
    let mut vt_records: Vec<Vector2<f64>> = Vec::new();
    let mut corner_vt: Vec<[usize; 3]> = Vec::with_capacity(faces.len());
    for (f, uvs) in faces.iter().zip(&uv.face_uvs) {
        let mut ids = [0usize; 3];
        for c in 0..3 {
            let key = (f[c], uvs[c].x.to_bits(), uvs[c].y.to_bits());
            let next = vt_records.len();
            let id = *vt_index.entry(key).or_insert_with(|| {
                vt_records.push(uvs[c]);
                next
            });
            ids[c] = id;
        }
        corner_vt.push(ids);
    }

    let mut obj = String::new();
    obj.push_str(&format!("mtllib {stem}.mtl\n"));
    for v in vertices {
        obj.push_str(&format!("v {:.6} {:.6} {:.6}\n", v.x, v.y, v.z));
    }
    // The mesh format puts the texture origin at the bottom-left; image row
    // zero is the top, so flip the second coordinate.
    for vt in &vt_records {
        obj.push_str(&format!("vt {:.6} {:.6}\n", vt.x, 1.0 - vt.y));
    }
    obj.push_str("usemtl material0\n");
    for (f, ids) in faces.iter().zip(&corner_vt) {
        obj.push_str(&format!(
            "f {}/{} {}/{} {}/{}\n",
            f[0] + 1,
            ids[0] + 1,
            f[1] + 1,
            ids[1] + 1,
            f[2] + 1,
            ids[2] + 1
        ));
    }
    write_file(path, obj.as_bytes())?;

    let mtl = format!(
        "newmtl material0\nKa 1.000000 1.000000 1.000000\nKd 1.000000 1.000000 1.000000\nmap_Kd {stem}.ppm\n"
    );
    write_file(&dir.join(format!("{stem}.mtl")), mtl.as_bytes())?;
    write_ppm(&dir.join(format!("{stem}.ppm")), &rgb_to_bytes(texture_img))
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

/// Intersection over union of two masks of equal size. Two empty masks
/// count as a perfect match.
pub fn mask_iou(a: &Grid<bool>, b: &Grid<bool>) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::shape(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// One instance's prediction, ready for metric evaluation.
#[derive(Clone, Debug)]
pub struct EvalInstance {
    /// Predicted full mesh vertices.
    pub vertices: Vec<Vector3<f64>>,
    /// Camera from structure from motion (annotation side).
    pub camera_sfm: Camera,
    /// Camera predicted by the model.
    pub camera_pred: Camera,
    /// Predicted 3D keypoint positions (assignment times vertices).
    pub keypoints: Vec<Vector3<f64>>,
}

/// Evaluation summary over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-instance mask IoU rendered under the SfM cameras.
    pub iou_sfm: Vec<f64>,
    /// Per-instance mask IoU rendered under the predicted cameras.
    pub iou_pred: Vec<f64>,
    pub mean_iou_sfm: f64,
    pub mean_iou_pred: f64,
    /// IoU curve thresholds, 0.5 to 0.95 in steps of 0.05.
    pub iou_thresholds: Vec<f64>,
    /// Fraction of instances whose SfM-camera IoU exceeds each threshold.
    pub iou_curve_sfm: Vec<f64>,
    /// Fraction of instances whose predicted-camera IoU exceeds each threshold.
    pub iou_curve_pred: Vec<f64>,
    /// Keypoint thresholds as fractions of the larger image side.
    pub pck_thresholds: Vec<f64>,
    /// Fraction of visible keypoints reprojected within each threshold.
    pub pck: Vec<f64>,
    /// Per-instance vertex RMSE against ground truth after similarity
    /// alignment, when a sidecar was supplied.
    pub gt_vertex_rmse: Option<Vec<f64>>,
}

/// Evaluate mask IoU (under both cameras), keypoint PCK (under the SfM
/// camera), and optionally ground-truth shape error.
pub fn eval_metrics(
    faces: &[[usize; 3]],
    preds: &[EvalInstance],
    annotations: &[InstanceAnnotation],
    pck_thresholds: &[f64],
    sidecar: Option<&SynthSidecar>,
) -> Result<MetricsReport> {
    if preds.len() != annotations.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} annotations",
            preds.len(),
            annotations.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no instances to evaluate".to_string()));
    }
    if pck_thresholds.is_empty()
        || pck_thresholds.iter().any(|t| !t.is_finite() || *t <= 0.0)
        || pck_thresholds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::Data(
            "keypoint thresholds must be positive, finite, strictly ascending".to_string(),
        ));
    }
    if let Some(sc) = sidecar {
        if sc.instances.len() != preds.len() {
            return Err(Error::shape(format!(
                "sidecar has {} instances, predictions {}",
                sc.instances.len(),
                preds.len()
            )));
        }
    }

    let mut iou_sfm = Vec::with_capacity(preds.len());
    let mut iou_pred = Vec::with_capacity(preds.len());
    let mut hits = vec![0usize; pck_thresholds.len()];
    let mut visible_total = 0usize;
    let mut gt_rmse = sidecar.map(|_| Vec::with_capacity(preds.len()));

    for (i, (pred, ann)) in preds.iter().zip(annotations).enumerate() {
        let (w, h) = (ann.mask.width(), ann.mask.height());
        let raster = RasterConfig::new(w, h, DEFAULT_SIGMA)?;
        for (cam, out) in [
            (&pred.camera_sfm, &mut iou_sfm),
            (&pred.camera_pred, &mut iou_pred),
        ] {
            let buf = render::rasterize_hard(&pred.vertices, faces, cam, &raster);
            let rendered = Grid::from_vec(
                w,
                h,
                buf.pixels.data().iter().map(|f| f.is_some()).collect(),
            );
            out.push(mask_iou(&rendered, &ann.mask)?);
        }

        if pred.keypoints.len() != ann.keypoints.points.len() {
            return Err(Error::shape(format!(
                "instance {i}: {} predicted keypoints for {} annotated",
                pred.keypoints.len(),
                ann.keypoints.points.len()
            )));
        }
        let proj = camera::project(&pred.camera_sfm, &pred.keypoints);
        let side = w.max(h) as f64;
        for (k, p) in proj.iter().enumerate() {
            if !ann.keypoints.visible[k] {
                continue;
            }
            visible_total += 1;
            let err = (pixel_from_normalized(*p, w, h)
                - pixel_from_normalized(ann.keypoints.points[k], w, h))
            .norm();
            for (t, &thr) in pck_thresholds.iter().enumerate() {
                if err < thr * side {
                    hits[t] += 1;
                }
            }
        }

        if let (Some(rmse), Some(sc)) = (gt_rmse.as_mut(), sidecar) {
            let gt = sc.instance_vertices(i)?;
            if gt.len() != pred.vertices.len() {
                return Err(Error::shape(format!(
                    "instance {i}: prediction has {} vertices, ground truth {}",
                    pred.vertices.len(),
                    gt.len()
                )));
            }
            let sim = camera::align_similarity(&pred.vertices, &gt)?;
            let mse = pred
                .vertices
                .iter()
                .zip(&gt)
                .map(|(p, g)| (sim.apply(*p) - g).norm_squared())
                .sum::<f64>()
                / gt.len() as f64;
            rmse.push(mse.sqrt());
        }
    }

    if visible_total == 0 {
        return Err(Error::Data("no visible keypoints to evaluate".to_string()));
    }
    let n = preds.len() as f64;
    let iou_thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let curve = |ious: &[f64]| -> Vec<f64> {
        iou_thresholds
            .iter()
            .map(|&thr| ious.iter().filter(|&&v| v > thr).count() as f64 / n)
            .collect()
    };
    Ok(MetricsReport {
        mean_iou_sfm: iou_sfm.iter().sum::<f64>() / n,
        mean_iou_pred: iou_pred.iter().sum::<f64>() / n,
        iou_curve_sfm: curve(&iou_sfm),
        iou_curve_pred: curve(&iou_pred),
        iou_sfm,
        iou_pred,
        pck: hits
            .iter()
            .map(|&c| c as f64 / visible_total as f64)
            .collect(),
        pck_thresholds: pck_thresholds.to_vec(),
        iou_thresholds,
        gt_vertex_rmse: gt_rmse,
    })
}
