//! On-disk formats: JSON-headed raw volumes, phantom directories, model
//! checkpoints and visual exports. Everything is little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::DenseModel;
use crate::error::{Error, Result};
use crate::impulse::{ImpulseModel, ModelConfig};
use crate::nn::Parameter;
use crate::phantom::{Phantom, PhantomConfig, TubeTree};
use crate::volume::{DType, LabelGrid, Volume, VolumeData};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub spacing: [f64; 3],
    pub order: String,
    pub endianness: String,
    /// Class count of a label grid; absent for plain volumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn save_raw(path: &Path, header: &VolHeader, payload: &[u8]) -> Result<()> {
    write_json(path, header)?;
    write_file(&payload_path(path), payload)
}

/// Writes the JSON header at `path` and the payload next to it as `.raw`.
pub fn save_volume(path: &Path, vol: &Volume) -> Result<()> {
    let payload: Vec<u8> = match vol.data() {
        VolumeData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VolumeData::U8(v) => v.clone(),
    };
    let header = VolHeader {
        shape: vol.shape().to_vec(),
        dtype: vol.dtype().name().into(),
        spacing: vol.spacing(),
        order: "cdhw".into(),
        endianness: "little".into(),
        num_classes: None,
    };
    save_raw(path, &header, &payload)
}

fn load_raw(path: &Path) -> Result<(VolHeader, [usize; 4], DType, Vec<u8>)> {
    let header: VolHeader = read_json(path)?;
    let dtype = match header.dtype.as_str() {
        "f32" => DType::F32,
        "u8" => DType::U8,
        other => return Err(Error::format(path, format!("unknown dtype {other:?}"))),
    };
    if header.order != "cdhw" {
        return Err(Error::format(path, format!("unsupported order {:?}", header.order)));
    }
    if header.endianness != "little" {
        return Err(Error::format(path, format!("unsupported endianness {:?}", header.endianness)));
    }
    let shape = match header.shape[..] {
        [c, d, h, w] => [c, d, h, w],
        [d, h, w] => [1, d, h, w],
        _ => {
            return Err(Error::format(
                path,
                format!("shape must have 3 or 4 entries, got {:?}", header.shape),
            ))
        }
    };
    let raw = payload_path(path);
    let bytes = read_file(&raw)?;
    let expected = shape.iter().product::<usize>() * dtype.size();
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            path: raw,
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok((header, shape, dtype, bytes))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, shape, dtype, bytes) = load_raw(path)?;
    let vol = match dtype {
        DType::F32 => Volume::from_f32(
            shape,
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        )?,
        DType::U8 => Volume::from_u8(shape, bytes)?,
    };
    vol.with_spacing(header.spacing)
}

pub fn save_labels(path: &Path, labels: &LabelGrid) -> Result<()> {
    let header = VolHeader {
        shape: labels.extent().to_vec(),
        dtype: "u8".into(),
        spacing: [1.0; 3],
        order: "cdhw".into(),
        endianness: "little".into(),
        num_classes: Some(labels.num_classes()),
    };
    save_raw(path, &header, labels.data())
}

/// Loads a single-channel `u8` volume as a label grid. Without a class
/// count in the header, `max + 1` is used.
pub fn load_labels(path: &Path) -> Result<LabelGrid> {
    let (header, shape, dtype, bytes) = load_raw(path)?;
    if dtype != DType::U8 || shape[0] != 1 {
        return Err(Error::format(path, "label grids must be single-channel u8"));
    }
    let k = header
        .num_classes
        .unwrap_or_else(|| bytes.iter().copied().max().unwrap_or(0) as usize + 1);
    LabelGrid::new([shape[1], shape[2], shape[3]], k, bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Grid files of a phantom directory, in write order.
pub const PHANTOM_GRIDS: [&str; 7] = [
    "lung_mask",
    "lobes",
    "bronchus",
    "artery",
    "vein",
    "vein_kind",
    "segments",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PhantomMeta {
    config: PhantomConfig,
    bronchus_tree: TubeTree,
    artery_tree: TubeTree,
}

/// Writes `image.vol`, one `.vol` per label grid and `phantom.json`.
pub fn save_phantom(dir: &Path, p: &Phantom) -> Result<()> {
    save_volume(&dir.join("image.vol"), &p.image)?;
    let grids = [
        &p.lung_mask,
        &p.lobe_labels,
        &p.bronchus_labels,
        &p.artery_labels,
        &p.vein_labels,
        &p.vein_kind,
        &p.segments,
    ];
    for (name, grid) in PHANTOM_GRIDS.iter().zip(grids) {
        save_labels(&dir.join(format!("{name}.vol")), grid)?;
    }
    write_json(
        &dir.join("phantom.json"),
        &PhantomMeta {
            config: p.config.clone(),
            bronchus_tree: p.bronchus_tree.clone(),
            artery_tree: p.artery_tree.clone(),
        },
    )
}

pub fn load_phantom(dir: &Path) -> Result<Phantom> {
    let meta: PhantomMeta = read_json(&dir.join("phantom.json"))?;
    let grid = |name: &str| load_labels(&dir.join(format!("{name}.vol")));
    let p = Phantom {
        image: load_volume(&dir.join("image.vol"))?,
        lung_mask: grid("lung_mask")?,
        lobe_labels: grid("lobes")?,
        bronchus_labels: grid("bronchus")?,
        artery_labels: grid("artery")?,
        vein_labels: grid("vein")?,
        vein_kind: grid("vein_kind")?,
        segments: grid("segments")?,
        config: meta.config,
        bronchus_tree: meta.bronchus_tree,
        artery_tree: meta.artery_tree,
    };
    let extent = p.segments.extent();
    for (name, e) in PHANTOM_GRIDS.iter().zip([
        p.lung_mask.extent(),
        p.lobe_labels.extent(),
        p.bronchus_labels.extent(),
        p.artery_labels.extent(),
        p.vein_labels.extent(),
        p.vein_kind.extent(),
    ]) {
        if e != extent {
            return Err(Error::format(dir.join(format!("{name}.vol")), format!("extent {e:?} != {extent:?}")));
        }
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Implicit,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub seed: u64,
    /// Input channel letters the model was trained on, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<String>,
    pub sections: Vec<Section>,
    pub total_bytes: usize,
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

fn save_sections(
    path: &Path,
    kind: ModelKind,
    config: &ModelConfig,
    seed: u64,
    inputs: Option<&str>,
    params: &[(String, &Parameter<f32>)],
) -> Result<()> {
    let mut blob = Vec::new();
    let mut sections = Vec::with_capacity(params.len());
    for (name, p) in params {
        let offset = blob.len();
        blob.extend(p.value.data().iter().flat_map(|x| x.to_le_bytes()));
        sections.push(Section {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        kind,
        config: config.clone(),
        seed,
        inputs: inputs.map(String::from),
        sections,
        total_bytes: blob.len(),
    };
    write_json(path, &manifest)?;
    let mut f = fs::File::create(blob_path(path)).map_err(|e| Error::io(blob_path(path), e))?;
    f.write_all(&blob).map_err(|e| Error::io(blob_path(path), e))
}

/// Reads and validates the manifest and blob; fills `params` (whose names
/// must match the manifest sections one to one, in order).
fn load_sections(path: &Path, kind: ModelKind, names: &[String], params: &mut [&mut Parameter<f32>], manifest: &CheckpointManifest) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::format(path, format!("checkpoint holds a {:?} model", manifest.kind)));
    }
    let blob = read_file(&blob_path(path))?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::PayloadLength {
            path: blob_path(path),
            expected: manifest.total_bytes as u64,
            actual: blob.len() as u64,
        });
    }
    if manifest.sections.len() != params.len() {
        return Err(Error::format(
            path,
            format!("expected {} sections, found {}", params.len(), manifest.sections.len()),
        ));
    }
    let mut end = 0;
    for ((s, name), p) in manifest.sections.iter().zip(names).zip(params.iter_mut()) {
        if &s.name != name {
            return Err(Error::format(path, format!("section {:?} where {name:?} was expected", s.name)));
        }
        if s.offset < end {
            return Err(Error::format(path, format!("section {:?} overlaps its predecessor", s.name)));
        }
        if s.shape != p.value.shape() || s.length != 4 * p.len() {
            return Err(Error::format(
                path,
                format!("section {:?} has shape {:?}, expected {:?}", s.name, s.shape, p.value.shape()),
            ));
        }
        end = s.offset + s.length;
        if end > blob.len() {
            return Err(Error::format(path, format!("section {:?} runs past the blob", s.name)));
        }
        let bytes = &blob[s.offset..end];
        for (v, b) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    Ok(())
}

fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let manifest: CheckpointManifest = read_json(path)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

/// Manifest JSON at `path`, parameters in `path` with extension `.bin`.
pub fn save_checkpoint(path: &Path, model: &ImpulseModel<f32>, seed: u64, inputs: Option<&str>) -> Result<()> {
    save_sections(path, ModelKind::Implicit, &model.config, seed, inputs, &model.params())
}

pub fn load_checkpoint(path: &Path) -> Result<(ImpulseModel<f32>, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    let mut model = ImpulseModel::zeros(manifest.config.clone())?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    load_sections(path, ModelKind::Implicit, &names, &mut model.params_mut(), &manifest)?;
    Ok((model, manifest))
}

/// Dense checkpoints carry the encoder sections followed by `head.*`.
pub fn save_dense_checkpoint(path: &Path, model: &DenseModel<f32>, seed: u64, inputs: Option<&str>) -> Result<()> {
    let config = ModelConfig {
        encoder: model.encoder.config.clone(),
        hidden: crate::impulse::DEFAULT_HIDDEN,
        num_classes: model.head.num_classes,
    };
    save_sections(path, ModelKind::Dense, &config, seed, inputs, &model.params())
}

pub fn load_dense_checkpoint(path: &Path) -> Result<(DenseModel<f32>, CheckpointManifest)> {
    use rand::SeedableRng;
    let manifest = read_manifest(path)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = DenseModel::new(manifest.config.encoder.clone(), manifest.config.num_classes, &mut rng)?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    load_sections(path, ModelKind::Dense, &names, &mut model.params_mut(), &manifest)?;
    Ok((model, manifest))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    D,
    H,
    W,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d" | "z" => Ok(Axis::D),
            "h" | "y" => Ok(Axis::H),
            "w" | "x" => Ok(Axis::W),
            other => Err(Error::invalid(format!("unknown axis {other:?} (use d, h or w)"))),
        }
    }
}

/// Rows and columns of a plane normal to `axis`, and the flat index of
/// `(row, col)` in that plane at `index`.
fn plane(extent: [usize; 3], axis: Axis, index: usize) -> Result<(usize, usize, impl Fn(usize, usize) -> usize)> {
    let a = axis as usize;
    if index >= extent[a] {
        return Err(Error::invalid(format!(
            "slice index {index} out of range for axis {axis:?} of extent {}",
            extent[a]
        )));
    }
    let [d, h, w] = extent;
    let (rows, cols) = match axis {
        Axis::D => (h, w),
        Axis::H => (d, w),
        Axis::W => (d, h),
    };
    let at = move |r: usize, c: usize| {
        let (i, j, k) = match axis {
            Axis::D => (index, r, c),
            Axis::H => (r, index, c),
            Axis::W => (r, c, index),
        };
        (i * h + j) * w + k
    };
    Ok((rows, cols, at))
}

/// Window mapped to the full grey range of image slices.
pub const WINDOW: [f32; 2] = [-1000.0, 200.0];

/// One colour per class; class 0 is black.
pub const PALETTE: [[u8; 3]; 19] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
];

pub fn class_color(label: u8) -> [u8; 3] {
    match label {
        0 => PALETTE[0],
        l => PALETTE[(l as usize - 1) % (PALETTE.len() - 1) + 1],
    }
}

/// Binary PGM (P5) of channel 0 of an image slice, windowed to [−1000, 200].
pub fn export_image_slice(path: &Path, image: &Volume, axis: Axis, index: usize) -> Result<()> {
    let (rows, cols, at) = plane(image.extent(), axis, index)?;
    let data = image.to_f32();
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            let v = (data[at(r, c)] - WINDOW[0]) / (WINDOW[1] - WINDOW[0]);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_file(path, &out)
}

/// Binary PPM (P6) of a label slice using [`PALETTE`].
pub fn export_label_slice(path: &Path, labels: &LabelGrid, axis: Axis, index: usize) -> Result<()> {
    let (rows, cols, at) = plane(labels.extent(), axis, index)?;
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            out.extend_from_slice(&class_color(labels.data()[at(r, c)]));
        }
    }
    write_file(path, &out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MeshStats {
    pub vertices: usize,
    pub faces: usize,
}

/// ASCII PLY of every unit face separating a foreground voxel from a voxel
/// (or the outside) with a different label, coloured by the voxel's class.
/// Vertices are in `(x, y, z) = (w, h, d)` voxel units.
pub fn export_boundary_mesh(path: &Path, labels: &LabelGrid) -> Result<MeshStats> {
    let [ed, eh, ew] = labels.extent();
    let mut quads: Vec<([[f32; 3]; 4], [u8; 3])> = Vec::new();
    // (axis offset in d,h,w) and the face corners relative to the voxel
    // center, in (x, y, z).
    let faces: [([i64; 3], [[f32; 3]; 4]); 6] = [
        ([-1, 0, 0], [[-0.5, -0.5, -0.5], [-0.5, 0.5, -0.5], [0.5, 0.5, -0.5], [0.5, -0.5, -0.5]]),
        ([1, 0, 0], [[-0.5, -0.5, 0.5], [0.5, -0.5, 0.5], [0.5, 0.5, 0.5], [-0.5, 0.5, 0.5]]),
        ([0, -1, 0], [[-0.5, -0.5, -0.5], [0.5, -0.5, -0.5], [0.5, -0.5, 0.5], [-0.5, -0.5, 0.5]]),
        ([0, 1, 0], [[-0.5, 0.5, -0.5], [-0.5, 0.5, 0.5], [0.5, 0.5, 0.5], [0.5, 0.5, -0.5]]),
        ([0, 0, -1], [[-0.5, -0.5, -0.5], [-0.5, -0.5, 0.5], [-0.5, 0.5, 0.5], [-0.5, 0.5, -0.5]]),
        ([0, 0, 1], [[0.5, -0.5, -0.5], [0.5, 0.5, -0.5], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5]]),
    ];
    for d in 0..ed {
        for h in 0..eh {
            for w in 0..ew {
                let l = labels.get(d, h, w);
                if l == 0 {
                    continue;
                }
                for (o, corners) in &faces {
                    let n = [d as i64 + o[0], h as i64 + o[1], w as i64 + o[2]];
                    let inside = n[0] >= 0 && n[1] >= 0 && n[2] >= 0 && n[0] < ed as i64 && n[1] < eh as i64 && n[2] < ew as i64;
                    let other = if inside {
                        labels.get(n[0] as usize, n[1] as usize, n[2] as usize)
                    } else {
                        0
                    };
                    if other != l {
                        let c = [w as f32, h as f32, d as f32];
                        let quad = corners.map(|v| [c[0] + v[0], c[1] + v[1], c[2] + v[2]]);
                        quads.push((quad, class_color(l)));
                    }
                }
            }
        }
    }
    let stats = MeshStats {
        vertices: 4 * quads.len(),
        faces: quads.len(),
    };
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", stats.vertices));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str(&format!("element face {}\n", stats.faces));
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for (quad, [r, g, b]) in &quads {
        for [x, y, z] in quad {
            out.push_str(&format!("{x} {y} {z} {r} {g} {b}\n"));
        }
    }
    for i in 0..quads.len() {
        let v = 4 * i;
        out.push_str(&format!("4 {} {} {} {}\n", v, v + 1, v + 2, v + 3));
    }
    write_file(path, out.as_bytes())?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::uniform_grid_coords;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_volume_payload_size_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_f32([1, 2, 2, 2], (0..8).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        let path = dir.path().join("v.vol");
        save_volume(&path, &v).unwrap();
        assert_eq!(fs::metadata(dir.path().join("v.raw")).unwrap().len(), 32);
        assert_eq!(load_volume(&path).unwrap(), v);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..3 * 5 * 4 * 6).map(|_| rng.random::<f32>() * 1e3 - 5e2).collect();
        let v = Volume::from_f32([3, 5, 4, 6], data).unwrap().with_spacing([0.7, 0.7, 1.5]).unwrap();
        save_volume(&path, &v).unwrap();
        let back = load_volume(&path).unwrap();
        let bits = |v: &Volume| v.to_f32().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
        assert_eq!(back.spacing(), [0.7, 0.7, 1.5]);
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        save_volume(&path, &Volume::filled([1, 2, 2, 2], 1.0)).unwrap();
        fs::write(dir.path().join("v.raw"), [0u8; 30]).unwrap();
        match load_volume(&path) {
            Err(Error::PayloadLength { expected, actual, .. }) => assert_eq!((expected, actual), (32, 30)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        fs::write(&path, "{\"shape\": [1, 2,\n").unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Json { line: 2, .. })));
        save_volume(&path, &Volume::filled([1, 2, 2, 2], 1.0)).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"f32\"", "\"f16\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.vol");
        let l = LabelGrid::new([2, 3, 4], 7, (0..24).map(|i| (i % 7) as u8).collect()).unwrap();
        save_labels(&path, &l).unwrap();
        assert_eq!(load_labels(&path).unwrap(), l);
    }

    #[test]
    fn phantom_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Phantom::generate(&PhantomConfig::default()).unwrap();
        save_phantom(dir.path(), &p).unwrap();
        assert_eq!(load_phantom(dir.path()).unwrap(), p);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ImpulseModel::<f32>::new(ModelConfig::new(2, 19), &mut rng).unwrap();
        save_checkpoint(&path, &m, 42, Some("IB")).unwrap();
        let (back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!((manifest.seed, manifest.inputs.as_deref()), (42, Some("IB")));
        assert_eq!(fs::metadata(dir.path().join("model.bin")).unwrap().len() as usize, 4 * m.count_params().total);
        let x = Volume::from_fn([8; 3], |d, h, w| (d * 64 + h * 8 + w) as f32 / 512.0);
        let x = Volume::stack(&[x.clone(), x]).unwrap();
        let probe = uniform_grid_coords([5; 3]).unwrap();
        assert_eq!(m.predict(&x, &probe).unwrap(), back.predict(&x, &probe).unwrap());

        let mut bad = manifest.clone();
        bad.sections[1].offset = bad.sections[0].offset + 4;
        write_json(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err());
        let mut bad = manifest.clone();
        bad.format_version = 99;
        write_json(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn dense_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dense.json");
        let m = DenseModel::<f32>::new(crate::impulse::EncoderConfig::with_channels(1), 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        save_dense_checkpoint(&path, &m, 7, None).unwrap();
        let (back, manifest) = load_dense_checkpoint(&path).unwrap();
        assert!(manifest.sections.iter().any(|s| s.name.starts_with("head.")));
        let x = Volume::from_fn([8; 3], |d, _, w| (d + w) as f32 / 16.0);
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn slices() {
        let dir = tempfile::tempdir().unwrap();
        let img = Volume::filled([1, 3, 4, 5], -400.0);
        let path = dir.path().join("s.pgm");
        export_image_slice(&path, &img, Axis::H, 2).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n5 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 15);
        assert!(bytes[header.len()..].iter().all(|&b| b == 128));
        assert!(export_image_slice(&path, &img, Axis::D, 3).is_err());

        let labels = LabelGrid::new([2, 2, 3], 19, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]).unwrap();
        let path = dir.path().join("s.ppm");
        export_label_slice(&path, &labels, Axis::W, 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 3], &[0, 0, 0]);
        assert_eq!(bytes.len(), header.len() + 12);
    }

    fn ply_counts(path: &Path) -> (usize, usize, usize, usize) {
        let text = fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        let mut nv = 0;
        let mut nf = 0;
        for line in lines.by_ref() {
            if let Some(v) = line.strip_prefix("element vertex ") {
                nv = v.parse().unwrap();
            }
            if let Some(f) = line.strip_prefix("element face ") {
                nf = f.parse().unwrap();
            }
            if line == "end_header" {
                break;
            }
        }
        let body: Vec<&str> = lines.collect();
        let faces = body.iter().filter(|l| l.starts_with("4 ")).count();
        (nv, nf, body.len() - faces, faces)
    }

    #[test]
    fn boundary_mesh_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let mut one = LabelGrid::zeros([3, 3, 3], 2);
        one.set(1, 1, 1, 1);
        assert_eq!(export_boundary_mesh(&path, &one).unwrap().faces, 6);
        assert_eq!(ply_counts(&path), (24, 6, 24, 6));

        let pair = LabelGrid::new([2, 1, 1], 2, vec![1, 1]).unwrap();
        assert_eq!(export_boundary_mesh(&path, &pair).unwrap().faces, 10);
        let (nv, nf, bv, bf) = ply_counts(&path);
        assert_eq!((nv, nf), (bv, bf));

        let empty = LabelGrid::zeros([2, 2, 2], 2);
        assert_eq!(export_boundary_mesh(&path, &empty).unwrap(), MeshStats { vertices: 0, faces: 0 });
    }
}
