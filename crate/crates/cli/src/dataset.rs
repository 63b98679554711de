//! Dataset directories: a `manifest.jsonl` of per-sample records plus
//! flat raster files named by sample id. `img_<id>.ppm` holds the RGB
//! render, `depth_<id>.pgm` the 16-bit depth map (value/65535), and
//! `mask_<id>_<k>.pgm` one 8-bit mask per instance (foreground 255).
//! Loading reconstructs the exact `SceneSample`s the generator wrote,
//! up to the documented 16-bit depth quantization.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spatok_core::scene::{
    point_label, DepthMap, Instance, RelativeDepthTask, SceneSample, Shape, COLORS,
};

use crate::pnm;

#[derive(Debug)]
pub enum DatasetError {
    Io { path: String, source: std::io::Error },
    Pnm(pnm::PnmError),
    /// Manifest problem, located by line number.
    Manifest { path: String, line: usize, reason: String },
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Io { path, source } => write!(f, "{path}: {source}"),
            DatasetError::Pnm(e) => write!(f, "{e}"),
            DatasetError::Manifest { path, line, reason } => {
                write!(f, "{path} line {line}: {reason}")
            }
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<pnm::PnmError> for DatasetError {
    fn from(e: pnm::PnmError) -> Self {
        DatasetError::Pnm(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskRecord {
    file: String,
    shape: String,
    color: String,
    z: f64,
}

/// Points keyed by their prompt label, `"A"` for point 0 and so on.
/// Labels sort in point order, so the map round-trips the point list.
#[derive(Debug, Serialize, Deserialize)]
struct PointTaskRecord {
    points: BTreeMap<String, [usize; 2]>,
    answer: char,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    id: u64,
    image: String,
    depth: String,
    masks: Vec<MaskRecord>,
    query: String,
    answer: String,
    target_instance: usize,
    point_task: Option<PointTaskRecord>,
}

pub const DATASET_FORMAT: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Write scenes under `dir`, one record line per scene. `scenes` pairs
/// each sample with the generator index that serves as its id.
pub fn save_dataset(dir: &Path, scenes: &[(u64, SceneSample)]) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for (id, scene) in scenes {
        let h = scene.depth.height;
        let w = scene.depth.width;
        let image_rel = format!("img_{id}.ppm");
        pnm::write_ppm(&dir.join(&image_rel), &scene.image, h, w)?;
        let depth_rel = format!("depth_{id}.pgm");
        pnm::write_pgm16(&dir.join(&depth_rel), &pnm::depth_to_u16(&scene.depth.values), h, w)?;
        let mut masks = Vec::with_capacity(scene.instances.len());
        for (k, inst) in scene.instances.iter().enumerate() {
            let mask_rel = format!("mask_{id}_{k}.pgm");
            let gray: Vec<u8> = inst.mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
            pnm::write_pgm8(&dir.join(&mask_rel), &gray, h, w)?;
            masks.push(MaskRecord {
                file: mask_rel,
                shape: inst.shape.word().to_string(),
                color: inst.color.name.to_string(),
                z: inst.z,
            });
        }
        let record = SceneRecord {
            id: *id,
            image: image_rel,
            depth: depth_rel,
            masks,
            query: scene.query.clone(),
            answer: scene.answer.clone(),
            target_instance: scene.target_instance,
            point_task: scene.point_task.as_ref().map(|t| PointTaskRecord {
                points: t
                    .points
                    .iter()
                    .enumerate()
                    .map(|(i, &(r, c))| (point_label(i).to_string(), [r, c]))
                    .collect(),
                answer: t.answer,
            }),
        };
        manifest.push_str(&serde_json::to_string(&record).expect("record serializes"));
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST_NAME), manifest).map_err(io_err(dir))
}

fn parse_shape(word: &str) -> Option<Shape> {
    Shape::ALL.into_iter().find(|s| s.word() == word)
}

fn parse_point_task(
    record: PointTaskRecord,
    located: impl Fn(String) -> DatasetError,
) -> Result<RelativeDepthTask, DatasetError> {
    let mut points = Vec::with_capacity(record.points.len());
    for (i, (label, [r, c])) in record.points.iter().enumerate() {
        let expected = point_label(i).to_string();
        if *label != expected {
            return Err(located(format!(
                "point labels must run A, B, ... in order; found {label:?} where {expected:?} belongs"
            )));
        }
        points.push((*r, *c));
    }
    if !record.answer.is_ascii_uppercase() {
        return Err(located(format!("point answer {:?} is not a label", record.answer)));
    }
    Ok(RelativeDepthTask { points, answer: record.answer })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>, DatasetError> {
    let manifest_path: PathBuf = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut scenes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let located = |reason: String| DatasetError::Manifest {
            path: manifest_path.display().to_string(),
            line,
            reason,
        };
        if raw.trim().is_empty() {
            continue;
        }
        let record: SceneRecord =
            serde_json::from_str(raw).map_err(|e| located(e.to_string()))?;
        let (image, h, w) = pnm::read_ppm(&dir.join(&record.image))?;
        let (depth_raw, dh, dw) = pnm::read_pgm16(&dir.join(&record.depth))?;
        if (dh, dw) != (h, w) {
            return Err(located(format!("depth is {dh}x{dw}, image is {h}x{w}")));
        }
        let mut instances = Vec::with_capacity(record.masks.len());
        for mask in &record.masks {
            let (gray, mh, mw) = pnm::read_pgm8(&dir.join(&mask.file))?;
            if (mh, mw) != (h, w) {
                return Err(located(format!("mask {} is {mh}x{mw}, image is {h}x{w}", mask.file)));
            }
            let shape = parse_shape(&mask.shape)
                .ok_or_else(|| located(format!("unknown shape word {:?}", mask.shape)))?;
            let color = COLORS
                .into_iter()
                .find(|c| c.name == mask.color)
                .ok_or_else(|| located(format!("unknown color word {:?}", mask.color)))?;
            instances.push(Instance {
                mask: gray.iter().map(|&g| g > 127).collect(),
                shape,
                color,
                z: mask.z,
            });
        }
        if record.target_instance >= instances.len() {
            return Err(located(format!(
                "target instance {} but only {} masks",
                record.target_instance,
                instances.len()
            )));
        }
        let point_task = record.point_task.map(|t| parse_point_task(t, located)).transpose()?;
        scenes.push(SceneSample {
            image,
            depth: DepthMap { height: h, width: w, values: pnm::u16_to_depth(&depth_raw) },
            instances,
            query: record.query,
            answer: record.answer,
            target_instance: record.target_instance,
            point_task,
        });
    }
    if scenes.is_empty() {
        return Err(DatasetError::Manifest {
            path: manifest_path.display().to_string(),
            line: 0,
            reason: String::from("no scene records"),
        });
    }
    Ok(scenes)
}
