//! Datasets on disk: a tab-separated manifest plus per-frame channel files.
//!
//! Manifest records, one per line, `#` starts a comment:
//!
//! ```text
//! model   <class>  <mesh path>  [symmetric]
//! frame   <id>  <fx fy cx cy width height>  <depth|->  <rgb|->  <nx ny nz offset|->  <object>...
//! ```
//!
//! Each `<object>` is `class|mask path|oc path or -|12 pose numbers or -`.
//! Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::augment::GroundPlane;
use crate::error::{Error, Result};
use crate::formats::{self, read_file, write_atomic};
use crate::geometry::{
    CameraIntrinsics, DepthImage, InstanceMask, ObjectCoordinateImage, ObjectModel, Pose, RgbImage,
    Vec3,
};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug)]
pub struct ModelEntry {
    pub model: Arc<ObjectModel>,
    /// Symmetric classes are flagged in evaluation reports.
    pub symmetric: bool,
}

#[derive(Clone, Debug)]
pub struct ObjectEntry {
    pub class_id: u32,
    pub mask: InstanceMask,
    pub object_coords: Option<ObjectCoordinateImage>,
    pub gt_pose: Option<Pose>,
}

#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub depth: Option<DepthImage>,
    pub rgb: Option<RgbImage>,
    pub plane: Option<GroundPlane>,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    /// Keyed by class id.
    pub models: BTreeMap<u32, ModelEntry>,
    /// Sorted by frame id.
    pub frames: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn model(&self, class_id: u32) -> Option<&Arc<ObjectModel>> {
        self.models.get(&class_id).map(|m| &m.model)
    }
}

/// Frame ids double as directory names.
pub fn valid_frame_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

struct ObjectRecord {
    class_id: u32,
    mask: PathBuf,
    oc: Option<PathBuf>,
    pose: Option<Pose>,
}

struct FrameRecord {
    line: usize,
    id: String,
    intrinsics: CameraIntrinsics,
    depth: Option<PathBuf>,
    rgb: Option<PathBuf>,
    plane: Option<GroundPlane>,
    objects: Vec<ObjectRecord>,
}

fn numbers<const N: usize>(s: &str, line: usize, what: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|x| x.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| manifest_err(line, format!("bad number in {what}")))?;
    v.try_into()
        .map_err(|_| manifest_err(line, format!("{what} needs {N} numbers")))
}

fn manifest_err(line: usize, message: impl Into<String>) -> Error {
    Error::ManifestParse {
        line,
        message: message.into(),
    }
}

fn optional_path(s: &str, root: &Path) -> Option<PathBuf> {
    (s != "-").then(|| root.join(s))
}

fn parse_object(s: &str, line: usize, root: &Path) -> Result<ObjectRecord> {
    let parts: Vec<&str> = s.split('|').collect();
    let [class, mask, oc, pose] = parts.as_slice() else {
        return Err(manifest_err(
            line,
            format!("object field {s:?} needs 4 '|' parts"),
        ));
    };
    let class_id = class
        .parse()
        .map_err(|_| manifest_err(line, format!("bad class id {class:?}")))?;
    let pose = if *pose == "-" {
        None
    } else {
        Some(Pose::parse_line(pose).map_err(|e| manifest_err(line, e.to_string()))?)
    };
    Ok(ObjectRecord {
        class_id,
        mask: root.join(mask),
        oc: optional_path(oc, root),
        pose,
    })
}

fn parse_frame(f: &[&str], line: usize, root: &Path) -> Result<FrameRecord> {
    if f.len() < 6 {
        return Err(manifest_err(
            line,
            "frame record needs id, intrinsics, depth, rgb and plane",
        ));
    }
    let id = f[1].to_string();
    if !valid_frame_id(&id) {
        return Err(manifest_err(line, format!("invalid frame id {id:?}")));
    }
    let k = numbers::<6>(f[2], line, "intrinsics")?;
    if k[4].fract() != 0.0 || k[5].fract() != 0.0 || k[4] < 1.0 || k[5] < 1.0 {
        return Err(manifest_err(line, "image size must be a positive integer"));
    }
    let intrinsics = CameraIntrinsics::new(k[0], k[1], k[2], k[3], k[4] as usize, k[5] as usize)
        .map_err(|e| manifest_err(line, e.to_string()))?;
    let plane = if f[5] == "-" {
        None
    } else {
        let p = numbers::<4>(f[5], line, "plane")?;
        Some(
            GroundPlane::new(Vec3::new(p[0], p[1], p[2]), p[3])
                .map_err(|e| manifest_err(line, e.to_string()))?,
        )
    };
    let objects = f[6..]
        .iter()
        .map(|s| parse_object(s, line, root))
        .collect::<Result<_>>()?;
    Ok(FrameRecord {
        line,
        id,
        intrinsics,
        depth: optional_path(f[3], root),
        rgb: optional_path(f[4], root),
        plane,
        objects,
    })
}

fn read_existing(frame: &str, path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile {
            frame: frame.to_string(),
            path: path.to_path_buf(),
        });
    }
    read_file(path)
}

fn check_dims(frame: &str, intr: &CameraIntrinsics, w: usize, h: usize, what: &str) -> Result<()> {
    if (w, h) != (intr.width, intr.height) {
        return Err(Error::FrameDimensionMismatch {
            frame: frame.to_string(),
            message: format!(
                "{what} is {w}x{h}, camera is {}x{}",
                intr.width, intr.height
            ),
        });
    }
    Ok(())
}

fn load_frame(rec: &FrameRecord, models: &BTreeMap<u32, ModelEntry>) -> Result<DatasetEntry> {
    let id = rec.id.as_str();
    let intr = &rec.intrinsics;
    let ctx = |p: &Path| p.display().to_string();
    let depth = match &rec.depth {
        Some(p) => {
            let d = formats::decode_depth(&read_existing(id, p)?, &ctx(p))?;
            check_dims(id, intr, d.width(), d.height(), "depth")?;
            Some(d)
        }
        None => None,
    };
    let rgb = match &rec.rgb {
        Some(p) => {
            let img = formats::decode_rgb(&read_existing(id, p)?, &ctx(p))?;
            check_dims(id, intr, img.width(), img.height(), "rgb")?;
            Some(img)
        }
        None => None,
    };
    let mut objects = Vec::with_capacity(rec.objects.len());
    for o in &rec.objects {
        if !models.contains_key(&o.class_id) {
            return Err(manifest_err(
                rec.line,
                format!("frame {id}: no model for class {}", o.class_id),
            ));
        }
        let mask = formats::decode_mask(&read_existing(id, &o.mask)?, o.class_id, &ctx(&o.mask))?;
        check_dims(id, intr, mask.width(), mask.height(), "mask")?;
        let object_coords = match &o.oc {
            Some(p) => {
                let oc = formats::decode_object_coords(&read_existing(id, p)?, &ctx(p))?;
                check_dims(id, intr, oc.width(), oc.height(), "object coordinates")?;
                Some(oc)
            }
            None => None,
        };
        objects.push(ObjectEntry {
            class_id: o.class_id,
            mask,
            object_coords,
            gt_pose: o.pose,
        });
    }
    Ok(DatasetEntry {
        id: rec.id.clone(),
        intrinsics: rec.intrinsics,
        depth,
        rgb,
        plane: rec.plane,
        objects,
    })
}

/// Parses the manifest and loads every referenced file. Frames come back
/// sorted by id.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut models = BTreeMap::new();
    let mut frames = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim_end();
        if content.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = content.split('\t').collect();
        match f[0] {
            "model" => {
                if !(3..=4).contains(&f.len()) || (f.len() == 4 && f[3] != "symmetric") {
                    return Err(manifest_err(
                        line,
                        "model record is: model <class> <path> [symmetric]",
                    ));
                }
                let class_id: u32 = f[1]
                    .parse()
                    .map_err(|_| manifest_err(line, format!("bad class id {:?}", f[1])))?;
                let path = root.join(f[2]);
                if !path.is_file() {
                    return Err(Error::MissingFile {
                        frame: format!("model {class_id}"),
                        path,
                    });
                }
                let model = formats::read_mesh(&path, class_id)?;
                if models
                    .insert(
                        class_id,
                        ModelEntry {
                            model: Arc::new(model),
                            symmetric: f.len() == 4,
                        },
                    )
                    .is_some()
                {
                    return Err(manifest_err(
                        line,
                        format!("duplicate model for class {class_id}"),
                    ));
                }
            }
            "frame" => {
                let rec = parse_frame(&f, line, root)?;
                if !seen.insert(rec.id.clone()) {
                    return Err(manifest_err(line, format!("duplicate frame id {}", rec.id)));
                }
                frames.push(rec);
            }
            other => return Err(manifest_err(line, format!("unknown record type {other:?}"))),
        }
    }
    frames.sort_by(|a, b| a.id.cmp(&b.id));
    let frames = frames
        .par_iter()
        .map(|r| load_frame(r, &models))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { models, frames })
}

fn fmt_numbers(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Relative paths of a frame's channel files inside a written dataset.
pub fn channel_paths(id: &str, object_index: usize) -> (String, String) {
    (
        format!("{id}/mask_{object_index}.pgm"),
        format!("{id}/oc_{object_index}.oc"),
    )
}

/// Writes the dataset under `dir` with canonical file names and returns the
/// manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let mut manifest = String::from("# pose6d dataset\n");
    for (class_id, entry) in &dataset.models {
        let rel = format!("models/obj_{class_id}.ply");
        write_atomic(&dir.join(&rel), &formats::encode_ply(&entry.model))?;
        manifest.push_str(&format!("model\t{class_id}\t{rel}"));
        if entry.symmetric {
            manifest.push_str("\tsymmetric");
        }
        manifest.push('\n');
    }
    let mut ids = HashSet::new();
    for f in &dataset.frames {
        if !valid_frame_id(&f.id) || !ids.insert(f.id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "invalid or duplicate frame id {:?}",
                f.id
            )));
        }
    }
    let lines = dataset
        .frames
        .par_iter()
        .map(|f| write_frame(f, dir))
        .collect::<Result<Vec<_>>>()?;
    for l in lines {
        manifest.push_str(&l);
    }
    let path = dir.join(MANIFEST_NAME);
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

fn write_frame(f: &DatasetEntry, dir: &Path) -> Result<String> {
    let id = &f.id;
    let k = &f.intrinsics;
    let mut line = format!(
        "frame\t{id}\t{}",
        fmt_numbers(&[k.fx, k.fy, k.cx, k.cy, k.width as f64, k.height as f64])
    );
    match &f.depth {
        Some(d) => {
            let rel = format!("{id}/depth.pgm");
            write_atomic(&dir.join(&rel), &formats::encode_depth(d))?;
            line.push_str(&format!("\t{rel}"));
        }
        None => line.push_str("\t-"),
    }
    match &f.rgb {
        Some(img) => {
            let rel = format!("{id}/rgb.ppm");
            write_atomic(&dir.join(&rel), &formats::encode_rgb(img))?;
            line.push_str(&format!("\t{rel}"));
        }
        None => line.push_str("\t-"),
    }
    match &f.plane {
        Some(p) => line.push_str(&format!(
            "\t{}",
            fmt_numbers(&[p.normal().x, p.normal().y, p.normal().z, p.offset()])
        )),
        None => line.push_str("\t-"),
    }
    for (i, o) in f.objects.iter().enumerate() {
        let (mask_rel, oc_rel) = channel_paths(id, i);
        write_atomic(&dir.join(&mask_rel), &formats::encode_mask(&o.mask))?;
        let oc_field = match &o.object_coords {
            Some(oc) => {
                write_atomic(&dir.join(&oc_rel), &formats::encode_object_coords(oc))?;
                oc_rel
            }
            None => "-".to_string(),
        };
        let pose = o.gt_pose.map_or("-".to_string(), |p| p.to_string());
        line.push_str(&format!("\t{}|{mask_rel}|{oc_field}|{pose}", o.class_id));
    }
    line.push('\n');
    Ok(line)
}
