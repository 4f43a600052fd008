//! Dataset-level commands behind the `pose6d` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::augment::{
    composite, occlusion_histogram, select_occluders_with, OcclusionHistogram, PosedFrame,
};
use crate::config::{Mode, RunConfig, SceneKind};
use crate::dataset::{load_dataset, write_dataset, Dataset, DatasetEntry, ModelEntry, ObjectEntry};
use crate::error::{Error, Result};
use crate::estimate::PoseEstimate;
use crate::eval::{aggregate, Criterion, MetricReport, ObjectReport};
use crate::formats::{read_file, write_atomic};
use crate::geometry::{ObjectCoordinateImage, Pose, RgbImage};
use crate::scenes::{corrupt, default_model_library, random_scene, tabletop_scene, SceneFrame};
use crate::seeding::{derive_seed, derive_seed_str};
use crate::{rgb, rgbd};

pub const RECORD_NAME: &str = "run_record.txt";
pub const ESTIMATE_EXT: &str = "est";

/// Config text headed by comment lines naming the tool version, command and
/// inputs. It parses as a config file, so passing it back via `--config`
/// repeats the run.
pub fn reproducibility_record(command: &str, inputs: &[(&str, &Path)], cfg: &RunConfig) -> String {
    let mut s = format!(
        "# pose6d {}\n# command {command}\n",
        env!("CARGO_PKG_VERSION")
    );
    for (name, p) in inputs {
        let _ = writeln!(s, "# {name} {}", p.display());
    }
    s.push_str(&cfg.to_text());
    s
}

/// Seed of object `index` in frame `frame_id`.
pub fn object_seed(run_seed: u64, frame_id: &str, index: usize) -> u64 {
    derive_seed(derive_seed_str(run_seed, frame_id), index as u64)
}

pub struct FrameEstimates {
    pub frame_id: String,
    /// One entry per object in frame order.
    pub objects: Vec<(u32, Result<PoseEstimate>)>,
}

fn estimate_object(
    frame: &DatasetEntry,
    index: usize,
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<PoseEstimate> {
    let obj = &frame.objects[index];
    let model = dataset
        .model(obj.class_id)
        .ok_or_else(|| Error::InvalidInput(format!("no model for class {}", obj.class_id)))?;
    let oc = obj
        .object_coords
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("object has no object coordinates".into()))?;
    let seed = object_seed(cfg.seed, &frame.id, index);
    match cfg.mode {
        Mode::Rgbd => {
            let depth = frame
                .depth
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("frame has no depth".into()))?;
            let obs = rgbd::RgbdObservation {
                object_coords: oc,
                depth,
                mask: &obj.mask,
            };
            rgbd::estimate(&obs, model, &frame.intrinsics, &cfg.rgbd, seed)
        }
        Mode::Rgb => rgb::estimate(oc, &obj.mask, model, &frame.intrinsics, &cfg.rgb, seed),
    }
}

/// Estimates every object of every frame. Per-object failures are kept in
/// the result; a frame lacking depth in RGB-D mode fails the whole run.
pub fn estimate_dataset(dataset: &Dataset, cfg: &RunConfig) -> Result<Vec<FrameEstimates>> {
    cfg.validate()?;
    if cfg.mode == Mode::Rgbd {
        if let Some(f) = dataset.frames.iter().find(|f| f.depth.is_none()) {
            return Err(Error::InvalidInput(format!(
                "frame {} has no depth for rgbd mode",
                f.id
            )));
        }
    }
    Ok(dataset
        .frames
        .par_iter()
        .map(|frame| FrameEstimates {
            frame_id: frame.id.clone(),
            objects: (0..frame.objects.len())
                .into_par_iter()
                .map(|k| {
                    (
                        frame.objects[k].class_id,
                        estimate_object(frame, k, dataset, cfg),
                    )
                })
                .collect(),
        })
        .collect())
}

/// Text form of a frame's estimates.
///
/// ```text
/// object  <k>  <class>  ok  <pose>  <score>  <inliers>  <icp error|->  <hypotheses>
/// stage   <k>  <stage>  <value>  <pose>
/// object  <k>  <class>  failed  <error kind>  <message>
/// ```
pub fn format_estimates(fe: &FrameEstimates) -> String {
    let mut s = format!("# frame {}\n", fe.frame_id);
    for (k, (class, res)) in fe.objects.iter().enumerate() {
        match res {
            Ok(e) => {
                let icp = e.icp_error.map_or("-".to_string(), |x| x.to_string());
                let _ = writeln!(
                    s,
                    "object\t{k}\t{class}\tok\t{}\t{}\t{}\t{icp}\t{}",
                    e.pose, e.score, e.inlier_count, e.hypotheses
                );
                for st in &e.stage_trace {
                    let _ = writeln!(s, "stage\t{k}\t{}\t{}\t{}", st.stage, st.value, st.pose);
                }
            }
            Err(err) => {
                let msg = err.to_string().replace(['\t', '\n'], " ");
                let _ = writeln!(s, "object\t{k}\t{class}\tfailed\t{}\t{msg}", err.kind());
            }
        }
    }
    s
}

/// Estimated poses by object index; `None` for failed objects.
pub fn parse_estimates(text: &str, ctx: &str) -> Result<Vec<Option<Pose>>> {
    let mut out: Vec<Option<Pose>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f[0] != "object" {
            continue;
        }
        let bad = || Error::parse(ctx, format!("line {}: malformed object record", i + 1));
        if f.len() < 4 {
            return Err(bad());
        }
        let k: usize = f[1].parse().map_err(|_| bad())?;
        if out.len() <= k {
            out.resize(k + 1, None);
        }
        if f[3] == "ok" {
            let pose = Pose::parse_line(f.get(4).ok_or_else(bad)?)?;
            out[k] = Some(pose);
        }
    }
    Ok(out)
}

pub fn estimate_path(dir: &Path, frame_id: &str) -> PathBuf {
    dir.join(format!("{frame_id}.{ESTIMATE_EXT}"))
}

pub struct EstimateSummary {
    pub frames: usize,
    pub objects: usize,
    pub failed: usize,
}

pub fn run_estimate(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<EstimateSummary> {
    let dataset = load_dataset(manifest)?;
    let results = estimate_dataset(&dataset, cfg)?;
    results
        .par_iter()
        .map(|fe| {
            write_atomic(
                &estimate_path(out, &fe.frame_id),
                format_estimates(fe).as_bytes(),
            )
        })
        .collect::<Result<()>>()?;
    let record = reproducibility_record("estimate", &[("dataset", manifest)], cfg);
    write_atomic(&out.join(RECORD_NAME), record.as_bytes())?;
    let objects = results.iter().map(|f| f.objects.len()).sum();
    let failed = results
        .iter()
        .flat_map(|f| &f.objects)
        .filter(|(_, r)| r.is_err())
        .count();
    Ok(EstimateSummary {
        frames: results.len(),
        objects,
        failed,
    })
}

pub fn criterion_for(mode: Mode) -> Criterion {
    match mode {
        Mode::Rgbd => Criterion::Add,
        Mode::Rgb => Criterion::Proj2d(5),
    }
}

/// Evaluates every ground-truth instance. Objects without an estimate, or
/// frames without an estimate file, count as rejections.
pub fn evaluate_dataset(
    dataset: &Dataset,
    estimates: &Path,
    cfg: &RunConfig,
) -> Result<MetricReport> {
    let per_frame = dataset
        .frames
        .par_iter()
        .map(|frame| {
            let path = estimate_path(estimates, &frame.id);
            let est = if path.is_file() {
                let bytes = read_file(&path)?;
                let text = String::from_utf8_lossy(&bytes);
                parse_estimates(&text, &path.display().to_string())?
            } else {
                Vec::new()
            };
            let mut reports = Vec::new();
            for (k, obj) in frame.objects.iter().enumerate() {
                let Some(gt) = obj.gt_pose else { continue };
                let entry = &dataset.models[&obj.class_id];
                let e = est.get(k).copied().flatten();
                reports.push(ObjectReport::evaluate(
                    &frame.id,
                    e.as_ref(),
                    &gt,
                    &entry.model,
                    &frame.intrinsics,
                    &obj.mask,
                    entry.symmetric,
                )?);
            }
            Ok(reports)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(
        per_frame.into_iter().flatten().collect(),
        cfg.occlusion_bins,
        criterion_for(cfg.mode),
    )
}

pub fn run_evaluate(
    manifest: &Path,
    estimates: &Path,
    cfg: &RunConfig,
    out: &Path,
) -> Result<MetricReport> {
    let dataset = load_dataset(manifest)?;
    let report = evaluate_dataset(&dataset, estimates, cfg)?;
    write_atomic(&out.join("report.txt"), report.to_lines().as_bytes())?;
    write_atomic(&out.join("summary.tsv"), report.summary_table().as_bytes())?;
    write_atomic(&out.join("curve.tsv"), report.curve().as_bytes())?;
    let record = reproducibility_record(
        "evaluate",
        &[("dataset", manifest), ("estimates", estimates)],
        cfg,
    );
    write_atomic(&out.join(RECORD_NAME), record.as_bytes())?;
    Ok(report)
}

/// Flat class color darkened with depth; background gray from depth.
pub fn shade_rgb(frame: &SceneFrame) -> RgbImage {
    const PALETTE: [[u8; 3]; 6] = [
        [200, 60, 60],
        [60, 170, 70],
        [60, 90, 200],
        [210, 180, 50],
        [170, 70, 190],
        [60, 180, 190],
    ];
    let intr = &frame.intrinsics;
    let mut img = RgbImage::new(intr.width, intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let z = frame.depth.get(u, v);
            let shade = if z > 0.0 {
                (1.3 - z / 2000.0).clamp(0.3, 1.0)
            } else {
                0.0
            };
            let base = frame
                .objects
                .iter()
                .find(|o| o.mask.get(u, v))
                .map_or([128, 128, 128], |o| {
                    PALETTE[(o.class_id as usize).wrapping_sub(1) % PALETTE.len()]
                });
            img.set(u, v, base.map(|c| (c as f64 * shade).round() as u8));
        }
    }
    img
}

fn scene_to_entry(id: String, frame: &SceneFrame, rgb: RgbImage) -> DatasetEntry {
    DatasetEntry {
        id,
        intrinsics: frame.intrinsics,
        depth: Some(frame.depth.clone()),
        rgb: Some(rgb),
        plane: frame.ground,
        objects: frame
            .objects
            .iter()
            .map(|o| ObjectEntry {
                class_id: o.class_id,
                mask: o.mask.clone(),
                object_coords: Some(o.object_coords.clone()),
                gt_pose: Some(o.gt_pose),
            })
            .collect(),
    }
}

/// Synthetic oracle dataset built from the default model library.
pub fn synth_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let library = default_model_library();
    let intr = crate::scenes::default_intrinsics();
    let corrupting = cfg.synth.corruption != Default::default();
    let frames = (0..cfg.synth.scenes)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let (_, clean) = match cfg.synth.kind {
                SceneKind::Random => random_scene(&library, &intr, &cfg.synth.random, seed)?,
                SceneKind::Tabletop => {
                    tabletop_scene(&library, cfg.synth.tabletop_objects, &intr, seed)?
                }
            };
            let rgb = shade_rgb(&clean);
            let frame = if corrupting {
                corrupt(&clean, &cfg.synth.corruption, derive_seed(seed, 0xc0))?
            } else {
                clean
            };
            Ok(scene_to_entry(format!("scene_{i:04}"), &frame, rgb))
        })
        .collect::<Result<Vec<_>>>()?;
    let models = library
        .into_iter()
        .map(|m| {
            (
                m.class_id(),
                ModelEntry {
                    model: Arc::new(m),
                    symmetric: false,
                },
            )
        })
        .collect();
    Ok(Dataset { models, frames })
}

pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let dataset = synth_dataset(cfg)?;
    write_dataset(&dataset, out)?;
    write_atomic(
        &out.join(RECORD_NAME),
        reproducibility_record("synth", &[], cfg).as_bytes(),
    )?;
    Ok(dataset)
}

struct AugmentSource<'a> {
    frame: &'a DatasetEntry,
    posed: PosedFrame,
}

fn restrict(
    oc: &Option<ObjectCoordinateImage>,
    mask: &crate::geometry::InstanceMask,
) -> Result<Option<ObjectCoordinateImage>> {
    oc.as_ref()
        .map(|oc| {
            let mut oc = oc.clone();
            oc.restrict_to(mask)?;
            Ok(oc)
        })
        .transpose()
}

/// Occlusion augmentation over the single-object frames of `dataset` that
/// carry depth, a ground plane and a ground-truth pose. Each such frame is
/// a target; the nearest plausible occluders from the other frames are
/// composited in front of it. Targets without any occluder, or left fully
/// hidden, produce no output frame.
pub fn augment_dataset(dataset: &Dataset, cfg: &RunConfig) -> Result<Dataset> {
    let sources = dataset
        .frames
        .iter()
        .filter(|f| {
            f.objects.len() == 1
                && f.depth.is_some()
                && f.plane.is_some()
                && f.objects[0].gt_pose.is_some()
        })
        .map(|f| {
            let obj = &f.objects[0];
            let model = dataset.model(obj.class_id).ok_or_else(|| {
                Error::InvalidInput(format!("no model for class {}", obj.class_id))
            })?;
            let posed = PosedFrame::new(
                f.rgb.clone(),
                f.depth.clone().expect("filtered"),
                obj.mask.clone(),
                f.intrinsics,
                Arc::clone(model),
                obj.gt_pose.expect("filtered"),
                f.plane.expect("filtered"),
            )?;
            Ok(AugmentSource { frame: f, posed })
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<PosedFrame> = sources.iter().map(|s| s.posed.clone()).collect();

    let frames = (0..sources.len())
        .into_par_iter()
        .map(|t| -> Result<Option<DatasetEntry>> {
            let target = &sources[t];
            let picked: Vec<usize> = select_occluders_with(
                &target.posed,
                &all,
                cfg.augment.max_normal_angle_deg,
                &cfg.augment.cone,
            )
            .into_iter()
            .map(|p| {
                all.iter()
                    .position(|q| std::ptr::eq(q, p))
                    .expect("selected from library")
            })
            .filter(|&i| i != t)
            .take(cfg.augment.max_occluders)
            .collect();
            if picked.is_empty() {
                return Ok(None);
            }
            let layers: Vec<&PosedFrame> = picked.iter().map(|&i| &all[i]).collect();
            let comp = composite(&target.posed, &layers)?;
            if comp.frame.mask.is_empty() {
                return Ok(None);
            }
            let tobj = &target.frame.objects[0];
            let mut objects = vec![ObjectEntry {
                class_id: tobj.class_id,
                mask: comp.frame.mask.clone(),
                object_coords: restrict(&tobj.object_coords, &comp.frame.mask)?,
                gt_pose: tobj.gt_pose,
            }];
            for (mask, &s) in comp.occluder_masks.iter().zip(&picked) {
                let src = &sources[s].frame.objects[0];
                objects.push(ObjectEntry {
                    class_id: src.class_id,
                    mask: mask.clone(),
                    object_coords: restrict(&src.object_coords, mask)?,
                    gt_pose: src.gt_pose,
                });
            }
            Ok(Some(DatasetEntry {
                id: format!("{}_aug", target.frame.id),
                intrinsics: target.frame.intrinsics,
                depth: Some(comp.frame.depth),
                rgb: comp.frame.rgb,
                plane: target.frame.plane,
                objects,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        models: dataset.models.clone(),
        frames: frames.into_iter().flatten().collect(),
    })
}

pub fn run_augment(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let dataset = load_dataset(manifest)?;
    let augmented = augment_dataset(&dataset, cfg)?;
    write_dataset(&augmented, out)?;
    let record = reproducibility_record("augment", &[("dataset", manifest)], cfg);
    write_atomic(&out.join(RECORD_NAME), record.as_bytes())?;
    Ok(augmented)
}

/// Per-class occlusion histograms over all ground-truth instances.
pub fn occlusion_histograms(dataset: &Dataset) -> Result<Vec<(u32, usize, OcclusionHistogram)>> {
    let mut out = Vec::new();
    for (class_id, entry) in &dataset.models {
        let parts = dataset
            .frames
            .par_iter()
            .flat_map_iter(|f| f.objects.iter().map(move |o| (f, o)))
            .filter(|(_, o)| o.class_id == *class_id && o.gt_pose.is_some())
            .map(|(f, o)| {
                occlusion_histogram(
                    &entry.model,
                    &o.gt_pose.expect("filtered"),
                    &o.mask,
                    &f.intrinsics,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            continue;
        }
        let mut hist = OcclusionHistogram::new(&entry.model);
        for p in &parts {
            hist.merge(p)?;
        }
        out.push((*class_id, parts.len(), hist));
    }
    Ok(out)
}

pub fn run_analyze_occlusion(
    manifest: &Path,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Vec<(u32, usize, OcclusionHistogram)>> {
    let dataset = load_dataset(manifest)?;
    let hists = occlusion_histograms(&dataset)?;
    let mut summary = String::from("class\tinstances\toccluded_pixels\n");
    for (class_id, n, h) in &hists {
        write_atomic(
            &out.join(format!("occlusion_class_{class_id}.txt")),
            h.report().as_bytes(),
        )?;
        let _ = writeln!(summary, "{class_id}\t{n}\t{}", h.total());
    }
    write_atomic(&out.join("occlusion_summary.tsv"), summary.as_bytes())?;
    let record = reproducibility_record("analyze-occlusion", &[("dataset", manifest)], cfg);
    write_atomic(&out.join(RECORD_NAME), record.as_bytes())?;
    Ok(hists)
}
