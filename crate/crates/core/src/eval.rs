//! Pose and prediction metrics, and accuracy-versus-occlusion summaries.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, InstanceMask, ObjectCoordinateImage, ObjectModel, Pose};
use crate::render::render;

/// ADD acceptance threshold as a fraction of the object diameter.
pub const ADD_FRACTION: f64 = 0.1;
pub const PROJ2D_THRESHOLDS: [f64; 2] = [5.0, 10.0];
/// Object-coordinate inlier radius in mm.
pub const OC_INLIER_THRESHOLD: f64 = 20.0;
pub const DEFAULT_OCCLUSION_BINS: usize = 10;

/// Mean distance between model vertices placed by `est` and by `gt`.
pub fn add_error(est: &Pose, gt: &Pose, model: &ObjectModel) -> f64 {
    let v = model.vertices();
    v.iter()
        .map(|p| (est.apply(p) - gt.apply(p)).norm())
        .sum::<f64>()
        / v.len() as f64
}

pub fn add_accepted(error: f64, diameter: f64) -> bool {
    error < ADD_FRACTION * diameter
}

/// Mean pixel distance between model vertices projected under `est` and
/// under `gt`. Infinite if any vertex lies at or behind the camera plane
/// under `est`.
pub fn proj2d_error(
    est: &Pose,
    gt: &Pose,
    model: &ObjectModel,
    intr: &CameraIntrinsics,
) -> Result<f64> {
    let v = model.vertices();
    let mut sum = 0.0;
    let mut behind = false;
    for p in v {
        let g = gt.apply(p);
        if g.z <= 0.0 {
            return Err(Error::NonPositiveDepth(g.z));
        }
        let e = est.apply(p);
        if e.z <= 0.0 {
            behind = true;
            continue;
        }
        sum += (intr.project_unchecked(&e) - intr.project_unchecked(&g)).norm();
    }
    Ok(if behind {
        f64::INFINITY
    } else {
        sum / v.len() as f64
    })
}

/// Fraction of masked pixels with a ground-truth coordinate whose
/// prediction lies within 20 mm of it. Missing predictions count as misses.
pub fn oc_inlier_rate(
    pred: &ObjectCoordinateImage,
    gt: &ObjectCoordinateImage,
    mask: &InstanceMask,
) -> Result<f64> {
    if pred.width() != gt.width()
        || pred.height() != gt.height()
        || gt.width() != mask.width()
        || gt.height() != mask.height()
    {
        return Err(Error::DimensionMismatch(
            "prediction, ground truth and mask".into(),
        ));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for px in mask.pixels() {
        let (u, v) = (px.u as usize, px.v as usize);
        let Some(g) = gt.get(u, v) else { continue };
        total += 1;
        if pred
            .get(u, v)
            .is_some_and(|p| (p - g).norm() < OC_INLIER_THRESHOLD)
        {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(hits as f64 / total as f64)
}

/// `1 - |visible ∩ rendered| / |rendered|` with `rendered` the unoccluded
/// silhouette of the model under `gt_pose`.
pub fn occlusion_level(
    visible: &InstanceMask,
    model: &ObjectModel,
    gt_pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<f64> {
    intr.check_dims(visible.width(), visible.height(), "visible mask")?;
    let full = render(model, gt_pose, intr, false)?.mask;
    let rendered = full.count();
    let seen = full.intersect(visible)?.count();
    Ok(1.0 - seen as f64 / rendered as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    /// ADD below a tenth of the diameter.
    Add,
    /// 2D projection error below the given pixel threshold.
    Proj2d(u32),
}

impl Criterion {
    pub fn name(&self) -> String {
        match self {
            Criterion::Add => "add-0.1d".into(),
            Criterion::Proj2d(px) => format!("proj2d-{px}px"),
        }
    }
}

/// Evaluation of one ground-truth instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectReport {
    pub frame_id: String,
    pub class_id: u32,
    pub diameter: f64,
    /// False when the estimator produced no pose; errors are then infinite.
    pub estimated: bool,
    pub add_error: f64,
    pub proj2d_error: f64,
    pub occlusion: f64,
    /// ADD is not symmetry-aware; reports for symmetric classes carry a flag.
    pub symmetric: bool,
}

impl ObjectReport {
    pub fn evaluate(
        frame_id: &str,
        est: Option<&Pose>,
        gt: &Pose,
        model: &ObjectModel,
        intr: &CameraIntrinsics,
        visible: &InstanceMask,
        symmetric: bool,
    ) -> Result<Self> {
        let occlusion = occlusion_level(visible, model, gt, intr)?;
        let (add, proj) = match est {
            Some(e) => (add_error(e, gt, model), proj2d_error(e, gt, model, intr)?),
            None => (f64::INFINITY, f64::INFINITY),
        };
        Ok(Self {
            frame_id: frame_id.to_string(),
            class_id: model.class_id(),
            diameter: model.diameter(),
            estimated: est.is_some(),
            add_error: add,
            proj2d_error: proj,
            occlusion,
            symmetric,
        })
    }

    pub fn accepted(&self, criterion: Criterion) -> bool {
        match criterion {
            Criterion::Add => add_accepted(self.add_error, self.diameter),
            Criterion::Proj2d(px) => self.proj2d_error < px as f64,
        }
    }

    /// One `key=value` line.
    pub fn to_line(&self) -> String {
        format!(
            "frame={}\tclass={}\testimated={}\tadd_mm={}\tadd_ok={}\tproj2d_px={}\tproj2d_5px_ok={}\tproj2d_10px_ok={}\tocclusion={:.4}\tsymmetric={}",
            self.frame_id,
            self.class_id,
            self.estimated,
            fmt_err(self.add_error),
            self.accepted(Criterion::Add),
            fmt_err(self.proj2d_error),
            self.accepted(Criterion::Proj2d(5)),
            self.accepted(Criterion::Proj2d(10)),
            self.occlusion,
            self.symmetric,
        )
    }
}

fn fmt_err(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "inf".into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionBin {
    pub lo: f64,
    pub hi: f64,
    pub total: usize,
    pub accepted: usize,
}

impl OcclusionBin {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.accepted as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub criterion: Criterion,
    pub objects: Vec<ObjectReport>,
    pub bins: Vec<OcclusionBin>,
    pub add_rate: f64,
    /// Acceptance rate at each of [`PROJ2D_THRESHOLDS`].
    pub proj2d_rates: [f64; 2],
}

impl MetricReport {
    /// Rate under the report's own criterion.
    pub fn rate(&self) -> f64 {
        match self.criterion {
            Criterion::Add => self.add_rate,
            Criterion::Proj2d(px) => self.rate_for(Criterion::Proj2d(px)),
        }
    }

    pub fn rate_for(&self, criterion: Criterion) -> f64 {
        let n = self.objects.len();
        if n == 0 {
            return 0.0;
        }
        self.objects
            .iter()
            .filter(|o| o.accepted(criterion))
            .count() as f64
            / n as f64
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for o in &self.objects {
            s.push_str(&o.to_line());
            s.push('\n');
        }
        s
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "objects\t{}", self.objects.len());
        let _ = writeln!(s, "add-0.1d\t{:.4}", self.add_rate);
        for (t, r) in PROJ2D_THRESHOLDS.iter().zip(self.proj2d_rates) {
            let _ = writeln!(s, "proj2d-{t}px\t{r:.4}");
        }
        let _ = writeln!(s, "criterion\t{}", self.criterion.name());
        let _ = writeln!(s, "bin_lo\tbin_hi\ttotal\taccepted\trate");
        for b in &self.bins {
            let rate = b.rate().map_or("-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(
                s,
                "{:.2}\t{:.2}\t{}\t{}\t{}",
                b.lo, b.hi, b.total, b.accepted, rate
            );
        }
        s
    }

    /// Two columns: bin midpoint, acceptance rate. Empty bins are omitted.
    pub fn curve(&self) -> String {
        let mut s = String::new();
        for b in &self.bins {
            if let Some(r) = b.rate() {
                let _ = writeln!(s, "{:.3}\t{:.4}", b.midpoint(), r);
            }
        }
        s
    }
}

/// Index of the bin containing `level` among `bins` equal bins over [0, 1].
pub fn bin_index(level: f64, bins: usize) -> usize {
    ((level.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

pub fn aggregate(
    reports: Vec<ObjectReport>,
    occlusion_bins: usize,
    criterion: Criterion,
) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to aggregate".into()));
    }
    if occlusion_bins == 0 {
        return Err(Error::InvalidInput(
            "need at least one occlusion bin".into(),
        ));
    }
    let mut bins: Vec<OcclusionBin> = (0..occlusion_bins)
        .map(|i| OcclusionBin {
            lo: i as f64 / occlusion_bins as f64,
            hi: (i + 1) as f64 / occlusion_bins as f64,
            total: 0,
            accepted: 0,
        })
        .collect();
    for r in &reports {
        let b = &mut bins[bin_index(r.occlusion, occlusion_bins)];
        b.total += 1;
        b.accepted += r.accepted(criterion) as usize;
    }
    let n = reports.len() as f64;
    let rate = |c: Criterion| reports.iter().filter(|o| o.accepted(c)).count() as f64 / n;
    Ok(MetricReport {
        criterion,
        add_rate: rate(Criterion::Add),
        proj2d_rates: [rate(Criterion::Proj2d(5)), rate(Criterion::Proj2d(10))],
        objects: reports,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::meshes;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 160.0, 120.0, 320, 240).unwrap()
    }

    #[test]
    fn add_examples() {
        let model = meshes::blob(1, 50.0, 3, 10, 16);
        let gt = Pose::from_axis_angle(&Vec3::new(0.0, 1.0, 0.0), 0.4, Vec3::new(0.0, 0.0, 600.0));
        assert_eq!(add_error(&gt, &gt, &model), 0.0);
        let moved = Pose::from_translation(Vec3::new(7.5, 0.0, 0.0)).compose(&gt);
        assert!((add_error(&moved, &gt, &model) - 7.5).abs() < 1e-9);

        let sphere = meshes::uv_sphere(2, 1.0, 12, 24);
        let rot =
            Pose::from_axis_angle(&Vec3::new(0.0, 0.0, 1.0), 5f64.to_radians(), Vec3::zeros());
        let est = gt.compose(&rot);
        let mut sum = 0.0;
        for v in sphere.vertices() {
            let a = est.rotation() * v + est.translation();
            let b = gt.rotation() * v + gt.translation();
            sum += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
        }
        let oracle = sum / sphere.vertices().len() as f64;
        assert!((add_error(&est, &gt, &sphere) - oracle).abs() < 1e-12);
    }

    #[test]
    fn add_acceptance_is_strict() {
        assert!(!add_accepted(10.0, 100.0));
        assert!(add_accepted(9.999, 100.0));
    }

    #[test]
    fn proj2d_examples() {
        let model = meshes::cuboid(1, 40.0, 30.0, 20.0, 1);
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 500.0));
        assert_eq!(proj2d_error(&gt, &gt, &model, &intr()).unwrap(), 0.0);
        // Nearly flat model at depth 500: a 7 mm sideways shift moves every
        // projection by fx * 7 / 500 = 7 px.
        let flat = ObjectModel::new(
            1,
            vec![
                Vec3::new(-10.0, -10.0, 0.0),
                Vec3::new(10.0, -10.0, 0.0),
                Vec3::new(0.0, 10.0, 0.0),
                Vec3::new(0.0, 0.0, 1e-3),
            ],
            vec![[0, 1, 2], [0, 1, 3], [1, 2, 3], [2, 0, 3]],
        )
        .unwrap();
        let est = Pose::from_translation(Vec3::new(7.0, 0.0, 500.0));
        let e = proj2d_error(&est, &gt, &flat, &intr()).unwrap();
        assert!((e - 7.0).abs() < 1e-4, "{e}");
        assert!((PROJ2D_THRESHOLDS[0]..PROJ2D_THRESHOLDS[1]).contains(&e));
        let behind = Pose::from_translation(Vec3::new(0.0, 0.0, -500.0));
        assert_eq!(
            proj2d_error(&behind, &gt, &model, &intr()).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn oc_rate_examples() {
        let mut mask = InstanceMask::new(10, 10, 1);
        let mut gt = ObjectCoordinateImage::new(10, 10);
        for v in 0..10 {
            for u in 0..10 {
                mask.set(u, v, true);
                gt.set(u, v, Vec3::new(u as f64, v as f64, 0.0));
            }
        }
        assert_eq!(oc_inlier_rate(&gt, &gt, &mask).unwrap(), 1.0);
        let mut off = gt.clone();
        let mut half = gt.clone();
        for v in 0..10 {
            for u in 0..10 {
                let p = gt.get(u, v).unwrap() + Vec3::new(25.0, 0.0, 0.0);
                off.set(u, v, p);
                if u < 5 {
                    half.set(u, v, p);
                }
            }
        }
        assert_eq!(oc_inlier_rate(&off, &gt, &mask).unwrap(), 0.0);
        assert_eq!(oc_inlier_rate(&half, &gt, &mask).unwrap(), 0.5);
        let empty = InstanceMask::new(10, 10, 1);
        assert!(matches!(
            oc_inlier_rate(&gt, &gt, &empty),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn occlusion_examples() {
        let model = meshes::cuboid(1, 60.0, 60.0, 10.0, 1);
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 500.0));
        let full = render(&model, &pose, &intr(), false).unwrap().mask;
        assert_eq!(occlusion_level(&full, &model, &pose, &intr()).unwrap(), 0.0);
        let none = InstanceMask::new(320, 240, 1);
        assert_eq!(occlusion_level(&none, &model, &pose, &intr()).unwrap(), 1.0);
        // Silhouette centered on the principal point column 160: keep u >= 160.
        let mut right = full.clone();
        for p in full.pixels() {
            if p.u < 160 {
                right.set(p.u as usize, p.v as usize, false);
            }
        }
        let level = occlusion_level(&right, &model, &pose, &intr()).unwrap();
        let (_, v0, _, v1) = full.bounding_box().unwrap();
        let quantum = (v1 - v0 + 1) as f64 / full.count() as f64;
        assert!((level - 0.5).abs() <= quantum, "{level}");
        let far = Pose::from_translation(Vec3::new(0.0, 0.0, -500.0));
        assert!(matches!(
            occlusion_level(&full, &model, &far, &intr()),
            Err(Error::NothingVisible)
        ));
    }

    fn report(occ: f64, ok: bool) -> ObjectReport {
        ObjectReport {
            frame_id: "f".into(),
            class_id: 1,
            diameter: 100.0,
            estimated: true,
            add_error: if ok { 1.0 } else { 50.0 },
            proj2d_error: if ok { 1.0 } else { 50.0 },
            occlusion: occ,
            symmetric: false,
        }
    }

    #[test]
    fn aggregate_examples() {
        let all: Vec<_> = (0..10)
            .map(|i| report(i as f64 / 10.0 + 0.05, true))
            .collect();
        let m = aggregate(all, 10, Criterion::Add).unwrap();
        assert!(m.bins.iter().all(|b| b.rate() == Some(1.0)));

        let half: Vec<_> = (0..20).map(|i| report(0.5, i % 2 == 0)).collect();
        assert_eq!(aggregate(half, 10, Criterion::Add).unwrap().add_rate, 0.5);

        // Bin 0: 3 items, 1 accepted. Bin 4: 2 items, 2 accepted. Bin 9: 1.0
        // lands in the last bin, 1 item, 0 accepted.
        let set = vec![
            report(0.0, true),
            report(0.05, false),
            report(0.099, false),
            report(0.4, true),
            report(0.45, true),
            report(1.0, false),
        ];
        let m = aggregate(set, 10, Criterion::Proj2d(5)).unwrap();
        assert_eq!((m.bins[0].total, m.bins[0].accepted), (3, 1));
        assert_eq!((m.bins[4].total, m.bins[4].accepted), (2, 2));
        assert_eq!((m.bins[9].total, m.bins[9].accepted), (1, 0));
        let total: usize = m.bins.iter().map(|b| b.total).sum();
        let acc: usize = m.bins.iter().map(|b| b.accepted).sum();
        assert_eq!(total, 6);
        assert!((acc as f64 / total as f64 - m.rate()).abs() < 1e-12);
        assert_eq!(m.curve().lines().count(), 3);
    }

    #[test]
    fn missing_estimate_is_a_rejection() {
        let model = meshes::cuboid(1, 60.0, 60.0, 10.0, 1);
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 500.0));
        let full = render(&model, &pose, &intr(), false).unwrap().mask;
        let r = ObjectReport::evaluate("f", None, &pose, &model, &intr(), &full, false).unwrap();
        assert!(!r.accepted(Criterion::Add) && !r.accepted(Criterion::Proj2d(10)));
        assert!(r.to_line().contains("add_mm=inf"));
    }
}
