//! Physically plausible occlusion augmentation.
//!
//! Each training frame shows one unoccluded object standing on a ground
//! plane. Crops of other objects are pasted in front of a target only when
//! they stand on a similarly oriented plane inside the target's cone of
//! interest, and compositing keeps the nearest surface per pixel so the
//! depth channel stays metrically consistent. The on-surface occlusion
//! histogram measures where objects get occluded.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{
    CameraIntrinsics, DepthImage, InstanceMask, ObjectModel, Pose, RgbImage, Vec3,
};
use crate::render::render;

/// Plane `normal · x = offset` in the camera frame, oriented so the camera
/// center lies on the positive side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundPlane {
    normal: Vec3,
    offset: f64,
}

impl GroundPlane {
    /// Normalizes `normal` and flips the plane if needed so the origin is
    /// on the positive side.
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0) || !len.is_finite() || !offset.is_finite() {
            return Err(Error::InvalidInput(
                "plane normal must be non-zero and finite".into(),
            ));
        }
        let (mut normal, mut offset) = (normal / len, offset / len);
        // Signed distance of the camera center is -offset.
        if offset > 0.0 {
            normal = -normal;
            offset = -offset;
        }
        Ok(Self { normal, offset })
    }

    pub fn normal(&self) -> &Vec3 {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn project(&self, p: &Vec3) -> Vec3 {
        p - self.normal * self.signed_distance(p)
    }

    /// Angle between the two normals in radians.
    pub fn normal_angle_to(&self, other: &GroundPlane) -> f64 {
        self.normal.dot(&other.normal).clamp(-1.0, 1.0).acos()
    }

    /// Depth of the plane along the viewing ray of image position `(u, v)`,
    /// if the ray hits the plane in front of the camera.
    pub fn depth_along_ray(&self, intr: &CameraIntrinsics, u: f64, v: f64) -> Option<f64> {
        let ray = intr.unproject(u, v, 1.0);
        let denom = self.normal.dot(&ray);
        if denom == 0.0 {
            return None;
        }
        let z = self.offset / denom;
        (z > 0.0 && z.is_finite()).then_some(z)
    }
}

/// Least-squares plane through `points`.
pub fn fit_ground_plane(points: &[Vec3]) -> Result<GroundPlane> {
    if points.len() < 3 {
        return Err(Error::DegenerateConfiguration(
            "need at least 3 support points",
        ));
    }
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let cov = points
        .iter()
        .map(|p| (p - centroid) * (p - centroid).transpose())
        .sum::<Matrix3<f64>>();
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l0 > 0.0) || l1 < 1e-12 * l0 {
        return Err(Error::DegenerateConfiguration(
            "support points are collinear",
        ));
    }
    let normal: Vec3 = eig.eigenvectors.column(order[2]).into_owned();
    GroundPlane::new(normal, normal.dot(&centroid))
}

/// How the 90° region in front of a target is interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConeShape {
    /// Wedge on the ground plane with its apex at the target base,
    /// bisected by the in-plane direction toward the camera.
    #[default]
    PlanarWedge,
    /// Solid cone with apex at the target base and axis toward the camera
    /// center.
    SolidCone,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConeOfInterest {
    /// Half of the opening angle, degrees.
    pub half_angle_deg: f64,
    pub shape: ConeShape,
}

impl Default for ConeOfInterest {
    fn default() -> Self {
        Self {
            half_angle_deg: 45.0,
            shape: ConeShape::PlanarWedge,
        }
    }
}

const ANGLE_EPS: f64 = 1e-9;

impl ConeOfInterest {
    /// Both base points are camera-frame positions; the camera is the origin.
    pub fn contains(&self, plane: &GroundPlane, target_base: &Vec3, candidate_base: &Vec3) -> bool {
        if !(candidate_base.norm() < target_base.norm()) {
            return false;
        }
        let (axis, dir) = match self.shape {
            ConeShape::PlanarWedge => {
                let t = plane.project(target_base);
                let c = plane.project(candidate_base);
                let cam = plane.project(&Vec3::zeros());
                (cam - t, c - t)
            }
            ConeShape::SolidCone => (-target_base, candidate_base - target_base),
        };
        if axis.norm() == 0.0 {
            return false;
        }
        if dir.norm() == 0.0 {
            return true;
        }
        let angle = axis.cross(&dir).norm().atan2(axis.dot(&dir));
        angle <= self.half_angle_deg.to_radians() + ANGLE_EPS
    }
}

/// Default wedge test: 90° opening toward the camera, nearer candidates only.
pub fn in_cone_of_interest(plane: &GroundPlane, target_base: &Vec3, candidate_base: &Vec3) -> bool {
    ConeOfInterest::default().contains(plane, target_base, candidate_base)
}

/// One object standing on a ground plane, with its frame's channels.
#[derive(Clone, Debug)]
pub struct PosedFrame {
    pub rgb: Option<RgbImage>,
    pub depth: DepthImage,
    /// Visible pixels of the object in this frame.
    pub mask: InstanceMask,
    pub intrinsics: CameraIntrinsics,
    pub model: Arc<ObjectModel>,
    pub pose: Pose,
    pub plane: GroundPlane,
    base_point: Vec3,
    camera_distance: f64,
}

impl PosedFrame {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rgb: Option<RgbImage>,
        depth: DepthImage,
        mask: InstanceMask,
        intrinsics: CameraIntrinsics,
        model: Arc<ObjectModel>,
        pose: Pose,
        plane: GroundPlane,
    ) -> Result<Self> {
        intrinsics.check_dims(depth.width(), depth.height(), "depth image")?;
        intrinsics.check_dims(mask.width(), mask.height(), "mask")?;
        if let Some(rgb) = &rgb {
            intrinsics.check_dims(rgb.width(), rgb.height(), "rgb image")?;
        }
        let base_point = base_point(&model, &pose, &plane);
        Ok(Self {
            rgb,
            depth,
            mask,
            intrinsics,
            model,
            pose,
            plane,
            camera_distance: base_point.norm(),
            base_point,
        })
    }

    /// Camera-frame position of the model vertex lowest along the plane
    /// normal.
    pub fn base_point(&self) -> &Vec3 {
        &self.base_point
    }

    pub fn camera_distance(&self) -> f64 {
        self.camera_distance
    }
}

fn base_point(model: &ObjectModel, pose: &Pose, plane: &GroundPlane) -> Vec3 {
    let n_obj = pose.rotation().transpose() * plane.normal();
    let lowest = model
        .vertices()
        .iter()
        .min_by(|a, b| n_obj.dot(a).total_cmp(&n_obj.dot(b)))
        .expect("models have vertices");
    pose.apply(lowest)
}

/// Library frames that can plausibly occlude `target`, nearest to the
/// camera first (ties keep library order).
pub fn select_occluders<'a>(
    target: &PosedFrame,
    library: &'a [PosedFrame],
    max_normal_angle_deg: f64,
) -> Vec<&'a PosedFrame> {
    select_occluders_with(
        target,
        library,
        max_normal_angle_deg,
        &ConeOfInterest::default(),
    )
}

pub fn select_occluders_with<'a>(
    target: &PosedFrame,
    library: &'a [PosedFrame],
    max_normal_angle_deg: f64,
    cone: &ConeOfInterest,
) -> Vec<&'a PosedFrame> {
    let max_angle = max_normal_angle_deg.to_radians();
    let mut picked: Vec<&PosedFrame> = library
        .iter()
        .filter(|c| target.plane.normal_angle_to(&c.plane) <= max_angle + ANGLE_EPS)
        .filter(|c| cone.contains(&target.plane, &target.base_point, &c.base_point))
        .collect();
    picked.sort_by(|a, b| a.camera_distance.total_cmp(&b.camera_distance));
    picked
}

#[derive(Clone, Debug)]
pub struct Composite {
    /// The target frame with composited channels and its shrunken mask.
    pub frame: PosedFrame,
    /// Visible mask of each occluder after compositing, in input order.
    pub occluder_masks: Vec<InstanceMask>,
}

/// Overlays occluder crops on the target scene keeping, per pixel, the
/// surface nearest to the camera. Ties go to the earlier layer (the target
/// scene first, then occluders in order).
pub fn composite(target: &PosedFrame, occluders: &[&PosedFrame]) -> Result<Composite> {
    for o in occluders {
        if o.intrinsics != target.intrinsics {
            return Err(Error::IntrinsicsMismatch);
        }
    }
    let (w, h) = (target.intrinsics.width, target.intrinsics.height);
    let mut depth = target.depth.clone();
    let mut rgb = target.rgb.clone();
    let mut target_mask = target.mask.clone();
    let mut masks: Vec<InstanceMask> = occluders
        .iter()
        .map(|o| InstanceMask::new(w, h, o.mask.class_id()))
        .collect();

    for v in 0..h {
        for u in 0..w {
            let mut best_z = target.depth.get(u, v);
            let mut winner: Option<usize> = None;
            for (k, o) in occluders.iter().enumerate() {
                if !o.mask.get(u, v) {
                    continue;
                }
                let z = o.depth.get(u, v);
                if z > 0.0 && (best_z <= 0.0 || z < best_z) {
                    best_z = z;
                    winner = Some(k);
                }
            }
            if let Some(k) = winner {
                depth.set(u, v, best_z);
                masks[k].set(u, v, true);
                target_mask.set(u, v, false);
                if let Some(rgb) = rgb.as_mut() {
                    let c = occluders[k]
                        .rgb
                        .as_ref()
                        .map_or([0; 3], |img| img.get(u, v));
                    rgb.set(u, v, c);
                }
            }
        }
    }

    let mut frame = target.clone();
    frame.depth = depth;
    frame.rgb = rgb;
    frame.mask = target_mask;
    Ok(Composite {
        frame,
        occluder_masks: masks,
    })
}

pub const HISTOGRAM_RESOLUTION: usize = 20;

/// Occlusion counts over a 20×20×20 voxel grid spanning the model's
/// object-frame bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionHistogram {
    bbox_min: Vec3,
    bbox_max: Vec3,
    counts: Vec<u64>,
}

impl OcclusionHistogram {
    pub fn new(model: &ObjectModel) -> Self {
        let (bbox_min, bbox_max) = model.bbox();
        Self {
            bbox_min,
            bbox_max,
            counts: vec![0; HISTOGRAM_RESOLUTION.pow(3)],
        }
    }

    pub fn resolution(&self) -> usize {
        HISTOGRAM_RESOLUTION
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        (self.bbox_min, self.bbox_max)
    }

    /// Voxel `(i, j, k)` containing an object-frame point; points outside
    /// the box clamp to the boundary voxels.
    pub fn voxel_of(&self, p: &Vec3) -> [usize; 3] {
        std::array::from_fn(|a| {
            let extent = self.bbox_max[a] - self.bbox_min[a];
            if extent <= 0.0 {
                return 0;
            }
            let t = (p[a] - self.bbox_min[a]) / extent * HISTOGRAM_RESOLUTION as f64;
            (t.floor().max(0.0) as usize).min(HISTOGRAM_RESOLUTION - 1)
        })
    }

    pub fn add(&mut self, p: &Vec3) {
        let [i, j, k] = self.voxel_of(p);
        self.counts[Self::index(i, j, k)] += 1;
    }

    #[inline]
    fn index(i: usize, j: usize, k: usize) -> usize {
        (i * HISTOGRAM_RESOLUTION + j) * HISTOGRAM_RESOLUTION + k
    }

    pub fn count(&self, i: usize, j: usize, k: usize) -> u64 {
        self.counts[Self::index(i, j, k)]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &OcclusionHistogram) -> Result<()> {
        if self.bbox_min != other.bbox_min || self.bbox_max != other.bbox_max {
            return Err(Error::InvalidInput(
                "histograms cover different boxes".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Text report: a summary header, then one `i j k count` line per
    /// non-empty voxel.
    pub fn report(&self) -> String {
        let total = self.total();
        let occupied = self.counts.iter().filter(|&&c| c > 0).count();
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let mean = if occupied > 0 {
            total as f64 / occupied as f64
        } else {
            0.0
        };
        let mut out = String::new();
        let _ = writeln!(out, "# resolution {HISTOGRAM_RESOLUTION}");
        let _ = writeln!(
            out,
            "# bbox {} {} {} {} {} {}",
            self.bbox_min.x,
            self.bbox_min.y,
            self.bbox_min.z,
            self.bbox_max.x,
            self.bbox_max.y,
            self.bbox_max.z
        );
        let _ = writeln!(out, "# total {total}");
        let _ = writeln!(out, "# occupied_voxels {occupied}");
        let _ = writeln!(out, "# max_count {max}");
        let _ = writeln!(out, "# mean_occupied_count {mean}");
        for i in 0..HISTOGRAM_RESOLUTION {
            for j in 0..HISTOGRAM_RESOLUTION {
                for k in 0..HISTOGRAM_RESOLUTION {
                    let c = self.count(i, j, k);
                    if c > 0 {
                        let _ = writeln!(out, "{i} {j} {k} {c}");
                    }
                }
            }
        }
        out
    }
}

/// Bins the object coordinate of every pixel that is inside the rendered
/// full silhouette but not inside `visible_mask`.
pub fn occlusion_histogram(
    model: &ObjectModel,
    gt_pose: &Pose,
    visible_mask: &InstanceMask,
    intr: &CameraIntrinsics,
) -> Result<OcclusionHistogram> {
    intr.check_dims(visible_mask.width(), visible_mask.height(), "visible mask")?;
    let full = render(model, gt_pose, intr, true)?;
    let coords = full.object_coords.as_ref().expect("requested coordinates");
    let mut hist = OcclusionHistogram::new(model);
    for px in full.mask.pixels() {
        let (u, v) = (px.u as usize, px.v as usize);
        if !visible_mask.get(u, v) {
            if let Some(c) = coords.get(u, v) {
                hist.add(&c);
            }
        }
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 160.0, 120.0, 320, 240).unwrap()
    }

    #[test]
    fn plane_fit_axis_aligned() {
        let pts: Vec<Vec3> = (0..4)
            .flat_map(|i| (0..4).map(move |j| Vec3::new(i as f64 * 10.0, j as f64 * 7.0, 1000.0)))
            .collect();
        let plane = fit_ground_plane(&pts).unwrap();
        assert!((plane.normal() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        assert!((plane.offset() + 1000.0).abs() < 1e-9);
        assert!(plane.signed_distance(&Vec3::zeros()) > 0.0);
    }

    #[test]
    fn plane_fit_collinear_is_degenerate() {
        let pts = [
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 1.0, 2.0),
            Vec3::new(2.0, 2.0, 3.0),
        ];
        assert!(matches!(
            fit_ground_plane(&pts),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn plane_fit_noisy_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Vec3::new(0.1, -0.8, -0.4).normalize();
        let offset = -600.0;
        let (e1, e2) = {
            let a = normal.cross(&Vec3::x()).normalize();
            (a, normal.cross(&a))
        };
        let normal_dist = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Vec3> = (0..50)
            .map(|_| {
                normal * offset
                    + e1 * rng.random_range(-300.0..300.0)
                    + e2 * rng.random_range(-300.0..300.0)
                    + normal * rng.sample(normal_dist)
            })
            .collect();
        let plane = fit_ground_plane(&pts).unwrap();
        assert!(plane.normal().dot(&normal).acos().to_degrees() < 0.5);
    }

    fn floor() -> GroundPlane {
        // Horizontal table 500 mm below the camera (camera y points down).
        GroundPlane::new(Vec3::new(0.0, -1.0, 0.0), -500.0).unwrap()
    }

    #[test]
    fn cone_membership_examples() {
        let plane = floor();
        let target = Vec3::new(0.0, 500.0, 1000.0);
        assert!(in_cone_of_interest(
            &plane,
            &target,
            &Vec3::new(0.0, 500.0, 700.0)
        ));
        assert!(!in_cone_of_interest(
            &plane,
            &target,
            &Vec3::new(0.0, 500.0, 1300.0)
        ));
        let at = |deg: f64| {
            let r = 150.0;
            let a = deg.to_radians();
            Vec3::new(r * a.sin(), 500.0, 1000.0 - r * a.cos())
        };
        assert!(in_cone_of_interest(&plane, &target, &at(45.0)));
        assert!(in_cone_of_interest(&plane, &target, &at(-45.0)));
        assert!(!in_cone_of_interest(&plane, &target, &at(46.0)));
    }

    #[test]
    fn solid_cone_variant() {
        let cone = ConeOfInterest {
            shape: ConeShape::SolidCone,
            ..Default::default()
        };
        let plane = floor();
        let target = Vec3::new(0.0, 0.0, 1000.0);
        assert!(cone.contains(&plane, &target, &Vec3::new(0.0, 0.0, 800.0)));
        assert!(cone.contains(&plane, &target, &Vec3::new(100.0, 0.0, 900.0)));
        assert!(!cone.contains(&plane, &target, &Vec3::new(150.0, 0.0, 900.0)));
    }

    fn frame_with(
        model: Arc<ObjectModel>,
        pose: Pose,
        depth_val: f64,
        rect: (usize, usize, usize, usize),
    ) -> PosedFrame {
        let c = intr();
        let mut depth = DepthImage::new(c.width, c.height);
        let mut mask = InstanceMask::new(c.width, c.height, model.class_id());
        for v in rect.1..rect.3 {
            for u in rect.0..rect.2 {
                depth.set(u, v, depth_val);
                mask.set(u, v, true);
            }
        }
        PosedFrame::new(None, depth, mask, c, model, pose, floor()).unwrap()
    }

    #[test]
    fn select_occluders_examples() {
        let model = Arc::new(meshes::cuboid(1, 40.0, 40.0, 40.0, 1));
        let target_pose = Pose::from_translation(Vec3::new(0.0, 480.0, 1000.0));
        let target = frame_with(model.clone(), target_pose, 1000.0, (10, 10, 20, 20));
        assert!(select_occluders(&target, &[], 10.0).is_empty());

        let shifted = frame_with(
            model.clone(),
            Pose::from_translation(Vec3::new(0.0, 480.0, 800.0)),
            800.0,
            (12, 12, 22, 22),
        );
        let picked = select_occluders(&target, std::slice::from_ref(&shifted), 10.0);
        assert_eq!(picked.len(), 1);

        let mut tilted = shifted.clone();
        let tilt = Pose::from_axis_angle(&Vec3::x(), 40f64.to_radians(), Vec3::zeros());
        tilted.plane = GroundPlane::new(tilt.apply(floor().normal()), -500.0).unwrap();
        assert!(select_occluders(&target, std::slice::from_ref(&tilted), 10.0).is_empty());

        let nearer = frame_with(
            model,
            Pose::from_translation(Vec3::new(0.0, 480.0, 700.0)),
            700.0,
            (0, 0, 4, 4),
        );
        let lib = vec![shifted.clone(), nearer.clone()];
        let picked = select_occluders(&target, &lib, 10.0);
        assert_eq!(picked.len(), 2);
        assert!(picked[0].camera_distance() < picked[1].camera_distance());
    }

    #[test]
    fn base_point_is_lowest_vertex() {
        let model = Arc::new(meshes::cuboid(1, 40.0, 40.0, 40.0, 1));
        let f = frame_with(
            model,
            Pose::from_translation(Vec3::new(0.0, 480.0, 1000.0)),
            1000.0,
            (0, 0, 1, 1),
        );
        assert!((f.base_point().y - 500.0).abs() < 1e-9);
        assert!((f.camera_distance() - f.base_point().norm()).abs() < 1e-6);
    }

    #[test]
    fn composite_identity_and_overlap() {
        let model = Arc::new(meshes::cuboid(1, 40.0, 40.0, 40.0, 1));
        let target = frame_with(
            model.clone(),
            Pose::from_translation(Vec3::new(0.0, 480.0, 1000.0)),
            1000.0,
            (10, 10, 30, 30),
        );
        let out = composite(&target, &[]).unwrap();
        assert_eq!(out.frame.depth, target.depth);
        assert_eq!(out.frame.mask, target.mask);

        let occ = frame_with(
            model,
            Pose::from_translation(Vec3::new(0.0, 480.0, 800.0)),
            800.0,
            (20, 20, 40, 40),
        );
        let out = composite(&target, &[&occ]).unwrap();
        let overlap = target.mask.intersect(&occ.mask).unwrap().count();
        assert_eq!(overlap, 100);
        assert_eq!(out.frame.mask.count(), target.mask.count() - overlap);
        assert_eq!(out.frame.depth.get(25, 25), 800.0);
        assert_eq!(out.occluder_masks[0].count(), occ.mask.count());
    }

    #[test]
    fn composite_rejects_mismatched_cameras() {
        let model = Arc::new(meshes::cuboid(1, 40.0, 40.0, 40.0, 1));
        let target = frame_with(
            model.clone(),
            Pose::from_translation(Vec3::new(0.0, 480.0, 1000.0)),
            1000.0,
            (10, 10, 30, 30),
        );
        let mut other = target.clone();
        other.intrinsics.fx = 400.0;
        assert!(matches!(
            composite(&target, &[&other]),
            Err(Error::IntrinsicsMismatch)
        ));
    }

    #[test]
    fn histogram_examples() {
        let c = intr();
        let model = meshes::blob(4, 40.0, 2, 12, 18);
        let pose =
            Pose::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.6, Vec3::new(0.0, 0.0, 500.0));
        let full = render(&model, &pose, &c, false).unwrap();
        let none = occlusion_histogram(&model, &pose, &full.mask, &c).unwrap();
        assert_eq!(none.total(), 0);
        let empty = InstanceMask::new(c.width, c.height, 4);
        let all = occlusion_histogram(&model, &pose, &empty, &c).unwrap();
        assert_eq!(all.total() as usize, full.mask.count());
    }
}
