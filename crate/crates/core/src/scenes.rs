//! Synthetic ground-truth scenes and a corruption harness that stands in
//! for learned segmentation and object-coordinate prediction.
//!
//! [`generate`] renders every object of a scene into a shared z-buffer, so
//! masks, depth, and object coordinates reflect physically correct mutual
//! occlusion. [`corrupt`] then degrades the per-object channels under a
//! seed: mask erosion, an extra half-plane occlusion cut, Gaussian noise
//! and uniform outliers on object coordinates, and Gaussian depth noise.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::augment::GroundPlane;
use crate::error::{Error, Result};
use crate::geometry::{
    CameraIntrinsics, DepthImage, InstanceMask, ObjectCoordinateImage, ObjectModel, Pose, Vec3,
};
use crate::render::render;
use crate::seeding::{derive_seed, stream_rng};

/// The default desk-scale camera: 640×480, fx = fy = 572.4,
/// principal point (325.3, 242.0).
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 572.4,
        fy: 572.4,
        cx: 325.3,
        cy: 242.0,
        width: 640,
        height: 480,
    }
}

/// Farthest depth at which a background plane is drawn.
pub const BACKGROUND_MAX_DEPTH: f64 = 3000.0;

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub models: Vec<ObjectModel>,
    pub poses: Vec<Pose>,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
    /// Optional supporting plane drawn into the depth channel.
    pub ground: Option<GroundPlane>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.models.len() != self.poses.len() {
            return Err(Error::InvalidInput(format!(
                "{} models but {} poses",
                self.models.len(),
                self.poses.len()
            )));
        }
        if self.poses.iter().any(|p| p.translation().z <= 0.0) {
            return Err(Error::InvalidInput(
                "every object must lie in front of the camera".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth for one object in a generated scene.
#[derive(Clone, Debug)]
pub struct ObjectView {
    pub class_id: u32,
    pub gt_pose: Pose,
    /// Pixels where this object is the nearest surface.
    pub mask: InstanceMask,
    /// Object coordinates over `mask`.
    pub object_coords: ObjectCoordinateImage,
    /// Silhouette size when rendered alone.
    pub full_pixel_count: usize,
    pub bbox: (Vec3, Vec3),
    pub diameter: f64,
}

impl ObjectView {
    /// False when the object covers no pixel of the frame.
    pub fn is_visible(&self) -> bool {
        self.mask.count() > 0
    }

    /// `1 - visible / rendered alone`; 1 for objects that are out of view.
    pub fn occlusion(&self) -> f64 {
        if self.full_pixel_count == 0 {
            return 1.0;
        }
        1.0 - self.mask.count() as f64 / self.full_pixel_count as f64
    }
}

#[derive(Clone, Debug)]
pub struct SceneFrame {
    pub intrinsics: CameraIntrinsics,
    pub depth: DepthImage,
    pub objects: Vec<ObjectView>,
    pub ground: Option<GroundPlane>,
}

/// Renders all objects into one z-buffer. Objects that end up covering no
/// pixel are kept with an empty mask (see [`ObjectView::is_visible`]).
pub fn generate(spec: &SceneSpec) -> Result<SceneFrame> {
    spec.validate()?;
    let intr = spec.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let renders: Vec<Option<crate::render::RenderOutput>> = spec
        .models
        .iter()
        .zip(&spec.poses)
        .map(|(m, p)| match render(m, p, &intr, true) {
            Ok(r) => Ok(Some(r)),
            Err(Error::NothingVisible) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;

    let mut depth = DepthImage::new(w, h);
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut best = 0.0;
            for (k, r) in renders.iter().enumerate() {
                let Some(r) = r else { continue };
                let z = r.depth.get(u, v);
                if z > 0.0 && (best == 0.0 || z < best) {
                    best = z;
                    owner[v * w + u] = Some(k);
                }
            }
            if let Some(plane) = &spec.ground {
                if let Some(z) = plane.depth_along_ray(&intr, u as f64, v as f64) {
                    if z <= BACKGROUND_MAX_DEPTH && (best == 0.0 || z < best) {
                        best = z;
                        owner[v * w + u] = None;
                    }
                }
            }
            depth.set(u, v, best);
        }
    }

    let objects = spec
        .models
        .iter()
        .zip(&spec.poses)
        .enumerate()
        .map(|(k, (model, pose))| {
            let mut mask = InstanceMask::new(w, h, model.class_id());
            let mut oc = ObjectCoordinateImage::new(w, h);
            let mut full = 0;
            if let Some(r) = &renders[k] {
                full = r.mask.count();
                let coords = r.object_coords.as_ref().expect("requested coordinates");
                for px in r.mask.pixels() {
                    let (u, v) = (px.u as usize, px.v as usize);
                    if owner[v * w + u] == Some(k) {
                        mask.set(u, v, true);
                        if let Some(c) = coords.get(u, v) {
                            oc.set(u, v, c);
                        }
                    }
                }
            }
            ObjectView {
                class_id: model.class_id(),
                gt_pose: *pose,
                mask,
                object_coords: oc,
                full_pixel_count: full,
                bbox: model.bbox(),
                diameter: model.diameter(),
            }
        })
        .collect();

    Ok(SceneFrame {
        intrinsics: intr,
        depth,
        objects,
        ground: spec.ground,
    })
}

/// Degradations applied by [`corrupt`]. All-zero is the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CorruptionSpec {
    /// Standard deviation (mm) of Gaussian noise per coordinate axis.
    pub oc_noise_sigma: f64,
    /// Fraction of valid coordinates replaced by uniform samples in the
    /// model bounding box.
    pub oc_outlier_fraction: f64,
    pub depth_noise_sigma: f64,
    /// Number of 4-neighborhood erosion passes on each mask.
    pub mask_boundary_erosion: u32,
    /// Fraction of each mask removed by a random half-plane cut.
    pub extra_occlusion_fraction: f64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.oc_noise_sigma >= 0.0)
            || !(self.depth_noise_sigma >= 0.0)
            || !frac(self.oc_outlier_fraction)
            || !frac(self.extra_occlusion_fraction)
        {
            return Err(Error::InvalidInput(format!(
                "invalid corruption spec {self:?}"
            )));
        }
        Ok(())
    }
}

/// Deterministic degradation of a generated frame.
///
/// Per object, in order: erosion, half-plane cut, coordinate restriction to
/// the new mask, coordinate noise, outlier replacement. Depth noise is
/// applied last to the shared depth image.
pub fn corrupt(frame: &SceneFrame, spec: &CorruptionSpec, seed: u64) -> Result<SceneFrame> {
    spec.validate()?;
    let mut out = frame.clone();
    for (k, obj) in out.objects.iter_mut().enumerate() {
        let mut rng = stream_rng(derive_seed(seed, 0x0b1ec7), k as u64);
        for _ in 0..spec.mask_boundary_erosion {
            obj.mask = erode(&obj.mask);
        }
        if spec.extra_occlusion_fraction > 0.0 {
            half_plane_cut(&mut obj.mask, spec.extra_occlusion_fraction, &mut rng);
        }
        obj.object_coords.restrict_to(&obj.mask)?;

        let valid: Vec<(usize, usize)> = obj
            .mask
            .pixels()
            .map(|p| (p.u as usize, p.v as usize))
            .filter(|&(u, v)| obj.object_coords.is_valid(u, v))
            .collect();
        if spec.oc_noise_sigma > 0.0 {
            let noise = Normal::new(0.0, spec.oc_noise_sigma).expect("sigma validated");
            for &(u, v) in &valid {
                let c = obj.object_coords.get(u, v).expect("valid pixel");
                let d = Vec3::new(
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                );
                obj.object_coords.set(u, v, c + d);
            }
        }
        if spec.oc_outlier_fraction > 0.0 && !valid.is_empty() {
            let n =
                ((spec.oc_outlier_fraction * valid.len() as f64).round() as usize).min(valid.len());
            let (lo, hi) = obj.bbox;
            for i in sample(&mut rng, valid.len(), n).into_iter() {
                let (u, v) = valid[i];
                let c = Vec3::from_fn(|a, _| {
                    if hi[a] > lo[a] {
                        rng.random_range(lo[a]..hi[a])
                    } else {
                        lo[a]
                    }
                });
                obj.object_coords.set(u, v, c);
            }
        }
    }
    if spec.depth_noise_sigma > 0.0 {
        let mut rng = stream_rng(derive_seed(seed, 0xde97), 0);
        let noise = Normal::new(0.0, spec.depth_noise_sigma).expect("sigma validated");
        let (w, h) = (out.depth.width(), out.depth.height());
        for v in 0..h {
            for u in 0..w {
                let z = out.depth.get(u, v);
                if z > 0.0 {
                    out.depth.set(u, v, z + noise.sample(&mut rng));
                }
            }
        }
    }
    Ok(out)
}

/// Removes every mask pixel with a 4-neighbor outside the mask or outside
/// the image.
pub fn erode(mask: &InstanceMask) -> InstanceMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = mask.clone();
    for p in mask.pixels() {
        let (u, v) = (p.u as usize, p.v as usize);
        let interior = u > 0
            && v > 0
            && u + 1 < w
            && v + 1 < h
            && mask.get(u - 1, v)
            && mask.get(u + 1, v)
            && mask.get(u, v - 1)
            && mask.get(u, v + 1);
        if !interior {
            out.set(u, v, false);
        }
    }
    out
}

/// Clears the mask pixels beyond a random line so that about `fraction`
/// of them are removed. The removed region is the intersection of the mask
/// with a half-plane.
fn half_plane_cut(mask: &mut InstanceMask, fraction: f64, rng: &mut impl Rng) {
    let pixels: Vec<_> = mask.pixels().collect();
    let n_remove = ((fraction * pixels.len() as f64).round() as usize).min(pixels.len());
    if n_remove == 0 {
        return;
    }
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = angle.sin_cos();
    let mut proj: Vec<f64> = pixels
        .iter()
        .map(|p| c * p.u as f64 + s * p.v as f64)
        .collect();
    let mut sorted = proj.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[n_remove - 1];
    for (p, d) in pixels.iter().zip(proj.drain(..)) {
        if d >= threshold {
            mask.set(p.u as usize, p.v as usize, false);
        }
    }
}

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut impl Rng) -> Pose {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    // Haar measure on SO(3): angle density proportional to 1 - cos(angle).
    let angle = loop {
        let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let accept: f64 = rng.random_range(0.0..2.0);
        if accept <= 1.0 - a.cos() {
            break a;
        }
    };
    Pose::from_axis_angle(&Vec3::from(axis), angle, Vec3::zeros())
}

/// Constraints for [`random_scene`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomSceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub depth_range: (f64, f64),
    /// Upper bound on every object's occlusion level.
    pub max_occlusion: f64,
    /// Lower bound on every object's visible pixel count.
    pub min_visible_pixels: usize,
    /// Keep silhouettes off the image border by this many pixels.
    pub border: usize,
    pub max_tries: usize,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 3,
            depth_range: (650.0, 950.0),
            max_occlusion: 0.5,
            min_visible_pixels: 400,
            border: 4,
            max_tries: 500,
        }
    }
}

/// Draws a cluttered scene from `library`: objects grouped near the image
/// center so they overlap, each at most `max_occlusion` occluded and fully
/// inside the frame.
pub fn random_scene(
    library: &[ObjectModel],
    intr: &CameraIntrinsics,
    cfg: &RandomSceneConfig,
    seed: u64,
) -> Result<(SceneSpec, SceneFrame)> {
    if library.is_empty() || cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::InvalidInput("bad random scene configuration".into()));
    }
    for attempt in 0..cfg.max_tries {
        let mut rng = stream_rng(seed, attempt as u64);
        let n = rng.random_range(
            cfg.min_objects..=cfg.max_objects.min(library.len()).max(cfg.min_objects),
        );
        let picks = sample(&mut rng, library.len(), n.min(library.len())).into_vec();
        let anchor_z = rng.random_range(cfg.depth_range.0..cfg.depth_range.1);
        let mut models = Vec::new();
        let mut poses = Vec::new();
        for (i, &m) in picks.iter().enumerate() {
            let model = &library[m];
            let d = model.diameter();
            let z = (anchor_z + rng.random_range(-0.8..0.8) * d)
                .clamp(cfg.depth_range.0, cfg.depth_range.1);
            let spread = if i == 0 {
                0.0
            } else {
                rng.random_range(0.45..0.9) * d
            };
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let t = Vec3::new(spread * dir.cos(), spread * dir.sin(), z);
            let r = random_rotation(&mut rng);
            poses.push(Pose::from_translation(t).compose(&r));
            models.push(model.clone());
        }
        let spec = SceneSpec {
            models,
            poses,
            intrinsics: *intr,
            seed,
            ground: None,
        };
        let frame = generate(&spec)?;
        if scene_ok(&frame, cfg) {
            return Ok((spec, frame));
        }
    }
    Err(Error::InvalidInput(format!(
        "no valid scene within {} tries",
        cfg.max_tries
    )))
}

fn scene_ok(frame: &SceneFrame, cfg: &RandomSceneConfig) -> bool {
    let (w, h) = (frame.intrinsics.width, frame.intrinsics.height);
    frame.objects.iter().all(|o| {
        let inside = o.mask.bounding_box().is_some_and(|(u0, v0, u1, v1)| {
            u0 >= cfg.border && v0 >= cfg.border && u1 + cfg.border < w && v1 + cfg.border < h
        });
        // Silhouette fully inside the frame: visible + hidden pixels all rendered.
        inside
            && o.full_pixel_count > 0
            && o.mask.count() >= cfg.min_visible_pixels
            && o.occlusion() <= cfg.max_occlusion
    })
}

/// Objects standing on a table seen from a camera pitched down by
/// 25°..45° at 500..800 mm height. Returns the scene with its plane.
pub fn tabletop_scene(
    library: &[ObjectModel],
    n_objects: usize,
    intr: &CameraIntrinsics,
    seed: u64,
) -> Result<(SceneSpec, SceneFrame)> {
    if library.is_empty() || n_objects == 0 {
        return Err(Error::InvalidInput("tabletop scene needs models".into()));
    }
    for attempt in 0..500u64 {
        let mut rng = stream_rng(derive_seed(seed, 0x7ab1e), attempt);
        let pitch = rng.random_range(25f64..45.0).to_radians();
        let height = rng.random_range(500.0..800.0);
        let up = Vec3::new(0.0, -pitch.cos(), -pitch.sin());
        let plane = GroundPlane::new(up, -height)?;
        let mut models = Vec::new();
        let mut poses: Vec<Pose> = Vec::new();
        let mut centers: Vec<(Vec3, f64)> = Vec::new();
        for _ in 0..n_objects {
            let model = &library[rng.random_range(0..library.len())];
            let u = rng.random_range(0.3..0.7) * intr.width as f64;
            let v = rng.random_range(0.45..0.8) * intr.height as f64;
            let Some(z) = plane.depth_along_ray(intr, u, v) else {
                continue;
            };
            let ground_pt = intr.unproject(u, v, z);
            let pose = standing_pose(
                model,
                &plane,
                &ground_pt,
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            let center = pose.apply(&((model.bbox().0 + model.bbox().1) * 0.5));
            let radius = model.diameter() * 0.5;
            if centers
                .iter()
                .any(|(c, r)| (c - center).norm() < r + radius)
            {
                continue;
            }
            centers.push((center, radius));
            poses.push(pose);
            models.push(model.clone());
        }
        if models.len() != n_objects {
            continue;
        }
        let spec = SceneSpec {
            models,
            poses,
            intrinsics: *intr,
            seed,
            ground: Some(plane),
        };
        let frame = generate(&spec)?;
        if frame.objects.iter().all(|o| o.mask.count() > 0) {
            return Ok((spec, frame));
        }
    }
    Err(Error::InvalidInput(
        "could not place objects on the table".into(),
    ))
}

/// Pose that stands `model` upright (object +z along the plane normal)
/// with its lowest vertex at `ground_point`, rotated by `yaw` about the
/// normal.
pub fn standing_pose(
    model: &ObjectModel,
    plane: &GroundPlane,
    ground_point: &Vec3,
    yaw: f64,
) -> Pose {
    let up = *plane.normal();
    let align = nalgebra::Rotation3::rotation_between(&Vec3::z(), &up).unwrap_or_else(|| {
        nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI)
    });
    let rot = Pose::from_rotation(align, Vec3::zeros()).compose(&Pose::from_axis_angle(
        &Vec3::z(),
        yaw,
        Vec3::zeros(),
    ));
    let lowest = model
        .vertices()
        .iter()
        .map(|v| rot.apply(v))
        .min_by(|a, b| up.dot(a).total_cmp(&up.dot(b)))
        .expect("non-empty model");
    Pose::from_translation(ground_point - lowest).compose(&rot)
}

/// Fixed library of irregular blobs used by the synthetic oracle. Class ids
/// start at 1; radii vary between 45 and 75 mm.
pub fn default_model_library() -> Vec<ObjectModel> {
    (0..6u32)
        .map(|i| crate::meshes::blob(i + 1, 45.0 + 6.0 * i as f64, 1000 + i as u64, 18, 28))
        .collect()
}
