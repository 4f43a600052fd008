//! Pose estimation from depth, an instance mask, and object coordinates.
//!
//! Hypotheses come from three random 3D-3D correspondences between
//! predicted object coordinates and the observed point cloud, aligned with
//! Kabsch and kept only if all three agree within a fraction of the object
//! diameter. The pool is ranked by the fraction of mask pixels whose
//! observed point agrees with the rendered model, the best few are refined
//! by ICP against the observed cloud, and the winner is refined once more
//! by fitting its rendered visible surface to the observation.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimate::{PoseEstimate, Stage, StageRecord};
use crate::geometry::{
    backproject, CameraIntrinsics, DepthImage, InstanceMask, ObjectCoordinateImage, ObjectModel,
    PointCloud, Pose, Vec3,
};
use crate::registration::{icp_with_index, kabsch_align, Correspondence3D, IcpParams, KdTree};
use crate::render::{render_window, visible_surface_cloud, PixelRect};
use crate::seeding::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RgbdPipelineParams {
    pub hypothesis_pool_size: usize,
    pub top_k: usize,
    /// Acceptance radius of a sampled hypothesis, as a fraction of the
    /// object diameter.
    pub consistency_fraction: f64,
    /// Inlier radius of the ranking score, as a fraction of the diameter.
    pub score_inlier_fraction: f64,
    pub max_sampling_attempts: usize,
    pub icp_max_iterations: usize,
    pub icp_rel_change_tolerance: f64,
    /// ICP pair rejection distance, as a fraction of the diameter.
    pub icp_pair_distance_fraction: f64,
}

impl Default for RgbdPipelineParams {
    fn default() -> Self {
        Self {
            hypothesis_pool_size: 210,
            top_k: 20,
            consistency_fraction: 0.1,
            score_inlier_fraction: 0.1,
            max_sampling_attempts: 50 * 210,
            icp_max_iterations: IcpParams::DEFAULT_MAX_ITERATIONS,
            icp_rel_change_tolerance: IcpParams::DEFAULT_REL_CHANGE_TOLERANCE,
            icp_pair_distance_fraction: IcpParams::DEFAULT_PAIR_DISTANCE_FRACTION,
        }
    }
}

impl RgbdPipelineParams {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| x > 0.0 && x < 1.0;
        let ok = self.top_k > 0
            && self.top_k <= self.hypothesis_pool_size
            && frac(self.consistency_fraction)
            && frac(self.score_inlier_fraction)
            && frac(self.icp_pair_distance_fraction)
            && self.max_sampling_attempts > 0
            && self.icp_max_iterations > 0
            && self.icp_rel_change_tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid RGB-D parameters {self:?}"
            )))
        }
    }

    pub fn icp_params(&self, diameter: f64) -> IcpParams {
        IcpParams {
            max_iterations: self.icp_max_iterations,
            rel_change_tolerance: self.icp_rel_change_tolerance,
            max_pair_distance: self.icp_pair_distance_fraction * diameter,
        }
    }
}

/// Per-object inputs of the RGB-D estimator.
#[derive(Clone, Copy, Debug)]
pub struct RgbdObservation<'a> {
    pub object_coords: &'a ObjectCoordinateImage,
    pub depth: &'a DepthImage,
    pub mask: &'a InstanceMask,
}

/// Masked pixels that have both an observed point and an object coordinate.
struct Correspondences {
    observed: Vec<Vec3>,
    object: Vec<Vec3>,
}

impl Correspondences {
    fn collect(
        oc: &ObjectCoordinateImage,
        cloud: &PointCloud,
        mask: &InstanceMask,
    ) -> Result<Self> {
        let pixels = cloud
            .pixels()
            .ok_or_else(|| Error::InvalidInput("observed cloud needs pixel provenance".into()))?;
        if oc.width() != mask.width() || oc.height() != mask.height() {
            return Err(Error::DimensionMismatch(
                "object coordinates vs mask".into(),
            ));
        }
        let mut observed = Vec::new();
        let mut object = Vec::new();
        for (p, px) in cloud.points().iter().zip(pixels) {
            let (u, v) = (px.u as usize, px.v as usize);
            if u >= mask.width() || v >= mask.height() || !mask.get(u, v) {
                continue;
            }
            if let Some(c) = oc.get(u, v) {
                observed.push(*p);
                object.push(c);
            }
        }
        Ok(Self { observed, object })
    }

    fn len(&self) -> usize {
        self.observed.len()
    }

    fn draw(&self, gate: f64, rng: &mut impl Rng) -> Option<Pose> {
        let idx = sample(rng, self.len(), 3);
        let corrs: Vec<Correspondence3D> = idx
            .iter()
            .map(|i| Correspondence3D::new(self.object[i], self.observed[i]))
            .collect();
        let pose = kabsch_align(&corrs).ok()?;
        corrs
            .iter()
            .all(|c| (pose.apply(&c.src) - c.dst).norm() < gate)
            .then_some(pose)
    }
}

/// Draws three distinct correspondences, aligns them, and returns the pose
/// only if every transformed object coordinate lies within
/// `consistency_fraction * diameter` of its observed point.
pub fn sample_hypothesis(
    oc: &ObjectCoordinateImage,
    cloud: &PointCloud,
    mask: &InstanceMask,
    diameter: f64,
    consistency_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Option<Pose>> {
    let corr = Correspondences::collect(oc, cloud, mask)?;
    if corr.len() < 3 {
        return Err(Error::InsufficientPixels {
            found: corr.len(),
            needed: 3,
        });
    }
    Ok(corr.draw(consistency_fraction * diameter, rng))
}

/// Observed points over the mask, indexed by pixel within the mask's
/// bounding box.
struct Scorer {
    rect: PixelRect,
    observed: Vec<Option<Vec3>>,
    mask_count: usize,
    threshold: f64,
}

impl Scorer {
    fn new(observed: &PointCloud, mask: &InstanceMask, threshold: f64) -> Result<Option<Self>> {
        let Some(rect) = PixelRect::of_mask(mask) else {
            return Ok(None);
        };
        let pixels = observed
            .pixels()
            .ok_or_else(|| Error::InvalidInput("observed cloud needs pixel provenance".into()))?;
        let mut lookup = vec![None; rect.width() * rect.height()];
        for (p, px) in observed.points().iter().zip(pixels) {
            let (u, v) = (px.u as usize, px.v as usize);
            if u < mask.width() && v < mask.height() && mask.get(u, v) {
                lookup[(v - rect.v0) * rect.width() + (u - rect.u0)] = Some(*p);
            }
        }
        Ok(Some(Self {
            rect,
            observed: lookup,
            mask_count: mask.count(),
            threshold,
        }))
    }

    fn inliers(&self, model: &ObjectModel, pose: &Pose, intr: &CameraIntrinsics) -> usize {
        let win = render_window(model, pose, intr, self.rect, false);
        let w = self.rect.width();
        let mut count = 0;
        for (i, obs) in self.observed.iter().enumerate() {
            let Some(p) = obs else { continue };
            let z = win.depth[i];
            if z <= 0.0 {
                continue;
            }
            let (u, v) = (self.rect.u0 + i % w, self.rect.v0 + i / w);
            let rendered = intr.unproject(u as f64, v as f64, z);
            if (p - rendered).norm() < self.threshold {
                count += 1;
            }
        }
        count
    }

    fn score(&self, inliers: usize) -> f64 {
        inliers as f64 / self.mask_count as f64
    }
}

/// Fraction of mask pixels whose observed point lies within
/// `inlier_fraction * diameter` of the model surface rendered under `pose`
/// at the same pixel. Pixels without an observed point or without rendered
/// coverage count as outliers; the denominator is always the full mask.
pub fn score(
    pose: &Pose,
    model: &ObjectModel,
    observed: &PointCloud,
    mask: &InstanceMask,
    intr: &CameraIntrinsics,
    diameter: f64,
    inlier_fraction: f64,
) -> Result<f64> {
    intr.check_dims(mask.width(), mask.height(), "mask")?;
    Ok(
        match Scorer::new(observed, mask, inlier_fraction * diameter)? {
            Some(s) => s.score(s.inliers(model, pose, intr)),
            None => 0.0,
        },
    )
}

/// Full RGB-D pipeline for one object instance. Bit-reproducible for a
/// given `seed` regardless of thread count.
pub fn estimate(
    obs: &RgbdObservation<'_>,
    model: &ObjectModel,
    intr: &CameraIntrinsics,
    params: &RgbdPipelineParams,
    seed: u64,
) -> Result<PoseEstimate> {
    params.validate()?;
    intr.validate()?;
    intr.check_dims(
        obs.object_coords.width(),
        obs.object_coords.height(),
        "object coordinates",
    )?;
    let diameter = model.diameter();

    let cloud = backproject(intr, obs.depth, obs.mask)?;
    let corr = Correspondences::collect(obs.object_coords, &cloud, obs.mask)?;
    if corr.len() < 3 {
        return Err(Error::InsufficientPixels {
            found: corr.len(),
            needed: 3,
        });
    }

    // Sampling: attempt `a` always uses stream `a`, so the collected pool
    // does not depend on batch scheduling.
    let gate = params.consistency_fraction * diameter;
    let mut pool: Vec<Pose> = Vec::with_capacity(params.hypothesis_pool_size);
    let batch = params.hypothesis_pool_size.max(64);
    let mut next = 0usize;
    while pool.len() < params.hypothesis_pool_size && next < params.max_sampling_attempts {
        let end = (next + batch).min(params.max_sampling_attempts);
        let drawn: Vec<Option<Pose>> = (next..end)
            .into_par_iter()
            .map(|a| corr.draw(gate, &mut stream_rng(seed, a as u64)))
            .collect();
        for pose in drawn.into_iter().flatten() {
            if pool.len() == params.hypothesis_pool_size {
                break;
            }
            pool.push(pose);
        }
        next = end;
    }
    if pool.is_empty() {
        return Err(Error::HypothesisPoolEmpty {
            attempts: params.max_sampling_attempts,
        });
    }

    let scorer = Scorer::new(&cloud, obs.mask, params.score_inlier_fraction * diameter)?
        .ok_or(Error::EmptyMask)?;
    let inliers: Vec<usize> = pool
        .par_iter()
        .map(|h| scorer.inliers(model, h, intr))
        .collect();
    let mut ranked: Vec<usize> = (0..pool.len()).collect();
    // Stable: ties keep collection order.
    ranked.sort_by(|&a, &b| inliers[b].cmp(&inliers[a]));
    ranked.truncate(params.top_k);

    let icp_params = params.icp_params(diameter);
    let target = KdTree::build(cloud.points());
    let refined: Vec<Option<crate::registration::IcpResult>> = ranked
        .par_iter()
        .map(|&i| icp_with_index(model.vertices(), &target, &pool[i], &icp_params).ok())
        .collect();
    let best = refined
        .iter()
        .enumerate()
        .filter_map(|(r, res)| res.as_ref().map(|res| (r, res)))
        .min_by(|a, b| a.1.fitting_error.total_cmp(&b.1.fitting_error));

    let top = ranked[0];
    let mut trace = Vec::with_capacity(5);
    let (chosen_rank, h_icp, icp_error) = match best {
        Some((r, res)) => (r, res.pose, res.fitting_error),
        None => (0, pool[top], f64::INFINITY),
    };
    let chosen = ranked[chosen_rank];
    trace.push(StageRecord {
        stage: Stage::Sample,
        pose: pool[chosen],
        value: pool.len() as f64,
    });
    trace.push(StageRecord {
        stage: Stage::Score,
        pose: pool[top],
        value: scorer.score(inliers[top]),
    });
    trace.push(StageRecord {
        stage: Stage::Icp,
        pose: h_icp,
        value: icp_error,
    });

    let mut pose = h_icp;
    if let Ok(visible) = visible_surface_cloud(model, &h_icp, intr, Some(obs.mask)) {
        if let Ok(res) = icp_with_index(visible.points(), &target, &Pose::identity(), &icp_params) {
            pose = res.pose.compose(&h_icp);
            trace.push(StageRecord {
                stage: Stage::RenderRefine,
                pose,
                value: res.fitting_error,
            });
        }
    }

    let final_inliers = scorer.inliers(model, &pose, intr);
    let final_score = scorer.score(final_inliers);
    trace.push(StageRecord {
        stage: Stage::Final,
        pose,
        value: final_score,
    });

    Ok(PoseEstimate {
        pose,
        score: final_score,
        inlier_count: final_inliers,
        icp_error: Some(icp_error),
        stage_trace: trace,
        hypotheses: pool.len(),
        survivors: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{
        default_intrinsics, default_model_library, random_scene, RandomSceneConfig,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle(seed: u64) -> (crate::scenes::SceneSpec, crate::scenes::SceneFrame) {
        let cfg = RandomSceneConfig {
            max_objects: 1,
            ..Default::default()
        };
        random_scene(&default_model_library(), &default_intrinsics(), &cfg, seed).unwrap()
    }

    #[test]
    fn noise_free_sample_is_exact() {
        let (spec, frame) = oracle(1);
        let o = &frame.objects[0];
        let cloud = backproject(&frame.intrinsics, &frame.depth, &o.mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let pose =
                sample_hypothesis(&o.object_coords, &cloud, &o.mask, o.diameter, 0.1, &mut rng)
                    .unwrap()
                    .expect("exact correspondences pass the gate");
            assert!((pose.rotation() - spec.poses[0].rotation()).amax() < 1e-6);
            assert!((pose.translation() - spec.poses[0].translation()).amax() < 1e-6);
        }
    }

    #[test]
    fn uniform_shift_is_absorbed_by_translation() {
        let (_, frame) = oracle(2);
        let o = &frame.objects[0];
        let cloud = backproject(&frame.intrinsics, &frame.depth, &o.mask).unwrap();
        let mut shifted = o.object_coords.clone();
        let offset = Vec3::new(0.2 * o.diameter, 0.0, 0.0);
        for p in o.mask.pixels() {
            let (u, v) = (p.u as usize, p.v as usize);
            shifted.set(u, v, o.object_coords.get(u, v).unwrap() + offset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pose =
                sample_hypothesis(&shifted, &cloud, &o.mask, o.diameter, 0.1, &mut rng).unwrap();
            assert!(pose.is_some());
        }
    }

    #[test]
    fn coordinates_off_by_more_than_the_gate_are_rejected() {
        let (_, frame) = oracle(2);
        let o = &frame.objects[0];
        let d = o.diameter;
        // Keep pixels whose coordinates are pairwise at least 0.3 d apart and
        // stretch them by 1.8 about the box center. Every pair then disagrees
        // with the observation by at least 0.24 d, so any rigid fit leaves a
        // residual of at least 0.12 d on some point.
        let mut mask = InstanceMask::new(o.mask.width(), o.mask.height(), o.class_id);
        let mut kept: Vec<Vec3> = Vec::new();
        for p in o.mask.pixels() {
            let c = o.object_coords.get(p.u as usize, p.v as usize).unwrap();
            if kept.iter().all(|k| (k - c).norm() >= 0.3 * d) {
                kept.push(c);
                mask.set(p.u as usize, p.v as usize, true);
            }
        }
        assert!(kept.len() >= 4);
        let (lo, hi) = o.bbox;
        let center = (lo + hi) * 0.5;
        let mut stretched = o.object_coords.clone();
        for p in mask.pixels() {
            let (u, v) = (p.u as usize, p.v as usize);
            stretched.set(
                u,
                v,
                center + (o.object_coords.get(u, v).unwrap() - center) * 1.8,
            );
        }
        let cloud = backproject(&frame.intrinsics, &frame.depth, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pose = sample_hypothesis(&stretched, &cloud, &mask, d, 0.1, &mut rng).unwrap();
            assert!(pose.is_none());
        }
    }

    #[test]
    fn two_pixels_are_insufficient() {
        let (_, frame) = oracle(3);
        let o = &frame.objects[0];
        let mut mask = InstanceMask::new(o.mask.width(), o.mask.height(), o.class_id);
        for p in o.mask.pixels().take(2) {
            mask.set(p.u as usize, p.v as usize, true);
        }
        let cloud = backproject(&frame.intrinsics, &frame.depth, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_hypothesis(&o.object_coords, &cloud, &mask, o.diameter, 0.1, &mut rng),
            Err(Error::InsufficientPixels { found: 2, .. })
        ));
    }

    #[test]
    fn score_examples() {
        let (spec, frame) = oracle(4);
        let o = &frame.objects[0];
        let model = &spec.models[0];
        let intr = frame.intrinsics;
        let cloud = backproject(&intr, &frame.depth, &o.mask).unwrap();
        let gt = spec.poses[0];
        let s = score(&gt, model, &cloud, &o.mask, &intr, o.diameter, 0.1).unwrap();
        assert!(s >= 0.99, "{s}");
        let moved = Pose::from_translation(Vec3::new(2.0 * o.diameter, 0.0, 0.0)).compose(&gt);
        assert_eq!(
            score(&moved, model, &cloud, &o.mask, &intr, o.diameter, 0.1).unwrap(),
            0.0
        );
        let behind =
            Pose::from_translation(Vec3::new(0.0, 0.0, -2.0 * gt.translation().z)).compose(&gt);
        assert_eq!(
            score(&behind, model, &cloud, &o.mask, &intr, o.diameter, 0.1).unwrap(),
            0.0
        );
    }

    #[test]
    fn score_decreases_with_depth_perturbation() {
        let (spec, frame) = oracle(5);
        let o = &frame.objects[0];
        let intr = frame.intrinsics;
        let gt = spec.poses[0];
        let pixels: Vec<_> = o.mask.pixels().collect();
        let mut depth = frame.depth.clone();
        let mut last = f64::INFINITY;
        // Push growing prefixes of the mask beyond the d/10 radius.
        for step in 0..=5 {
            let upto = pixels.len() * step / 5;
            for p in &pixels[..upto] {
                let (u, v) = (p.u as usize, p.v as usize);
                depth.set(u, v, frame.depth.get(u, v) + 0.2 * o.diameter);
            }
            let cloud = backproject(&intr, &depth, &o.mask).unwrap();
            let s = score(
                &gt,
                &spec.models[0],
                &cloud,
                &o.mask,
                &intr,
                o.diameter,
                0.1,
            )
            .unwrap();
            assert!((0.0..=1.0).contains(&s));
            assert!(s <= last);
            last = s;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn noise_free_estimate_recovers_pose() {
        for seed in 10..13 {
            let (spec, frame) = oracle(seed);
            let o = &frame.objects[0];
            let obs = RgbdObservation {
                object_coords: &o.object_coords,
                depth: &frame.depth,
                mask: &o.mask,
            };
            let est = estimate(
                &obs,
                &spec.models[0],
                &frame.intrinsics,
                &RgbdPipelineParams::default(),
                seed,
            )
            .unwrap();
            let rot = est.pose.rotation_angle_to(&spec.poses[0]).to_degrees();
            let trans = est.pose.translation_distance_to(&spec.poses[0]);
            assert!(
                rot < 0.2 && trans < 0.5,
                "seed {seed}: {rot} deg, {trans} mm"
            );
            let stages: Vec<_> = est.stage_trace.iter().map(|s| s.stage).collect();
            assert_eq!(
                stages,
                [
                    Stage::Sample,
                    Stage::Score,
                    Stage::Icp,
                    Stage::RenderRefine,
                    Stage::Final
                ]
            );
            assert!((0.0..=1.0).contains(&est.score));
        }
    }

    #[test]
    fn constant_coordinates_empty_the_pool() {
        let (spec, frame) = oracle(6);
        let o = &frame.objects[0];
        let mut oc = o.object_coords.clone();
        for p in o.mask.pixels() {
            oc.set(p.u as usize, p.v as usize, Vec3::new(1.0, 2.0, 3.0));
        }
        let obs = RgbdObservation {
            object_coords: &oc,
            depth: &frame.depth,
            mask: &o.mask,
        };
        let params = RgbdPipelineParams {
            max_sampling_attempts: 500,
            ..Default::default()
        };
        assert!(matches!(
            estimate(&obs, &spec.models[0], &frame.intrinsics, &params, 0),
            Err(Error::HypothesisPoolEmpty { .. })
        ));
    }

    #[test]
    fn estimate_is_seed_deterministic() {
        let (spec, frame) = oracle(7);
        let o = &frame.objects[0];
        let obs = RgbdObservation {
            object_coords: &o.object_coords,
            depth: &frame.depth,
            mask: &o.mask,
        };
        let p = RgbdPipelineParams::default();
        let a = estimate(&obs, &spec.models[0], &frame.intrinsics, &p, 11).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b =
            pool.install(|| estimate(&obs, &spec.models[0], &frame.intrinsics, &p, 11).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn params_validation() {
        let bad = RgbdPipelineParams {
            top_k: 300,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(RgbdPipelineParams::default().validate().is_ok());
    }
}
