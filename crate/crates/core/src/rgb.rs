//! Pose estimation from an instance mask and object coordinates alone.
//!
//! Hypotheses are PnP solutions of four random 2D-3D correspondences that
//! reproject within `tau_in`. Pre-emptive RANSAC then scores all survivors
//! on a growing pixel subset, drops the worse half, and re-solves each
//! remaining hypothesis on its inliers, until one is left.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimate::{PoseEstimate, Stage, StageRecord};
use crate::geometry::{
    CameraIntrinsics, InstanceMask, ObjectCoordinateImage, ObjectModel, Pixel, Pose, Vec2, Vec3,
};
use crate::pnp::{solve_pnp, Correspondence2D3D};
use crate::seeding::{derive_seed, stream_rng};

/// Upper bound on the inliers used when re-solving a surviving hypothesis.
pub const MAX_REFINE_INLIERS: usize = 400;
const ROUND_STREAM_LABEL: u64 = 0x726f_756e_6473;

#[derive(Clone, Debug, PartialEq)]
pub struct RgbPipelineParams {
    pub hypothesis_count: usize,
    /// Inlier reprojection threshold in pixels.
    pub tau_in: f64,
    /// Pixel subset size per round. Rounds past the end keep doubling the
    /// last entry. Sizes are clamped to the number of usable pixels.
    pub subsample_schedule: Vec<usize>,
    pub max_sampling_attempts: usize,
}

impl Default for RgbPipelineParams {
    fn default() -> Self {
        Self {
            hypothesis_count: 256,
            tau_in: 3.0,
            subsample_schedule: (0..8).map(|r| 64 << r).collect(),
            max_sampling_attempts: 50 * 256,
        }
    }
}

impl RgbPipelineParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hypothesis_count.is_power_of_two()
            && self.tau_in > 0.0
            && self.max_sampling_attempts > 0
            && !self.subsample_schedule.is_empty()
            && self.subsample_schedule[0] > 0
            && self.subsample_schedule.windows(2).all(|w| w[0] <= w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid RGB parameters {self:?}"
            )))
        }
    }

    /// Subset size of round `r` before clamping.
    pub fn subsample_size(&self, r: usize) -> usize {
        let s = &self.subsample_schedule;
        match s.get(r) {
            Some(n) => *n,
            None => s[s.len() - 1].saturating_mul(1usize << (r + 1 - s.len()).min(32)),
        }
    }
}

/// Masked pixels with a valid object coordinate.
struct Candidates {
    corrs: Vec<Correspondence2D3D>,
}

impl Candidates {
    fn collect(oc: &ObjectCoordinateImage, mask: &InstanceMask) -> Result<Self> {
        if oc.width() != mask.width() || oc.height() != mask.height() {
            return Err(Error::DimensionMismatch(
                "object coordinates vs mask".into(),
            ));
        }
        let corrs = mask
            .pixels()
            .filter_map(|p| {
                oc.get(p.u as usize, p.v as usize)
                    .map(|c| Correspondence2D3D::new(p.to_vec2(), c))
            })
            .collect();
        Ok(Self { corrs })
    }

    fn len(&self) -> usize {
        self.corrs.len()
    }

    fn draw(&self, intr: &CameraIntrinsics, tau: f64, rng: &mut impl Rng) -> Option<Pose> {
        let four: Vec<Correspondence2D3D> = sample(rng, self.len(), 4)
            .iter()
            .map(|i| self.corrs[i])
            .collect();
        let pose = solve_pnp(&four, intr, None).ok()?;
        four.iter()
            .all(|c| is_inlier(&pose, c, intr, tau))
            .then_some(pose)
    }
}

#[inline]
fn is_inlier(pose: &Pose, c: &Correspondence2D3D, intr: &CameraIntrinsics, tau: f64) -> bool {
    let p = pose.apply(&c.object_point);
    p.z > 0.0 && (intr.project_unchecked(&p) - c.pixel).norm() < tau
}

fn count_inliers<'a>(
    pose: &Pose,
    corrs: impl IntoIterator<Item = &'a Correspondence2D3D>,
    intr: &CameraIntrinsics,
    tau: f64,
) -> usize {
    corrs
        .into_iter()
        .filter(|c| is_inlier(pose, c, intr, tau))
        .count()
}

/// Number of evaluated pixels whose object coordinate, transformed by
/// `pose` and projected, lands within `tau_in` pixels of the pixel itself.
/// Evaluates `sample` if given, else every masked pixel with a valid
/// coordinate. Unmasked or invalid pixels in `sample` are skipped.
pub fn score(
    pose: &Pose,
    oc: &ObjectCoordinateImage,
    mask: &InstanceMask,
    intr: &CameraIntrinsics,
    tau_in: f64,
    sample: Option<&[Pixel]>,
) -> Result<usize> {
    let corrs: Vec<Correspondence2D3D> = match sample {
        None => Candidates::collect(oc, mask)?.corrs,
        Some(pixels) => pixels
            .iter()
            .filter(|p| (p.u as usize) < mask.width() && (p.v as usize) < mask.height())
            .filter(|p| mask.get(p.u as usize, p.v as usize))
            .filter_map(|p| {
                oc.get(p.u as usize, p.v as usize)
                    .map(|c| Correspondence2D3D::new(p.to_vec2(), c))
            })
            .collect(),
    };
    Ok(count_inliers(pose, &corrs, intr, tau_in))
}

/// Re-solves PnP from `pose` on its inliers within `subset`. Keeps the
/// original pose unless the re-solved one has at least as many inliers on
/// the same subset.
fn refine_on_inliers(
    pose: &Pose,
    subset: &[Correspondence2D3D],
    intr: &CameraIntrinsics,
    tau: f64,
) -> Pose {
    let inliers: Vec<Correspondence2D3D> = subset
        .iter()
        .filter(|c| is_inlier(pose, c, intr, tau))
        .copied()
        .collect();
    if inliers.len() < 4 {
        return *pose;
    }
    let chosen: Vec<Correspondence2D3D> = if inliers.len() > MAX_REFINE_INLIERS {
        (0..MAX_REFINE_INLIERS)
            .map(|i| inliers[i * inliers.len() / MAX_REFINE_INLIERS])
            .collect()
    } else {
        inliers.clone()
    };
    match solve_pnp(&chosen, intr, Some(pose)) {
        Ok(p) if count_inliers(&p, subset, intr, tau) >= inliers.len() => p,
        _ => *pose,
    }
}

/// Full RGB pipeline for one object instance. Bit-reproducible for a
/// given `seed` regardless of thread count.
pub fn estimate(
    oc: &ObjectCoordinateImage,
    mask: &InstanceMask,
    _model: &ObjectModel,
    intr: &CameraIntrinsics,
    params: &RgbPipelineParams,
    seed: u64,
) -> Result<PoseEstimate> {
    params.validate()?;
    intr.validate()?;
    intr.check_dims(mask.width(), mask.height(), "mask")?;
    let cand = Candidates::collect(oc, mask)?;
    if cand.len() < 4 {
        return Err(Error::InsufficientPixels {
            found: cand.len(),
            needed: 4,
        });
    }
    let tau = params.tau_in;

    let mut pool: Vec<Pose> = Vec::with_capacity(params.hypothesis_count);
    let batch = params.hypothesis_count.max(64);
    let mut next = 0usize;
    while pool.len() < params.hypothesis_count && next < params.max_sampling_attempts {
        let end = (next + batch).min(params.max_sampling_attempts);
        let drawn: Vec<Option<Pose>> = (next..end)
            .into_par_iter()
            .map(|a| cand.draw(intr, tau, &mut stream_rng(seed, a as u64)))
            .collect();
        for pose in drawn.into_iter().flatten() {
            if pool.len() == params.hypothesis_count {
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

    let collected = pool.len();
    let mut trace = vec![StageRecord {
        stage: Stage::Sample,
        pose: pool[0],
        value: pool.len() as f64,
    }];
    let round_seed = derive_seed(seed, ROUND_STREAM_LABEL);
    let mut round = 0usize;
    while pool.len() > 1 {
        let n = params.subsample_size(round).min(cand.len());
        let mut rng = stream_rng(round_seed, round as u64);
        let subset: Vec<Correspondence2D3D> = sample(&mut rng, cand.len(), n)
            .iter()
            .map(|i| cand.corrs[i])
            .collect();
        let counts: Vec<usize> = pool
            .par_iter()
            .map(|h| count_inliers(h, &subset, intr, tau))
            .collect();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
        order.truncate(pool.len().div_ceil(2));
        pool = order
            .par_iter()
            .map(|&i| refine_on_inliers(&pool[i], &subset, intr, tau))
            .collect();
        trace.push(StageRecord {
            stage: Stage::PreemptiveRound(round as u32),
            pose: pool[0],
            value: counts[order[0]] as f64,
        });
        round += 1;
    }

    let pose = pool[0];
    let inliers = count_inliers(&pose, &cand.corrs, intr, tau);
    let final_score = inliers as f64 / cand.len() as f64;
    trace.push(StageRecord {
        stage: Stage::Final,
        pose,
        value: final_score,
    });
    Ok(PoseEstimate {
        pose,
        score: final_score,
        inlier_count: inliers,
        icp_error: None,
        stage_trace: trace,
        hypotheses: collected,
        survivors: Some(pool.len()),
    })
}

/// Projections of `points` under `pose`; `None` for points at or behind
/// the camera plane.
pub fn project_points(points: &[Vec3], pose: &Pose, intr: &CameraIntrinsics) -> Vec<Option<Vec2>> {
    points
        .iter()
        .map(|p| {
            let q = pose.apply(p);
            (q.z > 0.0).then(|| intr.project_unchecked(&q))
        })
        .collect()
}
