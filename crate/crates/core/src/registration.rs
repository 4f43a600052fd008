//! Closed-form rigid alignment, exact nearest-neighbor search, and
//! point-to-point ICP.

use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

/// Ratio of the second to the first covariance singular value below which
/// the source set is treated as collinear.
pub const KABSCH_RANK_RATIO: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence3D {
    /// Object-frame point.
    pub src: Vec3,
    /// Camera-frame point.
    pub dst: Vec3,
}

impl Correspondence3D {
    pub fn new(src: Vec3, dst: Vec3) -> Self {
        Self { src, dst }
    }
}

/// Least-squares rigid transform mapping `src` onto `dst`.
pub fn kabsch_align(corrs: &[Correspondence3D]) -> Result<Pose> {
    kabsch_pairs(corrs.iter().map(|c| (c.src, c.dst)), corrs.len())
}

/// Same as [`kabsch_align`] over two parallel slices.
pub fn kabsch_points(src: &[Vec3], dst: &[Vec3]) -> Result<Pose> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} source vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    kabsch_pairs(src.iter().copied().zip(dst.iter().copied()), src.len())
}

fn kabsch_pairs<I>(pairs: I, n: usize) -> Result<Pose>
where
    I: Iterator<Item = (Vec3, Vec3)> + Clone,
{
    if n < 3 {
        return Err(Error::DegenerateConfiguration(
            "need at least 3 correspondences",
        ));
    }
    if pairs
        .clone()
        .any(|(s, d)| !(s.iter().chain(d.iter()).all(|x| x.is_finite())))
    {
        return Err(Error::InvalidInput("non-finite correspondence".into()));
    }
    let inv_n = 1.0 / n as f64;
    let (sum_s, sum_d) = pairs
        .clone()
        .fold((Vec3::zeros(), Vec3::zeros()), |(a, b), (s, d)| {
            (a + s, b + d)
        });
    let cs = sum_s * inv_n;
    let cd = sum_d * inv_n;

    let mut cov = Matrix3::zeros();
    for (s, d) in pairs {
        cov += (s - cs) * (d - cd).transpose();
    }

    // Singular values come back sorted in decreasing order.
    let svd = SVD::new(cov, true, true);
    let sv = svd.singular_values;
    if !(sv[0] > 0.0) || sv[1] < KABSCH_RANK_RATIO * sv[0] {
        return Err(Error::DegenerateConfiguration(
            "source points are collinear or coincident",
        ));
    }
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::DegenerateConfiguration("SVD did not converge")),
    };
    let v = vt.transpose();
    let ut = u.transpose();
    let d = (v * ut).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * ut;
    let translation = cd - rotation * cs;
    Pose::new(rotation, translation).or_else(|_| Pose::new_orthonormalized(rotation, translation))
}

/// Static 3D kd-tree with median splits. Queries are exact.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Point indices arranged as an implicit balanced tree: the node of a
    /// range `[lo, hi)` sits at its midpoint.
    order: Vec<u32>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axes = vec![0u8; points.len()];
        build_range(points, &mut order, &mut axes, 0);
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Exact nearest neighbor as `(index, distance)`. Equidistant points
    /// resolve to the lowest index.
    pub fn nearest(&self, query: &Vec3) -> Result<(usize, f64)> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut best = (f64::INFINITY, u32::MAX);
        self.search(query, 0, self.order.len(), &mut best);
        Ok((best.1 as usize, best.0.sqrt()))
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (f64, u32)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx as usize];
        let d2 = (p - q).norm_squared();
        if d2 < best.0 || (d2 == best.0 && idx < best.1) {
            *best = (d2, idx);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        // `<=` keeps equidistant candidates reachable for the index tie-break.
        if diff * diff <= best.0 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build_range(points: &[Vec3], order: &mut [u32], axes: &mut [u8], depth: usize) {
    if order.len() <= 1 {
        if let Some(a) = axes.first_mut() {
            *a = (depth % 3) as u8;
        }
        return;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i as usize]);
        hi = hi.sup(&points[i as usize]);
    }
    let axis = (hi - lo).imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    axes[mid] = axis as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (left_axes, rest_axes) = axes.split_at_mut(mid);
    build_range(points, left, left_axes, depth + 1);
    build_range(points, &mut rest[1..], &mut rest_axes[1..], depth + 1);
}

/// Exhaustive nearest neighbor with the same tie rule as [`KdTree::nearest`].
pub fn nearest_neighbor_linear(points: &[Vec3], query: &Vec3) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - query).norm_squared();
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best.map(|(i, d2)| (i, d2.sqrt())).ok_or(Error::EmptyCloud)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    pub rel_change_tolerance: f64,
    /// Pairs farther apart than this (mm) are ignored.
    pub max_pair_distance: f64,
}

impl IcpParams {
    pub const DEFAULT_MAX_ITERATIONS: usize = 50;
    pub const DEFAULT_REL_CHANGE_TOLERANCE: f64 = 1e-6;
    pub const DEFAULT_PAIR_DISTANCE_FRACTION: f64 = 0.2;

    /// Defaults scaled to an object of the given diameter.
    pub fn for_diameter(diameter: f64) -> Self {
        Self {
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
            rel_change_tolerance: Self::DEFAULT_REL_CHANGE_TOLERANCE,
            max_pair_distance: Self::DEFAULT_PAIR_DISTANCE_FRACTION * diameter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1
            || !(self.rel_change_tolerance > 0.0)
            || !(self.max_pair_distance > 0.0)
        {
            return Err(Error::InvalidInput(format!(
                "invalid ICP parameters {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    /// Mean distance of matched pairs under `pose`.
    pub fitting_error: f64,
    pub iterations_run: usize,
    /// Fitting error after initialization and after every accepted update.
    pub error_trace: Vec<f64>,
    pub matched_pairs: usize,
}

/// Point-to-point ICP aligning `source` onto `target`.
pub fn icp(source: &[Vec3], target: &[Vec3], init: &Pose, params: &IcpParams) -> Result<IcpResult> {
    if target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let tree = KdTree::build(target);
    icp_with_index(source, &tree, init, params)
}

/// ICP against a prebuilt target index.
///
/// An update that would raise the fitting error is rejected and ends the
/// loop, so the error trace never increases.
pub fn icp_with_index(
    source: &[Vec3],
    target: &KdTree,
    init: &Pose,
    params: &IcpParams,
) -> Result<IcpResult> {
    params.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut pose = *init;
    let mut state = match_pairs(source, target, &pose, params.max_pair_distance);
    if state.src.is_empty() {
        return Err(Error::NoPairsMatched {
            max_pair_distance: params.max_pair_distance,
        });
    }
    let mut trace = vec![state.error];
    let mut iterations_run = 0;

    for it in 1..=params.max_iterations {
        iterations_run = it;
        let Ok(candidate) = kabsch_points(&state.src, &state.dst) else {
            break;
        };
        let next = match_pairs(source, target, &candidate, params.max_pair_distance);
        if next.src.is_empty() || next.error > state.error {
            break;
        }
        let rel = if state.error > 0.0 {
            (state.error - next.error) / state.error
        } else {
            0.0
        };
        pose = candidate;
        state = next;
        trace.push(state.error);
        if rel < params.rel_change_tolerance {
            break;
        }
    }

    Ok(IcpResult {
        pose,
        fitting_error: state.error,
        iterations_run,
        error_trace: trace,
        matched_pairs: state.src.len(),
    })
}

struct Matches {
    src: Vec<Vec3>,
    dst: Vec<Vec3>,
    error: f64,
}

fn match_pairs(source: &[Vec3], target: &KdTree, pose: &Pose, max_dist: f64) -> Matches {
    let mut src = Vec::with_capacity(source.len());
    let mut dst = Vec::with_capacity(source.len());
    let mut sum = 0.0;
    for s in source {
        let moved = pose.apply(s);
        // Non-empty tree: nearest cannot fail.
        let (j, d) = target.nearest(&moved).expect("non-empty index");
        if d <= max_dist {
            src.push(*s);
            dst.push(target.points()[j]);
            sum += d;
        }
    }
    let error = if src.is_empty() {
        f64::INFINITY
    } else {
        sum / src.len() as f64
    };
    Matches { src, dst, error }
}
