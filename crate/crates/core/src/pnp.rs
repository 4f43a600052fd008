//! Perspective-n-point: closed-form EPnP initialization followed by
//! Levenberg-Marquardt refinement of the reprojection error.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Rotation3, SymmetricEigen, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec2, Vec3};
use crate::registration::kabsch_points;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence2D3D {
    pub pixel: Vec2,
    pub object_point: Vec3,
}

impl Correspondence2D3D {
    pub fn new(pixel: Vec2, object_point: Vec3) -> Self {
        Self {
            pixel,
            object_point,
        }
    }
}

/// Variance ratio below which the object points count as collinear.
const COLLINEAR_RATIO: f64 = 1e-12;
/// Variance ratio below which the object points count as planar.
const PLANAR_RATIO: f64 = 1e-6;
const LM_MAX_ITERATIONS: usize = 100;
const BEHIND_PENALTY: f64 = 1e12;

/// Pose minimizing the squared reprojection error of `corrs`. With `init`
/// the closed-form stage is skipped.
pub fn solve_pnp(
    corrs: &[Correspondence2D3D],
    intr: &CameraIntrinsics,
    init: Option<&Pose>,
) -> Result<Pose> {
    if corrs.len() < 4 {
        return Err(Error::PnpDegenerate("fewer than four correspondences"));
    }
    if corrs.iter().any(|c| {
        !c.object_point
            .iter()
            .chain(c.pixel.iter())
            .all(|x| x.is_finite())
    }) {
        return Err(Error::InvalidInput("non-finite correspondence".into()));
    }
    let start = match init {
        Some(p) => *p,
        None => epnp(corrs, intr)?,
    };
    let pose = refine(corrs, intr, start);
    if corrs.iter().all(|c| pose.apply(&c.object_point).z <= 0.0) {
        return Err(Error::PnpBehindCamera);
    }
    Ok(pose)
}

/// Per-correspondence reprojection distance in pixels; infinite for points
/// at or behind the camera plane.
pub fn reprojection_errors(
    corrs: &[Correspondence2D3D],
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> Vec<f64> {
    corrs
        .iter()
        .map(|c| {
            let p = pose.apply(&c.object_point);
            if p.z <= 0.0 {
                f64::INFINITY
            } else {
                (intr.project_unchecked(&p) - c.pixel).norm()
            }
        })
        .collect()
}

fn mean_squared_error(corrs: &[Correspondence2D3D], intr: &CameraIntrinsics, pose: &Pose) -> f64 {
    let mut sum = 0.0;
    for c in corrs {
        let p = pose.apply(&c.object_point);
        sum += if p.z <= 0.0 {
            BEHIND_PENALTY
        } else {
            (intr.project_unchecked(&p) - c.pixel).norm_squared()
        };
    }
    sum / corrs.len() as f64
}

fn epnp(corrs: &[Correspondence2D3D], intr: &CameraIntrinsics) -> Result<Pose> {
    let n = corrs.len() as f64;
    let centroid = corrs.iter().map(|c| c.object_point).sum::<Vec3>() / n;
    let cov = corrs.iter().fold(Matrix3::zeros(), |acc, c| {
        let d = c.object_point - centroid;
        acc + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let axes: Vec<Vec3> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if lambda[0] <= 0.0 || lambda[1] <= COLLINEAR_RATIO * lambda[0] {
        return Err(Error::PnpDegenerate("collinear object points"));
    }
    let nc = if lambda[2] <= PLANAR_RATIO * lambda[0] {
        3
    } else {
        4
    };

    let mut controls = vec![centroid];
    for k in 0..nc - 1 {
        controls.push(centroid + axes[k] * lambda[k].sqrt());
    }
    let alphas: Vec<Vec<f64>> = corrs
        .iter()
        .map(|c| {
            let d = c.object_point - centroid;
            let mut a = vec![0.0; nc];
            for k in 0..nc - 1 {
                a[k + 1] = axes[k].dot(&d) / lambda[k].sqrt();
            }
            a[0] = 1.0 - a[1..].iter().sum::<f64>();
            a
        })
        .collect();

    let dim = 3 * nc;
    let mut mtm = DMatrix::<f64>::zeros(dim, dim);
    for (c, a) in corrs.iter().zip(&alphas) {
        let mut r1 = DVector::<f64>::zeros(dim);
        let mut r2 = DVector::<f64>::zeros(dim);
        for j in 0..nc {
            r1[3 * j] = a[j] * intr.fx;
            r1[3 * j + 2] = a[j] * (intr.cx - c.pixel.x);
            r2[3 * j + 1] = a[j] * intr.fy;
            r2[3 * j + 2] = a[j] * (intr.cy - c.pixel.y);
        }
        mtm += &r1 * r1.transpose() + &r2 * r2.transpose();
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null: Vec<DVector<f64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..nc)
        .flat_map(|a| (a + 1..nc).map(move |b| (a, b)))
        .collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (controls[a] - controls[b]).norm_squared())
        .collect();
    let block = |v: &DVector<f64>, j: usize| Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]);

    let (max_n, full_n) = if pairs.len() >= 6 { (3, 4) } else { (2, 2) };
    let diffs_for = |big_n: usize| -> Vec<Vec<Vec3>> {
        // diffs[p][k]: difference of the control points of pair p in null vector k.
        pairs
            .iter()
            .map(|&(a, b)| {
                (0..big_n)
                    .map(|k| block(&null[k], a) - block(&null[k], b))
                    .collect()
            })
            .collect()
    };
    let full_diffs = diffs_for(full_n);
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for big_n in 1..=max_n {
        let diffs = diffs_for(big_n);
        let Some(mut betas) = linearized_betas(&diffs, &rho, big_n) else {
            continue;
        };
        gauss_newton_betas(&diffs, &rho, &mut betas);
        let mut padded = betas.clone();
        padded.resize(full_n, 0.0);
        gauss_newton_betas(&full_diffs, &rho, &mut padded);
        candidates.push(betas);
        candidates.push(padded);
    }

    let object_points: Vec<Vec3> = corrs.iter().map(|c| c.object_point).collect();
    let mut best: Option<(f64, Pose)> = None;
    for betas in &candidates {
        let cam_controls: Vec<Vec3> = (0..nc)
            .map(|j| {
                betas
                    .iter()
                    .enumerate()
                    .map(|(k, b)| block(&null[k], j) * *b)
                    .sum()
            })
            .collect();
        let mut cam_points: Vec<Vec3> = alphas
            .iter()
            .map(|a| (0..nc).map(|j| cam_controls[j] * a[j]).sum())
            .collect();
        if cam_points.iter().map(|p| p.z).sum::<f64>() < 0.0 {
            cam_points.iter_mut().for_each(|p| *p = -*p);
        }
        let Ok(pose) = kabsch_points(&object_points, &cam_points) else {
            continue;
        };
        let err = mean_squared_error(corrs, intr, &pose);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
        .ok_or(Error::PnpDegenerate("rank-deficient linear system"))
}

/// Solves for the products of betas by linear least squares and reads off
/// the betas themselves.
fn linearized_betas(diffs: &[Vec<Vec3>], rho: &[f64], big_n: usize) -> Option<Vec<f64>> {
    let terms: Vec<(usize, usize)> = (0..big_n)
        .flat_map(|k| (k..big_n).map(move |l| (k, l)))
        .collect();
    let mut l = DMatrix::<f64>::zeros(diffs.len(), terms.len());
    for (p, d) in diffs.iter().enumerate() {
        for (t, &(k, m)) in terms.iter().enumerate() {
            let w = if k == m { 1.0 } else { 2.0 };
            l[(p, t)] = w * d[k].dot(&d[m]);
        }
    }
    let x = l
        .svd(true, true)
        .solve(&DVector::from_column_slice(rho), 1e-12)
        .ok()?;
    let b0 = x[0].abs().sqrt();
    if !(b0 > 0.0) {
        return None;
    }
    let mut betas = vec![b0];
    // x[t] for t < big_n with k = 0 holds beta_0 * beta_t.
    for t in 1..big_n {
        betas.push(x[t] / b0);
    }
    Some(betas)
}

fn gauss_newton_betas(diffs: &[Vec<Vec3>], rho: &[f64], betas: &mut [f64]) {
    let n = betas.len();
    for _ in 0..10 {
        let mut jac = DMatrix::<f64>::zeros(diffs.len(), n);
        let mut res = DVector::<f64>::zeros(diffs.len());
        for (p, d) in diffs.iter().enumerate() {
            let v: Vec3 = (0..n).map(|k| d[k] * betas[k]).sum();
            res[p] = v.norm_squared() - rho[p];
            for k in 0..n {
                jac[(p, k)] = 2.0 * v.dot(&d[k]);
            }
        }
        let Ok(step) = jac.svd(true, true).solve(&(-res), 1e-12) else {
            return;
        };
        for k in 0..n {
            betas[k] += step[k];
        }
        if step.norm() < 1e-12 * betas.iter().map(|b| b.abs()).sum::<f64>() {
            return;
        }
    }
}

fn refine(corrs: &[Correspondence2D3D], intr: &CameraIntrinsics, start: Pose) -> Pose {
    let mut pose = start;
    let mut cost = mean_squared_error(corrs, intr, &pose);
    let mut lambda = 1e-3;
    for _ in 0..LM_MAX_ITERATIONS {
        if cost < 1e-24 {
            break;
        }
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corrs {
            let rx = pose.rotation() * c.object_point;
            let p = rx + pose.translation();
            if p.z <= 0.0 {
                continue;
            }
            let proj = intr.project_unchecked(&p);
            let r = proj - c.pixel;
            let iz = 1.0 / p.z;
            let du = Vec3::new(intr.fx * iz, 0.0, -intr.fx * p.x * iz * iz);
            let dv = Vec3::new(0.0, intr.fy * iz, -intr.fy * p.y * iz * iz);
            // d p / d omega = -[rx]x, so row . (-[rx]x) = rx x row.
            let w = rx.cross(&du);
            let ju = Vector6::new(w.x, w.y, w.z, du.x, du.y, du.z);
            let w = rx.cross(&dv);
            let jv = Vector6::new(w.x, w.y, w.z, dv.x, dv.y, dv.z);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * r.x + jv * r.y;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * (jtj[(i, i)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vec3::new(step[0], step[1], step[2]);
            let rot = Rotation3::new(omega) * Rotation3::from_matrix_unchecked(*pose.rotation());
            let cand = Pose::from_rotation(
                rot,
                pose.translation() + Vec3::new(step[3], step[4], step[5]),
            );
            let c = mean_squared_error(corrs, intr, &cand);
            if c < cost {
                let rel = (cost - c) / cost;
                pose = cand;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::default_intrinsics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gt_pose() -> Pose {
        Pose::from_axis_angle(
            &Vec3::new(0.3, -1.0, 0.4),
            0.7,
            Vec3::new(20.0, -15.0, 800.0),
        )
    }

    fn synth(points: &[Vec3], pose: &Pose) -> Vec<Correspondence2D3D> {
        let intr = default_intrinsics();
        points
            .iter()
            .map(|p| Correspondence2D3D::new(intr.project(&pose.apply(p)).unwrap(), *p))
            .collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                )
            })
            .collect()
    }

    #[test]
    fn six_exact_correspondences() {
        let intr = default_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corrs = synth(&random_points(&mut rng, 6), &gt_pose());
        let pose = solve_pnp(&corrs, &intr, None).unwrap();
        let errs = reprojection_errors(&corrs, &intr, &pose);
        assert!(errs.iter().all(|e| *e < 1e-4), "{errs:?}");
    }

    #[test]
    fn minimal_and_planar_sets() {
        let intr = default_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ok = 0;
        for _ in 0..50 {
            let corrs = synth(&random_points(&mut rng, 4), &gt_pose());
            let pose = solve_pnp(&corrs, &intr, None).unwrap();
            if reprojection_errors(&corrs, &intr, &pose)
                .iter()
                .all(|e| *e < 1e-3)
            {
                ok += 1;
            }
        }
        assert!(ok >= 45, "{ok}/50");
        let planar: Vec<Vec3> = (0..8)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    0.0,
                )
            })
            .collect();
        let corrs = synth(&planar, &gt_pose());
        let pose = solve_pnp(&corrs, &intr, None).unwrap();
        assert!(pose.rotation_angle_to(&gt_pose()) < 1e-6);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let intr = default_intrinsics();
        let pts: Vec<Vec3> = (0..4)
            .map(|i| Vec3::new(i as f64 * 10.0, i as f64 * 5.0, 0.0))
            .collect();
        let corrs = synth(&pts, &gt_pose());
        assert!(matches!(
            solve_pnp(&corrs, &intr, None),
            Err(Error::PnpDegenerate(_))
        ));
    }

    #[test]
    fn noisy_correspondences() {
        let intr = default_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut corrs = synth(&random_points(&mut rng, 200), &gt_pose());
        let noise = Normal::new(0.0, 0.5).unwrap();
        for c in &mut corrs {
            c.pixel += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
        let pose = solve_pnp(&corrs, &intr, None).unwrap();
        let errs = reprojection_errors(&corrs, &intr, &pose);
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean <= 1.0, "{mean}");
    }

    #[test]
    fn refines_from_init() {
        let intr = default_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corrs = synth(&random_points(&mut rng, 30), &gt_pose());
        let init =
            Pose::from_axis_angle(&Vec3::new(1.0, 0.0, 0.0), 0.05, Vec3::new(5.0, 0.0, 20.0))
                .compose(&gt_pose());
        let pose = solve_pnp(&corrs, &intr, Some(&init)).unwrap();
        assert!(pose.rotation_angle_to(&gt_pose()) < 1e-6);
        assert!(pose.translation_distance_to(&gt_pose()) < 1e-4);
    }

    #[test]
    fn init_behind_camera_is_reported() {
        let intr = default_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corrs = synth(&random_points(&mut rng, 10), &gt_pose());
        let behind = Pose::from_translation(Vec3::new(0.0, 0.0, -2000.0));
        assert!(matches!(
            solve_pnp(&corrs, &intr, Some(&behind)),
            Err(Error::PnpBehindCamera)
        ));
    }
}
