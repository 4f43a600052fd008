//! Procedural test meshes: boxes, spheres, and seeded irregular blobs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{ObjectModel, Vec3};

/// Box centered at the origin with each face split into `subdiv`²
/// quads. Faces do not share vertices.
pub fn cuboid(class_id: u32, sx: f64, sy: f64, sz: f64, subdiv: usize) -> ObjectModel {
    let n = subdiv.max(1);
    let half = Vec3::new(sx, sy, sz) * 0.5;
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    // (normal axis, sign): the face spans the two remaining axes.
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let base = verts.len() as u32;
            for i in 0..=n {
                for j in 0..=n {
                    let mut p = Vec3::zeros();
                    p[axis] = sign * half[axis];
                    p[a] = -half[a] + 2.0 * half[a] * i as f64 / n as f64;
                    p[b] = -half[b] + 2.0 * half[b] * j as f64 / n as f64;
                    verts.push(p);
                }
            }
            let idx = |i: usize, j: usize| base + (i * (n + 1) + j) as u32;
            for i in 0..n {
                for j in 0..n {
                    let (q0, q1, q2, q3) =
                        (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                    if sign > 0.0 {
                        tris.push([q0, q1, q2]);
                        tris.push([q0, q2, q3]);
                    } else {
                        tris.push([q0, q2, q1]);
                        tris.push([q0, q3, q2]);
                    }
                }
            }
        }
    }
    ObjectModel::new(class_id, verts, tris).expect("cuboid is a valid mesh")
}

pub fn uv_sphere(class_id: u32, radius: f64, stacks: usize, slices: usize) -> ObjectModel {
    radial_mesh(class_id, stacks, slices, |_, _| radius, Vec3::repeat(1.0))
}

/// Star-shaped irregular solid of roughly `radius` mm: a sphere with
/// seeded low-order radial harmonics and anisotropic scaling. Has no
/// rotational symmetry for generic seeds.
pub fn blob(class_id: u32, radius: f64, seed: u64, stacks: usize, slices: usize) -> ObjectModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b10b);
    let amp: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.06..0.16));
    let phase: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let scale = Vec3::new(
        rng.random_range(0.75..1.25),
        rng.random_range(0.75..1.25),
        rng.random_range(0.75..1.25),
    );
    let r = move |theta: f64, phi: f64| {
        let (st, ct) = theta.sin_cos();
        let f = amp[0] * st * (phi + phase[0]).cos()
            + amp[1] * st * st * (2.0 * phi + phase[1]).cos()
            + amp[2] * ct * (1.0 + 0.5 * (phase[2]).cos())
            + amp[3] * st * ct * (phi + phase[3]).cos()
            + amp[4] * st * st * st * (3.0 * phi + phase[4]).cos();
        radius * (1.0 + f)
    };
    radial_mesh(class_id, stacks, slices, r, scale)
}

fn radial_mesh(
    class_id: u32,
    stacks: usize,
    slices: usize,
    radius: impl Fn(f64, f64) -> f64,
    scale: Vec3,
) -> ObjectModel {
    let stacks = stacks.max(3);
    let slices = slices.max(3);
    let point = |theta: f64, phi: f64| {
        let r = radius(theta, phi);
        let dir = Vec3::new(
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        );
        (dir * r).component_mul(&scale)
    };
    let mut verts = vec![point(0.0, 0.0)];
    for i in 1..stacks {
        let theta = PI * i as f64 / stacks as f64;
        for j in 0..slices {
            verts.push(point(theta, 2.0 * PI * j as f64 / slices as f64));
        }
    }
    verts.push(point(PI, 0.0));
    let south = (verts.len() - 1) as u32;
    let ring = |i: usize, j: usize| (1 + (i - 1) * slices + j % slices) as u32;
    let mut tris = Vec::new();
    for j in 0..slices {
        tris.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            let (a, b, c, d) = (
                ring(i, j),
                ring(i + 1, j),
                ring(i + 1, j + 1),
                ring(i, j + 1),
            );
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    for j in 0..slices {
        tris.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    ObjectModel::new(class_id, verts, tris).expect("radial mesh is a valid mesh")
}
