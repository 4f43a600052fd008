//! Software z-buffer rasterizer for the geometry channels of a posed mesh:
//! depth, coverage mask, and object coordinates of the visible surface.
//!
//! A pixel is covered when its center lies inside the projected triangle.
//! Pixels exactly on an edge belong to the triangle for which that edge is
//! a top or left edge, so triangles sharing an edge never both claim (or
//! both miss) a pixel on it. Depth and object coordinates use
//! perspective-correct interpolation, which places every written sample
//! exactly on the triangle along the pixel's viewing ray. Triangles are
//! clipped against the near plane `z = NEAR_PLANE`. There is no back-face
//! culling.

use crate::error::{Error, Result};
use crate::geometry::{
    CameraIntrinsics, DepthImage, InstanceMask, ObjectCoordinateImage, ObjectModel, Pixel,
    PointCloud, Pose, Vec3,
};

/// Near clipping distance in millimeters.
pub const NEAR_PLANE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub depth: DepthImage,
    pub mask: InstanceMask,
    pub object_coords: Option<ObjectCoordinateImage>,
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub u0: usize,
    pub v0: usize,
    pub u1: usize,
    pub v1: usize,
}

impl PixelRect {
    pub fn full(intr: &CameraIntrinsics) -> Self {
        Self {
            u0: 0,
            v0: 0,
            u1: intr.width - 1,
            v1: intr.height - 1,
        }
    }

    pub fn of_mask(mask: &InstanceMask) -> Option<Self> {
        mask.bounding_box()
            .map(|(u0, v0, u1, v1)| Self { u0, v0, u1, v1 })
    }

    pub fn width(&self) -> usize {
        self.u1 - self.u0 + 1
    }

    pub fn height(&self) -> usize {
        self.v1 - self.v0 + 1
    }
}

/// Depth (0 = uncovered) and optional object coordinates over a sub-window
/// of the image. Values are identical to the corresponding pixels of a full
/// frame render.
#[derive(Clone, Debug)]
pub struct WindowRender {
    pub rect: PixelRect,
    pub depth: Vec<f64>,
    pub coords: Option<Vec<Vec3>>,
}

impl WindowRender {
    /// Depth at an absolute pixel; 0 outside the window or when uncovered.
    #[inline]
    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        let r = &self.rect;
        if u < r.u0 || u > r.u1 || v < r.v0 || v > r.v1 {
            return 0.0;
        }
        self.depth[(v - r.v0) * r.width() + (u - r.u0)]
    }

    #[inline]
    pub fn coord_at(&self, u: usize, v: usize) -> Option<Vec3> {
        let d = self.depth_at(u, v);
        if d <= 0.0 {
            return None;
        }
        let r = &self.rect;
        self.coords
            .as_ref()
            .map(|c| c[(v - r.v0) * r.width() + (u - r.u0)])
    }

    pub fn covered_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }
}

pub fn render(
    model: &ObjectModel,
    pose: &Pose,
    intr: &CameraIntrinsics,
    want_coords: bool,
) -> Result<RenderOutput> {
    intr.validate()?;
    let win = render_window(model, pose, intr, PixelRect::full(intr), want_coords);
    if win.covered_count() == 0 {
        return Err(Error::NothingVisible);
    }
    Ok(into_output(win, intr, model.class_id()))
}

fn into_output(win: WindowRender, intr: &CameraIntrinsics, class_id: u32) -> RenderOutput {
    let (w, h) = (intr.width, intr.height);
    let mut depth = DepthImage::new(w, h);
    let mut mask = InstanceMask::new(w, h, class_id);
    let mut oc = win
        .coords
        .as_ref()
        .map(|_| ObjectCoordinateImage::new(w, h));
    for v in win.rect.v0..=win.rect.v1 {
        for u in win.rect.u0..=win.rect.u1 {
            let z = win.depth_at(u, v);
            if z > 0.0 {
                depth.set(u, v, z);
                mask.set(u, v, true);
                if let (Some(oc), Some(c)) = (oc.as_mut(), win.coord_at(u, v)) {
                    oc.set(u, v, c);
                }
            }
        }
    }
    RenderOutput {
        depth,
        mask,
        object_coords: oc,
    }
}

/// Rasterizes only the pixels inside `rect`. Never fails; an empty result
/// has no covered pixels.
pub fn render_window(
    model: &ObjectModel,
    pose: &Pose,
    intr: &CameraIntrinsics,
    rect: PixelRect,
    want_coords: bool,
) -> WindowRender {
    let mut win = WindowRender {
        rect,
        depth: vec![0.0; rect.width() * rect.height()],
        coords: want_coords.then(|| vec![Vec3::zeros(); rect.width() * rect.height()]),
    };
    let cam: Vec<Vec3> = model.vertices().iter().map(|v| pose.apply(v)).collect();
    let obj = model.vertices();
    let mut poly: Vec<ClipVertex> = Vec::with_capacity(4);
    for tri in model.triangles() {
        let verts = tri.map(|i| ClipVertex {
            cam: cam[i as usize],
            obj: obj[i as usize],
        });
        if verts.iter().all(|v| v.cam.z < NEAR_PLANE) {
            continue;
        }
        poly.clear();
        clip_near(&verts, &mut poly);
        for k in 1..poly.len().saturating_sub(1) {
            raster_triangle(&[poly[0], poly[k], poly[k + 1]], intr, &mut win);
        }
    }
    win
}

#[derive(Clone, Copy, Debug)]
struct ClipVertex {
    cam: Vec3,
    obj: Vec3,
}

/// Sutherland-Hodgman against `z >= NEAR_PLANE`.
fn clip_near(tri: &[ClipVertex; 3], out: &mut Vec<ClipVertex>) {
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = a.cam.z >= NEAR_PLANE;
        let b_in = b.cam.z >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.cam.z) / (b.cam.z - a.cam.z);
            let mut cam = a.cam + (b.cam - a.cam) * t;
            cam.z = NEAR_PLANE;
            out.push(ClipVertex {
                cam,
                obj: a.obj + (b.obj - a.obj) * t,
            });
        }
    }
}

#[inline]
fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Owner rule for pixels exactly on an edge. An edge shared by two
/// consistently oriented triangles is traversed in opposite directions, so
/// exactly one of them owns it.
#[inline]
fn owns_edge(dx: f64, dy: f64) -> bool {
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

fn raster_triangle(tri: &[ClipVertex; 3], intr: &CameraIntrinsics, win: &mut WindowRender) {
    let mut s = [[0.0f64; 2]; 3];
    let mut inv_z = [0.0f64; 3];
    for k in 0..3 {
        let c = &tri[k].cam;
        s[k] = [intr.fx * c.x / c.z + intr.cx, intr.fy * c.y / c.z + intr.cy];
        inv_z[k] = 1.0 / c.z;
    }
    let mut order = [0usize, 1, 2];
    let mut area = edge(s[0][0], s[0][1], s[1][0], s[1][1], s[2][0], s[2][1]);
    if !(area.abs() > 0.0) || !area.is_finite() {
        return;
    }
    if area < 0.0 {
        order = [0, 2, 1];
        area = -area;
    }
    let [i0, i1, i2] = order;
    let (p0, p1, p2) = (s[i0], s[i1], s[i2]);

    let min_x = p0[0].min(p1[0]).min(p2[0]).ceil().max(win.rect.u0 as f64);
    let max_x = p0[0].max(p1[0]).max(p2[0]).floor().min(win.rect.u1 as f64);
    let min_y = p0[1].min(p1[1]).min(p2[1]).ceil().max(win.rect.v0 as f64);
    let max_y = p0[1].max(p1[1]).max(p2[1]).floor().min(win.rect.v1 as f64);
    if min_x > max_x || min_y > max_y {
        return;
    }

    let own12 = owns_edge(p2[0] - p1[0], p2[1] - p1[1]);
    let own20 = owns_edge(p0[0] - p2[0], p0[1] - p2[1]);
    let own01 = owns_edge(p1[0] - p0[0], p1[1] - p0[1]);
    let inside = |e: f64, own: bool| e > 0.0 || (e == 0.0 && own);

    let (z0, z1, z2) = (inv_z[i0], inv_z[i1], inv_z[i2]);
    let (o0, o1, o2) = (tri[i0].obj * z0, tri[i1].obj * z1, tri[i2].obj * z2);
    let row_w = win.rect.width();
    let inv_area = 1.0 / area;

    for v in (min_y as usize)..=(max_y as usize) {
        let py = v as f64;
        for u in (min_x as usize)..=(max_x as usize) {
            let px = u as f64;
            let e0 = edge(p1[0], p1[1], p2[0], p2[1], px, py);
            let e1 = edge(p2[0], p2[1], p0[0], p0[1], px, py);
            let e2 = edge(p0[0], p0[1], p1[0], p1[1], px, py);
            if !(inside(e0, own12) && inside(e1, own20) && inside(e2, own01)) {
                continue;
            }
            let (l0, l1, l2) = (e0 * inv_area, e1 * inv_area, e2 * inv_area);
            let iz = l0 * z0 + l1 * z1 + l2 * z2;
            if !(iz > 0.0) {
                continue;
            }
            let z = 1.0 / iz;
            let idx = (v - win.rect.v0) * row_w + (u - win.rect.u0);
            let cur = win.depth[idx];
            if cur > 0.0 && z >= cur {
                continue;
            }
            win.depth[idx] = z;
            if let Some(coords) = win.coords.as_mut() {
                coords[idx] = (o0 * l0 + o1 * l1 + o2 * l2) * z;
            }
        }
    }
}

/// Camera-frame cloud of the visible surface, optionally limited to the
/// pixels of `restrict_to`. Carries pixel provenance.
pub fn visible_surface_cloud(
    model: &ObjectModel,
    pose: &Pose,
    intr: &CameraIntrinsics,
    restrict_to: Option<&InstanceMask>,
) -> Result<PointCloud> {
    intr.validate()?;
    let rect = match restrict_to {
        Some(m) => {
            intr.check_dims(m.width(), m.height(), "restriction mask")?;
            PixelRect::of_mask(m).ok_or(Error::NothingVisible)?
        }
        None => PixelRect::full(intr),
    };
    let win = render_window(model, pose, intr, rect, false);
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in rect.v0..=rect.v1 {
        for u in rect.u0..=rect.u1 {
            let z = win.depth_at(u, v);
            if z > 0.0 && restrict_to.is_none_or(|m| m.get(u, v)) {
                points.push(intr.unproject(u as f64, v as f64, z));
                pixels.push(Pixel::new(u as u32, v as u32));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::NothingVisible);
    }
    PointCloud::with_pixels(points, pixels)
}
