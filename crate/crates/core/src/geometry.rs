//! Rigid transforms, the pinhole camera, and the image/mesh value types
//! shared by the rest of the crate.
//!
//! Units are millimeters for every metric quantity and pixels for image
//! positions. An integer pixel index `(u, v)` is the continuous image
//! coordinate `(u, v)`: pixel centers sit on integer coordinates, no half
//! pixel offset is applied anywhere.

use std::fmt;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, SVD};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid transform from the object frame to the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 (tolerance 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|x| x.is_finite())
        {
            return Err(Error::InvalidInput("pose has non-finite entries".into()));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if err > ORTHONORMAL_TOL || (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation is not a proper orthonormal matrix (orthonormality error {err:e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose from a rotation that is only approximately orthonormal,
    /// projecting it onto the nearest proper rotation.
    pub fn new_orthonormalized(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        Self::new(nearest_rotation(&rotation)?, translation)
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    /// Quaternion input is normalized before use.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64, translation: Vec3) -> Result<Self> {
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() > 0.0) || !q.norm().is_finite() {
            return Err(Error::InvalidInput("zero or non-finite quaternion".into()));
        }
        let unit = UnitQuaternion::from_quaternion(q);
        Ok(Self::from_rotation(unit.to_rotation_matrix(), translation))
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about `axis` by `angle` radians, followed by `translation`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = if axis.norm() == 0.0 || angle == 0.0 {
            Rotation3::identity()
        } else {
            Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle)
        };
        Self::from_rotation(rot, translation)
    }

    /// Exponential map of a rotation vector.
    pub fn from_rotation_vector(omega: &Vec3, translation: Vec3) -> Self {
        Self::from_rotation(Rotation3::new(*omega), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// `R * p + t`.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Result applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Twelve numbers: the rotation in row-major order, then the translation.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        let translation = Vec3::new(v[9], v[10], v[11]);
        match Self::new(rotation, translation) {
            Ok(p) => Ok(p),
            // Text input with limited precision is projected back onto SO(3).
            Err(_) if (rotation.transpose() * rotation - Matrix3::identity()).amax() < 1e-3 => {
                Self::new_orthonormalized(rotation, translation)
            }
            Err(e) => Err(e),
        }
    }

    /// Parses one pose line: twelve whitespace-separated numbers.
    pub fn parse_line(line: &str) -> Result<Self> {
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse("pose", e.to_string()))?;
        let arr: [f64; 12] = values.try_into().map_err(|v: Vec<f64>| {
            Error::parse("pose", format!("expected 12 numbers, got {}", v.len()))
        })?;
        Self::from_row_major(&arr)
    }
}

impl fmt::Display for Pose {
    /// Writes the twelve-number text form; values use the shortest
    /// representation that round-trips exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_row_major();
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

/// Closest proper rotation (Frobenius norm) to an arbitrary 3x3 matrix.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = SVD::new(*m, true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::DegenerateConfiguration("SVD did not converge")),
    };
    let d = (u * vt).determinant().signum();
    Ok(u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt)
}

/// Pinhole camera without distortion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid camera intrinsics {self:?}"
            )))
        }
    }

    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        if !(p.z > 0.0) {
            return Err(Error::NonPositiveDepth(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    /// Projection without the depth check; callers guarantee `p.z > 0`.
    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vec3) -> Vec2 {
        Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame point at image position `(u, v)` and depth `z`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    pub fn contains(&self, px: &Vec2) -> bool {
        px.x >= 0.0
            && px.y >= 0.0
            && px.x <= (self.width - 1) as f64
            && px.y <= (self.height - 1) as f64
    }

    pub(crate) fn check_dims(&self, width: usize, height: usize, what: &str) -> Result<()> {
        if width != self.width || height != self.height {
            return Err(Error::DimensionMismatch(format!(
                "{what} is {width}x{height}, camera is {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Integer pixel index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub u: u32,
    pub v: u32,
}

impl Pixel {
    pub fn new(u: u32, v: u32) -> Self {
        Self { u, v }
    }

    pub fn to_vec2(self) -> Vec2 {
        Vec2::new(self.u as f64, self.v as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    pixels: Option<Vec<Pixel>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput(
                "point cloud contains non-finite coordinates".into(),
            ));
        }
        Ok(Self {
            points,
            pixels: None,
        })
    }

    pub fn with_pixels(points: Vec<Vec3>, pixels: Vec<Pixel>) -> Result<Self> {
        if points.len() != pixels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points but {} pixel indices",
                points.len(),
                pixels.len()
            )));
        }
        let mut cloud = Self::new(points)?;
        cloud.pixels = Some(pixels);
        Ok(cloud)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn pixels(&self) -> Option<&[Pixel]> {
        self.pixels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.apply(p)).collect(),
            pixels: self.pixels.clone(),
        }
    }
}

/// Triangle mesh of a known object class.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    class_id: u32,
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    diameter: f64,
    bbox_min: Vec3,
    bbox_max: Vec3,
}

impl ObjectModel {
    pub fn new(class_id: u32, vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput("mesh has non-finite vertices".into()));
        }
        let n = vertices.len();
        if let Some(t) = triangles
            .iter()
            .find(|t| t.iter().any(|&i| i as usize >= n))
        {
            return Err(Error::InvalidInput(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        if !spans_volume(&vertices) {
            return Err(Error::InvalidInput(
                "mesh needs at least 4 non-coplanar vertices".into(),
            ));
        }
        let diameter = max_pairwise_distance(&vertices);
        let mut bbox_min = Vec3::repeat(f64::INFINITY);
        let mut bbox_max = Vec3::repeat(f64::NEG_INFINITY);
        for v in &vertices {
            bbox_min = bbox_min.inf(v);
            bbox_max = bbox_max.sup(v);
        }
        Ok(Self {
            class_id,
            vertices,
            triangles,
            diameter,
            bbox_min,
            bbox_max,
        })
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn with_class_id(mut self, class_id: u32) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// Maximum pairwise vertex distance.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        (self.bbox_min, self.bbox_max)
    }
}

fn max_pairwise_distance(vertices: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in vertices.iter().enumerate() {
        for b in &vertices[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

fn spans_volume(vertices: &[Vec3]) -> bool {
    if vertices.len() < 4 {
        return false;
    }
    let n = vertices.len() as f64;
    let centroid = vertices.iter().sum::<Vec3>() / n;
    let cov = vertices
        .iter()
        .map(|v| (v - centroid) * (v - centroid).transpose())
        .sum::<Matrix3<f64>>();
    let eig = cov.symmetric_eigenvalues();
    let max = eig.max();
    max > 0.0 && eig.min() > 1e-12 * max
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth buffer has {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidInput(
                "depth values must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    /// Negative or non-finite values are stored as 0 (invalid).
    #[inline]
    pub fn set(&mut self, u: usize, v: usize, z: f64) {
        self.data[v * self.width + u] = if z.is_finite() && z > 0.0 { z } else { 0.0 };
    }
}

/// Per-pixel membership of one object instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
    class_id: u32,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, class_id: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
            class_id,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>, class_id: u32) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} values for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            class_id,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn with_class_id(mut self, class_id: u32) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.data[v * self.width + u] = on;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| Pixel::new((i % w) as u32, (i / w) as u32))
    }

    /// Inclusive pixel bounds `(u0, v0, u1, v1)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for p in self.pixels() {
            let (u, v) = (p.u as usize, p.v as usize);
            bounds = Some(match bounds {
                None => (u, v, u, v),
                Some((a, b, c, d)) => (a.min(u), b.min(v), c.max(u), d.max(v)),
            });
        }
        bounds
    }

    pub fn intersect(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.same_dims(other.width, other.height)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(InstanceMask {
            width: self.width,
            height: self.height,
            data,
            class_id: self.class_id,
        })
    }

    fn same_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{}, other is {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Per-pixel object-frame coordinates. Invalid pixels hold a NaN sentinel.
#[derive(Clone, Debug)]
pub struct ObjectCoordinateImage {
    width: usize,
    height: usize,
    coords: Vec<Vec3>,
    valid: Vec<bool>,
}

impl PartialEq for ObjectCoordinateImage {
    /// Compares dimensions, validity, and coordinates of valid pixels only.
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.valid == other.valid
            && self
                .valid
                .iter()
                .zip(self.coords.iter().zip(&other.coords))
                .all(|(&ok, (a, b))| !ok || a == b)
    }
}

impl ObjectCoordinateImage {
    pub const SENTINEL: f64 = f64::NAN;

    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            coords: vec![Vec3::repeat(Self::SENTINEL); width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<Vec3> {
        let i = v * self.width + u;
        self.valid[i].then(|| self.coords[i])
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: Vec3) {
        let i = v * self.width + u;
        self.coords[i] = c;
        self.valid[i] = true;
    }

    #[inline]
    pub fn invalidate(&mut self, u: usize, v: usize) {
        let i = v * self.width + u;
        self.coords[i] = Vec3::repeat(Self::SENTINEL);
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Drops every valid pixel outside `mask`.
    pub fn restrict_to(&mut self, mask: &InstanceMask) -> Result<()> {
        if mask.width() != self.width || mask.height() != self.height {
            return Err(Error::DimensionMismatch("coordinate image vs mask".into()));
        }
        for v in 0..self.height {
            for u in 0..self.width {
                if self.is_valid(u, v) && !mask.get(u, v) {
                    self.invalidate(u, v);
                }
            }
        }
        Ok(())
    }
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0; 3]; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<[u8; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "rgb image has {} pixels for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[[u8; 3]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [u8; 3] {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: [u8; 3]) {
        self.data[v * self.width + u] = c;
    }
}

/// Backprojects every masked pixel with valid depth into the camera frame.
pub fn backproject(
    intr: &CameraIntrinsics,
    depth: &DepthImage,
    mask: &InstanceMask,
) -> Result<PointCloud> {
    intr.check_dims(depth.width(), depth.height(), "depth image")?;
    intr.check_dims(mask.width(), mask.height(), "mask")?;
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for px in mask.pixels() {
        let z = depth.get(px.u as usize, px.v as usize);
        if z > 0.0 {
            points.push(intr.unproject(px.u as f64, px.v as f64, z));
            pixels.push(px);
        }
    }
    PointCloud::with_pixels(points, pixels)
}

/// Rotation about the camera z axis by `angle` radians.
pub fn rot_z(angle: f64) -> Pose {
    Pose::from_axis_angle(&Vec3::z(), angle, Vec3::zeros())
}
