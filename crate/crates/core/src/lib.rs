//! Geometric 6D object pose estimation.
//!
//! Given an instance mask and a per-pixel object-coordinate map for a known
//! object (plus a depth image in the RGB-D case), the estimators in
//! [`rgbd`] and [`rgb`] recover the object's rigid pose by
//! hypothesize-and-verify. Supporting modules provide a software renderer,
//! rigid registration, occlusion-aware augmentation, a synthetic scene
//! oracle, evaluation metrics, and the dataset formats used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod formats;
pub mod geometry;
pub mod meshes;
pub mod pnp;
pub mod registration;
pub mod render;
pub mod rgb;
pub mod rgbd;
pub mod scenes;
pub mod seeding;

pub use error::{Error, Result};
pub use geometry::{
    backproject, CameraIntrinsics, DepthImage, InstanceMask, ObjectCoordinateImage, ObjectModel,
    Pixel, PointCloud, Pose, RgbImage, Vec2, Vec3,
};
