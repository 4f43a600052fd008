//! Flat `key = value` run configuration.
//!
//! Unknown keys are rejected. `#` starts a comment. [`RunConfig::to_text`]
//! writes every key, so a saved configuration reproduces a run exactly.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::augment::{ConeOfInterest, ConeShape};
use crate::error::{Error, Result};
use crate::rgb::RgbPipelineParams;
use crate::rgbd::RgbdPipelineParams;
use crate::scenes::{CorruptionSpec, RandomSceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Rgb,
    Rgbd,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Mode::Rgb),
            "rgbd" => Ok(Mode::Rgbd),
            _ => Err(Error::parse(
                "mode",
                format!("expected rgb or rgbd, got {s:?}"),
            )),
        }
    }
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Rgb => "rgb",
            Mode::Rgbd => "rgbd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// Cluttered free-floating objects.
    Random,
    /// Objects standing on a ground plane.
    Tabletop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub scenes: usize,
    pub kind: SceneKind,
    pub random: RandomSceneConfig,
    pub tabletop_objects: usize,
    pub corruption: CorruptionSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            kind: SceneKind::Random,
            random: RandomSceneConfig::default(),
            tabletop_objects: 1,
            corruption: CorruptionSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub max_normal_angle_deg: f64,
    pub max_occluders: usize,
    pub cone: ConeOfInterest,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_normal_angle_deg: 10.0,
            max_occluders: 2,
            cone: ConeOfInterest::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub rgbd: RgbdPipelineParams,
    pub rgb: RgbPipelineParams,
    pub occlusion_bins: usize,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rgbd,
            seed: 0,
            rgbd: RgbdPipelineParams::default(),
            rgb: RgbPipelineParams::default(),
            occlusion_bins: crate::eval::DEFAULT_OCCLUSION_BINS,
            synth: SynthConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(format!("config key {key}"), format!("bad value {value:?}")))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let v: Vec<f64> = value
        .split_whitespace()
        .map(|x| parse(key, x))
        .collect::<Result<_>>()?;
    match v.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::parse(
            format!("config key {key}"),
            "expected two numbers",
        )),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse("config", format!("line {}: expected key = value", i + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "rgbd.hypothesis_pool_size" => self.rgbd.hypothesis_pool_size = parse(key, v)?,
            "rgbd.top_k" => self.rgbd.top_k = parse(key, v)?,
            "rgbd.consistency_fraction" => self.rgbd.consistency_fraction = parse(key, v)?,
            "rgbd.score_inlier_fraction" => self.rgbd.score_inlier_fraction = parse(key, v)?,
            "rgbd.max_sampling_attempts" => self.rgbd.max_sampling_attempts = parse(key, v)?,
            "rgbd.icp_max_iterations" => self.rgbd.icp_max_iterations = parse(key, v)?,
            "rgbd.icp_rel_change_tolerance" => self.rgbd.icp_rel_change_tolerance = parse(key, v)?,
            "rgbd.icp_pair_distance_fraction" => {
                self.rgbd.icp_pair_distance_fraction = parse(key, v)?
            }
            "rgb.hypothesis_count" => self.rgb.hypothesis_count = parse(key, v)?,
            "rgb.tau_in" => self.rgb.tau_in = parse(key, v)?,
            "rgb.subsample_schedule" => {
                self.rgb.subsample_schedule = v
                    .split_whitespace()
                    .map(|x| parse(key, x))
                    .collect::<Result<_>>()?
            }
            "rgb.max_sampling_attempts" => self.rgb.max_sampling_attempts = parse(key, v)?,
            "eval.occlusion_bins" => self.occlusion_bins = parse(key, v)?,
            "synth.scenes" => self.synth.scenes = parse(key, v)?,
            "synth.kind" => {
                self.synth.kind = match v {
                    "random" => SceneKind::Random,
                    "tabletop" => SceneKind::Tabletop,
                    _ => {
                        return Err(Error::parse(
                            format!("config key {key}"),
                            "expected random or tabletop",
                        ))
                    }
                }
            }
            "synth.min_objects" => self.synth.random.min_objects = parse(key, v)?,
            "synth.max_objects" => self.synth.random.max_objects = parse(key, v)?,
            "synth.depth_range" => self.synth.random.depth_range = parse_pair(key, v)?,
            "synth.max_occlusion" => self.synth.random.max_occlusion = parse(key, v)?,
            "synth.min_visible_pixels" => self.synth.random.min_visible_pixels = parse(key, v)?,
            "synth.tabletop_objects" => self.synth.tabletop_objects = parse(key, v)?,
            "corrupt.oc_noise_sigma" => self.synth.corruption.oc_noise_sigma = parse(key, v)?,
            "corrupt.oc_outlier_fraction" => {
                self.synth.corruption.oc_outlier_fraction = parse(key, v)?
            }
            "corrupt.depth_noise_sigma" => self.synth.corruption.depth_noise_sigma = parse(key, v)?,
            "corrupt.mask_boundary_erosion" => {
                self.synth.corruption.mask_boundary_erosion = parse(key, v)?
            }
            "corrupt.extra_occlusion_fraction" => {
                self.synth.corruption.extra_occlusion_fraction = parse(key, v)?
            }
            "augment.max_normal_angle_deg" => self.augment.max_normal_angle_deg = parse(key, v)?,
            "augment.max_occluders" => self.augment.max_occluders = parse(key, v)?,
            "augment.cone_half_angle_deg" => self.augment.cone.half_angle_deg = parse(key, v)?,
            "augment.cone_shape" => {
                self.augment.cone.shape = match v {
                    "wedge" => ConeShape::PlanarWedge,
                    "solid" => ConeShape::SolidCone,
                    _ => {
                        return Err(Error::parse(
                            format!("config key {key}"),
                            "expected wedge or solid",
                        ))
                    }
                }
            }
            _ => return Err(Error::parse("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.rgbd.validate()?;
        self.rgb.validate()?;
        self.synth.corruption.validate()?;
        if self.occlusion_bins == 0 {
            return Err(Error::InvalidInput(
                "eval.occlusion_bins must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Every key with its current value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r = &self.rgbd;
        let g = &self.rgb;
        let sy = &self.synth;
        let c = &sy.corruption;
        let a = &self.augment;
        let schedule: Vec<String> = g.subsample_schedule.iter().map(|n| n.to_string()).collect();
        let lines: Vec<(&str, String)> = vec![
            ("mode", self.mode.as_str().into()),
            ("seed", self.seed.to_string()),
            (
                "rgbd.hypothesis_pool_size",
                r.hypothesis_pool_size.to_string(),
            ),
            ("rgbd.top_k", r.top_k.to_string()),
            (
                "rgbd.consistency_fraction",
                r.consistency_fraction.to_string(),
            ),
            (
                "rgbd.score_inlier_fraction",
                r.score_inlier_fraction.to_string(),
            ),
            (
                "rgbd.max_sampling_attempts",
                r.max_sampling_attempts.to_string(),
            ),
            ("rgbd.icp_max_iterations", r.icp_max_iterations.to_string()),
            (
                "rgbd.icp_rel_change_tolerance",
                r.icp_rel_change_tolerance.to_string(),
            ),
            (
                "rgbd.icp_pair_distance_fraction",
                r.icp_pair_distance_fraction.to_string(),
            ),
            ("rgb.hypothesis_count", g.hypothesis_count.to_string()),
            ("rgb.tau_in", g.tau_in.to_string()),
            ("rgb.subsample_schedule", schedule.join(" ")),
            (
                "rgb.max_sampling_attempts",
                g.max_sampling_attempts.to_string(),
            ),
            ("eval.occlusion_bins", self.occlusion_bins.to_string()),
            ("synth.scenes", sy.scenes.to_string()),
            (
                "synth.kind",
                match sy.kind {
                    SceneKind::Random => "random".into(),
                    SceneKind::Tabletop => "tabletop".into(),
                },
            ),
            ("synth.min_objects", sy.random.min_objects.to_string()),
            ("synth.max_objects", sy.random.max_objects.to_string()),
            (
                "synth.depth_range",
                format!("{} {}", sy.random.depth_range.0, sy.random.depth_range.1),
            ),
            ("synth.max_occlusion", sy.random.max_occlusion.to_string()),
            (
                "synth.min_visible_pixels",
                sy.random.min_visible_pixels.to_string(),
            ),
            ("synth.tabletop_objects", sy.tabletop_objects.to_string()),
            ("corrupt.oc_noise_sigma", c.oc_noise_sigma.to_string()),
            (
                "corrupt.oc_outlier_fraction",
                c.oc_outlier_fraction.to_string(),
            ),
            ("corrupt.depth_noise_sigma", c.depth_noise_sigma.to_string()),
            (
                "corrupt.mask_boundary_erosion",
                c.mask_boundary_erosion.to_string(),
            ),
            (
                "corrupt.extra_occlusion_fraction",
                c.extra_occlusion_fraction.to_string(),
            ),
            (
                "augment.max_normal_angle_deg",
                a.max_normal_angle_deg.to_string(),
            ),
            ("augment.max_occluders", a.max_occluders.to_string()),
            (
                "augment.cone_half_angle_deg",
                a.cone.half_angle_deg.to_string(),
            ),
            (
                "augment.cone_shape",
                match a.cone.shape {
                    ConeShape::PlanarWedge => "wedge".into(),
                    ConeShape::SolidCone => "solid".into(),
                },
            ),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
