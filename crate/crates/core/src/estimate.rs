//! Result types shared by the RGB-D and RGB estimators.

use std::fmt;

use crate::geometry::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Hypothesis sampling. Value: number of hypotheses collected.
    Sample,
    /// Hypothesis ranking. Value: best score.
    Score,
    /// ICP with the model vertices. Value: fitting error (mm).
    Icp,
    /// ICP of the rendered visible surface. Value: fitting error (mm).
    RenderRefine,
    /// One pre-emptive RANSAC round. Value: best inlier count on the
    /// round's pixel subset.
    PreemptiveRound(u32),
    /// Final pose. Value: final score.
    Final,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Sample => f.write_str("sample"),
            Stage::Score => f.write_str("score"),
            Stage::Icp => f.write_str("icp"),
            Stage::RenderRefine => f.write_str("render-refine"),
            Stage::PreemptiveRound(r) => write!(f, "round-{r}"),
            Stage::Final => f.write_str("final"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: Stage,
    pub pose: Pose,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Normalized score of the final pose, in `[0, 1]`.
    pub score: f64,
    /// Number of inlier pixels behind `score`.
    pub inlier_count: usize,
    /// Fitting error of the model-vertex ICP stage (RGB-D only).
    pub icp_error: Option<f64>,
    pub stage_trace: Vec<StageRecord>,
    /// Hypotheses collected before ranking.
    pub hypotheses: usize,
    /// Hypotheses left when pre-emptive RANSAC stopped (RGB only).
    pub survivors: Option<usize>,
}
