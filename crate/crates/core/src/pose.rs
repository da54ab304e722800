//! Pose-regularized attention.
//!
//! A two-layer MLP applied at every location predicts 17 channels: 16
//! keypoint heatmaps supervised with an L2 loss, and a final channel used as
//! an unconstrained (nonlinear) bottom-up attention map. Class scores pair that
//! map with linear top-down maps `X a_k`.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{dot, Matrix};

pub const KEYPOINTS: usize = 16;
pub const OUTPUT_CHANNELS: usize = KEYPOINTS + 1;
/// Index of the channel used as the bottom-up attention map.
pub const ATTENTION_CHANNEL: usize = KEYPOINTS;

/// MLP weights: `relu(X W1 + bias1) W2 + bias2`, no output nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHeadParams {
    pub w1: Matrix,
    pub bias1: Vec<f64>,
    pub w2: Matrix,
    pub bias2: Vec<f64>,
    pub lambda_pose: f64,
}

impl PoseHeadParams {
    pub fn new(w1: Matrix, bias1: Vec<f64>, w2: Matrix, bias2: Vec<f64>, lambda_pose: f64) -> Result<Self> {
        let hidden = w1.cols();
        if bias1.len() != hidden {
            return Err(Error::shape("PoseHeadParams bias1", &w1.dims(), &[bias1.len()]));
        }
        if w2.dims() != [hidden, OUTPUT_CHANNELS] {
            return Err(Error::shape(
                "PoseHeadParams w2",
                &[hidden, OUTPUT_CHANNELS],
                &w2.dims(),
            ));
        }
        if bias2.len() != OUTPUT_CHANNELS {
            return Err(Error::shape("PoseHeadParams bias2", &[OUTPUT_CHANNELS], &[bias2.len()]));
        }
        if !(lambda_pose >= 0.0 && lambda_pose.is_finite()) {
            return Err(Error::Invalid(format!("lambda_pose must be ≥ 0, got {lambda_pose}")));
        }
        Ok(PoseHeadParams {
            w1,
            bias1,
            w2,
            bias2,
            lambda_pose,
        })
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(features: usize, hidden: usize, lambda_pose: f64, rng: &mut SplitMix64) -> Self {
        let r1 = 1.0 / (features as f64).sqrt();
        let r2 = 1.0 / (hidden as f64).sqrt();
        PoseHeadParams {
            w1: Matrix::from_fn(features, hidden, |_, _| rng.uniform(-r1, r1)),
            bias1: vec![0.0; hidden],
            w2: Matrix::from_fn(hidden, OUTPUT_CHANNELS, |_, _| rng.uniform(-r2, r2)),
            bias2: vec![0.0; OUTPUT_CHANNELS],
            lambda_pose,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }
}

/// Keypoint heatmap targets (`n×16`, entries in `[0,1]`) with per-channel
/// visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTarget {
    heatmaps: Matrix,
    mask: Vec<f64>,
}

impl PoseTarget {
    pub fn new(heatmaps: Matrix, mask: Vec<f64>) -> Result<Self> {
        if heatmaps.cols() != KEYPOINTS || mask.len() != KEYPOINTS {
            return Err(Error::shape("PoseTarget", &heatmaps.dims(), &[mask.len()]));
        }
        if heatmaps.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("pose heatmap entries must lie in [0, 1]".into()));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Invalid("pose mask entries must be 0 or 1".into()));
        }
        Ok(PoseTarget { heatmaps, mask })
    }

    pub fn heatmaps(&self) -> &Matrix {
        &self.heatmaps
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn visible(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }

    /// The mask broadcast over locations (`n×16`).
    pub fn mask_matrix(&self) -> Matrix {
        Matrix::from_fn(self.heatmaps.rows(), KEYPOINTS, |_, c| self.mask[c])
    }
}

pub fn pose_head_forward(x: &Matrix, params: &PoseHeadParams) -> Result<Matrix> {
    if x.cols() != params.w1.rows() {
        return Err(Error::shape("pose_head_forward", &x.dims(), &params.w1.dims()));
    }
    let mut hidden = x.matmul(&params.w1)?;
    for r in 0..hidden.rows() {
        for c in 0..hidden.cols() {
            let v = hidden.get(r, c) + params.bias1[c];
            hidden.set(r, c, v.max(0.0));
        }
    }
    let mut out = hidden.matmul(&params.w2)?;
    for r in 0..out.rows() {
        for c in 0..OUTPUT_CHANNELS {
            out.set(r, c, out.get(r, c) + params.bias2[c]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseLoss {
    pub value: f64,
    /// Set when every channel is masked out, so the loss carries no supervision.
    pub unsupervised: bool,
}

/// Mean squared error over visible keypoint channels and all locations; the
/// attention channel is never supervised.
pub fn pose_loss(pred: &Matrix, target: &PoseTarget) -> Result<PoseLoss> {
    let n = target.heatmaps.rows();
    if pred.dims() != [n, OUTPUT_CHANNELS] {
        return Err(Error::shape("pose_loss", &pred.dims(), &[n, OUTPUT_CHANNELS]));
    }
    let visible = target.visible();
    if visible == 0 {
        return Ok(PoseLoss {
            value: 0.0,
            unsupervised: true,
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        for c in 0..KEYPOINTS {
            if target.mask[c] == 1.0 {
                let d = pred.get(i, c) - target.heatmaps.get(i, c);
                total += d * d;
            }
        }
    }
    Ok(PoseLoss {
        value: total / (n * visible) as f64,
        unsupervised: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseScores {
    pub scores: Vec<f64>,
    /// Channel 17 of the MLP output.
    pub bottom_up: Vec<f64>,
    pub prediction: Matrix,
    pub lambda_pose: f64,
}

impl PoseScores {
    /// `classification_loss + λ·pose_loss`.
    pub fn total_loss(&self, classification_loss: f64, target: &PoseTarget) -> Result<f64> {
        let pose = pose_loss(&self.prediction, target)?;
        Ok(classification_loss + self.lambda_pose * pose.value)
    }
}

/// Scores `s_k = (X a_k)ᵀ h` with `h` the MLP's attention channel.
pub fn score_pose_regularized(x: &Matrix, params: &PoseHeadParams, top_down: &Matrix) -> Result<PoseScores> {
    if x.cols() != top_down.rows() {
        return Err(Error::shape("score_pose_regularized", &x.dims(), &top_down.dims()));
    }
    let prediction = pose_head_forward(x, params)?;
    let h = prediction.col(ATTENTION_CHANNEL);
    let t = x.matmul(top_down)?;
    let scores = (0..t.cols()).map(|k| dot(&t.col(k), &h)).collect::<Result<Vec<_>>>()?;
    Ok(PoseScores {
        scores,
        bottom_up: h,
        prediction,
        lambda_pose: params.lambda_pose,
    })
}
