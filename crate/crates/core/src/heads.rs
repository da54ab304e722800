//! Trainable scoring heads.
//!
//! A [`Model`] is a head kind plus its named parameter tensors. It can score an
//! example directly (through the routines in [`crate::attnpool`],
//! [`crate::pose`] and [`crate::sketch`]) or record the same computation on an
//! autograd [`Tape`] for training.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use crate::attnpool::{
    combined_map_score, per_class_maps, rank_p_maps, score_rank_p, top_down_only_maps, AttentionMaps, AttentionParams,
    PerClassParams,
};
use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::pose::{score_pose_regularized, PoseHeadParams, PoseTarget, ATTENTION_CHANNEL, KEYPOINTS, OUTPUT_CHANNELS};
use crate::rng::SplitMix64;
use crate::sketch::{cbp_pool, signed_sqrt_l2, SketchParams};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Sum pooling followed by a linear classifier (top-down only).
    AvgPool,
    /// Rank-1 attentional pooling with a shared bottom-up vector.
    Attention,
    /// Rank-`P` attentional pooling.
    RankP,
    /// One bottom-up vector per class.
    PerClass,
    /// Bottom-up map from a pose-supervised MLP.
    PoseReg,
    /// Linear classifier on compact bilinear (TensorSketch) features.
    Cbp,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] = [
        HeadKind::AvgPool,
        HeadKind::Attention,
        HeadKind::RankP,
        HeadKind::PerClass,
        HeadKind::PoseReg,
        HeadKind::Cbp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::AvgPool => "avg_pool",
            HeadKind::Attention => "attention",
            HeadKind::RankP => "rank_p",
            HeadKind::PerClass => "per_class",
            HeadKind::PoseReg => "pose_reg",
            HeadKind::Cbp => "cbp",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head kind `{s}`")))
    }
}

/// Everything needed to lay out a head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub features: usize,
    pub classes: usize,
    /// `P` for [`HeadKind::RankP`]; ignored otherwise.
    pub rank: usize,
    /// MLP width for [`HeadKind::PoseReg`].
    pub hidden: usize,
    pub lambda_pose: f64,
    /// Adds a scalar offset to the bottom-up map of the attention head.
    pub bottom_up_bias: bool,
    pub sketch_dim: usize,
    pub sketch_seed: u64,
    pub sketch_normalize: bool,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, features: usize, classes: usize) -> Self {
        HeadConfig {
            kind,
            features,
            classes,
            rank: 1,
            hidden: 128,
            lambda_pose: 0.1,
            bottom_up_bias: false,
            sketch_dim: 128,
            sketch_seed: 0,
            sketch_normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.classes == 0 {
            return Err(Error::Config("features and classes must be positive".into()));
        }
        match self.kind {
            HeadKind::RankP if self.rank == 0 => Err(Error::Config("rank must be ≥ 1".into())),
            HeadKind::PoseReg if self.hidden == 0 => Err(Error::Config("hidden width must be ≥ 1".into())),
            HeadKind::PoseReg if self.lambda_pose.is_nan() || self.lambda_pose < 0.0 => {
                Err(Error::Config("lambda_pose must be ≥ 0".into()))
            }
            HeadKind::Cbp if self.sketch_dim == 0 => Err(Error::Config("sketch_dim must be ≥ 1".into())),
            _ => Ok(()),
        }
    }

    /// Names and on-disk dims of every parameter tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (f, k) = (self.features, self.classes);
        let spec = |name: &str, dims: Vec<usize>| (name.to_string(), dims);
        match self.kind {
            HeadKind::AvgPool => vec![spec("W", vec![f, k])],
            HeadKind::Attention => {
                let mut v = vec![spec("A", vec![f, k]), spec("b", vec![f])];
                if self.bottom_up_bias {
                    v.push(spec("b_bias", vec![1]));
                }
                v
            }
            HeadKind::RankP => {
                let mut v: Vec<_> = (0..self.rank).map(|p| spec(&format!("A{p}"), vec![f, k])).collect();
                v.extend((0..self.rank).map(|p| spec(&format!("b{p}"), vec![f])));
                v
            }
            HeadKind::PerClass => vec![spec("A", vec![f, k]), spec("B", vec![f, k])],
            HeadKind::PoseReg => vec![
                spec("W1", vec![f, self.hidden]),
                spec("bias1", vec![self.hidden]),
                spec("W2", vec![self.hidden, OUTPUT_CHANNELS]),
                spec("bias2", vec![OUTPUT_CHANNELS]),
                spec("A", vec![f, k]),
            ],
            HeadKind::Cbp => vec![spec("W", vec![self.sketch_dim, k])],
        }
    }

    pub fn sketch(&self) -> Result<SketchParams> {
        SketchParams::new(self.features, self.sketch_dim, self.sketch_seed)
    }
}

fn dims_to_matrix(dims: &[usize]) -> (usize, usize) {
    match *dims {
        [n] => (n, 1),
        [r, c] => (r, c),
        _ => unreachable!("parameters are 1-D or 2-D"),
    }
}

/// Per-example input as a head consumes it.
pub type HeadInput<'a> = Cow<'a, Matrix>;

/// Output of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Recorded {
    /// `1×K` class scores.
    pub logits: NodeId,
    /// `n×17` MLP output of the pose head.
    pub pose: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Single-label softmax cross-entropy.
    Softmax,
    /// Multi-label sigmoid cross-entropy.
    Sigmoid,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::Sigmoid => "sigmoid",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "sigmoid" => Ok(LossKind::Sigmoid),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Label information for one example's loss.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub labels: &'a [usize],
    pub pose: Option<&'a PoseTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: HeadConfig,
    params: Vec<Matrix>,
}

impl Model {
    /// Uniform `±1/√fan_in` weights (fan-in is `f`, or `hidden` for `W2`,
    /// or `d` for the sketch classifier); biases start at zero.
    pub fn init(config: HeadConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let params = match config.kind {
            HeadKind::Attention | HeadKind::RankP => {
                let rank = if config.kind == HeadKind::RankP { config.rank } else { 1 };
                let ap = AttentionParams::init(config.features, config.classes, rank, rng);
                let mut v: Vec<Matrix> = ap.top_down_all().to_vec();
                v.extend(
                    ap.bottom_up_all()
                        .iter()
                        .map(|b| Matrix::from_raw(b.len(), 1, b.clone())),
                );
                if config.kind == HeadKind::Attention && config.bottom_up_bias {
                    v.push(Matrix::zeros(1, 1));
                }
                v
            }
            HeadKind::PerClass => {
                let pc = PerClassParams::init(config.features, config.classes, rng);
                vec![pc.top_down().clone(), pc.bottom_up().clone()]
            }
            HeadKind::PoseReg => {
                let p = PoseHeadParams::init(config.features, config.hidden, config.lambda_pose, rng);
                let r = 1.0 / (config.features as f64).sqrt();
                let a = Matrix::from_fn(config.features, config.classes, |_, _| rng.uniform(-r, r));
                vec![
                    p.w1,
                    Matrix::from_raw(config.hidden, 1, p.bias1),
                    p.w2,
                    Matrix::from_raw(OUTPUT_CHANNELS, 1, p.bias2),
                    a,
                ]
            }
            HeadKind::AvgPool | HeadKind::Cbp => {
                let fan_in = if config.kind == HeadKind::Cbp {
                    config.sketch_dim
                } else {
                    config.features
                };
                let r = 1.0 / (fan_in as f64).sqrt();
                vec![Matrix::from_fn(fan_in, config.classes, |_, _| rng.uniform(-r, r))]
            }
        };
        Ok(Model { config, params })
    }

    /// Wraps existing parameters, checking them against the layout.
    pub fn from_params(config: HeadConfig, params: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} head expects {} tensors, got {}",
                config.kind,
                specs.len(),
                params.len()
            )));
        }
        for ((name, dims), p) in specs.iter().zip(&params) {
            let (r, c) = dims_to_matrix(dims);
            if p.dims() != [r, c] {
                let e = Error::shape("Model::from_params", &[r, c], &p.dims());
                return Err(Error::Invalid(format!("tensor {name}: {e}")));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn kind(&self) -> HeadKind {
        self.config.kind
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn attention_params(&self) -> Result<AttentionParams> {
        let rank = match self.kind() {
            HeadKind::Attention => 1,
            HeadKind::RankP => self.config.rank,
            other => return Err(Error::Invalid(format!("{other} head has no attention parameters"))),
        };
        AttentionParams::new(
            self.params[..rank].to_vec(),
            self.params[rank..2 * rank].iter().map(|b| b.data().to_vec()).collect(),
        )
    }

    pub fn per_class_params(&self) -> Result<PerClassParams> {
        if self.kind() != HeadKind::PerClass {
            return Err(Error::Invalid(format!("{} head is not per-class", self.kind())));
        }
        PerClassParams::new(self.params[0].clone(), self.params[1].clone())
    }

    pub fn pose_params(&self) -> Result<(PoseHeadParams, &Matrix)> {
        if self.kind() != HeadKind::PoseReg {
            return Err(Error::Invalid(format!("{} head has no pose MLP", self.kind())));
        }
        let p = &self.params;
        let mlp = PoseHeadParams::new(
            p[0].clone(),
            p[1].data().to_vec(),
            p[2].clone(),
            p[3].data().to_vec(),
            self.config.lambda_pose,
        )?;
        Ok((mlp, &p[4]))
    }

    fn bias(&self) -> Option<f64> {
        (self.kind() == HeadKind::Attention && self.config.bottom_up_bias).then(|| self.params[2].data()[0])
    }

    /// Converts a feature map into the head's input: the pooled (and optionally
    /// normalized) sketch as a `1×d` row for [`HeadKind::Cbp`], `X` itself otherwise.
    pub fn prepare<'a>(&self, x: &'a Matrix) -> Result<HeadInput<'a>> {
        if self.kind() != HeadKind::Cbp {
            return Ok(Cow::Borrowed(x));
        }
        let mut z = cbp_pool(x, &self.config.sketch()?)?;
        if self.config.sketch_normalize {
            z = signed_sqrt_l2(&z);
        }
        Ok(Cow::Owned(Matrix::new(1, z.len(), z)?))
    }

    /// Class scores and attention maps, computed without a tape. `input` comes
    /// from [`Model::prepare`]. The compact bilinear head has no maps.
    pub fn score(&self, input: &Matrix) -> Result<(Vec<f64>, Option<AttentionMaps>)> {
        match self.kind() {
            HeadKind::AvgPool => {
                let maps = top_down_only_maps(input, &self.params[0])?;
                Ok((maps.scores(), Some(maps)))
            }
            HeadKind::Attention => {
                let ap = self.attention_params()?;
                let (mut maps, mut scores) = combined_map_score(input, &ap)?;
                if let Some(c) = self.bias() {
                    let h: Vec<f64> = maps.bottom_up.data().iter().map(|v| v + c).collect();
                    maps.combined = Matrix::from_fn(maps.top_down.rows(), maps.top_down.cols(), |i, k| {
                        maps.top_down.get(i, k) * h[i]
                    });
                    maps.bottom_up = Matrix::from_raw(h.len(), 1, h);
                    scores = maps.scores();
                }
                Ok((scores, Some(maps)))
            }
            HeadKind::RankP => {
                let ap = self.attention_params()?;
                let scores = score_rank_p(input, &ap)?;
                let comps = rank_p_maps(input, &ap)?;
                let combined = AttentionMaps::sum_combined(&comps)?;
                let first = comps.into_iter().next().expect("rank ≥ 1");
                Ok((
                    scores,
                    Some(AttentionMaps {
                        bottom_up: first.bottom_up,
                        top_down: first.top_down,
                        combined,
                    }),
                ))
            }
            HeadKind::PerClass => {
                let maps = per_class_maps(input, &self.per_class_params()?)?;
                Ok((maps.scores(), Some(maps)))
            }
            HeadKind::PoseReg => {
                let (mlp, a) = self.pose_params()?;
                let out = score_pose_regularized(input, &mlp, a)?;
                let t = input.matmul(a)?;
                let h = out.bottom_up;
                let combined = Matrix::from_fn(t.rows(), t.cols(), |i, k| t.get(i, k) * h[i]);
                let maps = AttentionMaps {
                    bottom_up: Matrix::from_raw(h.len(), 1, h),
                    top_down: t,
                    combined,
                };
                Ok((out.scores, Some(maps)))
            }
            HeadKind::Cbp => {
                if input.rows() != 1 {
                    return Err(Error::Invalid("cbp head expects a prepared 1×d sketch".into()));
                }
                Ok((input.matmul(&self.params[0])?.into_data(), None))
            }
        }
    }

    /// Puts the parameters on `tape` as leaves.
    pub fn record_params(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Records the `1×K` logits for `input` using parameter nodes `ids`
    /// (laid out as [`HeadConfig::param_specs`]).
    pub fn record_logits(&self, tape: &mut Tape, input: &Matrix, ids: &[NodeId]) -> Result<Recorded> {
        record_logits(&self.config, tape, input, ids)
    }

    /// Records the full training loss of one example: cross-entropy plus, for
    /// the pose head with a target, `λ·pose_loss`.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        input: &Matrix,
        ids: &[NodeId],
        sup: Supervision<'_>,
        loss: LossKind,
    ) -> Result<NodeId> {
        record_loss(&self.config, tape, input, ids, sup, loss)
    }

    /// Loss value and parameter gradients for one example.
    pub fn loss_and_grads(&self, input: &Matrix, sup: Supervision<'_>, loss: LossKind) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let ids = self.record_params(&mut tape);
        let l = self.record_loss(&mut tape, input, &ids, sup, loss)?;
        tape.backward(l)?;
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).expect("leaf gradient").clone())
            .collect();
        Ok((tape.scalar(l), grads))
    }
}

/// `Xᵀ (X b)` pooled and scored against `A`: returns `1×K` logits.
fn record_attention_logits(tape: &mut Tape, x: NodeId, xt: NodeId, h: NodeId, a: NodeId) -> Result<NodeId> {
    let _ = x;
    let pooled = tape.matmul(xt, h)?;
    let pooled_row = tape.transpose(pooled)?;
    tape.matmul(pooled_row, a)
}

pub fn record_logits(config: &HeadConfig, tape: &mut Tape, input: &Matrix, ids: &[NodeId]) -> Result<Recorded> {
    let n = input.rows();
    let pose = None;
    let logits = match config.kind {
        HeadKind::AvgPool => {
            let pooled = tape.constant(Matrix::from_raw(1, input.cols(), input.col_sums()));
            tape.matmul(pooled, ids[0])?
        }
        HeadKind::Attention | HeadKind::RankP => {
            let rank = if config.kind == HeadKind::RankP { config.rank } else { 1 };
            let x = tape.constant(input.clone());
            let xt = tape.constant(input.transpose());
            let mut total: Option<NodeId> = None;
            for p in 0..rank {
                let mut h = tape.matmul(x, ids[rank + p])?;
                if config.kind == HeadKind::Attention && config.bottom_up_bias {
                    let ones = tape.constant(Matrix::filled(n, 1, 1.0));
                    let offset = tape.matmul(ones, ids[2])?;
                    h = tape.add(h, offset)?;
                }
                let s = record_attention_logits(tape, x, xt, h, ids[p])?;
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            total.expect("rank ≥ 1")
        }
        HeadKind::PerClass => {
            let x = tape.constant(input.clone());
            let t = tape.matmul(x, ids[0])?;
            let h = tape.matmul(x, ids[1])?;
            let c = tape.mul(t, h)?;
            let ones = tape.constant(Matrix::filled(1, n, 1.0));
            tape.matmul(ones, c)?
        }
        HeadKind::PoseReg => {
            let x = tape.constant(input.clone());
            let xt = tape.constant(input.transpose());
            let ones = tape.constant(Matrix::filled(n, 1, 1.0));
            let z = tape.matmul(x, ids[0])?;
            let b1 = tape.transpose(ids[1])?;
            let b1 = tape.matmul(ones, b1)?;
            let z = tape.add(z, b1)?;
            let z = tape.relu(z)?;
            let out = tape.matmul(z, ids[2])?;
            let b2 = tape.transpose(ids[3])?;
            let b2 = tape.matmul(ones, b2)?;
            let out = tape.add(out, b2)?;
            let mut select = Matrix::zeros(OUTPUT_CHANNELS, 1);
            select.set(ATTENTION_CHANNEL, 0, 1.0);
            let select = tape.constant(select);
            let h = tape.matmul(out, select)?;
            let logits = record_attention_logits(tape, x, xt, h, ids[4])?;
            return Ok(Recorded {
                logits,
                pose: Some(out),
            });
        }
        HeadKind::Cbp => {
            if input.rows() != 1 {
                return Err(Error::Invalid("cbp head expects a prepared 1×d sketch".into()));
            }
            let z = tape.constant(input.clone());
            tape.matmul(z, ids[0])?
        }
    };
    Ok(Recorded { logits, pose })
}

/// Records `λ·mean squared error` over visible keypoint channels.
pub fn record_pose_loss(tape: &mut Tape, pred: NodeId, target: &PoseTarget, lambda: f64) -> Result<Option<NodeId>> {
    let visible = target.visible();
    if visible == 0 {
        return Ok(None);
    }
    let n = target.heatmaps().rows();
    let select = tape.constant(Matrix::from_fn(OUTPUT_CHANNELS, KEYPOINTS, |r, c| {
        if r == c {
            1.0
        } else {
            0.0
        }
    }));
    let keypoints = tape.matmul(pred, select)?;
    let goal = tape.constant(target.heatmaps().clone());
    let diff = tape.sub(keypoints, goal)?;
    let mask = tape.constant(target.mask_matrix());
    let masked = tape.mul(diff, mask)?;
    let sq = tape.sum_squares(masked)?;
    Ok(Some(tape.scale(sq, lambda / (n * visible) as f64)?))
}

pub fn record_loss(
    config: &HeadConfig,
    tape: &mut Tape,
    input: &Matrix,
    ids: &[NodeId],
    sup: Supervision<'_>,
    loss: LossKind,
) -> Result<NodeId> {
    let rec = record_logits(config, tape, input, ids)?;
    let class_loss = match loss {
        LossKind::Softmax => tape.softmax_cross_entropy(rec.logits, &sup.labels[..1])?,
        LossKind::Sigmoid => {
            let mut t = Matrix::zeros(1, config.classes);
            for &l in sup.labels {
                t.set(0, l, 1.0);
            }
            tape.sigmoid_cross_entropy(rec.logits, &t)?
        }
    };
    match (rec.pose, sup.pose) {
        (Some(pred), Some(target)) if config.lambda_pose > 0.0 => {
            match record_pose_loss(tape, pred, target, config.lambda_pose)? {
                Some(p) => tape.add(class_loss, p),
                None => Ok(class_loss),
            }
        }
        _ => Ok(class_loss),
    }
}

/// Records compact bilinear logits straight from a feature-map node, so the
/// gradient flows through the sketch into `X`: count sketches as `X S1`,
/// `X S2`, row-wise circular convolution, sum over locations, then `· W`.
pub fn record_cbp_from_features(tape: &mut Tape, x: NodeId, sketch: &SketchParams, w: NodeId) -> Result<NodeId> {
    let (s1, s2) = sketch.projection_matrices();
    let s1 = tape.constant(s1);
    let s2 = tape.constant(s2);
    let c1 = tape.matmul(x, s1)?;
    let c2 = tape.matmul(x, s2)?;
    let ts = tape.circular_conv(c1, c2)?;
    let n = tape.value(x).rows();
    let ones = tape.constant(Matrix::filled(1, n, 1.0));
    let z = tape.matmul(ones, ts)?;
    tape.matmul(z, w)
}
