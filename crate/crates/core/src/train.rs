//! Mini-batch SGD training and evaluation of a scoring head.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::attnpool::{argmax, AttentionMaps};
use crate::autograd::softmax;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind, LossKind, Model, Supervision};
use crate::metrics::{metric_accuracy, metric_map};
use crate::parallel::{map_indexed, Execution};
use crate::rng::{permutation, sub_seed, SplitMix64};
use crate::synth::{Dataset, LabeledExample};
use crate::tensor::Matrix;

const STREAM_INIT: u64 = 0x494e_4954;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub rank: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub lambda_pose: f64,
    pub hidden: usize,
    pub bottom_up_bias: bool,
    pub sketch_dim: usize,
    pub sketch_seed: u64,
    pub sketch_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head: HeadKind::Attention,
            rank: 1,
            learning_rate: 1.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 50,
            seed: 7,
            loss: LossKind::Softmax,
            lambda_pose: 0.1,
            hidden: 128,
            bottom_up_bias: false,
            sketch_dim: 128,
            sketch_seed: 7,
            sketch_normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must be finite and ≥ 0, got {v}")))
            }
        };
        finite_nonneg("learning_rate", self.learning_rate)?;
        finite_nonneg("momentum", self.momentum)?;
        finite_nonneg("weight_decay", self.weight_decay)?;
        finite_nonneg("lambda_pose", self.lambda_pose)?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn head_config(&self, features: usize, classes: usize) -> HeadConfig {
        HeadConfig {
            kind: self.head,
            features,
            classes,
            rank: self.rank,
            hidden: self.hidden,
            lambda_pose: self.lambda_pose,
            bottom_up_bias: self.bottom_up_bias,
            sketch_dim: self.sketch_dim,
            sketch_seed: self.sketch_seed,
            sketch_normalize: self.sketch_normalize,
        }
    }

    /// The initial model for this configuration.
    pub fn init_model(&self, features: usize, classes: usize) -> Result<Model> {
        let mut rng = SplitMix64::new(sub_seed(self.seed, STREAM_INIT, 0));
        Model::init(self.head_config(features, classes), &mut rng)
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Matrix>,
}

impl SgdState {
    pub fn new(params: &[Matrix]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }
}

/// One momentum SGD update: `v ← μ·v + g + λ·p`, `p ← p − η·v`.
pub fn sgd_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut SgdState,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Invalid(format!(
            "sgd_step: {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.dims() != params[i].dims() {
            return Err(Error::shape("sgd_step", &params[i].dims(), &g.dims()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= learning_rate * *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example loss over the epoch's updates.
    pub train_loss: f64,
    /// Validation accuracy (softmax loss) or mAP (sigmoid loss).
    pub val_metric: f64,
    /// `None` for heads without attention maps.
    pub localization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub model: Model,
    pub wall_clock: Duration,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Whether the `window`-epoch moving average of the training loss never
    /// increases.
    pub fn smoothed_loss_nonincreasing(&self, window: usize) -> bool {
        let avg = moving_average(&self.losses(), window);
        avg.windows(2).all(|w| w[1] <= w[0])
    }

    /// One line per epoch: `epoch  train_loss  val_metric  localization_rate`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# epoch\ttrain_loss\tval_metric\tlocalization_rate\n");
        for e in &self.epochs {
            let loc = e.localization.map_or_else(|| "nan".to_string(), |v| v.to_string());
            let _ = writeln!(out, "{}\t{}\t{}\t{}", e.epoch, e.train_loss, e.val_metric, loc);
        }
        out
    }

    /// `key = value` summary of the final epoch. Wall-clock time is left out so
    /// that identical runs produce identical files.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "head = {}", self.config.head);
        let _ = writeln!(out, "epochs = {}", self.epochs.len());
        let metric = match self.config.loss {
            LossKind::Softmax => "accuracy",
            LossKind::Sigmoid => "map",
        };
        let _ = writeln!(out, "metric = {metric}");
        if let Some(last) = self.last() {
            let _ = writeln!(out, "final_train_loss = {}", last.train_loss);
            let _ = writeln!(out, "final_val_metric = {}", last.val_metric);
            if let Some(l) = last.localization {
                let _ = writeln!(out, "final_localization_rate = {l}");
            }
        }
        out
    }
}

pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    if xs.len() < w {
        return Vec::new();
    }
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

fn supervision(example: &LabeledExample) -> Supervision<'_> {
    Supervision {
        labels: &example.labels,
        pose: example.pose.as_ref(),
    }
}

/// Mean loss and gradients of `model` over `batch` (indices into `inputs`).
/// Per-example work may run in parallel; the reduction is always done in the
/// order of `batch`, which training keeps ascending.
pub fn batch_gradient(
    model: &Model,
    inputs: &[Matrix],
    examples: &[LabeledExample],
    batch: &[usize],
    loss: LossKind,
    exec: Execution,
) -> Result<(f64, Vec<Matrix>)> {
    let results = map_indexed(batch.len(), exec, |j| {
        let i = batch[j];
        model.loss_and_grads(&inputs[i], supervision(&examples[i]), loss)
    });
    let mut total = 0.0;
    let mut sum: Option<Vec<Matrix>> = None;
    for r in results {
        let (l, g) = r?;
        total += l;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    a.add_assign(gi)?;
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let grads = sum
        .ok_or_else(|| Error::Invalid("empty batch".into()))?
        .into_iter()
        .map(|g| g.scale(scale))
        .collect();
    Ok((total * scale, grads))
}

/// Inputs as the head consumes them (compact bilinear features are computed
/// once up front).
pub fn prepare_inputs(model: &Model, examples: &[LabeledExample], exec: Execution) -> Result<Vec<Matrix>> {
    map_indexed(examples.len(), exec, |i| {
        model.prepare(&examples[i].x).map(|c| c.into_owned())
    })
    .into_iter()
    .collect()
}

/// Trains from the configuration's initial model.
pub fn train(config: &TrainConfig, dataset: &Dataset, exec: Execution) -> Result<TrainReport> {
    let model = config.init_model(dataset.config.features, dataset.config.classes)?;
    train_from(config, model, dataset, exec)
}

/// Trains `model` on `dataset.train`, evaluating on `dataset.val` after each
/// epoch. Examples are visited in a fresh permutation each epoch seeded by
/// `seed + epoch`; results do not depend on `exec`.
pub fn train_from(config: &TrainConfig, mut model: Model, dataset: &Dataset, exec: Execution) -> Result<TrainReport> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if config.head == HeadKind::PoseReg && !dataset.has_pose_targets() {
        log::warn!("pose_reg head without pose targets: training on classification loss only");
    }
    let start = Instant::now();
    let train_inputs = prepare_inputs(&model, &dataset.train, exec)?;
    let val_inputs = prepare_inputs(&model, &dataset.val, exec)?;
    let mut state = SgdState::new(model.params());
    let mut report = TrainReport {
        config: config.clone(),
        epochs: Vec::with_capacity(config.epochs),
        model: model.clone(),
        wall_clock: Duration::ZERO,
    };

    for epoch in 0..config.epochs {
        let order = permutation(dataset.train.len(), config.seed.wrapping_add(epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let (loss, grads) = batch_gradient(&model, &train_inputs, &dataset.train, &batch, config.loss, exec)?;
            loss_sum += loss * batch.len() as f64;
            let diverged = !loss.is_finite() || grads.iter().any(|g| !g.is_finite());
            if diverged {
                report.model = model;
                report.wall_clock = start.elapsed();
                return Err(Error::Diverged {
                    epoch,
                    report: Box::new(report),
                });
            }
            sgd_step(
                model.params_mut(),
                &grads,
                &mut state,
                config.learning_rate,
                config.momentum,
                config.weight_decay,
            )?;
        }
        let train_loss = loss_sum / dataset.train.len() as f64;
        let params_finite = model.params().iter().all(Matrix::is_finite);
        if !train_loss.is_finite() || !params_finite {
            report.model = model;
            report.wall_clock = start.elapsed();
            return Err(Error::Diverged {
                epoch,
                report: Box::new(report),
            });
        }
        let eval = match evaluate_prepared(&model, &val_inputs, &dataset.val, config.loss, exec) {
            Err(Error::NonFinite(_)) => {
                report.model = model;
                report.wall_clock = start.elapsed();
                return Err(Error::Diverged {
                    epoch,
                    report: Box::new(report),
                });
            }
            other => other?,
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} {} {:.4}",
            eval.metric_name,
            eval.metric
        );
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_metric: eval.metric,
            localization: eval.localization,
        });
    }
    report.model = model;
    report.wall_clock = start.elapsed();
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metric_name: &'static str,
    pub metric: f64,
    /// `m×K` class scores.
    pub scores: Matrix,
    pub maps: Vec<Option<AttentionMaps>>,
    /// Fraction of examples whose true-class combined map peaks in a planted cell.
    pub localization: Option<f64>,
}

impl Evaluation {
    pub fn predicted(&self, i: usize) -> usize {
        argmax(self.scores.row(i))
    }

    /// Examples ranked by how much the full head raises the probability of the
    /// correct class over `baseline` scores (largest gain first).
    pub fn improvement_ranking(&self, baseline: &Matrix, examples: &[LabeledExample]) -> Result<Vec<(usize, f64)>> {
        if baseline.dims() != self.scores.dims() {
            return Err(Error::shape(
                "improvement_ranking",
                &self.scores.dims(),
                &baseline.dims(),
            ));
        }
        let mut gains: Vec<(usize, f64)> = examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let y = e.label();
                (i, softmax(self.scores.row(i))[y] - softmax(baseline.row(i))[y])
            })
            .collect();
        gains.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(gains)
    }
}

/// Scores of each example under the same top-down maps with a uniform
/// bottom-up map, i.e. with attention switched off.
pub fn uniform_attention_scores(eval: &Evaluation) -> Option<Matrix> {
    let m = eval.maps.len();
    let k = eval.scores.cols();
    let mut out = Matrix::zeros(m, k);
    for (i, maps) in eval.maps.iter().enumerate() {
        let sums = maps.as_ref()?.top_down.col_sums();
        for (c, s) in sums.into_iter().enumerate() {
            out.set(i, c, s);
        }
    }
    Some(out)
}

pub fn evaluate(model: &Model, examples: &[LabeledExample], loss: LossKind, exec: Execution) -> Result<Evaluation> {
    let inputs = prepare_inputs(model, examples, exec)?;
    evaluate_prepared(model, &inputs, examples, loss, exec)
}

fn evaluate_prepared(
    model: &Model,
    inputs: &[Matrix],
    examples: &[LabeledExample],
    loss: LossKind,
    exec: Execution,
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let k = model.config().classes;
    let scored = map_indexed(inputs.len(), exec, |i| model.score(&inputs[i]));
    let mut data = Vec::with_capacity(examples.len() * k);
    let mut maps = Vec::with_capacity(examples.len());
    for r in scored {
        let (s, m) = r?;
        data.extend(s);
        maps.push(m);
    }
    let scores = Matrix::new(examples.len(), k, data)?;
    let (metric_name, metric) = match loss {
        LossKind::Softmax => {
            let labels: Vec<usize> = examples.iter().map(LabeledExample::label).collect();
            ("accuracy", metric_accuracy(&scores, &labels)?)
        }
        LossKind::Sigmoid => {
            let labels: Vec<f64> = examples.iter().flat_map(|e| e.label_vector(k)).collect();
            (
                "map",
                metric_map(&scores, &Matrix::new(examples.len(), k, labels)?)?.map,
            )
        }
    };
    let localization = if maps.iter().all(Option::is_some) {
        let hits = maps
            .iter()
            .zip(examples)
            .filter(|(m, e)| {
                let m = m.as_ref().expect("checked above");
                e.planted.contains(&m.peak_location(e.label()))
            })
            .count();
        Some(hits as f64 / examples.len() as f64)
    } else {
        None
    };
    Ok(Evaluation {
        metric_name,
        metric,
        scores,
        maps,
        localization,
    })
}
