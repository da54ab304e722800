//! Synthetic planted-attention classification task.
//!
//! Every example is an `n1×n2` grid of `f`-dimensional standard-normal
//! features. One cell (the planted cell) additionally carries
//! `signal_strength · (p_c + saliency · u)`: a unit-norm class prototype
//! `p_c` plus a class-agnostic saliency direction `u`. A few clutter cells
//! carry a class-agnostic distractor `signal_strength · d`.
//!
//! Prototypes come from `K` random orthonormal vectors `e_k`; `p_k` is
//! `e_k − mean(e)` renormalized, so the class signal averages to zero across
//! classes, and `u` is the normalized shared part `Σ e_k`, which is orthogonal
//! to every `p_k`. The distractor is orthogonal to all `e_k` when `K < f`.
//! Sum pooling sees the planted signal buried in the noise of every other
//! cell; an attention map that finds the planted cell does not.
//!
//! Randomness: prototypes use stream [`STREAM_PROTOTYPES`]; example `i` of a
//! split uses its own generator seeded by `sub_seed(seed, split_stream, i)`,
//! so examples can be generated independently and in parallel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::atnp::Tensor;
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};
use crate::pose::{PoseTarget, KEYPOINTS};
use crate::rng::{sub_seed, SplitMix64};
use crate::tensor::{grid_cell, grid_loc, Matrix};

pub const STREAM_PROTOTYPES: u64 = 0x5052_4f54;
pub const STREAM_TRAIN: u64 = 0x5452_4149;
pub const STREAM_VAL: u64 = 0x5641_4c00;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTaskConfig {
    pub n1: usize,
    pub n2: usize,
    pub features: usize,
    pub classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub signal_strength: f64,
    /// Weight of the class-agnostic saliency direction in the planted cell.
    pub saliency: f64,
    /// Number of clutter cells per example carrying the distractor pattern.
    pub clutter_classes: usize,
    /// Plant 1–3 cells with distinct classes and multi-hot labels.
    pub multi_label: bool,
    pub seed: u64,
}

impl Default for PlantedTaskConfig {
    fn default() -> Self {
        PlantedTaskConfig {
            n1: 7,
            n2: 7,
            features: 32,
            classes: 8,
            train_size: 2000,
            val_size: 500,
            signal_strength: 3.0,
            saliency: 2.5,
            clutter_classes: 2,
            multi_label: false,
            seed: 7,
        }
    }
}

impl PlantedTaskConfig {
    pub fn locations(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n1", self.n1),
            ("n2", self.n2),
            ("features", self.features),
            ("classes", self.classes),
            ("train_size", self.train_size),
            ("val_size", self.val_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("task.{name} must be positive")));
            }
        }
        if self.classes > self.features {
            return Err(Error::Config(format!(
                "task.classes ({}) exceeds task.features ({}): prototypes would not be distinguishable",
                self.classes, self.features
            )));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::Config("task.signal_strength must be finite and ≥ 0".into()));
        }
        if !(self.saliency >= 0.0 && self.saliency.is_finite()) {
            return Err(Error::Config("task.saliency must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Fixed directions of a task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDirections {
    /// Unit-norm, zero-mean class prototypes (`K×f`).
    pub prototypes: Matrix,
    pub saliency: Vec<f64>,
    pub distractor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// `n×f` feature map, rows in row-major grid order.
    pub x: Matrix,
    /// One label in single-label mode; 1–3 distinct labels in multi-label mode.
    pub labels: Vec<usize>,
    /// Planted cell of each label, same order as `labels`.
    pub planted: Vec<usize>,
    pub pose: Option<PoseTarget>,
}

impl LabeledExample {
    pub fn label(&self) -> usize {
        self.labels[0]
    }

    pub fn planted_loc(&self) -> usize {
        self.planted[0]
    }

    /// Multi-hot label row of length `classes`.
    pub fn label_vector(&self, classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; classes];
        for &l in &self.labels {
            v[l] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: PlantedTaskConfig,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
}

impl Dataset {
    pub fn has_pose_targets(&self) -> bool {
        self.train.iter().chain(&self.val).all(|e| e.pose.is_some())
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for e in basis {
        let proj: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(e).for_each(|(a, b)| *a -= proj * b);
    }
}

fn gaussian_vec(len: usize, rng: &mut SplitMix64) -> Vec<f64> {
    (0..len).map(|_| rng.normal()).collect()
}

/// Draws the prototypes, saliency and distractor directions of a task.
pub fn task_directions(config: &PlantedTaskConfig) -> Result<TaskDirections> {
    config.validate()?;
    let (f, k) = (config.features, config.classes);
    let mut rng = SplitMix64::new(sub_seed(config.seed, STREAM_PROTOTYPES, 0));

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian_vec(f, &mut rng);
        orthogonalize(&mut v, &basis);
        orthogonalize(&mut v, &basis);
        if normalize(&mut v) {
            basis.push(v);
        }
    }
    let mean: Vec<f64> = (0..f)
        .map(|j| basis.iter().map(|e| e[j]).sum::<f64>() / k as f64)
        .collect();
    let mut prototypes = Matrix::zeros(k, f);
    for (c, e) in basis.iter().enumerate() {
        let mut p: Vec<f64> = e.iter().zip(&mean).map(|(a, m)| a - m).collect();
        // With a single class the centered prototype vanishes; it stays zero.
        if normalize(&mut p) {
            for (j, v) in p.into_iter().enumerate() {
                prototypes.set(c, j, v);
            }
        }
    }
    let mut saliency = mean;
    normalize(&mut saliency);

    let mut distractor = loop {
        let mut v = gaussian_vec(f, &mut rng);
        if k < f {
            orthogonalize(&mut v, &basis);
            orthogonalize(&mut v, &basis);
        }
        if normalize(&mut v) {
            break v;
        }
    };
    normalize(&mut distractor);
    Ok(TaskDirections {
        prototypes,
        saliency,
        distractor,
    })
}

fn distinct_draws(rng: &mut SplitMix64, count: usize, bound: usize, exclude: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let available = bound.saturating_sub(exclude.len());
    while out.len() < count.min(available) {
        let v = rng.below(bound);
        if !exclude.contains(&v) && !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn gen_example(config: &PlantedTaskConfig, dirs: &TaskDirections, seed: u64) -> LabeledExample {
    let (n, f, k) = (config.locations(), config.features, config.classes);
    let mut rng = SplitMix64::new(seed);
    let count = if config.multi_label {
        (1 + rng.below(3)).min(k).min(n)
    } else {
        1
    };
    let labels = distinct_draws(&mut rng, count, k, &[]);
    let planted = distinct_draws(&mut rng, count, n, &[]);
    let clutter = distinct_draws(&mut rng, config.clutter_classes, n, &planted);

    let mut x = Matrix::from_fn(n, f, |_, _| rng.normal());
    let s = config.signal_strength;
    for (&label, &loc) in labels.iter().zip(&planted) {
        for j in 0..f {
            let bump = s * (dirs.prototypes.get(label, j) + config.saliency * dirs.saliency[j]);
            x.set(loc, j, x.get(loc, j) + bump);
        }
    }
    for &loc in &clutter {
        for j in 0..f {
            x.set(loc, j, x.get(loc, j) + s * dirs.distractor[j]);
        }
    }
    LabeledExample {
        x,
        labels,
        planted,
        pose: None,
    }
}

/// Generates the train and validation splits of a planted task.
pub fn gen_planted(config: &PlantedTaskConfig, exec: Execution) -> Result<Dataset> {
    let dirs = task_directions(config)?;
    let split = |size: usize, stream: u64| {
        map_indexed(size, exec, |i| {
            gen_example(config, &dirs, sub_seed(config.seed, stream, i as u64))
        })
    };
    Ok(Dataset {
        config: config.clone(),
        train: split(config.train_size, STREAM_TRAIN),
        val: split(config.val_size, STREAM_VAL),
    })
}

/// Grid offsets `(d_row, d_col)` of the 16 synthetic keypoints relative to the
/// planted cell. Keypoint 0 sits on the planted cell itself.
pub const KEYPOINT_OFFSETS: [(i64, i64); KEYPOINTS] = [
    (0, 0),
    (-1, 0),
    (1, 0),
    (0, -1),
    (0, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
    (1, 1),
    (-2, 0),
    (2, 0),
    (0, -2),
    (0, 2),
    (-2, -1),
    (2, 1),
    (-1, 2),
];

/// Gaussian keypoint heatmaps around `planted_loc`. Keypoints that fall off the
/// grid are masked out. `sigma = 0` gives one-hot maps.
pub fn pose_target_for(planted_loc: usize, n1: usize, n2: usize, sigma: f64) -> PoseTarget {
    let (pr, pc) = grid_cell(planted_loc, n2);
    let mut heat = Matrix::zeros(n1 * n2, KEYPOINTS);
    let mut mask = vec![0.0; KEYPOINTS];
    for (kp, &(dr, dc)) in KEYPOINT_OFFSETS.iter().enumerate() {
        let (kr, kc) = (pr as i64 + dr, pc as i64 + dc);
        if kr < 0 || kc < 0 || kr >= n1 as i64 || kc >= n2 as i64 {
            continue;
        }
        mask[kp] = 1.0;
        for r in 0..n1 {
            for c in 0..n2 {
                let d2 = ((r as i64 - kr).pow(2) + (c as i64 - kc).pow(2)) as f64;
                let v = if sigma > 0.0 {
                    (-d2 / (2.0 * sigma * sigma)).exp()
                } else if d2 == 0.0 {
                    1.0
                } else {
                    0.0
                };
                heat.set(grid_loc(r, c, n2), kp, v);
            }
        }
    }
    PoseTarget::new(heat, mask).expect("valid synthetic pose target")
}

/// Attaches pose targets (σ in grid cells) to every example.
pub fn gen_pose_targets(dataset: &mut Dataset, sigma: f64) {
    let (n1, n2) = (dataset.config.n1, dataset.config.n2);
    for ex in dataset.train.iter_mut().chain(dataset.val.iter_mut()) {
        ex.pose = Some(pose_target_for(ex.planted_loc(), n1, n2, sigma));
    }
}

/// One line per example: `index<TAB>label[,label…]<TAB>planted_loc[,loc…]`.
pub fn format_labels(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "{i}\t{}\t{}", join(&ex.labels), join(&ex.planted));
    }
    out
}

/// Parses [`format_labels`] output into `(labels, planted)` per example.
pub fn parse_labels(text: &str) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let parse_list = |s: &str, line: usize| -> Result<Vec<usize>> {
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("label file line {line}: bad integer `{t}`")))
            })
            .collect()
    };
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "label file line {}: expected 3 tab-separated fields, got {}",
                ln + 1,
                fields.len()
            )));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("label file line {}: bad index", ln + 1)))?;
        if idx != out.len() {
            return Err(Error::Format(format!(
                "label file line {}: index {idx} out of order",
                ln + 1
            )));
        }
        let labels = parse_list(fields[1], ln + 1)?;
        let planted = parse_list(fields[2], ln + 1)?;
        if labels.len() != planted.len() {
            return Err(Error::Format(format!(
                "label file line {}: {} labels but {} planted cells",
                ln + 1,
                labels.len(),
                planted.len()
            )));
        }
        out.push((labels, planted));
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

const SPLITS: [&str; 2] = ["train", "val"];

/// Writes `dataset.cfg`, and per split `{split}_features.atnp` (`[m, n1, n2, f]`),
/// `{split}_labels.tsv` and, when present, `{split}_pose.atnp`
/// (`[m, n1, n2, 16]`) plus `{split}_pose_mask.atnp` (`[m, 16]`).
pub fn save_dataset(dataset: &Dataset, dir: &Path, config_text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("dataset.cfg"), config_text.as_bytes())?;
    let c = &dataset.config;
    for (name, examples) in SPLITS.iter().zip([&dataset.train, &dataset.val]) {
        let m = examples.len();
        let data: Vec<f64> = examples.iter().flat_map(|e| e.x.data().iter().copied()).collect();
        Tensor::new(vec![m, c.n1, c.n2, c.features], data)?.save(dir.join(format!("{name}_features.atnp")))?;
        write_file(
            &dir.join(format!("{name}_labels.tsv")),
            format_labels(examples).as_bytes(),
        )?;
        if examples.iter().all(|e| e.pose.is_some()) {
            let pose: Vec<&PoseTarget> = examples.iter().filter_map(|e| e.pose.as_ref()).collect();
            let heat: Vec<f64> = pose.iter().flat_map(|p| p.heatmaps().data().iter().copied()).collect();
            let mask: Vec<f64> = pose.iter().flat_map(|p| p.mask().iter().copied()).collect();
            Tensor::new(vec![m, c.n1, c.n2, KEYPOINTS], heat)?.save(dir.join(format!("{name}_pose.atnp")))?;
            Tensor::new(vec![m, KEYPOINTS], mask)?.save(dir.join(format!("{name}_pose_mask.atnp")))?;
        }
    }
    Ok(())
}

/// Loads the splits written by [`save_dataset`]; `config` must describe the
/// same task (usually parsed from the directory's `dataset.cfg`).
pub fn load_dataset(dir: &Path, config: PlantedTaskConfig) -> Result<Dataset> {
    let mut splits = Vec::new();
    for name in SPLITS {
        let feats = Tensor::load(dir.join(format!("{name}_features.atnp")))?;
        let [m, n1, n2, f] = *feats.dims() else {
            return Err(Error::Format(format!("{name}_features.atnp: expected 4-D tensor")));
        };
        if (n1, n2, f) != (config.n1, config.n2, config.features) {
            return Err(Error::shape(
                "load_dataset",
                &[config.n1, config.n2, config.features],
                &[n1, n2, f],
            ));
        }
        let labels = parse_labels(&read_text(&dir.join(format!("{name}_labels.tsv")))?)?;
        if labels.len() != m {
            return Err(Error::Format(format!(
                "{name}: {m} feature maps but {} label lines",
                labels.len()
            )));
        }
        let pose_path = dir.join(format!("{name}_pose.atnp"));
        let pose = if pose_path.exists() {
            let heat = Tensor::load(&pose_path)?;
            let mask = Tensor::load(dir.join(format!("{name}_pose_mask.atnp")))?;
            if heat.dims() != [m, n1, n2, KEYPOINTS] || mask.dims() != [m, KEYPOINTS] {
                return Err(Error::Format(format!("{name}: pose target dims do not match features")));
            }
            Some((heat, mask))
        } else {
            None
        };
        let mut examples = Vec::with_capacity(m);
        for (i, (slice, (lab, planted))) in feats.outer_slices().zip(labels).enumerate() {
            if lab.iter().any(|&l| l >= config.classes) || planted.iter().any(|&p| p >= n1 * n2) {
                return Err(Error::Format(format!(
                    "{name} example {i}: label or location out of range"
                )));
            }
            let pose = match &pose {
                Some((heat, mask)) => {
                    let hm = heat.outer_slices().nth(i).expect("checked dims");
                    let mk = mask.outer_slices().nth(i).expect("checked dims");
                    Some(PoseTarget::new(
                        Matrix::new(n1 * n2, KEYPOINTS, hm.to_vec())?,
                        mk.to_vec(),
                    )?)
                }
                None => None,
            };
            examples.push(LabeledExample {
                x: Matrix::new(n1 * n2, f, slice.to_vec())?,
                labels: lab,
                planted,
                pose,
            });
        }
        splits.push(examples);
    }
    let val = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(Dataset { config, train, val })
}
