//! Built-in verification suite: scoring identities against the explicit
//! second-order oracle, gradient checks, sketch unbiasedness, operation
//! counts and determinism of every artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::atnp::Tensor;
use crate::attnpool::{
    combined_map_score, score_multiclass, score_rank1, score_rank_p, score_second_order, score_second_order_multiclass,
    AttentionParams,
};
use crate::autograd::finite_diff_check;
use crate::bench::{self, BenchKind, CostModel, Dims};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::{record_cbp_from_features, record_loss, HeadConfig, HeadKind, LossKind, Model, Supervision};
use crate::heatmap::HeatmapImage;
use crate::parallel::{map_indexed, Execution};
use crate::rng::{sub_seed, SplitMix64};
use crate::sketch::{sketch_inner_product_trials, MeanEstimate};
use crate::synth::{self, gen_pose_targets, pose_target_for};
use crate::tensor::{dot, outer, Matrix};
use crate::train;

/// `|x − y| / max(1, |x|, |y|)`.
pub fn rel_err(x: f64, y: f64) -> f64 {
    (x - y).abs() / 1f64.max(x.abs()).max(y.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Equivalence,
    Gradients,
    Sketch,
    Flops,
    Determinism,
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::Equivalence => "EQUIVALENCE",
            Group::Gradients => "GRADIENTS",
            Group::Sketch => "SKETCH",
            Group::Flops => "FLOPS",
            Group::Determinism => "DETERMINISM",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub group: Group,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} {} ({:.2?})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed
        )
    }
}

fn timed(group: Group, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        group,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// A random instance with `n, f ∈ [1, 16]` and `K ∈ [1, 5]`.
pub struct Instance {
    pub x: Matrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub classes: usize,
    pub seed: u64,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = SplitMix64::new(seed);
    let n = 1 + rng.below(16);
    let f = 1 + rng.below(16);
    let x = Matrix::from_fn(n, f, |_, _| rng.normal());
    let a = (0..f).map(|_| rng.normal()).collect();
    let b = (0..f).map(|_| rng.normal()).collect();
    Instance {
        x,
        a,
        b,
        classes: 1 + rng.below(5),
        seed,
    }
}

pub const INSTANCES: u64 = 1000;

/// Largest `|rank1 − second_order| / (1 + |score|)` over the instance set.
pub fn rank1_equivalence_error(instances: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let inst = instance(s);
        let r1 = score_rank1(&inst.x, &inst.a, &inst.b)?.score;
        let oracle = score_second_order(&inst.x, &outer(&inst.a, &inst.b))?;
        worst = worst.max((r1 - oracle).abs() / (1.0 + oracle.abs()));
    }
    Ok(worst)
}

/// Largest relative error of the symmetric heatmap form and of the combined
/// map against `tᵀh`.
pub fn symmetric_and_combined_error(instances: u64) -> Result<(f64, f64)> {
    let (mut sym, mut comb): (f64, f64) = (0.0, 0.0);
    for s in 0..instances {
        let inst = instance(s);
        let r1 = score_rank1(&inst.x, &inst.a, &inst.b)?.score;
        let swapped = score_rank1(&inst.x, &inst.b, &inst.a)?.score;
        let heatmaps = dot(&inst.x.matvec(&inst.a)?, &inst.x.matvec(&inst.b)?)?;
        sym = sym.max(rel_err(r1, heatmaps)).max(rel_err(swapped, heatmaps));

        let mut rng = SplitMix64::new(sub_seed(inst.seed, 1, 0));
        let params = AttentionParams::init(inst.x.cols(), inst.classes, 1, &mut rng);
        let inner = score_multiclass(&inst.x, &params)?;
        let (_, combined) = combined_map_score(&inst.x, &params)?;
        for (u, v) in inner.iter().zip(&combined) {
            comb = comb.max(rel_err(*u, *v));
        }
    }
    Ok((sym, comb))
}

/// Largest relative error of rank-`P` scoring against the explicit
/// second-order oracle with `W_k = Σ_p a_kᵖ bᵖᵀ`.
pub fn rank_p_oracle_error(instances: u64, ranks: &[usize]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let inst = instance(s);
        for &p in ranks {
            let mut rng = SplitMix64::new(sub_seed(inst.seed, 2, p as u64));
            let params = AttentionParams::init(inst.x.cols(), inst.classes, p, &mut rng);
            let fast = score_rank_p(&inst.x, &params)?;
            let oracle = score_second_order_multiclass(&inst.x, &params.second_order_weights())?;
            for (u, v) in fast.iter().zip(&oracle) {
                worst = worst.max(rel_err(*u, *v));
            }
        }
    }
    Ok(worst)
}

/// Finite-difference check of one head's loss for one seed. The compact
/// bilinear head is also checked end to end through the sketch w.r.t. `X`.
pub fn head_gradient_error(kind: HeadKind, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let (n1, n2, f, k) = (2, 3, 4, 3);
    let config = HeadConfig {
        rank: 2,
        hidden: 5,
        sketch_dim: 6,
        sketch_seed: seed,
        bottom_up_bias: seed % 2 == 1,
        ..HeadConfig::new(kind, f, k)
    };
    let mut model = Model::init(config.clone(), &mut rng)?;
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let x = Matrix::from_fn(n1 * n2, f, |_, _| rng.normal());
    let input = model.prepare(&x)?.into_owned();
    let pose = pose_target_for(rng.below(n1 * n2), n1, n2, 1.0);
    let labels = [rng.below(k), rng.below(k)];
    let loss = if seed.is_multiple_of(3) {
        LossKind::Sigmoid
    } else {
        LossKind::Softmax
    };
    let sup = Supervision {
        labels: &labels,
        pose: Some(&pose),
    };
    let mut worst = finite_diff_check(
        |tape, ids| record_loss(&config, tape, &input, ids, sup, loss),
        model.params(),
        1e-5,
    )?;
    if kind == HeadKind::Cbp {
        let sketch = config.sketch()?;
        let end_to_end = finite_diff_check(
            |tape, ids| {
                let logits = record_cbp_from_features(tape, ids[0], &sketch, ids[1])?;
                tape.softmax_cross_entropy(logits, &labels[..1])
            },
            &[x, model.params()[0].clone()],
            1e-5,
        )?;
        worst = worst.max(end_to_end);
    }
    Ok(worst)
}

/// Mean of `⟨TS(x), TS(y)⟩` over sketch seeds, and the exact `⟨x, y⟩²`.
pub fn sketch_unbiasedness(trials: usize, exec: Execution) -> Result<(MeanEstimate, f64)> {
    let mut rng = SplitMix64::new(0x7e57);
    let x: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    let y: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    let samples = sketch_inner_product_trials(&x, &y, 64, 1, trials, exec)?;
    let target = dot(&x, &y)?.powi(2);
    Ok((MeanEstimate::from_samples(&samples), target))
}

/// Points of the sweep grid (deduplicated per kind) whose instrumented count
/// differs from the closed form.
pub fn flop_mismatches() -> Result<Vec<String>> {
    let mut seen = std::collections::HashSet::new();
    let mut bad = Vec::new();
    for dims in bench::sweep_grid() {
        let model = CostModel::new(dims)?;
        for kind in [BenchKind::Full, BenchKind::RankP, BenchKind::Cbp] {
            let key = match kind {
                BenchKind::RankP => (kind, dims.n, dims.f, dims.k, dims.p),
                _ => (kind, dims.n, dims.f, dims.k, 0),
            };
            if !seen.insert(key) {
                continue;
            }
            let measured = bench::instrumented_flops(kind, dims)? as u128;
            if measured != model.analytic(kind) {
                bad.push(format!("{kind} {dims:?}: {measured} vs {}", model.analytic(kind)));
            }
        }
    }
    Ok(bad)
}

/// Median wall-clock ratio of explicit second-order to rank-1 scoring at
/// `n=196, f=512, K=100`.
pub fn wallclock_ratio(repetitions: usize) -> Result<f64> {
    let dims = Dims::new(196, 512, 100, 1);
    let full = bench::bench_wallclock(BenchKind::Full, dims, repetitions)?;
    let fast = bench::bench_wallclock(BenchKind::RankP, dims, repetitions)?;
    Ok(full.timing.median_ns / fast.timing.median_ns)
}

/// A fresh scratch directory under the system temp dir.
pub fn scratch_dir(tag: &str) -> Result<PathBuf> {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    let dir = std::env::temp_dir().join(format!("attnpool-{tag}-{}-{nanos}", std::process::id()));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// File name → contents for every file directly inside `dir`.
pub fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
        }
    }
    Ok(out)
}

/// A small configuration for determinism checks.
pub fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task.n1 = 4;
    cfg.task.n2 = 4;
    cfg.task.features = 8;
    cfg.task.classes = 3;
    cfg.task.train_size = 64;
    cfg.task.val_size = 32;
    cfg.train.epochs = 3;
    cfg.train.hidden = 6;
    cfg
}

/// Generates and saves a dataset for `cfg` into `dir`.
pub fn generate_into(cfg: &RunConfig, dir: &Path, exec: Execution) -> Result<synth::Dataset> {
    let mut ds = synth::gen_planted(&cfg.task, exec)?;
    if cfg.pose_sigma > 0.0 {
        gen_pose_targets(&mut ds, cfg.pose_sigma);
    }
    synth::save_dataset(&ds, dir, &cfg.task_text())?;
    Ok(ds)
}

/// Trains with `cfg` and writes the checkpoint and reports into `dir`.
pub fn train_into(cfg: &RunConfig, ds: &synth::Dataset, dir: &Path, exec: Execution) -> Result<train::TrainReport> {
    let report = train::train(&cfg.train, ds, exec)?;
    checkpoint::save(
        &report.model,
        cfg.train.seed,
        dir,
        &[
            ("run.cfg", &cfg.to_text()),
            ("report.tsv", &report.to_tsv()),
            ("summary.txt", &report.summary()),
        ],
    )?;
    Ok(report)
}

/// Determinism of `gen` and `train` (repeated, and across execution modes)
/// plus byte-exact round trips of every file format. Returns the failures.
pub fn determinism_failures() -> Result<Vec<String>> {
    let root = scratch_dir("determinism")?;
    let result = determinism_in(&root);
    let _ = fs::remove_dir_all(&root);
    result
}

fn determinism_in(root: &Path) -> Result<Vec<String>> {
    let mut failures = Vec::new();
    let mut cfg = small_run_config();
    let mut expect_same = |what: &str, a: &Path, b: &Path| -> Result<()> {
        let (x, y) = (dir_bytes(a)?, dir_bytes(b)?);
        if x.is_empty() || x != y {
            failures.push(format!("{what}: {} vs {}", a.display(), b.display()));
        }
        Ok(())
    };

    let (g1, g2, g3) = (root.join("gen1"), root.join("gen2"), root.join("gen3"));
    let ds = generate_into(&cfg, &g1, Execution::Sequential)?;
    generate_into(&cfg, &g2, Execution::Parallel)?;
    expect_same("gen", &g1, &g2)?;

    let loaded = synth::load_dataset(
        &g1,
        RunConfig::parse(&fs::read_to_string(g1.join("dataset.cfg")).map_err(|e| Error::io(&g1, e))?)?.task,
    )?;
    synth::save_dataset(&loaded, &g3, &cfg.task_text())?;
    expect_same("dataset round trip", &g1, &g3)?;

    for head in [HeadKind::Attention, HeadKind::PoseReg, HeadKind::Cbp] {
        cfg.train.head = head;
        let (t1, t2, t3) = (
            root.join(format!("{head}1")),
            root.join(format!("{head}2")),
            root.join(format!("{head}3")),
        );
        train_into(&cfg, &ds, &t1, Execution::Sequential)?;
        train_into(&cfg, &ds, &t2, Execution::Parallel)?;
        expect_same("train", &t1, &t2)?;
        let (model, seed) = checkpoint::load(&t1)?;
        checkpoint::save(&model, seed, &t3, &[])?;
        fs::remove_file(t1.join("run.cfg")).ok();
        fs::remove_file(t1.join("report.tsv")).ok();
        fs::remove_file(t1.join("summary.txt")).ok();
        expect_same("checkpoint round trip", &t1, &t3)?;
    }

    let mut rng = SplitMix64::new(5);
    let t = Tensor::new(vec![2, 3, 4], (0..24).map(|_| rng.normal()).collect())?;
    let bytes = t.encode();
    if Tensor::decode(&bytes)?.encode() != bytes {
        failures.push("ATNP round trip".into());
    }
    let grid = Matrix::from_fn(3, 5, |_, _| rng.normal());
    let pgm = HeatmapImage::from_grid(&grid)?.encode_pgm();
    if HeatmapImage::decode_pgm(&pgm)?.encode_pgm() != pgm {
        failures.push("PGM round trip".into());
    }
    let text = cfg.to_text();
    if RunConfig::parse(&text)?.to_text() != text {
        failures.push("config round trip".into());
    }
    let labels = fs::read_to_string(g1.join("train_labels.tsv")).map_err(|e| Error::io(&g1, e))?;
    let parsed = synth::parse_labels(&labels)?;
    let rebuilt: String = parsed
        .iter()
        .enumerate()
        .map(|(i, (l, p))| {
            let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            format!("{i}\t{}\t{}\n", join(l), join(p))
        })
        .collect();
    if rebuilt != labels {
        failures.push("label file round trip".into());
    }
    Ok(failures)
}

#[derive(Debug, Clone, Copy)]
pub struct SelftestOptions {
    pub exec: Execution,
    pub sketch_trials: usize,
    pub gradient_seeds: u64,
    pub wallclock_repetitions: usize,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            exec: Execution::Parallel,
            sketch_trials: 10_000,
            gradient_seeds: 20,
            wallclock_repetitions: 7,
        }
    }
}

/// Runs every check, calling `progress` as each one finishes.
pub fn run(opts: SelftestOptions, mut progress: impl FnMut(&Check)) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut push = |c: Check| {
        progress(&c);
        checks.push(c);
    };

    push(timed(Group::Equivalence, "rank-1 vs second order", || {
        let e = rank1_equivalence_error(INSTANCES)?;
        Ok((e <= 1e-9, format!("max error {e:.2e} (≤ 1e-9)")))
    }));
    push(timed(Group::Equivalence, "symmetric and combined", || {
        let (s, c) = symmetric_and_combined_error(INSTANCES)?;
        Ok((
            s <= 1e-12 && c <= 1e-12,
            format!("symmetric {s:.2e}, combined {c:.2e} (≤ 1e-12)"),
        ))
    }));
    push(timed(Group::Equivalence, "rank-P vs second order", || {
        let e = rank_p_oracle_error(INSTANCES, &[1, 2, 5])?;
        Ok((e <= 1e-9, format!("max error {e:.2e} over P ∈ {{1,2,5}} (≤ 1e-9)")))
    }));
    push(timed(Group::Gradients, "finite differences", || {
        let seeds = opts.gradient_seeds;
        let results = map_indexed(HeadKind::ALL.len() * seeds as usize, opts.exec, |i| {
            let kind = HeadKind::ALL[i / seeds as usize];
            head_gradient_error(kind, i as u64 % seeds).map(|e| (kind, e))
        });
        let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
        for r in results {
            let (kind, e) = r?;
            let w = worst.entry(kind.name()).or_insert(0.0);
            *w = w.max(e);
        }
        let max = worst.values().copied().fold(0.0, f64::max);
        let detail = worst
            .iter()
            .map(|(k, e)| format!("{k} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ");
        Ok((max <= 1e-6, format!("{detail} over {seeds} seeds (≤ 1e-6)")))
    }));
    push(timed(Group::Sketch, "TensorSketch unbiased", || {
        let (est, target) = sketch_unbiasedness(opts.sketch_trials, opts.exec)?;
        Ok((
            est.within(target, 3.0),
            format!(
                "mean {:.4} ± {:.4} vs ⟨x,y⟩² = {target:.4} over {} seeds",
                est.mean, est.std_err, est.samples
            ),
        ))
    }));
    push(timed(Group::Flops, "instrumented = analytic", || {
        let bad = flop_mismatches()?;
        let full = bench::flops_full_second_order(49, 2048, 393)?;
        let fast = bench::flops_rank_p(49, 2048, 393, 1)?;
        let ratio = full as f64 / fast as f64;
        let examples = full == 3_707_764_736 && fast == 2_011_136 && (ratio - 1843.6).abs() < 0.05;
        Ok((
            bad.is_empty() && examples,
            format!("{} mismatches; {full}/{fast} = {ratio:.1}", bad.len()),
        ))
    }));
    push(timed(Group::Flops, "wall-clock ratio", || {
        let r = wallclock_ratio(opts.wallclock_repetitions)?;
        Ok((
            r >= 10.0,
            format!("full / rank-1 = {r:.1}× at n=196 f=512 K=100 (≥ 10×)"),
        ))
    }));
    push(timed(
        Group::Flops,
        "rank-1 allocations",
        || match bench::rank_p_allocations(Dims::new(196, 512, 100, 1))? {
            Some((stats, ok)) => Ok((ok, format!("largest {} B, total {} B", stats.largest, stats.total))),
            None => Ok((true, "tracking allocator not installed; skipped".into())),
        },
    ));
    push(timed(Group::Determinism, "byte-identical artifacts", || {
        let failures = determinism_failures()?;
        Ok((
            failures.is_empty(),
            if failures.is_empty() {
                "gen, train and all formats".into()
            } else {
                failures.join("; ")
            },
        ))
    }));
    checks
}

/// `EQUIVALENCE OK / GRADIENTS OK / SKETCH OK` (with `FAIL` for any group
/// that has a failing check).
pub fn summary_line(checks: &[Check], groups: &[Group]) -> String {
    groups
        .iter()
        .map(|g| {
            let ok = checks.iter().filter(|c| c.group == *g).all(|c| c.passed);
            format!("{} {}", g.label(), if ok { "OK" } else { "FAIL" })
        })
        .collect::<Vec<_>>()
        .join(" / ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_definition() {
        assert_eq!(rel_err(0.0, 1e-13), 1e-13);
        assert_eq!(rel_err(100.0, 101.0), 1.0 / 101.0);
    }

    #[test]
    fn identities_hold_on_a_few_instances() {
        assert!(rank1_equivalence_error(50).unwrap() <= 1e-9);
        let (s, c) = symmetric_and_combined_error(50).unwrap();
        assert!(s <= 1e-12 && c <= 1e-12);
        assert!(rank_p_oracle_error(50, &[1, 2, 5]).unwrap() <= 1e-9);
    }

    #[test]
    fn gradient_checks_for_a_few_seeds() {
        for kind in HeadKind::ALL {
            for seed in 0..3 {
                let e = head_gradient_error(kind, seed).unwrap();
                assert!(e <= 1e-6, "{kind} seed {seed}: {e}");
            }
        }
    }

    #[test]
    fn summary_formats_groups() {
        let mk = |group, passed| Check {
            group,
            name: "x",
            passed,
            detail: String::new(),
            elapsed: Duration::ZERO,
        };
        let checks = [mk(Group::Equivalence, true), mk(Group::Sketch, false)];
        assert_eq!(
            summary_line(&checks, &[Group::Equivalence, Group::Gradients, Group::Sketch]),
            "EQUIVALENCE OK / GRADIENTS OK / SKETCH FAIL"
        );
    }
}
