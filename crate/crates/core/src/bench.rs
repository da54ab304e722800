//! Cost model and wall-clock measurements for the scoring routes.

use std::fmt;
use std::fmt::Write as _;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use crate::alloc_track::{self, AllocStats};
use crate::attnpool::{score_rank_p, score_second_order_multiclass, AttentionParams, SecondOrderParams};
use crate::error::{Error, Result};
use crate::flops;
use crate::rng::SplitMix64;
use crate::sketch::{cbp_pool, SketchParams};
use crate::tensor::Matrix;

/// Counts use the multiply-and-add-separately convention of [`crate::flops`].
fn checked(terms: &[&[u128]]) -> Result<u128> {
    let mut total: u128 = 0;
    for term in terms {
        let mut prod: u128 = 1;
        for &v in term.iter() {
            prod = prod.checked_mul(v).ok_or_else(overflow)?;
        }
        total = total.checked_add(prod).ok_or_else(overflow)?;
    }
    Ok(total)
}

fn overflow() -> Error {
    Error::Invalid("operation count overflows 128 bits".into())
}

/// Materialize `XᵀX` and take `K` Frobenius inner products: `2nf² + 2Kf²`.
pub fn flops_full_second_order(n: usize, f: usize, k: usize) -> Result<u128> {
    let (n, f, k) = (n as u128, f as u128, k as u128);
    checked(&[&[2, n, f, f], &[2, k, f, f]])
}

/// Per component: `Xb`, `Xᵀh` and `K` dot products: `P·(4nf + 2Kf)`.
pub fn flops_rank_p(n: usize, f: usize, k: usize, p: usize) -> Result<u128> {
    let (n, f, k, p) = (n as u128, f as u128, k as u128, p as u128);
    checked(&[&[4, p, n, f], &[2, p, k, f]])
}

/// Two count sketches, a direct circular convolution and an accumulate per
/// location, then a `d×K` classifier: `n·(4f + 2d² + d) + 2dK`.
pub fn flops_cbp(n: usize, f: usize, k: usize, d: usize) -> Result<u128> {
    let (n, f, k, d) = (n as u128, f as u128, k as u128, d as u128);
    checked(&[&[4, n, f], &[2, n, d, d], &[n, d], &[2, d, k]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchKind {
    /// Explicit second-order pooling.
    Full,
    /// Rank-`P` attentional pooling.
    RankP,
    /// Compact bilinear pooling plus a linear classifier.
    Cbp,
}

impl BenchKind {
    pub const ALL: [BenchKind; 3] = [BenchKind::Full, BenchKind::RankP, BenchKind::Cbp];

    pub fn name(self) -> &'static str {
        match self {
            BenchKind::Full => "full",
            BenchKind::RankP => "rank_p",
            BenchKind::Cbp => "cbp",
        }
    }
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BenchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench kind `{s}`")))
    }
}

/// Problem dimensions of one benchmark point. `p` is used by
/// [`BenchKind::RankP`], `d` by [`BenchKind::Cbp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub f: usize,
    pub k: usize,
    pub p: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(n: usize, f: usize, k: usize, p: usize) -> Self {
        Dims { n, f, k, p, d: 64 }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.f == 0 || self.k == 0 || self.p == 0 || self.d == 0 {
            return Err(Error::Invalid(format!("benchmark dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Analytic operation counts at one set of dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub dims: Dims,
    pub flops_full: u128,
    pub flops_rank_p: u128,
    pub flops_cbp: u128,
}

impl CostModel {
    pub fn new(dims: Dims) -> Result<Self> {
        Ok(CostModel {
            dims,
            flops_full: flops_full_second_order(dims.n, dims.f, dims.k)?,
            flops_rank_p: flops_rank_p(dims.n, dims.f, dims.k, dims.p)?,
            flops_cbp: flops_cbp(dims.n, dims.f, dims.k, dims.d)?,
        })
    }

    pub fn analytic(&self, kind: BenchKind) -> u128 {
        match kind {
            BenchKind::Full => self.flops_full,
            BenchKind::RankP => self.flops_rank_p,
            BenchKind::Cbp => self.flops_cbp,
        }
    }
}

/// A random problem instance for one benchmark kind.
pub struct Instance {
    kind: BenchKind,
    x: Matrix,
    attention: Option<AttentionParams>,
    second_order: Option<SecondOrderParams>,
    sketch: Option<(SketchParams, Matrix)>,
}

impl Instance {
    pub fn new(kind: BenchKind, dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = SplitMix64::new(seed);
        let x = Matrix::from_fn(dims.n, dims.f, |_, _| rng.normal());
        let mut inst = Instance {
            kind,
            x,
            attention: None,
            second_order: None,
            sketch: None,
        };
        match kind {
            BenchKind::RankP => inst.attention = Some(AttentionParams::init(dims.f, dims.k, dims.p, &mut rng)),
            BenchKind::Full => {
                let weights = (0..dims.k)
                    .map(|_| Matrix::from_fn(dims.f, dims.f, |_, _| rng.normal()))
                    .collect();
                inst.second_order = Some(SecondOrderParams::new(weights)?);
            }
            BenchKind::Cbp => {
                let sketch = SketchParams::new(dims.f, dims.d, seed)?;
                let w = Matrix::from_fn(dims.d, dims.k, |_, _| rng.normal());
                inst.sketch = Some((sketch, w));
            }
        }
        Ok(inst)
    }

    /// One end-to-end scoring call.
    pub fn run(&self) -> Result<Vec<f64>> {
        match self.kind {
            BenchKind::RankP => score_rank_p(&self.x, self.attention.as_ref().expect("rank-P instance")),
            BenchKind::Full => {
                score_second_order_multiclass(&self.x, self.second_order.as_ref().expect("second-order instance"))
            }
            BenchKind::Cbp => {
                let (sketch, w) = self.sketch.as_ref().expect("cbp instance");
                let z = cbp_pool(&self.x, sketch)?;
                Ok(Matrix::new(1, z.len(), z)?.matmul(w)?.into_data())
            }
        }
    }
}

/// Operations counted while scoring one instance.
pub fn instrumented_flops(kind: BenchKind, dims: Dims) -> Result<u64> {
    let inst = Instance::new(kind, dims, 0x5eed)?;
    let (out, ops) = flops::measure(|| inst.run());
    out?;
    Ok(ops)
}

/// Whether rank-`P` scoring at `dims` stays clear of `f×f` buffers: no single
/// allocation exceeds `max(n, f, K)` values and the total is at most
/// `P·(n+f) + K` values. `None` when the tracking allocator is not installed.
pub fn rank_p_allocations(dims: Dims) -> Result<Option<(AllocStats, bool)>> {
    let inst = Instance::new(BenchKind::RankP, dims, 0xa110c)?;
    let (out, stats) = alloc_track::track(|| inst.run());
    out?;
    Ok(stats.map(|s| (s, within_linear_budget(&s, dims))))
}

fn within_linear_budget(stats: &AllocStats, dims: Dims) -> bool {
    let word = std::mem::size_of::<f64>();
    let budget = word * (dims.p * (dims.n + dims.f) + dims.k);
    stats.largest <= word * dims.n.max(dims.f).max(dims.k) && stats.total <= budget
}

/// Timing summary of repeated scoring calls, in nanoseconds per call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub median_ns: f64,
    pub q1_ns: f64,
    pub q3_ns: f64,
    pub repetitions: usize,
    /// Calls per timed sample (raised until a sample spans at least 1 ms).
    pub inner_iterations: usize,
}

impl Timing {
    pub fn iqr_ns(&self) -> f64 {
        self.q3_ns - self.q1_ns
    }

    /// Whether the interquartile ranges of two timings overlap.
    pub fn overlaps(&self, other: &Timing) -> bool {
        self.q1_ns <= other.q3_ns && other.q1_ns <= self.q3_ns
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

const WARMUP: usize = 5;
const MIN_SAMPLE_NS: u128 = 1_000_000;

/// One benchmark row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub kind: BenchKind,
    pub dims: Dims,
    pub flops_analytic: u128,
    pub flops_measured: u64,
    pub timing: Timing,
    /// Allocation check for rank-`P` scoring when tracking is available.
    pub alloc_ok: Option<bool>,
}

/// Times `repetitions` samples of end-to-end scoring after 5 warm-up calls.
pub fn bench_wallclock(kind: BenchKind, dims: Dims, repetitions: usize) -> Result<BenchResult> {
    if repetitions == 0 {
        return Err(Error::Invalid("repetitions must be ≥ 1".into()));
    }
    let inst = Instance::new(kind, dims, 0xbe4c)?;
    let (_, flops_measured) = flops::measure(|| -> Result<()> {
        inst.run()?;
        Ok(())
    });
    for _ in 0..WARMUP {
        black_box(inst.run()?);
    }
    let mut inner = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            black_box(inst.run()?);
        }
        if t.elapsed().as_nanos() >= MIN_SAMPLE_NS || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        for _ in 0..inner {
            black_box(inst.run()?);
        }
        samples.push(t.elapsed().as_nanos() as f64 / inner as f64);
    }
    samples.sort_by(f64::total_cmp);
    let timing = Timing {
        median_ns: quantile(&samples, 0.5).max(f64::MIN_POSITIVE),
        q1_ns: quantile(&samples, 0.25),
        q3_ns: quantile(&samples, 0.75),
        repetitions,
        inner_iterations: inner,
    };
    let alloc_ok = match kind {
        BenchKind::RankP => rank_p_allocations(dims)?.map(|(_, ok)| ok),
        _ => None,
    };
    Ok(BenchResult {
        kind,
        dims,
        flops_analytic: CostModel::new(dims)?.analytic(kind),
        flops_measured,
        timing,
        alloc_ok,
    })
}

/// The `{1,7,49} × {8,64,512} × {1,10,100} × {1,2,5}` grid of `(n, f, K, P)`.
pub fn sweep_grid() -> Vec<Dims> {
    let mut out = Vec::new();
    for n in [1, 7, 49] {
        for f in [8, 64, 512] {
            for k in [1, 10, 100] {
                for p in [1, 2, 5] {
                    out.push(Dims::new(n, f, k, p));
                }
            }
        }
    }
    out
}

pub const CSV_HEADER: &str = "kind,n,f,K,P,flops_analytic,flops_measured,ns_median,ns_iqr";

/// CSV rows; `P` is written as 0 for kinds without a rank.
pub fn to_csv(results: &[BenchResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        let p = if r.kind == BenchKind::RankP { r.dims.p } else { 0 };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.1},{:.1}",
            r.kind,
            r.dims.n,
            r.dims.f,
            r.dims.k,
            p,
            r.flops_analytic,
            r.flops_measured,
            r.timing.median_ns,
            r.timing.iqr_ns()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(flops_full_second_order(49, 2048, 393).unwrap(), 3_707_764_736);
        assert_eq!(flops_rank_p(49, 2048, 393, 1).unwrap(), 2_011_136);
        let ratio = 3_707_764_736f64 / 2_011_136f64;
        assert!((ratio - 1843.6).abs() < 0.05);
        for (n, k) in [(3, 4), (10, 1)] {
            assert_eq!(flops_full_second_order(n, 1, k).unwrap(), 2 * (n + k) as u128);
        }
        assert_eq!(flops_full_second_order(5, 3, 0).unwrap(), 2 * 5 * 9);
        assert_eq!(
            flops_rank_p(7, 64, 10, 4).unwrap(),
            2 * flops_rank_p(7, 64, 10, 2).unwrap()
        );
    }

    #[test]
    fn overflow_is_reported() {
        assert!(flops_full_second_order(usize::MAX, usize::MAX, 1).is_err());
    }

    #[test]
    fn instrumented_counts_equal_closed_forms_on_small_dims() {
        for dims in [
            Dims::new(1, 8, 1, 1),
            Dims::new(7, 8, 10, 2),
            Dims {
                d: 16,
                ..Dims::new(3, 5, 2, 1)
            },
        ] {
            let model = CostModel::new(dims).unwrap();
            for kind in BenchKind::ALL {
                assert_eq!(
                    instrumented_flops(kind, dims).unwrap() as u128,
                    model.analytic(kind),
                    "{kind} {dims:?}"
                );
            }
        }
    }

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn csv_layout() {
        let r = bench_wallclock(BenchKind::Full, Dims::new(2, 3, 2, 1), 3).unwrap();
        let csv = to_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&row[..7], ["full", "2", "3", "2", "0", "72", "72"]);
    }

    #[test]
    fn rank_p_beats_full_exactly_when_f_is_large_enough() {
        // P(4nf + 2Kf) < 2nf² + 2Kf²  ⇔  f > P(2n + K)/(n + K).
        for dims in sweep_grid() {
            let m = CostModel::new(dims).unwrap();
            let (n, f, k, p) = (dims.n, dims.f, dims.k, dims.p);
            let cheaper = m.flops_rank_p < m.flops_full;
            assert_eq!(cheaper, f * (n + k) > p * (2 * n + k), "{dims:?}");
            if f >= 64 {
                assert!(cheaper, "{dims:?}");
            }
        }
    }
}
