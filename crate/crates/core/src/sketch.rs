//! Compact bilinear pooling with TensorSketch.
//!
//! A count sketch hashes each of the `f` coordinates into one of `d` buckets
//! with a random sign. TensorSketch circularly convolves two independent count
//! sketches of the same vector, which is a sketch of `x ⊗ x`; the inner
//! product of two such sketches is an unbiased estimate of `⟨x, y⟩²`.
//! Summing the sketches of every row of a feature map sketches the full
//! second-order statistic `XᵀX` without forming it.
//!
//! The convolution is computed directly in `O(d²)`. A transform-based
//! convolution would be `O(d log d)`; at the dimensions used here the direct
//! form is fast enough and keeps this crate free of an FFT dependency.

use crate::error::{Error, Result};
use crate::flops;
use crate::parallel::{map_indexed, Execution};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

/// Hash and sign tables of one TensorSketch, derived from `(seed, f, d)`.
///
/// Tables are drawn from SplitMix64 in the order `h1`, `s1`, `h2`, `s2`, one
/// draw per entry: buckets as `next_u64() % d`, signs as `+1` when the top
/// bit of `next_u64()` is clear and `-1` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchParams {
    seed: u64,
    features: usize,
    dim: usize,
    h1: Vec<usize>,
    s1: Vec<f64>,
    h2: Vec<usize>,
    s2: Vec<f64>,
}

impl SketchParams {
    pub fn new(features: usize, dim: usize, seed: u64) -> Result<Self> {
        if features == 0 || dim == 0 {
            return Err(Error::Invalid(format!(
                "sketch needs f ≥ 1 and d ≥ 1, got f={features}, d={dim}"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let hashes = |rng: &mut SplitMix64| -> Vec<usize> { (0..features).map(|_| rng.below(dim)).collect() };
        let signs = |rng: &mut SplitMix64| -> Vec<f64> {
            (0..features)
                .map(|_| if rng.next_u64() >> 63 == 0 { 1.0 } else { -1.0 })
                .collect()
        };
        let h1 = hashes(&mut rng);
        let s1 = signs(&mut rng);
        let h2 = hashes(&mut rng);
        let s2 = signs(&mut rng);
        Ok(SketchParams {
            seed,
            features,
            dim,
            h1,
            s1,
            h2,
            s2,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn features(&self) -> usize {
        self.features
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn hashes(&self) -> (&[usize], &[usize]) {
        (&self.h1, &self.h2)
    }
    pub fn signs(&self) -> (&[f64], &[f64]) {
        (&self.s1, &self.s2)
    }

    /// The two count sketches as dense signed `f×d` projection matrices, so
    /// that `count_sketch(x) = xᵀ S`.
    pub fn projection_matrices(&self) -> (Matrix, Matrix) {
        let proj = |h: &[usize], s: &[f64]| {
            let mut m = Matrix::zeros(self.features, self.dim);
            for i in 0..self.features {
                m.set(i, h[i], s[i]);
            }
            m
        };
        (proj(&self.h1, &self.s1), proj(&self.h2, &self.s2))
    }
}

/// `out[h[i]] += s[i]·x[i]`.
pub fn count_sketch(x: &[f64], h: &[usize], s: &[f64], d: usize) -> Result<Vec<f64>> {
    if h.len() != x.len() || s.len() != x.len() {
        return Err(Error::shape("count_sketch", &[x.len()], &[h.len(), s.len()]));
    }
    if let Some(&bad) = h.iter().find(|&&b| b >= d) {
        return Err(Error::Invalid(format!("hash bucket {bad} out of range for d={d}")));
    }
    flops::add(2 * x.len() as u64);
    let mut out = vec![0.0; d];
    for ((&xi, &hi), &si) in x.iter().zip(h).zip(s) {
        out[hi] += si * xi;
    }
    Ok(out)
}

/// Circular convolution `out[k] = Σ_j u[j]·v[(k − j) mod d]`, computed directly.
pub fn circular_convolve(u: &[f64], v: &[f64]) -> Vec<f64> {
    let d = u.len();
    debug_assert_eq!(d, v.len());
    flops::add(2 * (d * d) as u64);
    (0..d)
        .map(|k| {
            let mut acc = 0.0;
            for j in 0..d {
                acc += u[j] * v[(k + d - j) % d];
            }
            acc
        })
        .collect()
}

pub fn tensor_sketch(x: &[f64], params: &SketchParams) -> Result<Vec<f64>> {
    if x.len() != params.features {
        return Err(Error::shape("tensor_sketch", &[params.features], &[x.len()]));
    }
    let c1 = count_sketch(x, &params.h1, &params.s1, params.dim)?;
    let c2 = count_sketch(x, &params.h2, &params.s2, params.dim)?;
    Ok(circular_convolve(&c1, &c2))
}

/// Sum over locations of the TensorSketch of each row of `X`.
pub fn cbp_pool(x: &Matrix, params: &SketchParams) -> Result<Vec<f64>> {
    if x.cols() != params.features {
        return Err(Error::shape("cbp_pool", &x.dims(), &[params.features]));
    }
    let mut pooled = vec![0.0; params.dim];
    for r in 0..x.rows() {
        let ts = tensor_sketch(x.row(r), params)?;
        flops::add(params.dim as u64);
        for (p, t) in pooled.iter_mut().zip(ts) {
            *p += t;
        }
    }
    Ok(pooled)
}

/// Signed square root followed by L2 normalization, as used by some compact
/// bilinear pipelines. Not applied unless a head asks for it.
pub fn signed_sqrt_l2(z: &[f64]) -> Vec<f64> {
    let root: Vec<f64> = z.iter().map(|v| v.signum() * v.abs().sqrt()).collect();
    let norm = root.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        root
    } else {
        root.into_iter().map(|v| v / norm).collect()
    }
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let m = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        MeanEstimate {
            mean,
            std_err: (var / m).sqrt(),
            samples: xs.len(),
        }
    }

    /// `|mean − target| ≤ k·std_err`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_err
    }
}

/// `⟨TS(x), TS(y)⟩` for sketch seeds `base_seed .. base_seed + trials`.
pub fn sketch_inner_product_trials(
    x: &[f64],
    y: &[f64],
    dim: usize,
    base_seed: u64,
    trials: usize,
    exec: Execution,
) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::shape("sketch_inner_product_trials", &[x.len()], &[y.len()]));
    }
    map_indexed(trials, exec, |t| {
        let p = SketchParams::new(x.len(), dim, base_seed.wrapping_add(t as u64))?;
        let (a, b) = (tensor_sketch(x, &p)?, tensor_sketch(y, &p)?);
        Ok(a.iter().zip(&b).map(|(u, v)| u * v).sum())
    })
    .into_iter()
    .collect()
}
