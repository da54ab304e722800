//! Attentional pooling scored as low-rank second-order pooling.
//!
//! A feature map `X` is an `n×f` matrix (one row per spatial location). The
//! full second-order classifier scores `Tr(XᵀX Wᵀ)` with an `f×f` weight
//! matrix. Constraining `W = a bᵀ` turns that score into
//! `aᵀ (Xᵀ (X b))`: a bottom-up attention map `h = X b` over locations, an
//! attention-weighted pooled feature `Xᵀ h`, and a linear classifier `a`. The
//! same number is the inner product of two heatmaps, `(X a)ᵀ (X b)`, which is
//! how class-specific top-down maps `t_k = X a_k` and combined maps
//! `c_k = t_k ∘ h` arise.
//!
//! [`score_second_order`] materializes `XᵀX` and is kept as the reference
//! route; every other scorer here avoids it.

use crate::error::{Error, Result};
use crate::flops;
use crate::rng::SplitMix64;
use crate::tensor::{dot, outer, Matrix};

/// Top-down and bottom-up parameters of a rank-`P` attention head.
///
/// Component `p` holds an `f×K` matrix whose column `k` is `a_k^p` and a
/// length-`f` bottom-up vector `b^p`. The ordinary attention head is `P = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    top_down: Vec<Matrix>,
    bottom_up: Vec<Vec<f64>>,
}

impl AttentionParams {
    pub fn new(top_down: Vec<Matrix>, bottom_up: Vec<Vec<f64>>) -> Result<Self> {
        if top_down.is_empty() {
            return Err(Error::Invalid("attention rank must be at least 1".into()));
        }
        if top_down.len() != bottom_up.len() {
            return Err(Error::Invalid(format!(
                "rank mismatch: {} top-down matrices, {} bottom-up vectors",
                top_down.len(),
                bottom_up.len()
            )));
        }
        let dims = top_down[0].dims();
        for (a, b) in top_down.iter().zip(&bottom_up) {
            if a.dims() != dims {
                return Err(Error::shape("AttentionParams", &dims, &a.dims()));
            }
            if b.len() != dims[0] {
                return Err(Error::shape("AttentionParams", &dims, &[b.len()]));
            }
        }
        Ok(AttentionParams { top_down, bottom_up })
    }

    pub fn rank1(a: Matrix, b: Vec<f64>) -> Result<Self> {
        AttentionParams::new(vec![a], vec![b])
    }

    /// Entries i.i.d. uniform in `[-1/√f, 1/√f]`; all top-down matrices are
    /// drawn before the bottom-up vectors.
    pub fn init(features: usize, classes: usize, rank: usize, rng: &mut SplitMix64) -> Self {
        let r = 1.0 / (features as f64).sqrt();
        let top_down = (0..rank)
            .map(|_| Matrix::from_fn(features, classes, |_, _| rng.uniform(-r, r)))
            .collect();
        let bottom_up = (0..rank)
            .map(|_| (0..features).map(|_| rng.uniform(-r, r)).collect())
            .collect();
        AttentionParams { top_down, bottom_up }
    }

    pub fn rank(&self) -> usize {
        self.top_down.len()
    }

    pub fn features(&self) -> usize {
        self.top_down[0].rows()
    }

    pub fn classes(&self) -> usize {
        self.top_down[0].cols()
    }

    pub fn top_down(&self, p: usize) -> &Matrix {
        &self.top_down[p]
    }

    pub fn bottom_up(&self, p: usize) -> &[f64] {
        &self.bottom_up[p]
    }

    pub fn top_down_all(&self) -> &[Matrix] {
        &self.top_down
    }

    pub fn bottom_up_all(&self) -> &[Vec<f64>] {
        &self.bottom_up
    }

    /// The equivalent full-rank weights `W_k = Σ_p a_k^p (b^p)ᵀ`.
    pub fn second_order_weights(&self) -> SecondOrderParams {
        let f = self.features();
        let weights = (0..self.classes())
            .map(|k| {
                let mut w = Matrix::zeros(f, f);
                for (a, b) in self.top_down.iter().zip(&self.bottom_up) {
                    w.add_assign(&outer(&a.col(k), b)).expect("f×f");
                }
                w
            })
            .collect();
        SecondOrderParams { weights }
    }
}

/// Explicit `f×f` classifier weights, one matrix per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderParams {
    weights: Vec<Matrix>,
}

impl SecondOrderParams {
    pub fn new(weights: Vec<Matrix>) -> Result<Self> {
        let Some(first) = weights.first() else {
            return Err(Error::Invalid("need at least one weight matrix".into()));
        };
        let f = first.rows();
        for w in &weights {
            if w.dims() != [f, f] {
                return Err(Error::shape("SecondOrderParams", &[f, f], &w.dims()));
            }
        }
        Ok(SecondOrderParams { weights })
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }
}

/// Class-specific top-down and bottom-up vectors (`f×K` each).
#[derive(Debug, Clone, PartialEq)]
pub struct PerClassParams {
    top_down: Matrix,
    bottom_up: Matrix,
}

impl PerClassParams {
    pub fn new(top_down: Matrix, bottom_up: Matrix) -> Result<Self> {
        if top_down.dims() != bottom_up.dims() {
            return Err(Error::shape("PerClassParams", &top_down.dims(), &bottom_up.dims()));
        }
        Ok(PerClassParams { top_down, bottom_up })
    }

    pub fn init(features: usize, classes: usize, rng: &mut SplitMix64) -> Self {
        let r = 1.0 / (features as f64).sqrt();
        let top_down = Matrix::from_fn(features, classes, |_, _| rng.uniform(-r, r));
        let bottom_up = Matrix::from_fn(features, classes, |_, _| rng.uniform(-r, r));
        PerClassParams { top_down, bottom_up }
    }

    pub fn top_down(&self) -> &Matrix {
        &self.top_down
    }

    pub fn bottom_up(&self) -> &Matrix {
        &self.bottom_up
    }

    pub fn second_order_weights(&self) -> SecondOrderParams {
        let weights = (0..self.top_down.cols())
            .map(|k| outer(&self.top_down.col(k), &self.bottom_up.col(k)))
            .collect();
        SecondOrderParams { weights }
    }
}

/// Raw (unnormalized) attention maps over the `n` locations of one example.
///
/// `bottom_up` is `n×1` for a shared saliency map or `n×K` when every class
/// has its own; `top_down` and `combined` are `n×K`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub bottom_up: Matrix,
    pub top_down: Matrix,
    pub combined: Matrix,
}

impl AttentionMaps {
    /// Bottom-up map used by class `k`.
    pub fn bottom_up_for(&self, k: usize) -> Vec<f64> {
        self.bottom_up.col(k.min(self.bottom_up.cols() - 1))
    }

    /// Location with the largest combined response for class `k` (first on ties).
    pub fn peak_location(&self, k: usize) -> usize {
        argmax(&self.combined.col(k))
    }

    /// Class scores `1ᵀ c_k`.
    pub fn scores(&self) -> Vec<f64> {
        self.combined.col_sums()
    }

    /// Reshapes every map into an `n1×n2` grid (row-major locations).
    pub fn to_grids(&self, n1: usize, n2: usize) -> Result<GridMaps> {
        let n = self.top_down.rows();
        if n1 * n2 != n {
            return Err(Error::Invalid(format!(
                "grid {n1}\u{d7}{n2} does not cover {n} locations"
            )));
        }
        let grids = |m: &Matrix| -> Vec<Matrix> { (0..m.cols()).map(|k| Matrix::from_raw(n1, n2, m.col(k))).collect() };
        Ok(GridMaps {
            bottom_up: grids(&self.bottom_up),
            top_down: grids(&self.top_down),
            combined: grids(&self.combined),
        })
    }

    /// Sums the combined maps of several rank components.
    pub fn sum_combined(components: &[AttentionMaps]) -> Result<Matrix> {
        let mut total = components
            .first()
            .ok_or_else(|| Error::Invalid("no map components".into()))?
            .combined
            .clone();
        for c in &components[1..] {
            total.add_assign(&c.combined)?;
        }
        Ok(total)
    }
}

/// [`AttentionMaps`] reshaped to spatial grids, one grid per map column.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMaps {
    pub bottom_up: Vec<Matrix>,
    pub top_down: Vec<Matrix>,
    pub combined: Vec<Matrix>,
}

/// Intermediates of [`score_rank1`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Score {
    pub score: f64,
    /// `h = X b`, one value per location.
    pub bottom_up: Vec<f64>,
    /// `Xᵀ h`, the attention-pooled feature.
    pub pooled: Vec<f64>,
}

fn check_features(x: &Matrix, len: usize, op: &'static str) -> Result<()> {
    if x.cols() != len {
        return Err(Error::shape(op, &x.dims(), &[len]));
    }
    Ok(())
}

fn check_weights(x: &Matrix, w: &Matrix, op: &'static str) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(Error::shape(op, &x.dims(), &w.dims()));
    }
    Ok(())
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Sum-pooling score `1ᵀ X w`.
pub fn score_avg_pool(x: &Matrix, w: &[f64]) -> Result<f64> {
    check_features(x, w.len(), "score_avg_pool")?;
    Ok(x.matvec(w)?.iter().sum())
}

/// Reference second-order score `Tr(XᵀX Wᵀ)`, computed by materializing `XᵀX`.
pub fn score_second_order(x: &Matrix, w: &Matrix) -> Result<f64> {
    if w.dims() != [x.cols(), x.cols()] {
        return Err(Error::shape("score_second_order", &x.dims(), &w.dims()));
    }
    x.gram().frobenius_dot(w)
}

/// [`score_second_order`] for every class, sharing one `XᵀX`.
pub fn score_second_order_multiclass(x: &Matrix, params: &SecondOrderParams) -> Result<Vec<f64>> {
    let f = x.cols();
    if let Some(w) = params.weights.iter().find(|w| w.dims() != [f, f]) {
        return Err(Error::shape("score_second_order", &x.dims(), &w.dims()));
    }
    let gram = x.gram();
    params.weights.iter().map(|w| gram.frobenius_dot(w)).collect()
}

/// Rank-1 attentional pooling `aᵀ (Xᵀ (X b))`, evaluated right to left.
pub fn score_rank1(x: &Matrix, a: &[f64], b: &[f64]) -> Result<Rank1Score> {
    check_features(x, a.len(), "score_rank1")?;
    check_features(x, b.len(), "score_rank1")?;
    let bottom_up = x.matvec(b)?;
    let pooled = x.tmatvec(&bottom_up)?;
    let score = dot(a, &pooled)?;
    Ok(Rank1Score {
        score,
        bottom_up,
        pooled,
    })
}

fn top_down_and_bottom_up(x: &Matrix, params: &AttentionParams, op: &'static str) -> Result<(Matrix, Vec<f64>)> {
    if params.rank() != 1 {
        return Err(Error::Invalid(format!(
            "{op} expects rank-1 parameters, got rank {}",
            params.rank()
        )));
    }
    check_weights(x, params.top_down(0), op)?;
    let t = x.matmul(params.top_down(0))?;
    let h = x.matvec(params.bottom_up(0))?;
    Ok((t, h))
}

/// Class scores `s_k = (X a_k)ᵀ (X b)` as inner products of top-down and
/// bottom-up maps. Requires `P = 1`.
pub fn score_multiclass(x: &Matrix, params: &AttentionParams) -> Result<Vec<f64>> {
    let (t, h) = top_down_and_bottom_up(x, params, "score_multiclass")?;
    Ok((0..t.cols())
        .map(|k| {
            let mut s = 0.0;
            for (i, &hi) in h.iter().enumerate() {
                s += t.get(i, k) * hi;
            }
            s
        })
        .collect())
}

/// Builds the combined maps `c_k = t_k ∘ h` and scores each class as the
/// spatial sum of its combined map. Requires `P = 1`.
pub fn combined_map_score(x: &Matrix, params: &AttentionParams) -> Result<(AttentionMaps, Vec<f64>)> {
    let (t, h) = top_down_and_bottom_up(x, params, "combined_map_score")?;
    let combined = Matrix::from_fn(t.rows(), t.cols(), |i, k| t.get(i, k) * h[i]);
    let maps = AttentionMaps {
        bottom_up: Matrix::from_raw(h.len(), 1, h),
        top_down: t,
        combined,
    };
    let scores = maps.scores();
    Ok((maps, scores))
}

/// Rank-`P` scores `s_k = Σ_p (X a_k^p)ᵀ (X b^p)`, evaluated per component as
/// `a_k^pᵀ (Xᵀ (X b^p))`. Costs `P·(4nf + 2Kf)` operations.
pub fn score_rank_p(x: &Matrix, params: &AttentionParams) -> Result<Vec<f64>> {
    check_weights(x, params.top_down(0), "score_rank_p")?;
    let k = params.classes();
    let mut scores = vec![0.0; k];
    for (a, b) in params.top_down.iter().zip(&params.bottom_up) {
        let h = x.matvec(b)?;
        let pooled = x.tmatvec(&h)?;
        for (c, s) in scores.iter_mut().enumerate() {
            // f multiplies, f - 1 adds, one more add into the running score.
            flops::add(2 * pooled.len() as u64);
            let mut d = 0.0;
            for (j, &v) in pooled.iter().enumerate() {
                d += a.get(j, c) * v;
            }
            *s += d;
        }
    }
    Ok(scores)
}

/// Per-component maps of a rank-`P` head.
pub fn rank_p_maps(x: &Matrix, params: &AttentionParams) -> Result<Vec<AttentionMaps>> {
    (0..params.rank())
        .map(|p| {
            let single = AttentionParams::rank1(params.top_down(p).clone(), params.bottom_up(p).to_vec())?;
            combined_map_score(x, &single).map(|(maps, _)| maps)
        })
        .collect()
}

/// Scores with one bottom-up vector per class: `s_k = (X A_k)ᵀ (X B_k)`.
pub fn score_per_class(x: &Matrix, params: &PerClassParams) -> Result<Vec<f64>> {
    Ok(per_class_maps(x, params)?.scores())
}

pub fn per_class_maps(x: &Matrix, params: &PerClassParams) -> Result<AttentionMaps> {
    check_weights(x, &params.top_down, "score_per_class")?;
    let t = x.matmul(&params.top_down)?;
    let h = x.matmul(&params.bottom_up)?;
    let combined = t.hadamard(&h)?;
    Ok(AttentionMaps {
        bottom_up: h,
        top_down: t,
        combined,
    })
}

/// Top-down only (average pooling with class weights): `s_k = 1ᵀ X w_k`.
pub fn score_top_down_only(x: &Matrix, weights: &Matrix) -> Result<Vec<f64>> {
    check_weights(x, weights, "score_top_down_only")?;
    Ok(x.matmul(weights)?.col_sums())
}

/// Maps of a top-down-only head: the bottom-up map is uniformly one.
pub fn top_down_only_maps(x: &Matrix, weights: &Matrix) -> Result<AttentionMaps> {
    check_weights(x, weights, "score_top_down_only")?;
    let t = x.matmul(weights)?;
    Ok(AttentionMaps {
        bottom_up: Matrix::filled(x.rows(), 1, 1.0),
        combined: t.clone(),
        top_down: t,
    })
}

/// Rank-1 maps reshaped onto an `n1×n2` grid.
pub fn extract_maps(x: &Matrix, params: &AttentionParams, n1: usize, n2: usize) -> Result<GridMaps> {
    if n1 * n2 != x.rows() {
        return Err(Error::Invalid(format!(
            "grid {n1}\u{d7}{n2} does not cover {} locations",
            x.rows()
        )));
    }
    let (maps, _) = combined_map_score(x, params)?;
    maps.to_grids(n1, n2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn random_x(n: usize, f: usize, rng: &mut SplitMix64) -> Matrix {
        Matrix::from_fn(n, f, |_, _| rng.normal())
    }

    fn random_v(f: usize, rng: &mut SplitMix64) -> Vec<f64> {
        (0..f).map(|_| rng.normal()).collect()
    }

    #[test]
    fn avg_pool_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(score_avg_pool(&x, &[1.0, 1.0]).unwrap(), 10.0);
        assert_eq!(score_avg_pool(&x, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(score_avg_pool(&Matrix::identity(2), &[2.5, -4.0]).unwrap(), -1.5);
        assert!(score_avg_pool(&x, &[1.0]).is_err());
    }

    #[test]
    fn second_order_examples() {
        let w = m(&[&[2.0, 2.0], &[3.0, 3.0]]);
        assert_eq!(score_second_order(&Matrix::identity(2), &w).unwrap(), 5.0);
        let mut rng = SplitMix64::new(1);
        let x = random_x(4, 3, &mut rng);
        assert_eq!(score_second_order(&x, &Matrix::zeros(3, 3)).unwrap(), 0.0);
        assert!(score_second_order(&x, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn second_order_matches_trace_form() {
        let mut rng = SplitMix64::new(2);
        let x = random_x(5, 4, &mut rng);
        let w = random_x(4, 4, &mut rng);
        let trace_form = x.gram().matmul(&w.transpose()).unwrap().trace().unwrap();
        assert!(close(score_second_order(&x, &w).unwrap(), trace_form, 1e-12));
    }

    #[test]
    fn rank1_examples() {
        let r = score_rank1(&Matrix::identity(2), &[2.0, 3.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.score, 5.0);
        assert_eq!(r.bottom_up, vec![1.0, 1.0]);
        assert_eq!(r.pooled, vec![1.0, 1.0]);
        let mut rng = SplitMix64::new(3);
        let x = random_x(7, 5, &mut rng);
        let a = random_v(5, &mut rng);
        assert_eq!(score_rank1(&x, &a, &[0.0; 5]).unwrap().score, 0.0);
        assert_eq!(score_rank1(&x, &[0.0; 5], &a).unwrap().score, 0.0);
    }

    #[test]
    fn rank1_equals_heatmap_inner_product_and_oracle() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..100 {
            let x = random_x(7, 5, &mut rng);
            let a = random_v(5, &mut rng);
            let b = random_v(5, &mut rng);
            let s = score_rank1(&x, &a, &b).unwrap().score;
            let heat = dot(&x.matvec(&a).unwrap(), &x.matvec(&b).unwrap()).unwrap();
            assert!(close(s, heat, 1e-12));
            let oracle = score_second_order(&x, &outer(&a, &b)).unwrap();
            assert!(close(s, oracle, 1e-10));
        }
    }

    #[test]
    fn multiclass_examples() {
        let a = m(&[&[2.0, 0.0], &[3.0, 0.0]]);
        let p = AttentionParams::rank1(a, vec![1.0, 1.0]).unwrap();
        assert_eq!(score_multiclass(&Matrix::identity(2), &p).unwrap(), vec![5.0, 0.0]);

        let mut rng = SplitMix64::new(5);
        let x = random_x(6, 4, &mut rng);
        let a = random_v(4, &mut rng);
        let b = random_v(4, &mut rng);
        let single = AttentionParams::rank1(Matrix::column(&a).unwrap(), b.clone()).unwrap();
        let s = score_multiclass(&x, &single).unwrap();
        assert!(close(s[0], score_rank1(&x, &a, &b).unwrap().score, 1e-12));
    }

    #[test]
    fn multiclass_matches_class_specific_oracle() {
        let mut rng = SplitMix64::new(6);
        for _ in 0..50 {
            let (n, f, k) = (1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(5));
            let x = random_x(n, f, &mut rng);
            let p = AttentionParams::init(f, k, 1, &mut rng);
            let s = score_multiclass(&x, &p).unwrap();
            let oracle = score_second_order_multiclass(&x, &p.second_order_weights()).unwrap();
            for (a, b) in s.iter().zip(&oracle) {
                assert!(close(*a, *b, 1e-9));
            }
        }
    }

    #[test]
    fn combined_map_examples() {
        // t = X a = [2,3], h = X b = [1,1]
        let p = AttentionParams::rank1(m(&[&[2.0], &[3.0]]), vec![1.0, 1.0]).unwrap();
        let (maps, s) = combined_map_score(&Matrix::identity(2), &p).unwrap();
        assert_eq!(maps.combined.data(), &[2.0, 3.0]);
        assert_eq!(s, vec![5.0]);

        let p0 = AttentionParams::rank1(m(&[&[2.0, 1.0], &[3.0, -1.0]]), vec![0.0, 0.0]).unwrap();
        let (maps, s) = combined_map_score(&Matrix::identity(2), &p0).unwrap();
        assert!(maps.combined.data().iter().all(|&v| v == 0.0));
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn combined_equals_multiclass() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..50 {
            let x = random_x(9, 6, &mut rng);
            let p = AttentionParams::init(6, 4, 1, &mut rng);
            let (_, s1) = combined_map_score(&x, &p).unwrap();
            let s2 = score_multiclass(&x, &p).unwrap();
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn rank_p_examples() {
        let mut rng = SplitMix64::new(8);
        let x = random_x(5, 4, &mut rng);
        let p1 = AttentionParams::init(4, 3, 1, &mut rng);
        let s1 = score_rank_p(&x, &p1).unwrap();
        let mc = score_multiclass(&x, &p1).unwrap();
        for (a, b) in s1.iter().zip(&mc) {
            assert!(close(*a, *b, 1e-12));
        }
        let doubled = AttentionParams::new(
            vec![p1.top_down(0).clone(), p1.top_down(0).clone()],
            vec![p1.bottom_up(0).to_vec(), p1.bottom_up(0).to_vec()],
        )
        .unwrap();
        let s2 = score_rank_p(&x, &doubled).unwrap();
        for (a, b) in s2.iter().zip(&s1) {
            assert_eq!(*a, 2.0 * b);
        }
        let p3 = AttentionParams::init(4, 3, 3, &mut rng);
        let s3 = score_rank_p(&x, &p3).unwrap();
        let oracle = score_second_order_multiclass(&x, &p3.second_order_weights()).unwrap();
        for (a, b) in s3.iter().zip(&oracle) {
            assert!(close(*a, *b, 1e-9));
        }
    }

    #[test]
    fn rank_p_list_mismatch_is_an_error() {
        let a = Matrix::zeros(3, 2);
        assert!(AttentionParams::new(vec![a.clone(), a.clone()], vec![vec![0.0; 3]]).is_err());
        assert!(AttentionParams::new(vec![a], vec![vec![0.0; 2]]).is_err());
        assert!(AttentionParams::new(vec![], vec![]).is_err());
    }

    #[test]
    fn per_class_examples() {
        let mut rng = SplitMix64::new(9);
        let x = random_x(6, 4, &mut rng);
        let p = AttentionParams::init(4, 3, 1, &mut rng);
        let b = p.bottom_up(0);
        let shared = Matrix::from_fn(4, 3, |r, _| b[r]);
        let pc = PerClassParams::new(p.top_down(0).clone(), shared).unwrap();
        let s_pc = score_per_class(&x, &pc).unwrap();
        let s_mc = score_multiclass(&x, &p).unwrap();
        for (a, b) in s_pc.iter().zip(&s_mc) {
            assert!(close(*a, *b, 1e-12));
        }

        let a1 = random_v(4, &mut rng);
        let b1 = random_v(4, &mut rng);
        let pc1 = PerClassParams::new(Matrix::column(&a1).unwrap(), Matrix::column(&b1).unwrap()).unwrap();
        assert!(close(
            score_per_class(&x, &pc1).unwrap()[0],
            score_rank1(&x, &a1, &b1).unwrap().score,
            1e-12
        ));

        let pcr = PerClassParams::init(4, 5, &mut rng);
        let oracle = score_second_order_multiclass(&x, &pcr.second_order_weights()).unwrap();
        for (a, b) in score_per_class(&x, &pcr).unwrap().iter().zip(&oracle) {
            assert!(close(*a, *b, 1e-9));
        }
    }

    #[test]
    fn top_down_only_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(score_top_down_only(&x, &m(&[&[1.0], &[1.0]])).unwrap(), vec![10.0]);
        // X = I and b = 1 make the bottom-up map uniform.
        let mut rng = SplitMix64::new(10);
        let w = Matrix::from_fn(2, 3, |_, _| rng.normal());
        let p = AttentionParams::rank1(w.clone(), vec![1.0, 1.0]).unwrap();
        let a = score_top_down_only(&Matrix::identity(2), &w).unwrap();
        let b = score_multiclass(&Matrix::identity(2), &p).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!(close(*u, *v, 1e-12));
        }
        assert_eq!(score_top_down_only(&x, &Matrix::zeros(2, 2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn extract_maps_examples() {
        let mut rng = SplitMix64::new(11);
        let x = random_x(4, 3, &mut rng);
        let p = AttentionParams::init(3, 2, 1, &mut rng);
        let grids = extract_maps(&x, &p, 2, 2).unwrap();
        let h = x.matvec(p.bottom_up(0)).unwrap();
        assert_eq!(grids.bottom_up[0].get(1, 1), h[3]);
        assert_eq!(grids.bottom_up[0].data(), h.as_slice());
        let (maps, _) = combined_map_score(&x, &p).unwrap();
        for k in 0..2 {
            assert_eq!(grids.top_down[k].data(), maps.top_down.col(k).as_slice());
            assert_eq!(grids.combined[k].data(), maps.combined.col(k).as_slice());
        }
        assert!(extract_maps(&x, &p, 3, 2).is_err());

        let row = random_v(3, &mut rng);
        let constant = Matrix::from_fn(6, 3, |_, c| row[c]);
        let g = extract_maps(&constant, &p, 2, 3).unwrap();
        let first = g.bottom_up[0].data()[0];
        assert!(g.bottom_up[0].data().iter().all(|&v| v == first));
    }

    #[test]
    fn single_location_and_single_feature() {
        let x = m(&[&[2.0]]);
        let r = score_rank1(&x, &[3.0], &[5.0]).unwrap();
        assert_eq!(r.score, 2.0 * 2.0 * 3.0 * 5.0);
        assert_eq!(score_second_order(&x, &m(&[&[15.0]])).unwrap(), r.score);
    }

    #[test]
    fn rank_p_flop_count_matches_closed_form() {
        let mut rng = SplitMix64::new(12);
        let (n, f, k, p) = (7, 8, 10, 2);
        let x = random_x(n, f, &mut rng);
        let params = AttentionParams::init(f, k, p, &mut rng);
        let (_, ops) = flops::measure(|| score_rank_p(&x, &params).unwrap());
        assert_eq!(ops, (p * (4 * n * f + 2 * k * f)) as u64);
        let w = params.second_order_weights();
        let (_, ops) = flops::measure(|| score_second_order_multiclass(&x, &w).unwrap());
        assert_eq!(ops, (2 * n * f * f + 2 * k * f * f) as u64);
    }
}
