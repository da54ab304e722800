//! Classification accuracy and mean average precision.

use crate::attnpool::argmax;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn metric_accuracy(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || labels.is_empty() {
        return Err(Error::Invalid("accuracy of an empty score set".into()));
    }
    if labels.len() != scores.rows() {
        return Err(Error::shape("metric_accuracy", &scores.dims(), &[labels.len()]));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(scores.row(r)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-class average precision and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// `None` for classes without any positive example.
    pub per_class: Vec<Option<f64>>,
}

impl MapReport {
    pub fn skipped(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .enumerate()
            .filter_map(|(k, ap)| ap.is_none().then_some(k))
            .collect()
    }
}

/// Average precision of one ranking: rank by descending score (ties broken by
/// ascending example index) and average the precision at each positive.
/// Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps ascending index order among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean over classes (with at least one positive) of per-class AP. `labels` is
/// a binary `m×K` matrix aligned with `scores`.
pub fn metric_map(scores: &Matrix, labels: &Matrix) -> Result<MapReport> {
    if scores.dims() != labels.dims() {
        return Err(Error::shape("metric_map", &scores.dims(), &labels.dims()));
    }
    let per_class: Vec<Option<f64>> = (0..scores.cols())
        .map(|k| {
            let positives: Vec<bool> = labels.col(k).iter().map(|&v| v > 0.5).collect();
            average_precision(&scores.col(k), &positives)
        })
        .collect();
    let aps: Vec<f64> = per_class.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(Error::Invalid("no class has a positive example".into()));
    }
    let skipped = per_class.len() - aps.len();
    if skipped > 0 {
        log::warn!("mAP: skipped {skipped} class(es) without positives");
    }
    Ok(MapReport {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let s = m(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert_eq!(metric_accuracy(&s, &[0, 1]).unwrap(), 1.0);
        assert_eq!(metric_accuracy(&s, &[0, 0]).unwrap(), 0.5);
        let flat = Matrix::filled(4, 3, 0.5);
        assert_eq!(metric_accuracy(&flat, &[0, 1, 0, 2]).unwrap(), 0.5);
        assert!(metric_accuracy(&s, &[]).is_err());
    }

    #[test]
    fn map_examples() {
        let s = m(&[&[0.9], &[0.8], &[0.1]]);
        let l = m(&[&[1.0], &[0.0], &[1.0]]);
        let r = metric_map(&s, &l).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);

        let l = m(&[&[1.0], &[1.0], &[0.0]]);
        assert_eq!(metric_map(&s, &l).unwrap().map, 1.0);
    }

    #[test]
    fn reversed_single_positive_gives_one_over_m() {
        // Brute force: put the lone positive at every rank of a reversed
        // perfect ranking and compare with the closed form.
        for m_len in 1..8 {
            let scores: Vec<f64> = (0..m_len).map(|i| i as f64).collect();
            let mut pos = vec![false; m_len];
            pos[0] = true; // the positive has the lowest score: ranked last
            let ap = average_precision(&scores, &pos).unwrap();
            assert!((ap - 1.0 / m_len as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn classes_without_positives_are_skipped() {
        let s = m(&[&[0.9, 0.1], &[0.2, 0.3]]);
        let l = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let r = metric_map(&s, &l).unwrap();
        assert_eq!(r.skipped(), vec![1]);
        assert_eq!(r.map, 1.0);
        assert!(metric_map(&s, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let ap = average_precision(&[1.0, 1.0], &[false, true]).unwrap();
        assert_eq!(ap, 0.5);
    }

    proptest! {
        #[test]
        fn map_is_invariant_to_monotone_transforms(
            raw in proptest::collection::vec(-10.0f64..10.0, 12),
            bits in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let scores = Matrix::new(6, 2, raw.clone()).unwrap();
            let labels = Matrix::new(6, 2, bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let Ok(base) = metric_map(&scores, &labels) else { return Ok(()) };
            let t = scores.map(|v| (v / 3.0).exp() * 2.0 + 1.0);
            prop_assert_eq!(metric_map(&t, &labels).unwrap(), base);
        }

        #[test]
        fn accuracy_invariant_to_row_shift(
            raw in proptest::collection::vec(-10i32..10, 15),
            shift in -100i32..100,
        ) {
            let data: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            let scores = Matrix::new(5, 3, data).unwrap();
            let labels = [0, 1, 2, 1, 0];
            let shifted = scores.map(|v| v + shift as f64);
            prop_assert_eq!(
                metric_accuracy(&scores, &labels).unwrap(),
                metric_accuracy(&shifted, &labels).unwrap()
            );
        }
    }
}
