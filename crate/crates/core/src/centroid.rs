//! The visual memory: one discriminative centroid per closed training class,
//! plus the large-margin loss pulling embeddings toward their own centroid
//! and away from the nearest other one.

use crate::error::{Error, Result};
use crate::linalg::{euclidean, Matrix};
use crate::types::{Label, LabeledExample};

/// K class centroids in direct-feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidMemory {
    centroids: Matrix,
}

impl CentroidMemory {
    pub fn new(centroids: Matrix) -> Self {
        Self { centroids }
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroid(&self, class: usize) -> &[f64] {
        self.centroids.row(class)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.centroids
    }

    /// Mean direct feature per class over one full pass. Classes with a
    /// single example use that example's feature.
    pub fn from_class_means<I>(num_classes: usize, dim: usize, features: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, Vec<f64>)>,
    {
        let mut sums = Matrix::zeros(num_classes, dim);
        let mut counts = vec![0usize; num_classes];
        for (class, feat) in features {
            if class >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: class,
                    num_classes,
                });
            }
            assert_eq!(feat.len(), dim, "feature dimension mismatch");
            for (s, x) in sums.row_mut(class).iter_mut().zip(&feat) {
                *s += x;
            }
            counts[class] += 1;
        }
        for (class, &count) in counts.iter().enumerate() {
            if count == 0 {
                return Err(Error::EmptyClass { class });
            }
            let inv = 1.0 / count as f64;
            for s in sums.row_mut(class) {
                *s *= inv;
            }
        }
        Ok(Self { centroids: sums })
    }
}

/// Initialize the memory with one full pass of the extractor over the
/// training set.
pub fn init_centroids<F>(
    examples: &[LabeledExample],
    num_classes: usize,
    dim: usize,
    mut extractor: F,
) -> Result<CentroidMemory>
where
    F: FnMut(&LabeledExample) -> Vec<f64>,
{
    let features = examples.iter().filter_map(|ex| match ex.label {
        Label::Known(class) => Some((class, extractor(ex))),
        Label::Open => None,
    });
    CentroidMemory::from_class_means(num_classes, dim, features)
}

/// For each class present in the batch:
/// `c ← momentum·c + (1−momentum)·mean(batch features of that class)`.
/// Classes absent from the batch are untouched.
pub fn update_centroids(
    features: &[Vec<f64>],
    labels: &[usize],
    memory: &mut CentroidMemory,
    momentum: f64,
) -> Result<()> {
    assert_eq!(features.len(), labels.len(), "features/labels mismatch");
    assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
    let k = memory.num_classes();
    let dim = memory.dim();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (feat, &label) in features.iter().zip(labels) {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: k,
            });
        }
        for (s, x) in sums.row_mut(label).iter_mut().zip(feat) {
            *s += x;
        }
        counts[label] += 1;
    }
    for class in 0..k {
        if counts[class] == 0 {
            continue;
        }
        let inv = 1.0 / counts[class] as f64;
        let row = memory.centroids.row_mut(class);
        for (c, s) in row.iter_mut().zip(sums.row(class)) {
            *c = momentum * *c + (1.0 - momentum) * (s * inv);
        }
    }
    Ok(())
}

/// Distances from `v` to every centroid.
fn distances(v: &[f64], memory: &CentroidMemory) -> Vec<f64> {
    (0..memory.num_classes())
        .map(|i| euclidean(v, memory.centroid(i)))
        .collect()
}

/// Index of the nearest centroid excluding `y`; ties break to the lowest
/// class index.
fn nearest_negative(dists: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_d = f64::INFINITY;
    for (i, &d) in dists.iter().enumerate() {
        if i != y && d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Large-margin loss of an embedding against the memory.
///
/// Nearest-negative form (default):
/// `max(0, ‖v − c_y‖ − min_{i≠y} ‖v − c_i‖ + m)`.
///
/// With `nearest_negative = false` the literal all-negatives sum
/// `max(0, ‖v − c_y‖ − Σ_{i≠y} ‖v − c_i‖ + m)` is used instead; it is kept
/// only for comparison since the sum grows with K and deactivates the hinge
/// for all but tiny class counts.
pub fn large_margin_loss(
    v: &[f64],
    y: usize,
    memory: &CentroidMemory,
    margin: f64,
    nearest_negative_form: bool,
) -> Result<f64> {
    Ok(large_margin_loss_with_grad(v, y, memory, margin, nearest_negative_form)?.0)
}

/// Loss plus gradient w.r.t. `v`. The hinge and the distance terms are
/// differentiable almost everywhere; at `v == c_i` the subgradient 0 is used
/// for that term.
pub fn large_margin_loss_with_grad(
    v: &[f64],
    y: usize,
    memory: &CentroidMemory,
    margin: f64,
    nearest_negative_form: bool,
) -> Result<(f64, Vec<f64>)> {
    let k = memory.num_classes();
    if k < 2 {
        return Err(Error::NoNegativeCentroid(k));
    }
    if y >= k {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_classes: k,
        });
    }
    let dists = distances(v, memory);
    let dim = v.len();

    // Unit vector from centroid i toward v, or zero at coincidence.
    let unit_from = |i: usize| -> Vec<f64> {
        let d = dists[i];
        if d <= f64::EPSILON {
            return vec![0.0; dim];
        }
        v.iter()
            .zip(memory.centroid(i))
            .map(|(a, b)| (a - b) / d)
            .collect()
    };

    let (arg, mut grad) = if nearest_negative_form {
        let j = nearest_negative(&dists, y);
        let arg = dists[y] - dists[j] + margin;
        let mut grad = unit_from(y);
        let neg = unit_from(j);
        for (g, n) in grad.iter_mut().zip(&neg) {
            *g -= n;
        }
        (arg, grad)
    } else {
        let neg_sum: f64 = dists
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y)
            .map(|(_, d)| d)
            .sum();
        let arg = dists[y] - neg_sum + margin;
        let mut grad = unit_from(y);
        for i in 0..k {
            if i == y {
                continue;
            }
            let neg = unit_from(i);
            for (g, n) in grad.iter_mut().zip(&neg) {
                *g -= n;
            }
        }
        (arg, grad)
    };

    if arg > 0.0 {
        Ok((arg, grad))
    } else {
        grad.iter_mut().for_each(|g| *g = 0.0);
        Ok((0.0, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::types::Label;
    use rand::Rng;

    fn mem(rows: &[&[f64]]) -> CentroidMemory {
        CentroidMemory::new(Matrix::from_rows(rows))
    }

    #[test]
    fn mean_of_two_points() {
        let m = CentroidMemory::from_class_means(
            1,
            2,
            vec![(0, vec![1.0, 0.0]), (0, vec![3.0, 0.0])],
        )
        .unwrap();
        assert_eq!(m.centroid(0), &[2.0, 0.0]);
    }

    #[test]
    fn single_example_class_keeps_its_feature() {
        let m = CentroidMemory::from_class_means(
            2,
            2,
            vec![(0, vec![1.0, 2.0]), (1, vec![5.0, -1.0]), (0, vec![3.0, 0.0])],
        )
        .unwrap();
        assert_eq!(m.centroid(1), &[5.0, -1.0]);
    }

    #[test]
    fn empty_class_is_an_error() {
        let err = CentroidMemory::from_class_means(2, 2, vec![(0, vec![1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, Error::EmptyClass { class: 1 }));
    }

    #[test]
    fn init_over_fixed_seed_matches_brute_force_means() {
        // 3 classes × 4 points in 2-D; recompute the means with an
        // independent pass.
        let mut rng = stream(11, "centroid-init");
        let mut examples = Vec::new();
        for class in 0..3usize {
            for i in 0..4 {
                let input = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                examples.push(LabeledExample::new(
                    format!("c{class}i{i}"),
                    input,
                    Label::Known(class),
                ));
            }
        }
        // The "extractor" here doubles coordinates.
        let extract = |ex: &LabeledExample| ex.input.iter().map(|x| 2.0 * x).collect::<Vec<_>>();
        let m = init_centroids(&examples, 3, 2, extract).unwrap();

        for class in 0..3 {
            let mut sum = [0.0f64; 2];
            let mut count = 0.0;
            for ex in &examples {
                if ex.label == Label::Known(class) {
                    sum[0] += 2.0 * ex.input[0];
                    sum[1] += 2.0 * ex.input[1];
                    count += 1.0;
                }
            }
            assert!((m.centroid(class)[0] - sum[0] / count).abs() < 1e-12);
            assert!((m.centroid(class)[1] - sum[1] / count).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_zero_replaces_with_batch_mean() {
        let mut m = mem(&[&[1.0, 1.0], &[0.0, 0.0]]);
        update_centroids(
            &[vec![2.0, 0.0], vec![4.0, 2.0]],
            &[0, 0],
            &mut m,
            0.0,
        )
        .unwrap();
        assert_eq!(m.centroid(0), &[3.0, 1.0]);
    }

    #[test]
    fn absent_class_is_bitwise_unchanged() {
        let mut m = mem(&[&[1.0, 1.0], &[0.25, -0.75]]);
        let before = m.centroid(1).to_vec();
        update_centroids(&[vec![2.0, 0.0]], &[0], &mut m, 0.5).unwrap();
        assert_eq!(m.centroid(1), before.as_slice());
    }

    #[test]
    fn momentum_convex_combination() {
        let mut m = mem(&[&[1.0, 1.0]]);
        // Single class so the loss side is unused; momentum 0.9 with batch
        // mean (2, 0) → (1.1, 0.9).
        update_centroids(&[vec![2.0, 0.0]], &[0], &mut m, 0.9).unwrap();
        assert!((m.centroid(0)[0] - 1.1).abs() < 1e-12);
        assert!((m.centroid(0)[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut m = mem(&[&[0.0, 0.0]]);
        let err = update_centroids(&[vec![1.0, 1.0]], &[3], &mut m, 0.5).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, .. }));
    }

    #[test]
    fn hinge_inactive_when_margin_satisfied() {
        let m = mem(&[&[0.0, 0.0], &[10.0, 0.0]]);
        // v = c_0, other centroid at distance 10 ≥ m = 5.
        let loss = large_margin_loss(&[0.0, 0.0], 0, &m, 5.0, true).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn coincident_centroids_cost_the_margin() {
        let m = mem(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let loss = large_margin_loss(&[1.0, 2.0], 0, &m, 5.0, true).unwrap();
        assert_eq!(loss, 5.0);
    }

    #[test]
    fn hand_set_three_class_case_matches_arithmetic() {
        // Centroids: c0 = (0,0), c1 = (4,0), c2 = (0,3); v = (1,0), y = 0.
        // d0 = 1, d1 = 3, d2 = √10; nearest negative is c1.
        // loss = max(0, 1 − 3 + 5) = 3.
        let m = mem(&[&[0.0, 0.0], &[4.0, 0.0], &[0.0, 3.0]]);
        let loss = large_margin_loss(&[1.0, 0.0], 0, &m, 5.0, true).unwrap();
        assert!((loss - 3.0).abs() < 1e-12);

        // Literal all-negatives form: max(0, 1 − (3 + √10) + 5).
        let lit = large_margin_loss(&[1.0, 0.0], 0, &m, 5.0, false).unwrap();
        let want = (1.0 - (3.0 + 10.0f64.sqrt()) + 5.0).max(0.0);
        assert!((lit - want).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_translation_invariant() {
        let mut rng = stream(12, "lm-translate");
        for _ in 0..200 {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let m = mem(&[&rows[0], &rows[1], &rows[2]]);
            let v: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = rng.gen_range(0..3);
            let loss = large_margin_loss(&v, y, &m, 5.0, true).unwrap();
            assert!(loss >= 0.0);

            let t = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let shifted_rows: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| vec![r[0] + t[0], r[1] + t[1]])
                .collect();
            let m2 = mem(&[&shifted_rows[0], &shifted_rows[1], &shifted_rows[2]]);
            let v2 = vec![v[0] + t[0], v[1] + t[1]];
            let loss2 = large_margin_loss(&v2, y, &m2, 5.0, true).unwrap();
            assert!((loss - loss2).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_memory_is_rejected() {
        let m = mem(&[&[0.0, 0.0]]);
        assert!(matches!(
            large_margin_loss(&[1.0, 0.0], 0, &m, 5.0, true),
            Err(Error::NoNegativeCentroid(1))
        ));
    }

    #[test]
    fn descent_on_the_loss_approaches_own_centroid() {
        // Minimizing over v with centroids frozen moves v strictly closer
        // to c_y on random instances.
        let mut rng = stream(13, "lm-descent");
        for trial in 0..10 {
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let m = mem(&[&rows[0], &rows[1], &rows[2], &rows[3]]);
            let mut v: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = trial % 4;
            let start = euclidean(&v, m.centroid(y));
            for _ in 0..200 {
                let (_, grad) = large_margin_loss_with_grad(&v, y, &m, 5.0, true).unwrap();
                for (vi, g) in v.iter_mut().zip(&grad) {
                    *vi -= 0.05 * g;
                }
            }
            let end = euclidean(&v, m.centroid(y));
            assert!(
                end < start,
                "trial {trial}: distance did not shrink ({start} → {end})"
            );
        }
    }
}
