//! Bidirectional triplet hinge over in-batch negatives.

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};

pub const DEFAULT_MARGIN: f64 = 0.2;

/// `1 − a·b / (‖a‖‖b‖)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine distance with a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// `D[j, k] = 1 − a_j · b_k` for row-normalized `a` `[B, E]` and `b` `[B, E]`.
pub fn distance_matrix(g: &Graph, a: Var, b: Var) -> Result<Var> {
    let sim = g.matmul_t(a, b)?;
    Ok(g.scale_shift(sim, -1.0, 1.0))
}

/// Sum over every matched pair `k` and every other index `k'` of
/// `max(0, d(a_k, b_k) − d(a_k', b_k) + α) + max(0, d(a_k, b_k) − d(a_k, b_k') + α)`.
/// Inputs must already be unit-norm rows.
pub fn triplet_loss(g: &Graph, a: Var, b: Var, margin: f64) -> Result<Var> {
    if margin <= 0.0 {
        return Err(Error::invalid(format!("margin must be positive, got {margin}")));
    }
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::shape(format!("paired embeddings {sa:?} vs {sb:?}")));
    }
    let d = distance_matrix(g, a, b)?;
    g.triplet_hinge(d, margin)
}

/// The same objective with speech on one side and text on the other.
pub fn speech_text_triplet_loss(g: &Graph, speech: Var, text: Var, margin: f64) -> Result<Var> {
    triplet_loss(g, speech, text, margin)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::grad_check;
    use crate::tensor::Tensor;

    fn unit_rows(b: usize, e: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = Vec::with_capacity(b * e);
        for _ in 0..b {
            let row: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(row.iter().map(|x| x / n));
        }
        Tensor::matrix(b, e, data).unwrap()
    }

    fn loop_oracle(a: &Tensor, b: &Tensor, margin: f64) -> f64 {
        let n = a.rows();
        let d = |u: usize, i: usize| cosine_distance(a.row(u), b.row(i)).unwrap();
        let mut total = 0.0;
        for k in 0..n {
            for kp in 0..n {
                if kp != k {
                    total += (d(k, k) - d(kp, k) + margin).max(0.0) + (d(k, k) - d(k, kp) + margin).max(0.0);
                }
            }
        }
        total
    }

    fn loss(a: &Tensor, b: &Tensor, margin: f64) -> f64 {
        let g = Graph::new();
        let v = triplet_loss(&g, g.input(a.clone()), g.input(b.clone()), margin).unwrap();
        g.value(v).item()
    }

    #[test]
    fn cosine_distance_cases() {
        let v = [0.3, -1.2, 2.0];
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_distance(&v, &neg).unwrap() - 2.0).abs() < 1e-15);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn hand_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = unit_rows(1, 4, &mut rng);
        assert_eq!(loss(&one, &unit_rows(1, 4, &mut rng), 0.2), 0.0);

        // matched distance 0, mismatched 1
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(loss(&a, &a, 0.2), 0.0);

        // all four distances equal
        let same = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((loss(&same, &same, 0.2) - 0.8).abs() < 1e-15);
        assert_eq!(loss(&same, &same, 0.2), 0.8);
    }

    #[test]
    fn identical_rows_give_closed_form() {
        for b in 1..6usize {
            let rows = Tensor::matrix(b, 3, [0.6, 0.0, 0.8].repeat(b)).unwrap();
            let expect = 2.0 * (b * (b - 1)) as f64 * 0.2;
            assert!((loss(&rows, &rows, 0.2) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = unit_rows(4, 6, &mut rng);
        let b = unit_rows(4, 6, &mut rng);
        let report = grad_check(
            &[a, b],
            |g, v| speech_text_triplet_loss(g, g.l2_normalize(v[0])?, g.l2_normalize(v[1])?, 0.2),
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    proptest! {
        #[test]
        fn matches_loop_oracle_and_is_permutation_invariant(b in 1usize..=8, e in 2usize..8, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = unit_rows(b, e, &mut rng);
            let y = unit_rows(b, e, &mut rng);
            let v = loss(&x, &y, 0.2);
            prop_assert!((v - loop_oracle(&x, &y, 0.2)).abs() <= 1e-10);
            prop_assert!(v >= 0.0);
            let mut perm: Vec<usize> = (0..b).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % b);
            let take = |t: &Tensor| Tensor::matrix(b, e, perm.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap();
            prop_assert!((loss(&take(&x), &take(&y), 0.2) - v).abs() <= 1e-10);
        }
    }

    #[test]
    fn well_separated_batch_has_zero_loss() {
        // matched pairs coincide; every mismatch is orthogonal (distance 1 ≥ 0 + α)
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(loss(&eye, &eye, 0.2), 0.0);
    }
}
