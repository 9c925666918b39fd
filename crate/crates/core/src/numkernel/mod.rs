//! Dense 2-D numerics: matrices, a differentiation tape, Adam and clipping.

mod matrix;
mod optim;
mod tape;

pub use matrix::Matrix;
pub use optim::{clip_global_norm, global_norm, AdamState};
pub use tape::{Gradients, NodeId, Tape};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::domain("softmax of an empty row"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("softmax input is not finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Inverted-dropout mask: entries are `0` with probability `p`, otherwise
/// `1 / (1 - p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, seed: u64) -> Result<Matrix> {
    dropout_mask_with(rows, cols, p, &mut seeded_rng(seed))
}

pub fn dropout_mask_with(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Result<Matrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("dropout probability {p} outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(Matrix::filled(rows, cols, 1.0));
    }
    let keep = 1.0 / (1.0 - p);
    Ok(Matrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(softmax(&[5.0, 5.0, 5.0]).unwrap(), softmax(&[0.0, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[1.0, f64::INFINITY]), Err(Error::NumericDomain(_))));
        assert!(matches!(softmax(&[f64::NAN]), Err(Error::NumericDomain(_))));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 999.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn dropout_zero_is_identity() {
        assert_eq!(dropout_mask(3, 4, 0.0, 9).unwrap(), Matrix::filled(3, 4, 1.0));
    }

    #[test]
    fn dropout_keeps_about_ninety_percent() {
        let mask = dropout_mask(100, 1000, 0.1, 42).unwrap();
        let kept = mask.data().iter().filter(|&&x| x != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.9).abs() < 0.01, "kept {kept}");
        let kept_value = mask.data().iter().find(|&&x| x != 0.0).unwrap();
        assert!((kept_value - 1.0 / 0.9).abs() < 1e-15);
    }

    #[test]
    fn dropout_is_seeded() {
        assert_eq!(dropout_mask(8, 8, 0.3, 5).unwrap(), dropout_mask(8, 8, 0.3, 5).unwrap());
        assert_ne!(dropout_mask(8, 8, 0.3, 5).unwrap(), dropout_mask(8, 8, 0.3, 6).unwrap());
    }

    #[test]
    fn dropout_rejects_p_one() {
        assert!(matches!(dropout_mask(1, 1, 1.0, 0), Err(Error::NumericDomain(_))));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..40),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn clipped_norm_never_exceeds_limit(
            values in proptest::collection::vec(-100.0f64..100.0, 1..30),
            max_norm in 0.01f64..20.0,
        ) {
            let mut grads = vec![Matrix::row_vector(values)];
            clip_global_norm(&mut grads, max_norm);
            prop_assert!(global_norm(&grads) <= max_norm + 1e-9);
        }

        #[test]
        fn adam_zero_grad_fixed_point(values in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let mut p = Matrix::row_vector(values);
            let before = p.clone();
            let mut adam = AdamState::new([&p]);
            let zeros = Matrix::zeros(1, p.cols());
            adam.step(&mut [&mut p], std::slice::from_ref(&zeros)).unwrap();
            prop_assert_eq!(p, before);
        }
    }
}
