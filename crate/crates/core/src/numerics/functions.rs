use crate::error::{Error, Result};

use super::Real;

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// `log Σ exp(v_i)` with max-shift stabilization. Entries may be `-inf`;
/// the result is `-inf` only when every entry is.
pub fn logsumexp<T: Real>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::contract("logsumexp of an empty vector"));
    }
    let max = values.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        return Ok(max);
    }
    let mut sum = T::zero();
    for &v in values {
        sum = sum + (v - max).exp();
    }
    Ok(max + sum.ln())
}

/// `softmax(v / temperature)`.
pub fn softmax<T: Real>(values: &[T], temperature: T) -> Result<Vec<T>> {
    if values.is_empty() {
        return Err(Error::contract("softmax of an empty vector"));
    }
    if !(temperature > T::zero()) {
        return Err(Error::contract(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<T> = values.iter().map(|&v| v / temperature).collect();
    normalized_exp(&scaled)?.ok_or_else(|| Error::contract("softmax of an all -inf vector"))
}

/// `exp(v - max) / Σ exp(v - max)`; `None` when every entry is `-inf`.
/// NaN or `+inf` inputs are a numerical failure.
pub(crate) fn normalized_exp<T: Real>(values: &[T]) -> Result<Option<Vec<T>>> {
    if values.iter().any(|v| v.is_nan() || *v == T::infinity()) {
        return Err(Error::non_finite("softmax input"));
    }
    Ok(normalized_exp_finite(values))
}

fn normalized_exp_finite<T: Real>(values: &[T]) -> Option<Vec<T>> {
    let max = values.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        return None;
    }
    let exps: Vec<T> = values.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &exps {
        sum = sum + e;
    }
    Some(exps.into_iter().map(|e| e / sum).collect())
}

/// Cosine similarity. A zero-norm operand yields 0 with a warning.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == T::zero() || nb == T::zero() {
        log::warn!("cosine similarity with a zero-norm vector, returning 0");
        return Ok(T::zero());
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// `-ln(max(pred[target], 1e-12))`.
pub fn cross_entropy<T: Real>(pred: &[T], target: usize) -> Result<T> {
    let p = pred.get(target).ok_or_else(|| {
        Error::contract(format!(
            "target class {target} out of range for {} classes",
            pred.len()
        ))
    })?;
    Ok(-p.max(T::of(PROB_FLOOR)).ln())
}

/// Mean of squared differences.
pub fn mse<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "mse of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("mse of empty vectors"));
    }
    let mut sum = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        sum = sum + (x - y) * (x - y);
    }
    Ok(sum / T::of(a.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_flags_nan_as_numerical_failure() {
        let err = softmax(&[f64::NAN, 1.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let err = softmax(&[f64::NEG_INFINITY; 2], 1.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logsumexp_examples() {
        assert!(close(logsumexp(&[0.0f32, 0.0]).unwrap() as f64, 2f64.ln(), 1e-6));
        let base = logsumexp(&[1.0f32, 2.0, 3.0]).unwrap();
        let shifted = logsumexp(&[11.0f32, 12.0, 13.0]).unwrap();
        assert!(close((shifted - base) as f64, 10.0, 1e-5));
        // Direct summation in f64 as the oracle.
        let oracle = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!(close(base as f64, oracle, 1e-6));
    }

    #[test]
    fn logsumexp_handles_masked_entries() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(logsumexp(&[ninf, ninf]).unwrap(), ninf);
        assert!(close(logsumexp(&[ninf, 0.0]).unwrap(), 0.0, 1e-15));
        assert!(matches!(logsumexp::<f32>(&[]), Err(Error::Contract(_))));
        // Large magnitudes do not overflow.
        assert!(close(logsumexp(&[1000.0f64, 1000.0]).unwrap(), 1000.0 + 2f64.ln(), 1e-9));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0f32, 0.0, 0.0], 1.0).unwrap();
        assert!(p.iter().all(|&v| close(v as f64, 1.0 / 3.0, 1e-7)));
        assert_eq!(softmax(&[42.0f32], 0.3).unwrap(), vec![1.0]);
        let p = softmax(&[1.0f32, 2.0, 3.0], 0.5).unwrap();
        let z: f64 = [2.0f64, 4.0, 6.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [2.0f64, 4.0, 6.0].iter().enumerate() {
            assert!(close(p[i] as f64, v.exp() / z, 1e-6));
        }
        assert!(matches!(softmax(&[1.0f32], 0.0), Err(Error::Contract(_))));
        assert!(matches!(softmax(&[1.0f32], -1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine(&[3.0f32, -4.0, 1.0], &[3.0, -4.0, 1.0]).unwrap() as f64, 1.0, 1e-6));
        assert_eq!(cosine(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[0.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let a = [0.3f64, -1.2, 2.5, 0.7];
        let b = [1.1f64, 0.4, -0.6, 2.0];
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        assert!(close(cosine(&af, &bf).unwrap() as f64, dot / (na * nb), 1e-6));
        assert!(cosine(&[1.0f32], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0f32, 1.0], 1).unwrap(), 0.0);
        let uniform = [0.2f32; 5];
        assert!(close(cross_entropy(&uniform, 3).unwrap() as f64, 5f64.ln(), 1e-6));
        let pred = [0.1f64, 0.25, 0.65];
        assert!(close(cross_entropy(&pred, 2).unwrap(), -(0.65f64).ln(), 1e-15));
        assert!(close(cross_entropy(&[1.0f64, 0.0], 1).unwrap(), -(1e-12f64).ln(), 1e-9));
        assert!(matches!(cross_entropy(&pred, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.3f32, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let a = [0.1f64, 0.5, 0.4];
        let b = [0.3f64, 0.3, 0.4];
        assert!(close(mse(&a, &b).unwrap(), (0.04 + 0.04) / 3.0, 1e-15));
        assert!(matches!(mse(&[1.0f32], &[1.0, 2.0]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn logsumexp_is_shift_invariant(
            v in prop::collection::vec(-20.0f64..20.0, 1..16),
            c in -50.0f64..50.0,
        ) {
            let base = logsumexp(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((logsumexp(&shifted).unwrap() - (base + c)).abs() < 1e-6);
        }

        #[test]
        fn softmax_sums_to_one_and_commutes_with_permutation(
            v in prop::collection::vec(-10.0f32..10.0, 1..12),
            t in 0.05f32..5.0,
            rot in 0usize..12,
        ) {
            let p = softmax(&v, t).unwrap();
            let s: f32 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x > 0.0 || v.len() > 1));
            let k = rot % v.len();
            let mut rv = v.clone();
            rv.rotate_left(k);
            let mut rp = p.clone();
            rp.rotate_left(k);
            let q = softmax(&rv, t).unwrap();
            for (a, b) in rp.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            a in prop::collection::vec(-5.0f32..5.0, 4),
            b in prop::collection::vec(-5.0f32..5.0, 4),
            scale in 0.01f32..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-2) && b.iter().any(|x| x.abs() > 1e-2));
            let ab = cosine(&a, &b).unwrap();
            prop_assert!((ab - cosine(&b, &a).unwrap()).abs() < 1e-6);
            let sa: Vec<f32> = a.iter().map(|x| x * scale).collect();
            prop_assert!((ab - cosine(&sa, &b).unwrap()).abs() < 1e-6);
            prop_assert!(ab.abs() <= 1.0 + 1e-6);
        }
    }
}
