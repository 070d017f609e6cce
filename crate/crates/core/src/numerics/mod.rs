//! Deterministic, numerically stable kernels shared by every other module.
//!
//! All routines operate on 64-bit reals: the margin and bound quantities
//! downstream are differences of logits and are sensitive to cancellation.

mod mat;
mod rng;

pub use mat::Mat;
pub use rng::RngStream;

use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms. The negative-learning
/// loss evaluates `log P` on non-target classes that can be driven toward
/// zero during training.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_finite(z: &[f64], what: &str) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// `log(sum(exp(z)))` with max-subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Stable softmax. Output entries lie in `(0, 1]` and sum to one.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    check_finite(z, "softmax input")?;
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// `-log softmax(logits)[y]`, computed as `logsumexp(logits) - logits[y]`
/// rather than through a stored probability.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::invalid(format!(
            "class index {y} out of range for {} logits",
            logits.len()
        )));
    }
    check_finite(logits, "cross_entropy logits")?;
    Ok(log_sum_exp(logits) - logits[y])
}

/// `sum_k p_k ln(p_k / q_k)` with the conventions `0 ln(0/.) = 0` and `q`
/// clamped below at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        check_finite(v, "kl_divergence input")?;
        if v.iter().any(|x| *x < 0.0) {
            return Err(Error::invalid(format!("{name} has a negative entry")));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("{name} sums to {sum}, not 1")));
        }
    }
    let mut kl = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        if pk > 0.0 {
            kl += pk * (pk / qk.max(PROB_FLOOR)).ln();
        }
    }
    Ok(kl)
}

/// Index of the largest entry, lowest index winning ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_direct_arithmetic() {
        let p = softmax(&[2.0_f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_saturates_without_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(p[0] > 1.0 - 1e-12);
        assert!(p[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn softmax_sums_to_one_across_magnitudes() {
        let mut rng = RngStream::from_seed(3);
        for scale_pow in 0..6 {
            let scale = 10f64.powi(scale_pow);
            for _ in 0..50 {
                let z: Vec<f64> = (0..8).map(|_| rng.normal() * scale).collect();
                let p = softmax(&z).unwrap();
                let sum: f64 = p.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "sum={sum} at scale {scale}");
                // Distant coordinates may underflow to exactly zero.
                assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn cross_entropy_direct_arithmetic() {
        assert!((cross_entropy(&[0.0, 0.0, 0.0], 0).unwrap() - 3.0_f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-12);
        // Log-sum-exp dominated by class 1.
        let v = cross_entropy(&[0.0, 50.0, 0.0], 0).unwrap();
        assert!((v - 50.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut rng = RngStream::from_seed(4);
        for _ in 0..200 {
            let z: Vec<f64> = (0..5).map(|_| rng.normal() * 10.0).collect();
            let y = rng.index(5);
            let direct = cross_entropy(&z, y).unwrap();
            let via_softmax = -softmax(&z).unwrap()[y].ln();
            assert!((direct - via_softmax).abs() < 1e-10);
            assert!(direct >= 0.0);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn kl_identity_and_direct_values() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let v = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((v - 0.5 * (25.0f64 / 9.0).ln()).abs() < 1e-12);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_zero_iff_equal() {
        let mut rng = RngStream::from_seed(5);
        for _ in 0..500 {
            let raw: Vec<f64> = (0..6).map(|_| rng.uniform() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let raw2: Vec<f64> = (0..6).map(|_| rng.uniform() + 1e-3).collect();
            let s2: f64 = raw2.iter().sum();
            let q: Vec<f64> = raw2.iter().map(|v| v / s2).collect();

            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= 0.0);
            let equal = p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12);
            if kl == 0.0 {
                assert!(equal);
            }
            assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_rejects_length_mismatch() {
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
