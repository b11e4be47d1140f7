//! Sequence data, the Jukes-Cantor substitution model, the pruning
//! likelihood with branch-length gradients, and the branch-length prior.

mod alignment;
mod likelihood;

pub use alignment::{parse_fasta, simulate_alignment, Alignment, STATE_A, STATE_ANY, STATE_C, STATE_G, STATE_T};
pub use likelihood::{log_likelihood, log_likelihood_grad, log_prior, log_prior_grad, PRIOR_RATE};

pub use crate::tree::BranchLengths;

/// Stationary distribution of the Jukes-Cantor model.
pub const STATIONARY: [f64; 4] = [0.25; 4];

/// Jukes-Cantor transition probabilities for a branch of `t` expected
/// substitutions per site: `(P_same, P_diff)`.
#[inline]
pub fn jc_probs(t: f64) -> (f64, f64) {
    let e = (-4.0 * t / 3.0).exp();
    (0.25 + 0.75 * e, 0.25 - 0.25 * e)
}

/// Derivatives of [`jc_probs`] with respect to `t`.
#[inline]
pub fn jc_probs_dt(t: f64) -> (f64, f64) {
    let e = (-4.0 * t / 3.0).exp();
    (-e, e / 3.0)
}

/// Full 4×4 Jukes-Cantor transition matrix.
pub fn transition_matrix(t: f64) -> crate::Result<[[f64; 4]; 4]> {
    if !(t >= 0.0) {
        return Err(crate::Error::InvalidBranchLength { edge: usize::MAX, value: t });
    }
    let (same, diff) = jc_probs(t);
    let mut p = [[diff; 4]; 4];
    for (i, row) in p.iter_mut().enumerate() {
        row[i] = same;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_matrix_limits() {
        let p = transition_matrix(0.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(p[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let p = transition_matrix(1e4).unwrap();
        assert!(p.iter().flatten().all(|&x| (x - 0.25).abs() < 1e-15));
        for &t in &[1e-6, 0.01, 0.3, 2.0, 17.0] {
            let p = transition_matrix(t).unwrap();
            for row in p {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(transition_matrix(-0.1).is_err());
        assert!(transition_matrix(f64::NAN).is_err());
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let h = 1e-6;
        for &t in &[0.0, 0.05, 0.7] {
            let (s1, d1) = jc_probs(t + h);
            let (s0, d0) = jc_probs((t - h).max(0.0));
            let w = if t == 0.0 { h } else { 2.0 * h };
            let (ds, dd) = jc_probs_dt(t);
            assert!(((s1 - s0) / w - ds).abs() < 1e-5);
            assert!(((d1 - d0) / w - dd).abs() < 1e-5);
        }
    }
}
