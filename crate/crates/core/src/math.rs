//! Small numerical helpers shared across modules.

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `logsumexp(xs) - log(len)`.
pub fn logmeanexp(xs: &[f64]) -> f64 {
    logsumexp(xs) - (xs.len() as f64).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln((2n-5)!!)`, the log number of unrooted bifurcating topologies on `n` taxa.
pub fn ln_unrooted_tree_count(n: usize) -> f64 {
    (3..n).map(|k| ((2 * k - 3) as f64).ln()).sum()
}

/// `(2n-5)!!` as an integer, when it fits.
pub fn unrooted_tree_count(n: usize) -> Option<u64> {
    (3..n).try_fold(1u64, |acc, k| acc.checked_mul((2 * k - 3) as u64))
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_counts() {
        assert_eq!(unrooted_tree_count(3), Some(1));
        assert_eq!(unrooted_tree_count(4), Some(3));
        assert_eq!(unrooted_tree_count(5), Some(15));
        assert_eq!(unrooted_tree_count(8), Some(10395));
        assert!((ln_unrooted_tree_count(8) - 10395f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((logsumexp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert!((logmeanexp(&[3.0, 3.0, 3.0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn log_sigmoid_matches_direct() {
        for &x in &[-30.0, -2.0, 0.0, 0.7, 25.0] {
            assert!((log_sigmoid(x) - sigmoid(x).ln()).abs() < 1e-12);
        }
        assert!(log_sigmoid(-800.0).is_finite());
    }
}
