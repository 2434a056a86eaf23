//! Small numeric helpers: stable sums, sample quantiles, reference
//! distribution functions, and seed mixing.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Numerically stable log-sum-exp.
#[inline]
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Kahan compensated summation; used wherever a fixed reduction order must
/// also be accurate (log-likelihood totals).
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Type-7 sample quantile (linear interpolation) of an unsorted slice.
pub fn sample_quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    }
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than 2 values.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Quantile of a chi-square distribution with `k` degrees of freedom, found
/// by bisection on the CDF.
pub fn chi_square_quantile(p: f64, k: f64) -> f64 {
    assert!((0.0..1.0).contains(&p) && p > 0.0);
    let dist = ChiSquared::new(k).expect("positive degrees of freedom");
    let mut lo = 0.0;
    let mut hi = k + 1.0;
    while dist.cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dist.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// splitmix64 mixer; the basis for deriving reproducible per-task seeds.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a base seed with a sequence of labels into one derived seed.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    let mut acc = mix64(base);
    for &l in labels {
        acc = mix64(acc ^ mix64(l));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_direct_sum() {
        let xs = [-1.0f64, 0.5, 2.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs) - direct).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_handles_large_magnitudes() {
        let xs = [-1000.0, -1001.0];
        let expect = -1000.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((logsumexp(&xs) - expect).abs() < 1e-12);
    }

    #[test]
    fn quantile_midpoints() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(sample_quantile(&v, 0.5), 2.5);
        assert_eq!(sample_quantile(&v, 0.0), 1.0);
        assert_eq!(sample_quantile(&v, 1.0), 4.0);
    }

    #[test]
    fn chi_square_quantile_round_trips() {
        let dist = ChiSquared::new(3.0).unwrap();
        for p in [0.1, 0.5, 0.9] {
            let x = chi_square_quantile(p, 3.0);
            assert!((dist.cdf(x) - p).abs() < 1e-9);
        }
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        let a = derive_seed(7, &[1, 2]);
        let b = derive_seed(7, &[1, 3]);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, &[1, 2]));
    }
}
