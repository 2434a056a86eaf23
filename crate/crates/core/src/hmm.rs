//! Scaled forward–backward recursions for one unit's hidden state chain.
//!
//! The chain runs on the full discrete time grid from the first occasion
//! through the unit's last observed occasion; unobserved occasions carry a
//! unit emission. Per-step normalization plus a per-occasion log-emission
//! offset keeps every quantity finite for arbitrarily small densities.

use nalgebra::DMatrix;

/// Forward–backward products for one unit and one mixture component.
#[derive(Debug, Clone)]
pub(crate) struct ForwardBackward {
    /// Scaled forward variables, span × m; rows sum to 1.
    pub a: Vec<Vec<f64>>,
    /// Scaled backward variables, span × m.
    pub b: Vec<Vec<f64>>,
    /// Per-step normalizers after the emission offset was removed.
    pub c: Vec<f64>,
    /// Per-step log-emission offsets (0 at unobserved occasions).
    pub off: Vec<f64>,
    /// Log-likelihood of the unit's observed sequence.
    pub loglik: f64,
}

/// Run the recursions. `log_emission[t]` is `None` at unobserved occasions
/// and otherwise holds the m log-densities at occasion `t`.
pub(crate) fn forward_backward(
    delta: &[f64],
    gamma: &DMatrix<f64>,
    log_emission: &[Option<Vec<f64>>],
) -> ForwardBackward {
    let span = log_emission.len();
    let m = delta.len();
    debug_assert!(span >= 1);

    let mut a = vec![vec![0.0; m]; span];
    let mut c = vec![0.0; span];
    let mut off = vec![0.0; span];
    let mut loglik = 0.0;

    for t in 0..span {
        let mut unnorm = vec![0.0; m];
        if t == 0 {
            unnorm.copy_from_slice(delta);
        } else {
            for k in 0..m {
                let mut acc = 0.0;
                for h in 0..m {
                    acc += a[t - 1][h] * gamma[(h, k)];
                }
                unnorm[k] = acc;
            }
        }
        if let Some(lf) = &log_emission[t] {
            let max = lf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            off[t] = max;
            for k in 0..m {
                unnorm[k] *= (lf[k] - max).exp();
            }
        }
        let norm: f64 = unnorm.iter().sum();
        c[t] = norm;
        loglik += norm.ln() + off[t];
        for k in 0..m {
            a[t][k] = unnorm[k] / norm;
        }
    }

    let mut b = vec![vec![1.0; m]; span];
    for t in (0..span - 1).rev() {
        for h in 0..m {
            let mut acc = 0.0;
            for k in 0..m {
                let e = match &log_emission[t + 1] {
                    Some(lf) => (lf[k] - off[t + 1]).exp(),
                    None => 1.0,
                };
                acc += gamma[(h, k)] * e * b[t + 1][k];
            }
            b[t][h] = acc / c[t + 1];
        }
    }

    ForwardBackward {
        a,
        b,
        c,
        off,
        loglik,
    }
}

impl ForwardBackward {
    /// Smoothed state posterior at span position `t`.
    pub(crate) fn state_posterior(&self, t: usize, h: usize) -> f64 {
        self.a[t][h] * self.b[t][h]
    }

    /// One-step pairwise posterior P(S_{t−1}=h, S_t=k | y).
    pub(crate) fn pairwise(
        &self,
        gamma: &DMatrix<f64>,
        log_emission: &[Option<Vec<f64>>],
        t: usize,
        h: usize,
        k: usize,
    ) -> f64 {
        let e = match &log_emission[t] {
            Some(lf) => (lf[k] - self.off[t]).exp(),
            None => 1.0,
        };
        self.a[t - 1][h] * gamma[(h, k)] * e * self.b[t][k] / self.c[t]
    }

    /// Pairwise posterior between two occasions with only unobserved
    /// occasions strictly between them: P(S_u=h, S_w=k | y) using the
    /// `trans` = Γ^{w−u} power and the intermediate normalizers.
    pub(crate) fn pairwise_collapsed(
        &self,
        trans: &DMatrix<f64>,
        log_emission: &[Option<Vec<f64>>],
        u: usize,
        w: usize,
        h: usize,
        k: usize,
    ) -> f64 {
        let e = match &log_emission[w] {
            Some(lf) => (lf[k] - self.off[w]).exp(),
            None => 1.0,
        };
        let mut norm = 1.0;
        for t in (u + 1)..=w {
            norm *= self.c[t];
        }
        self.a[u][h] * trans[(h, k)] * e * self.b[w][k] / norm
    }
}

/// Γ^k by repeated multiplication; k is a small gap length.
pub(crate) fn matrix_power(gamma: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let m = gamma.nrows();
    let mut acc = DMatrix::identity(m, m);
    for _ in 0..k {
        acc = &acc * gamma;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::logsumexp;

    fn gamma2(diag: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[diag, 1.0 - diag, 1.0 - diag, diag])
    }

    #[test]
    fn single_occasion_uses_initial_probabilities_only() {
        let delta = [0.3, 0.7];
        let lf = vec![Some(vec![-1.0, -2.5])];
        let fb = forward_backward(&delta, &gamma2(0.9), &lf);
        let expect = logsumexp(&[0.3f64.ln() - 1.0, 0.7f64.ln() - 2.5]);
        assert!((fb.loglik - expect).abs() < 1e-12);
    }

    #[test]
    fn single_state_collapses_to_density_sum() {
        let delta = [1.0];
        let gamma = DMatrix::from_element(1, 1, 1.0);
        let lf = vec![
            Some(vec![-0.7]),
            Some(vec![-1.1]),
            Some(vec![-0.2]),
        ];
        let fb = forward_backward(&delta, &gamma, &lf);
        assert!((fb.loglik - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_path_enumeration() {
        // m=2, T=3: compare with the 8-path sum
        let delta = [0.4, 0.6];
        let gamma = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.35, 0.65]);
        let lf_vals = [[-0.3, -1.9], [-2.0, -0.1], [-0.9, -0.8]];
        let lf: Vec<Option<Vec<f64>>> =
            lf_vals.iter().map(|v| Some(v.to_vec())).collect();
        let fb = forward_backward(&delta, &gamma, &lf);

        let mut terms = Vec::new();
        for s0 in 0..2 {
            for s1 in 0..2 {
                for s2 in 0..2 {
                    let w = delta[s0].ln()
                        + gamma[(s0, s1)].ln()
                        + gamma[(s1, s2)].ln()
                        + lf_vals[0][s0]
                        + lf_vals[1][s1]
                        + lf_vals[2][s2];
                    terms.push(w);
                }
            }
        }
        assert!((fb.loglik - logsumexp(&terms)).abs() < 1e-12);

        // posterior normalization and pairwise marginal consistency
        for t in 0..3 {
            let total: f64 = (0..2).map(|h| fb.state_posterior(t, h)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        for t in 1..3 {
            for h in 0..2 {
                let marg: f64 = (0..2).map(|k| fb.pairwise(&gamma, &lf, t, h, k)).sum();
                assert!((marg - fb.state_posterior(t - 1, h)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gap_collapse_matches_explicit_unit_emissions() {
        // observed at occasions 0 and 2, gap at 1
        let delta = [0.5, 0.5];
        let gamma = gamma2(0.7);
        let lf = vec![
            Some(vec![-0.4, -2.0]),
            None,
            Some(vec![-1.5, -0.3]),
        ];
        let fb = forward_backward(&delta, &gamma, &lf);

        // same likelihood through Γ² between the two observed occasions
        let g2 = matrix_power(&gamma, 2);
        let mut terms = Vec::new();
        for s0 in 0..2 {
            for s2 in 0..2 {
                terms.push(
                    delta[s0].ln()
                        + g2[(s0, s2)].ln()
                        + lf[0].as_ref().unwrap()[s0]
                        + lf[2].as_ref().unwrap()[s2],
                );
            }
        }
        assert!((fb.loglik - logsumexp(&terms)).abs() < 1e-12);

        // collapsed pairwise marginals agree with the observed-state posterior
        for h in 0..2 {
            let marg: f64 = (0..2)
                .map(|k| fb.pairwise_collapsed(&g2, &lf, 0, 2, h, k))
                .sum();
            assert!((marg - fb.state_posterior(0, h)).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_is_one_at_unobserved_occasions() {
        let delta = [0.2, 0.8];
        let lf = vec![Some(vec![-0.1, -0.9]), None, None, Some(vec![-2.0, -0.2])];
        let fb = forward_backward(&delta, &gamma2(0.85), &lf);
        assert!((fb.c[1] - 1.0).abs() < 1e-12);
        assert!((fb.c[2] - 1.0).abs() < 1e-12);
    }
}
