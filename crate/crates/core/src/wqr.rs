//! Weighted linear quantile regression, the M-step workhorse, plus the
//! homogeneous model fit.
//!
//! The weighted check-loss minimum is found exactly with a vertex simplex on
//! the standard quantile-regression linear program: the current iterate always
//! interpolates a basis of k rows, pivots move one row in and one out, and the
//! line search walks residual breakpoints until the directional slope turns
//! nonnegative. Ties split deterministically, and an optimal vertex is slid to
//! the lexicographically smallest vertex of the optimal face before returning.

use nalgebra::{DMatrix, DVector};

use crate::ald::{ald_logpdf_raw, check_loss, QuantileLevel};
use crate::bootstrap::BootstrapConfig;
use crate::error::{Error, Result};
use crate::panel::PanelDataset;

/// Weights below this threshold are dropped from the program.
pub const WEIGHT_DROP: f64 = 1e-12;

/// Degenerate zero-residual fits floor the scale here before it enters any
/// log-density.
pub const SCALE_FLOOR: f64 = 1e-8;

/// A weighted quantile regression problem over pseudo-observations.
#[derive(Debug, Clone)]
pub struct WqrProblem {
    /// Rows are observations, columns are coefficients.
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
    pub weights: DVector<f64>,
    pub q: QuantileLevel,
}

/// Minimize Σ_j weights_j · ρ_q(response_j − design_j·coef).
pub fn solve_wqr(problem: &WqrProblem) -> Result<DVector<f64>> {
    let n = problem.design.nrows();
    let k = problem.design.ncols();
    if problem.response.len() != n || problem.weights.len() != n {
        return Err(Error::Validation(
            "design, response, and weights must have the same number of rows".into(),
        ));
    }
    let x: Vec<f64> = (0..n)
        .flat_map(|i| (0..k).map(move |j| problem.design[(i, j)]))
        .collect();
    let coef = solve_rows(
        &x,
        problem.response.as_slice(),
        problem.weights.as_slice(),
        k,
        problem.q.value(),
        None,
    )?;
    Ok(DVector::from_vec(coef))
}

/// Row-major entry point used by the estimator; `names` improves rank-error
/// diagnostics for expanded designs.
pub(crate) fn solve_rows(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    k: usize,
    q: f64,
    names: Option<&[String]>,
) -> Result<Vec<f64>> {
    let n = y.len();
    assert_eq!(x.len(), n * k);
    assert_eq!(w.len(), n);
    if k == 0 {
        return Err(Error::Validation("design has no columns".into()));
    }
    if w.iter().all(|&wi| wi <= 0.0) {
        return Err(Error::Degenerate("all weights are zero".into()));
    }

    // Keep rows above the drop threshold, normalize weights by their mean so
    // rescaling every weight by a constant cannot change the solve.
    let kept: Vec<usize> = (0..n).filter(|&i| w[i] >= WEIGHT_DROP).collect();
    if kept.is_empty() {
        return Err(Error::Degenerate(
            "all weights fall below the drop threshold".into(),
        ));
    }
    let mean_w = kept.iter().map(|&i| w[i]).sum::<f64>() / kept.len() as f64;
    let rows: Vec<&[f64]> = kept.iter().map(|&i| &x[i * k..(i + 1) * k]).collect();
    let ys: Vec<f64> = kept.iter().map(|&i| y[i]).collect();
    let wn: Vec<f64> = kept.iter().map(|&i| w[i] / mean_w).collect();

    let mut simplex = QrSimplex::new(rows, ys, wn, k, q, names)?;
    simplex.run()
}

struct QrSimplex<'a> {
    rows: Vec<&'a [f64]>,
    y: Vec<f64>,
    w: Vec<f64>,
    k: usize,
    q: f64,
    basis: Vec<usize>,
}

impl<'a> QrSimplex<'a> {
    fn new(
        rows: Vec<&'a [f64]>,
        y: Vec<f64>,
        w: Vec<f64>,
        k: usize,
        q: f64,
        names: Option<&[String]>,
    ) -> Result<Self> {
        let basis = initial_basis(&rows, k, names)?;
        Ok(Self {
            rows,
            y,
            w,
            k,
            q,
            basis,
        })
    }

    fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |i, j| self.rows[self.basis[i]][j])
    }

    /// Coefficients interpolating the current basis rows, plus the inverse
    /// basis whose columns are the pivot directions.
    fn vertex(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let b = self.basis_matrix();
        let binv = b
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::numerical("singular basis encountered in the simplex"))?;
        let yb = DVector::from_fn(self.k, |i, _| self.y[self.basis[i]]);
        let beta = &binv * yb;
        Ok((beta.as_slice().to_vec(), binv))
    }

    fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = (0..self.rows.len())
            .map(|j| self.y[j] - dot(self.rows[j], beta))
            .collect();
        for &b in &self.basis {
            r[b] = 0.0;
        }
        r
    }

    /// Directional slope of the weighted objective along `d`, together with
    /// the absolute-slope mass used for tolerance scaling. `s[j] = x_j·d`.
    fn slope(&self, r: &[f64], s: &[f64]) -> (f64, f64) {
        let q = self.q;
        let mut total = 0.0;
        let mut mass = 0.0;
        for j in 0..s.len() {
            let sj = s[j];
            if sj == 0.0 {
                continue;
            }
            let wj = self.w[j];
            let ztol = 1e-11 * (1.0 + self.y[j].abs());
            let c = if r[j] > ztol {
                -q * sj
            } else if r[j] < -ztol {
                (1.0 - q) * sj
            } else {
                q * (-sj).max(0.0) + (1.0 - q) * sj.max(0.0)
            };
            total += wj * c;
            mass += wj * sj.abs();
        }
        (total, mass)
    }

    /// Walk breakpoints along `d` until the slope turns nonnegative; returns
    /// the entering row. `start_slope` must be the slope at the vertex.
    fn entering_row(&self, r: &[f64], s: &[f64], start_slope: f64) -> Option<usize> {
        let mut bps: Vec<(f64, usize)> = Vec::new();
        for j in 0..s.len() {
            let ztol = 1e-11 * (1.0 + self.y[j].abs());
            if (r[j] > ztol && s[j] > 0.0) || (r[j] < -ztol && s[j] < 0.0) {
                bps.push((r[j] / s[j], j));
            }
        }
        bps.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let mut cum = start_slope;
        for (_, j) in bps {
            cum += self.w[j] * s[j].abs();
            if cum >= 0.0 {
                return Some(j);
            }
        }
        None
    }

    fn run(&mut self) -> Result<Vec<f64>> {
        let n = self.rows.len();
        let max_pivots = 200 * (n + self.k) + 1000;
        let mut pivots = 0;

        loop {
            let (beta, binv) = self.vertex()?;
            let r = self.residuals(&beta);

            // s-values for every row against each pivot direction.
            let s_all: Vec<Vec<f64>> = (0..self.k)
                .map(|bp| {
                    let d = binv.column(bp);
                    (0..n)
                        .map(|j| match self.basis.iter().position(|&b| b == j) {
                            Some(pos) => {
                                if pos == bp {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            None => dot(self.rows[j], d.as_slice()),
                        })
                        .collect()
                })
                .collect();

            let mut best: Option<(f64, usize, f64)> = None; // (slope, bp, sign)
            for bp in 0..self.k {
                for &sign in &[1.0, -1.0] {
                    let s: Vec<f64> = s_all[bp].iter().map(|&v| sign * v).collect();
                    let (t, mass) = self.slope(&r, &s);
                    let tol = 1e-11 * (1.0 + mass);
                    if t < -tol && best.map_or(true, |(bt, _, _)| t < bt) {
                        best = Some((t, bp, sign));
                    }
                }
            }

            match best {
                None => {
                    // Optimal; slide to the lexicographically smallest vertex
                    // of the optimal face.
                    self.lex_polish()?;
                    let (beta, _) = self.vertex()?;
                    return Ok(beta);
                }
                Some((t, bp, sign)) => {
                    let s: Vec<f64> = s_all[bp].iter().map(|&v| sign * v).collect();
                    let enter = self.entering_row(&r, &s, t).ok_or_else(|| {
                        Error::numerical("unbounded descent in the quantile regression program")
                    })?;
                    self.basis[bp] = enter;
                    pivots += 1;
                    if pivots > max_pivots {
                        return Err(Error::numerical(
                            "pivot limit exceeded in the quantile regression program",
                        ));
                    }
                }
            }
        }
    }

    /// At an optimal vertex, repeatedly move along zero-slope lex-negative
    /// edges; terminates at the lex-smallest vertex of the optimal face.
    fn lex_polish(&mut self) -> Result<()> {
        let n = self.rows.len();
        for _ in 0..(8 * self.k + 32) {
            let (beta, binv) = self.vertex()?;
            let r = self.residuals(&beta);

            let mut chosen: Option<(Vec<f64>, usize, f64)> = None;
            for bp in 0..self.k {
                for &sign in &[1.0, -1.0] {
                    let d: Vec<f64> = binv.column(bp).iter().map(|&v| sign * v).collect();
                    if !lex_negative(&d) {
                        continue;
                    }
                    let s: Vec<f64> = (0..n)
                        .map(|j| match self.basis.iter().position(|&b| b == j) {
                            Some(pos) => {
                                if pos == bp {
                                    sign
                                } else {
                                    0.0
                                }
                            }
                            None => dot(self.rows[j], &d),
                        })
                        .collect();
                    let (t, mass) = self.slope(&r, &s);
                    let tol = 1e-11 * (1.0 + mass);
                    if t.abs() > tol {
                        continue;
                    }
                    let replace = match &chosen {
                        None => true,
                        Some((cur, _, _)) => lex_less(&d, cur),
                    };
                    if replace {
                        chosen = Some((d, bp, sign));
                    }
                }
            }

            let Some((d, bp, sign)) = chosen else {
                return Ok(());
            };
            let s: Vec<f64> = (0..n)
                .map(|j| match self.basis.iter().position(|&b| b == j) {
                    Some(pos) => {
                        if pos == bp {
                            sign
                        } else {
                            0.0
                        }
                    }
                    None => dot(self.rows[j], &d),
                })
                .collect();
            // The face extends to the first breakpoint along d.
            let mut first: Option<(f64, usize)> = None;
            for j in 0..n {
                let ztol = 1e-11 * (1.0 + self.y[j].abs());
                if (r[j] > ztol && s[j] > 0.0) || (r[j] < -ztol && s[j] < 0.0) {
                    let step = r[j] / s[j];
                    if first.map_or(true, |(fs, _)| step < fs) {
                        first = Some((step, j));
                    }
                }
            }
            let Some((_, enter)) = first else {
                return Ok(());
            };
            self.basis[bp] = enter;
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// First materially nonzero coordinate is negative.
fn lex_negative(d: &[f64]) -> bool {
    let norm = d.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if norm == 0.0 {
        return false;
    }
    for &v in d {
        if v.abs() > 1e-9 * norm {
            return v < 0.0;
        }
    }
    false
}

/// Lexicographic comparison of directions after sup-norm normalization.
fn lex_less(a: &[f64], b: &[f64]) -> bool {
    let na = a.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let nb = b.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    for (x, y) in a.iter().zip(b) {
        let xv = x / na;
        let yv = y / nb;
        if (xv - yv).abs() > 1e-12 {
            return xv < yv;
        }
    }
    false
}

/// Greedy modified Gram–Schmidt selection of k independent rows; errors with
/// the unidentified columns when the pool is rank deficient.
fn initial_basis(rows: &[&[f64]], k: usize, names: Option<&[String]>) -> Result<Vec<usize>> {
    let n = rows.len();
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut used = vec![false; n];

    for _ in 0..k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            let row_norm = rows[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if row_norm == 0.0 {
                continue;
            }
            let mut res = rows[j].to_vec();
            for o in &ortho {
                let c = dot(&res, o);
                for (rv, ov) in res.iter_mut().zip(o) {
                    *rv -= c * ov;
                }
            }
            let res_norm = res.iter().map(|v| v * v).sum::<f64>().sqrt();
            if res_norm <= 1e-10 * row_norm {
                continue;
            }
            if best.as_ref().map_or(true, |(bn, _, _)| res_norm > *bn) {
                best = Some((res_norm, j, res));
            }
        }
        match best {
            Some((norm, j, mut res)) => {
                for v in res.iter_mut() {
                    *v /= norm;
                }
                ortho.push(res);
                chosen.push(j);
                used[j] = true;
            }
            None => {
                let mut offending = Vec::new();
                for c in 0..k {
                    let mut e = vec![0.0; k];
                    e[c] = 1.0;
                    for o in &ortho {
                        let coef = dot(&e, o);
                        for (ev, ov) in e.iter_mut().zip(o) {
                            *ev -= coef * ov;
                        }
                    }
                    if e.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-8 {
                        offending.push(match names {
                            Some(ns) => ns[c].clone(),
                            None => format!("col{c}"),
                        });
                    }
                }
                return Err(Error::SingularDesign { columns: offending });
            }
        }
    }
    Ok(chosen)
}

/// A homogeneous linear quantile regression fit (no random coefficients).
#[derive(Debug, Clone)]
pub struct HomogeneousFit {
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    pub scale: f64,
    pub loglik: f64,
    pub se: Option<DVector<f64>>,
    pub se_scale: Option<f64>,
    pub n_units: usize,
    pub n_obs: usize,
    pub q: QuantileLevel,
}

/// Fit the homogeneous model by maximum likelihood on the asymmetric Laplace
/// working density: coefficients from the exact program, scale as the mean
/// check loss of the residuals, optional block-bootstrap standard errors.
pub fn fit_lqr(
    data: &PanelDataset,
    x: &[DMatrix<f64>],
    names: &[String],
    q: QuantileLevel,
    boot: Option<&BootstrapConfig>,
) -> Result<HomogeneousFit> {
    let (xr, yr) = stack_design(data, x);
    let n_obs = yr.len();
    let w = vec![1.0; n_obs];
    let coef = solve_rows(&xr, &yr, &w, names.len(), q.value(), Some(names))?;
    let (scale, loglik) = homogeneous_scale_loglik(&xr, &yr, &coef, q);

    let mut fit = HomogeneousFit {
        names: names.to_vec(),
        coefficients: DVector::from_vec(coef),
        scale,
        loglik,
        se: None,
        se_scale: None,
        n_units: data.n_units(),
        n_obs,
        q,
    };
    if let Some(cfg) = boot {
        let (se, se_scale) = crate::bootstrap::homogeneous_se(data, x, &fit, cfg)?;
        fit.se = Some(se);
        fit.se_scale = Some(se_scale);
    }
    Ok(fit)
}

/// Mean-check-loss scale (floored) and the summed ALD log-density.
pub(crate) fn homogeneous_scale_loglik(
    x: &[f64],
    y: &[f64],
    coef: &[f64],
    q: QuantileLevel,
) -> (f64, f64) {
    let k = coef.len();
    let n = y.len();
    let mut loss = 0.0;
    for j in 0..n {
        loss += check_loss(y[j] - dot(&x[j * k..(j + 1) * k], coef), q);
    }
    let scale = (loss / n as f64).max(SCALE_FLOOR);
    let mut ll = 0.0;
    for j in 0..n {
        let mu = dot(&x[j * k..(j + 1) * k], coef);
        ll += ald_logpdf_raw(y[j], mu, scale, q.value());
    }
    (scale, ll)
}

/// Row-major stacking of per-unit design matrices with the aligned response.
pub(crate) fn stack_design(data: &PanelDataset, mats: &[DMatrix<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = mats.first().map_or(0, |m| m.ncols());
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (u, m) in data.units.iter().zip(mats) {
        for t in 0..u.n_obs() {
            for c in 0..k {
                x.push(m[(t, c)]);
            }
            y.push(u.y[t]);
        }
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn q(v: f64) -> QuantileLevel {
        QuantileLevel::new(v).unwrap()
    }

    fn intercept_problem(y: &[f64], w: &[f64], qv: f64) -> WqrProblem {
        WqrProblem {
            design: DMatrix::from_element(y.len(), 1, 1.0),
            response: DVector::from_column_slice(y),
            weights: DVector::from_column_slice(w),
            q: q(qv),
        }
    }

    /// Smallest minimizer of Σ w·ρ_q(y − c); independent sort-based oracle.
    fn weighted_quantile_oracle(y: &[f64], w: &[f64], qv: f64) -> f64 {
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.sort_by(|&a, &b| y[a].partial_cmp(&y[b]).unwrap());
        let total: f64 = w.iter().sum();
        let mut below = 0.0;
        for &j in &order {
            // right-derivative at y_j: (1−q)·W_{≤} − q·W_{>}
            let at_or_below = below + w[j];
            let right = (1.0 - qv) * at_or_below - qv * (total - at_or_below);
            let left = (1.0 - qv) * below - qv * (total - below);
            if left <= 0.0 && right >= 0.0 {
                return y[j];
            }
            below = at_or_below;
        }
        *y.last().unwrap()
    }

    #[test]
    fn intercept_only_median() {
        let p = intercept_problem(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], 0.5);
        assert_eq!(solve_wqr(&p).unwrap()[0], 2.0);
    }

    #[test]
    fn weighted_intercept_example() {
        let p = intercept_problem(&[0.0, 10.0], &[3.0, 1.0], 0.5);
        assert_eq!(solve_wqr(&p).unwrap()[0], 0.0);
    }

    #[test]
    fn tied_median_returns_smallest_minimizer() {
        let p = intercept_problem(&[10.0, 0.0], &[1.0, 1.0], 0.5);
        assert_eq!(solve_wqr(&p).unwrap()[0], 0.0);
    }

    #[test]
    fn exact_affine_fit_recovered() {
        let mut rng = StdRng::seed_from_u64(3);
        for &qv in &[0.2, 0.5, 0.8] {
            let n = 40;
            let mut design = DMatrix::zeros(n, 2);
            let mut y = DVector::zeros(n);
            for i in 0..n {
                let xv: f64 = rng.random_range(-2.0..2.0);
                design[(i, 0)] = 1.0;
                design[(i, 1)] = xv;
                y[i] = 0.7 - 1.3 * xv;
            }
            let w = DVector::from_fn(n, |_, _| rng.random_range(0.1..3.0));
            let p = WqrProblem {
                design,
                response: y,
                weights: w,
                q: q(qv),
            };
            let beta = solve_wqr(&p).unwrap();
            assert!((beta[0] - 0.7).abs() < 1e-10);
            assert!((beta[1] + 1.3).abs() < 1e-10);
        }
    }

    #[test]
    fn all_zero_weights_rejected() {
        let p = intercept_problem(&[1.0, 2.0], &[0.0, 0.0], 0.5);
        assert!(matches!(
            solve_wqr(&p).unwrap_err(),
            Error::Degenerate(_)
        ));
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let mut design = DMatrix::zeros(5, 2);
        for i in 0..5 {
            design[(i, 0)] = 1.0;
            design[(i, 1)] = 2.0; // collinear with the first column
        }
        let p = WqrProblem {
            design,
            response: DVector::from_fn(5, |i, _| i as f64),
            weights: DVector::from_element(5, 1.0),
            q: q(0.5),
        };
        match solve_wqr(&p).unwrap_err() {
            Error::SingularDesign { columns } => assert!(!columns.is_empty()),
            other => panic!("unexpected: {other}"),
        }
    }

    /// Directional derivative of the weighted objective along ±e_c.
    fn coordinate_subgradient_ok(p: &WqrProblem, beta: &DVector<f64>, tol: f64) -> bool {
        let n = p.design.nrows();
        let qv = p.q.value();
        for c in 0..p.design.ncols() {
            for sign in [1.0, -1.0] {
                let mut slope = 0.0;
                for j in 0..n {
                    let r = p.response[j] - p.design.row(j).transpose().dot(beta);
                    let s = sign * p.design[(j, c)];
                    let contrib = if r > 1e-9 {
                        -qv * s
                    } else if r < -1e-9 {
                        (1.0 - qv) * s
                    } else {
                        qv * (-s).max(0.0) + (1.0 - qv) * s.max(0.0)
                    };
                    slope += p.weights[j] * contrib;
                }
                if slope < -tol {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn random_instances_are_subgradient_optimal() {
        let mut rng = StdRng::seed_from_u64(11);
        for trial in 0..60 {
            let n = rng.random_range(5..50);
            let k = rng.random_range(1..=4.min(n));
            let mut design = DMatrix::zeros(n, k);
            for i in 0..n {
                design[(i, 0)] = 1.0;
                for j in 1..k {
                    design[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
            let y = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
            let w = DVector::from_fn(n, |_, _| rng.random_range(0.0..2.0));
            if w.iter().all(|&v| v < WEIGHT_DROP) {
                continue;
            }
            let qv = [0.1, 0.25, 0.5, 0.77, 0.9][trial % 5];
            let p = WqrProblem {
                design,
                response: y,
                weights: w,
                q: q(qv),
            };
            match solve_wqr(&p) {
                Ok(beta) => {
                    assert!(
                        coordinate_subgradient_ok(&p, &beta, 1e-8),
                        "trial {trial} failed optimality"
                    )
                }
                Err(Error::SingularDesign { .. }) => {}
                Err(e) => panic!("trial {trial}: {e}"),
            }
        }
    }

    #[test]
    fn intercept_only_matches_sorted_oracle_exactly() {
        let mut rng = StdRng::seed_from_u64(29);
        for trial in 0..40 {
            let n = rng.random_range(1..30);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
            let qv = [0.1, 0.3, 0.5, 0.66, 0.9][trial % 5];
            let got = solve_wqr(&intercept_problem(&y, &w, qv)).unwrap()[0];
            let want = weighted_quantile_oracle(&y, &w, qv);
            assert_eq!(got, want, "trial {trial} q={qv} y={y:?} w={w:?}");
        }
    }

    #[test]
    fn weight_scaling_leaves_coefficients_unchanged() {
        let mut rng = StdRng::seed_from_u64(5);
        let n = 25;
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sin() });
        let y = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.2..2.0));
        let base = solve_wqr(&WqrProblem {
            design: design.clone(),
            response: y.clone(),
            weights: w.clone(),
            q: q(0.3),
        })
        .unwrap();
        // power-of-two scaling is bitwise, other scalings agree to rounding
        for &c in &[4.0, 0.25] {
            let scaled = solve_wqr(&WqrProblem {
                design: design.clone(),
                response: y.clone(),
                weights: &w * c,
                q: q(0.3),
            })
            .unwrap();
            assert_eq!(base, scaled, "c={c}");
        }
        for &c in &[3.0, 0.7] {
            let scaled = solve_wqr(&WqrProblem {
                design: design.clone(),
                response: y.clone(),
                weights: &w * c,
                q: q(0.3),
            })
            .unwrap();
            for i in 0..2 {
                assert!((base[i] - scaled[i]).abs() < 1e-10, "c={c}");
            }
        }
    }

    #[test]
    fn objective_dominates_least_squares() {
        let mut rng = StdRng::seed_from_u64(17);
        let n = 60;
        let design = DMatrix::from_fn(n, 2, |i, j| {
            if j == 0 {
                1.0
            } else {
                (i as f64 / 7.0).cos()
            }
        });
        let y = DVector::from_fn(n, |i, _| (i as f64).sin() * 2.0 + rng.random_range(-1.0..1.0));
        let w = DVector::from_element(n, 1.0);
        let qv = q(0.35);
        let p = WqrProblem {
            design: design.clone(),
            response: y.clone(),
            weights: w,
            q: qv,
        };
        let beta = solve_wqr(&p).unwrap();
        let ls = (design.transpose() * &design)
            .try_inverse()
            .unwrap()
            * design.transpose()
            * &y;
        let obj = |b: &DVector<f64>| -> f64 {
            (0..n)
                .map(|j| check_loss(y[j] - design.row(j).transpose().dot(b), qv))
                .sum()
        };
        assert!(obj(&beta) <= obj(&ls) + 1e-10);
    }

    #[test]
    fn lqr_constant_response() {
        let data = PanelDataset {
            units: vec![crate::panel::UnitRecord {
                unit_id: "1".into(),
                times: vec![0, 1, 2],
                y: vec![4.0, 4.0, 4.0],
                covariates: vec![vec![]; 3],
            }],
            time_grid: vec![1.0, 2.0, 3.0],
            covariate_names: vec![],
        };
        let x = vec![DMatrix::from_element(3, 1, 1.0)];
        let fit = fit_lqr(&data, &x, &["(Intercept)".into()], q(0.5), None).unwrap();
        assert_eq!(fit.coefficients[0], 4.0);
        assert_eq!(fit.scale, SCALE_FLOOR);
    }

    #[test]
    fn lqr_loglik_identity() {
        // loglik = N·log(q(1−q)/scale) − N when the scale is the mean loss
        let mut rng = StdRng::seed_from_u64(41);
        let n_units = 12;
        let t_len = 4;
        let mut units = Vec::new();
        let mut x = Vec::new();
        for i in 0..n_units {
            let y: Vec<f64> = (0..t_len).map(|_| rng.random_range(-2.0..4.0)).collect();
            units.push(crate::panel::UnitRecord {
                unit_id: format!("{i}"),
                times: (0..t_len).collect(),
                y,
                covariates: vec![vec![]; t_len],
            });
            x.push(DMatrix::from_element(t_len, 1, 1.0));
        }
        let data = PanelDataset {
            units,
            time_grid: (0..t_len).map(|t| t as f64).collect(),
            covariate_names: vec![],
        };
        let fit = fit_lqr(&data, &x, &["(Intercept)".into()], q(0.25), None).unwrap();
        let n = fit.n_obs as f64;
        let ident = n * (0.25 * 0.75 / fit.scale).ln() - n;
        assert!((fit.loglik - ident).abs() < 1e-9);
    }

    #[test]
    fn median_regression_recovers_symmetric_truth() {
        let mut rng = StdRng::seed_from_u64(99);
        let n_units = 80;
        let t_len = 5;
        let mut units = Vec::new();
        let mut x = Vec::new();
        for i in 0..n_units {
            let mut xm = DMatrix::zeros(t_len, 2);
            let mut y = Vec::new();
            for t in 0..t_len {
                let xv: f64 = rng.random_range(-1.0..1.0);
                xm[(t, 0)] = 1.0;
                xm[(t, 1)] = xv;
                // symmetric error: median of y is exactly 1.5 + 2x
                let e: f64 = rng.random_range(-1.0..1.0);
                y.push(1.5 + 2.0 * xv + e + e); // still symmetric around 0
            }
            units.push(crate::panel::UnitRecord {
                unit_id: format!("{i}"),
                times: (0..t_len).collect(),
                y,
                covariates: vec![vec![]; t_len],
            });
            x.push(xm);
        }
        let data = PanelDataset {
            units,
            time_grid: (0..t_len).map(|t| t as f64).collect(),
            covariate_names: vec![],
        };
        let fit = fit_lqr(
            &data,
            &x,
            &["(Intercept)".into(), "x".into()],
            q(0.5),
            None,
        )
        .unwrap();
        assert!((fit.coefficients[0] - 1.5).abs() < 0.35);
        assert!((fit.coefficients[1] - 2.0).abs() < 0.5);
    }
}
