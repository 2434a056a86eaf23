//! Synthetic longitudinal data generators with known truth, plus exhaustive
//! enumeration oracles for the likelihood and the posterior expectations on
//! small instances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::ald::{ald_inv_cdf, ald_logpdf_raw, QuantileLevel};
use crate::em::{MixtureParams, ModelSpec, Posteriors};
use crate::error::{Error, Result};
use crate::hmm::matrix_power;
use crate::panel::{DesignSet, PanelDataset, RoleSpec, Term, UnitRecord};
use crate::stats::{chi_square_quantile, logsumexp, normal_quantile, KahanSum};
use crate::wqr::SCALE_FLOOR;

/// Distribution of one generated covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnLaw {
    /// Constant 1 (not stored as a CSV column; the design gets an intercept).
    Intercept,
    /// iid U(0, 1) per observation.
    Uniform01,
    /// Unit-level Bernoulli(1/2), constant over time.
    UnitBernoulli,
    /// Occasion index scaled to [0, 1].
    TimeTrend,
}

/// Error law; each is shifted so its q-quantile is exactly 0, making the
/// generating coefficients the estimand of quantile regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorLaw {
    Ald { sigma: f64 },
    Gaussian { sd: f64 },
    CenteredChiSquare { df: f64 },
}

/// Response-missingness rule applied after generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingRule {
    None,
    /// After the first occasion, drop out with this hazard per occasion;
    /// once dropped, stay dropped.
    MonotoneDropout { hazard: f64 },
    /// Every occasion after the first is independently unobserved with this
    /// probability (non-monotone gaps).
    RandomGaps { prob: f64 },
}

/// Full description of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub true_params: MixtureParams,
    pub q: QuantileLevel,
    pub n_units: usize,
    pub t_len: usize,
    pub x_laws: Vec<ColumnLaw>,
    pub z_laws: Vec<ColumnLaw>,
    pub w_laws: Vec<ColumnLaw>,
    pub missingness: MissingRule,
    pub error: ErrorLaw,
    pub seed: u64,
}

/// The latent draw behind a simulated dataset; kept separate from the data
/// so estimation code cannot read it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentTruth {
    /// Component index per unit.
    pub components: Vec<usize>,
    /// State path per unit over all generated occasions.
    pub states: Vec<Vec<usize>>,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 || self.t_len == 0 {
            return Err(Error::Validation("n and T must be positive".into()));
        }
        let g = self.true_params.pg.len();
        let m = self.true_params.delta.len();
        self.true_params.validate(
            self.x_laws.len(),
            self.z_laws.len(),
            self.w_laws.len(),
            g,
            m,
        )?;
        Ok(())
    }

    /// Variable roles reproducing this generator's design from the dataset.
    pub fn roles(&self) -> RoleSpec {
        let terms = |laws: &[ColumnLaw], prefix: &str| -> Vec<Term> {
            laws.iter()
                .enumerate()
                .map(|(j, law)| match law {
                    ColumnLaw::Intercept => Term::Intercept,
                    _ => Term::Col(format!("{prefix}{}", j + 1)),
                })
                .collect()
        };
        RoleSpec {
            fixed: terms(&self.x_laws, "x"),
            random_tc: terms(&self.z_laws, "z"),
            random_tv: terms(&self.w_laws, "w"),
        }
    }
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn draw_error(rng: &mut impl Rng, law: &ErrorLaw, q: f64) -> f64 {
    match law {
        ErrorLaw::Ald { sigma } => {
            let u: f64 = rng.random();
            ald_inv_cdf(u, *sigma, q)
        }
        ErrorLaw::Gaussian { sd } => {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            sd * z - sd * normal_quantile(q)
        }
        ErrorLaw::CenteredChiSquare { df } => {
            let x: f64 = rand_distr::ChiSquared::new(*df)
                .expect("positive df")
                .sample(rng);
            x - chi_square_quantile(q, *df)
        }
    }
}

/// Generate a dataset from the model, returning the panel, its design
/// matrices, and the latent truth.
pub fn simulate(spec: &GeneratorSpec) -> Result<(PanelDataset, DesignSet, LatentTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.x_laws.len();
    let r = spec.z_laws.len();
    let l = spec.w_laws.len();
    let params = &spec.true_params;
    let q = spec.q.value();
    let t_len = spec.t_len;

    let pg: Vec<f64> = params.pg.iter().copied().collect();
    let delta: Vec<f64> = params.delta.iter().copied().collect();

    // covariate column layout: non-intercept laws become named columns
    let mut covariate_names = Vec::new();
    let mut col_index: Vec<Vec<Option<usize>>> = Vec::new(); // per role, per law
    for (laws, prefix) in [(&spec.x_laws, "x"), (&spec.z_laws, "z"), (&spec.w_laws, "w")] {
        let mut idxs = Vec::new();
        for (j, law) in laws.iter().enumerate() {
            if *law == ColumnLaw::Intercept {
                idxs.push(None);
            } else {
                idxs.push(Some(covariate_names.len()));
                covariate_names.push(format!("{prefix}{}", j + 1));
            }
        }
        col_index.push(idxs);
    }

    let mut units = Vec::with_capacity(spec.n_units);
    let mut components = Vec::with_capacity(spec.n_units);
    let mut states = Vec::with_capacity(spec.n_units);
    let mut observed_occasions: Vec<Vec<usize>> = Vec::with_capacity(spec.n_units);

    for i in 0..spec.n_units {
        let g = sample_categorical(&mut rng, &pg);
        let mut path = Vec::with_capacity(t_len);
        let mut s = sample_categorical(&mut rng, &delta);
        path.push(s);
        for _ in 1..t_len {
            let row: Vec<f64> = (0..delta.len()).map(|k| params.gamma[(s, k)]).collect();
            s = sample_categorical(&mut rng, &row);
            path.push(s);
        }

        let bern: f64 = rng.random();
        let unit_level = if bern < 0.5 { 0.0 } else { 1.0 };

        fn draw_cols(
            rng: &mut impl Rng,
            laws: &[ColumnLaw],
            t: usize,
            t_len: usize,
            unit_level: f64,
        ) -> Vec<f64> {
            laws.iter()
                .map(|law| match law {
                    ColumnLaw::Intercept => 1.0,
                    ColumnLaw::Uniform01 => rng.random(),
                    ColumnLaw::UnitBernoulli => unit_level,
                    ColumnLaw::TimeTrend => t as f64 / t_len as f64,
                })
                .collect()
        }

        let mut xs = Vec::with_capacity(t_len);
        let mut zs = Vec::with_capacity(t_len);
        let mut ws = Vec::with_capacity(t_len);
        let mut ys = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xv = draw_cols(&mut rng, &spec.x_laws, t, t_len, unit_level);
            let zv = draw_cols(&mut rng, &spec.z_laws, t, t_len, unit_level);
            let wv = draw_cols(&mut rng, &spec.w_laws, t, t_len, unit_level);
            let mut mu = 0.0;
            for j in 0..p {
                mu += xv[j] * params.betaf[j];
            }
            for j in 0..r {
                mu += zv[j] * params.betar_tc[(g, j)];
            }
            for j in 0..l {
                mu += wv[j] * params.betar_tv[(path[t], j)];
            }
            ys.push(mu + draw_error(&mut rng, &spec.error, q));
            xs.push(xv);
            zs.push(zv);
            ws.push(wv);
        }

        let observed: Vec<usize> = match spec.missingness {
            MissingRule::None => (0..t_len).collect(),
            MissingRule::MonotoneDropout { hazard } => {
                let mut obs = vec![0];
                for t in 1..t_len {
                    if rng.random::<f64>() < hazard {
                        break;
                    }
                    obs.push(t);
                }
                obs
            }
            MissingRule::RandomGaps { prob } => {
                let mut obs = vec![0];
                for t in 1..t_len {
                    if rng.random::<f64>() >= prob {
                        obs.push(t);
                    }
                }
                obs
            }
        };

        components.push(g);
        states.push(path);
        units.push((i, observed.clone(), xs, zs, ws, ys));
        observed_occasions.push(observed);
    }

    // The grid holds the distinct observed occasions (1-based time values).
    let mut grid_occasions: Vec<usize> = observed_occasions.iter().flatten().copied().collect();
    grid_occasions.sort_unstable();
    grid_occasions.dedup();
    let grid_pos = |occ: usize| grid_occasions.binary_search(&occ).expect("observed occasion");

    let mut records = Vec::with_capacity(spec.n_units);
    let mut x_mats = Vec::with_capacity(spec.n_units);
    let mut z_mats = Vec::with_capacity(spec.n_units);
    let mut w_mats = Vec::with_capacity(spec.n_units);
    for (i, observed, xs, zs, ws, ys) in units {
        let t_i = observed.len();
        let mut covs = Vec::with_capacity(t_i);
        for &t in &observed {
            let mut row = vec![0.0; covariate_names.len()];
            for (role, cols) in [(&xs, 0usize), (&zs, 1), (&ws, 2)] {
                for (j, idx) in col_index[cols].iter().enumerate() {
                    if let Some(c) = idx {
                        row[*c] = role[t][j];
                    }
                }
            }
            covs.push(row);
        }
        records.push(UnitRecord {
            unit_id: format!("{}", i + 1),
            times: observed.iter().map(|&t| grid_pos(t)).collect(),
            y: observed.iter().map(|&t| ys[t]).collect(),
            covariates: covs,
        });
        let fill = |vals: &Vec<Vec<f64>>, width: usize| -> DMatrix<f64> {
            DMatrix::from_fn(t_i, width, |row, col| vals[observed[row]][col])
        };
        x_mats.push(fill(&xs, p));
        z_mats.push(fill(&zs, r));
        w_mats.push(fill(&ws, l));
    }

    let data = PanelDataset {
        units: records,
        time_grid: grid_occasions.iter().map(|&t| (t + 1) as f64).collect(),
        covariate_names,
    };
    data.validate()?;
    let names = |laws: &[ColumnLaw], prefix: &str| -> Vec<String> {
        laws.iter()
            .enumerate()
            .map(|(j, law)| match law {
                ColumnLaw::Intercept => "(Intercept)".to_string(),
                _ => format!("{prefix}{}", j + 1),
            })
            .collect()
    };
    let designs = DesignSet {
        x: x_mats,
        z: z_mats,
        w: w_mats,
        x_names: names(&spec.x_laws, "x"),
        z_names: names(&spec.z_laws, "z"),
        w_names: names(&spec.w_laws, "w"),
    };
    Ok((
        data,
        designs,
        LatentTruth {
            components,
            states,
        },
    ))
}

/// Effective per-unit designs with the same G=1 / m=1 folding the estimator
/// applies.
struct EffectiveUnit {
    times: Vec<usize>,
    y: Vec<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
}

fn effective_units(
    data: &PanelDataset,
    designs: &DesignSet,
    spec: &ModelSpec,
) -> Vec<EffectiveUnit> {
    let fold_z = spec.n_components == 1 && designs.r() > 0;
    let fold_w = spec.n_states == 1 && designs.l() > 0;
    data.units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let t_i = u.n_obs();
            let mut x = designs.x[i].clone();
            if fold_z {
                x = hcat2(&x, &designs.z[i]);
            }
            if fold_w {
                x = hcat2(&x, &designs.w[i]);
            }
            EffectiveUnit {
                times: u.times.clone(),
                y: u.y.clone(),
                x,
                z: if fold_z {
                    DMatrix::zeros(t_i, 0)
                } else {
                    designs.z[i].clone()
                },
                w: if fold_w {
                    DMatrix::zeros(t_i, 0)
                } else {
                    designs.w[i].clone()
                },
            }
        })
        .collect()
}

fn hcat2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = a.nrows();
    let mut out = DMatrix::zeros(rows, a.ncols() + b.ncols());
    for i in 0..rows {
        for j in 0..a.ncols() {
            out[(i, j)] = a[(i, j)];
        }
        for j in 0..b.ncols() {
            out[(i, a.ncols() + j)] = b[(i, j)];
        }
    }
    out
}

fn location(
    unit: &EffectiveUnit,
    params: &MixtureParams,
    t: usize,
    g: usize,
    h: usize,
) -> f64 {
    let mut mu = 0.0;
    for j in 0..unit.x.ncols() {
        mu += unit.x[(t, j)] * params.betaf[j];
    }
    for j in 0..unit.z.ncols() {
        mu += unit.z[(t, j)] * params.betar_tc[(g, j)];
    }
    for j in 0..unit.w.ncols() {
        mu += unit.w[(t, j)] * params.betar_tv[(h, j)];
    }
    mu
}

const ENUMERATION_GUARD: usize = 1_000_000;

/// Exact observed-data log-likelihood by enumerating every component and
/// state path over the observed occasions, with Γ^gap transition weights
/// across unobserved occasions and the propagated initial vector over any
/// leading gap.
pub fn brute_force_loglik(
    params: &MixtureParams,
    data: &PanelDataset,
    designs: &DesignSet,
    spec: &ModelSpec,
) -> Result<f64> {
    let g_n = spec.n_components;
    let m_n = spec.n_states;
    let q = spec.q.value();
    let sigma = params.scale.max(SCALE_FLOOR);
    let units = effective_units(data, designs, spec);

    let mut total = KahanSum::new();
    for unit in &units {
        let t_i = unit.y.len();
        let n_paths = g_n
            .checked_mul(m_n.checked_pow(t_i as u32).ok_or_else(guard_err)?)
            .ok_or_else(guard_err)?;
        if n_paths > ENUMERATION_GUARD {
            return Err(guard_err());
        }
        let init = DVector::from_iterator(m_n, params.delta.iter().copied()).transpose()
            * matrix_power(&params.gamma, unit.times[0]);
        let trans: Vec<DMatrix<f64>> = (1..t_i)
            .map(|t| matrix_power(&params.gamma, unit.times[t] - unit.times[t - 1]))
            .collect();

        let mut terms = Vec::with_capacity(n_paths);
        for g in 0..g_n {
            let mut path = vec![0usize; t_i];
            loop {
                let mut logw = params.pg[g].ln() + init[path[0]].ln();
                for t in 1..t_i {
                    logw += trans[t - 1][(path[t - 1], path[t])].ln();
                }
                for t in 0..t_i {
                    logw += ald_logpdf_raw(unit.y[t], location(unit, params, t, g, path[t]), sigma, q);
                }
                terms.push(logw);
                if !advance(&mut path, m_n) {
                    break;
                }
            }
        }
        total.add(logsumexp(&terms));
    }
    Ok(total.value())
}

fn guard_err() -> Error {
    Error::Size(format!(
        "enumeration exceeds the {ENUMERATION_GUARD}-term guard"
    ))
}

fn advance(path: &mut [usize], base: usize) -> bool {
    for digit in path.iter_mut().rev() {
        *digit += 1;
        if *digit < base {
            return true;
        }
        *digit = 0;
    }
    false
}

/// Exact posterior expectations by enumerating component × state paths over
/// each unit's grid span (emission terms only at observed occasions).
pub fn brute_force_posteriors(
    params: &MixtureParams,
    data: &PanelDataset,
    designs: &DesignSet,
    spec: &ModelSpec,
) -> Result<Posteriors> {
    let g_n = spec.n_components;
    let m_n = spec.n_states;
    let q = spec.q.value();
    let sigma = params.scale.max(SCALE_FLOOR);
    let units = effective_units(data, designs, spec);
    let n = units.len();

    let mut u = DMatrix::zeros(n, g_n);
    let mut v = Vec::with_capacity(n);
    let mut vv = Vec::with_capacity(n);
    let mut unit_loglik = Vec::with_capacity(n);
    let mut total = KahanSum::new();
    let mut delta_post = DVector::zeros(m_n);
    let mut trans_post = DMatrix::zeros(m_n, m_n);

    for (i, unit) in units.iter().enumerate() {
        let t_i = unit.y.len();
        let span = unit.times.last().unwrap() + 1;
        let n_paths = g_n
            .checked_mul(m_n.checked_pow(span as u32).ok_or_else(guard_err)?)
            .ok_or_else(guard_err)?;
        if n_paths > ENUMERATION_GUARD {
            return Err(guard_err());
        }
        let obs_at: Vec<Option<usize>> = {
            let mut map = vec![None; span];
            for (t, &tau) in unit.times.iter().enumerate() {
                map[tau] = Some(t);
            }
            map
        };

        // first pass: the normalizer
        let mut terms = Vec::with_capacity(n_paths);
        let mut weights: Vec<(usize, Vec<usize>, f64)> = Vec::with_capacity(n_paths);
        for g in 0..g_n {
            let mut path = vec![0usize; span];
            loop {
                let mut logw = params.pg[g].ln() + params.delta[path[0]].ln();
                for tau in 1..span {
                    logw += params.gamma[(path[tau - 1], path[tau])].ln();
                }
                for (tau, obs) in obs_at.iter().enumerate() {
                    if let Some(t) = obs {
                        logw += ald_logpdf_raw(
                            unit.y[*t],
                            location(unit, params, *t, g, path[tau]),
                            sigma,
                            q,
                        );
                    }
                }
                terms.push(logw);
                weights.push((g, path.clone(), logw));
                if !advance(&mut path, m_n) {
                    break;
                }
            }
        }
        let norm = logsumexp(&terms);
        unit_loglik.push(norm);
        total.add(norm);

        let mut v_i = DMatrix::zeros(t_i, g_n * m_n);
        let mut vv_i = vec![0.0; t_i.saturating_sub(1) * g_n * m_n * m_n];
        for (g, path, logw) in weights {
            let wgt = (logw - norm).exp();
            u[(i, g)] += wgt;
            for (t, &tau) in unit.times.iter().enumerate() {
                v_i[(t, g * m_n + path[tau])] += wgt;
            }
            for t in 1..t_i {
                let (h, k) = (path[unit.times[t - 1]], path[unit.times[t]]);
                vv_i[(((t - 1) * g_n + g) * m_n + h) * m_n + k] += wgt;
            }
            delta_post[path[0]] += wgt;
            for tau in 1..span {
                trans_post[(path[tau - 1], path[tau])] += wgt;
            }
        }
        v.push(v_i);
        vv.push(vv_i);
    }

    Ok(Posteriors {
        n_components: g_n,
        n_states: m_n,
        u,
        v,
        vv,
        unit_loglik,
        total_loglik: total.value(),
        delta_post,
        trans_post,
    })
}
