//! The extended EM algorithm for linear quantile mixtures with time-constant
//! and/or time-varying discrete random coefficients.
//!
//! The E-step computes posterior expectations of the component and state
//! indicators from per-unit forward–backward recursions; the M-step updates
//! the probability blocks in closed form and maximizes the coefficient block
//! exactly with one weighted quantile regression on the expanded design in
//! which every observed row is replicated per (component, state) pair.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::{ald_logpdf_raw, ald_sd, check_loss, QuantileLevel};
use crate::error::{Error, Result};
use crate::hmm::{forward_backward, matrix_power, ForwardBackward};
use crate::panel::{classify_missingness, DesignSet, MissingPattern, PanelDataset};
use crate::stats::{sample_quantile, sample_sd, KahanSum};
use crate::trace::{fmt_g6, NullTrace, TableKind, TraceSink};
use crate::wqr::{solve_rows, SCALE_FLOOR, WEIGHT_DROP};

/// Model family implied by the requested numbers of components and states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Homogeneous,
    Tc,
    Tv,
    TcTv,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Homogeneous => write!(f, "homogeneous"),
            Variant::Tc => write!(f, "TC"),
            Variant::Tv => write!(f, "TV"),
            Variant::TcTv => write!(f, "TCTV"),
        }
    }
}

/// Initialization rule for the EM iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartRule {
    Deterministic,
    Random,
    Supplied,
}

/// Sample-size basis for the BIC penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BicBasis {
    /// log(number of subjects) — the default.
    Units,
    /// log(total number of observations).
    Observations,
}

/// Model structure and EM controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub q: QuantileLevel,
    /// Number of mixture components G.
    pub n_components: usize,
    /// Number of hidden states m.
    pub n_states: usize,
    pub eps: f64,
    pub max_iter: usize,
    pub start: StartRule,
    pub seed: Option<u64>,
    pub bic_basis: BicBasis,
}

impl ModelSpec {
    pub fn new(q: QuantileLevel, n_components: usize, n_states: usize) -> Result<Self> {
        if n_components == 0 || n_states == 0 {
            return Err(Error::Spec(
                "numbers of components and states must be at least 1".into(),
            ));
        }
        Ok(Self {
            q,
            n_components,
            n_states,
            eps: 1e-5,
            max_iter: 1000,
            start: StartRule::Deterministic,
            seed: None,
            bic_basis: BicBasis::Units,
        })
    }

    pub fn variant(&self) -> Variant {
        match (self.n_components > 1, self.n_states > 1) {
            (false, false) => Variant::Homogeneous,
            (true, false) => Variant::Tc,
            (false, true) => Variant::Tv,
            (true, true) => Variant::TcTv,
        }
    }
}

/// The full free-parameter point θ_q of a mixture fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// Fixed coefficients (length p).
    pub betaf: DVector<f64>,
    /// TC random-coefficient locations, G × r.
    pub betar_tc: DMatrix<f64>,
    /// TV random-coefficient locations, m × l.
    pub betar_tv: DMatrix<f64>,
    /// Mixture probabilities (length G).
    pub pg: DVector<f64>,
    /// Initial state probabilities (length m).
    pub delta: DVector<f64>,
    /// Transition probabilities, m × m row-stochastic.
    pub gamma: DMatrix<f64>,
    /// ALD scale.
    pub scale: f64,
}

impl MixtureParams {
    /// Validate shapes and probability constraints against a model layout.
    pub fn validate(&self, p: usize, r: usize, l: usize, g: usize, m: usize) -> Result<()> {
        let shape_err = |what: &str| Err(Error::Validation(format!("{what} has the wrong shape")));
        if self.betaf.len() != p {
            return shape_err("betaf");
        }
        if self.betar_tc.shape() != (g, r) && !(r == 0 && self.betar_tc.len() == 0) {
            return shape_err("betarTC");
        }
        if self.betar_tv.shape() != (m, l) && !(l == 0 && self.betar_tv.len() == 0) {
            return shape_err("betarTV");
        }
        if self.pg.len() != g || self.delta.len() != m || self.gamma.shape() != (m, m) {
            return shape_err("probability block");
        }
        let simplex = |v: &[f64], what: &str| -> Result<()> {
            if v.iter().any(|&x| x < -1e-12) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "{what} must be a probability vector"
                )));
            }
            Ok(())
        };
        simplex(self.pg.as_slice(), "pg")?;
        simplex(self.delta.as_slice(), "delta")?;
        for h in 0..m {
            let row: Vec<f64> = (0..m).map(|k| self.gamma[(h, k)]).collect();
            simplex(&row, "Gamma row")?;
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Validation("scale must be positive".into()));
        }
        Ok(())
    }

    /// Exactly renormalize the probability blocks and floor the scale.
    fn tidy(&mut self) {
        let norm_vec = |v: &mut DVector<f64>| {
            let s: f64 = v.iter().sum();
            for x in v.iter_mut() {
                *x = (*x).max(0.0) / s;
            }
        };
        norm_vec(&mut self.pg);
        norm_vec(&mut self.delta);
        let m = self.gamma.nrows();
        for h in 0..m {
            let s: f64 = (0..m).map(|k| self.gamma[(h, k)]).sum();
            for k in 0..m {
                self.gamma[(h, k)] = self.gamma[(h, k)].max(0.0) / s;
            }
        }
        self.scale = self.scale.max(SCALE_FLOOR);
    }

    /// Flatten in the fixed order betaf, betarTC, betarTV, pg, delta, Gamma,
    /// scale (matrices row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.betaf.iter());
        out.extend(self.betar_tc.transpose().iter()); // row-major traversal
        out.extend(self.betar_tv.transpose().iter());
        out.extend(self.pg.iter());
        out.extend(self.delta.iter());
        out.extend(self.gamma.transpose().iter());
        out.push(self.scale);
        out
    }

    /// Rebuild from a flat vector laid out as in [`Self::flatten`].
    pub fn from_flat(template: &Self, flat: &[f64]) -> Self {
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (0..n).map(|_| it.next().unwrap()).collect() };
        let (g, r) = template.betar_tc.shape();
        let (m, l) = template.betar_tv.shape();
        let betaf = DVector::from_vec(take(template.betaf.len()));
        let betar_tc = DMatrix::from_row_slice(g, r, &take(g * r));
        let betar_tv = DMatrix::from_row_slice(m, l, &take(m * l));
        let pg = DVector::from_vec(take(g));
        let delta = DVector::from_vec(take(m));
        let gamma = DMatrix::from_row_slice(m, m, &take(m * m));
        let scale = it.next().unwrap();
        Self {
            betaf,
            betar_tc,
            betar_tv,
            pg,
            delta,
            gamma,
            scale,
        }
    }

    /// Apply label permutations: `perm_g[new] = old`, `perm_h[new] = old`.
    pub fn permuted(&self, perm_g: &[usize], perm_h: &[usize]) -> Self {
        let g = self.pg.len();
        let m = self.delta.len();
        let r = self.betar_tc.ncols();
        let l = self.betar_tv.ncols();
        Self {
            betaf: self.betaf.clone(),
            betar_tc: DMatrix::from_fn(g, r, |a, j| self.betar_tc[(perm_g[a], j)]),
            betar_tv: DMatrix::from_fn(m, l, |b, j| self.betar_tv[(perm_h[b], j)]),
            pg: DVector::from_fn(g, |a, _| self.pg[perm_g[a]]),
            delta: DVector::from_fn(m, |b, _| self.delta[perm_h[b]]),
            gamma: DMatrix::from_fn(m, m, |b, c| self.gamma[(perm_h[b], perm_h[c])]),
            scale: self.scale,
        }
    }

    /// Permutations that sort components by the first TC location column and
    /// states by the first TV location column.
    pub fn canonical_permutations(&self) -> (Vec<usize>, Vec<usize>) {
        let g = self.pg.len();
        let m = self.delta.len();
        let mut perm_g: Vec<usize> = (0..g).collect();
        if self.betar_tc.ncols() > 0 {
            perm_g.sort_by(|&a, &b| {
                self.betar_tc[(a, 0)]
                    .partial_cmp(&self.betar_tc[(b, 0)])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        }
        let mut perm_h: Vec<usize> = (0..m).collect();
        if self.betar_tv.ncols() > 0 {
            perm_h.sort_by(|&a, &b| {
                self.betar_tv[(a, 0)]
                    .partial_cmp(&self.betar_tv[(b, 0)])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        }
        (perm_g, perm_h)
    }
}

/// Posterior expectations of the latent indicators given the observed data.
#[derive(Debug, Clone)]
pub struct Posteriors {
    pub n_components: usize,
    pub n_states: usize,
    /// Component posteriors, n × G; rows sum to 1.
    pub u: DMatrix<f64>,
    /// Per-unit joint posteriors E[u_i(g)·v_it(h)], T_i × (G·m) with column
    /// index g·m + h; each row sums to 1.
    pub v: Vec<DMatrix<f64>>,
    /// Per-unit pairwise expectations E[u_i(g)·v_it(h,k)] between consecutive
    /// observed occasions, flattened as ((t·G + g)·m + h)·m + k.
    pub vv: Vec<Vec<f64>>,
    /// Per-unit observed-data log-likelihood contributions.
    pub unit_loglik: Vec<f64>,
    /// Fixed-order compensated total of `unit_loglik`.
    pub total_loglik: f64,
    /// Σ_i Σ_g posterior state mass at the first grid occasion (length m).
    pub delta_post: DVector<f64>,
    /// Expected one-step transition counts over the full grid, m × m.
    pub trans_post: DMatrix<f64>,
}

impl Posteriors {
    #[inline]
    pub fn vv(&self, unit: usize, t: usize, g: usize, h: usize, k: usize) -> f64 {
        let m = self.n_states;
        self.vv[unit][((t * self.n_components + g) * m + h) * m + k]
    }

    fn permute(&mut self, perm_g: &[usize], perm_h: &[usize]) {
        let g_n = self.n_components;
        let m_n = self.n_states;
        let n = self.u.nrows();
        self.u = DMatrix::from_fn(n, g_n, |i, a| self.u[(i, perm_g[a])]);
        for vm in self.v.iter_mut() {
            let t_i = vm.nrows();
            *vm = DMatrix::from_fn(t_i, g_n * m_n, |t, col| {
                let (a, b) = (col / m_n, col % m_n);
                vm[(t, perm_g[a] * m_n + perm_h[b])]
            });
        }
        let old_vv = self.vv.clone();
        for (unit, flat) in self.vv.iter_mut().enumerate() {
            let pairs = flat.len() / (g_n * m_n * m_n);
            for t in 0..pairs {
                for a in 0..g_n {
                    for b in 0..m_n {
                        for c in 0..m_n {
                            flat[((t * g_n + a) * m_n + b) * m_n + c] = old_vv[unit]
                                [((t * g_n + perm_g[a]) * m_n + perm_h[b]) * m_n + perm_h[c]];
                        }
                    }
                }
            }
        }
        self.delta_post = DVector::from_fn(m_n, |b, _| self.delta_post[perm_h[b]]);
        let tp = self.trans_post.clone();
        self.trans_post = DMatrix::from_fn(m_n, m_n, |b, c| tp[(perm_h[b], perm_h[c])]);
    }
}

/// A converged (or stopped) mixture fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub variant: Variant,
    pub spec: ModelSpec,
    pub params: MixtureParams,
    pub loglik: f64,
    pub npar: usize,
    pub aic: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub posteriors: Posteriors,
    /// Bootstrap standard errors, shaped like the parameter point.
    pub se: Option<MixtureParams>,
    /// ALD standard deviation implied by the fitted scale.
    pub sigma_e: f64,
    pub miss: MissingPattern,
    /// Observed-data log-likelihood at every EM iteration, starting at the
    /// initial point.
    pub loglik_trace: Vec<f64>,
    /// Number of mass-floor events hit in M-steps.
    pub degeneracies: usize,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub w_names: Vec<String>,
    pub n_units: usize,
    pub n_obs: usize,
}

/// One unit's data and effective design rows, prepared for estimation.
struct UnitData {
    /// Observed occasions as grid indices.
    times: Vec<usize>,
    y: Vec<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
    unit_id: String,
}

impl UnitData {
    fn n_obs(&self) -> usize {
        self.y.len()
    }
    /// Grid span covered by the chain: occasions 0..span.
    fn span(&self) -> usize {
        self.times.last().copied().unwrap_or(0) + 1
    }
}

/// A prepared estimation problem: data plus effective designs for a spec.
///
/// When G = 1 the TC columns act as fixed coefficients and are folded into
/// the fixed design; likewise the TV columns when m = 1. This realizes the
/// reduction properties of the model family exactly.
pub struct EmProblem {
    spec: ModelSpec,
    units: Vec<UnitData>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub w_names: Vec<String>,
    miss: MissingPattern,
    n_obs: usize,
}

impl EmProblem {
    pub fn new(data: &PanelDataset, designs: &DesignSet, spec: ModelSpec) -> Result<Self> {
        data.validate()?;
        let n = data.n_units();
        if designs.x.len() != n || designs.z.len() != n || designs.w.len() != n {
            return Err(Error::Validation(
                "designs are not aligned with the panel units".into(),
            ));
        }
        let g = spec.n_components;
        let m = spec.n_states;
        if g > 1 && designs.r() == 0 {
            return Err(Error::Spec(
                "G > 1 requires at least one TC random variable".into(),
            ));
        }
        if m > 1 && designs.l() == 0 {
            return Err(Error::Spec(
                "m > 1 requires at least one TV random variable".into(),
            ));
        }
        if g > n {
            return Err(Error::Spec(format!(
                "G = {g} exceeds the number of units ({n})"
            )));
        }

        let fold_z = g == 1 && designs.r() > 0;
        let fold_w = m == 1 && designs.l() > 0;
        let mut x_names = designs.x_names.clone();
        if fold_z {
            x_names.extend(designs.z_names.iter().cloned());
        }
        if fold_w {
            x_names.extend(designs.w_names.iter().cloned());
        }
        let z_names = if fold_z { vec![] } else { designs.z_names.clone() };
        let w_names = if fold_w { vec![] } else { designs.w_names.clone() };
        if x_names.is_empty() && z_names.is_empty() && w_names.is_empty() {
            return Err(Error::Spec("the model has no design columns".into()));
        }

        let units = data
            .units
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let t_i = u.n_obs();
                let mut xs = vec![designs.x[i].clone()];
                if fold_z {
                    xs.push(designs.z[i].clone());
                }
                if fold_w {
                    xs.push(designs.w[i].clone());
                }
                UnitData {
                    times: u.times.clone(),
                    y: u.y.clone(),
                    x: hcat(t_i, &xs),
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
                    unit_id: u.unit_id.clone(),
                }
            })
            .collect();

        Ok(Self {
            spec,
            units,
            x_names,
            z_names,
            w_names,
            miss: classify_missingness(data),
            n_obs: data.n_obs(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }
    pub fn n_units(&self) -> usize {
        self.units.len()
    }
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }
    pub fn p(&self) -> usize {
        self.x_names.len()
    }
    pub fn r(&self) -> usize {
        self.z_names.len()
    }
    pub fn l(&self) -> usize {
        self.w_names.len()
    }
    pub fn missingness(&self) -> MissingPattern {
        self.miss
    }

    /// Free-parameter count with vanishing blocks for absent parts.
    pub fn npar(&self) -> usize {
        let g = self.spec.n_components;
        let m = self.spec.n_states;
        self.p() + g * self.r() + m * self.l() + (g - 1) + (m - 1) + m * (m - 1) + 1
    }

    /// Starting parameters per the configured rule.
    pub fn init_params(&self, supplied: Option<&MixtureParams>) -> Result<MixtureParams> {
        match self.spec.start {
            StartRule::Supplied => {
                let given = supplied.ok_or_else(|| {
                    Error::Validation("start rule `supplied` needs parameters".into())
                })?;
                given.validate(
                    self.p(),
                    self.r(),
                    self.l(),
                    self.spec.n_components,
                    self.spec.n_states,
                )?;
                let mut p = given.clone();
                p.tidy();
                Ok(p)
            }
            StartRule::Deterministic => self.deterministic_start(),
            StartRule::Random => {
                let mut params = self.deterministic_start()?;
                self.randomize_start(&mut params);
                Ok(params)
            }
        }
    }

    /// Deterministic start: homogeneous fit for the coefficients, residual
    /// quantiles for the location spread, uniform probabilities, 0.8-diagonal
    /// transitions.
    fn deterministic_start(&self) -> Result<MixtureParams> {
        let g = self.spec.n_components;
        let m = self.spec.n_states;
        let (p, r, l) = (self.p(), self.r(), self.l());
        let k = p + r + l;
        let q = self.spec.q;

        let mut x = Vec::new();
        let mut y = Vec::new();
        for u in &self.units {
            for t in 0..u.n_obs() {
                for j in 0..p {
                    x.push(u.x[(t, j)]);
                }
                for j in 0..r {
                    x.push(u.z[(t, j)]);
                }
                for j in 0..l {
                    x.push(u.w[(t, j)]);
                }
                y.push(u.y[t]);
            }
        }
        let names: Vec<String> = self
            .x_names
            .iter()
            .chain(&self.z_names)
            .chain(&self.w_names)
            .cloned()
            .collect();
        let w = vec![1.0; y.len()];
        let coef = solve_rows(&x, &y, &w, k, q.value(), Some(&names))?;

        let resid: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(row, &yv)| {
                let mut mu = 0.0;
                for j in 0..k {
                    mu += x[row * k + j] * coef[j];
                }
                yv - mu
            })
            .collect();
        let scale = (resid.iter().map(|&u| check_loss(u, q)).sum::<f64>() / resid.len() as f64)
            .max(SCALE_FLOOR);
        let sd_res = sample_sd(&resid).max(1e-6);

        let col_sd = |vals: &mut dyn Iterator<Item = f64>| sample_sd(&vals.collect::<Vec<_>>());

        let spread_locations = |count: usize, offset: usize, names: &[String]| -> DMatrix<f64> {
            let width = names.len();
            let mut loc = DMatrix::zeros(count, width);
            for j in 0..width {
                let base = coef[offset + j];
                let intercept = names[j] == "(Intercept)";
                let sd_col = if intercept {
                    0.0
                } else {
                    let mut it = (0..y.len()).map(|row| x[row * k + offset + j]);
                    col_sd(&mut it)
                };
                for c in 0..count {
                    loc[(c, j)] = if intercept {
                        base + sample_quantile(&resid, (c as f64 + 0.5) / count as f64)
                    } else {
                        let u_c = (2.0 * (c as f64 + 1.0) - 1.0 - count as f64) / count as f64;
                        base + u_c * sd_res / sd_col.max(1e-6)
                    };
                }
            }
            loc
        };

        let betar_tc = if g > 1 {
            spread_locations(g, p, &self.z_names)
        } else {
            DMatrix::zeros(1, 0)
        };
        let betar_tv = if m > 1 {
            spread_locations(m, p + r, &self.w_names)
        } else {
            DMatrix::zeros(1, 0)
        };

        let gamma = if m == 1 {
            DMatrix::from_element(1, 1, 1.0)
        } else {
            DMatrix::from_fn(m, m, |h, kb| {
                if h == kb {
                    0.8
                } else {
                    0.2 / (m as f64 - 1.0)
                }
            })
        };

        Ok(MixtureParams {
            betaf: DVector::from_iterator(p, coef[..p].iter().copied()),
            betar_tc,
            betar_tv,
            pg: DVector::from_element(g, 1.0 / g as f64),
            delta: DVector::from_element(m, 1.0 / m as f64),
            gamma,
            scale,
        })
    }

    /// Jitter the locations and draw the probability blocks from a flat
    /// simplex, seed-controlled.
    fn randomize_start(&self, params: &mut MixtureParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed.unwrap_or(0));
        // residual dispersion proxy: the fitted scale is the mean check loss
        let sd_jitter = (params.scale * 4.0).max(1e-3);
        let mut jitter_block = |loc: &mut DMatrix<f64>| {
            for c in 0..loc.nrows() {
                for j in 0..loc.ncols() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    loc[(c, j)] += z * sd_jitter;
                }
            }
        };
        if self.spec.n_components > 1 {
            jitter_block(&mut params.betar_tc);
        }
        if self.spec.n_states > 1 {
            jitter_block(&mut params.betar_tv);
        }
        let mut simplex = |len: usize| -> Vec<f64> {
            let draws: Vec<f64> = (0..len).map(|_| Exp1.sample(&mut rng)).collect();
            let s: f64 = draws.iter().sum();
            draws.into_iter().map(|d| d / s).collect()
        };
        if self.spec.n_components > 1 {
            params.pg = DVector::from_vec(simplex(self.spec.n_components));
        }
        if self.spec.n_states > 1 {
            let m = self.spec.n_states;
            params.delta = DVector::from_vec(simplex(m));
            for h in 0..m {
                let row = simplex(m);
                for kb in 0..m {
                    params.gamma[(h, kb)] = row[kb];
                }
            }
        }
    }

    /// Per-occasion log-emissions for unit `i` under component `g`, indexed
    /// by grid occasion over the unit's span (`None` where unobserved).
    fn emissions(&self, i: usize, params: &MixtureParams, g: usize) -> Result<Vec<Option<Vec<f64>>>> {
        let u = &self.units[i];
        let m = self.spec.n_states;
        let q = self.spec.q.value();
        let sigma = params.scale.max(SCALE_FLOOR);
        let xb = &u.x * &params.betaf;
        let zb: DVector<f64> = if self.r() > 0 {
            &u.z * params.betar_tc.row(g).transpose()
        } else {
            DVector::zeros(u.n_obs())
        };
        let wb: DMatrix<f64> = if self.l() > 0 {
            &u.w * params.betar_tv.transpose()
        } else {
            DMatrix::zeros(u.n_obs(), 0)
        };

        let mut lf: Vec<Option<Vec<f64>>> = vec![None; u.span()];
        for (t, &tau) in u.times.iter().enumerate() {
            let base = xb[t] + zb[t];
            let mut row = Vec::with_capacity(m);
            for h in 0..m {
                let mu = base + if self.l() > 0 { wb[(t, h)] } else { 0.0 };
                let v = ald_logpdf_raw(u.y[t], mu, sigma, q);
                if !v.is_finite() {
                    return Err(Error::Numerical {
                        unit: Some(u.unit_id.clone()),
                        time: Some(tau),
                        msg: "non-finite emission log-density".into(),
                    });
                }
                row.push(v);
            }
            lf[tau] = Some(row);
        }
        Ok(lf)
    }

    /// E-step: posterior expectations and the observed-data log-likelihood.
    pub fn e_step(&self, params: &MixtureParams) -> Result<Posteriors> {
        let g_n = self.spec.n_components;
        let m_n = self.spec.n_states;
        let n = self.units.len();

        struct UnitPost {
            u_row: Vec<f64>,
            v: DMatrix<f64>,
            vv: Vec<f64>,
            loglik: f64,
            delta_c: Vec<f64>,
            trans_c: DMatrix<f64>,
        }

        let per_unit: Vec<Result<UnitPost>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let unit = &self.units[i];
                let t_i = unit.n_obs();

                let mut fbs: Vec<(ForwardBackward, Vec<Option<Vec<f64>>>)> =
                    Vec::with_capacity(g_n);
                for g in 0..g_n {
                    let lf = self.emissions(i, params, g)?;
                    let fb = forward_backward(params.delta.as_slice(), &params.gamma, &lf);
                    fbs.push((fb, lf));
                }

                let weighted: Vec<f64> = (0..g_n)
                    .map(|g| params.pg[g].ln() + fbs[g].0.loglik)
                    .collect();
                let unit_ll = crate::stats::logsumexp(&weighted);
                if !unit_ll.is_finite() {
                    return Err(Error::Numerical {
                        unit: Some(unit.unit_id.clone()),
                        time: None,
                        msg: "non-finite unit likelihood".into(),
                    });
                }
                let u_row: Vec<f64> = weighted.iter().map(|&wv| (wv - unit_ll).exp()).collect();

                let mut v = DMatrix::zeros(t_i, g_n * m_n);
                let mut vv = vec![0.0; t_i.saturating_sub(1) * g_n * m_n * m_n];
                let mut delta_c = vec![0.0; m_n];
                let mut trans_c = DMatrix::zeros(m_n, m_n);

                for g in 0..g_n {
                    let (fb, lf) = &fbs[g];
                    let ug = u_row[g];
                    for (t, &tau) in unit.times.iter().enumerate() {
                        for h in 0..m_n {
                            v[(t, g * m_n + h)] = ug * fb.state_posterior(tau, h);
                        }
                    }
                    for h in 0..m_n {
                        delta_c[h] += ug * fb.state_posterior(0, h);
                    }
                    for tau in 1..unit.span() {
                        for h in 0..m_n {
                            for kb in 0..m_n {
                                trans_c[(h, kb)] += ug * fb.pairwise(&params.gamma, lf, tau, h, kb);
                            }
                        }
                    }
                    // collapsed pairwise between consecutive observed occasions
                    for t in 1..t_i {
                        let (prev, cur) = (unit.times[t - 1], unit.times[t]);
                        let gap = cur - prev;
                        let trans = if gap == 1 {
                            params.gamma.clone()
                        } else {
                            matrix_power(&params.gamma, gap)
                        };
                        for h in 0..m_n {
                            for kb in 0..m_n {
                                let val = ug * fb.pairwise_collapsed(&trans, lf, prev, cur, h, kb);
                                vv[(((t - 1) * g_n + g) * m_n + h) * m_n + kb] = val;
                            }
                        }
                    }
                }

                Ok(UnitPost {
                    u_row,
                    v,
                    vv,
                    loglik: unit_ll,
                    delta_c,
                    trans_c,
                })
            })
            .collect();

        let mut u = DMatrix::zeros(n, g_n);
        let mut v = Vec::with_capacity(n);
        let mut vv = Vec::with_capacity(n);
        let mut unit_loglik = Vec::with_capacity(n);
        let mut total = KahanSum::new();
        let mut delta_post = DVector::zeros(m_n);
        let mut trans_post = DMatrix::zeros(m_n, m_n);
        for (i, res) in per_unit.into_iter().enumerate() {
            let up = res?;
            for g in 0..g_n {
                u[(i, g)] = up.u_row[g];
            }
            v.push(up.v);
            vv.push(up.vv);
            unit_loglik.push(up.loglik);
            total.add(up.loglik);
            for h in 0..m_n {
                delta_post[h] += up.delta_c[h];
                for kb in 0..m_n {
                    trans_post[(h, kb)] += up.trans_c[(h, kb)];
                }
            }
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

    /// Observed-data log-likelihood at a parameter point, without touching
    /// any state.
    pub fn loglik(&self, params: &MixtureParams) -> Result<f64> {
        let g_n = self.spec.n_components;
        let mut total = KahanSum::new();
        for i in 0..self.units.len() {
            let mut weighted = Vec::with_capacity(g_n);
            for g in 0..g_n {
                let lf = self.emissions(i, params, g)?;
                let fb = forward_backward(params.delta.as_slice(), &params.gamma, &lf);
                weighted.push(params.pg[g].ln() + fb.loglik);
            }
            total.add(crate::stats::logsumexp(&weighted));
        }
        Ok(total.value())
    }

    /// M-step: closed-form probability updates plus one exact weighted
    /// quantile regression on the expanded design. Mass floors keep the fit
    /// alive on degenerate posteriors; events are counted and reported.
    pub fn m_step(&self, post: &Posteriors, prev: &MixtureParams) -> Result<(MixtureParams, usize)> {
        let g_n = self.spec.n_components;
        let m_n = self.spec.n_states;
        let (p, r, l) = (self.p(), self.r(), self.l());
        let mut degeneracies = 0usize;
        const MASS_FLOOR: f64 = 1e-8;

        let mut pg = DVector::zeros(g_n);
        for g in 0..g_n {
            let mass: f64 = (0..self.units.len()).map(|i| post.u[(i, g)]).sum();
            if mass < MASS_FLOOR {
                degeneracies += 1;
                pg[g] = MASS_FLOOR;
            } else {
                pg[g] = mass;
            }
        }
        let pg_sum: f64 = pg.iter().sum();
        pg /= pg_sum;

        let mut delta = DVector::from_element(m_n, 1.0);
        if m_n > 1 {
            for h in 0..m_n {
                let mass = post.delta_post[h];
                delta[h] = if mass < MASS_FLOOR {
                    degeneracies += 1;
                    MASS_FLOOR
                } else {
                    mass
                };
            }
            let s: f64 = delta.iter().sum();
            delta /= s;
        } else {
            delta = DVector::from_element(1, 1.0);
        }

        let mut gamma = DMatrix::from_element(1, 1, 1.0);
        if m_n > 1 {
            gamma = DMatrix::zeros(m_n, m_n);
            let total_trans: f64 = post.trans_post.iter().sum();
            for h in 0..m_n {
                let den: f64 = (0..m_n).map(|kb| post.trans_post[(h, kb)]).sum();
                if den < MASS_FLOOR {
                    if total_trans >= MASS_FLOOR {
                        degeneracies += 1;
                    }
                    for kb in 0..m_n {
                        gamma[(h, kb)] = prev.gamma[(h, kb)];
                    }
                } else {
                    for kb in 0..m_n {
                        gamma[(h, kb)] = post.trans_post[(h, kb)] / den;
                    }
                }
            }
        }

        // Expanded-design weighted quantile regression for (β, ζ, α) jointly.
        let cols = p + g_n * r + m_n * l;
        let mut xr: Vec<f64> = Vec::new();
        let mut yr: Vec<f64> = Vec::new();
        let mut wr: Vec<f64> = Vec::new();
        for (i, unit) in self.units.iter().enumerate() {
            for t in 0..unit.n_obs() {
                for g in 0..g_n {
                    for h in 0..m_n {
                        let wgt = post.v[i][(t, g * m_n + h)];
                        if wgt < WEIGHT_DROP {
                            continue;
                        }
                        let start = xr.len();
                        xr.resize(start + cols, 0.0);
                        for j in 0..p {
                            xr[start + j] = unit.x[(t, j)];
                        }
                        for j in 0..r {
                            xr[start + p + g * r + j] = unit.z[(t, j)];
                        }
                        for j in 0..l {
                            xr[start + p + g_n * r + h * l + j] = unit.w[(t, j)];
                        }
                        yr.push(unit.y[t]);
                        wr.push(wgt);
                    }
                }
            }
        }

        // Columns with essentially no posterior mass are unidentified; keep
        // their previous values and solve the reduced program.
        let mut col_mass = vec![0.0; cols];
        for (row, &wgt) in wr.iter().enumerate() {
            for c in 0..cols {
                col_mass[c] += wgt * xr[row * cols + c].abs();
            }
        }
        let active: Vec<usize> = (0..cols).filter(|&c| col_mass[c] > 1e-10).collect();

        let prev_coef = |c: usize| -> f64 {
            if c < p {
                prev.betaf[c]
            } else if c < p + g_n * r {
                let idx = c - p;
                prev.betar_tc[(idx / r, idx % r)]
            } else {
                let idx = c - p - g_n * r;
                prev.betar_tv[(idx / l, idx % l)]
            }
        };

        let mut coef = vec![0.0; cols];
        if active.len() == cols {
            let names = self.expanded_names();
            coef = solve_rows(&xr, &yr, &wr, cols, self.spec.q.value(), Some(&names))?;
        } else {
            degeneracies += cols - active.len();
            for c in 0..cols {
                coef[c] = prev_coef(c);
            }
            if !active.is_empty() {
                let mut xa = Vec::with_capacity(yr.len() * active.len());
                for row in 0..yr.len() {
                    for &c in &active {
                        xa.push(xr[row * cols + c]);
                    }
                }
                let names: Vec<String> = {
                    let all = self.expanded_names();
                    active.iter().map(|&c| all[c].clone()).collect()
                };
                let sol = solve_rows(&xa, &yr, &wr, active.len(), self.spec.q.value(), Some(&names))?;
                for (pos, &c) in active.iter().enumerate() {
                    coef[c] = sol[pos];
                }
            }
        }

        // r = 0 only when G = 1 and l = 0 only when m = 1 (folded designs)
        let betaf = DVector::from_iterator(p, coef[..p].iter().copied());
        let betar_tc = if r > 0 {
            DMatrix::from_fn(g_n, r, |g, j| coef[p + g * r + j])
        } else {
            DMatrix::zeros(1, 0)
        };
        let betar_tv = if l > 0 {
            DMatrix::from_fn(m_n, l, |h, j| coef[p + g_n * r + h * l + j])
        } else {
            DMatrix::zeros(1, 0)
        };

        // scale: posterior-weighted mean check loss over all N observed rows
        let q = self.spec.q;
        let mut loss = 0.0;
        for (i, unit) in self.units.iter().enumerate() {
            for t in 0..unit.n_obs() {
                let base: f64 = (0..p).map(|j| unit.x[(t, j)] * betaf[j]).sum();
                for g in 0..g_n {
                    let zpart: f64 = (0..r).map(|j| unit.z[(t, j)] * betar_tc[(g, j)]).sum();
                    for h in 0..m_n {
                        let wgt = post.v[i][(t, g * m_n + h)];
                        if wgt == 0.0 {
                            continue;
                        }
                        let wpart: f64 =
                            (0..l).map(|j| unit.w[(t, j)] * betar_tv[(h, j)]).sum();
                        loss += wgt * check_loss(unit.y[t] - base - zpart - wpart, q);
                    }
                }
            }
        }
        let scale = (loss / self.n_obs as f64).max(SCALE_FLOOR);

        Ok((
            MixtureParams {
                betaf,
                betar_tc,
                betar_tv,
                pg,
                delta,
                gamma,
                scale,
            },
            degeneracies,
        ))
    }

    fn expanded_names(&self) -> Vec<String> {
        let mut names = self.x_names.clone();
        for g in 0..self.spec.n_components {
            for zn in &self.z_names {
                names.push(format!("{zn}_Comp{}", g + 1));
            }
        }
        for h in 0..self.spec.n_states {
            for wn in &self.w_names {
                names.push(format!("{wn}_St{}", h + 1));
            }
        }
        names
    }

    /// Run EM to convergence; labels are canonicalized post hoc.
    pub fn fit(&self, supplied: Option<&MixtureParams>) -> Result<FitResult> {
        self.fit_traced(supplied, &mut NullTrace)
    }

    pub fn fit_traced(
        &self,
        supplied: Option<&MixtureParams>,
        trace: &mut dyn TraceSink,
    ) -> Result<FitResult> {
        let variant = self.spec.variant();
        let kind = match variant {
            Variant::Homogeneous => TableKind::Homogeneous,
            Variant::Tc => TableKind::Tc,
            Variant::Tv => TableKind::Tv,
            Variant::TcTv => TableKind::TcTv,
        };
        let g_n = self.spec.n_components;
        let m_n = self.spec.n_states;
        let fields = |lk: f64, diff: Option<f64>| -> Vec<String> {
            let diff_s = diff.map_or("NA".to_string(), fmt_g6);
            match variant {
                Variant::Homogeneous => vec![fmt_g6(lk)],
                Variant::Tc => vec![g_n.to_string(), fmt_g6(lk), diff_s],
                Variant::Tv => vec![m_n.to_string(), fmt_g6(lk), diff_s],
                Variant::TcTv => vec![m_n.to_string(), g_n.to_string(), fmt_g6(lk), diff_s],
            }
        };

        trace.line(&format!(
            "Model {} - qtl = {} ",
            variant,
            self.spec.q.value()
        ));
        trace.line(&kind.separator());
        trace.line(&kind.header());
        trace.line(&kind.separator());

        let mut params = self.init_params(supplied)?;
        let mut post = self.e_step(&params)?;
        let mut lk = post.total_loglik;
        let mut lks = vec![lk];
        trace.line(&kind.row(0, &fields(lk, None)));

        let mut converged = false;
        let mut iterations = 0usize;
        let mut degeneracies = 0usize;
        for it in 1..=self.spec.max_iter {
            let (new_params, deg) = self.m_step(&post, &params)?;
            degeneracies += deg;
            params = new_params;
            post = self.e_step(&params)?;
            let new_lk = post.total_loglik;
            let diff = new_lk - lk;
            let rel = diff.abs() / (lk.abs() + 1.0);
            lk = new_lk;
            lks.push(lk);
            iterations = it;
            if rel < self.spec.eps || variant == Variant::Homogeneous {
                converged = true;
                trace.line(&kind.row(it, &fields(lk, Some(diff))));
                break;
            }
            if it % 10 == 0 || it == self.spec.max_iter {
                trace.line(&kind.row(it, &fields(lk, Some(diff))));
            }
        }
        trace.line(&kind.separator());

        // canonical label ordering
        let (perm_g, perm_h) = params.canonical_permutations();
        params = params.permuted(&perm_g, &perm_h);
        post.permute(&perm_g, &perm_h);

        let npar = self.npar();
        let basis_n = match self.spec.bic_basis {
            BicBasis::Units => self.n_units() as f64,
            BicBasis::Observations => self.n_obs as f64,
        };
        Ok(FitResult {
            variant,
            spec: self.spec,
            sigma_e: ald_sd(params.scale, self.spec.q),
            loglik: lk,
            npar,
            aic: -2.0 * lk + 2.0 * npar as f64,
            bic: -2.0 * lk + basis_n.ln() * npar as f64,
            iterations,
            converged,
            posteriors: post,
            se: None,
            miss: self.miss,
            loglik_trace: lks,
            degeneracies,
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
            w_names: self.w_names.clone(),
            n_units: self.n_units(),
            n_obs: self.n_obs,
            params,
        })
    }
}

/// Fold a parameter point into the effective shape used when G = 1 and/or
/// m = 1: the single TC location row and/or the single TV location row act
/// as fixed coefficients, matching the design folding in [`EmProblem::new`].
pub fn fold_params(
    params: &MixtureParams,
    n_components: usize,
    n_states: usize,
) -> MixtureParams {
    let mut betaf: Vec<f64> = params.betaf.iter().copied().collect();
    let mut betar_tc = params.betar_tc.clone();
    let mut pg = params.pg.clone();
    if n_components == 1 && params.betar_tc.ncols() > 0 {
        betaf.extend(params.betar_tc.row(0).iter());
        betar_tc = DMatrix::zeros(1, 0);
        pg = DVector::from_element(1, 1.0);
    }
    let mut betar_tv = params.betar_tv.clone();
    let mut delta = params.delta.clone();
    let mut gamma = params.gamma.clone();
    if n_states == 1 && params.betar_tv.ncols() > 0 {
        betaf.extend(params.betar_tv.row(0).iter());
        betar_tv = DMatrix::zeros(1, 0);
        delta = DVector::from_element(1, 1.0);
        gamma = DMatrix::from_element(1, 1, 1.0);
    }
    MixtureParams {
        betaf: DVector::from_vec(betaf),
        betar_tc,
        betar_tv,
        pg,
        delta,
        gamma,
        scale: params.scale,
    }
}

fn hcat(rows: usize, mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols: usize = mats.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut offset = 0;
    for m in mats {
        for c in 0..m.ncols() {
            for rr in 0..rows {
                out[(rr, offset + c)] = m[(rr, c)];
            }
        }
        offset += m.ncols();
    }
    out
}
