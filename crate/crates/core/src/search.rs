//! Grid search over the numbers of mixture components and hidden states with
//! multi-start initialization and information-criterion selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::QuantileLevel;
use crate::bootstrap::{bootstrap_se, BootstrapConfig};
use crate::em::{BicBasis, EmProblem, FitResult, ModelSpec, StartRule, Variant};
use crate::error::{Error, Result};
use crate::panel::{DesignSet, PanelDataset};
use crate::stats::derive_seed;
use crate::trace::{BufferTrace, NullTrace, TraceSink};

/// Model selection criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    /// Minimum BIC (default).
    Bic,
    /// Minimum AIC.
    Aic,
    /// Maximum log-likelihood.
    Lk,
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionMethod::Bic => write!(f, "bic"),
            SelectionMethod::Aic => write!(f, "aic"),
            SelectionMethod::Lk => write!(f, "lk"),
        }
    }
}

/// Grid and controls for the model search.
#[derive(Debug, Clone)]
pub struct SearchPlan {
    /// Candidate numbers of mixture components; `None` leaves the TC layer out.
    pub gv: Option<Vec<usize>>,
    /// Candidate numbers of hidden states; `None` leaves the TV layer out.
    pub mv: Option<Vec<usize>>,
    pub method: SelectionMethod,
    /// Multi-start multiplier; the per-cell random start count follows the
    /// cell kind (see [`enumerate_starts`]).
    pub nran: usize,
    pub q: QuantileLevel,
    pub se_for_best: bool,
    pub boot_resamples: usize,
    pub seed: u64,
    pub eps: f64,
    pub max_iter: usize,
    pub bic_basis: BicBasis,
}

impl SearchPlan {
    pub fn new(gv: Option<Vec<usize>>, mv: Option<Vec<usize>>, q: QuantileLevel) -> Result<Self> {
        if gv.is_none() && mv.is_none() {
            return Err(Error::Spec("at least one of Gv and mv must be given".into()));
        }
        if gv.as_deref().is_some_and(|v| v.is_empty())
            || mv.as_deref().is_some_and(|v| v.is_empty())
            || gv.as_deref().is_some_and(|v| v.contains(&0))
            || mv.as_deref().is_some_and(|v| v.contains(&0))
        {
            return Err(Error::Spec("Gv and mv must list positive counts".into()));
        }
        Ok(Self {
            gv,
            mv,
            method: SelectionMethod::Bic,
            nran: 0,
            q,
            se_for_best: false,
            boot_resamples: 50,
            seed: 0,
            eps: 1e-5,
            max_iter: 1000,
            bic_basis: BicBasis::Units,
        })
    }

    /// The (G, m) grid, ordered by (G, m); absent layers contribute a 1.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let gs = self.gv.clone().unwrap_or_else(|| vec![1]);
        let ms = self.mv.clone().unwrap_or_else(|| vec![1]);
        let mut cells: Vec<(usize, usize)> = gs
            .iter()
            .flat_map(|&g| ms.iter().map(move |&m| (g, m)))
            .collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }
}

/// Number of random starts for one grid cell: nran·(G−1) for TC cells,
/// nran·(m−1) for TV cells, nran·(G−1)·(m−1) for TCTV cells, 0 for the
/// homogeneous cell. A deterministic start is always run on top.
pub fn enumerate_starts(g: usize, m: usize, nran: usize) -> usize {
    match (g > 1, m > 1) {
        (false, false) => 0,
        (true, false) => nran * (g - 1),
        (false, true) => nran * (m - 1),
        (true, true) => nran * (g - 1) * (m - 1),
    }
}

/// One evaluated cell of the search grid.
#[derive(Debug)]
pub struct SearchCell {
    pub variant: Variant,
    pub n_components: usize,
    pub n_states: usize,
    /// Best fit over the cell's starts (highest log-likelihood among
    /// converged starts; the best non-converged fit if none converged).
    pub fit: Option<FitResult>,
    /// No start of this cell converged.
    pub failed: bool,
    pub error: Option<String>,
}

/// The completed grid with the selected cell.
#[derive(Debug)]
pub struct SearchResult {
    pub cells: Vec<SearchCell>,
    /// Index into `cells` of the selected model.
    pub best: usize,
    pub method: SelectionMethod,
}

impl SearchResult {
    pub fn best_fit(&self) -> &FitResult {
        self.cells[self.best].fit.as_ref().expect("selected cell has a fit")
    }

    /// Machine-readable criterion table.
    pub fn criterion_rows(&self) -> Vec<CriterionRow> {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, c)| CriterionRow {
                model: c.variant.to_string(),
                n_components: c.n_components,
                n_states: c.n_states,
                loglik: c.fit.as_ref().map(|f| f.loglik),
                npar: c.fit.as_ref().map(|f| f.npar),
                aic: c.fit.as_ref().map(|f| f.aic),
                bic: c.fit.as_ref().map(|f| f.bic),
                converged: c.fit.as_ref().map(|f| f.converged).unwrap_or(false),
                failed: c.failed,
                best: i == self.best,
            })
            .collect()
    }
}

/// One row of the exported criterion table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionRow {
    pub model: String,
    #[serde(rename = "G")]
    pub n_components: usize,
    #[serde(rename = "m")]
    pub n_states: usize,
    pub loglik: Option<f64>,
    pub npar: Option<usize>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub failed: bool,
    pub best: bool,
}

/// Run the search: every cell is fit once deterministically plus its random
/// starts (seeds derived per cell × start), the max-loglik fit per cell is
/// kept, and the best cell is selected by the plan's method.
pub fn search(
    data: &PanelDataset,
    designs: &DesignSet,
    plan: &SearchPlan,
    trace: &mut dyn TraceSink,
) -> Result<SearchResult> {
    let cells = plan.cells();
    if cells.is_empty() {
        return Err(Error::Spec("empty search grid".into()));
    }
    trace.line("Search the optimal linear quantile mixture model ");
    trace.line("************************************************* ");

    // flatten (cell, start) jobs for a deterministic parallel map
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (ci, &(g, m)) in cells.iter().enumerate() {
        let starts = 1 + enumerate_starts(g, m, plan.nran);
        for s in 0..starts {
            jobs.push((ci, s));
        }
    }

    let outcomes: Vec<(usize, usize, std::result::Result<FitResult, String>)> = jobs
        .par_iter()
        .map(|&(ci, start_idx)| {
            let (g, m) = cells[ci];
            let mut spec = match ModelSpec::new(plan.q, g, m) {
                Ok(s) => s,
                Err(e) => return (ci, start_idx, Err(e.to_string())),
            };
            spec.eps = plan.eps;
            spec.max_iter = plan.max_iter;
            spec.bic_basis = plan.bic_basis;
            spec.start = if start_idx == 0 {
                StartRule::Deterministic
            } else {
                StartRule::Random
            };
            spec.seed = Some(derive_seed(
                plan.seed,
                &[g as u64, m as u64, start_idx as u64],
            ));
            let res = EmProblem::new(data, designs, spec)
                .and_then(|prob| prob.fit(None))
                .map_err(|e| e.to_string());
            (ci, start_idx, res)
        })
        .collect();

    let mut out_cells: Vec<SearchCell> = cells
        .iter()
        .map(|&(g, m)| SearchCell {
            variant: ModelSpec::new(plan.q, g, m).expect("validated").variant(),
            n_components: g,
            n_states: m,
            fit: None,
            failed: true,
            error: None,
        })
        .collect();

    // deterministic reduction in job order: converged fits dominate, then
    // higher log-likelihood, then the earlier start
    for (ci, _start, outcome) in outcomes {
        let cell = &mut out_cells[ci];
        match outcome {
            Ok(fit) => {
                let better = match &cell.fit {
                    None => true,
                    Some(cur) => {
                        (fit.converged && !cur.converged)
                            || (fit.converged == cur.converged && fit.loglik > cur.loglik)
                    }
                };
                if fit.converged {
                    cell.failed = false;
                }
                if better {
                    cell.fit = Some(fit);
                }
            }
            Err(msg) => {
                if cell.error.is_none() {
                    cell.error = Some(msg);
                }
            }
        }
    }

    // emit per-cell traces after the fact (best start only)
    for cell in &out_cells {
        let (g, m) = (cell.n_components, cell.n_states);
        let starts = enumerate_starts(g, m, plan.nran);
        let mut line = String::from("Random start: 0 ... ");
        for s in 1..=starts {
            line.push_str(&format!("{s}  ... "));
        }
        if let Some(fit) = &cell.fit {
            let mut buf = BufferTrace::default();
            // re-emit the winning fit's table without refitting
            emit_fit_table(fit, &mut buf);
            if let Some(first) = buf.lines.first() {
                trace.line(first);
            }
            trace.line(&line);
            for l in buf.lines.iter().skip(1) {
                trace.line(l);
            }
        }
    }

    let eligible: Vec<usize> = (0..out_cells.len())
        .filter(|&i| !out_cells[i].failed && out_cells[i].fit.is_some())
        .collect();
    if eligible.is_empty() {
        return Err(Error::Search("every cell of the grid failed".into()));
    }
    let best = *eligible
        .iter()
        .min_by(|&&a, &&b| {
            let fa = out_cells[a].fit.as_ref().unwrap();
            let fb = out_cells[b].fit.as_ref().unwrap();
            let (ka, kb) = match plan.method {
                SelectionMethod::Bic => (fa.bic, fb.bic),
                SelectionMethod::Aic => (fa.aic, fb.aic),
                SelectionMethod::Lk => (-fa.loglik, -fb.loglik),
            };
            ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("nonempty");

    let mut result = SearchResult {
        cells: out_cells,
        best,
        method: plan.method,
    };

    if plan.se_for_best {
        trace.line("Computing standard errors for the optimal model: ");
        let cell = &result.cells[best];
        let spec = {
            let mut s = ModelSpec::new(plan.q, cell.n_components, cell.n_states)?;
            s.eps = plan.eps;
            s.max_iter = plan.max_iter;
            s.bic_basis = plan.bic_basis;
            s
        };
        let cfg = BootstrapConfig {
            resamples: plan.boot_resamples,
            seed: plan.seed,
            ..Default::default()
        };
        let fit_ref = result.cells[best].fit.as_ref().unwrap();
        let boot = bootstrap_se(fit_ref, data, designs, &spec, &cfg, trace)?;
        result.cells[best].fit.as_mut().unwrap().se = Some(boot.se);
    }

    Ok(result)
}

/// Replay a fit's iteration trace in the console table format.
fn emit_fit_table(fit: &FitResult, trace: &mut dyn TraceSink) {
    // Re-running the fit would be wasteful; rebuild the table from the
    // recorded log-likelihood path instead.
    use crate::trace::{fmt_g6, TableKind};
    let kind = match fit.variant {
        Variant::Homogeneous => TableKind::Homogeneous,
        Variant::Tc => TableKind::Tc,
        Variant::Tv => TableKind::Tv,
        Variant::TcTv => TableKind::TcTv,
    };
    trace.line(&format!("Model {} - qtl = {} ", fit.variant, fit.spec.q.value()));
    trace.line(&kind.separator());
    trace.line(&kind.header());
    trace.line(&kind.separator());
    let g = fit.spec.n_components.to_string();
    let m = fit.spec.n_states.to_string();
    let n_iters = fit.loglik_trace.len();
    for (it, &lk) in fit.loglik_trace.iter().enumerate() {
        let is_last = it + 1 == n_iters;
        if !(it == 0 || it % 10 == 0 || is_last) {
            continue;
        }
        let diff = if it == 0 {
            None
        } else {
            Some(lk - fit.loglik_trace[it - 1])
        };
        let diff_s = diff.map_or("NA".to_string(), fmt_g6);
        let fields = match fit.variant {
            Variant::Homogeneous => vec![fmt_g6(lk)],
            Variant::Tc => vec![g.clone(), fmt_g6(lk), diff_s],
            Variant::Tv => vec![m.clone(), fmt_g6(lk), diff_s],
            Variant::TcTv => vec![m.clone(), g.clone(), fmt_g6(lk), diff_s],
        };
        trace.line(&kind.row(it, &fields));
    }
    trace.line(&kind.separator());
}

/// Convenience wrapper without trace output.
pub fn search_quiet(
    data: &PanelDataset,
    designs: &DesignSet,
    plan: &SearchPlan,
) -> Result<SearchResult> {
    search(data, designs, plan, &mut NullTrace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(v: f64) -> QuantileLevel {
        QuantileLevel::new(v).unwrap()
    }

    #[test]
    fn start_counts_follow_the_cell_kind() {
        // TC cells
        assert_eq!(enumerate_starts(3, 1, 2), 4);
        assert_eq!(enumerate_starts(2, 1, 5), 5);
        // TV cells
        assert_eq!(enumerate_starts(1, 3, 2), 4);
        assert_eq!(enumerate_starts(1, 2, 5), 5);
        // TCTV cells
        assert_eq!(enumerate_starts(2, 2, 2), 2);
        assert_eq!(enumerate_starts(3, 2, 2), 4);
        assert_eq!(enumerate_starts(2, 3, 2), 4);
        // homogeneous and nran = 0
        assert_eq!(enumerate_starts(1, 1, 7), 0);
        assert_eq!(enumerate_starts(4, 4, 0), 0);
    }

    #[test]
    fn plan_validation() {
        assert!(SearchPlan::new(None, None, q(0.5)).is_err());
        assert!(SearchPlan::new(Some(vec![]), None, q(0.5)).is_err());
        assert!(SearchPlan::new(Some(vec![0]), None, q(0.5)).is_err());
        let plan = SearchPlan::new(Some(vec![2, 1]), Some(vec![1, 2]), q(0.5)).unwrap();
        assert_eq!(plan.cells(), vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn gv_only_grid() {
        let plan = SearchPlan::new(Some(vec![1, 2, 3]), None, q(0.5)).unwrap();
        assert_eq!(plan.cells(), vec![(1, 1), (2, 1), (3, 1)]);
    }
}
