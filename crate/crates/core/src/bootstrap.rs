//! Block-bootstrap standard errors: units are resampled with replacement so
//! each draw keeps its full measurement sequence, replicates are refit, and
//! the square-root average squared deviation from the original estimate is
//! reported per coordinate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::em::{EmProblem, FitResult, MixtureParams, ModelSpec, StartRule};
use crate::error::{Error, Result};
use crate::panel::{DesignSet, PanelDataset};
use crate::trace::TraceSink;
use crate::wqr::{solve_rows, HomogeneousFit};

/// Bootstrap controls.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapConfig {
    /// Number of resamples.
    pub resamples: usize,
    pub seed: u64,
    /// Where replicate refits start from.
    pub refit_start: RefitStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefitStart {
    /// Start each replicate at the original point estimate (default).
    AtEstimate,
    /// Use the deterministic initialization on each replicate.
    Deterministic,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 50,
            seed: 0,
            refit_start: RefitStart::AtEstimate,
        }
    }
}

/// Replicate estimates and their aggregated standard errors.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub replicate_params: Vec<MixtureParams>,
    /// Standard errors shaped like the parameter point.
    pub se: MixtureParams,
    /// Replicates that errored or did not converge.
    pub failures: usize,
}

/// Draw n units with replacement; duplicates get distinct synthetic ids.
/// Returns the resampled panel (parent time grid preserved) and the drawn
/// unit indices for gathering aligned designs.
pub fn resample_units(data: &PanelDataset, rng: &mut impl Rng) -> (PanelDataset, Vec<usize>) {
    let n = data.n_units();
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let units = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let mut u = data.units[i].clone();
            u.unit_id = format!("{}#{}", u.unit_id, k + 1);
            u
        })
        .collect();
    (
        PanelDataset {
            units,
            time_grid: data.time_grid.clone(),
            covariate_names: data.covariate_names.clone(),
        },
        idx,
    )
}

/// Gather per-unit design matrices for a resample.
pub fn gather_designs(designs: &DesignSet, idx: &[usize]) -> DesignSet {
    DesignSet {
        x: idx.iter().map(|&i| designs.x[i].clone()).collect(),
        z: idx.iter().map(|&i| designs.z[i].clone()).collect(),
        w: idx.iter().map(|&i| designs.w[i].clone()).collect(),
        x_names: designs.x_names.clone(),
        z_names: designs.z_names.clone(),
        w_names: designs.w_names.clone(),
    }
}

/// Elementwise sqrt((1/B)·Σ_b (θ̂⁽ᵇ⁾ − θ̂)²), centered at the original
/// estimate.
pub fn aggregate_se(center: &MixtureParams, replicates: &[MixtureParams]) -> MixtureParams {
    let c = center.flatten();
    let mut acc = vec![0.0; c.len()];
    for rep in replicates {
        let f = rep.flatten();
        for (a, (x, x0)) in acc.iter_mut().zip(f.iter().zip(&c)) {
            let d = x - x0;
            *a += d * d;
        }
    }
    let b = replicates.len().max(1) as f64;
    let flat: Vec<f64> = acc.into_iter().map(|s| (s / b).sqrt()).collect();
    MixtureParams::from_flat(center, &flat)
}

/// Block-bootstrap standard errors for a mixture fit.
///
/// Replicates run in parallel with per-replicate seeds derived as
/// `seed ⊕ replicate-index`; aggregation order is fixed by replicate index,
/// so results are identical for any worker count.
pub fn bootstrap_se(
    fit: &FitResult,
    data: &PanelDataset,
    designs: &DesignSet,
    spec: &ModelSpec,
    config: &BootstrapConfig,
    trace: &mut dyn TraceSink,
) -> Result<BootstrapResult> {
    if config.resamples == 0 {
        return Err(Error::Bootstrap("R must be at least 1".into()));
    }
    trace.fragment("Computing standard errors: ");

    let replicates: Vec<Option<MixtureParams>> = (1..=config.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ b as u64);
            let (boot_data, idx) = resample_units(data, &mut rng);
            let boot_designs = gather_designs(designs, &idx);
            let mut boot_spec = *spec;
            boot_spec.start = match config.refit_start {
                RefitStart::AtEstimate => StartRule::Supplied,
                RefitStart::Deterministic => StartRule::Deterministic,
            };
            let supplied = match config.refit_start {
                RefitStart::AtEstimate => Some(&fit.params),
                RefitStart::Deterministic => None,
            };
            let refit = EmProblem::new(&boot_data, &boot_designs, boot_spec)
                .and_then(|prob| prob.fit(supplied));
            match refit {
                Ok(res) if res.converged => Some(res.params),
                _ => None,
            }
        })
        .collect();

    let mut kept = Vec::with_capacity(config.resamples);
    let mut failures = 0usize;
    for (b, rep) in replicates.into_iter().enumerate() {
        trace.fragment(&format!("{}  ... ", b + 1));
        match rep {
            Some(p) => kept.push(p),
            None => failures += 1,
        }
    }
    trace.line("");
    if kept.is_empty() {
        return Err(Error::Bootstrap("every replicate failed".into()));
    }

    let se = aggregate_se(&fit.params, &kept);
    Ok(BootstrapResult {
        replicate_params: kept,
        se,
        failures,
    })
}

/// Block-bootstrap standard errors for the homogeneous fit: each replicate is
/// a direct re-solve of the program on the resampled rows. Returns per
/// coefficient standard errors and the scale standard error.
pub fn homogeneous_se(
    data: &PanelDataset,
    x: &[DMatrix<f64>],
    fit: &HomogeneousFit,
    config: &BootstrapConfig,
) -> Result<(DVector<f64>, f64)> {
    if config.resamples == 0 {
        return Err(Error::Bootstrap("R must be at least 1".into()));
    }
    let k = fit.coefficients.len();

    let reps: Vec<Option<(Vec<f64>, f64)>> = (1..=config.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ b as u64);
            let (boot_data, idx) = resample_units(data, &mut rng);
            let mats: Vec<DMatrix<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
            let (xr, yr) = crate::wqr::stack_design(&boot_data, &mats);
            let w = vec![1.0; yr.len()];
            match solve_rows(&xr, &yr, &w, k, fit.q.value(), Some(&fit.names)) {
                Ok(coef) => {
                    let (scale, _) = crate::wqr::homogeneous_scale_loglik(&xr, &yr, &coef, fit.q);
                    Some((coef, scale))
                }
                Err(_) => None,
            }
        })
        .collect();

    let kept: Vec<(Vec<f64>, f64)> = reps.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Bootstrap("every replicate failed".into()));
    }
    let b = kept.len() as f64;
    let mut acc = vec![0.0; k];
    let mut acc_scale = 0.0;
    for (coef, scale) in &kept {
        for j in 0..k {
            let d = coef[j] - fit.coefficients[j];
            acc[j] += d * d;
        }
        let ds = scale - fit.scale;
        acc_scale += ds * ds;
    }
    Ok((
        DVector::from_iterator(k, acc.into_iter().map(|s| (s / b).sqrt())),
        (acc_scale / b).sqrt(),
    ))
}
