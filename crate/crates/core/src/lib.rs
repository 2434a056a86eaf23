//! Linear quantile mixture models for longitudinal data.
//!
//! Fits linear quantile regression models with discrete unit-specific random
//! coefficients — time-constant (finite mixture), time-varying (hidden Markov
//! chain), or both — by maximum likelihood on the asymmetric Laplace working
//! density via an extended EM algorithm. Standard errors come from a block
//! bootstrap over units; model order is chosen by a multi-start grid search
//! with information criteria.

pub mod ald;
pub mod bootstrap;
pub mod em;
pub mod error;
pub mod hmm;
pub mod panel;
pub mod search;
pub mod sim;
pub mod stats;
pub mod trace;
pub mod wqr;

pub use ald::{ald_logdensity, ald_sd, check_loss, AldParams, QuantileLevel};
pub use bootstrap::{
    aggregate_se, bootstrap_se, resample_units, BootstrapConfig, BootstrapResult, RefitStart,
};
pub use em::{
    fold_params, BicBasis, EmProblem, FitResult, MixtureParams, ModelSpec, Posteriors, StartRule,
    Variant,
};
pub use error::{Error, Result};
pub use panel::{
    build_design, classify_missingness, load_csv, write_csv, ColSpec, DesignSet, MissingPattern,
    PanelDataset, RoleSpec, Term, UnitRecord,
};
pub use search::{
    enumerate_starts, search, search_quiet, CriterionRow, SearchPlan, SearchResult,
    SelectionMethod,
};
pub use sim::{
    brute_force_loglik, brute_force_posteriors, simulate, ColumnLaw, ErrorLaw, GeneratorSpec,
    LatentTruth, MissingRule,
};
pub use trace::{BufferTrace, NullTrace, StdoutTrace, TraceSink};
pub use wqr::{fit_lqr, solve_wqr, HomogeneousFit, WqrProblem};
