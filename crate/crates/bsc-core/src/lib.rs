//! Bayesian synthetic control estimation.
//!
//! A hierarchical latent-factor model over a complete outcome panel,
//! sampled with a No-U-Turn sampler over an analytic log-posterior
//! gradient, with PCA-anchored factor priors, counterfactual and
//! treatment-effect posteriors, WAIC and split R-hat diagnostics, a
//! frequentist synthetic control baseline, and a placebo-study harness.

// index loops in the numeric kernels mirror the subscripted math
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod config;
pub mod error;
pub mod harness;
pub mod model;
pub mod nuts;
pub mod panel;
pub mod pca;
pub mod scm;
pub mod testutil;

pub use analysis::{
    counterfactual, effect_summary, split_rhat, waic, CounterfactualSummary, EffectSummary,
    SummaryDocument, WaicResult,
};
pub use config::{parse_config, preset, HyperParams};
pub use error::{BscError, Result};
pub use harness::{
    accuracy_comparison, run_placebo_study, waic_scan, Methods, PlaceboReport, WaicScan,
};
pub use model::{ModelContext, ParamLayout, Params};
pub use nuts::{sample, SamplerSettings, Trace};
pub use panel::{load_csv, PanelData};
pub use pca::{fit_pca_prior, FactorPrior};
pub use scm::{fit_scm, relabel_significance, simplex_project, ScmFit};
