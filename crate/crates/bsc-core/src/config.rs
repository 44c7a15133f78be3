//! Fixed prior constants of the model, config file parsing, and presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BscError, Result};
use crate::panel::PanelData;

/// Every fixed prior constant of the hierarchical model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Half-Cauchy scale for the noise sd.
    pub gamma_sigma: f64,
    /// Annual fixed-effect prior mean and sd.
    pub delta_mu: f64,
    pub delta_sd: f64,
    /// Intercept hyperpriors.
    pub k_mu: f64,
    pub k_sd: f64,
    pub gamma_kappa: f64,
    /// Treatment-effect prior.
    pub alpha_mu: f64,
    pub alpha_sd: f64,
    /// Loading hyperpriors.
    pub b_mu: f64,
    pub b_sd: f64,
    pub gamma_beta: f64,
    /// Number of latent factors L.
    pub n_factors: usize,
    /// PCA prior scale multiplier lambda.
    pub pca_scale: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("gamma_sigma", self.gamma_sigma),
            ("delta_sd", self.delta_sd),
            ("k_sd", self.k_sd),
            ("gamma_kappa", self.gamma_kappa),
            ("alpha_sd", self.alpha_sd),
            ("b_sd", self.b_sd),
            ("gamma_beta", self.gamma_beta),
            ("pca_scale", self.pca_scale),
        ];
        for (name, v) in positives {
            if v <= 0.0 || !v.is_finite() {
                return Err(BscError::InvalidHyperParam(format!(
                    "{} must be strictly positive, got {}",
                    name, v
                )));
            }
        }
        if self.n_factors < 1 {
            return Err(BscError::InvalidHyperParam("n_factors must be >= 1".into()));
        }
        Ok(())
    }

    /// True when alpha_sd is small relative to the treated society's
    /// pre-period spread; callers should warn, not abort.
    pub fn effect_prior_too_tight(&self, panel: &PanelData) -> bool {
        let t0 = panel.treatment_start;
        let col = panel.outcomes.column(panel.treated_society);
        let pre: Vec<f64> = col.iter().take(t0).copied().collect();
        let n = pre.len() as f64;
        if n < 2.0 {
            return false;
        }
        let mean = pre.iter().sum::<f64>() / n;
        let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        self.alpha_sd < 10.0 * var.sqrt()
    }
}

/// Constants used for the German reunification application.
fn germany() -> HyperParams {
    HyperParams {
        gamma_sigma: 500.0,
        delta_mu: 0.0,
        delta_sd: 10_000.0,
        k_mu: 18_000.0,
        k_sd: 6_000.0,
        gamma_kappa: 2_500.0,
        alpha_mu: 0.0,
        alpha_sd: 30_000.0,
        b_mu: 0.0,
        b_sd: 1.0,
        gamma_beta: 1.0,
        n_factors: 4,
        pca_scale: 2.0,
    }
}

/// Constants used for the California tobacco application.
fn california() -> HyperParams {
    HyperParams {
        gamma_sigma: 10.0,
        delta_mu: 0.0,
        delta_sd: 30.0,
        k_mu: 180.0,
        k_sd: 90.0,
        gamma_kappa: 90.0,
        alpha_mu: 0.0,
        alpha_sd: 500.0,
        b_mu: 0.0,
        b_sd: 1.0,
        gamma_beta: 1.0,
        n_factors: 8,
        pca_scale: 2.0,
    }
}

pub fn preset(name: &str) -> Result<HyperParams> {
    match name {
        "germany" => Ok(germany()),
        "california" => Ok(california()),
        other => Err(BscError::UnknownPreset(other.to_string())),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    gamma_sigma: Option<f64>,
    delta_mu: Option<f64>,
    delta_sd: Option<f64>,
    k_mu: Option<f64>,
    k_sd: Option<f64>,
    gamma_kappa: Option<f64>,
    alpha_mu: Option<f64>,
    alpha_sd: Option<f64>,
    b_mu: Option<f64>,
    b_sd: Option<f64>,
    gamma_beta: Option<f64>,
    n_factors: Option<usize>,
    pca_scale: Option<f64>,
}

/// Parse a key-value config file, with optional `preset` fallback for
/// unspecified keys.
pub fn parse_config(path: &Path) -> Result<HyperParams> {
    let text = std::fs::read_to_string(path).map_err(|e| BscError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<HyperParams> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| BscError::Config(e.to_string()))?;
    let base = match &raw.preset {
        Some(name) => Some(preset(name)?),
        None => None,
    };
    macro_rules! field {
        ($key:ident) => {
            match (raw.$key, &base) {
                (Some(v), _) => v,
                (None, Some(b)) => b.$key,
                (None, None) => {
                    return Err(BscError::Config(format!(
                        "missing key {:?} and no preset declared",
                        stringify!($key)
                    )))
                }
            }
        };
    }
    let h = HyperParams {
        gamma_sigma: field!(gamma_sigma),
        delta_mu: field!(delta_mu),
        delta_sd: field!(delta_sd),
        k_mu: field!(k_mu),
        k_sd: field!(k_sd),
        gamma_kappa: field!(gamma_kappa),
        alpha_mu: field!(alpha_mu),
        alpha_sd: field!(alpha_sd),
        b_mu: field!(b_mu),
        b_sd: field!(b_sd),
        gamma_beta: field!(gamma_beta),
        n_factors: field!(n_factors),
        pca_scale: field!(pca_scale),
    };
    h.validate()?;
    Ok(h)
}

/// Serialize hyperparameters in the same key-value format parse_config reads.
pub fn write_config_str(h: &HyperParams) -> String {
    toml::to_string(h).expect("hyperparams serialize")
}
