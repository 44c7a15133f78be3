//! SVD-based factor prior from the untreated societies' outcomes.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::error::{BscError, Result};
use crate::panel::PanelData;

/// Latent-factor prior: mean trajectories and per-factor scales.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPrior {
    /// T x L matrix of prior mean trajectories, one column per component,
    /// ordered by descending singular value.
    pub means: Array2<f64>,
    /// Per-factor prior sd, lambda times the component score sd.
    pub sds: Vec<f64>,
    /// Fraction of variance captured by each component.
    pub explained_variance_ratio: Vec<f64>,
}

/// Fit the factor prior on all years of the untreated societies.
pub fn fit_pca_prior(panel: &PanelData, n_factors: usize, lambda: f64) -> Result<FactorPrior> {
    fit_pca_prior_opts(panel, n_factors, lambda, false)
}

/// As `fit_pca_prior`, optionally estimating component directions from
/// pre-treatment rows only (scores still span all years).
pub fn fit_pca_prior_opts(
    panel: &PanelData,
    n_factors: usize,
    lambda: f64,
    pre_period_only: bool,
) -> Result<FactorPrior> {
    let untreated = panel.untreated_indices();
    let n_cols = untreated.len();
    let t = panel.n_years();
    if n_factors >= n_cols.max(1) && n_cols > 0 && n_factors >= n_cols {
        return Err(BscError::Pca(format!(
            "n_factors={} must be < number of untreated societies ({})",
            n_factors, n_cols
        )));
    }
    if n_cols == 0 {
        return Err(BscError::Pca("no untreated societies".into()));
    }
    if n_factors > t {
        return Err(BscError::Pca(format!(
            "n_factors={} exceeds number of years ({})",
            n_factors, t
        )));
    }
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(BscError::Pca(format!("lambda must be > 0, got {}", lambda)));
    }

    let fit_rows = if pre_period_only {
        panel.treatment_start
    } else {
        t
    };

    // Center each untreated column by its mean over the fit rows.
    let mut col_means = vec![0.0; n_cols];
    for (c, &j) in untreated.iter().enumerate() {
        let mut s = 0.0;
        for r in 0..fit_rows {
            s += panel.outcomes[[r, j]];
        }
        col_means[c] = s / fit_rows as f64;
    }
    let mut fit_mat = DMatrix::<f64>::zeros(fit_rows, n_cols);
    for (c, &j) in untreated.iter().enumerate() {
        for r in 0..fit_rows {
            fit_mat[(r, c)] = panel.outcomes[[r, j]] - col_means[c];
        }
    }
    if fit_mat.iter().all(|v| v.abs() < 1e-300) {
        return Err(BscError::Pca(
            "zero-variance data: all columns constant after centering".into(),
        ));
    }

    let svd = fit_mat.clone().svd(true, true);
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let singular = &svd.singular_values;
    let k = singular.len();
    if n_factors > k {
        return Err(BscError::Pca(format!(
            "n_factors={} exceeds data rank bound {}",
            n_factors, k
        )));
    }

    let total_var: f64 = singular.iter().map(|s| s * s).sum();
    if total_var <= 0.0 {
        return Err(BscError::Pca("zero-variance data".into()));
    }

    // Sign convention: the largest-magnitude entry of each right singular
    // vector is positive.
    let mut signs = vec![1.0; n_factors];
    for m in 0..n_factors {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for c in 0..n_cols {
            let v = v_t[(m, c)];
            if v.abs() > best {
                best = v.abs();
                sign = if v >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        signs[m] = sign;
    }

    // Component scores over all T rows: centered data projected on V.
    let mut means = Array2::zeros((t, n_factors));
    for m in 0..n_factors {
        for r in 0..t {
            let mut score = 0.0;
            for (c, &j) in untreated.iter().enumerate() {
                score += (panel.outcomes[[r, j]] - col_means[c]) * v_t[(m, c)];
            }
            means[[r, m]] = signs[m] * score;
        }
    }

    let mut sds = Vec::with_capacity(n_factors);
    for m in 0..n_factors {
        let col = means.column(m);
        let mean = col.sum() / t as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        let sd = var.sqrt();
        if sd <= 0.0 {
            return Err(BscError::Pca(format!("component {} has zero variance", m)));
        }
        sds.push(lambda * sd);
    }

    let explained_variance_ratio: Vec<f64> = (0..n_factors)
        .map(|m| singular[m] * singular[m] / total_var)
        .collect();

    Ok(FactorPrior {
        means,
        sds,
        explained_variance_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rank2_panel(t: usize, j: usize, seed: u64) -> PanelData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f1: Vec<f64> = (0..t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f2: Vec<f64> = (0..t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut y = Array2::zeros((t, j));
        for c in 0..j {
            let b1: f64 = rng.random_range(-2.0..2.0);
            let b2: f64 = rng.random_range(-2.0..2.0);
            let k: f64 = rng.random_range(-5.0..5.0);
            for r in 0..t {
                y[[r, c]] = b1 * f1[r] + b2 * f2[r] + k;
            }
        }
        PanelData::new(
            (0..t as i32).map(|i| 1980 + i).collect(),
            (0..j).map(|c| format!("s{}", c)).collect(),
            y,
            0,
            t / 2,
        )
        .unwrap()
    }

    #[test]
    fn exact_low_rank_explains_everything() {
        let p = rank2_panel(12, 6, 1);
        let prior = fit_pca_prior(&p, 2, 2.0).unwrap();
        let cum: f64 = prior.explained_variance_ratio.iter().sum();
        assert!((cum - 1.0).abs() < 1e-10, "cum = {}", cum);
    }

    #[test]
    fn sds_are_lambda_times_score_sd() {
        let p = rank2_panel(10, 5, 2);
        let a = fit_pca_prior(&p, 2, 1.0).unwrap();
        let b = fit_pca_prior(&p, 2, 2.0).unwrap();
        for m in 0..2 {
            assert!((b.sds[m] - 2.0 * a.sds[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn columns_zero_mean_and_ordered() {
        let p = rank2_panel(14, 7, 3);
        let prior = fit_pca_prior(&p, 2, 2.0).unwrap();
        for m in 0..2 {
            let col = prior.means.column(m);
            let mean = col.sum() / col.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
        assert!(prior.sds[0] >= prior.sds[1]);
        assert!(prior.explained_variance_ratio[0] >= prior.explained_variance_ratio[1]);
    }

    #[test]
    fn deterministic_fit() {
        let p = rank2_panel(12, 6, 4);
        let a = fit_pca_prior(&p, 2, 2.0).unwrap();
        let b = fit_pca_prior(&p, 2, 2.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_factors_rejected() {
        let p = rank2_panel(12, 4, 5);
        assert!(fit_pca_prior(&p, 3, 2.0).is_err());
    }

    #[test]
    fn constant_columns_rejected() {
        let t = 6;
        let y = Array2::from_elem((t, 3), 4.2);
        let p = PanelData::new(
            (0..t as i32).map(|i| 2000 + i).collect(),
            vec!["a".into(), "b".into(), "c".into()],
            y,
            0,
            3,
        )
        .unwrap();
        assert!(matches!(fit_pca_prior(&p, 1, 2.0), Err(BscError::Pca(_))));
    }

    #[test]
    fn reconstruction_matches_explained_ratio() {
        // noisy full-rank panel: residual after L components should equal
        // 1 - cumulative ratio of total variance
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, j) = (15, 8);
        let mut y = Array2::zeros((t, j));
        for v in y.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let p = PanelData::new(
            (0..t as i32).map(|i| 1990 + i).collect(),
            (0..j).map(|c| format!("s{}", c)).collect(),
            y,
            0,
            8,
        )
        .unwrap();
        let l = 3;
        let prior = fit_pca_prior(&p, l, 2.0).unwrap();

        // rebuild loadings by least squares: since scores are orthogonal,
        // loading = <centered col, score> / ||score||^2
        let untreated = p.untreated_indices();
        let mut total = 0.0;
        let mut resid = 0.0;
        let col_means: Vec<f64> = untreated
            .iter()
            .map(|&c| p.outcomes.column(c).sum() / t as f64)
            .collect();
        for (ci, &c) in untreated.iter().enumerate() {
            let centered: Vec<f64> = (0..t)
                .map(|r| p.outcomes[[r, c]] - col_means[ci])
                .collect();
            let mut recon = vec![0.0; t];
            for m in 0..l {
                let score: Vec<f64> = (0..t).map(|r| prior.means[[r, m]]).collect();
                let norm2: f64 = score.iter().map(|s| s * s).sum();
                let dot: f64 = score.iter().zip(&centered).map(|(s, x)| s * x).sum();
                let w = dot / norm2;
                for r in 0..t {
                    recon[r] += w * score[r];
                }
            }
            for r in 0..t {
                total += centered[r] * centered[r];
                resid += (centered[r] - recon[r]).powi(2);
            }
        }
        let cum: f64 = prior.explained_variance_ratio.iter().sum();
        assert!((resid / total - (1.0 - cum)).abs() < 1e-9);
    }
}
