//! Frequentist synthetic control baseline: simplex-constrained least
//! squares on pre-period outcomes and the relabeling significance test.

use ndarray::{Array1, Array2};

use crate::error::{BscError, Result};
use crate::panel::PanelData;

/// Fitted synthetic control.
#[derive(Debug, Clone)]
pub struct ScmFit {
    /// Weights over comparison societies, panel order with the treated
    /// column removed.
    pub weights: Vec<f64>,
    /// Root SSE over the pre-period fit.
    pub pre_loss: f64,
    /// Weighted comparison trajectory over the post period.
    pub counterfactual: Vec<f64>,
}

/// Euclidean projection onto the probability simplex, sort-and-threshold.
pub fn simplex_project(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut u = y.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut rho = 0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let k = (i + 1) as f64;
        let t = (css - 1.0) / k;
        if ui - t > 0.0 {
            rho = i + 1;
            theta = t;
        }
    }
    debug_assert!(rho > 0);
    let _ = n;
    y.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Solve min ||x1 - X0 w||^2 over the simplex by accelerated projected
/// gradient (FISTA), run to a tight gradient-mapping tolerance.
fn solve_simplex_ls(x0: &Array2<f64>, x1: &Array1<f64>) -> Vec<f64> {
    let n = x0.ncols();
    if n == 1 {
        return vec![1.0];
    }
    // Lipschitz bound for the gradient: 2 * ||X0||_F^2
    let lip = 2.0 * x0.iter().map(|v| v * v).sum::<f64>().max(1e-12);
    let step = 1.0 / lip;
    let grad = |w: &[f64]| -> Vec<f64> {
        // 2 X0' (X0 w - x1)
        let mut fitted = vec![0.0; x0.nrows()];
        for r in 0..x0.nrows() {
            let mut s = 0.0;
            for c in 0..n {
                s += x0[[r, c]] * w[c];
            }
            fitted[r] = s - x1[r];
        }
        (0..n)
            .map(|c| 2.0 * (0..x0.nrows()).map(|r| x0[[r, c]] * fitted[r]).sum::<f64>())
            .collect()
    };
    let mut w = vec![1.0 / n as f64; n];
    let mut z = w.clone();
    let mut t_acc = 1.0f64;
    for _ in 0..100_000 {
        let g = grad(&z);
        let cand: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| zi - step * gi).collect();
        let w_next = simplex_project(&cand);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
        let z_next: Vec<f64> = w_next
            .iter()
            .zip(&w)
            .map(|(wn, wo)| wn + (t_acc - 1.0) / t_next * (wn - wo))
            .collect();
        // gradient-mapping norm at the new iterate
        let gw = grad(&w_next);
        let mapped: Vec<f64> = w_next
            .iter()
            .zip(&gw)
            .map(|(wi, gi)| wi - step * gi)
            .collect();
        let proj = simplex_project(&mapped);
        let gm_norm = w_next
            .iter()
            .zip(&proj)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / step;
        w = w_next;
        z = z_next;
        t_acc = t_next;
        if gm_norm < 1e-10 {
            break;
        }
    }
    w
}

pub fn fit_scm(panel: &PanelData) -> Result<ScmFit> {
    let t0 = panel.treatment_start;
    let j = panel.n_societies();
    if t0 < 2 {
        return Err(BscError::InvalidArgument(
            "SCM needs at least 2 pre-period years".into(),
        ));
    }
    if j < 2 {
        return Err(BscError::NoComparisonPool(j));
    }
    let comparison = panel.untreated_indices();
    let n = comparison.len();
    let mut x0 = Array2::zeros((t0, n));
    for (c, &ji) in comparison.iter().enumerate() {
        for r in 0..t0 {
            x0[[r, c]] = panel.outcomes[[r, ji]];
        }
    }
    let x1 = Array1::from_iter((0..t0).map(|r| panel.outcomes[[r, panel.treated_society]]));
    let weights = solve_simplex_ls(&x0, &x1);

    let mut sse = 0.0;
    for r in 0..t0 {
        let mut fit = 0.0;
        for (c, &ji) in comparison.iter().enumerate() {
            fit += weights[c] * panel.outcomes[[r, ji]];
        }
        sse += (x1[r] - fit).powi(2);
    }
    let counterfactual: Vec<f64> = (t0..panel.n_years())
        .map(|r| {
            comparison
                .iter()
                .enumerate()
                .map(|(c, &ji)| weights[c] * panel.outcomes[[r, ji]])
                .sum()
        })
        .collect();
    Ok(ScmFit {
        weights,
        pre_loss: sse.sqrt(),
        counterfactual,
    })
}

/// One placebo run's outcome for a society.
#[derive(Debug, Clone)]
pub struct PlaceboEffect {
    pub society: String,
    /// Post-period effect series (observed - counterfactual), empty on failure.
    pub effects: Vec<f64>,
    pub error: Option<String>,
}

/// Result of the relabeling significance test.
#[derive(Debug, Clone)]
pub struct RelabelSignificance {
    /// Fraction of societies (target included) whose mean absolute
    /// post-period effect is <= the target's.
    pub rank: f64,
    /// Same fraction over the comparison societies only.
    pub rank_excluding_target: f64,
    pub significant: bool,
    pub placebo_effects: Vec<PlaceboEffect>,
}

/// Apply `effect_fn` to the true treated society and to every comparison
/// society under relabeling, and rank the target's mean absolute effect.
pub fn relabel_significance<F>(panel: &PanelData, effect_fn: F) -> Result<RelabelSignificance>
where
    F: Fn(&PanelData) -> Result<Vec<f64>>,
{
    let j = panel.n_societies();
    if j < 2 {
        return Err(BscError::NoComparisonPool(j));
    }
    let mut placebo_effects = Vec::with_capacity(j);
    for ji in 0..j {
        let relabeled = panel.relabel(ji)?;
        match effect_fn(&relabeled) {
            Ok(effects) => placebo_effects.push(PlaceboEffect {
                society: panel.societies[ji].clone(),
                effects,
                error: None,
            }),
            Err(e) => placebo_effects.push(PlaceboEffect {
                society: panel.societies[ji].clone(),
                effects: vec![],
                error: Some(e.to_string()),
            }),
        }
    }
    let mean_abs = |e: &[f64]| e.iter().map(|x| x.abs()).sum::<f64>() / e.len().max(1) as f64;
    let target = &placebo_effects[panel.treated_society];
    if target.error.is_some() {
        return Err(BscError::Sampler(format!(
            "estimator failed on the target society: {}",
            target.error.clone().unwrap()
        )));
    }
    let target_effect = mean_abs(&target.effects);
    let ok: Vec<&PlaceboEffect> = placebo_effects
        .iter()
        .filter(|p| p.error.is_none())
        .collect();
    let n_le = ok
        .iter()
        .filter(|p| mean_abs(&p.effects) <= target_effect)
        .count();
    let rank = n_le as f64 / ok.len() as f64;
    let n_others = ok.len() - 1;
    let rank_excluding_target = if n_others == 0 {
        1.0
    } else {
        (n_le - 1) as f64 / n_others as f64
    };
    Ok(RelabelSignificance {
        rank,
        rank_excluding_target,
        significant: rank >= 0.95,
        placebo_effects,
    })
}

/// SCM post-period effect series for use as an `effect_fn`.
pub fn scm_effects(panel: &PanelData) -> Result<Vec<f64>> {
    let fit = fit_scm(panel)?;
    Ok((panel.treatment_start..panel.n_years())
        .enumerate()
        .map(|(k, r)| panel.outcomes[[r, panel.treated_society]] - fit.counterfactual[k])
        .collect())
}
