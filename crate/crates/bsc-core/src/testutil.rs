//! Synthetic data generators and numeric helpers shared by tests and benches.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::HyperParams;
use crate::model::ModelContext;
use crate::panel::PanelData;
use crate::pca::fit_pca_prior;

/// Hyperparameters sized for unit-scale synthetic panels.
pub fn small_hyper(n_factors: usize) -> HyperParams {
    HyperParams {
        gamma_sigma: 1.0,
        delta_mu: 0.0,
        delta_sd: 5.0,
        k_mu: 0.0,
        k_sd: 5.0,
        gamma_kappa: 2.0,
        alpha_mu: 0.0,
        alpha_sd: 10.0,
        b_mu: 0.0,
        b_sd: 1.0,
        gamma_beta: 1.0,
        n_factors: n_factors.max(1),
        pca_scale: 2.0,
    }
}

/// Ground truth of a simulated panel.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub sigma: f64,
    /// Treatment effect per post-period year at the treated column.
    pub alpha: Vec<f64>,
}

/// Low-rank factor panel with gaussian noise and an additive treatment
/// effect on the treated column's post period.
pub fn synthetic_panel(
    t: usize,
    j: usize,
    rank: usize,
    t0: usize,
    seed: u64,
) -> (PanelData, SimTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.1;
    let noise = Normal::new(0.0, sigma).unwrap();
    let factors: Vec<Vec<f64>> = (0..rank)
        .map(|_| (0..t).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mut y = Array2::zeros((t, j));
    for c in 0..j {
        let loadings: Vec<f64> = (0..rank).map(|_| rng.random_range(-1.5..1.5)).collect();
        let intercept: f64 = rng.random_range(-3.0..3.0);
        for r in 0..t {
            let mut v = intercept;
            for (m, f) in factors.iter().enumerate() {
                v += loadings[m] * f[r];
            }
            y[[r, c]] = v + noise.sample(&mut rng);
        }
    }
    let alpha: Vec<f64> = (t0..t).map(|_| rng.random_range(0.5..1.5)).collect();
    for (i, r) in (t0..t).enumerate() {
        y[[r, 0]] += alpha[i];
    }
    let panel = PanelData::new(
        (0..t as i32).map(|i| 1960 + i).collect(),
        (0..j).map(|c| format!("soc{:02}", c)).collect(),
        y,
        0,
        t0,
    )
    .unwrap();
    (panel, SimTruth { sigma, alpha })
}

/// Panel + small hyperparams + PCA prior bundled into a ready context.
pub fn synthetic_context(t: usize, j: usize, l: usize, t0: usize, seed: u64) -> ModelContext {
    let (panel, _) = synthetic_panel(t, j, l, t0, seed);
    let prior = fit_pca_prior(&panel, l, 2.0).unwrap();
    ModelContext::new(panel, small_hyper(l), prior).unwrap()
}

/// Draw a panel from the model's own generative process at fixed
/// hyperparameters, recording the quantities calibration tests check.
pub fn simulate_from_model(
    hyper: &HyperParams,
    template: &PanelData,
    factor_means: &Array2<f64>,
    factor_sds: &[f64],
    seed: u64,
) -> (PanelData, SimTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = template.n_years();
    let j = template.n_societies();
    let l = factor_means.ncols();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut draw = |mu: f64, sd: f64| mu + sd * std_normal.sample(&mut rng);

    // positive scales drawn from half-normal stand-ins of the half-Cauchy
    // scales, clipped away from zero so simulated panels stay well posed
    let sigma = (draw(0.0, hyper.gamma_sigma).abs()).max(hyper.gamma_sigma * 0.1);
    let kappa_sd = (draw(0.0, hyper.gamma_kappa).abs()).max(hyper.gamma_kappa * 0.1);
    let kappa_mu = draw(hyper.k_mu, hyper.k_sd);

    let mut f = Array2::zeros((t, l));
    for ti in 0..t {
        for m in 0..l {
            f[[ti, m]] = draw(factor_means[[ti, m]], factor_sds[m]);
        }
    }
    let beta_mu: Vec<f64> = (0..l).map(|_| draw(hyper.b_mu, hyper.b_sd)).collect();
    let beta_sd: Vec<f64> = (0..l)
        .map(|_| (draw(0.0, hyper.gamma_beta).abs()).max(hyper.gamma_beta * 0.1))
        .collect();
    let delta: Vec<f64> = (0..t).map(|_| draw(hyper.delta_mu, hyper.delta_sd)).collect();
    let alpha: Vec<f64> = (template.treatment_start..t)
        // moderate effects, not the near-flat alpha_sd scale
        .map(|_| draw(0.0, hyper.gamma_sigma * 2.0))
        .collect();

    let mut y = Array2::zeros((t, j));
    for ji in 0..j {
        let kappa = kappa_mu + kappa_sd * draw(0.0, 1.0);
        let b: Vec<f64> = (0..l).map(|m| beta_mu[m] + beta_sd[m] * draw(0.0, 1.0)).collect();
        for ti in 0..t {
            let mut mean = delta[ti] + kappa;
            for m in 0..l {
                mean += f[[ti, m]] * b[m];
            }
            if ji == template.treated_society && ti >= template.treatment_start {
                mean += alpha[ti - template.treatment_start];
            }
            y[[ti, ji]] = draw(mean, sigma);
        }
    }
    let panel = PanelData::new(
        template.years.clone(),
        template.societies.clone(),
        y,
        template.treated_society,
        template.treatment_start,
    )
    .unwrap();
    (panel, SimTruth { sigma, alpha })
}

/// Standard normal in `dim` dimensions, for sampler checks.
pub struct StdNormal(pub usize);

impl crate::nuts::Target for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }
    fn logp_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for i in 0..q.len() {
            lp -= 0.5 * q[i] * q[i];
            grad[i] = -q[i];
        }
        lp
    }
    fn initial_position(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.0).map(|_| rng.random_range(-2.0..2.0)).collect()
    }
}

/// Zero-mean bivariate gaussian with correlation rho.
pub struct Corr2d(pub f64);

impl crate::nuts::Target for Corr2d {
    fn dim(&self) -> usize {
        2
    }
    fn logp_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let rho = self.0;
        let c = 1.0 / (1.0 - rho * rho);
        let (x, y) = (q[0], q[1]);
        grad[0] = -c * (x - rho * y);
        grad[1] = -c * (y - rho * x);
        -0.5 * c * (x * x - 2.0 * rho * x * y + y * y)
    }
    fn initial_position(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
    }
}

/// Maximize a smooth function with L-BFGS (two-loop recursion, Armijo
/// backtracking). Good enough to certify stationary points in tests.
pub fn maximize_lbfgs<F, G>(f: F, grad: G, x0: &[f64], iters: usize) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let memory = 10;
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut g = grad(&x);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();

    for _ in 0..iters {
        // two-loop recursion on the ascent direction (negate to descend on -f)
        let mut q: Vec<f64> = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0
                / s_hist[i]
                    .iter()
                    .zip(&y_hist[i])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            alpha[i] = rho * s_hist[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            for j in 0..n {
                q[j] -= alpha[i] * y_hist[i][j];
            }
        }
        if k > 0 {
            let sy: f64 = s_hist[k - 1]
                .iter()
                .zip(&y_hist[k - 1])
                .map(|(a, b)| a * b)
                .sum();
            let yy: f64 = y_hist[k - 1].iter().map(|v| v * v).sum();
            let scale = sy / yy;
            for v in q.iter_mut() {
                *v *= scale;
            }
        }
        for i in 0..k {
            let rho = 1.0
                / s_hist[i]
                    .iter()
                    .zip(&y_hist[i])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            let beta = rho * y_hist[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            for j in 0..n {
                q[j] += s_hist[i][j] * (alpha[i] - beta);
            }
        }

        let dir = q; // ascent direction
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        if slope <= 0.0 {
            s_hist.clear();
            y_hist.clear();
            continue;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, d)| xi + step * d).collect();
            let fc = f(&cand);
            if fc.is_finite() && fc >= fx + 1e-4 * step * slope {
                let gc = grad(&cand);
                let s: Vec<f64> = cand.iter().zip(&x).map(|(a, b)| a - b).collect();
                // y = -(g_new - g_old) so that s.y > 0 for concave ascent
                let y: Vec<f64> = g.iter().zip(&gc).map(|(a, b)| a - b).collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                if sy > 1e-12 {
                    s_hist.push(s);
                    y_hist.push(y);
                    if s_hist.len() > memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                }
                x = cand;
                fx = fc;
                g = gc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let gnorm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-9 {
            break;
        }
    }
    x
}

/// Newton refinement for small problems: Hessian from finite differences
/// of the gradient, damped steps. Drives the gradient to machine-level
/// norms near a concave mode.
pub fn newton_polish<G>(grad: G, x0: &[f64], iters: usize) -> Vec<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    use nalgebra::{DMatrix, DVector};
    let n = x0.len();
    let mut x = x0.to_vec();
    let h = 1e-6;
    for _ in 0..iters {
        let g = grad(&x);
        let gnorm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-10 {
            break;
        }
        let mut hess = DMatrix::<f64>::zeros(n, n);
        let mut w = x.clone();
        for i in 0..n {
            let orig = w[i];
            w[i] = orig + h;
            let gp = grad(&w);
            w[i] = orig - h;
            let gm = grad(&w);
            w[i] = orig;
            for j in 0..n {
                hess[(j, i)] = (gp[j] - gm[j]) / (2.0 * h);
            }
        }
        // symmetrize
        let hess = (&hess + hess.transpose()) * 0.5;
        let gv = DVector::from_column_slice(&g);
        let step = match hess.lu().solve(&gv) {
            Some(s) => s,
            None => break,
        };
        // Newton step for max: x <- x - H^{-1} g
        let mut damping = 1.0;
        let base_norm = gnorm;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = (0..n).map(|i| x[i] - damping * step[i]).collect();
            let gc = grad(&cand);
            let cn: f64 = gc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if cn.is_finite() && cn < base_norm {
                x = cand;
                moved = true;
                break;
            }
            damping *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

/// Central finite differences of a scalar function.
pub fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, v: &[f64], h: f64) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut w = v.to_vec();
    for i in 0..v.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = f(&w);
        w[i] = orig - h;
        let down = f(&w);
        w[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    out
}
