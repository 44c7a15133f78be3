//! Unconstrained parameterization of the posterior, its log-density, and
//! the analytic gradient used by the sampler.
//!
//! Packing order of the flat vector (a frozen contract, version tag in the
//! trace format depends on it):
//!
//! ```text
//! F        T*L   row-major, factor trajectories (centered prior N(P, r^2))
//! B_raw    J*L   row-major, standardized loadings (N(0,1))
//! delta    T     annual fixed effects
//! kappa_raw J    standardized intercept residuals (N(0,1))
//! alpha    T-T0  treatment effect, treated cells only, by year
//! kappa_mu 1
//! log_kappa_sd 1
//! beta_mu  L
//! log_beta_sd L
//! log_sigma 1
//! ```
//!
//! Hierarchical layers are non-centered: kappa = kappa_mu + kappa_sd *
//! kappa_raw and B = beta_mu + beta_sd o B_raw. Positive parameters live on
//! the log scale with the +x Jacobian term included. All normalization
//! constants are kept so information criteria are comparable across runs.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::HyperParams;
use crate::error::{BscError, Result};
use crate::panel::PanelData;
use crate::pca::FactorPrior;

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

#[inline]
pub(crate) fn log_normal(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// log density of Half-Cauchy(gamma) at x >= 0.
#[inline]
pub(crate) fn log_half_cauchy(x: f64, gamma: f64) -> f64 {
    std::f64::consts::FRAC_2_PI.ln() - gamma.ln() - (1.0 + (x / gamma) * (x / gamma)).ln()
}

/// Index arithmetic for the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub t: usize,
    pub j: usize,
    pub l: usize,
    pub t0: usize,
}

impl ParamLayout {
    pub fn new(t: usize, j: usize, l: usize, t0: usize) -> Self {
        Self { t, j, l, t0 }
    }

    pub fn n_alpha(&self) -> usize {
        self.t - self.t0
    }

    pub fn dim(&self) -> usize {
        self.t * self.l + self.j * self.l + self.t + self.j + self.n_alpha() + 2 * self.l + 3
    }

    #[inline]
    pub fn f(&self, t: usize, m: usize) -> usize {
        t * self.l + m
    }
    #[inline]
    pub fn b_raw(&self, j: usize, m: usize) -> usize {
        self.t * self.l + j * self.l + m
    }
    #[inline]
    pub fn delta(&self, t: usize) -> usize {
        self.t * self.l + self.j * self.l + t
    }
    #[inline]
    pub fn kappa_raw(&self, j: usize) -> usize {
        self.t * self.l + self.j * self.l + self.t + j
    }
    /// alpha for post-period year index t (t >= t0).
    #[inline]
    pub fn alpha(&self, t: usize) -> usize {
        debug_assert!(t >= self.t0);
        self.t * self.l + self.j * self.l + self.t + self.j + (t - self.t0)
    }
    #[inline]
    pub fn kappa_mu(&self) -> usize {
        self.t * self.l + self.j * self.l + self.t + self.j + self.n_alpha()
    }
    #[inline]
    pub fn log_kappa_sd(&self) -> usize {
        self.kappa_mu() + 1
    }
    #[inline]
    pub fn beta_mu(&self, m: usize) -> usize {
        self.kappa_mu() + 2 + m
    }
    #[inline]
    pub fn log_beta_sd(&self, m: usize) -> usize {
        self.kappa_mu() + 2 + self.l + m
    }
    #[inline]
    pub fn log_sigma(&self) -> usize {
        self.kappa_mu() + 2 + 2 * self.l
    }
}

/// Structured view of one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub f: Array2<f64>,
    pub b_raw: Array2<f64>,
    pub delta: Vec<f64>,
    pub kappa_raw: Vec<f64>,
    pub alpha: Vec<f64>,
    pub kappa_mu: f64,
    pub log_kappa_sd: f64,
    pub beta_mu: Vec<f64>,
    pub log_beta_sd: Vec<f64>,
    pub log_sigma: f64,
}

impl Params {
    pub fn unpack(layout: &ParamLayout, v: &[f64]) -> Result<Self> {
        if v.len() != layout.dim() {
            return Err(BscError::DimensionMismatch(format!(
                "param vector has {} entries, layout needs {}",
                v.len(),
                layout.dim()
            )));
        }
        let (t, j, l) = (layout.t, layout.j, layout.l);
        let mut f = Array2::zeros((t, l));
        for ti in 0..t {
            for m in 0..l {
                f[[ti, m]] = v[layout.f(ti, m)];
            }
        }
        let mut b_raw = Array2::zeros((j, l));
        for ji in 0..j {
            for m in 0..l {
                b_raw[[ji, m]] = v[layout.b_raw(ji, m)];
            }
        }
        Ok(Self {
            f,
            b_raw,
            delta: (0..t).map(|ti| v[layout.delta(ti)]).collect(),
            kappa_raw: (0..j).map(|ji| v[layout.kappa_raw(ji)]).collect(),
            alpha: (layout.t0..t).map(|ti| v[layout.alpha(ti)]).collect(),
            kappa_mu: v[layout.kappa_mu()],
            log_kappa_sd: v[layout.log_kappa_sd()],
            beta_mu: (0..l).map(|m| v[layout.beta_mu(m)]).collect(),
            log_beta_sd: (0..l).map(|m| v[layout.log_beta_sd(m)]).collect(),
            log_sigma: v[layout.log_sigma()],
        })
    }

    pub fn pack(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut v = vec![0.0; layout.dim()];
        for ti in 0..layout.t {
            for m in 0..layout.l {
                v[layout.f(ti, m)] = self.f[[ti, m]];
            }
        }
        for ji in 0..layout.j {
            for m in 0..layout.l {
                v[layout.b_raw(ji, m)] = self.b_raw[[ji, m]];
            }
        }
        for ti in 0..layout.t {
            v[layout.delta(ti)] = self.delta[ti];
        }
        for ji in 0..layout.j {
            v[layout.kappa_raw(ji)] = self.kappa_raw[ji];
        }
        for ti in layout.t0..layout.t {
            v[layout.alpha(ti)] = self.alpha[ti - layout.t0];
        }
        v[layout.kappa_mu()] = self.kappa_mu;
        v[layout.log_kappa_sd()] = self.log_kappa_sd;
        for m in 0..layout.l {
            v[layout.beta_mu(m)] = self.beta_mu[m];
            v[layout.log_beta_sd(m)] = self.log_beta_sd[m];
        }
        v[layout.log_sigma()] = self.log_sigma;
        v
    }
}

/// Everything needed to evaluate the posterior: data, constants, factor prior.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub panel: PanelData,
    pub hyper: HyperParams,
    pub factor_prior: FactorPrior,
    layout: ParamLayout,
}

impl ModelContext {
    pub fn new(panel: PanelData, hyper: HyperParams, factor_prior: FactorPrior) -> Result<Self> {
        hyper.validate()?;
        let t = panel.n_years();
        let l = factor_prior.means.ncols();
        if factor_prior.means.nrows() != t {
            return Err(BscError::DimensionMismatch(format!(
                "factor prior has {} rows, panel has {} years",
                factor_prior.means.nrows(),
                t
            )));
        }
        if factor_prior.sds.len() != l {
            return Err(BscError::DimensionMismatch(
                "factor prior sds length != number of columns".into(),
            ));
        }
        let layout = ParamLayout::new(t, panel.n_societies(), l, panel.treatment_start);
        Ok(Self {
            panel,
            hyper,
            factor_prior,
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Model mean matrix M for one parameter vector, with or without the
    /// treatment term.
    pub fn mean_matrix(&self, v: &[f64], with_treatment: bool) -> Result<Array2<f64>> {
        self.check(v)?;
        let lay = &self.layout;
        let (t, j, l) = (lay.t, lay.j, lay.l);
        let kappa_sd = v[lay.log_kappa_sd()].exp();
        let beta_sd: Vec<f64> = (0..l).map(|m| v[lay.log_beta_sd(m)].exp()).collect();
        let mut m_mat = Array2::zeros((t, j));
        for ji in 0..j {
            let kappa = v[lay.kappa_mu()] + kappa_sd * v[lay.kappa_raw(ji)];
            let b: Vec<f64> = (0..l)
                .map(|m| v[lay.beta_mu(m)] + beta_sd[m] * v[lay.b_raw(ji, m)])
                .collect();
            for ti in 0..t {
                let mut mean = v[lay.delta(ti)] + kappa;
                for m in 0..l {
                    mean += v[lay.f(ti, m)] * b[m];
                }
                if with_treatment && ji == self.panel.treated_society && ti >= lay.t0 {
                    mean += v[lay.alpha(ti)];
                }
                m_mat[[ti, ji]] = mean;
            }
        }
        Ok(m_mat)
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.layout.dim() {
            return Err(BscError::DimensionMismatch(format!(
                "got {} parameters, expected {}",
                v.len(),
                self.layout.dim()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(BscError::NonFinite("parameter vector".into()));
        }
        Ok(())
    }

    /// log p(Y | theta) + log p(theta) up to an additive constant in the data.
    pub fn log_posterior(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        Ok(self.logp_grad_inner(v, None))
    }

    /// Analytic gradient of `log_posterior` in the same packing order.
    pub fn grad_log_posterior(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        let mut grad = vec![0.0; v.len()];
        self.logp_grad_inner(v, Some(&mut grad));
        Ok(grad)
    }

    /// Both at once; the hot path for the sampler. No validation: non-finite
    /// results are the caller's divergence signal.
    pub fn logp_and_grad(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.logp_grad_inner(v, Some(grad))
    }

    fn logp_grad_inner(&self, v: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let lay = &self.layout;
        let (t, j, l) = (lay.t, lay.j, lay.l);
        let h = &self.hyper;
        let y = &self.panel.outcomes;
        let p_mat = &self.factor_prior.means;
        let r = &self.factor_prior.sds;
        let treated = self.panel.treated_society;

        let log_sigma = v[lay.log_sigma()];
        let sigma = log_sigma.exp();
        let kappa_sd = v[lay.log_kappa_sd()].exp();
        let kappa_mu = v[lay.kappa_mu()];
        let beta_sd: Vec<f64> = (0..l).map(|m| v[lay.log_beta_sd(m)].exp()).collect();
        let beta_mu: Vec<f64> = (0..l).map(|m| v[lay.beta_mu(m)]).collect();

        let inv_var = 1.0 / (sigma * sigma);
        let mut logp = 0.0;

        // Likelihood and its pullback through M.
        let mut sum_r2 = 0.0;
        // grad accumulators for hyper-level chain rules
        let mut g_kappa_mu_acc = 0.0;
        let mut g_log_kappa_sd_acc = 0.0;
        let mut g_beta_mu_acc = vec![0.0; l];
        let mut g_log_beta_sd_acc = vec![0.0; l];

        for ji in 0..j {
            let kappa_raw = v[lay.kappa_raw(ji)];
            let kappa = kappa_mu + kappa_sd * kappa_raw;
            let b: Vec<f64> = (0..l)
                .map(|m| beta_mu[m] + beta_sd[m] * v[lay.b_raw(ji, m)])
                .collect();
            let mut g_kappa_j = 0.0;
            let mut g_b_j = vec![0.0; l];
            for ti in 0..t {
                let mut mean = v[lay.delta(ti)] + kappa;
                for m in 0..l {
                    mean += v[lay.f(ti, m)] * b[m];
                }
                let is_treated_cell = ji == treated && ti >= lay.t0;
                if is_treated_cell {
                    mean += v[lay.alpha(ti)];
                }
                let resid = y[[ti, ji]] - mean;
                sum_r2 += resid * resid;
                if let Some(g) = grad.as_mut() {
                    let gm = resid * inv_var; // d logp / d M_cell
                    g[lay.delta(ti)] += gm;
                    g_kappa_j += gm;
                    for m in 0..l {
                        g[lay.f(ti, m)] += gm * b[m];
                        g_b_j[m] += gm * v[lay.f(ti, m)];
                    }
                    if is_treated_cell {
                        g[lay.alpha(ti)] += gm;
                    }
                }
            }
            if let Some(g) = grad.as_mut() {
                g[lay.kappa_raw(ji)] += g_kappa_j * kappa_sd;
                g_kappa_mu_acc += g_kappa_j;
                g_log_kappa_sd_acc += g_kappa_j * kappa_raw * kappa_sd;
                for m in 0..l {
                    g[lay.b_raw(ji, m)] += g_b_j[m] * beta_sd[m];
                    g_beta_mu_acc[m] += g_b_j[m];
                    g_log_beta_sd_acc[m] += g_b_j[m] * v[lay.b_raw(ji, m)] * beta_sd[m];
                }
            }
        }
        let n_cells = (t * j) as f64;
        logp += -0.5 * n_cells * LN_2PI - n_cells * log_sigma - 0.5 * sum_r2 * inv_var;

        // Priors.
        for ti in 0..t {
            for m in 0..l {
                logp += log_normal(v[lay.f(ti, m)], p_mat[[ti, m]], r[m]);
            }
            logp += log_normal(v[lay.delta(ti)], h.delta_mu, h.delta_sd);
        }
        for ji in 0..j {
            logp += log_normal(v[lay.kappa_raw(ji)], 0.0, 1.0);
            for m in 0..l {
                logp += log_normal(v[lay.b_raw(ji, m)], 0.0, 1.0);
            }
        }
        for ti in lay.t0..t {
            logp += log_normal(v[lay.alpha(ti)], h.alpha_mu, h.alpha_sd);
        }
        logp += log_normal(kappa_mu, h.k_mu, h.k_sd);
        for m in 0..l {
            logp += log_normal(beta_mu[m], h.b_mu, h.b_sd);
        }
        // log-scale positives: half-Cauchy density plus the Jacobian of exp.
        logp += log_half_cauchy(sigma, h.gamma_sigma) + log_sigma;
        logp += log_half_cauchy(kappa_sd, h.gamma_kappa) + v[lay.log_kappa_sd()];
        for m in 0..l {
            logp += log_half_cauchy(beta_sd[m], h.gamma_beta) + v[lay.log_beta_sd(m)];
        }

        if let Some(g) = grad.as_mut() {
            for ti in 0..t {
                for m in 0..l {
                    g[lay.f(ti, m)] -= (v[lay.f(ti, m)] - p_mat[[ti, m]]) / (r[m] * r[m]);
                }
                g[lay.delta(ti)] -= (v[lay.delta(ti)] - h.delta_mu) / (h.delta_sd * h.delta_sd);
            }
            for ji in 0..j {
                g[lay.kappa_raw(ji)] -= v[lay.kappa_raw(ji)];
                for m in 0..l {
                    g[lay.b_raw(ji, m)] -= v[lay.b_raw(ji, m)];
                }
            }
            for ti in lay.t0..t {
                g[lay.alpha(ti)] -= (v[lay.alpha(ti)] - h.alpha_mu) / (h.alpha_sd * h.alpha_sd);
            }
            g[lay.kappa_mu()] = g_kappa_mu_acc - (kappa_mu - h.k_mu) / (h.k_sd * h.k_sd);
            g[lay.log_kappa_sd()] = g_log_kappa_sd_acc
                - 2.0 * kappa_sd * kappa_sd / (h.gamma_kappa * h.gamma_kappa + kappa_sd * kappa_sd)
                + 1.0;
            for m in 0..l {
                g[lay.beta_mu(m)] =
                    g_beta_mu_acc[m] - (beta_mu[m] - h.b_mu) / (h.b_sd * h.b_sd);
                g[lay.log_beta_sd(m)] = g_log_beta_sd_acc[m]
                    - 2.0 * beta_sd[m] * beta_sd[m]
                        / (h.gamma_beta * h.gamma_beta + beta_sd[m] * beta_sd[m])
                    + 1.0;
            }
            g[lay.log_sigma()] = sum_r2 * inv_var - n_cells
                - 2.0 * sigma * sigma / (h.gamma_sigma * h.gamma_sigma + sigma * sigma)
                + 1.0;
        }

        logp
    }

    /// Deterministic seeded starting point: prior means plus uniform jitter.
    pub fn initial_point(&self, rng_seed: u64) -> Vec<f64> {
        let mut v = self.initial_point_unjittered();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        for x in v.iter_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
        v
    }

    /// Prior-mean starting point with no jitter.
    pub fn initial_point_unjittered(&self) -> Vec<f64> {
        let lay = &self.layout;
        let h = &self.hyper;
        let p = Params {
            f: self.factor_prior.means.clone(),
            b_raw: Array2::zeros((lay.j, lay.l)),
            delta: vec![h.delta_mu; lay.t],
            kappa_raw: vec![0.0; lay.j],
            alpha: vec![h.alpha_mu; lay.n_alpha()],
            kappa_mu: h.k_mu,
            log_kappa_sd: h.gamma_kappa.ln(),
            beta_mu: vec![h.b_mu; lay.l],
            log_beta_sd: vec![h.gamma_beta.ln(); lay.l],
            log_sigma: h.gamma_sigma.ln(),
        };
        p.pack(lay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::pca::fit_pca_prior;
    use crate::testutil::{synthetic_context, synthetic_panel};

    #[test]
    fn layout_dim_formula() {
        let lay = ParamLayout::new(12, 5, 2, 8);
        assert_eq!(lay.dim(), 12 * 2 + 5 * 2 + 12 + 5 + 4 + 4 + 3);
    }

    #[test]
    fn pack_unpack_round_trip_bit_exact() {
        let ctx = synthetic_context(9, 4, 2, 6, 11);
        let v = ctx.initial_point(3);
        let p = Params::unpack(ctx.layout(), &v).unwrap();
        let w = p.pack(ctx.layout());
        assert_eq!(v, w);
    }

    #[test]
    fn logp_invariant_under_repack() {
        let ctx = synthetic_context(9, 4, 2, 6, 12);
        let v = ctx.initial_point(5);
        let w = Params::unpack(ctx.layout(), &v).unwrap().pack(ctx.layout());
        assert_eq!(
            ctx.log_posterior(&v).unwrap(),
            ctx.log_posterior(&w).unwrap()
        );
    }

    #[test]
    fn nan_rejected() {
        let ctx = synthetic_context(6, 3, 1, 4, 13);
        let mut v = ctx.initial_point(1);
        v[0] = f64::NAN;
        assert!(matches!(
            ctx.log_posterior(&v),
            Err(BscError::NonFinite(_))
        ));
        assert!(ctx.grad_log_posterior(&v).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let ctx = synthetic_context(6, 3, 1, 4, 14);
        let v = vec![0.0; ctx.dim() + 1];
        assert!(ctx.log_posterior(&v).is_err());
    }

    // Independent oracle: textbook densities summed term by term with no
    // shared code with logp_grad_inner.
    fn oracle_logp(ctx: &ModelContext, v: &[f64]) -> f64 {
        let lay = *ctx.layout();
        let p = Params::unpack(&lay, v).unwrap();
        let h = &ctx.hyper;
        let sigma = p.log_sigma.exp();
        let kappa_sd = p.log_kappa_sd.exp();
        let beta_sd: Vec<f64> = p.log_beta_sd.iter().map(|x| x.exp()).collect();
        let norm = |x: f64, mu: f64, s: f64| {
            -((2.0 * std::f64::consts::PI).sqrt() * s).ln() - (x - mu).powi(2) / (2.0 * s * s)
        };
        let hc = |x: f64, g: f64| {
            (2.0f64).ln() - std::f64::consts::PI.ln() - g.ln() - (1.0 + (x / g).powi(2)).ln()
        };
        let mut total = 0.0;
        for ti in 0..lay.t {
            for ji in 0..lay.j {
                let mut mean = p.delta[ti] + p.kappa_mu + kappa_sd * p.kappa_raw[ji];
                for m in 0..lay.l {
                    let b = p.beta_mu[m] + beta_sd[m] * p.b_raw[[ji, m]];
                    mean += p.f[[ti, m]] * b;
                }
                if ji == ctx.panel.treated_society && ti >= lay.t0 {
                    mean += p.alpha[ti - lay.t0];
                }
                total += norm(ctx.panel.outcomes[[ti, ji]], mean, sigma);
            }
        }
        for ti in 0..lay.t {
            for m in 0..lay.l {
                total += norm(
                    p.f[[ti, m]],
                    ctx.factor_prior.means[[ti, m]],
                    ctx.factor_prior.sds[m],
                );
            }
            total += norm(p.delta[ti], h.delta_mu, h.delta_sd);
        }
        for ji in 0..lay.j {
            total += norm(p.kappa_raw[ji], 0.0, 1.0);
            for m in 0..lay.l {
                total += norm(p.b_raw[[ji, m]], 0.0, 1.0);
            }
        }
        for a in &p.alpha {
            total += norm(*a, h.alpha_mu, h.alpha_sd);
        }
        total += norm(p.kappa_mu, h.k_mu, h.k_sd);
        for m in 0..lay.l {
            total += norm(p.beta_mu[m], h.b_mu, h.b_sd);
        }
        total += hc(sigma, h.gamma_sigma) + p.log_sigma;
        total += hc(kappa_sd, h.gamma_kappa) + p.log_kappa_sd;
        for m in 0..lay.l {
            total += hc(beta_sd[m], h.gamma_beta) + p.log_beta_sd[m];
        }
        total
    }

    #[test]
    fn logp_matches_direct_summation_oracle() {
        for seed in 0..5u64 {
            let ctx = synthetic_context(7, 4, 2, 4, 20 + seed);
            let v = ctx.initial_point(seed);
            let got = ctx.log_posterior(&v).unwrap();
            let want = oracle_logp(&ctx, &v);
            assert!(
                (got - want).abs() / want.abs().max(1.0) < 1e-12,
                "seed {}: {} vs {}",
                seed,
                got,
                want
            );
        }
    }

    #[test]
    fn minimal_panel_no_factors_matches_oracle() {
        // smallest legal panel (one pre, one post year) with factors disabled
        let panel = synthetic_panel(2, 2, 1, 1, 31).0;
        let hyper = preset("germany").unwrap();
        let prior = FactorPrior {
            means: Array2::zeros((2, 0)),
            sds: vec![],
            explained_variance_ratio: vec![],
        };
        let ctx = ModelContext::new(panel, hyper, prior).unwrap();
        let v = ctx.initial_point_unjittered();
        let got = ctx.log_posterior(&v).unwrap();
        let want = oracle_logp(&ctx, &v);
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn translation_symmetry_of_likelihood() {
        // shifting delta up and kappa down by c leaves M unchanged
        let ctx = synthetic_context(8, 4, 2, 5, 40);
        let lay = *ctx.layout();
        let v = ctx.initial_point(7);
        let m0 = ctx.mean_matrix(&v, true).unwrap();
        let mut w = v.clone();
        let c = 3.7;
        for ti in 0..lay.t {
            w[lay.delta(ti)] += c;
        }
        // kappa = kappa_mu + kappa_sd * raw; shift kappa_mu by -c
        w[lay.kappa_mu()] -= c;
        let m1 = ctx.mean_matrix(&w, true).unwrap();
        for (a, b) in m0.iter().zip(m1.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn worse_fit_lowers_logp() {
        let mut ctx = synthetic_context(8, 4, 2, 5, 41);
        let v = ctx.initial_point_unjittered();
        let base = ctx.log_posterior(&v).unwrap();
        // move one observation away from its modeled mean
        let m = ctx.mean_matrix(&v, true).unwrap();
        let cur = ctx.panel.outcomes[[0, 0]];
        let dir = if cur >= m[[0, 0]] { 1.0 } else { -1.0 };
        ctx.panel.outcomes[[0, 0]] += dir * 10.0;
        let worse = ctx.log_posterior(&v).unwrap();
        assert!(worse < base);
    }

    #[test]
    fn initial_point_determinism_and_spread() {
        let ctx = synthetic_context(10, 5, 2, 6, 42);
        let a = ctx.initial_point(99);
        let b = ctx.initial_point(99);
        assert_eq!(a, b);
        let c = ctx.initial_point(100);
        let differing = a.iter().zip(&c).filter(|(x, y)| x != y).count();
        assert!(differing as f64 >= 0.99 * a.len() as f64);
        // zero jitter pins F at the prior means
        let u = ctx.initial_point_unjittered();
        let lay = ctx.layout();
        for ti in 0..lay.t {
            for m in 0..lay.l {
                assert_eq!(u[lay.f(ti, m)], ctx.factor_prior.means[[ti, m]]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ctx = synthetic_context(12, 5, 2, 8, 50);
        let mut worst: f64 = 0.0;
        for seed in 0..10u64 {
            let v = ctx.initial_point(seed);
            let g = ctx.grad_log_posterior(&v).unwrap();
            let fd = crate::testutil::finite_diff(|x| ctx.log_posterior(x).unwrap(), &v, 1e-5);
            for i in 0..v.len() {
                let rel = (g[i] - fd[i]).abs() / g[i].abs().max(1.0);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-6, "max relative error {}", worst);
    }

    #[test]
    fn gradient_vanishes_at_ascent_fixed_point() {
        let ctx = synthetic_context(6, 3, 1, 4, 60);
        let v0 = ctx.initial_point_unjittered();
        let near = crate::testutil::maximize_lbfgs(
            |x| ctx.log_posterior(x).unwrap_or(f64::NEG_INFINITY),
            |x| ctx.grad_log_posterior(x).unwrap(),
            &v0,
            2000,
        );
        let v = crate::testutil::newton_polish(|x| ctx.grad_log_posterior(x).unwrap(), &near, 50);
        let g = ctx.grad_log_posterior(&v).unwrap();
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(gnorm < 1e-6, "gradient norm at mode {}", gnorm);
    }

    #[test]
    fn log_sigma_gradient_changes_sign_across_mode() {
        let ctx = synthetic_context(8, 4, 2, 5, 61);
        let lay = *ctx.layout();
        let mut v = ctx.initial_point_unjittered();
        v[lay.log_sigma()] = -8.0;
        let low = ctx.grad_log_posterior(&v).unwrap()[lay.log_sigma()];
        v[lay.log_sigma()] = 12.0;
        let high = ctx.grad_log_posterior(&v).unwrap()[lay.log_sigma()];
        assert!(low > 0.0 && high < 0.0);
    }

    #[test]
    fn mismatched_factor_prior_rejected() {
        let (panel, _) = synthetic_panel(8, 4, 2, 5, 70);
        let hyper = preset("germany").unwrap();
        let small = fit_pca_prior(&panel.relabel(0).unwrap(), 2, 2.0).unwrap();
        let mut bad = small.clone();
        bad.means = bad.means.slice(ndarray::s![..4, ..]).to_owned();
        assert!(ModelContext::new(panel, hyper, bad).is_err());
    }
}
