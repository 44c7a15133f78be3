//! Multi-run experiment orchestration: placebo (relabeling) studies,
//! accuracy comparison, and the WAIC scan over the number of factors.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{self, max_rhat_identified, waic};
use crate::config::HyperParams;
use crate::error::{BscError, Result};
use crate::model::ModelContext;
use crate::nuts::{sample, SamplerSettings};
use crate::panel::PanelData;
use crate::pca::fit_pca_prior;
use crate::scm::fit_scm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Methods {
    pub bsc: bool,
    pub scm: bool,
}

impl Methods {
    pub fn parse(text: &str) -> Result<Methods> {
        let mut m = Methods {
            bsc: false,
            scm: false,
        };
        for part in text.split(',') {
            match part.trim() {
                "bsc" => m.bsc = true,
                "scm" => m.scm = true,
                other => {
                    return Err(BscError::InvalidArgument(format!(
                        "unknown method {:?}",
                        other
                    )))
                }
            }
        }
        if !m.bsc && !m.scm {
            return Err(BscError::InvalidArgument("no methods selected".into()));
        }
        Ok(m)
    }
}

/// One society x post-period-year record of a placebo study.
#[derive(Debug, Clone, Serialize)]
pub struct PlaceboCell {
    pub society: String,
    pub year: i32,
    pub observed: f64,
    pub bsc_pred: Option<f64>,
    pub bsc_abs_pct_err: Option<f64>,
    pub in_ci95: Option<bool>,
    pub in_ci99: Option<bool>,
    pub zero_density: Option<bool>,
    pub scm_pred: Option<f64>,
    pub scm_abs_pct_err: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PlaceboReport {
    pub methods: Methods,
    pub cells: Vec<PlaceboCell>,
    /// Societies whose placebo run failed, with the reason.
    pub failures: Vec<(String, String)>,
    pub seed: u64,
    pub tune: usize,
    pub draws: usize,
}

fn abs_pct_err(pred: f64, observed: f64) -> Option<f64> {
    if observed == 0.0 {
        None
    } else {
        Some((pred - observed).abs() / observed.abs() * 100.0)
    }
}

struct SocietyOutcome {
    cells: Vec<PlaceboCell>,
    error: Option<String>,
}

/// Predict each comparison society's post-period trajectory under
/// relabeling, with the requested methods.
///
/// The factor prior is recomputed per relabeled panel (so the
/// pretend-treated society never informs its own prior); pass
/// `reuse_prior_panel` to reuse the original panel's untreated pool instead.
pub fn run_placebo_study(
    panel: &PanelData,
    hyper: &HyperParams,
    settings: &SamplerSettings,
    methods: Methods,
    reuse_prior_panel: bool,
) -> Result<PlaceboReport> {
    if panel.n_societies() < 3 {
        return Err(BscError::InvalidArgument(
            "placebo study needs at least 3 societies".into(),
        ));
    }
    let comparison = panel.untreated_indices();
    let outcomes: Vec<SocietyOutcome> = comparison
        .par_iter()
        .enumerate()
        .map(|(order, &ji)| {
            run_placebo_society(panel, hyper, settings, methods, reuse_prior_panel, order, ji)
        })
        .collect();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (o, &ji) in outcomes.iter().zip(&comparison) {
        if let Some(err) = &o.error {
            failures.push((panel.societies[ji].clone(), err.clone()));
        }
        cells.extend(o.cells.iter().cloned());
    }
    Ok(PlaceboReport {
        methods,
        cells,
        failures,
        seed: settings.seed,
        tune: settings.tune,
        draws: settings.draws,
    })
}

fn run_placebo_society(
    panel: &PanelData,
    hyper: &HyperParams,
    settings: &SamplerSettings,
    methods: Methods,
    reuse_prior_panel: bool,
    order: usize,
    ji: usize,
) -> SocietyOutcome {
    let t0 = panel.treatment_start;
    let years = &panel.years[t0..];
    let observed: Vec<f64> = (t0..panel.n_years())
        .map(|r| panel.outcomes[[r, ji]])
        .collect();
    let society = panel.societies[ji].clone();
    let relabeled = match panel.relabel(ji) {
        Ok(p) => p,
        Err(e) => {
            return SocietyOutcome {
                cells: vec![],
                error: Some(e.to_string()),
            }
        }
    };

    let mut cells: Vec<PlaceboCell> = years
        .iter()
        .zip(&observed)
        .map(|(&year, &obs)| PlaceboCell {
            society: society.clone(),
            year,
            observed: obs,
            bsc_pred: None,
            bsc_abs_pct_err: None,
            in_ci95: None,
            in_ci99: None,
            zero_density: None,
            scm_pred: None,
            scm_abs_pct_err: None,
        })
        .collect();
    let mut error = None;

    if methods.scm {
        match fit_scm(&relabeled) {
            Ok(fit) => {
                for (k, cell) in cells.iter_mut().enumerate() {
                    cell.scm_pred = Some(fit.counterfactual[k]);
                    cell.scm_abs_pct_err = abs_pct_err(fit.counterfactual[k], cell.observed);
                }
            }
            Err(e) => error = Some(format!("scm: {}", e)),
        }
    }

    if methods.bsc {
        let result = (|| -> Result<()> {
            let prior_source = if reuse_prior_panel { panel } else { &relabeled };
            let prior = fit_pca_prior(prior_source, hyper.n_factors, hyper.pca_scale)?;
            let ctx = ModelContext::new(relabeled.clone(), hyper.clone(), prior)?;
            let mut sub = settings.clone();
            // stable per-society stream
            sub.seed = settings
                .seed
                .wrapping_add((order as u64 + 1).wrapping_mul(0x517C_C1B7_2722_0A95));
            let trace = sample(&ctx, &sub)?;
            let cf95 = analysis::counterfactual(&ctx, &trace, 0.95, sub.seed ^ 0xCF)?;
            let cf99 = analysis::counterfactual(&ctx, &trace, 0.99, sub.seed ^ 0xCF)?;
            for (k, cell) in cells.iter_mut().enumerate() {
                let pred = cf95.mean[k];
                cell.bsc_pred = Some(pred);
                cell.bsc_abs_pct_err = abs_pct_err(pred, cell.observed);
                let obs = cell.observed;
                let in95 = obs >= cf95.lower[k] && obs <= cf95.upper[k];
                let in99 = obs >= cf99.lower[k] && obs <= cf99.upper[k];
                let col = cf95.draws.column(k);
                let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let zero_density = obs < min || obs > max;
                cell.in_ci95 = Some(in95);
                cell.in_ci99 = Some(in99 || in95);
                cell.zero_density = Some(zero_density && !(in99 || in95));
            }
            Ok(())
        })();
        if let Err(e) = result {
            error = Some(match error {
                Some(prev) => format!("{}; bsc: {}", prev, e),
                None => format!("bsc: {}", e),
            });
        }
    }

    SocietyOutcome { cells, error }
}

/// Per-year mean absolute percent error per method.
#[derive(Debug, Clone, Serialize)]
pub struct YearAccuracy {
    pub year: i32,
    pub bsc_mape: Option<f64>,
    pub scm_mape: Option<f64>,
    /// Cells skipped because the observed value was exactly zero.
    pub skipped_zero_observed: usize,
}

pub fn accuracy_comparison(report: &PlaceboReport) -> Vec<YearAccuracy> {
    let mut years: Vec<i32> = report.cells.iter().map(|c| c.year).collect();
    years.sort_unstable();
    years.dedup();
    years
        .into_iter()
        .map(|year| {
            let cells: Vec<&PlaceboCell> =
                report.cells.iter().filter(|c| c.year == year).collect();
            let skipped = cells.iter().filter(|c| c.observed == 0.0).count();
            let mean_of = |vals: Vec<f64>| {
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            };
            YearAccuracy {
                year,
                bsc_mape: mean_of(
                    cells.iter().filter_map(|c| c.bsc_abs_pct_err).collect(),
                ),
                scm_mape: mean_of(
                    cells.iter().filter_map(|c| c.scm_abs_pct_err).collect(),
                ),
                skipped_zero_observed: skipped,
            }
        })
        .collect()
}

/// Per-year CI coverage and zero-density rates over placebo societies.
#[derive(Debug, Clone, Serialize)]
pub struct YearCoverage {
    pub year: i32,
    pub coverage95: Option<f64>,
    pub coverage99: Option<f64>,
    pub zero_density_rate: Option<f64>,
    pub n: usize,
}

pub fn coverage_by_year(report: &PlaceboReport) -> Vec<YearCoverage> {
    let mut years: Vec<i32> = report.cells.iter().map(|c| c.year).collect();
    years.sort_unstable();
    years.dedup();
    years
        .into_iter()
        .map(|year| {
            let flags: Vec<(&PlaceboCell, bool, bool, bool)> = report
                .cells
                .iter()
                .filter(|c| c.year == year)
                .filter_map(|c| {
                    match (c.in_ci95, c.in_ci99, c.zero_density) {
                        (Some(a), Some(b), Some(z)) => Some((c, a, b, z)),
                        _ => None,
                    }
                })
                .collect();
            let n = flags.len();
            #[allow(clippy::type_complexity)]
            let rate = |f: &dyn Fn(&(&PlaceboCell, bool, bool, bool)) -> bool| {
                if n == 0 {
                    None
                } else {
                    Some(flags.iter().filter(|x| f(x)).count() as f64 / n as f64)
                }
            };
            YearCoverage {
                year,
                coverage95: rate(&|x| x.1),
                coverage99: rate(&|x| x.2),
                zero_density_rate: rate(&|x| x.3),
                n,
            }
        })
        .collect()
}

/// One record of the factor-count scan.
#[derive(Debug, Clone, Serialize)]
pub struct WaicRecord {
    pub n_factors: usize,
    pub waic: Option<f64>,
    pub lppd: Option<f64>,
    pub p_waic: Option<f64>,
    pub max_rhat: Option<f64>,
    pub divergences: Option<usize>,
    pub seed: u64,
    pub tune: usize,
    pub draws: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct WaicScan {
    pub records: Vec<WaicRecord>,
}

/// One full fit per requested L, factor prior recomputed per L.
pub fn waic_scan(
    panel: &PanelData,
    hyper: &HyperParams,
    settings: &SamplerSettings,
    l_set: &[usize],
) -> Result<WaicScan> {
    let records: Vec<WaicRecord> = l_set
        .par_iter()
        .enumerate()
        .map(|(order, &l)| {
            let mut sub = settings.clone();
            sub.seed = settings
                .seed
                .wrapping_add((order as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D));
            let mut record = WaicRecord {
                n_factors: l,
                waic: None,
                lppd: None,
                p_waic: None,
                max_rhat: None,
                divergences: None,
                seed: sub.seed,
                tune: sub.tune,
                draws: sub.draws,
                error: None,
            };
            let result = (|| -> Result<()> {
                let prior = fit_pca_prior(panel, l, hyper.pca_scale)?;
                let mut h = hyper.clone();
                h.n_factors = l;
                let ctx = ModelContext::new(panel.clone(), h, prior)?;
                let trace = sample(&ctx, &sub)?;
                let w = waic(&ctx, &trace)?;
                record.waic = Some(w.waic);
                record.lppd = Some(w.lppd);
                record.p_waic = Some(w.p_waic);
                record.max_rhat = Some(max_rhat_identified(&ctx, &trace)?);
                record.divergences = Some(trace.n_divergences());
                Ok(())
            })();
            if let Err(e) = result {
                record.error = Some(e.to_string());
            }
            record
        })
        .collect();
    Ok(WaicScan { records })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| BscError::Io {
            path: path.display().to_string(),
            source: e,
        })?,
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{}", x))
}

fn fmt_flag(v: Option<bool>) -> String {
    v.map_or(String::new(), |x| if x { "1".into() } else { "0".into() })
}

pub fn write_placebo_csv(report: &PlaceboReport, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e: std::io::Error| BscError::Io {
        path: path.display().to_string(),
        source: e,
    };
    writeln!(
        w,
        "society,year,observed,bsc_pred,bsc_abs_pct_err,in_ci95,in_ci99,zero_density,scm_pred,scm_abs_pct_err"
    )
    .map_err(io)?;
    for c in &report.cells {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            c.society,
            c.year,
            c.observed,
            fmt_opt(c.bsc_pred),
            fmt_opt(c.bsc_abs_pct_err),
            fmt_flag(c.in_ci95),
            fmt_flag(c.in_ci99),
            fmt_flag(c.zero_density),
            fmt_opt(c.scm_pred),
            fmt_opt(c.scm_abs_pct_err),
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn write_accuracy_csv(rows: &[YearAccuracy], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e: std::io::Error| BscError::Io {
        path: path.display().to_string(),
        source: e,
    };
    writeln!(w, "year,bsc_mape,scm_mape,skipped_zero_observed").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.year,
            fmt_opt(r.bsc_mape),
            fmt_opt(r.scm_mape),
            r.skipped_zero_observed
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn write_coverage_csv(rows: &[YearCoverage], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e: std::io::Error| BscError::Io {
        path: path.display().to_string(),
        source: e,
    };
    writeln!(w, "year,coverage95,coverage99,zero_density_rate,n").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.year,
            fmt_opt(r.coverage95),
            fmt_opt(r.coverage99),
            fmt_opt(r.zero_density_rate),
            r.n
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn write_waic_scan_csv(scan: &WaicScan, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e: std::io::Error| BscError::Io {
        path: path.display().to_string(),
        source: e,
    };
    writeln!(
        w,
        "n_factors,waic,lppd,p_waic,max_rhat,divergences,seed,tune,draws,error"
    )
    .map_err(io)?;
    for r in &scan.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.n_factors,
            fmt_opt(r.waic),
            fmt_opt(r.lppd),
            fmt_opt(r.p_waic),
            fmt_opt(r.max_rhat),
            r.divergences.map_or(String::new(), |d| d.to_string()),
            r.seed,
            r.tune,
            r.draws,
            r.error.clone().unwrap_or_default(),
        )
        .map_err(io)?;
    }
    Ok(())
}
