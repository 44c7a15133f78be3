//! Batch entry point: fit, placebo, waic, and scm subcommands.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bsc_core::analysis::summarize;
use bsc_core::config::{parse_config, preset, HyperParams};
use bsc_core::error::BscError;
use bsc_core::harness::{
    accuracy_comparison, coverage_by_year, run_placebo_study, waic_scan, write_accuracy_csv,
    write_coverage_csv, write_placebo_csv, write_waic_scan_csv, Methods,
};
use bsc_core::model::ModelContext;
use bsc_core::nuts::{sample, SamplerSettings};
use bsc_core::panel::{load_csv, load_deflator_csv, PanelData};
use bsc_core::pca::fit_pca_prior_opts;
use bsc_core::scm::{fit_scm, relabel_significance, scm_effects};

mod manifest;

use manifest::ManifestBuilder;

/// Exit status for runs that completed but tripped a convergence
/// diagnostic (max split R-hat above 1.05 or any divergence).
const EXIT_DIAGNOSTIC: u8 = 3;
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

const RHAT_WARN: f64 = 1.05;
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "bsc", version, about = "Bayesian synthetic control batch tool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Long-format CSV with columns society,year,outcome.
    #[arg(long)]
    data: PathBuf,
    /// Name of the treated society (exact match).
    #[arg(long)]
    treated: String,
    /// First treated year.
    #[arg(long)]
    start: i32,
    /// Optional year,deflator CSV for inflation adjustment.
    #[arg(long)]
    deflator: Option<PathBuf>,
    /// Base year for the deflator adjustment.
    #[arg(long)]
    base_year: Option<i32>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Hyperparameter config file (may declare a preset).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Builtin preset name (germany or california).
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Clone)]
struct SampleArgs {
    #[arg(long, default_value_t = 2)]
    chains: usize,
    #[arg(long, default_value_t = 1000)]
    tune: usize,
    #[arg(long, default_value_t = 2000)]
    draws: usize,
    #[arg(long, default_value_t = 0.9)]
    target_accept: f64,
    #[arg(long, default_value_t = 12)]
    max_treedepth: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Fit the factor prior on pre-treatment years only.
    #[arg(long, default_value_t = false)]
    pre_period_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and write posterior summaries.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sampling: SampleArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        ci_level: f64,
    },
    /// Relabeling study across comparison societies.
    Placebo {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sampling: SampleArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated subset of {bsc, scm}.
        #[arg(long, default_value = "bsc,scm")]
        methods: String,
        /// Reuse the original panel's factor prior instead of recomputing
        /// per relabeled society.
        #[arg(long, default_value_t = false)]
        reuse_prior: bool,
    },
    /// Fit once per factor count and record WAIC.
    Waic {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sampling: SampleArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Factor counts: a range like 3..8 (inclusive) or a comma list.
        #[arg(long)]
        factors: String,
    },
    /// Frequentist synthetic control baseline with relabeling test.
    Scm {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("BSC_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through the error path with exit 0
            if e.use_stderr() {
                eprint!("{}", e);
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(classify(&e))
        }
    }
}

fn classify(e: &BscError) -> u8 {
    match e {
        BscError::InvalidArgument(_) | BscError::UnknownPreset(_) | BscError::Config(_) => {
            EXIT_USAGE
        }
        _ => EXIT_DATA,
    }
}

fn load_panel(args: &DataArgs) -> Result<PanelData, BscError> {
    let mut panel = load_csv(&args.data, &args.treated, args.start)?;
    if let Some(deflator_path) = &args.deflator {
        let base = args.base_year.ok_or_else(|| {
            BscError::InvalidArgument("--base-year is required with --deflator".into())
        })?;
        let deflator = load_deflator_csv(deflator_path)?;
        panel = panel.deflate(&deflator, base)?;
    }
    Ok(panel)
}

fn load_hyper(args: &ConfigArgs) -> Result<HyperParams, BscError> {
    match (&args.config, &args.preset) {
        (Some(path), _) => parse_config(path),
        (None, Some(name)) => preset(name),
        (None, None) => Err(BscError::InvalidArgument(
            "either --config or --preset is required".into(),
        )),
    }
}

fn settings_from(args: &SampleArgs) -> Result<SamplerSettings, BscError> {
    let s = SamplerSettings {
        chains: args.chains,
        tune: args.tune,
        draws: args.draws,
        target_accept: args.target_accept,
        max_treedepth: args.max_treedepth,
        seed: args.seed,
    };
    s.validate()?;
    Ok(s)
}

fn ensure_out(dir: &Path) -> Result<(), BscError> {
    std::fs::create_dir_all(dir).map_err(|e| BscError::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn parse_factors(text: &str) -> Result<Vec<usize>, BscError> {
    let bad = || BscError::InvalidArgument(format!("cannot parse --factors {:?}", text));
    if let Some((a, b)) = text.split_once("..") {
        let lo: usize = a.trim().parse().map_err(|_| bad())?;
        let hi: usize = b.trim().parse().map_err(|_| bad())?;
        if lo == 0 || hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let v: usize = part.trim().parse().map_err(|_| bad())?;
        if v == 0 {
            return Err(bad());
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<u8, BscError> {
    match cli.command {
        Command::Fit {
            data,
            config,
            sampling,
            out,
            ci_level,
        } => cmd_fit(data, config, sampling, out, ci_level),
        Command::Placebo {
            data,
            config,
            sampling,
            out,
            methods,
            reuse_prior,
        } => cmd_placebo(data, config, sampling, out, &methods, reuse_prior),
        Command::Waic {
            data,
            config,
            sampling,
            out,
            factors,
        } => cmd_waic(data, config, sampling, out, &factors),
        Command::Scm { data, out } => cmd_scm(data, out),
    }
}

fn cmd_fit(
    data: DataArgs,
    config: ConfigArgs,
    sampling: SampleArgs,
    out: PathBuf,
    ci_level: f64,
) -> Result<u8, BscError> {
    if !(ci_level > 0.0 && ci_level < 1.0) {
        return Err(BscError::InvalidArgument("--ci-level must be in (0,1)".into()));
    }
    let settings = settings_from(&sampling)?;
    let hyper = load_hyper(&config)?;
    let panel = load_panel(&data)?;
    if hyper.effect_prior_too_tight(&panel) {
        eprintln!(
            "warning: alpha_sd = {} is small relative to the treated society's pre-period spread; \
             the effect prior may not be near-uniform over plausible effect sizes",
            hyper.alpha_sd
        );
    }
    ensure_out(&out)?;
    let mut manifest = ManifestBuilder::new("fit", settings.seed);
    manifest.input(&data.data)?;
    if let Some(p) = &config.config {
        manifest.input(p)?;
    }
    if let Some(p) = &data.deflator {
        manifest.input(p)?;
    }
    manifest.config(&hyper, &settings);

    let prior = fit_pca_prior_opts(
        &panel,
        hyper.n_factors,
        hyper.pca_scale,
        sampling.pre_period_only,
    )?;
    let ctx = ModelContext::new(panel, hyper, prior)?;
    let trace = sample(&ctx, &settings)?;
    let summary = summarize(&ctx, &trace, ci_level, settings.seed ^ 0xCF)?;

    let summary_path = out.join("summary.json");
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| BscError::Config(e.to_string()))?;
    std::fs::write(&summary_path, json + "\n").map_err(|e| BscError::Io {
        path: summary_path.display().to_string(),
        source: e,
    })?;
    let trace_path = out.join("trace.bin");
    trace.write_binary(&trace_path)?;

    manifest.output("summary.json");
    manifest.output("trace.bin");
    manifest.finish(&out)?;

    let flagged =
        summary.scalars.max_rhat > RHAT_WARN || summary.scalars.n_divergences > 0;
    if flagged {
        eprintln!(
            "diagnostic warning: max_rhat = {:.4}, divergences = {}",
            summary.scalars.max_rhat, summary.scalars.n_divergences
        );
        return Ok(EXIT_DIAGNOSTIC);
    }
    Ok(0)
}

fn cmd_placebo(
    data: DataArgs,
    config: ConfigArgs,
    sampling: SampleArgs,
    out: PathBuf,
    methods: &str,
    reuse_prior: bool,
) -> Result<u8, BscError> {
    let methods = Methods::parse(methods)?;
    let settings = settings_from(&sampling)?;
    let hyper = load_hyper(&config)?;
    let panel = load_panel(&data)?;
    ensure_out(&out)?;
    let mut manifest = ManifestBuilder::new("placebo", settings.seed);
    manifest.input(&data.data)?;
    if let Some(p) = &config.config {
        manifest.input(p)?;
    }
    manifest.config(&hyper, &settings);

    let report = run_placebo_study(&panel, &hyper, &settings, methods, reuse_prior)?;
    write_placebo_csv(&report, &out.join("placebo_report.csv"))?;
    write_accuracy_csv(&accuracy_comparison(&report), &out.join("accuracy_by_year.csv"))?;
    write_coverage_csv(&coverage_by_year(&report), &out.join("coverage_by_year.csv"))?;
    manifest.output("placebo_report.csv");
    manifest.output("accuracy_by_year.csv");
    manifest.output("coverage_by_year.csv");
    manifest.finish(&out)?;
    for (society, err) in &report.failures {
        eprintln!("placebo failure for {}: {}", society, err);
    }
    Ok(0)
}

fn cmd_waic(
    data: DataArgs,
    config: ConfigArgs,
    sampling: SampleArgs,
    out: PathBuf,
    factors: &str,
) -> Result<u8, BscError> {
    let l_set = parse_factors(factors)?;
    let settings = settings_from(&sampling)?;
    let hyper = load_hyper(&config)?;
    let panel = load_panel(&data)?;
    ensure_out(&out)?;
    let mut manifest = ManifestBuilder::new("waic", settings.seed);
    manifest.input(&data.data)?;
    if let Some(p) = &config.config {
        manifest.input(p)?;
    }
    manifest.config(&hyper, &settings);

    let scan = waic_scan(&panel, &hyper, &settings, &l_set)?;
    write_waic_scan_csv(&scan, &out.join("waic_scan.csv"))?;
    manifest.output("waic_scan.csv");
    manifest.finish(&out)?;

    let any_flagged = scan.records.iter().any(|r| {
        r.error.is_some()
            || r.max_rhat.is_some_and(|x| x > RHAT_WARN)
            || r.divergences.is_some_and(|d| d > 0)
    });
    if any_flagged {
        eprintln!("diagnostic warning: at least one scan record flagged; see waic_scan.csv");
        return Ok(EXIT_DIAGNOSTIC);
    }
    Ok(0)
}

fn cmd_scm(data: DataArgs, out: PathBuf) -> Result<u8, BscError> {
    let panel = load_panel(&data)?;
    ensure_out(&out)?;
    let mut manifest = ManifestBuilder::new("scm", 0);
    manifest.input(&data.data)?;

    let fit = fit_scm(&panel)?;
    let weights_path = out.join("scm_weights.csv");
    {
        use std::io::Write as _;
        let mut w = std::io::BufWriter::new(std::fs::File::create(&weights_path).map_err(
            |e| BscError::Io {
                path: weights_path.display().to_string(),
                source: e,
            },
        )?);
        let io = |e: std::io::Error| BscError::Io {
            path: weights_path.display().to_string(),
            source: e,
        };
        writeln!(w, "society,weight").map_err(io)?;
        for (c, &ji) in panel.untreated_indices().iter().enumerate() {
            writeln!(w, "{},{}", panel.societies[ji], fit.weights[c]).map_err(io)?;
        }
    }

    let sig = relabel_significance(&panel, scm_effects)?;
    let placebo_path = out.join("scm_placebo_effects.csv");
    {
        use std::io::Write as _;
        let mut w = std::io::BufWriter::new(std::fs::File::create(&placebo_path).map_err(
            |e| BscError::Io {
                path: placebo_path.display().to_string(),
                source: e,
            },
        )?);
        let io = |e: std::io::Error| BscError::Io {
            path: placebo_path.display().to_string(),
            source: e,
        };
        writeln!(w, "society,year,effect").map_err(io)?;
        for p in &sig.placebo_effects {
            for (k, eff) in p.effects.iter().enumerate() {
                let year = panel.years[panel.treatment_start + k];
                writeln!(w, "{},{},{}", p.society, year, eff).map_err(io)?;
            }
        }
    }
    println!(
        "scm: pre_loss = {:.6}, rank = {:.4} (excluding target: {:.4}), significant = {}",
        fit.pre_loss, sig.rank, sig.rank_excluding_target, sig.significant
    );

    manifest.output("scm_weights.csv");
    manifest.output("scm_placebo_effects.csv");
    manifest.finish(&out)?;
    Ok(0)
}
