use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fragility::config::{RunConfig, SweepAxis};
use fragility::ingest::{format_date, load_index_csv, parse_date, read_header};
use fragility::jumps::basis_series;
use fragility::network::write_matrix_csv;
use fragility::pipeline::{analyze, prepare};
use fragility::robustness::{default_values, normality_diagnostics, sweep, DEFAULT_TAIL_TOL};
use fragility::rolling::{snapshot, write_periods_csv};
use fragility::shock::TransmissionModel;
use fragility::synth::{generate, SynthSpec};
use fragility::{Error, Result};

#[derive(Parser)]
#[command(name = "fragility", version, about = "Co-jump networks and systemic stability indicators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Validate the configuration and input header, then stop.
    #[arg(long)]
    dry_run: bool,
    /// Index CSV; overrides `input` from the config.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Override a config key, e.g. `--set window=90`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Rolling stability indicator, instability periods and contributions.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Probability, distance and flow matrices for one window.
    Snapshot {
        #[command(flatten)]
        common: Common,
        /// First date of the window (YYYY-MM-DD).
        #[arg(long)]
        start: String,
        /// Last date of the window (YYYY-MM-DD).
        #[arg(long)]
        end: String,
    },
    /// Re-run the indicator across one parameter axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// basis, time_shift, cutoff or window.
        #[arg(long)]
        axis: String,
    },
    /// P-P and Q-Q diagnostics of the standardized series.
    Normality {
        #[command(flatten)]
        common: Common,
        /// Flag level for the mean tail Q-Q deviation.
        #[arg(long, default_value_t = DEFAULT_TAIL_TOL)]
        tail_tol: f64,
    },
    /// Generate a synthetic index panel.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Synthetic panel specification (TOML).
        #[arg(long)]
        spec: PathBuf,
    },
}

/// Files held in memory until every computation has succeeded.
#[derive(Default)]
struct Outputs(Vec<(&'static str, Vec<u8>)>);

impl Outputs {
    fn add<F>(&mut self, name: &'static str, write: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.0.push((name, buf));
        Ok(())
    }

    fn commit(self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in self.0 {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            log::info!("wrote {}", path.display());
        }
        Ok(())
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &common.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(input) = &common.input {
        cfg.input = Some(input.clone());
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if common.jobs.is_some() {
        cfg.jobs = common.jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.input
        .as_deref()
        .ok_or_else(|| Error::Config("no input file given (`input` key or --input)".into()))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory given (`out` key or --out)".into()))
}

/// Dry run: configuration and input header only.
fn check(cfg: &RunConfig) -> Result<()> {
    let path = input_path(cfg)?;
    out_dir(cfg)?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let markets = read_header(file)?;
    println!("configuration ok; {} markets in {}", markets.len(), path.display());
    Ok(())
}

fn load(cfg: &RunConfig) -> Result<fragility::ingest::IndexPanel> {
    load_index_csv(input_path(cfg)?, &cfg.ingest())
}

fn cmd_analyze(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    if common.dry_run {
        return check(&cfg);
    }
    let dir = out_dir(&cfg)?;
    let panel = load(&cfg)?;
    let a = analyze(&panel, &cfg)?;
    let s = &a.series;

    let mut out = Outputs::default();
    out.add("series.csv", |w| s.write_csv(&a.periods, w))?;
    out.add("periods.csv", |w| write_periods_csv(&a.periods, w))?;
    out.add("contributions.csv", |w| s.write_contributions_csv(w))?;
    out.commit(dir)?;

    println!("windows: {}", s.len());
    println!("instability periods: {}", a.periods.len());
    for p in &a.periods {
        println!(
            "  {} .. {}  peak lambda {:.6}  mean total flow {:.6}",
            format_date(p.start),
            format_date(p.end),
            p.peak_lambda,
            p.mean_total_flow
        );
    }
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |best, k| if v[k] > v[best] { k } else { best });
    if !s.is_empty() {
        let k = argmax(&s.lambdas);
        println!("peak lambda: {:.6} (window ending {})", s.lambdas[k], format_date(s.window_ends[k]));
        let k = argmax(&s.total_flows);
        println!(
            "peak total flow: {:.6} (window ending {})",
            s.total_flows[k],
            format_date(s.window_ends[k])
        );
    }
    Ok(())
}

fn cmd_snapshot(common: &Common, start: &str, end: &str) -> Result<()> {
    let cfg = resolve(common)?;
    let parse = |s: &str| parse_date(s).ok_or_else(|| Error::Config(format!("invalid date `{s}`")));
    let (start, end) = (parse(start)?, parse(end)?);
    if common.dry_run {
        return check(&cfg);
    }
    let dir = out_dir(&cfg)?;
    let panel = load(&cfg)?;
    let prepared = prepare(&panel, &cfg)?;
    let net = snapshot(&prepared.jumps, start, end, cfg.exponents())?;
    let model = TransmissionModel::from_network(&net, &cfg.model())?;

    let mut out = Outputs::default();
    out.add("probability.csv", |w| write_matrix_csv(&net.markets, &net.probability, w))?;
    out.add("distance.csv", |w| write_matrix_csv(&net.markets, &net.distance, w))?;
    out.add("flow.csv", |w| write_matrix_csv(&net.markets, &net.flow, w))?;
    out.add("nodes.csv", |w| net.write_node_summary(w))?;
    out.commit(dir)?;

    println!(
        "window {} .. {} ({} rows): lambda {:.6}, total flow {:.6}",
        format_date(net.window.0),
        format_date(net.window.1),
        net.rows,
        model.lambda,
        net.total_flow()
    );
    Ok(())
}

fn cmd_sweep(common: &Common, axis: &str) -> Result<()> {
    let axis: SweepAxis = axis.parse()?;
    let cfg = resolve(common)?;
    if common.dry_run {
        return check(&cfg);
    }
    let dir = out_dir(&cfg)?;
    let panel = load(&cfg)?;
    let values = default_values(axis, cfg.sweep_time_shift_stride);
    let r = sweep(&panel, &values, &cfg)?;

    let (band, full) = match axis {
        SweepAxis::Basis => ("sweep_basis.csv", "sweep_basis_series.csv"),
        SweepAxis::TimeShift => ("sweep_time_shift.csv", "sweep_time_shift_series.csv"),
        SweepAxis::Cutoff => ("sweep_cutoff.csv", "sweep_cutoff_series.csv"),
        SweepAxis::Window => ("sweep_window.csv", "sweep_window_series.csv"),
    };
    let mut out = Outputs::default();
    out.add(band, |w| r.write_band_csv(w))?;
    out.add(full, |w| r.write_series_csv(w))?;
    out.commit(dir)?;

    for note in &r.notes {
        eprintln!("skipped {note}");
    }
    println!(
        "{axis} sweep: {} of {} values, {} aligned windows",
        r.parameter_values.len(),
        values.len(),
        r.window_ends.len()
    );
    Ok(())
}

fn cmd_normality(common: &Common, tail_tol: f64) -> Result<()> {
    if !(tail_tol.is_finite() && tail_tol > 0.0) {
        return Err(Error::Config(format!("tail_tol must be positive, got {tail_tol}")));
    }
    let cfg = resolve(common)?;
    if common.dry_run {
        return check(&cfg);
    }
    let dir = out_dir(&cfg)?;
    let panel = load(&cfg)?;
    let prepared = prepare(&panel, &cfg)?;
    let (_, series) = basis_series(&prepared.returns, cfg.basis);
    let report = normality_diagnostics(series, &prepared.stats, tail_tol);

    let mut out = Outputs::default();
    out.add("normality_summary.csv", |w| report.write_summary_csv(w))?;
    out.add("normality_points.csv", |w| report.write_points_csv(w))?;
    out.commit(dir)?;

    for (market, why) in &report.skipped {
        eprintln!("skipped {market}: {why}");
    }
    println!(
        "{} markets, max P-P deviation {:.6}, {} with tail deviation above {}",
        report.markets.len(),
        report.max_pp_deviation(),
        report.flagged().count(),
        tail_tol
    );
    Ok(())
}

fn cmd_synth(common: &Common, spec_path: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let spec = SynthSpec::load(spec_path)?;
    spec.validate()?;
    if common.dry_run {
        out_dir(&cfg)?;
        println!("spec ok; {} markets x {} days", spec.n_markets, spec.n_days);
        return Ok(());
    }
    let dir = out_dir(&cfg)?;
    let (panel, truth) = generate(&spec)?;
    let mut out = Outputs::default();
    out.add("index.csv", |w| panel.write_csv(w))?;
    out.add("truth.csv", |w| truth.write_csv(panel.markets(), w))?;
    out.commit(dir)?;
    println!(
        "{} markets, {} index rows, {} ground-truth jumps",
        panel.nmarkets(),
        panel.nrows(),
        truth.indicators.iter().filter(|v| **v == 1).count()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze { common } => cmd_analyze(common),
        Command::Snapshot { common, start, end } => cmd_snapshot(common, start, end),
        Command::Sweep { common, axis } => cmd_sweep(common, axis),
        Command::Normality { common, tail_tol } => cmd_normality(common, *tail_tol),
        Command::Synth { common, spec } => cmd_synth(common, spec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
