//! Rolling-window stability indicator and instability segmentation.

use std::io::Write;
use std::ops::Range;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Exponents, RollingConfig};
use crate::decomposition::{contributions, ContributionTriple};
use crate::error::{Error, Result};
use crate::ingest::format_date;
use crate::jumps::JumpPanel;
use crate::network::FlowNetwork;
use crate::shock::TransmissionModel;

/// Smallest window accepted by [`run`].
pub const MIN_WINDOW: usize = 30;

/// Windows handled per parallel batch; bounds the number of live models.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySeries {
    pub window_starts: Vec<NaiveDate>,
    pub window_ends: Vec<NaiveDate>,
    pub lambdas: Vec<f64>,
    pub total_flows: Vec<f64>,
    /// No market jumped inside the window.
    pub empty: Vec<bool>,
    /// Entry `k` explains the change from window `k` to window `k + 1`.
    /// Empty when contributions were not requested.
    pub contributions: Vec<ContributionTriple>,
    pub window_size: usize,
    pub stride: usize,
}

impl StabilitySeries {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn peak_lambda(&self) -> f64 {
        self.lambdas.iter().copied().fold(0.0, f64::max)
    }

    pub fn peak_total_flow(&self) -> f64 {
        self.total_flows.iter().copied().fold(0.0, f64::max)
    }

    /// Number of windows a panel of `rows` rows yields.
    pub fn window_count(rows: usize, window: usize, stride: usize) -> usize {
        if window == 0 || stride == 0 || window > rows {
            0
        } else {
            (rows - window) / stride + 1
        }
    }

    /// Per-window flag: does the window lie inside one of `periods`?
    pub fn unstable_flags(&self, periods: &[InstabilityPeriod]) -> Vec<bool> {
        self.window_ends
            .iter()
            .map(|d| periods.iter().any(|p| p.start <= *d && *d <= p.end))
            .collect()
    }

    /// `window_end,lambda,total_flow,node_contrib,flow_contrib,edge_contrib,unstable_flag`.
    /// The first row has no contribution; its cells are left blank.
    pub fn write_csv<W: Write>(&self, periods: &[InstabilityPeriod], writer: W) -> Result<()> {
        let flags = self.unstable_flags(periods);
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "window_end",
            "lambda",
            "total_flow",
            "node_contrib",
            "flow_contrib",
            "edge_contrib",
            "unstable_flag",
        ])?;
        for k in 0..self.len() {
            let contrib = k.checked_sub(1).and_then(|c| self.contributions.get(c));
            let cell = |f: fn(&ContributionTriple) -> f64| contrib.map(|c| f(c).to_string()).unwrap_or_default();
            wtr.write_record([
                format_date(self.window_ends[k]),
                self.lambdas[k].to_string(),
                self.total_flows[k].to_string(),
                cell(|c| c.node),
                cell(|c| c.flow),
                cell(|c| c.edge),
                u8::from(flags[k]).to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// `window_end,d_lambda,node_contrib,flow_contrib,edge_contrib,residual,direction`.
    pub fn write_contributions_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "window_end",
            "d_lambda",
            "node_contrib",
            "flow_contrib",
            "edge_contrib",
            "residual",
            "direction",
        ])?;
        for (k, c) in self.contributions.iter().enumerate() {
            wtr.write_record([
                format_date(self.window_ends[k + 1]),
                c.d_lambda.to_string(),
                c.node.to_string(),
                c.flow.to_string(),
                c.edge.to_string(),
                c.residual.to_string(),
                c.direction.as_str().to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

struct WindowResult {
    lambda: f64,
    total_flow: f64,
    empty: bool,
    model: Option<TransmissionModel>,
}

fn evaluate(jumps: &JumpPanel, rows: Range<usize>, cfg: &RollingConfig) -> Result<WindowResult> {
    let net = FlowNetwork::from_jumps(jumps, rows, cfg.model.exponents)?;
    let model = TransmissionModel::from_network(&net, &cfg.model)?;
    let mut total_flow = net.total_flow();
    if cfg.total_flow_double {
        total_flow *= 2.0;
    }
    Ok(WindowResult {
        lambda: if net.empty { 0.0 } else { model.lambda },
        total_flow,
        empty: net.empty,
        model: cfg.contributions.then_some(model),
    })
}

fn run_in_pool(jumps: &JumpPanel, cfg: &RollingConfig) -> Result<StabilitySeries> {
    let rows = jumps.nrows();
    let count = StabilitySeries::window_count(rows, cfg.window, cfg.stride);
    let mut series = StabilitySeries {
        window_starts: Vec::with_capacity(count),
        window_ends: Vec::with_capacity(count),
        lambdas: Vec::with_capacity(count),
        total_flows: Vec::with_capacity(count),
        empty: Vec::with_capacity(count),
        contributions: Vec::with_capacity(count.saturating_sub(1)),
        window_size: cfg.window,
        stride: cfg.stride,
    };
    let mut previous: Option<TransmissionModel> = None;
    for chunk_start in (0..count).step_by(CHUNK) {
        let ks: Vec<usize> = (chunk_start..(chunk_start + CHUNK).min(count)).collect();
        let results: Vec<WindowResult> = ks
            .par_iter()
            .map(|k| {
                let start = k * cfg.stride;
                evaluate(jumps, start..start + cfg.window, cfg)
            })
            .collect::<Result<_>>()?;

        if cfg.contributions {
            let models: Vec<&TransmissionModel> = previous
                .iter()
                .chain(results.iter().filter_map(|r| r.model.as_ref()))
                .collect();
            let triples: Vec<ContributionTriple> = models
                .par_windows(2)
                .map(|pair| contributions(pair[0], pair[1], &cfg.decomp, &cfg.model.eigen))
                .collect::<Result<_>>()?;
            series.contributions.extend(triples);
        }

        for (k, r) in ks.iter().zip(results) {
            let start = k * cfg.stride;
            series.window_starts.push(jumps.dates[start]);
            series.window_ends.push(jumps.dates[start + cfg.window - 1]);
            series.lambdas.push(r.lambda);
            series.total_flows.push(r.total_flow);
            series.empty.push(r.empty);
            if r.model.is_some() {
                previous = r.model;
            }
        }
    }
    Ok(series)
}

/// Stability indicator for every window of `cfg.window` rows, advancing by
/// `cfg.stride` rows. Output does not depend on the number of workers.
pub fn run(jumps: &JumpPanel, cfg: &RollingConfig) -> Result<StabilitySeries> {
    if cfg.window < MIN_WINDOW {
        return Err(Error::Config(format!(
            "window must be at least {MIN_WINDOW} rows, got {}",
            cfg.window
        )));
    }
    if cfg.window > jumps.nrows() {
        return Err(Error::Config(format!(
            "window of {} rows exceeds the {} rows of the jump panel",
            cfg.window,
            jumps.nrows()
        )));
    }
    if cfg.stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    cfg.model.exponents.validate()?;
    match cfg.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .map_err(|e| Error::Internal(format!("cannot start worker pool: {e}")))?;
            pool.install(|| run_in_pool(jumps, cfg))
        }
        None => run_in_pool(jumps, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InstabilityPeriod {
    #[serde(serialize_with = "ser_date")]
    pub start: NaiveDate,
    #[serde(serialize_with = "ser_date")]
    pub end: NaiveDate,
    pub peak_lambda: f64,
    pub mean_total_flow: f64,
    #[serde(skip)]
    pub first_window: usize,
    #[serde(skip)]
    pub last_window: usize,
}

fn ser_date<S: serde::Serializer>(d: &NaiveDate, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_date(*d))
}

/// Windows with `lambda >= threshold`, merged across gaps shorter than
/// `min_run` windows, keeping merged spans at least `min_run` windows long.
pub fn segment_instability(series: &StabilitySeries, threshold: f64, min_run: usize) -> Vec<InstabilityPeriod> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut current: Option<usize> = None;
    for (k, &l) in series.lambdas.iter().enumerate() {
        match (l >= threshold, current) {
            (true, None) => current = Some(k),
            (false, Some(s)) => {
                runs.push((s, k - 1));
                current = None;
            }
            _ => {}
        }
    }
    if let Some(s) = current {
        runs.push((s, series.len() - 1));
    }

    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in runs {
        match merged.last_mut() {
            Some(last) if s - last.1 - 1 < min_run => last.1 = e,
            _ => merged.push((s, e)),
        }
    }

    merged
        .into_iter()
        .filter(|(s, e)| e - s + 1 >= min_run.max(1))
        .map(|(s, e)| {
            let span = s..e + 1;
            let peak = series.lambdas[span.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = series.total_flows[span.clone()].iter().sum::<f64>() / span.len() as f64;
            InstabilityPeriod {
                start: series.window_ends[s],
                end: series.window_ends[e],
                peak_lambda: peak,
                mean_total_flow: mean,
                first_window: s,
                last_window: e,
            }
        })
        .collect()
}

pub fn write_periods_csv<W: Write>(periods: &[InstabilityPeriod], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["start", "end", "peak_lambda", "mean_total_flow"])?;
    for p in periods {
        wtr.write_record([
            format_date(p.start),
            format_date(p.end),
            p.peak_lambda.to_string(),
            p.mean_total_flow.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Network of the rows dated within `[start, end]`.
pub fn snapshot(jumps: &JumpPanel, start: NaiveDate, end: NaiveDate, exponents: Exponents) -> Result<FlowNetwork> {
    let (first, last) = match (jumps.dates.first(), jumps.dates.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::InsufficientData("jump panel has no rows".into())),
    };
    if start > end || start < first || end > last {
        return Err(Error::Config(format!(
            "snapshot window {}..{} is not inside the data range {}..{}",
            format_date(start),
            format_date(end),
            format_date(first),
            format_date(last)
        )));
    }
    let rows = jumps.rows_between(start, end);
    if rows.is_empty() {
        return Err(Error::Config("snapshot window contains no observations".into()));
    }
    FlowNetwork::from_jumps(jumps, rows, exponents)
}
