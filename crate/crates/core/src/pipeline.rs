//! End-to-end runs driven by a [`RunConfig`].

use crate::config::RunConfig;
use crate::error::Result;
use crate::ingest::{compute_returns, IndexPanel, ReturnPanel};
use crate::jumps::{standardize, JumpPanel, JumpStats};
use crate::rolling::{run, segment_instability, InstabilityPeriod, StabilitySeries};

/// Returns, full-sample statistics and jump indicators.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub returns: ReturnPanel,
    pub stats: JumpStats,
    pub jumps: JumpPanel,
}

pub fn prepare(panel: &IndexPanel, cfg: &RunConfig) -> Result<Prepared> {
    let returns = compute_returns(panel, cfg.time_shift, cfg.return_kind)?;
    let (stats, jumps) = standardize(&returns, cfg.basis, cfg.cutoff, cfg.min_obs)?;
    Ok(Prepared { returns, stats, jumps })
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub prepared: Prepared,
    pub series: StabilitySeries,
    pub periods: Vec<InstabilityPeriod>,
}

/// Jumps, rolling indicator and instability periods for `panel`.
pub fn analyze(panel: &IndexPanel, cfg: &RunConfig) -> Result<Analysis> {
    cfg.validate()?;
    let prepared = prepare(panel, cfg)?;
    let series = run(&prepared.jumps, &cfg.rolling())?;
    let periods = segment_instability(&series, cfg.threshold, cfg.min_run);
    Ok(Analysis {
        prepared,
        series,
        periods,
    })
}
