//! Normality diagnostics for the jump cutoff and parameter sweeps.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{Basis, RunConfig, SweepAxis};
use crate::error::{Error, Result};
use crate::ingest::{format_date, IndexPanel};
use crate::jumps::{quantile, JumpStats};
use crate::pipeline::prepare;
use crate::rolling::run;

/// Theoretical quantile band where tail deviations are measured.
pub const TAIL_BAND: (f64, f64) = (2.0, 2.5);
/// Default flag level for the mean absolute Q-Q deviation inside [`TAIL_BAND`].
pub const DEFAULT_TAIL_TOL: f64 = 0.06;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketNormality {
    pub market: String,
    /// `(theoretical, empirical)` percentiles in `[0, 100]`, sorted.
    pub pp: Vec<(f64, f64)>,
    /// `(theoretical, empirical)` standard-normal quantiles, sorted.
    pub qq: Vec<(f64, f64)>,
    /// Largest P-P gap, in probability units.
    pub max_pp_deviation: f64,
    /// Mean `|empirical - theoretical|` over Q-Q points with
    /// `TAIL_BAND.0 < |theoretical| <= TAIL_BAND.1`.
    pub tail_deviation: f64,
    pub tail_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalityReport {
    pub markets: Vec<MarketNormality>,
    pub skipped: Vec<(String, String)>,
    pub tail_tol: f64,
}

impl NormalityReport {
    pub fn max_pp_deviation(&self) -> f64 {
        self.markets.iter().map(|m| m.max_pp_deviation).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &MarketNormality> {
        self.markets.iter().filter(|m| m.tail_flag)
    }

    /// `market,max_pp_deviation,tail_deviation,tail_flag`.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["market", "max_pp_deviation", "tail_deviation", "tail_flag"])?;
        for m in &self.markets {
            wtr.write_record([
                m.market.clone(),
                m.max_pp_deviation.to_string(),
                m.tail_deviation.to_string(),
                u8::from(m.tail_flag).to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Long format: `market,theoretical_pct,empirical_pct,theoretical_q,empirical_q`.
    pub fn write_points_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["market", "theoretical_pct", "empirical_pct", "theoretical_q", "empirical_q"])?;
        for m in &self.markets {
            for (pp, qq) in m.pp.iter().zip(&m.qq) {
                wtr.write_record([
                    m.market.clone(),
                    pp.0.to_string(),
                    pp.1.to_string(),
                    qq.0.to_string(),
                    qq.1.to_string(),
                ])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// P-P and Q-Q comparison of one market's standardized, outlier-free values.
pub fn market_normality(market: &str, z_sorted: &[f64], tail_tol: f64) -> MarketNormality {
    let normal = std_normal();
    let n = z_sorted.len();
    let mut pp = Vec::with_capacity(n);
    let mut qq = Vec::with_capacity(n);
    let (mut max_pp, mut tail_sum, mut tail_n) = (0.0f64, 0.0, 0usize);
    for (k, &z) in z_sorted.iter().enumerate() {
        let emp = (k as f64 + 0.5) / n as f64;
        let theo_p = normal.cdf(z);
        let theo_q = normal.inverse_cdf(emp);
        max_pp = max_pp.max((theo_p - emp).abs());
        if theo_q.abs() > TAIL_BAND.0 && theo_q.abs() <= TAIL_BAND.1 {
            tail_sum += (z - theo_q).abs();
            tail_n += 1;
        }
        pp.push((100.0 * theo_p, 100.0 * emp));
        qq.push((theo_q, z));
    }
    let tail_deviation = if tail_n > 0 { tail_sum / tail_n as f64 } else { 0.0 };
    MarketNormality {
        market: market.to_string(),
        pp,
        qq,
        max_pp_deviation: max_pp,
        tail_deviation,
        tail_flag: tail_deviation > tail_tol,
    }
}

/// Diagnostics for every market in `stats`; `series` holds the values the
/// statistics were computed from (one column per market of the panel).
pub fn normality_diagnostics(series: &DMatrix<f64>, stats: &JumpStats, tail_tol: f64) -> NormalityReport {
    let mut skipped = stats.excluded.clone();
    let markets: Vec<Option<MarketNormality>> = stats
        .markets
        .par_iter()
        .zip(&stats.columns)
        .zip(&stats.stats)
        .map(|((name, &col), st)| {
            let mut z: Vec<f64> = series
                .column(col)
                .iter()
                .filter(|x| !x.is_nan() && !st.is_outlier(**x))
                .map(|x| st.z(*x))
                .collect();
            if z.len() < 2 {
                return None;
            }
            z.sort_by(f64::total_cmp);
            Some(market_normality(name, &z, tail_tol))
        })
        .collect();
    let mut kept = Vec::new();
    for (m, name) in markets.into_iter().zip(&stats.markets) {
        match m {
            Some(m) => kept.push(m),
            None => skipped.push((name.clone(), "too few non-outlier observations".into())),
        }
    }
    NormalityReport {
        markets: kept,
        skipped,
        tail_tol,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Basis(Basis),
    TimeShift(usize),
    Cutoff(f64),
    Window(usize),
}

impl SweepValue {
    pub fn axis(&self) -> SweepAxis {
        match self {
            SweepValue::Basis(_) => SweepAxis::Basis,
            SweepValue::TimeShift(_) => SweepAxis::TimeShift,
            SweepValue::Cutoff(_) => SweepAxis::Cutoff,
            SweepValue::Window(_) => SweepAxis::Window,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            SweepValue::Basis(_) => true,
            SweepValue::TimeShift(dt) => (1..=120).contains(&dt),
            SweepValue::Cutoff(c) => (1.8 - 1e-9..=2.2 + 1e-9).contains(&c),
            SweepValue::Window(w) => (60..=120).contains(&w),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("sweep value {self} is outside the allowed range of its axis")))
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        match *self {
            SweepValue::Basis(b) => cfg.basis = b,
            SweepValue::TimeShift(dt) => cfg.time_shift = dt,
            SweepValue::Cutoff(c) => cfg.cutoff = c,
            SweepValue::Window(w) => cfg.window = w,
        }
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Basis(b) => write!(f, "{b}"),
            SweepValue::TimeShift(dt) => write!(f, "{dt}"),
            SweepValue::Cutoff(c) => write!(f, "{c}"),
            SweepValue::Window(w) => write!(f, "{w}"),
        }
    }
}

/// Default grid of an axis: both bases, `time_shift` 1..=120 every
/// `time_shift_stride`, cutoffs 1.8..=2.2 by 0.005, windows 60..=120.
pub fn default_values(axis: SweepAxis, time_shift_stride: usize) -> Vec<SweepValue> {
    match axis {
        SweepAxis::Basis => Basis::ALL.iter().map(|b| SweepValue::Basis(*b)).collect(),
        SweepAxis::TimeShift => (1..=120)
            .step_by(time_shift_stride.max(1))
            .map(SweepValue::TimeShift)
            .collect(),
        // integer steps avoid accumulating 0.005 in floating point
        SweepAxis::Cutoff => (0..=80).map(|k| SweepValue::Cutoff((1800 + 5 * k) as f64 / 1000.0)).collect(),
        SweepAxis::Window => (60..=120).map(SweepValue::Window).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    /// Values that produced a series, in input order.
    pub parameter_values: Vec<SweepValue>,
    pub window_ends: Vec<NaiveDate>,
    /// One aligned lambda series per parameter value.
    pub series: Vec<Vec<f64>>,
    pub baseline: Vec<f64>,
    pub band_low: Vec<f64>,
    pub band_high: Vec<f64>,
    /// Values that were skipped and why.
    pub notes: Vec<String>,
}

impl SweepResult {
    /// `window_end,baseline,band_low,band_high`.
    pub fn write_band_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["window_end", "baseline", "band_low", "band_high"])?;
        for k in 0..self.window_ends.len() {
            wtr.write_record([
                format_date(self.window_ends[k]),
                self.baseline[k].to_string(),
                self.band_low[k].to_string(),
                self.band_high[k].to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// `window_end` followed by one column per parameter value.
    pub fn write_series_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["window_end".to_string()];
        header.extend(self.parameter_values.iter().map(|v| format!("{}={v}", self.axis)));
        wtr.write_record(&header)?;
        for k in 0..self.window_ends.len() {
            let mut rec = vec![format_date(self.window_ends[k])];
            rec.extend(self.series.iter().map(|s| s[k].to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn lambda_series(panel: &IndexPanel, cfg: &RunConfig) -> Result<(Vec<NaiveDate>, Vec<f64>)> {
    cfg.validate()?;
    let prepared = prepare(panel, cfg)?;
    let mut rolling = cfg.rolling();
    rolling.contributions = false;
    // parallelism comes from the sweep itself
    rolling.jobs = None;
    let s = run(&prepared.jumps, &rolling)?;
    Ok((s.window_ends, s.lambdas))
}

fn skippable(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::InsufficientData(_) | Error::DegenerateMarket { .. }
    )
}

/// Re-run the indicator for every value in `values` and summarize the
/// spread with pointwise 5th and 95th percentiles. The baseline is the run
/// with `base` unchanged.
pub fn sweep(panel: &IndexPanel, values: &[SweepValue], base: &RunConfig) -> Result<SweepResult> {
    let axis = match values.first() {
        Some(v) => v.axis(),
        None => return Err(Error::Config("sweep needs at least one value".into())),
    };
    for v in values {
        if v.axis() != axis {
            return Err(Error::Config("sweep values must all belong to one axis".into()));
        }
        v.validate()?;
    }
    let work = || -> Result<SweepResult> {
        let baseline = lambda_series(panel, base)?;
        let runs: Vec<Result<(Vec<NaiveDate>, Vec<f64>)>> = values
            .par_iter()
            .map(|v| {
                let mut cfg = base.clone();
                v.apply(&mut cfg);
                lambda_series(panel, &cfg)
            })
            .collect();

        let mut notes = Vec::new();
        let mut kept_values = Vec::new();
        let mut kept = Vec::new();
        for (v, r) in values.iter().zip(runs) {
            match r {
                Ok(s) => {
                    kept_values.push(*v);
                    kept.push(s);
                }
                Err(e) if skippable(&e) => {
                    log::warn!("sweep value {v} skipped: {e}");
                    notes.push(format!("{axis}={v}: {e}"));
                }
                Err(e) => return Err(e),
            }
        }
        if kept.is_empty() {
            return Err(Error::InsufficientData("no sweep value produced a series".into()));
        }

        let mut common: BTreeSet<NaiveDate> = baseline.0.iter().copied().collect();
        for (dates, _) in &kept {
            let these: BTreeSet<NaiveDate> = dates.iter().copied().collect();
            common = common.intersection(&these).copied().collect();
        }
        let window_ends: Vec<NaiveDate> = common.into_iter().collect();
        if window_ends.is_empty() {
            return Err(Error::InsufficientData("sweep series share no window end".into()));
        }
        let align = |(dates, values): &(Vec<NaiveDate>, Vec<f64>)| -> Vec<f64> {
            let mut out = Vec::with_capacity(window_ends.len());
            let mut k = 0;
            for d in &window_ends {
                while dates[k] < *d {
                    k += 1;
                }
                out.push(values[k]);
            }
            out
        };
        let series: Vec<Vec<f64>> = kept.iter().map(align).collect();
        let baseline = align(&baseline);
        let (band_low, band_high) = percentile_band(&series, 0.05, 0.95);
        Ok(SweepResult {
            axis,
            parameter_values: kept_values,
            window_ends,
            series,
            baseline,
            band_low,
            band_high,
            notes,
        })
    };
    match base.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Internal(format!("cannot start worker pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Pointwise `lo` and `hi` quantiles across equally long series.
pub fn percentile_band(series: &[Vec<f64>], lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let len = series.first().map_or(0, Vec::len);
    let mut low = Vec::with_capacity(len);
    let mut high = Vec::with_capacity(len);
    let mut column = Vec::with_capacity(series.len());
    for k in 0..len {
        column.clear();
        column.extend(series.iter().map(|s| s[k]));
        column.sort_by(f64::total_cmp);
        low.push(quantile(&column, lo));
        high.push(quantile(&column, hi));
    }
    (low, high)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jumps::compute_stats;
    use crate::synth::{generate, CoJump, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, StudentT};

    fn report_for(values: Vec<f64>) -> NormalityReport {
        let n = values.len();
        let m = DMatrix::from_vec(n, 1, values);
        let stats = compute_stats(&m, &["X".to_string()], 30).unwrap();
        normality_diagnostics(&m, &stats, DEFAULT_TAIL_TOL)
    }

    #[test]
    fn normal_sample_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = report_for(x);
        assert!(r.max_pp_deviation() < 0.01, "{}", r.max_pp_deviation());
        assert_eq!(r.flagged().count(), 0, "{}", r.markets[0].tail_deviation);
    }

    #[test]
    fn heavy_tails_are_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let t = StudentT::new(3.0).unwrap();
        let x: Vec<f64> = (0..100_000).map(|_| t.sample(&mut rng)).collect();
        let r = report_for(x);
        assert_eq!(r.flagged().count(), 1, "{}", r.markets[0].tail_deviation);
    }

    #[test]
    fn median_sits_at_fifty() {
        let z: Vec<f64> = (0..101).map(|k| k as f64 / 10.0 - 5.0).collect();
        let m = market_normality("x", &z, 0.1);
        assert_eq!(m.pp[50].1, 50.0);
        assert!(m.pp.windows(2).all(|w| w[0].0 <= w[1].0));
        assert!(m.qq.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(m.pp.iter().all(|p| (0.0..=100.0).contains(&p.0) && (0.0..=100.0).contains(&p.1)));
    }

    #[test]
    fn default_grids() {
        let c = default_values(SweepAxis::Cutoff, 1);
        assert_eq!(c.len(), 81);
        assert_eq!(c[0], SweepValue::Cutoff(1.8));
        assert_eq!(c[40], SweepValue::Cutoff(2.0));
        assert_eq!(c[80], SweepValue::Cutoff(2.2));
        assert_eq!(default_values(SweepAxis::TimeShift, 1).len(), 120);
        assert_eq!(default_values(SweepAxis::TimeShift, 5).len(), 24);
        assert_eq!(default_values(SweepAxis::Window, 1).len(), 61);
        assert_eq!(default_values(SweepAxis::Basis, 1).len(), 2);
    }

    #[test]
    fn band_is_permutation_invariant() {
        let s = vec![vec![1.0, 5.0], vec![3.0, 2.0], vec![2.0, 9.0], vec![0.5, 4.0]];
        let (lo, hi) = percentile_band(&s, 0.05, 0.95);
        let mut r = s.clone();
        r.reverse();
        assert_eq!(percentile_band(&r, 0.05, 0.95), (lo.clone(), hi.clone()));
        assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
        let single = vec![vec![1.0, 2.0]];
        assert_eq!(percentile_band(&single, 0.05, 0.95), (vec![1.0, 2.0], vec![1.0, 2.0]));
    }

    fn small_panel() -> IndexPanel {
        let mut spec = SynthSpec::new(5, 400, 3);
        spec.co_jump = CoJump::Scalar(0.3);
        generate(&spec).unwrap().0
    }

    fn base() -> RunConfig {
        RunConfig {
            window: 60,
            stride: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn single_value_sweep_is_degenerate() {
        let r = sweep(&small_panel(), &[SweepValue::Cutoff(2.0)], &base()).unwrap();
        assert_eq!(r.band_low, r.band_high);
        assert_eq!(r.band_low, r.series[0]);
        assert_eq!(r.baseline, r.series[0]);
    }

    #[test]
    fn window_sweep_aligns_on_common_dates() {
        let values = [SweepValue::Window(60), SweepValue::Window(90), SweepValue::Window(120)];
        let r = sweep(&small_panel(), &values, &RunConfig { stride: 1, ..base() }).unwrap();
        let lens: Vec<usize> = r.series.iter().map(Vec::len).collect();
        assert!(lens.iter().all(|l| *l == r.window_ends.len()));
        // 400 diff rows; the 120-row windows have the fewest ends
        assert_eq!(r.window_ends.len(), 400 - 120 + 1);
        assert!(r.band_low.iter().zip(&r.band_high).all(|(a, b)| a <= b));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for v in [SweepValue::Cutoff(2.5), SweepValue::Window(59), SweepValue::TimeShift(0)] {
            assert!(matches!(sweep(&small_panel(), &[v], &base()), Err(Error::Config(_))));
        }
        assert!(sweep(&small_panel(), &[SweepValue::Cutoff(2.0), SweepValue::Window(60)], &base()).is_err());
    }

    #[test]
    fn infeasible_values_are_skipped() {
        let spec = SynthSpec::new(4, 100, 1);
        let panel = generate(&spec).unwrap().0;
        let r = sweep(&panel, &[SweepValue::Window(60), SweepValue::Window(120)], &base()).unwrap();
        assert_eq!(r.parameter_values, [SweepValue::Window(60)]);
        assert_eq!(r.notes.len(), 1);
    }

    #[test]
    fn cutoff_sweep_is_monotone_in_jumps() {
        let panel = small_panel();
        let mut rate = f64::INFINITY;
        for v in default_values(SweepAxis::Cutoff, 1).into_iter().step_by(10) {
            let mut cfg = base();
            v.apply(&mut cfg);
            let p = prepare(&panel, &cfg).unwrap();
            let r = p.jumps.jump_rate();
            assert!(r <= rate);
            rate = r;
        }
    }
}
