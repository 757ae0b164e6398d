//! Outlier-robust standardization and jump indicators.
//!
//! Location and scale are estimated once per market over the full sample,
//! after discarding points outside the Tukey fences
//! `[q1 - 1.5 IQR, q3 + 1.5 IQR]`. A day is a jump when its standardized
//! value exceeds the cutoff in absolute value.

use std::io::Write;
use std::ops::Range;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::config::Basis;
use crate::error::{Error, Result};
use crate::ingest::{format_date, ReturnPanel};

pub const DEFAULT_MIN_OBS: usize = 30;
const FENCE: f64 = 1.5;

/// Full-sample statistics of one market's series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketStats {
    pub mu: f64,
    pub sigma: f64,
    pub q1: f64,
    pub q3: f64,
    pub n_kept: usize,
    pub n_total: usize,
}

impl MarketStats {
    pub fn lower_fence(&self) -> f64 {
        self.q1 - FENCE * (self.q3 - self.q1)
    }

    pub fn upper_fence(&self) -> f64 {
        self.q3 + FENCE * (self.q3 - self.q1)
    }

    pub fn is_outlier(&self, x: f64) -> bool {
        x < self.lower_fence() || x > self.upper_fence()
    }

    pub fn z(&self, x: f64) -> f64 {
        (x - self.mu) / self.sigma
    }
}

/// Per-market statistics for every usable market, plus the markets that were
/// rejected and why.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpStats {
    pub markets: Vec<String>,
    /// Column of each retained market in the source panel.
    pub columns: Vec<usize>,
    pub stats: Vec<MarketStats>,
    pub excluded: Vec<(String, String)>,
}

impl JumpStats {
    pub fn get(&self, market: &str) -> Option<&MarketStats> {
        self.markets
            .iter()
            .position(|m| m == market)
            .map(|k| &self.stats[k])
    }
}

/// Sample quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Trimmed mean and standard deviation of a single series. Missing values
/// (`NaN`) are ignored.
pub fn compute_market_stats(series: &[f64], min_obs: usize) -> Result<MarketStats> {
    let mut sorted: Vec<f64> = series.iter().copied().filter(|v| !v.is_nan()).collect();
    let n_total = sorted.len();
    if n_total < min_obs.max(2) {
        return Err(Error::InsufficientData(format!(
            "{n_total} observations, need at least {}",
            min_obs.max(2)
        )));
    }
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - FENCE * iqr, q3 + FENCE * iqr);
    let kept: Vec<f64> = sorted.into_iter().filter(|x| *x >= lo && *x <= hi).collect();
    let n_kept = kept.len();
    let mu = kept.iter().sum::<f64>() / n_kept as f64;
    let sigma = if n_kept > 1 {
        (kept.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n_kept - 1) as f64).sqrt()
    } else {
        0.0
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::DegenerateMarket {
            market: String::new(),
            reason: "zero dispersion after outlier removal".into(),
        });
    }
    Ok(MarketStats {
        mu,
        sigma,
        q1,
        q3,
        n_kept,
        n_total,
    })
}

/// Statistics for every column of `series`; unusable markets are excluded
/// with a warning instead of failing the run.
pub fn compute_stats(series: &DMatrix<f64>, markets: &[String], min_obs: usize) -> Result<JumpStats> {
    let results: Vec<_> = (0..series.ncols())
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = series.column(j).iter().copied().collect();
            compute_market_stats(&col, min_obs)
        })
        .collect();
    let mut out = JumpStats {
        markets: Vec::new(),
        columns: Vec::new(),
        stats: Vec::new(),
        excluded: Vec::new(),
    };
    for (j, res) in results.into_iter().enumerate() {
        match res {
            Ok(s) => {
                out.markets.push(markets[j].clone());
                out.columns.push(j);
                out.stats.push(s);
            }
            Err(e) => {
                let reason = match e {
                    Error::DegenerateMarket { reason, .. } => reason,
                    other => other.to_string(),
                };
                log::warn!("excluding market {}: {reason}", markets[j]);
                out.excluded.push((markets[j].clone(), reason));
            }
        }
    }
    if out.markets.is_empty() {
        return Err(Error::InsufficientData("no usable market remains".into()));
    }
    Ok(out)
}

/// Series selected by `basis`, with the dates of its rows.
pub fn basis_series(panel: &ReturnPanel, basis: Basis) -> (&[NaiveDate], &DMatrix<f64>) {
    match basis {
        Basis::Diff => (panel.diff_dates(), panel.diffs()),
        Basis::Return => (panel.return_dates(), panel.returns()),
    }
}

/// Standardized values and jump indicators for the retained markets.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPanel {
    pub dates: Vec<NaiveDate>,
    pub markets: Vec<String>,
    pub z: DMatrix<f64>,
    /// 1 where `|z| > cutoff`, else 0 (missing values never jump).
    pub jumps: DMatrix<u8>,
    pub cutoff: f64,
    pub basis: Basis,
}

impl JumpPanel {
    /// Build a panel directly from indicators, e.g. for synthetic tests.
    pub fn from_indicators(dates: Vec<NaiveDate>, markets: Vec<String>, jumps: DMatrix<u8>) -> Result<Self> {
        if jumps.nrows() != dates.len() || jumps.ncols() != markets.len() {
            return Err(Error::Validation("indicator shape does not match labels".into()));
        }
        if jumps.iter().any(|v| *v > 1) {
            return Err(Error::Validation("indicators must be 0 or 1".into()));
        }
        let z = jumps.map(|v| v as f64);
        Ok(JumpPanel {
            dates,
            markets,
            z,
            jumps,
            cutoff: 0.5,
            basis: Basis::Diff,
        })
    }

    pub fn nrows(&self) -> usize {
        self.dates.len()
    }

    pub fn nmarkets(&self) -> usize {
        self.markets.len()
    }

    /// Fraction of non-missing cells flagged as jumps.
    pub fn jump_rate(&self) -> f64 {
        let valid = self.z.iter().filter(|v| !v.is_nan()).count();
        let jumps = self.jumps.iter().filter(|v| **v == 1).count();
        jumps as f64 / valid.max(1) as f64
    }

    /// Rows whose dates fall in `[start, end]`.
    pub fn rows_between(&self, start: NaiveDate, end: NaiveDate) -> Range<usize> {
        let lo = self.dates.partition_point(|d| *d < start);
        let hi = self.dates.partition_point(|d| *d <= end);
        lo..hi.max(lo)
    }

    /// Debug export of one market: `date,value,z,jump`.
    pub fn write_market_csv<W: Write>(&self, market: usize, values: &[f64], writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["date", "value", "z", "jump"])?;
        for t in 0..self.nrows() {
            wtr.write_record([
                format_date(self.dates[t]),
                values[t].to_string(),
                self.z[(t, market)].to_string(),
                self.jumps[(t, market)].to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Standardize the `basis` series of `panel` with `stats` and threshold at `cutoff`.
pub fn detect_jumps(panel: &ReturnPanel, stats: &JumpStats, cutoff: f64, basis: Basis) -> Result<JumpPanel> {
    if !(cutoff.is_finite() && cutoff > 0.0) {
        return Err(Error::Config(format!("cutoff must be positive, got {cutoff}")));
    }
    let (dates, series) = basis_series(panel, basis);
    let rows = series.nrows();
    let n = stats.markets.len();
    let mut z = DMatrix::from_element(rows, n, f64::NAN);
    let mut jumps = DMatrix::zeros(rows, n);
    for (k, (&col, st)) in stats.columns.iter().zip(&stats.stats).enumerate() {
        for t in 0..rows {
            let x = series[(t, col)];
            if x.is_nan() {
                continue;
            }
            let zt = st.z(x);
            z[(t, k)] = zt;
            jumps[(t, k)] = u8::from(zt.abs() > cutoff);
        }
    }
    Ok(JumpPanel {
        dates: dates.to_vec(),
        markets: stats.markets.clone(),
        z,
        jumps,
        cutoff,
        basis,
    })
}

/// Compute full-sample statistics on the `basis` series and flag jumps.
pub fn standardize(panel: &ReturnPanel, basis: Basis, cutoff: f64, min_obs: usize) -> Result<(JumpStats, JumpPanel)> {
    let (_, series) = basis_series(panel, basis);
    let stats = compute_stats(series, panel.markets(), min_obs)?;
    let jumps = detect_jumps(panel, &stats, cutoff, basis)?;
    Ok((stats, jumps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ReturnKind;
    use crate::ingest::{compute_returns, parse_date, IndexPanel};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn symmetric_set_has_zero_mean() {
        let s = compute_market_stats(&[-1.0, 0.0, 1.0], 1).unwrap();
        assert_eq!(s.mu, 0.0);
        assert_eq!(s.n_kept, 3);
        assert!(s.q1 <= s.q3);
    }

    #[test]
    fn single_spike_is_trimmed_then_degenerate() {
        let err = compute_market_stats(&[0.0, 0.0, 0.0, 0.0, 100.0], 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateMarket { .. }));
    }

    #[test]
    fn too_few_observations() {
        let err = compute_market_stats(&[1.0, 2.0, 3.0], DEFAULT_MIN_OBS).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn interpolated_quartiles() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&sorted, 0.25), 1.75);
        assert_eq!(quantile(&sorted, 0.5), 2.5);
        assert_eq!(quantile(&sorted, 1.0), 4.0);
    }

    #[test]
    fn normal_sample_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = compute_market_stats(&xs, DEFAULT_MIN_OBS).unwrap();
        assert!(s.mu.abs() < 0.05, "mu {}", s.mu);
        assert!((0.9..=1.0).contains(&s.sigma), "sigma {}", s.sigma);
    }

    fn one_market_panel(values: &[f64]) -> ReturnPanel {
        // levels chosen so that the diffs equal `values` exactly is awkward;
        // build returns that integrate the given diffs instead
        let mut levels = vec![100.0, 100.0];
        let mut r = 0.0;
        for d in values {
            r += d;
            let last = *levels.last().unwrap();
            levels.push(last * (1.0 + r));
        }
        let start = parse_date("2010-01-01").unwrap();
        let dates = (0..levels.len())
            .map(|t| start + chrono::Days::new(t as u64))
            .collect();
        let panel = IndexPanel::new(
            dates,
            vec!["A".into()],
            DMatrix::from_column_slice(levels.len(), 1, &levels),
        )
        .unwrap();
        compute_returns(&panel, 1, ReturnKind::Simple).unwrap()
    }

    fn stats_for(mu: f64, sigma: f64) -> JumpStats {
        JumpStats {
            markets: vec!["A".into()],
            columns: vec![0],
            stats: vec![MarketStats {
                mu,
                sigma,
                q1: -sigma,
                q3: sigma,
                n_kept: 100,
                n_total: 100,
            }],
            excluded: vec![],
        }
    }

    #[test]
    fn threshold_arithmetic() {
        let panel = one_market_panel(&[0.0, 0.0, 0.0]);
        // diffs are [0, 0, 0]; x = mu gives z = 0
        let jp = detect_jumps(&panel, &stats_for(0.0, 0.01), 2.0, Basis::Diff).unwrap();
        assert!(jp.z.iter().all(|z| z.abs() < 1e-9));
        assert!(jp.jumps.iter().all(|j| *j == 0));

        let panel = one_market_panel(&[0.0, 0.03, 0.0]);
        let jp = detect_jumps(&panel, &stats_for(0.0, 0.01), 2.0, Basis::Diff).unwrap();
        assert!((jp.z[(1, 0)] - 3.0).abs() < 1e-9);
        assert_eq!(jp.jumps[(1, 0)], 1);
        assert_eq!(jp.jumps[(0, 0)], 0);
    }

    #[test]
    fn rejects_bad_cutoff() {
        let panel = one_market_panel(&[0.0, 0.0]);
        assert!(matches!(
            detect_jumps(&panel, &stats_for(0.0, 1.0), 0.0, Basis::Diff),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_market_is_excluded() {
        let mut series = DMatrix::zeros(40, 2);
        for t in 0..40 {
            series[(t, 1)] = (t as f64 * 0.37).sin();
        }
        let stats = compute_stats(&series, &["flat".into(), "wavy".into()], 30).unwrap();
        assert_eq!(stats.markets, ["wavy"]);
        assert_eq!(stats.columns, [1]);
        assert_eq!(stats.excluded.len(), 1);
    }

    #[test]
    fn normal_jump_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = compute_market_stats(&xs, DEFAULT_MIN_OBS).unwrap();
        let rate = xs.iter().filter(|x| s.z(**x).abs() > 2.0).count() as f64 / xs.len() as f64;
        assert!((0.039..=0.053).contains(&rate), "rate {rate}");
    }

    proptest! {
        #[test]
        fn affine_invariance(
            xs in proptest::collection::vec(-1.0f64..1.0, 40..120),
            scale in 0.01f64..100.0,
            shift in -5.0f64..5.0,
        ) {
            let a = compute_market_stats(&xs, 30);
            let ys: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
            let b = compute_market_stats(&ys, 30);
            if let (Ok(a), Ok(b)) = (a, b) {
                for (x, y) in xs.iter().zip(&ys) {
                    let (za, zb) = (a.z(*x), b.z(*y));
                    prop_assert!((za - zb).abs() < 1e-6 * za.abs().max(1.0));
                    // stay clear of the boundary where rounding could flip the flag
                    if (za.abs() - 2.0).abs() > 1e-6 {
                        prop_assert_eq!(za.abs() > 2.0, zb.abs() > 2.0);
                    }
                }
            }
        }

        #[test]
        fn raising_cutoff_never_adds_jumps(
            xs in proptest::collection::vec(-0.01f64..0.01, 40..80),
            c1 in 0.5f64..3.0,
            dc in 0.0f64..1.0,
        ) {
            let panel = one_market_panel(&xs);
            let (stats, lo) = standardize(&panel, Basis::Diff, c1, 30).unwrap();
            let hi = detect_jumps(&panel, &stats, c1 + dc, Basis::Diff).unwrap();
            for (a, b) in lo.jumps.iter().zip(hi.jumps.iter()) {
                prop_assert!(b <= a);
            }
            for (z, j) in lo.z.iter().zip(lo.jumps.iter()) {
                prop_assert_eq!(*j == 1, z.abs() > c1);
            }
        }
    }
}
