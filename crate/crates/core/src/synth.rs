//! Synthetic index panels with a known jump structure.
//!
//! Each day a common event fires with probability `event_prob`. Market `i`
//! follows the event with probability `rho_i`; otherwise it jumps on its own
//! with a probability chosen so that its marginal jump rate is `jump_prob_i`.
//! For two markets with equal jump rate `pi` (and `event_prob = pi`),
//!
//! ```text
//! P(i jumps | j jumps) = pi + rho_i rho_j (1 - pi)
//! ```
//!
//! so `co_jump = rho_i rho_j` is the share of the gap between independence
//! (`0`) and identical jump days (`1`). A scalar `co_jump` sets
//! `rho = sqrt(co_jump)` everywhere; a matrix must be of the rank-one form
//! `rho_i rho_j` off the diagonal.
//!
//! Jump days draw a diff of `sign * base_vol * (jump_scale + |N(0,1)|)`,
//! other days `base_vol * N(0,1)`. Both include a weak pull
//! `-reversion * r[t-1]` that keeps returns from wandering off. With
//! `noise_clip`, non-jump diffs are redrawn until
//! `|diff| <= noise_clip * base_vol`. Returns are the running sum of the
//! diffs and are compounded into index levels.

use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{parse_date, IndexPanel};
use crate::network::co_jump_counts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerMarket {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PerMarket {
    fn expand(&self, n: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            PerMarket::Scalar(v) => Ok(vec![*v; n]),
            PerMarket::Vector(v) if v.len() == n => Ok(v.clone()),
            PerMarket::Vector(v) => Err(Error::Spec(format!(
                "{name} has {} entries for {n} markets",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoJump {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    /// First diff day (0-based) the regime applies to.
    pub start_day: usize,
    pub co_jump: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_markets: usize,
    /// Number of diff observations; the panel has two more level rows.
    pub n_days: usize,
    pub seed: u64,
    #[serde(default = "default_base_vol")]
    pub base_vol: PerMarket,
    #[serde(default = "default_jump_prob")]
    pub jump_prob: PerMarket,
    #[serde(default = "default_co_jump")]
    pub co_jump: CoJump,
    #[serde(default)]
    pub regimes: Vec<Regime>,
    /// Defaults to the mean jump probability.
    #[serde(default)]
    pub event_prob: Option<f64>,
    #[serde(default = "default_jump_scale")]
    pub jump_scale: f64,
    #[serde(default)]
    pub noise_clip: Option<f64>,
    #[serde(default = "default_reversion")]
    pub reversion: f64,
    #[serde(default = "default_start_date")]
    pub start_date: String,
    #[serde(default = "default_initial_level")]
    pub initial_level: f64,
}

fn default_base_vol() -> PerMarket {
    PerMarket::Scalar(0.001)
}
fn default_jump_prob() -> PerMarket {
    PerMarket::Scalar(0.05)
}
fn default_co_jump() -> CoJump {
    CoJump::Scalar(0.0)
}
fn default_jump_scale() -> f64 {
    4.0
}
fn default_reversion() -> f64 {
    0.01
}
fn default_start_date() -> String {
    "2000-01-03".into()
}
fn default_initial_level() -> f64 {
    100.0
}

impl SynthSpec {
    /// Homogeneous spec with defaults for everything but the shape and seed.
    pub fn new(n_markets: usize, n_days: usize, seed: u64) -> Self {
        SynthSpec {
            n_markets,
            n_days,
            seed,
            base_vol: default_base_vol(),
            jump_prob: default_jump_prob(),
            co_jump: default_co_jump(),
            regimes: Vec::new(),
            event_prob: None,
            jump_scale: default_jump_scale(),
            noise_clip: None,
            reversion: default_reversion(),
            start_date: default_start_date(),
            initial_level: default_initial_level(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Check the spec without generating anything.
    pub fn validate(&self) -> Result<()> {
        plan(self).map(|_| ())
    }

    pub fn market_names(&self) -> Vec<String> {
        let width = self.n_markets.to_string().len().max(2);
        (1..=self.n_markets).map(|i| format!("M{i:0width$}")).collect()
    }
}

/// Jump structure actually drawn, aligned with the diff dates of the panel
/// (level rows `2..`).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub dates: Vec<NaiveDate>,
    pub indicators: DMatrix<u8>,
    pub co_jump_counts: DMatrix<u32>,
    pub common_events: Vec<bool>,
}

impl GroundTruth {
    /// `date` followed by one 0/1 column per market.
    pub fn write_csv<W: std::io::Write>(&self, markets: &[String], writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend(markets.iter().cloned());
        wtr.write_record(&header)?;
        for (t, d) in self.dates.iter().enumerate() {
            let mut rec = vec![crate::ingest::format_date(*d)];
            rec.extend(self.indicators.row(t).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

struct Plan {
    vol: Vec<f64>,
    /// Per regime: (first day, loadings, idiosyncratic jump probabilities).
    regimes: Vec<(usize, Vec<f64>, Vec<f64>)>,
    event_prob: f64,
}

fn check_prob(v: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Spec(format!("{what} must lie in [0, 1], got {v}")))
    }
}

/// Loadings `rho` with `rho_i rho_j = c_ij` off the diagonal.
pub fn rank_one_loadings(c: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = c.len();
    if c.iter().any(|row| row.len() != n) {
        return Err(Error::Spec("co_jump matrix must be square".into()));
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                check_prob(c[i][j], "co_jump")?;
                if (c[i][j] - c[j][i]).abs() > 1e-12 {
                    return Err(Error::Spec("co_jump matrix must be symmetric".into()));
                }
            }
        }
    }
    if n == 1 {
        return Ok(vec![0.0]);
    }
    if n == 2 {
        let r = c[0][1].sqrt();
        return Ok(vec![r, r]);
    }
    let mut rho = vec![0.0; n];
    for (i, r) in rho.iter_mut().enumerate() {
        let mut best: Option<(usize, usize)> = None;
        for j in 0..n {
            for k in j + 1..n {
                if j != i && k != i && best.map_or(true, |(a, b)| c[j][k] > c[a][b]) {
                    best = Some((j, k));
                }
            }
        }
        let (j, k) = best.expect("n >= 3");
        if c[j][k] > 0.0 {
            *r = (c[i][j] * c[i][k] / c[j][k]).sqrt();
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && (rho[i] * rho[j] - c[i][j]).abs() > 1e-9 {
                return Err(Error::Spec(format!(
                    "co_jump matrix is not realizable by a single common factor (entry {i},{j})"
                )));
            }
        }
    }
    if rho.iter().any(|r| *r > 1.0 + 1e-12) {
        return Err(Error::Spec("co_jump matrix implies a loading above 1".into()));
    }
    Ok(rho.into_iter().map(|r| r.min(1.0)).collect())
}

fn plan(spec: &SynthSpec) -> Result<Plan> {
    let n = spec.n_markets;
    if n == 0 || spec.n_days == 0 {
        return Err(Error::Spec("n_markets and n_days must be positive".into()));
    }
    let vol = spec.base_vol.expand(n, "base_vol")?;
    if vol.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Spec("base_vol must be positive".into()));
    }
    let pi = spec.jump_prob.expand(n, "jump_prob")?;
    for p in &pi {
        check_prob(*p, "jump_prob")?;
    }
    let event_prob = spec.event_prob.unwrap_or(pi.iter().sum::<f64>() / n as f64);
    check_prob(event_prob, "event_prob")?;
    if !(spec.jump_scale.is_finite() && spec.jump_scale >= 0.0) {
        return Err(Error::Spec("jump_scale must be nonnegative".into()));
    }
    if let Some(clip) = spec.noise_clip {
        if !(clip.is_finite() && clip > 0.0) {
            return Err(Error::Spec("noise_clip must be positive".into()));
        }
    }
    if !(0.0..1.0).contains(&spec.reversion) {
        return Err(Error::Spec("reversion must lie in [0, 1)".into()));
    }
    if !(spec.initial_level.is_finite() && spec.initial_level > 0.0) {
        return Err(Error::Spec("initial_level must be positive".into()));
    }
    if parse_date(&spec.start_date).is_none() {
        return Err(Error::Spec(format!("invalid start_date `{}`", spec.start_date)));
    }

    let idiosyncratic = |rho: &[f64]| -> Result<Vec<f64>> {
        (0..n)
            .map(|i| {
                if rho[i] >= 1.0 {
                    if (pi[i] - event_prob).abs() > 1e-12 {
                        return Err(Error::Spec(format!(
                            "market {} follows the common event fully, so its jump_prob must equal event_prob",
                            i + 1
                        )));
                    }
                    return Ok(0.0);
                }
                let q = (pi[i] - rho[i] * event_prob) / (1.0 - rho[i]);
                if !(-1e-12..=1.0 + 1e-12).contains(&q) {
                    return Err(Error::Spec(format!(
                        "jump_prob {} of market {} is not reachable with loading {} and event_prob {event_prob}",
                        pi[i],
                        i + 1,
                        rho[i]
                    )));
                }
                Ok(q.clamp(0.0, 1.0))
            })
            .collect()
    };

    let base_rho = match &spec.co_jump {
        CoJump::Scalar(c) => {
            check_prob(*c, "co_jump")?;
            vec![c.sqrt(); n]
        }
        CoJump::Matrix(m) => rank_one_loadings(m)?,
    };
    let mut regimes = vec![(0, base_rho.clone(), idiosyncratic(&base_rho)?)];
    let mut last_start = 0;
    for (k, r) in spec.regimes.iter().enumerate() {
        if (k > 0 && r.start_day <= last_start) || r.start_day >= spec.n_days {
            return Err(Error::Spec(
                "regimes must have strictly increasing start days inside the sample".into(),
            ));
        }
        check_prob(r.co_jump, "regime co_jump")?;
        last_start = r.start_day;
        let rho = vec![r.co_jump.sqrt(); n];
        let q = idiosyncratic(&rho)?;
        if r.start_day == 0 {
            regimes[0] = (0, rho, q);
        } else {
            regimes.push((r.start_day, rho, q));
        }
    }
    Ok(Plan {
        vol,
        regimes,
        event_prob,
    })
}

/// Standard normal draw shifted by `pull`; with a clip, redrawn until the
/// shifted value lies within `[-clip, clip]`.
fn noise(rng: &mut ChaCha8Rng, pull: f64, clip: Option<f64>) -> f64 {
    let Some(clip) = clip else {
        return rng.sample::<f64, _>(StandardNormal) + pull;
    };
    for _ in 0..10_000 {
        let x = rng.sample::<f64, _>(StandardNormal) + pull;
        if x.abs() <= clip {
            return x;
        }
    }
    pull.clamp(-clip, clip)
}

/// Consecutive weekdays starting at `start` (moved forward off a weekend).
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date overflow");
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<(IndexPanel, GroundTruth)> {
    let plan = plan(spec)?;
    let (n, days) = (spec.n_markets, spec.n_days);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut indicators = DMatrix::<u8>::zeros(days, n);
    let mut common_events = Vec::with_capacity(days);
    let mut levels = DMatrix::<f64>::zeros(days + 2, n);
    let mut ret = vec![0.0; n];
    for i in 0..n {
        levels[(0, i)] = spec.initial_level;
        levels[(1, i)] = spec.initial_level;
    }

    let mut regime = 0;
    for t in 0..days {
        while regime + 1 < plan.regimes.len() && plan.regimes[regime + 1].0 <= t {
            regime += 1;
        }
        let (_, rho, idio) = &plan.regimes[regime];
        let event = rng.random_bool(plan.event_prob);
        common_events.push(event);
        for i in 0..n {
            let follows = rng.random::<f64>() < rho[i];
            let own = rng.random::<f64>() < idio[i];
            let jump = if follows { event } else { own };
            let pull = -spec.reversion * ret[i] / plan.vol[i];
            let diff = if jump {
                indicators[(t, i)] = 1;
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let size: f64 = rng.sample(StandardNormal);
                plan.vol[i] * (sign * (spec.jump_scale + size.abs()) + pull)
            } else {
                plan.vol[i] * noise(&mut rng, pull, spec.noise_clip)
            };
            ret[i] += diff;
            if ret[i] <= -1.0 {
                return Err(Error::Spec(
                    "simulated return fell below -100%; lower base_vol or jump_scale".into(),
                ));
            }
            levels[(t + 2, i)] = levels[(t + 1, i)] * (1.0 + ret[i]);
        }
    }

    let start = parse_date(&spec.start_date).expect("validated");
    let dates = business_days(start, days + 2);
    let counts = co_jump_counts(&indicators, 0..days);
    let truth = GroundTruth {
        dates: dates[2..].to_vec(),
        indicators,
        co_jump_counts: counts,
        common_events,
    };
    let panel = IndexPanel::new(dates, spec.market_names(), levels)?;
    Ok((panel, truth))
}

/// Average off-diagonal conditional co-jump frequency over `rows`, expressed
/// on the `co_jump` scale: `(p - pi) / (1 - pi)` with `pi` the average jump
/// rate. `None` if nothing jumped.
pub fn realized_co_jump(indicators: &DMatrix<u8>, rows: std::ops::Range<usize>) -> Option<f64> {
    let n = indicators.ncols();
    let len = rows.len();
    let counts = co_jump_counts(indicators, rows);
    let (mut sum, mut pairs) = (0.0, 0usize);
    for j in 0..n {
        let base = counts[(j, j)];
        if base == 0 {
            continue;
        }
        for i in 0..n {
            if i != j {
                sum += counts[(i, j)] as f64 / base as f64;
                pairs += 1;
            }
        }
    }
    if pairs == 0 || len == 0 {
        return None;
    }
    let p = sum / pairs as f64;
    let pi = (0..n).map(|j| counts[(j, j)] as f64).sum::<f64>() / (n * len) as f64;
    Some((p - pi) / (1.0 - pi))
}
