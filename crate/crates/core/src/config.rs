//! Run configuration.
//!
//! A run is described by one flat key-value file (TOML syntax). Every key is
//! optional and falls back to the default documented on [`RunConfig`];
//! unknown keys are rejected so that typos cannot silently change a result.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(
    /// How index levels are turned into returns.
    ReturnKind { Simple => "simple", Log => "log" }
);

string_enum!(
    /// Series that gets standardized to find jumps.
    Basis { Diff => "diff", Return => "return" }
);

string_enum!(
    /// Weight matrix used by the edge-scaling factor.
    WeightKind {
        Probability => "probability",
        Flow => "flow",
        InverseDistance => "inverse_distance",
    }
);

string_enum!(
    /// Denominator of the shock distribution ratio.
    UDenominator { Outflow => "outflow", Inflow => "inflow" }
);

string_enum!(
    /// Finite-difference scheme used to attribute eigenvalue changes.
    FdMode { Substitution => "substitution", Entrywise => "entrywise" }
);

string_enum!(
    /// Parameter varied by a robustness sweep.
    SweepAxis {
        Basis => "basis",
        TimeShift => "time_shift",
        Cutoff => "cutoff",
        Window => "window",
    }
);

impl Default for ReturnKind {
    fn default() -> Self {
        ReturnKind::Simple
    }
}

impl Default for Basis {
    fn default() -> Self {
        Basis::Diff
    }
}

impl Default for WeightKind {
    fn default() -> Self {
        WeightKind::Probability
    }
}

impl Default for UDenominator {
    fn default() -> Self {
        UDenominator::Outflow
    }
}

impl Default for FdMode {
    fn default() -> Self {
        FdMode::Substitution
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub time_shift: usize,
    pub max_ffill_days: usize,
    pub missing_row_frac: f64,
    pub return_kind: ReturnKind,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            time_shift: 1,
            max_ffill_days: 5,
            missing_row_frac: 0.2,
            return_kind: ReturnKind::Simple,
        }
    }
}

/// Returns-to-scale exponents of the gravity flow `M^alpha * m^beta / q^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for Exponents {
    fn default() -> Self {
        Exponents {
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
        }
    }
}

impl Exponents {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "flow exponent {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Settings of the Perron eigenpair solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenConfig {
    /// Convergence threshold on successive eigenvalue estimates, relative to `max(1, lambda)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Power iteration gives up early (and falls back to the dense solver)
    /// after this many iterations when the matrix is small enough.
    pub stall_iter: usize,
    /// Largest dimension for which the dense fallback is attempted.
    pub dense_max_n: usize,
    /// Accepted `||T x - lambda x||_1 / max(1, lambda)` for a unit 1-norm `x`.
    pub residual_tol: f64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig {
            tol: 1e-10,
            max_iter: 10_000,
            stall_iter: 2_000,
            dense_max_n: 64,
            residual_tol: 1e-7,
        }
    }
}

/// Everything needed to go from a window of jump indicators to a
/// transmission model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub exponents: Exponents,
    pub w_kind: WeightKind,
    pub u_denominator: UDenominator,
    pub eigen: EigenConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            exponents: Exponents::default(),
            w_kind: WeightKind::Probability,
            u_denominator: UDenominator::Outflow,
            eigen: EigenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompConfig {
    pub fd_mode: FdMode,
    pub h_rel: f64,
}

impl Default for DecompConfig {
    fn default() -> Self {
        DecompConfig {
            fd_mode: FdMode::Substitution,
            h_rel: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingConfig {
    pub window: usize,
    pub stride: usize,
    pub model: ModelConfig,
    pub decomp: DecompConfig,
    /// Compute eigenvalue-change contributions between consecutive windows.
    pub contributions: bool,
    /// Count each directed flow twice (as inflow and as outflow) in the total.
    pub total_flow_double: bool,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub jobs: Option<usize>,
}

impl Default for RollingConfig {
    fn default() -> Self {
        RollingConfig {
            window: 120,
            stride: 1,
            model: ModelConfig::default(),
            decomp: DecompConfig::default(),
            contributions: true,
            total_flow_double: false,
            jobs: None,
        }
    }
}

/// Flat, file-backed configuration shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub time_shift: usize,
    pub max_ffill_days: usize,
    pub missing_row_frac: f64,
    pub return_kind: ReturnKind,

    pub cutoff: f64,
    pub basis: Basis,
    pub min_obs: usize,

    pub window: usize,
    pub stride: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub w_kind: WeightKind,
    pub u_denominator: UDenominator,
    pub total_flow_double: bool,

    pub eigen_tol: f64,
    pub eigen_max_iter: usize,

    pub fd_mode: FdMode,
    pub h_rel: f64,

    pub threshold: f64,
    pub min_run: usize,

    pub sweep_time_shift_stride: usize,

    pub jobs: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ingest = IngestConfig::default();
        let exps = Exponents::default();
        let eigen = EigenConfig::default();
        let decomp = DecompConfig::default();
        RunConfig {
            input: None,
            out: None,
            time_shift: ingest.time_shift,
            max_ffill_days: ingest.max_ffill_days,
            missing_row_frac: ingest.missing_row_frac,
            return_kind: ingest.return_kind,
            cutoff: 2.0,
            basis: Basis::Diff,
            min_obs: 30,
            window: 120,
            stride: 1,
            alpha: exps.alpha,
            beta: exps.beta,
            gamma: exps.gamma,
            w_kind: WeightKind::Probability,
            u_denominator: UDenominator::Outflow,
            total_flow_double: false,
            eigen_tol: eigen.tol,
            eigen_max_iter: eigen.max_iter,
            fd_mode: decomp.fd_mode,
            h_rel: decomp.h_rel,
            threshold: 1.0,
            min_run: 10,
            sweep_time_shift_stride: 1,
            jobs: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Override one key from its textual form, as given on a command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "input" => self.input = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "time_shift" => self.time_shift = num(key, value)?,
            "max_ffill_days" => self.max_ffill_days = num(key, value)?,
            "missing_row_frac" => self.missing_row_frac = num(key, value)?,
            "return_kind" => self.return_kind = value.parse()?,
            "cutoff" => self.cutoff = num(key, value)?,
            "basis" => self.basis = value.parse()?,
            "min_obs" => self.min_obs = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "w_kind" => self.w_kind = value.parse()?,
            "u_denominator" => self.u_denominator = value.parse()?,
            "total_flow_double" => self.total_flow_double = num(key, value)?,
            "eigen_tol" => self.eigen_tol = num(key, value)?,
            "eigen_max_iter" => self.eigen_max_iter = num(key, value)?,
            "fd_mode" => self.fd_mode = value.parse()?,
            "h_rel" => self.h_rel = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "min_run" => self.min_run = num(key, value)?,
            "sweep_time_shift_stride" => self.sweep_time_shift_stride = num(key, value)?,
            "jobs" => self.jobs = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.time_shift == 0 {
            return fail("time_shift must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.missing_row_frac) {
            return fail(format!(
                "missing_row_frac must lie in [0, 1], got {}",
                self.missing_row_frac
            ));
        }
        if !(self.cutoff.is_finite() && self.cutoff > 0.0) {
            return fail(format!("cutoff must be positive, got {}", self.cutoff));
        }
        if self.min_obs < 2 {
            return fail("min_obs must be >= 2".into());
        }
        if self.window < 30 {
            return fail(format!("window must be >= 30, got {}", self.window));
        }
        if self.stride == 0 {
            return fail("stride must be >= 1".into());
        }
        self.exponents().validate()?;
        if !(self.eigen_tol.is_finite() && self.eigen_tol > 0.0) {
            return fail("eigen_tol must be positive".into());
        }
        if self.eigen_max_iter == 0 {
            return fail("eigen_max_iter must be >= 1".into());
        }
        if !(self.h_rel.is_finite() && self.h_rel > 0.0) {
            return fail("h_rel must be positive".into());
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return fail("threshold must be non-negative".into());
        }
        if self.min_run == 0 {
            return fail("min_run must be >= 1".into());
        }
        if self.sweep_time_shift_stride == 0 {
            return fail("sweep_time_shift_stride must be >= 1".into());
        }
        if self.jobs == Some(0) {
            return fail("jobs must be >= 1".into());
        }
        Ok(())
    }

    pub fn ingest(&self) -> IngestConfig {
        IngestConfig {
            time_shift: self.time_shift,
            max_ffill_days: self.max_ffill_days,
            missing_row_frac: self.missing_row_frac,
            return_kind: self.return_kind,
        }
    }

    pub fn exponents(&self) -> Exponents {
        Exponents {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            exponents: self.exponents(),
            w_kind: self.w_kind,
            u_denominator: self.u_denominator,
            eigen: EigenConfig {
                tol: self.eigen_tol,
                max_iter: self.eigen_max_iter,
                ..EigenConfig::default()
            },
        }
    }

    pub fn rolling(&self) -> RollingConfig {
        RollingConfig {
            window: self.window,
            stride: self.stride,
            model: self.model(),
            decomp: DecompConfig {
                fd_mode: self.fd_mode,
                h_rel: self.h_rel,
            },
            contributions: true,
            total_flow_double: self.total_flow_double,
            jobs: self.jobs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_baseline() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.time_shift, 1);
        assert_eq!(cfg.cutoff, 2.0);
        assert_eq!(cfg.window, 120);
        assert_eq!(cfg.exponents(), Exponents::default());
        assert_eq!(cfg.w_kind, WeightKind::Probability);
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_flat_file() {
        let cfg = RunConfig::from_toml_str(
            "time_shift = 5\ncutoff = 1.9\nbasis = \"return\"\nw_kind = \"flow\"\nreturn_kind = \"log\"\n",
        )
        .unwrap();
        assert_eq!(cfg.time_shift, 5);
        assert_eq!(cfg.cutoff, 1.9);
        assert_eq!(cfg.basis, Basis::Return);
        assert_eq!(cfg.w_kind, WeightKind::Flow);
        assert_eq!(cfg.return_kind, ReturnKind::Log);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        assert!(matches!(
            RunConfig::from_toml_str("windw = 60"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("basis = \"level\""),
            Err(Error::Config(_))
        ));
        assert!(matches!("level".parse::<Basis>(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        assert!(cfg.set("nope", "1").is_err());
    }

    #[test]
    fn rejects_out_of_range() {
        for text in ["window = 10", "cutoff = 0.0", "gamma = -1.0", "stride = 0", "jobs = 0"] {
            assert!(
                matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn overrides_by_key() {
        let mut cfg = RunConfig::default();
        cfg.set("window", "60").unwrap();
        cfg.set("fd_mode", "entrywise").unwrap();
        cfg.set("jobs", "4").unwrap();
        assert_eq!(cfg.window, 60);
        assert_eq!(cfg.fd_mode, FdMode::Entrywise);
        assert_eq!(cfg.rolling().jobs, Some(4));
    }
}
