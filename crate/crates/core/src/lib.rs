//! Conditional co-jump networks and a Perron-eigenvalue stability indicator
//! for panels of market index levels.
//!
//! [`pipeline::analyze`] runs the whole chain: returns and jumps
//! ([`ingest`], [`jumps`]), windowed gravity networks ([`network`]), the
//! transmission model and its eigenvalue ([`shock`], [`spectral`]), factor
//! contributions ([`decomposition`]) and the rolling series with its
//! instability periods ([`rolling`]). [`robustness`] holds normality
//! diagnostics and parameter sweeps; [`synth`] generates test panels.
//!
//! ```
//! use fragility::config::RunConfig;
//! use fragility::pipeline::analyze;
//! use fragility::synth::{generate, SynthSpec};
//!
//! let (panel, _) = generate(&SynthSpec::new(4, 200, 3))?;
//! let a = analyze(&panel, &RunConfig::default())?;
//! assert_eq!(a.series.len(), 81);
//! # Ok::<(), fragility::Error>(())
//! ```

pub mod config;
pub mod decomposition;
pub mod error;
pub mod ingest;
pub mod jumps;
pub mod network;
pub mod pipeline;
pub mod robustness;
pub mod rolling;
pub mod shock;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/jumps.md")]
    struct Jumps;
    #[doc = include_str!("../../../book/src/network.md")]
    struct Network;
    #[doc = include_str!("../../../book/src/transmission.md")]
    struct Transmission;
    #[doc = include_str!("../../../book/src/decomposition.md")]
    struct Decomposition;
    #[doc = include_str!("../../../book/src/rolling.md")]
    struct Rolling;
    #[doc = include_str!("../../../book/src/robustness.md")]
    struct Robustness;
    #[doc = include_str!("../../../book/src/synth.md")]
    struct Synth;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
