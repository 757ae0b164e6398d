//! Attribution of eigenvalue changes to node, distribution and edge factors.
//!
//! With `f(E, U, N)` the Perron root of `E ∘ (Uᵀ N)`, the change between two
//! models is split by finite differences around the earlier model:
//!
//! * `substitution` (default) swaps one factor at a time:
//!   `node = f(E1, U1, N2) - f(E1, U1, N1)` and likewise for `U` and `E`.
//! * `entrywise` sums `(k2 - k1) * df/dk` over every entry `k` that changed,
//!   each partial derivative taken by central differences.
//!
//! Whatever the linearization misses is kept as the residual.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DecompConfig, EigenConfig, FdMode};
use crate::error::{Error, Result};
use crate::shock::{assemble, TransmissionModel};
use crate::spectral::perron;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TowardStability,
    TowardInstability,
    Unchanged,
}

impl Direction {
    pub fn of(d_lambda: f64) -> Direction {
        if d_lambda < 0.0 {
            Direction::TowardStability
        } else if d_lambda > 0.0 {
            Direction::TowardInstability
        } else {
            Direction::Unchanged
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::TowardStability => "toward_stability",
            Direction::TowardInstability => "toward_instability",
            Direction::Unchanged => "unchanged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContributionTriple {
    pub d_lambda: f64,
    pub node: f64,
    pub flow: f64,
    pub edge: f64,
    pub residual: f64,
    pub direction: Direction,
}

impl ContributionTriple {
    fn new(d_lambda: f64, node: f64, flow: f64, edge: f64) -> Self {
        ContributionTriple {
            d_lambda,
            node,
            flow,
            edge,
            residual: d_lambda - (node + flow + edge),
            direction: Direction::of(d_lambda),
        }
    }
}

fn root(node: &DVector<f64>, u: &DMatrix<f64>, e: &DMatrix<f64>, eigen: &EigenConfig) -> Result<f64> {
    Ok(perron(&assemble(node, u, e)?, eigen)?.value)
}

/// Contributions of each factor to the eigenvalue change from `prev` to `next`.
pub fn contributions(
    prev: &TransmissionModel,
    next: &TransmissionModel,
    cfg: &DecompConfig,
    eigen: &EigenConfig,
) -> Result<ContributionTriple> {
    if prev.markets != next.markets {
        return Err(Error::Validation(
            "models being compared must share the same markets in the same order".into(),
        ));
    }
    if !(cfg.h_rel.is_finite() && cfg.h_rel > 0.0) {
        return Err(Error::Config(format!("h_rel must be positive, got {}", cfg.h_rel)));
    }
    let d_lambda = next.lambda - prev.lambda;
    match cfg.fd_mode {
        FdMode::Substitution => substitution(prev, next, d_lambda, eigen),
        FdMode::Entrywise => entrywise(prev, next, d_lambda, cfg.h_rel, eigen),
    }
}

fn substitution(
    prev: &TransmissionModel,
    next: &TransmissionModel,
    d_lambda: f64,
    eigen: &EigenConfig,
) -> Result<ContributionTriple> {
    let base = prev.lambda;
    let node = if next.node == prev.node {
        0.0
    } else {
        root(&next.node, &prev.distribution, &prev.edge, eigen)? - base
    };
    let flow = if next.distribution == prev.distribution {
        0.0
    } else {
        root(&prev.node, &next.distribution, &prev.edge, eigen)? - base
    };
    let edge = if next.edge == prev.edge {
        0.0
    } else {
        root(&prev.node, &prev.distribution, &next.edge, eigen)? - base
    };
    Ok(ContributionTriple::new(d_lambda, node, flow, edge))
}

fn central_difference<F>(value: f64, h_rel: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let h = h_rel * value.abs().max(1.0);
    if value - h >= 0.0 {
        Ok((eval(value + h)? - eval(value - h)?) / (2.0 * h))
    } else {
        // stay inside the nonnegative cone
        Ok((eval(value + h)? - eval(value)?) / h)
    }
}

fn entrywise(
    prev: &TransmissionModel,
    next: &TransmissionModel,
    d_lambda: f64,
    h_rel: f64,
    eigen: &EigenConfig,
) -> Result<ContributionTriple> {
    let n = prev.n();

    let mut node = 0.0;
    for k in 0..n {
        let delta = next.node[k] - prev.node[k];
        if delta == 0.0 {
            continue;
        }
        let mut work = prev.node.clone();
        let d = central_difference(prev.node[k], h_rel, |v| {
            work[k] = v;
            root(&work, &prev.distribution, &prev.edge, eigen)
        })?;
        node += delta * d;
    }

    let mut flow = 0.0;
    let mut edge = 0.0;
    for i in 0..n {
        for j in 0..n {
            let du = next.distribution[(i, j)] - prev.distribution[(i, j)];
            if du != 0.0 {
                let mut work = prev.distribution.clone();
                let d = central_difference(prev.distribution[(i, j)], h_rel, |v| {
                    work[(i, j)] = v;
                    root(&prev.node, &work, &prev.edge, eigen)
                })?;
                flow += du * d;
            }
            let de = next.edge[(i, j)] - prev.edge[(i, j)];
            if de != 0.0 {
                let mut work = prev.edge.clone();
                let d = central_difference(prev.edge[(i, j)], h_rel, |v| {
                    work[(i, j)] = v;
                    root(&prev.node, &prev.distribution, &work, eigen)
                })?;
                edge += de * d;
            }
        }
    }
    Ok(ContributionTriple::new(d_lambda, node, flow, edge))
}

/// One triple per consecutive pair of models.
pub fn contribution_series(
    models: &[TransmissionModel],
    cfg: &DecompConfig,
    eigen: &EigenConfig,
) -> Result<Vec<ContributionTriple>> {
    if models.len() < 2 {
        return Err(Error::InsufficientData(
            "at least two models are needed for a contribution series".into(),
        ));
    }
    models
        .par_windows(2)
        .map(|pair| contributions(&pair[0], &pair[1], cfg, eigen))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize) -> Histogram {
        let bins = bins.max(1);
        if values.is_empty() {
            return Histogram {
                lower: 0.0,
                upper: 0.0,
                counts: vec![0; bins],
            };
        }
        let lower = values.iter().copied().fold(f64::INFINITY, f64::min);
        let upper = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        let width = (upper - lower) / bins as f64;
        for v in values {
            let k = if width > 0.0 {
                (((v - lower) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[k] += 1;
        }
        Histogram { lower, upper, counts }
    }
}

/// Sample Pearson correlation; `None` when either series is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let (da, db) = (a[k] - ma, b[k] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketSummary {
    pub count: usize,
    pub node: Histogram,
    pub flow: Histogram,
    pub edge: Histogram,
    pub corr_node_flow: Option<f64>,
    pub corr_node_edge: Option<f64>,
    pub corr_flow_edge: Option<f64>,
}

impl BucketSummary {
    fn build<'a>(triples: impl Iterator<Item = &'a ContributionTriple>, bins: usize) -> Self {
        let (mut node, mut flow, mut edge) = (Vec::new(), Vec::new(), Vec::new());
        for t in triples {
            node.push(t.node);
            flow.push(t.flow);
            edge.push(t.edge);
        }
        BucketSummary {
            count: node.len(),
            node: Histogram::build(&node, bins),
            flow: Histogram::build(&flow, bins),
            edge: Histogram::build(&edge, bins),
            corr_node_flow: correlation(&node, &flow),
            corr_node_edge: correlation(&node, &edge),
            corr_flow_edge: correlation(&flow, &edge),
        }
    }
}

/// Histograms and pairwise correlations, overall and per direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionSummary {
    pub all: BucketSummary,
    pub toward_stability: BucketSummary,
    pub toward_instability: BucketSummary,
}

pub fn summarize(triples: &[ContributionTriple], bins: usize) -> ContributionSummary {
    ContributionSummary {
        all: BucketSummary::build(triples.iter(), bins),
        toward_stability: BucketSummary::build(
            triples.iter().filter(|t| t.direction == Direction::TowardStability),
            bins,
        ),
        toward_instability: BucketSummary::build(
            triples.iter().filter(|t| t.direction == Direction::TowardInstability),
            bins,
        ),
    }
}
