//! Conditional co-jump probabilities and the gravity flow network.
//!
//! For a window of jump indicators `I[t][i]`:
//!
//! * `p[i][j] = sum_t I[t][i] I[t][j] / sum_t I[t][j]`, the probability that
//!   market `i` jumps given that market `j` jumps. A market that never jumps
//!   in the window contributes an all-zero column.
//! * sending mass `M[i]` is the column sum of `P`, receiving mass `m[i]` the
//!   row sum (both include the diagonal).
//! * distance `q[i][j] = 1 / p[i][j]` (infinite when `p` is zero).
//! * flow `g[i][j] = M[i]^alpha m[j]^beta / q[i][j]^gamma`, zero where `p` is zero.

use std::io::Write;
use std::ops::Range;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::Exponents;
use crate::error::{Error, Result};
use crate::jumps::JumpPanel;

/// Pairwise co-jump counts `C[i][j] = sum_t I[t][i] I[t][j]` over `rows`.
/// The diagonal holds each market's jump count.
pub fn co_jump_counts(jumps: &DMatrix<u8>, rows: Range<usize>) -> DMatrix<u32> {
    let n = jumps.ncols();
    let mut counts = DMatrix::<u32>::zeros(n, n);
    let mut active = Vec::with_capacity(n);
    for t in rows {
        active.clear();
        active.extend((0..n).filter(|&j| jumps[(t, j)] != 0));
        for &i in &active {
            for &j in &active {
                counts[(i, j)] += 1;
            }
        }
    }
    counts
}

/// Conditional jump probability matrix over a window of indicator rows.
pub fn conditional_probability(jumps: &DMatrix<u8>, rows: Range<usize>) -> DMatrix<f64> {
    probability_from_counts(&co_jump_counts(jumps, rows))
}

pub fn probability_from_counts(counts: &DMatrix<u32>) -> DMatrix<f64> {
    let n = counts.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let given = counts[(j, j)];
        if given == 0 {
            0.0
        } else {
            counts[(i, j)] as f64 / given as f64
        }
    })
}

/// Sending (column sums) and receiving (row sums) masses.
pub fn masses(p: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = p.nrows();
    let sending = DVector::from_fn(n, |i, _| p.column(i).sum());
    let receiving = DVector::from_fn(n, |i, _| p.row(i).sum());
    (sending, receiving)
}

/// Distances and gravity flows.
pub fn flows(
    p: &DMatrix<f64>,
    sending: &DVector<f64>,
    receiving: &DVector<f64>,
    exponents: Exponents,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    exponents.validate()?;
    let n = p.nrows();
    if p.ncols() != n || sending.len() != n || receiving.len() != n {
        return Err(Error::Internal("flow inputs are not conformable".into()));
    }
    let q = p.map(|v| if v > 0.0 { 1.0 / v } else { f64::INFINITY });
    let Exponents { alpha, beta, gamma } = exponents;
    let g = DMatrix::from_fn(n, n, |i, j| {
        let qij = q[(i, j)];
        if qij.is_infinite() {
            0.0
        } else {
            pow(sending[i], alpha) * pow(receiving[j], beta) / pow(qij, gamma)
        }
    });
    Ok((q, g))
}

// Keep the common integer exponents exact.
fn pow(x: f64, e: f64) -> f64 {
    if e == 1.0 {
        x
    } else if e == 2.0 {
        x * x
    } else if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

/// Inflow and outflow of every node, excluding self-flows.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFlows {
    pub inflow: DVector<f64>,
    pub outflow: DVector<f64>,
}

pub fn node_flows(g: &DMatrix<f64>) -> NodeFlows {
    let n = g.nrows();
    let inflow = DVector::from_fn(n, |i, _| (0..n).filter(|&k| k != i).map(|k| g[(k, i)]).sum());
    let outflow = DVector::from_fn(n, |i, _| (0..n).filter(|&k| k != i).map(|k| g[(i, k)]).sum());
    NodeFlows { inflow, outflow }
}

/// Sum of all directed off-diagonal flows.
pub fn total_flow(g: &DMatrix<f64>) -> f64 {
    node_flows(g).outflow.sum()
}

/// Gravity network of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetwork {
    pub markets: Vec<String>,
    pub window: (NaiveDate, NaiveDate),
    pub probability: DMatrix<f64>,
    pub sending: DVector<f64>,
    pub receiving: DVector<f64>,
    pub distance: DMatrix<f64>,
    pub flow: DMatrix<f64>,
    pub exponents: Exponents,
    /// Number of indicator rows in the window.
    pub rows: usize,
    /// No market jumped anywhere in the window.
    pub empty: bool,
}

impl FlowNetwork {
    pub fn from_probability(
        markets: Vec<String>,
        window: (NaiveDate, NaiveDate),
        probability: DMatrix<f64>,
        exponents: Exponents,
    ) -> Result<Self> {
        let (sending, receiving) = masses(&probability);
        let (distance, flow) = flows(&probability, &sending, &receiving, exponents)?;
        let empty = probability.iter().all(|v| *v == 0.0);
        Ok(FlowNetwork {
            markets,
            window,
            probability,
            sending,
            receiving,
            distance,
            flow,
            exponents,
            rows: 0,
            empty,
        })
    }

    /// Network of the indicator rows in `rows`.
    pub fn from_jumps(jumps: &JumpPanel, rows: Range<usize>, exponents: Exponents) -> Result<Self> {
        if rows.is_empty() || rows.end > jumps.nrows() {
            return Err(Error::Config(format!(
                "window rows {rows:?} outside the panel of {} rows",
                jumps.nrows()
            )));
        }
        let window = (jumps.dates[rows.start], jumps.dates[rows.end - 1]);
        let nrows = rows.len();
        let p = conditional_probability(&jumps.jumps, rows);
        let mut net = FlowNetwork::from_probability(jumps.markets.clone(), window, p, exponents)?;
        net.rows = nrows;
        Ok(net)
    }

    pub fn n(&self) -> usize {
        self.markets.len()
    }

    pub fn node_flows(&self) -> NodeFlows {
        node_flows(&self.flow)
    }

    pub fn total_flow(&self) -> f64 {
        total_flow(&self.flow)
    }

    pub fn node_summary(&self) -> Vec<NodeSummary> {
        let nf = self.node_flows();
        (0..self.n())
            .map(|i| NodeSummary {
                market: self.markets[i].clone(),
                inflow: nf.inflow[i],
                outflow: nf.outflow[i],
                sending_mass: self.sending[i],
                receiving_mass: self.receiving[i],
            })
            .collect()
    }

    pub fn write_node_summary<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for row in self.node_summary() {
            wtr.serialize(row)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSummary {
    pub market: String,
    pub inflow: f64,
    pub outflow: f64,
    pub sending_mass: f64,
    pub receiving_mass: f64,
}

/// Square matrix as CSV with market identifiers on both axes. Infinite
/// entries are written as `inf`.
pub fn write_matrix_csv<W: Write>(markets: &[String], matrix: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["market".to_string()];
    header.extend(markets.iter().cloned());
    wtr.write_record(&header)?;
    for (i, m) in markets.iter().enumerate() {
        let mut rec = vec![m.clone()];
        rec.extend(matrix.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
