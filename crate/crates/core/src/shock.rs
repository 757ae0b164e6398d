//! Shock transmission: node scaling, outflow distribution, edge scaling.
//!
//! A unit shock at market `j` is first scaled by the node factor
//! `a_N[j] = inflow_j / outflow_j`, split among the other markets in
//! proportion to `j`'s outflows (`u[j][i]`), scaled again by the edge factor
//! `a_E[j][i]` and lands at `i`. One step of the process is therefore
//!
//! ```text
//! T[i][j] = a_E[j][i] * u[j][i] * a_N[j],   i.e.   T = E ∘ (Uᵀ N)
//! ```
//!
//! where `E` stores `a_E` transposed. The spectral radius of `T` separates
//! stable (shocks die out, `lambda < 1`) from unstable systems.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::{EigenConfig, ModelConfig, UDenominator, WeightKind};
use crate::error::{Error, Result};
use crate::network::{node_flows, FlowNetwork};
use crate::spectral::{perron, PerronPair};

const NEUTRAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Amplifier,
    Absorber,
    Neutral,
}

impl NodeRole {
    pub fn classify(factor: f64) -> NodeRole {
        if (factor - 1.0).abs() <= NEUTRAL_TOL {
            NodeRole::Neutral
        } else if factor > 1.0 {
            NodeRole::Amplifier
        } else {
            NodeRole::Absorber
        }
    }
}

/// Node-scaling factors `inflow / outflow`. Markets without outflow get 0.
pub fn node_factors(g: &DMatrix<f64>) -> DVector<f64> {
    let nf = node_flows(g);
    DVector::from_fn(g.nrows(), |i, _| {
        let (inflow, outflow) = (nf.inflow[i], nf.outflow[i]);
        if outflow > 0.0 {
            inflow / outflow
        } else {
            if inflow > 0.0 {
                log::debug!("node {i} receives flow but sends none; node factor set to 0");
            }
            0.0
        }
    })
}

/// Share of market `i`'s shock passed on to `j`. Self-shares are zero and a
/// row without a positive denominator is all zero.
pub fn distribution_matrix(g: &DMatrix<f64>, denominator: UDenominator) -> DMatrix<f64> {
    let n = g.nrows();
    let nf = node_flows(g);
    let denom = match denominator {
        UDenominator::Outflow => nf.outflow,
        UDenominator::Inflow => nf.inflow,
    };
    DMatrix::from_fn(n, n, |i, j| {
        if i == j || denom[i] <= 0.0 {
            0.0
        } else {
            g[(i, j)] / denom[i]
        }
    })
}

/// Weight matrix of the edge-scaling factor.
pub fn weights(net: &FlowNetwork, kind: WeightKind) -> DMatrix<f64> {
    match kind {
        WeightKind::Probability => net.probability.clone(),
        WeightKind::Flow => net.flow.clone(),
        WeightKind::InverseDistance => net.distance.map(|q| if q.is_finite() { 1.0 / q } else { 0.0 }),
    }
}

/// Edge-scaling matrix, stored transposed: entry `(i, j)` is the factor of
/// the edge `j -> i`.
///
/// The factor of edge `i -> j` is
/// `(sum_k w[k][j] / sum_k w[i][k]) * (sum_k g[i][k] / sum_k g[k][j])` with
/// diagonal terms left out of every sum; entries with a vanishing
/// denominator are 0.
pub fn edge_factors(w: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    let wf = node_flows(w);
    let gf = node_flows(g);
    let factor = |i: usize, j: usize| -> f64 {
        if i == j {
            return 0.0;
        }
        let (w_in_j, w_out_i) = (wf.inflow[j], wf.outflow[i]);
        let (g_out_i, g_in_j) = (gf.outflow[i], gf.inflow[j]);
        if w_out_i <= 0.0 || g_in_j <= 0.0 {
            0.0
        } else {
            // one division keeps the w = g case exactly 1
            (w_in_j * g_out_i) / (w_out_i * g_in_j)
        }
    };
    DMatrix::from_fn(n, n, |i, j| factor(j, i))
}

/// `E ∘ (Uᵀ N)` for a diagonal `N` given by its entries.
pub fn assemble(node: &DVector<f64>, distribution: &DMatrix<f64>, edge: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = node.len();
    if distribution.shape() != (n, n) || edge.shape() != (n, n) {
        return Err(Error::Internal(format!(
            "cannot assemble transmission matrix from N ({n}), U {:?} and E {:?}",
            distribution.shape(),
            edge.shape()
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| edge[(i, j)] * (distribution[(j, i)] * node[j])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionModel {
    pub markets: Vec<String>,
    pub node: DVector<f64>,
    pub distribution: DMatrix<f64>,
    pub edge: DMatrix<f64>,
    pub transmission: DMatrix<f64>,
    pub lambda: f64,
    pub eigvec: DVector<f64>,
    pub w_kind: WeightKind,
}

impl TransmissionModel {
    pub fn from_network(net: &FlowNetwork, cfg: &ModelConfig) -> Result<Self> {
        let node = node_factors(&net.flow);
        let distribution = distribution_matrix(&net.flow, cfg.u_denominator);
        let edge = edge_factors(&weights(net, cfg.w_kind), &net.flow);
        Self::from_factors(net.markets.clone(), node, distribution, edge, cfg.w_kind, &cfg.eigen)
    }

    pub fn from_factors(
        markets: Vec<String>,
        node: DVector<f64>,
        distribution: DMatrix<f64>,
        edge: DMatrix<f64>,
        w_kind: WeightKind,
        eigen: &EigenConfig,
    ) -> Result<Self> {
        let transmission = assemble(&node, &distribution, &edge)?;
        let PerronPair { value, vector, .. } = perron(&transmission, eigen)?;
        Ok(TransmissionModel {
            markets,
            node,
            distribution,
            edge,
            transmission,
            lambda: value,
            eigvec: vector,
            w_kind,
        })
    }

    pub fn n(&self) -> usize {
        self.markets.len()
    }

    pub fn roles(&self) -> Vec<NodeRole> {
        self.node.iter().map(|a| NodeRole::classify(*a)).collect()
    }

    pub fn summary(&self, include_matrices: bool) -> ModelSummary {
        let roles = self.roles();
        let count = |r: NodeRole| roles.iter().filter(|x| **x == r).count();
        let dump = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        ModelSummary {
            lambda: self.lambda,
            stable: self.lambda < 1.0,
            amplifiers: count(NodeRole::Amplifier),
            absorbers: count(NodeRole::Absorber),
            neutral: count(NodeRole::Neutral),
            w_kind: self.w_kind,
            markets: self.markets.clone(),
            node_factors: self.node.iter().copied().collect(),
            eigvec: self.eigvec.iter().copied().collect(),
            matrices: include_matrices.then(|| MatrixDump {
                distribution: dump(&self.distribution),
                edge: dump(&self.edge),
                transmission: dump(&self.transmission),
            }),
        }
    }
}

/// JSON view of a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub lambda: f64,
    pub stable: bool,
    pub amplifiers: usize,
    pub absorbers: usize,
    pub neutral: usize,
    pub w_kind: WeightKind,
    pub markets: Vec<String>,
    pub node_factors: Vec<f64>,
    pub eigvec: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrices: Option<MatrixDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixDump {
    pub distribution: Vec<Vec<f64>>,
    pub edge: Vec<Vec<f64>>,
    pub transmission: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShockTrajectory {
    /// 1-norm of the shock vector, starting with the initial shock.
    pub norms: Vec<f64>,
    /// The run was cut short because the shock overflowed.
    pub explosive: bool,
}

const OVERFLOW_NORM: f64 = 1e300;

/// Iterate `S_k = T S_{k-1}` for `steps` steps.
pub fn simulate_shock(t: &DMatrix<f64>, s0: &DVector<f64>, steps: usize) -> Result<ShockTrajectory> {
    if s0.len() != t.ncols() {
        return Err(Error::Validation(format!(
            "initial shock has {} entries for a {}x{} matrix",
            s0.len(),
            t.nrows(),
            t.ncols()
        )));
    }
    if s0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Validation("initial shock must be finite and nonnegative".into()));
    }
    if steps == 0 {
        return Err(Error::Validation("at least one step is required".into()));
    }
    let mut s = s0.clone();
    let mut norms = Vec::with_capacity(steps + 1);
    norms.push(s.lp_norm(1));
    let mut explosive = false;
    for _ in 0..steps {
        s = t * s;
        let norm = s.lp_norm(1);
        if !(norm.is_finite() && norm < OVERFLOW_NORM) {
            explosive = true;
            break;
        }
        norms.push(norm);
    }
    Ok(ShockTrajectory { norms, explosive })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Exponents;
    use crate::spectral::dense_spectral_radius;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn test_net(p: DMatrix<f64>) -> FlowNetwork {
        let d = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let markets = (0..p.nrows()).map(|i| format!("M{i}")).collect();
        FlowNetwork::from_probability(markets, (d, d), p, Exponents::default()).unwrap()
    }

    #[test]
    fn symmetric_flows_are_neutral() {
        let g = dmatrix![0.0, 2.0, 1.0; 2.0, 0.0, 3.0; 1.0, 3.0, 0.0];
        let a = node_factors(&g);
        assert!(a.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        assert!(a.iter().all(|v| NodeRole::classify(*v) == NodeRole::Neutral));
    }

    #[test]
    fn asymmetric_pair() {
        let g = dmatrix![0.0, 2.0; 1.0, 0.0];
        let a = node_factors(&g);
        assert_eq!(a[0], 0.5);
        assert_eq!(a[1], 2.0);
        assert_eq!(NodeRole::classify(a[0]), NodeRole::Absorber);
        assert_eq!(NodeRole::classify(a[1]), NodeRole::Amplifier);
    }

    #[test]
    fn larger_inflow_than_outflow_amplifies() {
        // column sums exceed row sums for market 0
        let g = dmatrix![0.0, 1.0, 1.0; 3.0, 0.0, 1.0; 3.0, 1.0, 0.0];
        let roles: Vec<_> = node_factors(&g).iter().map(|a| NodeRole::classify(*a)).collect();
        assert_eq!(roles[0], NodeRole::Amplifier);
        assert_eq!(roles[1], NodeRole::Absorber);
    }

    #[test]
    fn isolated_node_gets_zero() {
        let g = dmatrix![0.0, 1.0; 0.0, 0.0];
        let a = node_factors(&g);
        assert_eq!(a[1], 0.0);
        let u = distribution_matrix(&g, UDenominator::Outflow);
        assert!(u.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn distribution_rows() {
        let g = dmatrix![9.0, 1.0, 1.0, 1.0; 1.0, 0.0, 1.0, 1.0; 0.0, 0.0, 0.0, 0.0; 0.0, 0.0, 0.0, 0.0];
        let u = distribution_matrix(&g, UDenominator::Outflow);
        assert!(u.row(0).iter().skip(1).all(|v| (*v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(u[(0, 0)], 0.0);

        let g = dmatrix![0.0, 2.0, 1.0, 1.0; 1.0, 0.0, 0.0, 0.0; 1.0, 0.0, 0.0, 0.0; 1.0, 0.0, 0.0, 0.0];
        let u = distribution_matrix(&g, UDenominator::Outflow);
        assert_eq!(u.row(0).iter().copied().collect::<Vec<_>>(), [0.0, 0.5, 0.25, 0.25]);

        // the literal reading divides by inflow instead
        let u = distribution_matrix(&g, UDenominator::Inflow);
        assert_eq!(u[(0, 1)], 2.0 / 3.0);
    }

    #[test]
    fn flow_weights_cancel() {
        let g = dmatrix![0.0, 1.5, 0.2; 0.5, 0.0, 0.7; 0.3, 0.9, 0.0];
        let e = edge_factors(&g, &g);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(e[(i, j)], 1.0);
                }
            }
        }
    }

    #[test]
    fn two_by_two_edge_factors() {
        let p = dmatrix![1.0, 0.5; 0.25, 1.0];
        let g = dmatrix![0.0, 1.5; 0.5, 0.0];
        let e = edge_factors(&p, &g);
        assert_eq!(e[(1, 0)], 1.0);
        assert_eq!(e[(0, 1)], 1.0);
    }

    /// Edge factor computed from the bracketed inflow/outflow form.
    fn edge_oracle(w: &DMatrix<f64>, g: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        let n = w.nrows();
        let off = |f: &dyn Fn(usize) -> f64, skip: usize| -> f64 {
            (0..n).filter(|&k| k != skip).map(f).sum()
        };
        let w_row_i = off(&|k| w[(i, k)], i);
        let w_col_j = off(&|k| w[(k, j)], j);
        let g_row_i = off(&|k| g[(i, k)], i);
        let g_col_j = off(&|k| g[(k, j)], j);
        let edge_in = (w[(i, j)] / w_row_i) * g_row_i;
        let edge_out = (w[(i, j)] / w_col_j) * g_col_j;
        edge_in / edge_out
    }

    #[test]
    fn asymmetric_edge_factors_match_bracketed_form() {
        let p = dmatrix![1.0, 0.4, 0.1; 0.7, 1.0, 0.3; 0.2, 0.6, 1.0];
        let net = test_net(p);
        let w = weights(&net, WeightKind::Probability);
        let e = edge_factors(&w, &net.flow);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let oracle = edge_oracle(&w, &net.flow, i, j);
                    assert!((e[(j, i)] - oracle).abs() < 1e-12 * oracle, "{i}->{j}");
                }
            }
        }
        // reciprocal distance reproduces the probability weights
        let e_inv = edge_factors(&weights(&net, WeightKind::InverseDistance), &net.flow);
        assert!((e - e_inv).abs().max() < 1e-12);
    }

    #[test]
    fn assemble_examples() {
        let e = DMatrix::from_element(2, 2, 1.0);
        let u = dmatrix![0.0, 1.0; 1.0, 0.0];
        let t = assemble(&DVector::from_vec(vec![1.0, 1.0]), &u, &e).unwrap();
        assert_eq!(t, dmatrix![0.0, 1.0; 1.0, 0.0]);
        let t = assemble(&DVector::from_vec(vec![0.5, 2.0]), &u, &e).unwrap();
        assert_eq!(t, dmatrix![0.0, 2.0; 0.5, 0.0]);
        assert!(matches!(
            assemble(&DVector::from_vec(vec![1.0]), &u, &e),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn shock_trajectories() {
        let t = dmatrix![0.5, 0.0; 0.0, 0.5];
        let s0 = DVector::from_vec(vec![1.0, 1.0]);
        let tr = simulate_shock(&t, &s0, 5).unwrap();
        for k in 1..tr.norms.len() {
            assert_eq!(tr.norms[k], tr.norms[k - 1] / 2.0);
        }

        let t = dmatrix![1e100, 0.0; 0.0, 1.0];
        let tr = simulate_shock(&t, &s0, 10).unwrap();
        assert!(tr.explosive);
        assert!(tr.norms.len() < 11);

        assert!(simulate_shock(&t, &DVector::from_vec(vec![-1.0, 0.0]), 3).is_err());
    }

    fn random_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(0.0f64..1.0, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
    }

    proptest! {
        #[test]
        fn assemble_matches_loops(
            u in random_matrix(6),
            e in random_matrix(6),
            node in proptest::collection::vec(0.0f64..3.0, 6),
        ) {
            let node = DVector::from_vec(node);
            let t = assemble(&node, &u, &e).unwrap();
            // (Uᵀ N) first, then the elementwise product
            let mut ut_n = DMatrix::zeros(6, 6);
            for i in 0..6 {
                for j in 0..6 {
                    let mut acc = 0.0;
                    for k in 0..6 {
                        let n_kj = if k == j { node[j] } else { 0.0 };
                        acc += u[(k, i)] * n_kj;
                    }
                    ut_n[(i, j)] = acc;
                }
            }
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert_eq!(t[(i, j)], e[(i, j)] * ut_n[(i, j)]);
                }
            }
        }

        #[test]
        fn model_invariants(p_off in proptest::collection::vec(0.0f64..1.0, 20), scale in 0.1f64..5.0) {
            let mut p = DMatrix::identity(5, 5);
            let mut it = p_off.into_iter();
            for i in 0..5 {
                for j in 0..5 {
                    if i != j {
                        p[(i, j)] = it.next().unwrap();
                    }
                }
            }
            let net = test_net(p);
            let cfg = ModelConfig::default();
            let model = TransmissionModel::from_network(&net, &cfg).unwrap();
            for i in 0..5 {
                let row: f64 = model.distribution.row(i).sum();
                prop_assert!(row == 0.0 || (row - 1.0).abs() < 1e-12);
                prop_assert_eq!(model.distribution[(i, i)], 0.0);
            }
            prop_assert!(model.transmission.iter().all(|v| *v >= 0.0));
            prop_assert!(model.lambda >= 0.0);
            let dense = dense_spectral_radius(&model.transmission).unwrap();
            prop_assert!((model.lambda - dense).abs() < 1e-7 * dense.max(1.0));

            // lambda is linear in the node factors
            let scaled = TransmissionModel::from_factors(
                model.markets.clone(),
                &model.node * scale,
                model.distribution.clone(),
                model.edge.clone(),
                cfg.w_kind,
                &cfg.eigen,
            ).unwrap();
            prop_assert!((scaled.lambda - scale * model.lambda).abs() < 1e-8 * scaled.lambda.max(1.0));

            // flow weights make every edge factor on the support equal to one
            let flow_model = TransmissionModel::from_network(
                &net,
                &ModelConfig { w_kind: WeightKind::Flow, ..cfg },
            ).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    if i != j && net.flow[(j, i)] > 0.0 {
                        prop_assert_eq!(flow_model.edge[(i, j)], 1.0);
                    }
                }
            }
        }
    }
}
