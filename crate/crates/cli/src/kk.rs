//! The Krackhardt kite benchmark network: ten identical balance sheets on
//! a topology that mixes central nodes (4), bridges (8, 9) and a
//! peripheral tail node (10).

use bailout_core::network::{calibrate_sigma, BankNode, FinancialNetwork};
use nalgebra::DMatrix;

/// Undirected kite edges over nodes 1..=10; exposures carry weight 1 in
/// both directions of each edge.
pub const KK_EDGES: [(usize, usize); 18] = [
    (1, 2),
    (1, 3),
    (1, 4),
    (1, 6),
    (2, 4),
    (2, 5),
    (2, 7),
    (3, 4),
    (3, 6),
    (4, 5),
    (4, 6),
    (4, 7),
    (5, 7),
    (6, 7),
    (6, 8),
    (7, 8),
    (8, 9),
    (9, 10),
];

const KK_ASSETS: f64 = 100.0;
const KK_EQUITY: f64 = 3.0;
const KK_PD_RISKY: f64 = 0.01;
const KK_PD_SAFE: f64 = 0.001;
const KK_PD_FLOOR: f64 = 0.00021;
const KK_RHO: f64 = 0.5;

/// Builds the ten-node kite: W = 100, E = 3, μ = 0, LGD = 1 everywhere,
/// PD(0) = 0.01 for nodes 4, 8, 10 and 0.001 otherwise, homogeneous
/// latent correlation 0.5. α starts at 0 and is set by the experiment
/// sweep. `fully_connected` replaces the kite exposures with w = 1 on
/// every ordered pair, for the reading where node position is ignored.
pub fn build_kk_network(fully_connected: bool) -> FinancialNetwork {
    let nodes = (1..=10)
        .map(|id| {
            let pd0 = if [4, 8, 10].contains(&id) { KK_PD_RISKY } else { KK_PD_SAFE };
            BankNode {
                id,
                label: id.to_string(),
                assets: KK_ASSETS,
                equity: KK_EQUITY,
                mu: 0.0,
                sigma: calibrate_sigma(KK_ASSETS, KK_EQUITY, 0.0, pd0)
                    .expect("kite books always calibrate"),
                lgd: 1.0,
                alpha: 0.0,
                gov_investment: 0.0,
                pd_floor: KK_PD_FLOOR,
                defaulted: false,
                forced_default: false,
            }
        })
        .collect();

    let mut exposure = DMatrix::zeros(10, 10);
    if fully_connected {
        exposure.fill(1.0);
        exposure.fill_diagonal(0.0);
    } else {
        for &(a, b) in &KK_EDGES {
            exposure[(a - 1, b - 1)] = 1.0;
            exposure[(b - 1, a - 1)] = 1.0;
        }
    }

    let mut correlation = DMatrix::from_element(10, 10, KK_RHO);
    correlation.fill_diagonal(1.0);

    FinancialNetwork::new(nodes, exposure, correlation).expect("kite network is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_pds_round_trip_through_calibration() {
        let net = build_kk_network(false);
        for node in net.nodes() {
            let want = if [4, 8, 10].contains(&node.id) { 0.01 } else { 0.001 };
            assert!(
                (node.default_prob() - want).abs() < 1e-12,
                "node {}: pd {}",
                node.id,
                node.default_prob()
            );
            assert_eq!(node.pd_floor, 0.00021);
            assert_eq!(node.assets, 100.0);
            assert_eq!(node.equity, 3.0);
            assert_eq!(node.lgd, 1.0);
        }
    }

    #[test]
    fn kite_adjacency_is_symmetric_with_the_right_degrees() {
        let net = build_kk_network(false);
        let exp = net.exposure();
        let nonzero = exp.iter().filter(|&&w| w != 0.0).count();
        assert_eq!(nonzero, 36);
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(exp[(i, j)], exp[(j, i)]);
            }
        }
        let degree = |id: usize| (0..10).filter(|&j| exp[(id - 1, j)] == 1.0).count();
        assert_eq!(degree(4), 6);
        assert_eq!(degree(10), 1);
        assert_eq!(net.exposure_between(10, 9), 1.0);
        assert_eq!(net.exposure_between(10, 4), 0.0);
    }

    #[test]
    fn correlation_is_homogeneous_half() {
        let net = build_kk_network(false);
        assert_eq!(net.correlation()[(0, 1)], 0.5);
        assert_eq!(net.correlation()[(0, 0)], 1.0);
    }

    #[test]
    fn fully_connected_flag_saturates_the_exposures() {
        let net = build_kk_network(true);
        let nonzero = net.exposure().iter().filter(|&&w| w == 1.0).count();
        assert_eq!(nonzero, 90);
    }
}
