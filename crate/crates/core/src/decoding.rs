//! Per-locus status calls from variational posteriors.
//!
//! Two rules: the local MAP (`argmax_r τ_it^r`, per cell) and a Viterbi
//! recursion on each individual's corrected chain, whose transition weights
//! are `p_itqr ∝ π_{q,r} h_it^r` (up to a per-locus constant) with the
//! smoothed first-locus marginal as initial law. All scores live in log
//! space with per-step max normalization; ties break toward the lower state
//! index.

use ndarray::{Array1, Array2, Array3};

use crate::model::ChainParams;
use crate::variational::VariationalState;

/// Decoded calls plus the posterior marginals they came from.
#[derive(Debug, Clone)]
pub struct CallSet {
    pub local_map: Array2<usize>,
    pub viterbi_path: Array2<usize>,
    pub tau: Array3<f64>,
}

/// Per-cell most probable state; ties go to the lower index.
pub fn local_map(tau: &Array3<f64>) -> Array2<usize> {
    let (n_ind, n_loci, q) = tau.dim();
    Array2::from_shape_fn((n_ind, n_loci), |(i, t)| {
        let mut best = 0;
        for r in 1..q {
            if tau[(i, t, r)] > tau[(i, t, best)] {
                best = r;
            }
        }
        best
    })
}

/// Viterbi decoding of every individual's corrected chain: the most probable
/// path under `P̃`, whose transition weights are `π_{q,r} h_it^r` up to a
/// per-locus constant. Scores are normalized by their max at each step, which
/// shifts every candidate path equally and leaves the argmax intact.
pub fn viterbi_variational(state: &VariationalState, chain: &ChainParams) -> Array2<usize> {
    let (n_ind, n_loci, q) = state.tau().dim();
    let log_pi = chain.transition().mapv(f64::ln);
    let mut paths = Array2::zeros((n_ind, n_loci));

    let mut score = Array1::zeros(q);
    let mut next = Array1::zeros(q);
    for i in 0..n_ind {
        let mut backptr = Array2::zeros((n_loci, q));
        for r in 0..q {
            score[r] = state.tau()[(i, 0, r)].ln();
        }
        for t in 1..n_loci {
            for r in 0..q {
                let mut best_from = 0;
                let mut best = f64::NEG_INFINITY;
                for from in 0..q {
                    let cand = score[from] + log_pi[(from, r)];
                    if cand > best {
                        best = cand;
                        best_from = from;
                    }
                }
                next[r] = best + state.log_h()[(i, t, r)];
                backptr[(t, r)] = best_from;
            }
            let max = next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..q {
                score[r] = next[r] - max;
            }
        }
        let mut best = 0;
        for r in 1..q {
            if score[r] > score[best] {
                best = r;
            }
        }
        paths[(i, n_loci - 1)] = best;
        for t in (0..n_loci - 1).rev() {
            best = backptr[(t + 1, best)];
            paths[(i, t)] = best;
        }
    }
    paths
}

/// Run both decoders and keep the marginals alongside.
pub fn decode_callset(state: &VariationalState, chain: &ChainParams) -> CallSet {
    CallSet {
        local_map: local_map(state.tau()),
        viterbi_path: viterbi_variational(state, chain),
        tau: state.tau().clone(),
    }
}
