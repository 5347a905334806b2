//! Model selection: number of states by penalized lower bound, coupling
//! strength by a weighted residual-sum-of-squares grid search.

use ndarray::Array3;
use rayon::prelude::*;

use crate::error::{ChmmError, Result};
use crate::model::{
    initial_params, CouplingParams, EmissionMode, ModelParams, ObservationMatrix,
    SimilarityMatrix,
};
use crate::variational::{fit_vem, VemOptions, VemReport};

/// Candidate grids. The default coupling grid is `log ω = −k/20`,
/// `k = 1..10`, stored ascending.
#[derive(Debug, Clone)]
pub struct SelectionGrid {
    pub q_candidates: Vec<usize>,
    pub log_omega_grid: Vec<f64>,
}

impl SelectionGrid {
    pub fn default_log_omega_grid() -> Vec<f64> {
        (1..=10).rev().map(|k| -(k as f64) / 20.0).collect()
    }

    pub fn for_states(q_candidates: Vec<usize>) -> Result<Self> {
        if q_candidates.is_empty() {
            return Err(ChmmError::Input("state grid is empty".into()));
        }
        if q_candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ChmmError::Input("state grid must be strictly ascending".into()));
        }
        if q_candidates.contains(&0) {
            return Err(ChmmError::Input("state candidates must be positive".into()));
        }
        Ok(Self {
            q_candidates,
            log_omega_grid: Self::default_log_omega_grid(),
        })
    }

    pub fn for_omegas(log_omega_grid: Vec<f64>) -> Result<Self> {
        if log_omega_grid.is_empty() {
            return Err(ChmmError::Input("coupling grid is empty".into()));
        }
        if log_omega_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ChmmError::Input(
                "coupling grid must be strictly ascending".into(),
            ));
        }
        if log_omega_grid.iter().any(|&w| !w.is_finite() || w > 0.0) {
            return Err(ChmmError::Input(
                "coupling grid values must be finite and ≤ 0".into(),
            ));
        }
        Ok(Self {
            q_candidates: Vec::new(),
            log_omega_grid,
        })
    }
}

/// One evaluated state-count candidate.
#[derive(Debug, Clone)]
pub struct QCandidate {
    pub n_states: usize,
    pub bound: f64,
    pub penalty: f64,
    pub criterion: f64,
    pub error: Option<String>,
}

/// One evaluated coupling candidate.
#[derive(Debug, Clone)]
pub struct OmegaCandidate {
    pub log_omega: f64,
    pub bound: f64,
    pub rss: f64,
    pub error: Option<String>,
}

/// Grid results plus the chosen values. A candidate that failed to fit is
/// recorded with its error and excluded from the optimum.
#[derive(Debug, Clone, Default)]
pub struct SelectionReport {
    pub q_candidates: Vec<QCandidate>,
    pub omega_candidates: Vec<OmegaCandidate>,
    pub chosen_q: Option<usize>,
    pub chosen_log_omega: Option<f64>,
}

/// Options shared by both selection procedures.
#[derive(Debug, Clone)]
pub struct SelectionOptions {
    pub fit: VemOptions,
    pub mode: EmissionMode,
    /// Count emission parameters and the initial law in the penalty too.
    pub full_penalty: bool,
    /// Reuse each fit's parameters to initialize the next coupling candidate.
    /// Cold starts fit candidates independently (and in parallel).
    pub warm_start: bool,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            fit: VemOptions::default(),
            mode: EmissionMode::Heteroscedastic,
            full_penalty: false,
            warm_start: true,
        }
    }
}

/// `pen = [1 + Q(Q−1)] · log(I·T) / 2`: one coupling parameter plus the free
/// transition entries.
pub fn bic_penalty(n_states: usize, n_individuals: usize, n_loci: usize) -> f64 {
    let d = 1 + n_states * (n_states - 1);
    d as f64 * ((n_individuals * n_loci) as f64).ln() / 2.0
}

/// Alternative penalty that also counts means, variances and the initial law.
pub fn full_penalty(
    n_states: usize,
    n_individuals: usize,
    n_loci: usize,
    mode: EmissionMode,
) -> f64 {
    let sigma_params = match mode {
        EmissionMode::Homoscedastic => 1,
        EmissionMode::Heteroscedastic => n_states,
    };
    let d = 1 + n_states * (n_states - 1) + (n_states - 1) + n_states + sigma_params;
    d as f64 * ((n_individuals * n_loci) as f64).ln() / 2.0
}

/// Weighted residual sum of squares `Σ_{i,t,r} τ_it^r (x_it − μ_r)²`.
/// Missing cells contribute nothing.
pub fn rss_omega(tau: &Array3<f64>, x: &ObservationMatrix, means: &[f64]) -> f64 {
    let (n_ind, n_loci, q) = tau.dim();
    assert_eq!(n_ind, x.n_individuals());
    assert_eq!(n_loci, x.n_loci());
    assert_eq!(q, means.len());
    let mut rss = 0.0;
    for i in 0..n_ind {
        for t in 0..n_loci {
            if let Some(v) = x.get(i, t) {
                for r in 0..q {
                    let d = v - means[r];
                    rss += tau[(i, t, r)] * d * d;
                }
            }
        }
    }
    rss
}

fn fit_candidate_q(
    x: &ObservationMatrix,
    similarity: &SimilarityMatrix,
    coupling: CouplingParams,
    n_states: usize,
    opts: &SelectionOptions,
) -> Result<VemReport> {
    let init = initial_params(x, n_states, opts.mode, similarity.clone(), coupling)?;
    fit_vem(x, &init, &opts.fit)
}

/// Choose the number of states: fit each candidate, penalize its maximized
/// lower bound, take the argmax. Ties go to the smaller candidate.
pub fn select_q(
    x: &ObservationMatrix,
    similarity: &SimilarityMatrix,
    coupling: CouplingParams,
    grid: &SelectionGrid,
    opts: &SelectionOptions,
) -> Result<SelectionReport> {
    if grid.q_candidates.is_empty() {
        return Err(ChmmError::Input("state grid is empty".into()));
    }
    let candidates: Vec<QCandidate> = grid
        .q_candidates
        .par_iter()
        .map(|&q| {
            let penalty = if opts.full_penalty {
                full_penalty(q, x.n_individuals(), x.n_loci(), opts.mode)
            } else {
                bic_penalty(q, x.n_individuals(), x.n_loci())
            };
            match fit_candidate_q(x, similarity, coupling, q, opts) {
                Ok(report) => {
                    let bound = *report.bound_trace.last().unwrap();
                    QCandidate {
                        n_states: q,
                        bound,
                        penalty,
                        criterion: bound - penalty,
                        error: None,
                    }
                }
                Err(e) => QCandidate {
                    n_states: q,
                    bound: f64::NAN,
                    penalty,
                    criterion: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut chosen: Option<(usize, f64)> = None;
    for c in &candidates {
        if c.error.is_none() {
            let better = match chosen {
                None => true,
                Some((_, best)) => c.criterion > best,
            };
            if better {
                chosen = Some((c.n_states, c.criterion));
            }
        }
    }
    Ok(SelectionReport {
        q_candidates: candidates,
        chosen_q: chosen.map(|(q, _)| q),
        ..Default::default()
    })
}

/// Calibrate the coupling strength: fit each grid value, keep the one with
/// minimal weighted RSS at convergence. Ties go to the larger (weaker)
/// `log ω`.
pub fn select_omega(
    x: &ObservationMatrix,
    similarity: &SimilarityMatrix,
    n_states: usize,
    grid: &SelectionGrid,
    opts: &SelectionOptions,
) -> Result<SelectionReport> {
    if grid.log_omega_grid.is_empty() {
        return Err(ChmmError::Input("coupling grid is empty".into()));
    }

    let evaluate = |report: &VemReport, log_omega: f64| -> OmegaCandidate {
        OmegaCandidate {
            log_omega,
            bound: *report.bound_trace.last().unwrap(),
            rss: rss_omega(report.state.tau(), x, report.params.emission().means()),
            error: None,
        }
    };
    let failed = |log_omega: f64, e: &ChmmError| OmegaCandidate {
        log_omega,
        bound: f64::NAN,
        rss: f64::NAN,
        error: Some(e.to_string()),
    };

    let candidates: Vec<OmegaCandidate> = if opts.warm_start {
        // walk the grid from the weakest coupling so the carried parameters
        // come from the best-identified fit
        let mut out = Vec::with_capacity(grid.log_omega_grid.len());
        let mut carry: Option<ModelParams> = None;
        for &w in grid.log_omega_grid.iter().rev() {
            let coupling = CouplingParams::new(w)?;
            let init = match &carry {
                Some(p) => Ok(p.with_coupling(coupling)),
                None => initial_params(x, n_states, opts.mode, similarity.clone(), coupling),
            };
            let result = init.and_then(|init| fit_vem(x, &init, &opts.fit));
            match result {
                Ok(report) => {
                    out.push(evaluate(&report, w));
                    carry = Some(report.params);
                }
                Err(e) => out.push(failed(w, &e)),
            }
        }
        out.reverse();
        out
    } else {
        grid.log_omega_grid
            .par_iter()
            .map(|&w| {
                let result = CouplingParams::new(w)
                    .and_then(|c| initial_params(x, n_states, opts.mode, similarity.clone(), c))
                    .and_then(|init| fit_vem(x, &init, &opts.fit));
                match result {
                    Ok(report) => evaluate(&report, w),
                    Err(e) => failed(w, &e),
                }
            })
            .collect()
    };

    let mut chosen: Option<(f64, f64)> = None;
    for c in &candidates {
        if c.error.is_none() {
            let better = match chosen {
                None => true,
                // ties resolve to the later (larger) grid value
                Some((_, best)) => c.rss <= best,
            };
            if better {
                chosen = Some((c.log_omega, c.rss));
            }
        }
    }
    Ok(SelectionReport {
        omega_candidates: candidates,
        chosen_log_omega: chosen.map(|(w, _)| w),
        ..Default::default()
    })
}
