//! Structured mean-field variational EM.
//!
//! The approximating family is a product of independent heterogeneous Markov
//! chains, one per individual, sharing the model's `(m, π)` but corrected by
//! per-cell variational factors `h_it^r`. A VE sweep is a fixed-point pass:
//! the coupling field `log Ω_it^r = [Σ_{j≠i} s_ij (1 − τ_jt^r)] · log ω` is
//! computed from the current marginals of *all* chains at once, the optimal
//! correction `h_it^r = Ω_it^r φ_r(X_it)` follows, and every chain reruns its
//! own forward-backward recursion against the new `h`. Chains are therefore
//! independent within a sweep and may run in parallel.
//!
//! The tracked objective is the evidence lower bound
//! `J = Σ_{i,t,r} τ_it^r [log φ_r(X_it) + log Ω_it^r − log h_it^r] + Σ_i log Z̃_i`,
//! which collapses to `Σ_i log Z̃_i` at a fixed point. With `log ω = 0` the
//! family contains the true posterior and the whole procedure reduces to
//! independent per-individual EM.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2};
use rayon::prelude::*;

use crate::error::{ChmmError, Result};
use crate::model::{
    canonical_state_permutation, log_emission_table, ChainParams, CouplingParams, EmissionMode,
    EmissionParams, ModelParams, ObservationMatrix, SimilarityMatrix,
};

/// Marginals, pairwise moments and normalizers of the variational chains.
///
/// `delta` is stored so that the slice at position `t ≥ 1` carries the pair
/// moments for loci `(t−1, t)`; the slice at `t = 0` is zero.
#[derive(Debug, Clone)]
pub struct VariationalState {
    tau: Array3<f64>,
    delta: Array4<f64>,
    log_h: Array3<f64>,
    log_omega_field: Array3<f64>,
    log_z_tilde: Array1<f64>,
}

impl VariationalState {
    /// Fresh state with uniform marginals. The first sweep from here sees a
    /// constant coupling field, i.e. starts from the independent-chain
    /// E-step.
    pub fn uniform(n_individuals: usize, n_loci: usize, n_states: usize) -> Self {
        Self {
            tau: Array3::from_elem((n_individuals, n_loci, n_states), 1.0 / n_states as f64),
            delta: Array4::zeros((n_individuals, n_loci, n_states, n_states)),
            log_h: Array3::zeros((n_individuals, n_loci, n_states)),
            log_omega_field: Array3::zeros((n_individuals, n_loci, n_states)),
            log_z_tilde: Array1::zeros(n_individuals),
        }
    }

    /// Assemble a decode-ready state from externally supplied marginals and
    /// corrections; pair moments and normalizers are zeroed. The decoders
    /// only read `tau` and `log_h`.
    pub fn from_marginals(tau: Array3<f64>, log_h: Array3<f64>) -> Result<Self> {
        let (n_ind, n_loci, q) = tau.dim();
        if log_h.dim() != (n_ind, n_loci, q) {
            return Err(ChmmError::Input(format!(
                "marginals have shape {:?}, corrections {:?}",
                tau.dim(),
                log_h.dim()
            )));
        }
        Ok(Self {
            tau,
            delta: Array4::zeros((n_ind, n_loci, q, q)),
            log_omega_field: Array3::zeros((n_ind, n_loci, q)),
            log_h,
            log_z_tilde: Array1::zeros(n_ind),
        })
    }

    pub fn tau(&self) -> &Array3<f64> {
        &self.tau
    }

    pub fn delta(&self) -> &Array4<f64> {
        &self.delta
    }

    pub fn log_h(&self) -> &Array3<f64> {
        &self.log_h
    }

    pub fn log_omega_field(&self) -> &Array3<f64> {
        &self.log_omega_field
    }

    pub fn log_z_tilde(&self) -> &Array1<f64> {
        &self.log_z_tilde
    }

    pub fn n_individuals(&self) -> usize {
        self.tau.dim().0
    }

    pub fn n_loci(&self) -> usize {
        self.tau.dim().1
    }

    pub fn n_states(&self) -> usize {
        self.tau.dim().2
    }

    fn consistency_error(&self) -> Option<String> {
        let (n_ind, n_loci, q) = self.tau.dim();
        for i in 0..n_ind {
            for t in 0..n_loci {
                let sum: f64 = (0..q).map(|r| self.tau[(i, t, r)]).sum();
                if (sum - 1.0).abs() > 1e-8 {
                    return Some(format!("tau({i},{t},·) sums to {sum}"));
                }
                if t > 0 {
                    for r in 0..q {
                        let col: f64 = (0..q).map(|a| self.delta[(i, t, a, r)]).sum();
                        if (col - self.tau[(i, t, r)]).abs() > 1e-8 {
                            return Some(format!(
                                "delta({i},{t},·,{r}) sums to {col}, tau is {}",
                                self.tau[(i, t, r)]
                            ));
                        }
                    }
                }
            }
        }
        None
    }
}

/// Outcome of a VEM fit.
#[derive(Debug, Clone)]
pub struct VemReport {
    pub params: ModelParams,
    pub state: VariationalState,
    /// Lower-bound value after each iteration's VE step.
    pub bound_trace: Vec<f64>,
    pub n_iterations: usize,
    pub converged: bool,
}

/// Options for [`fit_vem`].
#[derive(Debug, Clone)]
pub struct VemOptions {
    pub max_iter: usize,
    /// Relative bound change below which the fit stops.
    pub tol: f64,
    /// Fixed-point sweeps per VE step.
    pub n_ve_sweeps: usize,
}

impl Default for VemOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            n_ve_sweeps: 3,
        }
    }
}

/// Coupling field `log Ω_it^r = [Σ_{j≠i} s_ij (1 − τ_jt^r)] · log ω`.
/// Every entry is ≤ 0.
pub fn update_log_omega_field(
    tau: &Array3<f64>,
    similarity: &SimilarityMatrix,
    coupling: &CouplingParams,
) -> Array3<f64> {
    let (n_ind, n_loci, q) = tau.dim();
    let mut field = Array3::zeros((n_ind, n_loci, q));
    let log_omega = coupling.log_omega();
    if log_omega == 0.0 {
        return field;
    }
    for i in 0..n_ind {
        for t in 0..n_loci {
            for r in 0..q {
                let mut weight = 0.0;
                for j in 0..n_ind {
                    if j != i {
                        weight += similarity.get(i, j) * (1.0 - tau[(j, t, r)]);
                    }
                }
                field[(i, t, r)] = weight * log_omega;
            }
        }
    }
    field
}

/// Optimal variational corrections, in log form:
/// `log h_it^r = log Ω_it^r + log φ_r(X_it)`.
pub fn update_variational_params(
    x: &ObservationMatrix,
    params: &ModelParams,
    log_omega_field: &Array3<f64>,
) -> Result<Array3<f64>> {
    let expected = (
        x.n_individuals(),
        x.n_loci(),
        params.emission().n_states(),
    );
    if log_omega_field.dim() != expected {
        return Err(ChmmError::Input(format!(
            "log omega field has shape {:?}, expected {:?}",
            log_omega_field.dim(),
            expected
        )));
    }
    let mut log_h = log_emission_table(x, params.emission());
    log_h += log_omega_field;
    Ok(log_h)
}

/// Posterior summary of one individual's heterogeneous chain.
#[derive(Debug, Clone)]
pub struct IndividualPosterior {
    /// `(T, Q)` smoothed marginals.
    pub tau: Array2<f64>,
    /// `(T, Q, Q)`; slice `t ≥ 1` couples loci `(t−1, t)`, slice 0 is zero.
    pub delta: Array3<f64>,
    /// Log normalizer of the corrected chain.
    pub log_z_tilde: f64,
}

/// Scaled forward-backward recursion for one corrected chain.
///
/// Forward: `F_1 ∝ m ∘ h_1`, `F_t ∝ (F_{t−1} π) ∘ h_t`. Backward is the
/// smoothing pass `G_{t+1}^r = Σ_q F_t^q π_{q,r}`,
/// `Δ^{qr} = π_{q,r} (τ_{t+1}^r / G_{t+1}^r) F_t^q`, `τ_t^q = Σ_r Δ^{qr}`;
/// per-step scale factors accumulate into `log Z̃`.
pub fn individual_forward_backward(
    individual: usize,
    log_h: ArrayView2<'_, f64>,
    chain: &ChainParams,
) -> Result<IndividualPosterior> {
    let (n_loci, q) = log_h.dim();
    if q != chain.n_states() || n_loci == 0 {
        return Err(ChmmError::Input(format!(
            "log_h slice for individual {individual} has shape {:?}, chain has Q = {}",
            log_h.dim(),
            chain.n_states()
        )));
    }
    let m = chain.initial();
    let pi = chain.transition();

    // scaled corrections: exp(log_h - rowmax) ∈ (0, 1]
    let mut h = Array2::zeros((n_loci, q));
    let mut shift_sum = 0.0;
    for t in 0..n_loci {
        let row = log_h.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(ChmmError::Numerical(format!(
                "no finite correction at individual {individual}, locus {t}"
            )));
        }
        shift_sum += max;
        for r in 0..q {
            h[(t, r)] = (log_h[(t, r)] - max).exp();
        }
    }

    let mut fwd = Array2::zeros((n_loci, q));
    let mut log_scale_sum = 0.0;
    for r in 0..q {
        fwd[(0, r)] = m[r] * h[(0, r)];
    }
    for t in 0..n_loci {
        if t > 0 {
            for r in 0..q {
                let mut acc = 0.0;
                for a in 0..q {
                    acc += fwd[(t - 1, a)] * pi[(a, r)];
                }
                fwd[(t, r)] = acc * h[(t, r)];
            }
        }
        let c: f64 = fwd.row(t).sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(ChmmError::Numerical(format!(
                "forward scale is {c} at individual {individual}, locus {t}"
            )));
        }
        log_scale_sum += c.ln();
        for r in 0..q {
            fwd[(t, r)] /= c;
        }
    }
    let log_z_tilde = log_scale_sum + shift_sum;

    let mut tau = Array2::zeros((n_loci, q));
    let mut delta = Array3::zeros((n_loci, q, q));
    tau.row_mut(n_loci - 1).assign(&fwd.row(n_loci - 1));
    for t in (0..n_loci - 1).rev() {
        for r in 0..q {
            let mut g = 0.0;
            for a in 0..q {
                g += fwd[(t, a)] * pi[(a, r)];
            }
            let tau_next = tau[(t + 1, r)];
            if g == 0.0 {
                if tau_next > 0.0 {
                    return Err(ChmmError::Numerical(format!(
                        "zero predictive mass with tau = {tau_next} at individual \
                         {individual}, locus {}, state {r}",
                        t + 1
                    )));
                }
                continue;
            }
            let ratio = tau_next / g;
            for a in 0..q {
                delta[(t + 1, a, r)] = pi[(a, r)] * ratio * fwd[(t, a)];
            }
        }
        for a in 0..q {
            tau[(t, a)] = (0..q).map(|r| delta[(t + 1, a, r)]).sum();
        }
    }

    Ok(IndividualPosterior {
        tau,
        delta,
        log_z_tilde,
    })
}

fn sweep_with_emissions(
    log_emissions: &Array3<f64>,
    params: &ModelParams,
    state: &mut VariationalState,
) -> Result<()> {
    let field = update_log_omega_field(&state.tau, params.similarity(), params.coupling());
    let log_h = &field + log_emissions;
    let n_ind = state.n_individuals();
    let posteriors: Result<Vec<IndividualPosterior>> = (0..n_ind)
        .into_par_iter()
        .map(|i| individual_forward_backward(i, log_h.slice(s![i, .., ..]), params.chain()))
        .collect();
    let posteriors = posteriors?;
    for (i, post) in posteriors.into_iter().enumerate() {
        state.tau.slice_mut(s![i, .., ..]).assign(&post.tau);
        state.delta.slice_mut(s![i, .., .., ..]).assign(&post.delta);
        state.log_z_tilde[i] = post.log_z_tilde;
    }
    state.log_omega_field = field;
    state.log_h = log_h;
    Ok(())
}

/// One full VE sweep: coupling field from the current marginals, corrections,
/// then every chain's forward-backward (parallel over individuals).
pub fn ve_sweep(
    x: &ObservationMatrix,
    params: &ModelParams,
    state: &mut VariationalState,
) -> Result<()> {
    check_shapes(x, params, state)?;
    let log_emissions = log_emission_table(x, params.emission());
    sweep_with_emissions(&log_emissions, params, state)
}

fn check_shapes(
    x: &ObservationMatrix,
    params: &ModelParams,
    state: &VariationalState,
) -> Result<()> {
    let expected = (
        x.n_individuals(),
        x.n_loci(),
        params.emission().n_states(),
    );
    if state.tau.dim() != expected {
        return Err(ChmmError::Input(format!(
            "variational state has shape {:?}, expected {:?}",
            state.tau.dim(),
            expected
        )));
    }
    if params.dims().n_individuals() != x.n_individuals() {
        return Err(ChmmError::Input(
            "individual count mismatch between observations and parameters".into(),
        ));
    }
    Ok(())
}

fn bound_with_emissions(
    log_emissions: &Array3<f64>,
    params: &ModelParams,
    state: &VariationalState,
) -> Result<f64> {
    if let Some(msg) = state.consistency_error() {
        return Err(ChmmError::Invariant(format!(
            "variational state inconsistent: {msg}"
        )));
    }
    let field = update_log_omega_field(&state.tau, params.similarity(), params.coupling());
    let (n_ind, n_loci, q) = state.tau.dim();
    let mut j = state.log_z_tilde.sum();
    for i in 0..n_ind {
        for t in 0..n_loci {
            for r in 0..q {
                let tau = state.tau[(i, t, r)];
                if tau > 0.0 {
                    j += tau
                        * (log_emissions[(i, t, r)] + field[(i, t, r)]
                            - state.log_h[(i, t, r)]);
                }
            }
        }
    }
    Ok(j)
}

/// Evidence lower bound of the current state. The `−log Z` of the
/// unnormalized joint reading is a reported constant (zero) under the
/// row-normalized chain, so with corrections from the fixed point the value
/// collapses to `Σ_i log Z̃_i`.
pub fn evaluate_bound(
    x: &ObservationMatrix,
    params: &ModelParams,
    state: &VariationalState,
) -> Result<f64> {
    check_shapes(x, params, state)?;
    let log_emissions = log_emission_table(x, params.emission());
    bound_with_emissions(&log_emissions, params, state)
}

/// Variational E-step at fixed parameters: a fresh state swept `n_sweeps`
/// times, exactly as one VE step inside [`fit_vem`]. Decoding a fitted model
/// through this reproduces the fit pipeline's final state bit for bit.
pub fn run_ve(
    x: &ObservationMatrix,
    params: &ModelParams,
    n_sweeps: usize,
) -> Result<VariationalState> {
    let mut state = VariationalState::uniform(
        x.n_individuals(),
        x.n_loci(),
        params.emission().n_states(),
    );
    check_shapes(x, params, &state)?;
    let log_emissions = log_emission_table(x, params.emission());
    for _ in 0..n_sweeps.max(1) {
        sweep_with_emissions(&log_emissions, params, &mut state)?;
    }
    Ok(state)
}

/// Variational E-step at fixed parameters: sweep until the marginals are
/// stable in sup norm (or `max_sweeps` is reached).
pub fn run_ve_to_convergence(
    x: &ObservationMatrix,
    params: &ModelParams,
    max_sweeps: usize,
    tol: f64,
) -> Result<VariationalState> {
    let mut state = VariationalState::uniform(
        x.n_individuals(),
        x.n_loci(),
        params.emission().n_states(),
    );
    check_shapes(x, params, &state)?;
    let log_emissions = log_emission_table(x, params.emission());
    let mut prev = state.tau.clone();
    for sweep in 0..max_sweeps.max(1) {
        sweep_with_emissions(&log_emissions, params, &mut state)?;
        let change = state
            .tau
            .iter()
            .zip(prev.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if sweep > 0 && change < tol {
            break;
        }
        prev.assign(&state.tau);
    }
    Ok(state)
}

/// M-step output: refreshed parameters plus the state relabeling applied to
/// keep emission means ascending, when one was needed.
#[derive(Debug, Clone)]
pub struct MStepUpdate {
    pub params: ModelParams,
    pub relabeling: Option<Vec<usize>>,
}

/// Closed-form M-step: weighted-moment emission updates, transition rows
/// proportional to summed pair moments, initial law from the first-locus
/// marginals. `ω` is fixed input and never re-estimated here.
pub fn m_step(
    x: &ObservationMatrix,
    state: &VariationalState,
    current: &ModelParams,
) -> Result<MStepUpdate> {
    check_shapes(x, current, state)?;
    let (n_ind, n_loci, q) = state.tau.dim();

    let mut mass = vec![0.0; q];
    let mut mean_num = vec![0.0; q];
    for i in 0..n_ind {
        for t in 0..n_loci {
            if let Some(v) = x.get(i, t) {
                for r in 0..q {
                    let w = state.tau[(i, t, r)];
                    mass[r] += w;
                    mean_num[r] += w * v;
                }
            }
        }
    }
    for (r, &m) in mass.iter().enumerate() {
        if m < 1e-8 {
            return Err(ChmmError::DegenerateState {
                state: r,
                detail: format!("posterior mass {m} below 1e-8 in M-step"),
            });
        }
    }
    let means: Vec<f64> = (0..q).map(|r| mean_num[r] / mass[r]).collect();

    let mut var_num = vec![0.0; q];
    for i in 0..n_ind {
        for t in 0..n_loci {
            if let Some(v) = x.get(i, t) {
                for r in 0..q {
                    let d = v - means[r];
                    var_num[r] += state.tau[(i, t, r)] * d * d;
                }
            }
        }
    }
    let std_devs: Vec<f64> = match current.emission().mode() {
        EmissionMode::Heteroscedastic => (0..q)
            .map(|r| (var_num[r] / mass[r]).sqrt().max(1e-9))
            .collect(),
        EmissionMode::Homoscedastic => {
            let pooled =
                (var_num.iter().sum::<f64>() / mass.iter().sum::<f64>()).sqrt().max(1e-9);
            vec![pooled; q]
        }
    };

    let mut pi = Array2::zeros((q, q));
    for a in 0..q {
        let mut row = vec![0.0; q];
        for i in 0..n_ind {
            for t in 1..n_loci {
                for b in 0..q {
                    row[b] += state.delta[(i, t, a, b)];
                }
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for b in 0..q {
                pi[(a, b)] = row[b] / total;
            }
        } else {
            // no transition mass out of this state; keep the current row
            for b in 0..q {
                pi[(a, b)] = current.chain().transition()[(a, b)];
            }
        }
    }

    let mut m0 = vec![0.0; q];
    for i in 0..n_ind {
        for r in 0..q {
            m0[r] += state.tau[(i, 0, r)];
        }
    }
    let total: f64 = m0.iter().sum();
    for v in m0.iter_mut() {
        *v /= total;
    }

    let relabeling = canonical_state_permutation(&means);
    let (means, std_devs, m0, pi) = match &relabeling {
        None => (means, std_devs, m0, pi),
        Some(perm) => {
            let means_p: Vec<f64> = perm.iter().map(|&o| means[o]).collect();
            let stds_p: Vec<f64> = perm.iter().map(|&o| std_devs[o]).collect();
            let m_p: Vec<f64> = perm.iter().map(|&o| m0[o]).collect();
            let pi_p = Array2::from_shape_fn((q, q), |(a, b)| pi[(perm[a], perm[b])]);
            (means_p, stds_p, m_p, pi_p)
        }
    };

    let emission = EmissionParams::new(means, std_devs, current.emission().mode())?;
    let chain = ChainParams::new(Array1::from_vec(m0), pi)?;
    Ok(MStepUpdate {
        params: current.with_emission_and_chain(emission, chain)?,
        relabeling,
    })
}

/// Variational EM. With `log ω = 0` this is exactly the independent-chains
/// baseline (shared emission parameters, per-individual exact E-steps).
///
/// Each VE step starts from a fresh uniform state: its first sweep is the
/// independent-chain E-step, with the remaining sweeps folding in the
/// coupling field. Carrying the marginals across M-steps instead lets the
/// agreement field feed back on itself until whole windows are absorbed into
/// the majority state, which drags the fit below the independent baseline.
pub fn fit_vem(
    x: &ObservationMatrix,
    init: &ModelParams,
    opts: &VemOptions,
) -> Result<VemReport> {
    let mut params = init.clone();
    let mut state = VariationalState::uniform(
        x.n_individuals(),
        x.n_loci(),
        params.emission().n_states(),
    );
    check_shapes(x, &params, &state)?;

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let log_emissions = log_emission_table(x, params.emission());
        state = VariationalState::uniform(
            x.n_individuals(),
            x.n_loci(),
            params.emission().n_states(),
        );
        for _ in 0..opts.n_ve_sweeps.max(1) {
            sweep_with_emissions(&log_emissions, &params, &mut state)?;
        }
        let bound = bound_with_emissions(&log_emissions, &params, &state)?;
        if let Some(&prev) = trace.last() {
            trace.push(bound);
            if (bound - prev).abs() <= opts.tol * (1.0 + prev.abs()) {
                converged = true;
                break;
            }
        } else {
            trace.push(bound);
        }
        let update = m_step(x, &state, &params)?;
        params = update.params;
    }

    if !converged {
        // the loop ended on an M-step; refresh the state so it matches the
        // returned parameters
        let log_emissions = log_emission_table(x, params.emission());
        state = VariationalState::uniform(
            x.n_individuals(),
            x.n_loci(),
            params.emission().n_states(),
        );
        for _ in 0..opts.n_ve_sweeps.max(1) {
            sweep_with_emissions(&log_emissions, &params, &mut state)?;
        }
    }

    Ok(VemReport {
        params,
        state,
        n_iterations: trace.len(),
        bound_trace: trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{brute_force_posterior, joint_forward_backward};
    use crate::model::{ModelDims, DEFAULT_JOINT_STATE_CAP};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn params_for(
        n_ind: usize,
        n_loci: usize,
        log_omega: f64,
        s_off: f64,
    ) -> ModelParams {
        let dims = ModelDims::new(n_ind, n_loci, 2).unwrap();
        let emission = EmissionParams::new(
            vec![-1.0, 1.0],
            vec![0.6, 0.6],
            EmissionMode::Homoscedastic,
        )
        .unwrap();
        let chain =
            ChainParams::new(array![0.5, 0.5], array![[0.85, 0.15], [0.2, 0.8]]).unwrap();
        ModelParams::new(
            dims,
            emission,
            chain,
            CouplingParams::new(log_omega).unwrap(),
            SimilarityMatrix::uniform(n_ind, s_off).unwrap(),
        )
        .unwrap()
    }

    fn random_obs(rng: &mut Xoshiro256PlusPlus, n_ind: usize, n_loci: usize) -> ObservationMatrix {
        ObservationMatrix::new(Array2::from_shape_fn((n_ind, n_loci), |_| {
            rng.random_range(-2.0..2.0)
        }))
        .unwrap()
    }

    /// Exhaustive reference for one corrected chain: enumerate all Q^T paths.
    fn enumerate_chain(
        log_h: &Array2<f64>,
        chain: &ChainParams,
    ) -> (Array2<f64>, Array3<f64>, f64) {
        let (n_loci, q) = log_h.dim();
        let n_paths = q.pow(n_loci as u32);
        let mut weights = Vec::with_capacity(n_paths);
        let mut paths = Vec::with_capacity(n_paths);
        for idx in 0..n_paths {
            let mut path = vec![0usize; n_loci];
            let mut rest = idx;
            for slot in path.iter_mut() {
                *slot = rest % q;
                rest /= q;
            }
            let mut lw = chain.initial()[path[0]].ln() + log_h[(0, path[0])];
            for t in 1..n_loci {
                lw += chain.transition()[(path[t - 1], path[t])].ln() + log_h[(t, path[t])];
            }
            weights.push(lw);
            paths.push(path);
        }
        let log_z = crate::numeric::log_sum_exp(&weights);
        let mut tau = Array2::zeros((n_loci, q));
        let mut delta = Array3::zeros((n_loci, q, q));
        for (lw, path) in weights.iter().zip(&paths) {
            let w = (lw - log_z).exp();
            for t in 0..n_loci {
                tau[(t, path[t])] += w;
                if t > 0 {
                    delta[(t, path[t - 1], path[t])] += w;
                }
            }
        }
        (tau, delta, log_z)
    }

    #[test]
    fn omega_field_is_zero_when_independent_or_certain() {
        let sim = SimilarityMatrix::uniform(3, 0.7).unwrap();
        let tau = Array3::from_elem((3, 4, 2), 0.5);
        let field =
            update_log_omega_field(&tau, &sim, &CouplingParams::independent());
        assert!(field.iter().all(|&v| v == 0.0));

        // everyone surely in the same state: 1 - tau vanishes for it
        let mut tau = Array3::zeros((3, 4, 2));
        tau.slice_mut(s![.., .., 0]).fill(1.0);
        let field = update_log_omega_field(
            &tau,
            &sim,
            &CouplingParams::new(-0.3).unwrap(),
        );
        assert!(field.slice(s![.., .., 0]).iter().all(|&v| v == 0.0));
        assert!(field.slice(s![.., .., 1]).iter().all(|&v| v < 0.0));
    }

    #[test]
    fn omega_field_matches_direct_evaluation() {
        // I=2, s12 = 1, tau_2t^r = 0.25, log omega = -0.2: field = -0.15
        let sim = SimilarityMatrix::uniform(2, 1.0).unwrap();
        let mut tau = Array3::from_elem((2, 1, 2), 0.5);
        tau[(1, 0, 0)] = 0.25;
        tau[(1, 0, 1)] = 0.75;
        let field =
            update_log_omega_field(&tau, &sim, &CouplingParams::new(-0.2).unwrap());
        assert_relative_eq!(field[(0, 0, 0)], -0.15, epsilon = 1e-15);
        assert!(field.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn corrections_compose_field_and_emission() {
        let params = params_for(2, 1, -0.2, 1.0);
        let x = ObservationMatrix::new(array![[0.0], [0.0]]).unwrap();
        // independent: h is the emission density alone
        let zero = Array3::zeros((2, 1, 2));
        let log_h = update_variational_params(&x, &params, &zero).unwrap();
        assert_relative_eq!(
            log_h[(0, 0, 0)],
            params.emission().log_density(0, 0.0),
            epsilon = 1e-15
        );
        // standard normal at its mean, shifted by a field of -0.15
        let dims = ModelDims::new(1, 1, 1).unwrap();
        let p = ModelParams::new(
            dims,
            EmissionParams::new(vec![0.0], vec![1.0], EmissionMode::Homoscedastic).unwrap(),
            ChainParams::sticky(1, 1.0).unwrap(),
            CouplingParams::new(-0.2).unwrap(),
            SimilarityMatrix::uniform(1, 0.0).unwrap(),
        )
        .unwrap();
        let x1 = ObservationMatrix::new(array![[0.0]]).unwrap();
        let mut field = Array3::zeros((1, 1, 1));
        field[(0, 0, 0)] = -0.15;
        let log_h = update_variational_params(&x1, &p, &field).unwrap();
        assert_relative_eq!(log_h[(0, 0, 0)], -1.068_938_533_204_672_7, epsilon = 1e-12);
    }

    #[test]
    fn flat_corrections_give_uniform_marginals() {
        let chain = ChainParams::new(
            array![0.5, 0.5],
            array![[0.5, 0.5], [0.5, 0.5]],
        )
        .unwrap();
        let log_h = Array2::zeros((5, 2));
        let post = individual_forward_backward(0, log_h.view(), &chain).unwrap();
        for v in post.tau.iter() {
            assert_relative_eq!(*v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_locus_marginal_is_weighted_initial() {
        let chain =
            ChainParams::new(array![0.3, 0.7], array![[0.9, 0.1], [0.2, 0.8]]).unwrap();
        let mut log_h = Array2::zeros((1, 2));
        log_h[(0, 0)] = -0.5;
        let post = individual_forward_backward(0, log_h.view(), &chain).unwrap();
        let w0 = 0.3 * (-0.5_f64).exp();
        let w1 = 0.7;
        assert_relative_eq!(post.tau[(0, 0)], w0 / (w0 + w1), epsilon = 1e-12);
        assert_relative_eq!(post.log_z_tilde, (w0 + w1).ln(), epsilon = 1e-12);
    }

    #[test]
    fn recursion_matches_path_enumeration() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(13);
        let chain =
            ChainParams::new(array![0.4, 0.6], array![[0.7, 0.3], [0.25, 0.75]]).unwrap();
        for _ in 0..20 {
            let log_h = Array2::from_shape_fn((3, 2), |_| rng.random_range(-3.0..1.0));
            let post = individual_forward_backward(0, log_h.view(), &chain).unwrap();
            let (tau_ref, delta_ref, log_z_ref) = enumerate_chain(&log_h, &chain);
            assert_relative_eq!(post.log_z_tilde, log_z_ref, epsilon = 1e-12);
            for (a, b) in post.tau.iter().zip(tau_ref.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in post.delta.iter().zip(delta_ref.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_marginalization_identities() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(29);
        let params = params_for(3, 6, -0.3, 0.8);
        let x = random_obs(&mut rng, 3, 6);
        let mut state = VariationalState::uniform(3, 6, 2);
        for _ in 0..3 {
            ve_sweep(&x, &params, &mut state).unwrap();
            for i in 0..3 {
                for t in 1..6 {
                    for r in 0..2 {
                        let col: f64 = (0..2).map(|a| state.delta()[(i, t, a, r)]).sum();
                        assert!((col - state.tau()[(i, t, r)]).abs() < 1e-10);
                        let row: f64 = (0..2).map(|b| state.delta()[(i, t, r, b)]).sum();
                        assert!((row - state.tau()[(i, t - 1, r)]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn bound_equals_exact_likelihood_when_independent() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(41);
        let params = params_for(2, 5, 0.0, 0.9);
        let x = random_obs(&mut rng, 2, 5);
        let mut state = VariationalState::uniform(2, 5, 2);
        ve_sweep(&x, &params, &mut state).unwrap();
        let j = evaluate_bound(&x, &params, &state).unwrap();
        let exact = joint_forward_backward(&x, &params, DEFAULT_JOINT_STATE_CAP).unwrap();
        assert_relative_eq!(j, exact.log_likelihood, epsilon = 1e-10);
        // and J collapses to the sum of chain normalizers
        assert_relative_eq!(j, state.log_z_tilde().sum(), epsilon = 1e-10);
    }

    #[test]
    fn bound_never_exceeds_exact_likelihood() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(43);
        for _ in 0..10 {
            let log_omega = rng.random_range(-0.6..=0.0);
            let params = params_for(2, 4, log_omega, 0.7);
            let x = random_obs(&mut rng, 2, 4);
            let mut state = VariationalState::uniform(2, 4, 2);
            for _ in 0..30 {
                ve_sweep(&x, &params, &mut state).unwrap();
            }
            let j = evaluate_bound(&x, &params, &state).unwrap();
            let exact = brute_force_posterior(&x, &params).unwrap();
            assert!(
                j <= exact.posterior.log_likelihood + 1e-10,
                "bound {j} exceeds evidence {}",
                exact.posterior.log_likelihood
            );
        }
    }

    #[test]
    fn sweeps_do_not_decrease_the_bound() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(47);
        for _ in 0..5 {
            let params = params_for(4, 30, -0.35, 0.8);
            let x = random_obs(&mut rng, 4, 30);
            let mut state = VariationalState::uniform(4, 30, 2);
            let mut prev = f64::NEG_INFINITY;
            for _ in 0..10 {
                ve_sweep(&x, &params, &mut state).unwrap();
                let j = evaluate_bound(&x, &params, &state).unwrap();
                assert!(j >= prev - 1e-8, "bound decreased: {prev} -> {j}");
                prev = j;
            }
        }
    }

    #[test]
    fn converged_state_is_a_fixed_point() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(53);
        let params = params_for(3, 20, -0.25, 0.6);
        let x = random_obs(&mut rng, 3, 20);
        let mut state = VariationalState::uniform(3, 20, 2);
        for _ in 0..200 {
            ve_sweep(&x, &params, &mut state).unwrap();
        }
        let before = state.tau().clone();
        ve_sweep(&x, &params, &mut state).unwrap();
        let diff = state
            .tau()
            .iter()
            .zip(before.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "sup-norm change after convergence: {diff}");
    }

    #[test]
    fn duplicated_individuals_stay_identical() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(59);
        let params = params_for(3, 10, -0.3, 0.5);
        let row: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut data = Array2::zeros((3, 10));
        for t in 0..10 {
            data[(0, t)] = row[t];
            data[(1, t)] = row[t];
            data[(2, t)] = rng.random_range(-2.0..2.0);
        }
        let x = ObservationMatrix::new(data).unwrap();
        let mut state = VariationalState::uniform(3, 10, 2);
        for _ in 0..5 {
            ve_sweep(&x, &params, &mut state).unwrap();
            for t in 0..10 {
                for r in 0..2 {
                    assert!(
                        (state.tau()[(0, t, r)] - state.tau()[(1, t, r)]).abs() < 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn m_step_recovers_hard_assignment_moments() {
        let params = params_for(1, 4, 0.0, 0.0);
        let x = ObservationMatrix::new(array![[-1.2, -0.8, 0.9, 1.1]]).unwrap();
        let mut state = VariationalState::uniform(1, 4, 2);
        state.tau.fill(0.0);
        state.tau[(0, 0, 0)] = 1.0;
        state.tau[(0, 1, 0)] = 1.0;
        state.tau[(0, 2, 1)] = 1.0;
        state.tau[(0, 3, 1)] = 1.0;
        // hard path 0,0,1,1: deltas are one-hot on consecutive pairs
        state.delta[(0, 1, 0, 0)] = 1.0;
        state.delta[(0, 2, 0, 1)] = 1.0;
        state.delta[(0, 3, 1, 1)] = 1.0;
        let update = m_step(&x, &state, &params).unwrap();
        let means = update.params.emission().means();
        assert_relative_eq!(means[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(means[1], 1.0, epsilon = 1e-12);
        // homoscedastic mode pools the variance: (0.04+0.04+0.01+0.01)/4
        let sds = update.params.emission().std_devs();
        assert_eq!(sds[0], sds[1]);
        assert_relative_eq!(sds[0], (0.025_f64).sqrt(), epsilon = 1e-12);
        let pi = update.params.chain().transition();
        assert_relative_eq!(pi[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(pi[(0, 1)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(pi[(1, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn m_step_weighted_means_match_hand_computation() {
        let params = params_for(1, 2, 0.0, 0.0);
        let x = ObservationMatrix::new(array![[2.0, -2.0]]).unwrap();
        let mut state = VariationalState::uniform(1, 2, 2);
        state.tau[(0, 0, 0)] = 0.25;
        state.tau[(0, 0, 1)] = 0.75;
        state.tau[(0, 1, 0)] = 0.5;
        state.tau[(0, 1, 1)] = 0.5;
        state.delta[(0, 1, 0, 0)] = 0.1;
        state.delta[(0, 1, 0, 1)] = 0.15;
        state.delta[(0, 1, 1, 0)] = 0.4;
        state.delta[(0, 1, 1, 1)] = 0.35;
        let update = m_step(&x, &state, &params).unwrap();
        // state 0: (0.25*2 - 0.5*2) / 0.75 = -2/3; state 1: (0.75*2 - 0.5*2)/1.25 = 0.4
        let means = update.params.emission().means();
        assert_relative_eq!(means[0], -2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(means[1], 0.4, epsilon = 1e-12);
        let m0 = update.params.chain().initial();
        assert_relative_eq!(m0[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn m_step_flags_empty_states() {
        let params = params_for(1, 3, 0.0, 0.0);
        let x = ObservationMatrix::new(array![[0.1, 0.2, 0.3]]).unwrap();
        let mut state = VariationalState::uniform(1, 3, 2);
        state.tau.slice_mut(s![.., .., 0]).fill(1.0);
        state.tau.slice_mut(s![.., .., 1]).fill(0.0);
        let err = m_step(&x, &state, &params).unwrap_err();
        match err {
            ChmmError::DegenerateState { state: r, .. } => assert_eq!(r, 1),
            other => panic!("expected degenerate state, got {other:?}"),
        }
    }

    #[test]
    fn independent_fit_recovers_exact_marginals() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(61);
        let params = params_for(2, 50, 0.0, 0.9);
        let mut data = Array2::zeros((2, 50));
        for i in 0..2 {
            let mut s = 0usize;
            for t in 0..50 {
                if t > 0 && rng.random::<f64>() < 0.15 {
                    s = 1 - s;
                }
                data[(i, t)] = params.emission().means()[s] + rng.random_range(-0.6..0.6);
            }
        }
        let x = ObservationMatrix::new(data).unwrap();
        let report = fit_vem(&x, &params, &VemOptions::default()).unwrap();
        assert!(report.converged);
        // against the exact joint chain at the fitted parameters
        let exact =
            joint_forward_backward(&x, &report.params, DEFAULT_JOINT_STATE_CAP).unwrap();
        let codec =
            crate::model::JointStateCodec::new(report.params.dims(), DEFAULT_JOINT_STATE_CAP)
                .unwrap();
        let marg = crate::exact::per_individual_marginals(&exact.gamma, &codec);
        for i in 0..2 {
            for t in 0..50 {
                for r in 0..2 {
                    assert!(
                        (report.state.tau()[(i, t, r)] - marg[(i, t, r)]).abs() < 1e-8
                    );
                }
            }
        }
    }

    #[test]
    fn missing_cells_carry_no_evidence() {
        let params = params_for(2, 3, -0.2, 1.0);
        let mut data = Array2::zeros((2, 3));
        data[(0, 0)] = -1.0;
        data[(0, 1)] = f64::NAN;
        data[(0, 2)] = 1.0;
        data[(1, 0)] = -1.0;
        data[(1, 1)] = -1.0;
        data[(1, 2)] = 1.0;
        let x = ObservationMatrix::new(data).unwrap();
        let mut state = VariationalState::uniform(2, 3, 2);
        for _ in 0..5 {
            ve_sweep(&x, &params, &mut state).unwrap();
        }
        // the missing cell's corrections reduce to the coupling field alone
        assert_relative_eq!(
            state.log_h()[(0, 1, 0)],
            state.log_omega_field()[(0, 1, 0)],
            epsilon = 1e-15
        );
        let sum: f64 = (0..2).map(|r| state.tau()[(0, 1, r)]).sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
    }
}
