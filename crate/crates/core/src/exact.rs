//! Exact inference on the joint `K = Q^I` state chain.
//!
//! For small panels the coupled model is just one big HMM over state tuples,
//! so the E-step is the classical scaled forward-backward recursion with
//! `O(T K²)` cost. The M-step keeps the closed-form Gaussian updates but has
//! no closed form for `(m, π)` because every row of the joint transition
//! matrix carries its own coupling normalizer; we take a quasi-Newton ascent
//! step on the expected complete log-likelihood instead (generalized EM), so
//! the observed log-likelihood never decreases.
//!
//! [`brute_force_posterior`] enumerates every joint path and is the ground
//! truth the test suites compare against.

use ndarray::{Array1, Array2, Array3};

use crate::error::{ChmmError, Result};
use crate::model::{
    canonical_state_permutation, joint_initial, joint_log_weights, joint_transition_row,
    log_emission_table, ChainParams, EmissionMode, EmissionParams, JointStateCodec, ModelParams,
    ObservationMatrix, DEFAULT_JOINT_STATE_CAP,
};
use crate::numeric::{log_sum_exp, OnlineLogSumExp};

/// Smoothed joint-state posteriors from one E-step.
#[derive(Debug, Clone)]
pub struct JointPosterior {
    /// `gamma[(t, ℓ)] = P(S_t = ℓ | X)`.
    pub gamma: Array2<f64>,
    /// `xi_sum[(k, ℓ)] = Σ_{t≥2} P(S_{t−1} = k, S_t = ℓ | X)`.
    pub xi_sum: Array2<f64>,
    /// `log P(X)`.
    pub log_likelihood: f64,
}

/// Outcome of an exact EM fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: ModelParams,
    /// Observed log-likelihood at each E-step.
    pub log_likelihood_trace: Vec<f64>,
    pub n_iterations: usize,
    pub converged: bool,
}

/// Options for [`fit_exact_em`].
#[derive(Debug, Clone)]
pub struct ExactFitOptions {
    pub max_iter: usize,
    /// Relative log-likelihood change below which the fit stops.
    pub tol: f64,
    /// Joint-state cap; exact inference refuses larger instances.
    pub joint_state_cap: usize,
}

impl Default for ExactFitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            joint_state_cap: DEFAULT_JOINT_STATE_CAP,
        }
    }
}

/// Slack allowed before a decreasing log-likelihood step is reported as a bug.
const ASCENT_SLACK: f64 = 1e-9;

fn check_observations(x: &ObservationMatrix, params: &ModelParams) -> Result<()> {
    if x.n_individuals() != params.dims().n_individuals()
        || x.n_loci() != params.dims().n_loci()
    {
        return Err(ChmmError::Input(format!(
            "observations are {}×{}, parameters expect {}×{}",
            x.n_individuals(),
            x.n_loci(),
            params.dims().n_individuals(),
            params.dims().n_loci()
        )));
    }
    Ok(())
}

/// Flattened `K×I` table of state tuples, one row per joint state.
fn tuple_table(codec: &JointStateCodec) -> Vec<usize> {
    let (k, n_ind) = (codec.joint_states(), codec.n_individuals());
    let mut table = vec![0usize; k * n_ind];
    for l in 0..k {
        codec.decode_into(l, &mut table[l * n_ind..(l + 1) * n_ind]);
    }
    table
}

/// Joint emission log-densities `(T, K)`: sum of per-individual terms.
fn joint_log_emissions(
    x: &ObservationMatrix,
    params: &ModelParams,
    tuples: &[usize],
    k: usize,
) -> Array2<f64> {
    let per_ind = log_emission_table(x, params.emission());
    let (n_ind, n_loci) = (x.n_individuals(), x.n_loci());
    let mut jle = Array2::zeros((n_loci, k));
    for t in 0..n_loci {
        for l in 0..k {
            let tuple = &tuples[l * n_ind..(l + 1) * n_ind];
            let mut sum = 0.0;
            for (i, &q) in tuple.iter().enumerate() {
                sum += per_ind[(i, t, q)];
            }
            jle[(t, l)] = sum;
        }
    }
    jle
}

fn transition_matrix(params: &ModelParams, codec: &JointStateCodec) -> Array2<f64> {
    let k = codec.joint_states();
    let mut p = Array2::zeros((k, k));
    for row in 0..k {
        p.row_mut(row).assign(&joint_transition_row(row, params, codec));
    }
    p
}

/// Scaled forward-backward on the joint chain.
pub fn joint_forward_backward(
    x: &ObservationMatrix,
    params: &ModelParams,
    cap: usize,
) -> Result<JointPosterior> {
    check_observations(x, params)?;
    let codec = JointStateCodec::new(params.dims(), cap)?;
    let k = codec.joint_states();
    let n_loci = x.n_loci();
    let tuples = tuple_table(&codec);
    let jle = joint_log_emissions(x, params, &tuples, k);
    let p0 = joint_initial(params, &codec);
    let trans = transition_matrix(params, &codec);

    // Per-locus max subtraction keeps the scaled emissions in (0, 1].
    let mut shifts = Array1::zeros(n_loci);
    let mut emis = Array2::zeros((n_loci, k));
    for t in 0..n_loci {
        let row = jle.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shifts[t] = max;
        for l in 0..k {
            emis[(t, l)] = (jle[(t, l)] - max).exp();
        }
    }

    let mut fwd = Array2::zeros((n_loci, k));
    let mut scales = Array1::zeros(n_loci);
    {
        let mut row: Array1<f64> = &p0 * &emis.row(0);
        let c = row.sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(ChmmError::Numerical(format!(
                "forward scale at t=0 is {c}"
            )));
        }
        row.mapv_inplace(|v| v / c);
        scales[0] = c;
        fwd.row_mut(0).assign(&row);
    }
    for t in 1..n_loci {
        let pred = fwd.row(t - 1).dot(&trans);
        let mut row: Array1<f64> = &pred * &emis.row(t);
        let c = row.sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(ChmmError::Numerical(format!(
                "forward scale at t={t} is {c}"
            )));
        }
        row.mapv_inplace(|v| v / c);
        scales[t] = c;
        fwd.row_mut(t).assign(&row);
    }

    let log_likelihood = scales.mapv(f64::ln).sum() + shifts.sum();

    let mut gamma = Array2::zeros((n_loci, k));
    let mut xi_sum = Array2::zeros((k, k));
    let mut bwd: Array1<f64> = Array1::ones(k);
    {
        let mut row: Array1<f64> = &fwd.row(n_loci - 1) * &bwd;
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
        gamma.row_mut(n_loci - 1).assign(&row);
    }
    for t in (0..n_loci.saturating_sub(1)).rev() {
        let weighted: Array1<f64> = &emis.row(t + 1) * &bwd;
        // transition posteriors for the (t, t+1) pair
        for from in 0..k {
            let a = fwd[(t, from)];
            if a == 0.0 {
                continue;
            }
            let coeff = a / scales[t + 1];
            for to in 0..k {
                xi_sum[(from, to)] += coeff * trans[(from, to)] * weighted[to];
            }
        }
        bwd = trans.dot(&weighted) / scales[t + 1];
        let mut row: Array1<f64> = &fwd.row(t) * &bwd;
        let s = row.sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(ChmmError::Numerical(format!(
                "posterior normalizer at t={t} is {s}"
            )));
        }
        row.mapv_inplace(|v| v / s);
        gamma.row_mut(t).assign(&row);
    }

    Ok(JointPosterior {
        gamma,
        xi_sum,
        log_likelihood,
    })
}

/// Exact posteriors plus the maximum-a-posteriori joint path, by enumeration
/// of all `K^T` paths. Test oracle; refuses instances beyond `K^T = 10^7`.
#[derive(Debug, Clone)]
pub struct BruteForcePosterior {
    pub posterior: JointPosterior,
    /// MAP joint path decoded to per-individual states, `I×T`.
    pub map_path: Array2<usize>,
}

pub fn brute_force_posterior(
    x: &ObservationMatrix,
    params: &ModelParams,
) -> Result<BruteForcePosterior> {
    check_observations(x, params)?;
    let codec = JointStateCodec::new(params.dims(), 10_000_000)?;
    let k = codec.joint_states();
    let n_loci = x.n_loci();
    let n_paths = (0..n_loci).try_fold(1usize, |acc, _| {
        acc.checked_mul(k).filter(|&v| v <= 10_000_000)
    });
    let n_paths = n_paths.ok_or_else(|| {
        ChmmError::Capacity(format!(
            "brute force enumeration of K^T = {k}^{n_loci} paths exceeds 10^7"
        ))
    })?;

    let tuples = tuple_table(&codec);
    let jle = joint_log_emissions(x, params, &tuples, k);
    let log_p0 = joint_initial(params, &codec).mapv(f64::ln);
    let log_trans = transition_matrix(params, &codec).mapv(f64::ln);

    let path_log_prob = |path: &[usize]| -> f64 {
        let mut lp = log_p0[path[0]] + jle[(0, path[0])];
        for t in 1..n_loci {
            lp += log_trans[(path[t - 1], path[t])] + jle[(t, path[t])];
        }
        lp
    };

    // pass 1: total evidence and the MAP path
    let mut acc = OnlineLogSumExp::new();
    let mut best_lp = f64::NEG_INFINITY;
    let mut best_path = vec![0usize; n_loci];
    let mut path = vec![0usize; n_loci];
    for _ in 0..n_paths {
        let lp = path_log_prob(&path);
        acc.push(lp);
        if lp > best_lp {
            best_lp = lp;
            best_path.copy_from_slice(&path);
        }
        advance(&mut path, k);
    }
    let log_z = acc.value();
    if !log_z.is_finite() {
        return Err(ChmmError::Numerical(format!(
            "total path evidence is {log_z}"
        )));
    }

    // pass 2: accumulate posteriors
    let mut gamma = Array2::zeros((n_loci, k));
    let mut xi_sum = Array2::zeros((k, k));
    path.fill(0);
    for _ in 0..n_paths {
        let w = (path_log_prob(&path) - log_z).exp();
        if w > 0.0 {
            for t in 0..n_loci {
                gamma[(t, path[t])] += w;
            }
            for t in 1..n_loci {
                xi_sum[(path[t - 1], path[t])] += w;
            }
        }
        advance(&mut path, k);
    }

    let n_ind = codec.n_individuals();
    let mut map_path = Array2::zeros((n_ind, n_loci));
    let mut tuple = vec![0usize; n_ind];
    for t in 0..n_loci {
        codec.decode_into(best_path[t], &mut tuple);
        for i in 0..n_ind {
            map_path[(i, t)] = tuple[i];
        }
    }

    Ok(BruteForcePosterior {
        posterior: JointPosterior {
            gamma,
            xi_sum,
            log_likelihood: log_z,
        },
        map_path,
    })
}

fn advance(path: &mut [usize], base: usize) {
    for digit in path.iter_mut() {
        *digit += 1;
        if *digit < base {
            return;
        }
        *digit = 0;
    }
}

/// Per-individual smoothed marginals `(I, T, Q)` obtained by summing the
/// joint posterior over tuples containing each state.
pub fn per_individual_marginals(gamma: &Array2<f64>, codec: &JointStateCodec) -> Array3<f64> {
    let (n_loci, k) = (gamma.nrows(), gamma.ncols());
    let (n_ind, q) = (codec.n_individuals(), codec.n_states());
    let tuples = tuple_table(codec);
    let mut marg = Array3::zeros((n_ind, n_loci, q));
    for t in 0..n_loci {
        for l in 0..k {
            let g = gamma[(t, l)];
            if g == 0.0 {
                continue;
            }
            let tuple = &tuples[l * n_ind..(l + 1) * n_ind];
            for (i, &s) in tuple.iter().enumerate() {
                marg[(i, t, s)] += g;
            }
        }
    }
    marg
}

/// EM on the joint chain. Emission updates are closed-form weighted moments;
/// chain updates are a quasi-Newton ascent step on the expected complete
/// log-likelihood (any ascent accepted).
pub fn fit_exact_em(
    x: &ObservationMatrix,
    init: &ModelParams,
    opts: &ExactFitOptions,
) -> Result<FitReport> {
    check_observations(x, init)?;
    let mut params = init.clone();
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;

    for _ in 0..opts.max_iter {
        let posterior = joint_forward_backward(x, &params, opts.joint_state_cap)?;
        let ll = posterior.log_likelihood;
        if let Some(&prev) = trace.last() {
            if ll < prev - ASCENT_SLACK {
                return Err(ChmmError::Invariant(format!(
                    "EM log-likelihood decreased from {prev} to {ll}"
                )));
            }
            trace.push(ll);
            if (ll - prev).abs() <= opts.tol * (1.0 + prev.abs()) {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        params = exact_m_step(x, &posterior, &params, opts.joint_state_cap)?;
    }

    Ok(FitReport {
        params,
        n_iterations: trace.len(),
        log_likelihood_trace: trace,
        converged,
    })
}

fn exact_m_step(
    x: &ObservationMatrix,
    posterior: &JointPosterior,
    params: &ModelParams,
    cap: usize,
) -> Result<ModelParams> {
    let codec = JointStateCodec::new(params.dims(), cap)?;
    let weights = per_individual_marginals(&posterior.gamma, &codec);
    let (emission, perm) = emission_update(x, &weights, params.emission())?;
    let chain = chain_ascent_update(posterior, params, &codec)?;
    let chain = match perm {
        None => chain,
        Some(ref p) => permute_chain(&chain, p)?,
    };
    params.with_emission_and_chain(emission, chain)
}

/// Weighted-moment Gaussian update. Returns the canonical relabeling applied
/// to keep means ascending, if any.
pub(crate) fn emission_update(
    x: &ObservationMatrix,
    weights: &Array3<f64>,
    current: &EmissionParams,
) -> Result<(EmissionParams, Option<Vec<usize>>)> {
    let (n_ind, n_loci, q) = weights.dim();
    let mut mass = vec![0.0; q];
    let mut mean_num = vec![0.0; q];
    for i in 0..n_ind {
        for t in 0..n_loci {
            if let Some(v) = x.get(i, t) {
                for r in 0..q {
                    let w = weights[(i, t, r)];
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
                detail: format!("posterior mass {m} below 1e-8 in emission update"),
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
                    var_num[r] += weights[(i, t, r)] * d * d;
                }
            }
        }
    }
    let std_devs: Vec<f64> = match current.mode() {
        EmissionMode::Heteroscedastic => (0..q)
            .map(|r| (var_num[r] / mass[r]).sqrt().max(1e-9))
            .collect(),
        EmissionMode::Homoscedastic => {
            let pooled =
                (var_num.iter().sum::<f64>() / mass.iter().sum::<f64>()).sqrt().max(1e-9);
            vec![pooled; q]
        }
    };

    match canonical_state_permutation(&means) {
        None => Ok((EmissionParams::new(means, std_devs, current.mode())?, None)),
        Some(perm) => {
            let means_p: Vec<f64> = perm.iter().map(|&o| means[o]).collect();
            let stds_p: Vec<f64> = perm.iter().map(|&o| std_devs[o]).collect();
            Ok((
                EmissionParams::new(means_p, stds_p, current.mode())?,
                Some(perm),
            ))
        }
    }
}

fn permute_chain(chain: &ChainParams, perm: &[usize]) -> Result<ChainParams> {
    let q = chain.n_states();
    let m = Array1::from_shape_fn(q, |a| chain.initial()[perm[a]]);
    let pi = Array2::from_shape_fn((q, q), |(a, b)| chain.transition()[(perm[a], perm[b])]);
    ChainParams::new(m, pi)
}

// ---------------------------------------------------------------------------
// Chain update: quasi-Newton ascent on the expected complete log-likelihood
// ---------------------------------------------------------------------------

struct ChainObjective<'a> {
    gamma1: Vec<f64>,
    xi: &'a Array2<f64>,
    xi_mass: Vec<f64>,
    log_w: Array1<f64>,
    tuples: Vec<usize>,
    n_ind: usize,
    q: usize,
    k: usize,
}

impl<'a> ChainObjective<'a> {
    fn new(posterior: &'a JointPosterior, params: &ModelParams, codec: &JointStateCodec) -> Self {
        let xi = &posterior.xi_sum;
        let xi_mass = xi.rows().into_iter().map(|r| r.sum()).collect();
        Self {
            gamma1: posterior.gamma.row(0).to_vec(),
            xi,
            xi_mass,
            log_w: joint_log_weights(params, codec),
            tuples: tuple_table(codec),
            n_ind: codec.n_individuals(),
            q: codec.n_states(),
            k: codec.joint_states(),
        }
    }

    fn dim(&self) -> usize {
        self.q + self.q * self.q
    }

    /// Objective value at explicit probabilities, with the `0·log 0 = 0`
    /// convention. Used to benchmark candidates against the incumbent.
    fn value_at_probs(&self, m: &[f64], pi: &Array2<f64>) -> f64 {
        let log_m: Vec<f64> = m.iter().map(|&v| v.ln()).collect();
        let log_pi = pi.mapv(f64::ln);
        self.value_from_logs(&log_m, &log_pi)
    }

    fn value_from_logs(&self, log_m: &[f64], log_pi: &Array2<f64>) -> f64 {
        let mut value = 0.0;
        let mut u0 = vec![0.0; self.k];
        for l in 0..self.k {
            let tuple = &self.tuples[l * self.n_ind..(l + 1) * self.n_ind];
            let mut u = self.log_w[l];
            for &s in tuple {
                u += log_m[s];
            }
            u0[l] = u;
            let g = self.gamma1[l];
            if g > 0.0 {
                value += g * u;
            }
        }
        value -= log_sum_exp(&u0);

        let mut u = vec![0.0; self.k];
        for from in 0..self.k {
            if self.xi_mass[from] == 0.0 {
                continue;
            }
            let from_tuple: Vec<usize> =
                self.tuples[from * self.n_ind..(from + 1) * self.n_ind].to_vec();
            for l in 0..self.k {
                let tuple = &self.tuples[l * self.n_ind..(l + 1) * self.n_ind];
                let mut v = self.log_w[l];
                for i in 0..self.n_ind {
                    v += log_pi[(from_tuple[i], tuple[i])];
                }
                u[l] = v;
                let w = self.xi[(from, l)];
                if w > 0.0 {
                    value += w * v;
                }
            }
            value -= self.xi_mass[from] * log_sum_exp(&u);
        }
        value
    }

    /// Value and gradient in the logit parametrization
    /// `x = [m-logits (Q) | π-logits row-major (Q×Q)]`.
    fn eval_logits(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let q = self.q;
        let (m, log_m) = softmax(&logits[..q]);
        let mut pi = Array2::zeros((q, q));
        let mut log_pi = Array2::zeros((q, q));
        for row in 0..q {
            let (p, lp) = softmax(&logits[q + row * q..q + (row + 1) * q]);
            for c in 0..q {
                pi[(row, c)] = p[c];
                log_pi[(row, c)] = lp[c];
            }
        }

        let mut value = 0.0;
        let mut grad_log_m = vec![0.0; q];
        let mut grad_log_pi = vec![0.0; q * q];

        let mut u0 = vec![0.0; self.k];
        for l in 0..self.k {
            let tuple = &self.tuples[l * self.n_ind..(l + 1) * self.n_ind];
            let mut u = self.log_w[l];
            for &s in tuple {
                u += log_m[s];
            }
            u0[l] = u;
            if self.gamma1[l] > 0.0 {
                value += self.gamma1[l] * u;
            }
        }
        let log_z0 = log_sum_exp(&u0);
        value -= log_z0;
        for l in 0..self.k {
            let coef = self.gamma1[l] - (u0[l] - log_z0).exp();
            if coef != 0.0 {
                let tuple = &self.tuples[l * self.n_ind..(l + 1) * self.n_ind];
                for &s in tuple {
                    grad_log_m[s] += coef;
                }
            }
        }

        let mut u = vec![0.0; self.k];
        for from in 0..self.k {
            let mass = self.xi_mass[from];
            if mass == 0.0 {
                continue;
            }
            let from_tuple: Vec<usize> =
                self.tuples[from * self.n_ind..(from + 1) * self.n_ind].to_vec();
            for l in 0..self.k {
                let tuple = &self.tuples[l * self.n_ind..(l + 1) * self.n_ind];
                let mut v = self.log_w[l];
                for i in 0..self.n_ind {
                    v += log_pi[(from_tuple[i], tuple[i])];
                }
                u[l] = v;
                if self.xi[(from, l)] > 0.0 {
                    value += self.xi[(from, l)] * v;
                }
            }
            let log_zk = log_sum_exp(&u);
            value -= mass * log_zk;
            for l in 0..self.k {
                let coef = self.xi[(from, l)] - mass * (u[l] - log_zk).exp();
                if coef != 0.0 {
                    let tuple = &self.tuples[l * self.n_ind..(l + 1) * self.n_ind];
                    for i in 0..self.n_ind {
                        grad_log_pi[from_tuple[i] * q + tuple[i]] += coef;
                    }
                }
            }
        }

        // chain rule through the softmax
        let mut grad = vec![0.0; self.dim()];
        let sum_m: f64 = grad_log_m.iter().sum();
        for s in 0..q {
            grad[s] = grad_log_m[s] - m[s] * sum_m;
        }
        for row in 0..q {
            let sum_row: f64 = grad_log_pi[row * q..(row + 1) * q].iter().sum();
            for c in 0..q {
                grad[q + row * q + c] = grad_log_pi[row * q + c] - pi[(row, c)] * sum_row;
            }
        }
        (value, grad)
    }
}

fn softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let lz = log_sum_exp(logits);
    let log_p: Vec<f64> = logits.iter().map(|&v| v - lz).collect();
    let p: Vec<f64> = log_p.iter().map(|&v| v.exp()).collect();
    (p, log_p)
}

/// BFGS with Armijo backtracking, maximizing `obj.eval_logits`.
fn maximize_logits(obj: &ChainObjective, x0: Vec<f64>, max_iter: usize) -> Vec<f64> {
    let d = x0.len();
    let mut x = x0;
    let (mut f, mut g) = obj.eval_logits(&x);
    let mut h: Vec<f64> = identity(d);
    let grad_tol = 1e-10 * (1.0 + obj.xi_mass.iter().sum::<f64>());

    for _ in 0..max_iter {
        if g.iter().all(|v| v.abs() < grad_tol) {
            break;
        }
        let mut dir = mat_vec(&h, &g, d);
        let mut slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope <= 1e-16 {
            h = identity(d);
            dir = g.clone();
            slope = g.iter().map(|v| v * v).sum();
            if slope <= 1e-20 {
                break;
            }
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let x_new: Vec<f64> =
                x.iter().zip(&dir).map(|(xi, di)| xi + alpha * di).collect();
            let (f_new, g_new) = obj.eval_logits(&x_new);
            if f_new >= f + 1e-4 * alpha * slope {
                accepted = Some((x_new, f_new, g_new));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        // maximization: curvature condition is yᵀs < 0
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy < -1e-12 {
            bfgs_update(&mut h, &s, &y, -sy, d);
        } else {
            h = identity(d);
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }
    x
}

fn identity(d: usize) -> Vec<f64> {
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        h[i * d + i] = 1.0;
    }
    h
}

fn mat_vec(h: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|j| h[i * d + j] * v[j]).sum())
        .collect()
}

/// Inverse-Hessian BFGS update specialised to maximization: with
/// `y_min = −y` the standard minimization update of `H` becomes
/// `H + ρ(s·(Hy)ᵀ + (Hy)·sᵀ) + (1 + ρ·yᵀHy)·ρ·s·sᵀ`, `ρ = −1/yᵀs`.
fn bfgs_update(h: &mut Vec<f64>, s: &[f64], y: &[f64], neg_sy: f64, d: usize) {
    let rho = 1.0 / neg_sy;
    let hy = mat_vec(h, y, d);
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    let mut new = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            new[i * d + j] = h[i * d + j] + (1.0 + rho * yhy) * rho * s[i] * s[j]
                + rho * (s[i] * hy[j] + hy[i] * s[j]);
        }
    }
    *h = new;
}

fn chain_ascent_update(
    posterior: &JointPosterior,
    params: &ModelParams,
    codec: &JointStateCodec,
) -> Result<ChainParams> {
    let obj = ChainObjective::new(posterior, params, codec);
    let q = codec.n_states();
    if q == 1 {
        return Ok(params.chain().clone());
    }

    let incumbent = obj.value_at_probs(
        params.chain().initial().as_slice().unwrap(),
        params.chain().transition(),
    );

    // start from the incumbent, flooring zero probabilities for the logits
    let mut x0 = Vec::with_capacity(obj.dim());
    for &v in params.chain().initial() {
        x0.push(v.max(1e-12).ln());
    }
    for row in params.chain().transition().rows() {
        for &v in row {
            x0.push(v.max(1e-12).ln());
        }
    }

    let x = maximize_logits(&obj, x0, 60);
    let (m, _) = softmax(&x[..q]);
    let mut pi = Array2::zeros((q, q));
    for row in 0..q {
        let (p, _) = softmax(&x[q + row * q..q + (row + 1) * q]);
        for c in 0..q {
            pi[(row, c)] = p[c];
        }
    }
    let candidate_value = obj.value_at_probs(&m, &pi);
    if candidate_value >= incumbent {
        ChainParams::new(Array1::from_vec(m), pi)
    } else {
        // ascent not found; keeping the incumbent preserves monotonicity
        Ok(params.chain().clone())
    }
}
