//! Model parameters and closed-form quantities of the kinship-coupled chain.
//!
//! The model ties `I` hidden Markov chains (one per individual, `Q` states
//! each) through a pairwise-similarity coupling: a joint transition into the
//! state tuple `ℓ = (ℓ_1, …, ℓ_I)` is weighted by
//! `W_ℓ = ω^{Σ_{i,j≠i} s_ij · 1{ℓ_j ≠ ℓ_i}}` with `ω ≤ 1`, so disagreement
//! between similar individuals is penalized. Emissions are Gaussian per
//! state. Each transition row and the initial law are normalized
//! independently, which makes the joint process a proper Markov chain over
//! the `K = Q^I` tuple states.
//!
//! Everything here is immutable after construction and safe to share across
//! threads.

use ndarray::{Array1, Array2, Array3};

use crate::error::{ChmmError, Result};
use crate::numeric::LN_TWO_PI;

/// Default guard on the joint state space size `K = Q^I` for exact
/// (joint-chain) computations.
pub const DEFAULT_JOINT_STATE_CAP: usize = 4096;

/// Problem dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    n_individuals: usize,
    n_loci: usize,
    n_states: usize,
    /// `Q^I` when it fits in `usize`; `None` on overflow. Exact-inference
    /// entry points additionally enforce a cap via [`JointStateCodec`].
    joint_states: Option<usize>,
}

impl ModelDims {
    pub fn new(n_individuals: usize, n_loci: usize, n_states: usize) -> Result<Self> {
        if n_individuals == 0 || n_loci == 0 || n_states == 0 {
            return Err(ChmmError::Input(format!(
                "dimensions must be positive, got I={n_individuals}, T={n_loci}, Q={n_states}"
            )));
        }
        let joint_states = n_states.checked_pow(
            u32::try_from(n_individuals).unwrap_or(u32::MAX),
        );
        Ok(Self {
            n_individuals,
            n_loci,
            n_states,
            joint_states,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn n_loci(&self) -> usize {
        self.n_loci
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// `K = Q^I` if representable.
    pub fn joint_states(&self) -> Option<usize> {
        self.joint_states
    }
}

/// Emission variance structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionMode {
    Homoscedastic,
    Heteroscedastic,
}

/// Gaussian emission parameters, one (mean, std dev) pair per state.
///
/// Means are required to be sorted ascending: state labels are canonical and
/// comparable across runs and against simulation ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionParams {
    means: Vec<f64>,
    std_devs: Vec<f64>,
    mode: EmissionMode,
}

impl EmissionParams {
    pub fn new(means: Vec<f64>, std_devs: Vec<f64>, mode: EmissionMode) -> Result<Self> {
        if means.is_empty() || means.len() != std_devs.len() {
            return Err(ChmmError::Input(format!(
                "emission parameter lengths inconsistent: {} means, {} std devs",
                means.len(),
                std_devs.len()
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(ChmmError::Input("emission means must be finite".into()));
        }
        if std_devs.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ChmmError::Input(
                "emission std devs must be finite and positive".into(),
            ));
        }
        if means.windows(2).any(|w| w[0] > w[1]) {
            return Err(ChmmError::Input(
                "emission means must be sorted ascending (canonical state order)".into(),
            ));
        }
        if mode == EmissionMode::Homoscedastic && std_devs.windows(2).any(|w| w[0] != w[1]) {
            return Err(ChmmError::Input(
                "homoscedastic mode requires equal std devs across states".into(),
            ));
        }
        Ok(Self {
            means,
            std_devs,
            mode,
        })
    }

    pub fn n_states(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn std_devs(&self) -> &[f64] {
        &self.std_devs
    }

    pub fn mode(&self) -> EmissionMode {
        self.mode
    }

    /// Gaussian log-density of state `q` at `x`. `x` must be finite.
    pub fn log_density(&self, q: usize, x: f64) -> f64 {
        debug_assert!(x.is_finite());
        let mu = self.means[q];
        let sigma = self.std_devs[q];
        let z = (x - mu) / sigma;
        -sigma.ln() - 0.5 * LN_TWO_PI - 0.5 * z * z
    }
}

/// Within-individual chain parameters: initial law `m` and `Q×Q` transition
/// matrix `π` (row-stochastic).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    initial: Array1<f64>,
    transition: Array2<f64>,
}

const STOCHASTIC_TOL: f64 = 1e-12;

impl ChainParams {
    pub fn new(initial: Array1<f64>, transition: Array2<f64>) -> Result<Self> {
        let q = initial.len();
        if transition.nrows() != q || transition.ncols() != q {
            return Err(ChmmError::Input(format!(
                "transition matrix is {}×{}, expected {q}×{q}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        if initial.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || transition.iter().any(|p| !(p.is_finite() && *p >= 0.0))
        {
            return Err(ChmmError::Input(
                "chain probabilities must be finite and nonnegative".into(),
            ));
        }
        if (initial.sum() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(ChmmError::Input(format!(
                "initial law sums to {}, expected 1 within {STOCHASTIC_TOL}",
                initial.sum()
            )));
        }
        for (r, row) in transition.rows().into_iter().enumerate() {
            if (row.sum() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(ChmmError::Input(format!(
                    "transition row {r} sums to {}, expected 1 within {STOCHASTIC_TOL}",
                    row.sum()
                )));
            }
        }
        Ok(Self {
            initial,
            transition,
        })
    }

    /// Sticky chain with the given diagonal mass, uniform initial law.
    pub fn sticky(n_states: usize, diagonal: f64) -> Result<Self> {
        if n_states == 0 {
            return Err(ChmmError::Input("n_states must be positive".into()));
        }
        if !(0.0..=1.0).contains(&diagonal) {
            return Err(ChmmError::Input(format!(
                "diagonal mass {diagonal} outside [0, 1]"
            )));
        }
        let q = n_states;
        let initial = Array1::from_elem(q, 1.0 / q as f64);
        let transition = if q == 1 {
            Array2::from_elem((1, 1), 1.0)
        } else {
            let off = (1.0 - diagonal) / (q - 1) as f64;
            Array2::from_shape_fn((q, q), |(a, b)| if a == b { diagonal } else { off })
        };
        Self::new(initial, transition)
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &Array1<f64> {
        &self.initial
    }

    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }
}

/// Pairwise similarity (kinship) coefficients. Symmetric and nonnegative;
/// the diagonal is never read by any consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    s: Array2<f64>,
}

const SYMMETRY_TOL: f64 = 1e-9;

impl SimilarityMatrix {
    pub fn new(s: Array2<f64>) -> Result<Self> {
        if s.nrows() != s.ncols() {
            return Err(ChmmError::Input(format!(
                "similarity matrix is {}×{}, expected square",
                s.nrows(),
                s.ncols()
            )));
        }
        if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ChmmError::Input(
                "similarity entries must be finite and nonnegative (clamp raw kinship first)"
                    .into(),
            ));
        }
        for i in 0..s.nrows() {
            for j in (i + 1)..s.ncols() {
                if (s[(i, j)] - s[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(ChmmError::Input(format!(
                        "similarity not symmetric at ({i},{j}): {} vs {}",
                        s[(i, j)],
                        s[(j, i)]
                    )));
                }
            }
        }
        Ok(Self { s })
    }

    /// Matrix with every off-diagonal entry equal to `value`.
    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        let s = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { value });
        Self::new(s)
    }

    pub fn n_individuals(&self) -> usize {
        self.s.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[(i, j)]
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.s
    }

    /// Restrict to the given individuals, preserving their order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let n = idx.len();
        if idx.iter().any(|&i| i >= self.n_individuals()) {
            return Err(ChmmError::Input("similarity subset index out of range".into()));
        }
        let s = Array2::from_shape_fn((n, n), |(a, b)| self.s[(idx[a], idx[b])]);
        Self::new(s)
    }
}

/// Coupling strength `ω ≤ 1`, stored on the log scale. `log ω = 0` is the
/// independent model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingParams {
    log_omega: f64,
}

impl CouplingParams {
    pub fn new(log_omega: f64) -> Result<Self> {
        if !log_omega.is_finite() || log_omega > 0.0 {
            return Err(ChmmError::Input(format!(
                "log omega must be finite and ≤ 0, got {log_omega}"
            )));
        }
        Ok(Self { log_omega })
    }

    pub fn independent() -> Self {
        Self { log_omega: 0.0 }
    }

    pub fn log_omega(&self) -> f64 {
        self.log_omega
    }

    pub fn is_independent(&self) -> bool {
        self.log_omega == 0.0
    }
}

/// Bijection between joint state indices `ℓ ∈ {0..K−1}` and per-individual
/// state tuples, base-`Q` positional with individual 0 least significant.
///
/// Construction enforces the joint-state cap; everything downstream of a
/// codec can therefore index freely.
#[derive(Debug, Clone, Copy)]
pub struct JointStateCodec {
    n_individuals: usize,
    n_states: usize,
    joint_states: usize,
}

impl JointStateCodec {
    pub fn new(dims: &ModelDims, cap: usize) -> Result<Self> {
        let k = dims.joint_states().ok_or_else(|| {
            ChmmError::Capacity(format!(
                "joint state space Q^I = {}^{} overflows usize",
                dims.n_states(),
                dims.n_individuals()
            ))
        })?;
        if k > cap {
            return Err(ChmmError::Capacity(format!(
                "joint state space K = {k} exceeds cap {cap}; \
                 use variational inference or raise the cap"
            )));
        }
        Ok(Self {
            n_individuals: dims.n_individuals(),
            n_states: dims.n_states(),
            joint_states: k,
        })
    }

    pub fn joint_states(&self) -> usize {
        self.joint_states
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn encode(&self, tuple: &[usize]) -> usize {
        debug_assert_eq!(tuple.len(), self.n_individuals);
        let mut index = 0;
        for &state in tuple.iter().rev() {
            debug_assert!(state < self.n_states);
            index = index * self.n_states + state;
        }
        index
    }

    pub fn decode_into(&self, index: usize, tuple: &mut [usize]) {
        debug_assert!(index < self.joint_states);
        let mut rest = index;
        for slot in tuple.iter_mut() {
            *slot = rest % self.n_states;
            rest /= self.n_states;
        }
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        let mut tuple = vec![0; self.n_individuals];
        self.decode_into(index, &mut tuple);
        tuple
    }
}

/// Full parameter set `θ = (emission, chain, ω)` plus the similarity matrix
/// and dimensions it applies to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    emission: EmissionParams,
    chain: ChainParams,
    coupling: CouplingParams,
    similarity: SimilarityMatrix,
}

impl ModelParams {
    pub fn new(
        dims: ModelDims,
        emission: EmissionParams,
        chain: ChainParams,
        coupling: CouplingParams,
        similarity: SimilarityMatrix,
    ) -> Result<Self> {
        if emission.n_states() != dims.n_states() || chain.n_states() != dims.n_states() {
            return Err(ChmmError::Input(format!(
                "state count mismatch: dims Q={}, emission Q={}, chain Q={}",
                dims.n_states(),
                emission.n_states(),
                chain.n_states()
            )));
        }
        if similarity.n_individuals() != dims.n_individuals() {
            return Err(ChmmError::Input(format!(
                "similarity matrix is for {} individuals, dims say {}",
                similarity.n_individuals(),
                dims.n_individuals()
            )));
        }
        Ok(Self {
            dims,
            emission,
            chain,
            coupling,
            similarity,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn emission(&self) -> &EmissionParams {
        &self.emission
    }

    pub fn chain(&self) -> &ChainParams {
        &self.chain
    }

    pub fn coupling(&self) -> &CouplingParams {
        &self.coupling
    }

    pub fn similarity(&self) -> &SimilarityMatrix {
        &self.similarity
    }

    pub fn with_coupling(&self, coupling: CouplingParams) -> Self {
        let mut out = self.clone();
        out.coupling = coupling;
        out
    }

    pub fn with_emission_and_chain(&self, emission: EmissionParams, chain: ChainParams) -> Result<Self> {
        Self::new(
            self.dims,
            emission,
            chain,
            self.coupling,
            self.similarity.clone(),
        )
    }
}

/// The `I×T` observation matrix. `NaN` encodes a missing cell; missing cells
/// contribute no emission evidence anywhere downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    data: Array2<f64>,
}

impl ObservationMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(ChmmError::Input("observation matrix is empty".into()));
        }
        if data.iter().any(|v| v.is_infinite()) {
            return Err(ChmmError::Input(
                "observation matrix contains infinite values".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn n_individuals(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_loci(&self) -> usize {
        self.data.ncols()
    }

    /// `Some(x)` when cell `(i, t)` is observed, `None` when missing.
    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        let v = self.data[(i, t)];
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Iterator over the observed (finite) values.
    pub fn observed(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied().filter(|v| !v.is_nan())
    }
}

/// Gaussian log-density `log φ_q(x)`; errors on non-finite input.
pub fn log_emission(x: f64, q: usize, emission: &EmissionParams) -> Result<f64> {
    if !x.is_finite() {
        return Err(ChmmError::Input(format!(
            "emission input must be finite, got {x}"
        )));
    }
    if q >= emission.n_states() {
        return Err(ChmmError::Input(format!(
            "state index {q} out of range (Q = {})",
            emission.n_states()
        )));
    }
    Ok(emission.log_density(q, x))
}

/// `log W_ℓ` for the state tuple `tuple`: `log ω · Σ_{i} Σ_{j≠i} s_ij ·
/// 1{tuple_j ≠ tuple_i}` (ordered pairs — each unordered pair counts twice).
pub fn log_coupling_weight_tuple(
    tuple: &[usize],
    similarity: &SimilarityMatrix,
    coupling: &CouplingParams,
) -> f64 {
    if coupling.is_independent() {
        return 0.0;
    }
    let n = tuple.len();
    let mut disagreement = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j != i && tuple[j] != tuple[i] {
                disagreement += similarity.get(i, j);
            }
        }
    }
    coupling.log_omega() * disagreement
}

/// `log W_ℓ` addressed by joint state index.
pub fn log_coupling_weight(
    l: usize,
    similarity: &SimilarityMatrix,
    coupling: &CouplingParams,
    codec: &JointStateCodec,
) -> f64 {
    assert!(l < codec.joint_states(), "joint state index out of range");
    let tuple = codec.decode(l);
    log_coupling_weight_tuple(&tuple, similarity, coupling)
}

/// `log W_ℓ` for every joint state, in index order.
pub fn joint_log_weights(params: &ModelParams, codec: &JointStateCodec) -> Array1<f64> {
    let k = codec.joint_states();
    let mut tuple = vec![0; codec.n_individuals()];
    let mut out = Array1::zeros(k);
    for l in 0..k {
        codec.decode_into(l, &mut tuple);
        out[l] = log_coupling_weight_tuple(&tuple, params.similarity(), params.coupling());
    }
    out
}

fn normalized_joint_row(log_unnorm: &mut Array1<f64>) -> Array1<f64> {
    let max = log_unnorm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut row = log_unnorm.mapv(|v| (v - max).exp());
    let sum = row.sum();
    row.mapv_inplace(|v| v / sum);
    row
}

/// Row `k` of the joint transition matrix: `P_{kℓ} ∝ (∏_i π_{k_i, ℓ_i}) W_ℓ`,
/// normalized over `ℓ`. Computed in log space with max subtraction.
pub fn joint_transition_row(
    k: usize,
    params: &ModelParams,
    codec: &JointStateCodec,
) -> Array1<f64> {
    assert!(k < codec.joint_states(), "joint state index out of range");
    let pi = params.chain().transition();
    let from = codec.decode(k);
    let mut tuple = vec![0; codec.n_individuals()];
    let mut log_unnorm = Array1::zeros(codec.joint_states());
    for l in 0..codec.joint_states() {
        codec.decode_into(l, &mut tuple);
        let mut lw = log_coupling_weight_tuple(&tuple, params.similarity(), params.coupling());
        for i in 0..codec.n_individuals() {
            lw += pi[(from[i], tuple[i])].ln();
        }
        log_unnorm[l] = lw;
    }
    normalized_joint_row(&mut log_unnorm)
}

/// Initial law of the joint chain: `P(S_1 = ℓ) ∝ (∏_i m_{ℓ_i}) W_ℓ`.
pub fn joint_initial(params: &ModelParams, codec: &JointStateCodec) -> Array1<f64> {
    let m = params.chain().initial();
    let mut tuple = vec![0; codec.n_individuals()];
    let mut log_unnorm = Array1::zeros(codec.joint_states());
    for l in 0..codec.joint_states() {
        codec.decode_into(l, &mut tuple);
        let mut lw = log_coupling_weight_tuple(&tuple, params.similarity(), params.coupling());
        for i in 0..codec.n_individuals() {
            lw += m[tuple[i]].ln();
        }
        log_unnorm[l] = lw;
    }
    normalized_joint_row(&mut log_unnorm)
}

/// Complete-data log-likelihood of a state path, up to the additive constant
/// `−log Z` of the unnormalized joint-chain reading:
/// initial + transition + coupling + emission terms.
///
/// Missing observations contribute zero emission evidence. With `log ω = 0`
/// this is the sum of standard per-individual HMM complete log-likelihoods.
pub fn complete_log_likelihood(
    x: &ObservationMatrix,
    states: &Array2<usize>,
    params: &ModelParams,
) -> Result<f64> {
    let (n_ind, n_loci) = (x.n_individuals(), x.n_loci());
    if states.nrows() != n_ind || states.ncols() != n_loci {
        return Err(ChmmError::Input(format!(
            "state path is {}×{}, observations are {n_ind}×{n_loci}",
            states.nrows(),
            states.ncols()
        )));
    }
    let q_max = params.dims().n_states();
    if states.iter().any(|&s| s >= q_max) {
        return Err(ChmmError::Input(format!(
            "state path contains an index ≥ Q = {q_max}"
        )));
    }
    if n_ind != params.dims().n_individuals() {
        return Err(ChmmError::Input(
            "individual count mismatch between observations and parameters".into(),
        ));
    }

    let m = params.chain().initial();
    let pi = params.chain().transition();
    let log_omega = params.coupling().log_omega();
    let sim = params.similarity();

    let mut total = 0.0;
    for i in 0..n_ind {
        total += m[states[(i, 0)]].ln();
        for t in 1..n_loci {
            total += pi[(states[(i, t - 1)], states[(i, t)])].ln();
        }
    }
    if log_omega != 0.0 {
        for t in 0..n_loci {
            let mut disagreement = 0.0;
            for i in 0..n_ind {
                for j in 0..n_ind {
                    if j != i && states[(j, t)] != states[(i, t)] {
                        disagreement += sim.get(i, j);
                    }
                }
            }
            total += disagreement * log_omega;
        }
    }
    for i in 0..n_ind {
        for t in 0..n_loci {
            if let Some(v) = x.get(i, t) {
                total += params.emission().log_density(states[(i, t)], v);
            }
        }
    }
    Ok(total)
}

/// Per-cell emission log-densities, `(I, T, Q)`. Missing cells are zero
/// (evidence-free) for every state.
pub(crate) fn log_emission_table(x: &ObservationMatrix, emission: &EmissionParams) -> Array3<f64> {
    let (n_ind, n_loci, q) = (x.n_individuals(), x.n_loci(), emission.n_states());
    let mut table = Array3::zeros((n_ind, n_loci, q));
    for i in 0..n_ind {
        for t in 0..n_loci {
            if let Some(v) = x.get(i, t) {
                for r in 0..q {
                    table[(i, t, r)] = emission.log_density(r, v);
                }
            }
        }
    }
    table
}

/// Deterministic default initialization: means at pooled empirical quantiles
/// `(2q+1)/(2Q)`, pooled standard deviation, sticky transitions (diagonal
/// 0.9), uniform initial law.
pub fn initial_params(
    x: &ObservationMatrix,
    n_states: usize,
    mode: EmissionMode,
    similarity: SimilarityMatrix,
    coupling: CouplingParams,
) -> Result<ModelParams> {
    let dims = ModelDims::new(x.n_individuals(), x.n_loci(), n_states)?;
    let mut pooled: Vec<f64> = x.observed().collect();
    if pooled.is_empty() {
        return Err(ChmmError::Input(
            "cannot initialize parameters: no observed values".into(),
        ));
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let quantile = |p: f64| -> f64 {
        let pos = p * (pooled.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        pooled[lo] + frac * (pooled[hi] - pooled[lo])
    };
    let means: Vec<f64> = (0..n_states)
        .map(|q| quantile((2 * q + 1) as f64 / (2 * n_states) as f64))
        .collect();

    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let var = pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-6);
    let std_devs = vec![sd; n_states];

    let emission = EmissionParams::new(means, std_devs, mode)?;
    let chain = ChainParams::sticky(n_states, 0.9)?;
    ModelParams::new(dims, emission, chain, coupling, similarity)
}

/// Permutation that sorts `means` ascending, or `None` when already sorted.
/// `perm[new] = old`.
pub(crate) fn canonical_state_permutation(means: &[f64]) -> Option<Vec<usize>> {
    if means.windows(2).all(|w| w[0] <= w[1]) {
        return None;
    }
    let mut perm: Vec<usize> = (0..means.len()).collect();
    perm.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap());
    Some(perm)
}
