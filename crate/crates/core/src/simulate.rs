//! Simulation of coupled alteration profiles, evaluation metrics, and the
//! replicated benchmark harness comparing the inference methods.
//!
//! Hidden states are drawn window-wise: alteration windows sit on a regular
//! grid of centers (one per `spacing` loci), each window's length is Poisson,
//! and the per-individual status inside a window is one joint tuple drawn
//! with probability proportional to the coupling weight `W_ℓ`, restricted to
//! tuples that alter at least one individual. Everything outside windows is
//! the normal state. Observations are Gaussian given the states.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Poisson};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

use crate::decoding::viterbi_variational;
use crate::error::{ChmmError, Result};
use crate::exact::{fit_exact_em, ExactFitOptions};
use crate::model::{
    initial_params, log_coupling_weight_tuple, CouplingParams, EmissionMode, EmissionParams,
    ModelDims, ObservationMatrix, SimilarityMatrix,
};
use crate::variational::{fit_vem, run_ve, VemOptions};

/// Emission scenario presets (three states each) plus a generic escape hatch.
#[derive(Debug, Clone, PartialEq)]
pub enum EmissionScenario {
    /// Means −1, 0, 1 with a common noise level.
    Homoscedastic { sigma: f64 },
    /// Means −2, 0, 2 with σ = 2, 0.25, 2.
    HeteroA,
    /// Means −3.5, 0, 0.68 with σ = 1.3, 0.2, 0.2.
    HeteroB,
    Custom {
        means: Vec<f64>,
        std_devs: Vec<f64>,
        mode: EmissionMode,
    },
}

impl EmissionScenario {
    pub fn emission_params(&self) -> Result<EmissionParams> {
        match self {
            EmissionScenario::Homoscedastic { sigma } => EmissionParams::new(
                vec![-1.0, 0.0, 1.0],
                vec![*sigma; 3],
                EmissionMode::Homoscedastic,
            ),
            EmissionScenario::HeteroA => EmissionParams::new(
                vec![-2.0, 0.0, 2.0],
                vec![2.0, 0.25, 2.0],
                EmissionMode::Heteroscedastic,
            ),
            EmissionScenario::HeteroB => EmissionParams::new(
                vec![-3.5, 0.0, 0.68],
                vec![1.3, 0.2, 0.2],
                EmissionMode::Heteroscedastic,
            ),
            EmissionScenario::Custom {
                means,
                std_devs,
                mode,
            } => EmissionParams::new(means.clone(), std_devs.clone(), *mode),
        }
    }

    pub fn mode(&self) -> EmissionMode {
        match self {
            EmissionScenario::Homoscedastic { .. } => EmissionMode::Homoscedastic,
            EmissionScenario::HeteroA | EmissionScenario::HeteroB => {
                EmissionMode::Heteroscedastic
            }
            EmissionScenario::Custom { mode, .. } => *mode,
        }
    }

    /// Index of the "normal" state: the one with mean closest to zero.
    pub fn normal_state(&self) -> Result<usize> {
        let emission = self.emission_params()?;
        let mut best = 0;
        for (r, mu) in emission.means().iter().enumerate() {
            if mu.abs() < emission.means()[best].abs() {
                best = r;
            }
        }
        Ok(best)
    }
}

/// Full description of one simulated dataset.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub n_individuals: usize,
    pub n_loci: usize,
    pub scenario: EmissionScenario,
    pub log_omega: f64,
    /// Distance between alteration-window centers; must divide `n_loci`.
    pub window_spacing: usize,
    /// Mean of the Poisson window length.
    pub window_mean_length: f64,
    pub similarity: SimilarityMatrix,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(
        n_individuals: usize,
        n_loci: usize,
        scenario: EmissionScenario,
        log_omega: f64,
        similarity: SimilarityMatrix,
        seed: u64,
    ) -> Self {
        Self {
            n_individuals,
            n_loci,
            scenario,
            log_omega,
            window_spacing: 50,
            window_mean_length: 15.0,
            similarity,
            seed,
        }
    }
}

/// Simulated observations with their generating truth.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub observations: ObservationMatrix,
    pub truth: Array2<usize>,
    pub config: SimulationConfig,
}

/// Classification quality after binarizing to altered-vs-normal. `accuracy`
/// is measured on the original labels. An undefined rate (no cells of the
/// reference class) is `NaN` with its flag cleared.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub fpr: f64,
    pub fnr: f64,
    pub accuracy: f64,
    pub fpr_defined: bool,
    pub fnr_defined: bool,
}

/// Block-structured stand-in kinship: individuals split into contiguous
/// blocks with high within-block and low between-block similarity.
pub fn block_kinship(
    n_individuals: usize,
    n_blocks: usize,
    within: f64,
    between: f64,
) -> Result<SimilarityMatrix> {
    if n_blocks == 0 || n_blocks > n_individuals {
        return Err(ChmmError::Input(format!(
            "cannot split {n_individuals} individuals into {n_blocks} blocks"
        )));
    }
    let base = n_individuals / n_blocks;
    let extra = n_individuals % n_blocks;
    let mut block_of = Vec::with_capacity(n_individuals);
    for b in 0..n_blocks {
        let size = base + usize::from(b < extra);
        block_of.extend(std::iter::repeat_n(b, size));
    }
    let s = Array2::from_shape_fn((n_individuals, n_individuals), |(i, j)| {
        if i == j {
            1.0
        } else if block_of[i] == block_of[j] {
            within
        } else {
            between
        }
    });
    SimilarityMatrix::new(s)
}

const TUPLE_SAMPLER_CAP: usize = 1 << 24;

/// Draw one joint status tuple with probability ∝ `W_ℓ`, excluding the
/// all-normal tuple.
fn sample_window_tuple(
    rng: &mut Xoshiro256PlusPlus,
    n_individuals: usize,
    n_states: usize,
    normal_state: usize,
    similarity: &SimilarityMatrix,
    coupling: &CouplingParams,
    log_weights: &mut Vec<f64>,
) -> Vec<usize> {
    let k = n_states.pow(n_individuals as u32);
    if log_weights.is_empty() {
        // one pass over all tuples; cached across windows
        let mut tuple = vec![0usize; n_individuals];
        for l in 0..k {
            decode_tuple(l, n_states, &mut tuple);
            if tuple.iter().all(|&s| s == normal_state) {
                log_weights.push(f64::NEG_INFINITY);
            } else {
                log_weights.push(log_coupling_weight_tuple(&tuple, similarity, coupling));
            }
        }
    }
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_weights.iter().map(|&lw| (lw - max).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    let mut pick = k - 1;
    for (l, &lw) in log_weights.iter().enumerate() {
        u -= (lw - max).exp();
        if u <= 0.0 {
            pick = l;
            break;
        }
    }
    let mut tuple = vec![0usize; n_individuals];
    decode_tuple(pick, n_states, &mut tuple);
    tuple
}

fn decode_tuple(mut index: usize, base: usize, tuple: &mut [usize]) {
    for slot in tuple.iter_mut() {
        *slot = index % base;
        index /= base;
    }
}

/// Generate one dataset according to the window design.
pub fn simulate(config: &SimulationConfig) -> Result<SimulatedDataset> {
    let (n_ind, n_loci) = (config.n_individuals, config.n_loci);
    let emission = config.scenario.emission_params()?;
    let n_states = emission.n_states();
    let normal = config.scenario.normal_state()?;
    let coupling = CouplingParams::new(config.log_omega)?;
    if config.similarity.n_individuals() != n_ind {
        return Err(ChmmError::Input(format!(
            "similarity matrix is for {} individuals, config says {n_ind}",
            config.similarity.n_individuals()
        )));
    }
    let spacing = config.window_spacing;
    if spacing < 2 || n_loci < spacing || n_loci % spacing != 0 {
        return Err(ChmmError::Input(format!(
            "n_loci = {n_loci} does not fit the window layout (spacing {spacing})"
        )));
    }
    if config.window_mean_length.is_nan() || config.window_mean_length <= 0.0 {
        return Err(ChmmError::Input("window mean length must be positive".into()));
    }
    let k_checked = n_states
        .checked_pow(u32::try_from(n_ind).unwrap_or(u32::MAX))
        .filter(|&k| k <= TUPLE_SAMPLER_CAP);
    if k_checked.is_none() {
        return Err(ChmmError::Capacity(format!(
            "window tuple sampler needs Q^I = {n_states}^{n_ind} ≤ {TUPLE_SAMPLER_CAP}"
        )));
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    let mut truth = Array2::from_elem((n_ind, n_loci), normal);
    let poisson = Poisson::new(config.window_mean_length)
        .map_err(|e| ChmmError::Input(format!("window length distribution: {e}")))?;
    let half = spacing / 2 - 1;
    let n_windows = n_loci / spacing;
    let mut cached_weights: Vec<f64> = Vec::new();

    for w in 0..n_windows {
        // 1-based centers 25, 75, …, T−25 for spacing 50
        let center = w * spacing + spacing / 2 - 1;
        let mut length = poisson.sample(&mut rng) as usize;
        if length == 0 {
            length = 1;
        }
        let left = ((length - 1) / 2).min(half).min(center);
        let right = (length - 1 - (length - 1) / 2).min(half).min(n_loci - 1 - center);
        let tuple = sample_window_tuple(
            &mut rng,
            n_ind,
            n_states,
            normal,
            &config.similarity,
            &coupling,
            &mut cached_weights,
        );
        for i in 0..n_ind {
            for t in (center - left)..=(center + right) {
                truth[(i, t)] = tuple[i];
            }
        }
    }

    let normals: Vec<Normal<f64>> = (0..n_states)
        .map(|r| Normal::new(emission.means()[r], emission.std_devs()[r]).unwrap())
        .collect();
    let mut data = Array2::zeros((n_ind, n_loci));
    for i in 0..n_ind {
        for t in 0..n_loci {
            data[(i, t)] = normals[truth[(i, t)]].sample(&mut rng);
        }
    }

    Ok(SimulatedDataset {
        observations: ObservationMatrix::new(data)?,
        truth,
        config: config.clone(),
    })
}

/// Confusion metrics of a call set against the truth.
pub fn evaluate(
    calls: &Array2<usize>,
    truth: &Array2<usize>,
    normal_state: usize,
) -> Result<EvalMetrics> {
    if calls.dim() != truth.dim() {
        return Err(ChmmError::Input(format!(
            "calls are {:?}, truth is {:?}",
            calls.dim(),
            truth.dim()
        )));
    }
    let total = calls.len();
    let mut correct = 0usize;
    let mut truth_normal = 0usize;
    let mut truth_altered = 0usize;
    let mut false_positive = 0usize;
    let mut false_negative = 0usize;
    for (c, t) in calls.iter().zip(truth.iter()) {
        if c == t {
            correct += 1;
        }
        if *t == normal_state {
            truth_normal += 1;
            if *c != normal_state {
                false_positive += 1;
            }
        } else {
            truth_altered += 1;
            if *c == normal_state {
                false_negative += 1;
            }
        }
    }
    let (fpr, fpr_defined) = if truth_normal > 0 {
        (false_positive as f64 / truth_normal as f64, true)
    } else {
        (f64::NAN, false)
    };
    let (fnr, fnr_defined) = if truth_altered > 0 {
        (false_negative as f64 / truth_altered as f64, true)
    } else {
        (f64::NAN, false)
    };
    Ok(EvalMetrics {
        fpr,
        fnr,
        accuracy: correct as f64 / total as f64,
        fpr_defined,
        fnr_defined,
    })
}

// ---------------------------------------------------------------------------
// Benchmark harness
// ---------------------------------------------------------------------------

/// The inference procedures under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Independent chains with shared emissions (`log ω = 0`).
    IHmmEm,
    /// Variational EM at the configured coupling.
    ChmmVem,
    /// Exact EM on the joint chain at the configured coupling.
    ChmmEm,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::IHmmEm => "iHMM-EM",
            Method::ChmmVem => "CHMM-VEM",
            Method::ChmmEm => "CHMM-EM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iHMM-EM" | "ihmm-em" | "ihmm" => Ok(Method::IHmmEm),
            "CHMM-VEM" | "chmm-vem" | "vem" => Ok(Method::ChmmVem),
            "CHMM-EM" | "chmm-em" | "exact" => Ok(Method::ChmmEm),
            other => Err(ChmmError::Input(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// The two replicated studies: runtime scaling over panel size, and
/// classification quality over noise scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    One,
    Two,
}

/// One benchmark configuration (a point in the study design).
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub name: String,
    pub n_individuals: usize,
    pub scenario: EmissionScenario,
    pub log_omega: f64,
}

/// Design points: study 1 grows the panel at σ = 1 with weak coupling;
/// study 2 fixes ten individuals and varies noise and coupling.
pub fn study_configs(study: Study) -> Vec<BenchConfig> {
    match study {
        Study::One => (2..=5)
            .map(|n| BenchConfig {
                name: format!("study1_I{n}"),
                n_individuals: n,
                scenario: EmissionScenario::Homoscedastic { sigma: 1.0 },
                log_omega: -0.2,
            })
            .collect(),
        Study::Two => {
            let mut configs = Vec::new();
            for &(tag, log_omega) in &[("weak", -0.2), ("moderate", -0.35)] {
                for &sigma in &[0.3, 1.0, 1.2] {
                    configs.push(BenchConfig {
                        name: format!("homo_sigma{sigma}_{tag}"),
                        n_individuals: 10,
                        scenario: EmissionScenario::Homoscedastic { sigma },
                        log_omega,
                    });
                }
            }
            configs.push(BenchConfig {
                name: "hetero_a_weak".into(),
                n_individuals: 10,
                scenario: EmissionScenario::HeteroA,
                log_omega: -0.2,
            });
            configs.push(BenchConfig {
                name: "hetero_b_weak".into(),
                n_individuals: 10,
                scenario: EmissionScenario::HeteroB,
                log_omega: -0.2,
            });
            configs
        }
    }
}

/// Benchmark options; defaults mirror the study design (`T = 1000`).
#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub n_replicates: usize,
    pub root_seed: u64,
    pub methods: Vec<Method>,
    pub n_loci: usize,
    pub fit: VemOptions,
    pub exact: ExactFitOptions,
    /// Kinship override; the block stand-in is generated per panel size when
    /// absent.
    pub kinship: Option<SimilarityMatrix>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            n_replicates: 0,
            root_seed: 20_240_101,
            methods: vec![Method::IHmmEm, Method::ChmmVem],
            n_loci: 1000,
            fit: VemOptions::default(),
            exact: ExactFitOptions::default(),
            kinship: None,
        }
    }
}

/// One replicate × method outcome.
#[derive(Debug, Clone)]
pub struct ReplicateRow {
    pub config: String,
    pub method: Method,
    pub replicate: usize,
    pub seed: u64,
    pub metrics: Option<EvalMetrics>,
    pub converged: bool,
    pub error: Option<String>,
}

/// Wall time of one replicate × method fit+decode.
#[derive(Debug, Clone)]
pub struct TimingRow {
    pub config: String,
    pub method: Method,
    pub replicate: usize,
    pub wall_seconds: f64,
}

/// Per-configuration × method means over successful replicates.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub config: String,
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_fpr: f64,
    pub mean_fnr: f64,
    pub mean_accuracy: f64,
}

/// Full benchmark output. `rows` and `summaries` are deterministic given the
/// root seed; `timings` are wall-clock measurements and are not.
#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub rows: Vec<ReplicateRow>,
    pub summaries: Vec<SummaryRow>,
    pub timings: Vec<TimingRow>,
}

fn derive_seed(root: u64, config_index: u64, replicate: u64) -> u64 {
    let mut z = root
        ^ config_index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ replicate.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fit one method on a dataset and decode with the Viterbi rule.
pub fn fit_and_decode(
    method: Method,
    data: &SimulatedDataset,
    fit_opts: &VemOptions,
    exact_opts: &ExactFitOptions,
) -> Result<(Array2<usize>, bool)> {
    let x = &data.observations;
    let mode = data.config.scenario.mode();
    let n_states = data.config.scenario.emission_params()?.n_states();
    let coupling = match method {
        Method::IHmmEm => CouplingParams::independent(),
        _ => CouplingParams::new(data.config.log_omega)?,
    };
    let init = initial_params(x, n_states, mode, data.config.similarity.clone(), coupling)?;
    match method {
        Method::IHmmEm | Method::ChmmVem => {
            let report = fit_vem(x, &init, fit_opts)?;
            let path = viterbi_variational(&report.state, report.params.chain());
            Ok((path, report.converged))
        }
        Method::ChmmEm => {
            let report = fit_exact_em(x, &init, exact_opts)?;
            // classification always goes through the factorized chain
            let state = run_ve(x, &report.params, fit_opts.n_ve_sweeps)?;
            let path = viterbi_variational(&state, report.params.chain());
            Ok((path, report.converged))
        }
    }
}

/// Run a replicated study. Replicates are parallel; rows, summaries and
/// timings are emitted in deterministic (config, replicate, method) order.
pub fn run_benchmark(study: Study, opts: &BenchmarkOptions) -> Result<BenchmarkReport> {
    let configs = study_configs(study);
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut summaries = Vec::new();

    for (ci, config) in configs.iter().enumerate() {
        let methods: Vec<Method> = opts
            .methods
            .iter()
            .copied()
            .filter(|m| {
                // exact EM only fits when the joint space is within its cap
                *m != Method::ChmmEm
                    || ModelDims::new(config.n_individuals, opts.n_loci, 3)
                        .ok()
                        .and_then(|d| d.joint_states())
                        .is_some_and(|k| k <= opts.exact.joint_state_cap)
            })
            .collect();
        let similarity = match &opts.kinship {
            Some(s) => {
                if s.n_individuals() != config.n_individuals {
                    return Err(ChmmError::Input(format!(
                        "kinship override is for {} individuals, config '{}' needs {}",
                        s.n_individuals(),
                        config.name,
                        config.n_individuals
                    )));
                }
                s.clone()
            }
            None => block_kinship(config.n_individuals, 2, 0.8, 0.1)?,
        };

        let replicate_results: Vec<(Vec<ReplicateRow>, Vec<TimingRow>)> = (0..opts.n_replicates)
            .into_par_iter()
            .map(|rep| {
                let seed = derive_seed(opts.root_seed, ci as u64, rep as u64);
                let sim_config = SimulationConfig::new(
                    config.n_individuals,
                    opts.n_loci,
                    config.scenario.clone(),
                    config.log_omega,
                    similarity.clone(),
                    seed,
                );
                let mut rep_rows = Vec::new();
                let mut rep_timings = Vec::new();
                match simulate(&sim_config) {
                    Ok(data) => {
                        let normal = data.config.scenario.normal_state().unwrap_or(1);
                        for &method in &methods {
                            let start = Instant::now();
                            let outcome =
                                fit_and_decode(method, &data, &opts.fit, &opts.exact);
                            let wall = start.elapsed().as_secs_f64();
                            rep_timings.push(TimingRow {
                                config: config.name.clone(),
                                method,
                                replicate: rep,
                                wall_seconds: wall,
                            });
                            let row = match outcome.and_then(|(path, converged)| {
                                evaluate(&path, &data.truth, normal)
                                    .map(|m| (m, converged))
                            }) {
                                Ok((metrics, converged)) => ReplicateRow {
                                    config: config.name.clone(),
                                    method,
                                    replicate: rep,
                                    seed,
                                    metrics: Some(metrics),
                                    converged,
                                    error: None,
                                },
                                Err(e) => ReplicateRow {
                                    config: config.name.clone(),
                                    method,
                                    replicate: rep,
                                    seed,
                                    metrics: None,
                                    converged: false,
                                    error: Some(e.to_string()),
                                },
                            };
                            rep_rows.push(row);
                        }
                    }
                    Err(e) => {
                        for &method in &methods {
                            rep_rows.push(ReplicateRow {
                                config: config.name.clone(),
                                method,
                                replicate: rep,
                                seed,
                                metrics: None,
                                converged: false,
                                error: Some(format!("simulation failed: {e}")),
                            });
                        }
                    }
                }
                (rep_rows, rep_timings)
            })
            .collect();

        for (rep_rows, rep_timings) in replicate_results {
            rows.extend(rep_rows);
            timings.extend(rep_timings);
        }

        for &method in &methods {
            let ok: Vec<&ReplicateRow> = rows
                .iter()
                .filter(|r| r.config == config.name && r.method == method && r.error.is_none())
                .collect();
            let n_failed = rows
                .iter()
                .filter(|r| r.config == config.name && r.method == method && r.error.is_some())
                .count();
            let mean = |f: fn(&EvalMetrics) -> f64| -> f64 {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r.metrics.as_ref().unwrap())).sum::<f64>()
                        / ok.len() as f64
                }
            };
            summaries.push(SummaryRow {
                config: config.name.clone(),
                method,
                n_ok: ok.len(),
                n_failed,
                mean_fpr: mean(|m| m.fpr),
                mean_fnr: mean(|m| m.fnr),
                mean_accuracy: mean(|m| m.accuracy),
            });
        }
    }

    Ok(BenchmarkReport {
        rows,
        summaries,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small_config(seed: u64, log_omega: f64) -> SimulationConfig {
        SimulationConfig::new(
            3,
            200,
            EmissionScenario::Homoscedastic { sigma: 0.3 },
            log_omega,
            block_kinship(3, 1, 0.8, 0.1).unwrap(),
            seed,
        )
    }

    #[test]
    fn window_layout_is_regular() {
        let data = simulate(&small_config(7, -0.35)).unwrap();
        // four windows for T = 200, centered at 25, 75, 125, 175 (1-based)
        let normal = 1usize;
        let mut altered_cols: Vec<usize> = Vec::new();
        for t in 0..200 {
            if (0..3).any(|i| data.truth[(i, t)] != normal) {
                altered_cols.push(t);
            }
        }
        assert!(!altered_cols.is_empty());
        for &t in &altered_cols {
            let center_ok = (0..4).any(|w| {
                let c = w * 50 + 24;
                t + 24 >= c && t <= c + 24
            });
            assert!(center_ok, "altered locus {t} outside every window");
        }
        // each window alters at least one individual
        for w in 0..4 {
            let c = w * 50 + 24;
            let any_altered = (0..3).any(|i| data.truth[(i, c)] != normal);
            assert!(any_altered, "window at {c} carries no alteration");
        }
    }

    #[test]
    fn full_length_series_carries_twenty_windows() {
        let config = SimulationConfig::new(
            2,
            1000,
            EmissionScenario::Homoscedastic { sigma: 0.3 },
            -0.2,
            SimilarityMatrix::uniform(2, 0.5).unwrap(),
            3,
        );
        let data = simulate(&config).unwrap();
        // centers every 50 loci: 25, 75, …, 975 (1-based)
        let mut windows_hit = 0;
        for w in 0..20 {
            let c = w * 50 + 24;
            if (0..2).any(|i| data.truth[(i, c)] != 1) {
                windows_hit += 1;
            }
            for t in 0..1000usize {
                let in_any_window =
                    (0..20).any(|k| t + 24 >= k * 50 + 24 && t <= k * 50 + 48);
                if !in_any_window {
                    assert_eq!(data.truth[(0, t)], 1);
                    assert_eq!(data.truth[(1, t)], 1);
                }
            }
        }
        assert_eq!(windows_hit, 20, "every center must carry an alteration");
    }

    #[test]
    fn strong_coupling_makes_windows_unanimous() {
        // log omega → −∞ crushes every mixed tuple
        let mut config = small_config(11, -30.0);
        config.similarity = SimilarityMatrix::uniform(3, 1.0).unwrap();
        let data = simulate(&config).unwrap();
        let normal = 1usize;
        for t in 0..200 {
            let states: Vec<usize> = (0..3).map(|i| data.truth[(i, t)]).collect();
            if states.iter().any(|&s| s != normal) {
                assert!(
                    states.iter().all(|&s| s == states[0]),
                    "mixed tuple at locus {t} despite crushing coupling"
                );
            }
        }
    }

    #[test]
    fn simulation_is_reproducible() {
        let a = simulate(&small_config(99, -0.2)).unwrap();
        let b = simulate(&small_config(99, -0.2)).unwrap();
        assert_eq!(a.truth, b.truth);
        for (x, y) in a
            .observations
            .data()
            .iter()
            .zip(b.observations.data().iter())
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bad_layout_is_rejected() {
        let mut config = small_config(1, -0.2);
        config.n_loci = 37;
        assert!(simulate(&config).is_err());
        let mut config = small_config(1, -0.2);
        config.n_loci = 30;
        assert!(simulate(&config).is_err());
    }

    #[test]
    fn metrics_on_perfect_and_degenerate_calls() {
        let truth =
            Array2::from_shape_vec((1, 10), vec![1, 1, 0, 0, 1, 1, 2, 2, 1, 1]).unwrap();
        let m = evaluate(&truth.clone(), &truth, 1).unwrap();
        assert_eq!(m.fpr, 0.0);
        assert_eq!(m.fnr, 0.0);
        assert_eq!(m.accuracy, 1.0);

        let all_normal = Array2::from_elem((1, 10), 1usize);
        let m = evaluate(&all_normal, &truth, 1).unwrap();
        assert_eq!(m.fpr, 0.0);
        assert_eq!(m.fnr, 1.0);
        assert!((m.accuracy - 0.6).abs() < 1e-12);

        // no normal cells in truth: FPR undefined
        let altered = Array2::from_elem((1, 4), 0usize);
        let m = evaluate(&altered.clone(), &altered, 1).unwrap();
        assert!(!m.fpr_defined && m.fpr.is_nan());
        assert!(m.fnr_defined && m.fnr == 0.0);
    }

    #[test]
    fn metrics_match_confusion_matrix_recount() {
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(23);
        let truth = Array2::from_shape_fn((4, 25), |_| rng.random_range(0..3usize));
        let calls = Array2::from_shape_fn((4, 25), |_| rng.random_range(0..3usize));
        let m = evaluate(&calls, &truth, 1).unwrap();
        let mut confusion = [[0usize; 2]; 2];
        let mut correct = 0usize;
        for (c, t) in calls.iter().zip(truth.iter()) {
            let t_alt = usize::from(*t != 1);
            let c_alt = usize::from(*c != 1);
            confusion[t_alt][c_alt] += 1;
            correct += usize::from(c == t);
        }
        let fpr = confusion[0][1] as f64 / (confusion[0][0] + confusion[0][1]) as f64;
        let fnr = confusion[1][0] as f64 / (confusion[1][0] + confusion[1][1]) as f64;
        assert!((m.fpr - fpr).abs() < 1e-15);
        assert!((m.fnr - fnr).abs() < 1e-15);
        assert!((m.accuracy - correct as f64 / 100.0).abs() < 1e-15);
        // misclassified cells are at least the false calls
        let it = 100.0;
        assert!(
            (1.0 - m.accuracy) * it + 1e-9
                >= m.fpr * (confusion[0][0] + confusion[0][1]) as f64
                    + m.fnr * (confusion[1][0] + confusion[1][1]) as f64
        );
        // the rates multiply back to integer counts
        let n_norm = (confusion[0][0] + confusion[0][1]) as f64;
        let n_alt = (confusion[1][0] + confusion[1][1]) as f64;
        assert!(((m.fpr * n_norm).round() - m.fpr * n_norm).abs() < 1e-9);
        assert!(((m.fnr * n_alt).round() - m.fnr * n_alt).abs() < 1e-9);
    }

    #[test]
    fn empty_benchmark_is_empty() {
        let opts = BenchmarkOptions {
            n_replicates: 0,
            ..Default::default()
        };
        let report = run_benchmark(Study::Two, &opts).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.timings.is_empty());
        assert!(report.summaries.iter().all(|s| s.n_ok == 0));
    }

    #[test]
    fn benchmark_rows_are_deterministic() {
        let opts = BenchmarkOptions {
            n_replicates: 2,
            n_loci: 100,
            methods: vec![Method::IHmmEm, Method::ChmmVem],
            fit: VemOptions {
                max_iter: 10,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = run_benchmark(Study::One, &opts).unwrap();
        let b = run_benchmark(Study::One, &opts).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.config, rb.config);
            assert_eq!(ra.seed, rb.seed);
            match (&ra.metrics, &rb.metrics) {
                (Some(ma), Some(mb)) => {
                    assert_eq!(ma.accuracy.to_bits(), mb.accuracy.to_bits());
                    assert_eq!(ma.fpr.to_bits(), mb.fpr.to_bits());
                }
                (None, None) => {}
                _ => panic!("determinism broken"),
            }
        }
    }
}
