//! Fitted-model persistence and the simulation config file.
//!
//! Both use the same line-oriented `key value` document; list values are
//! comma-joined. Floats are written in Rust's shortest round-trip form, so
//! `load(save(m))` reproduces every numeric field bit for bit.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{ChmmError, Result};
use crate::model::{
    ChainParams, CouplingParams, EmissionMode, EmissionParams, ModelDims, ModelParams,
    SimilarityMatrix,
};
use crate::simulate::{EmissionScenario, SimulationConfig};

use super::matrix::read_kinship;
use super::write_atomic;

const ARCHIVE_FORMAT: &str = "chmm-model-archive";
const CONFIG_FORMAT: &str = "chmm-sim-config";

/// A fitted model plus provenance: fit metadata, bound trace, and digests of
/// the input files.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub params: ModelParams,
    pub method: String,
    pub individual_ids: Vec<String>,
    pub converged: bool,
    pub n_iterations: usize,
    /// Fixed-point sweeps per variational E-step; decode replays the same
    /// schedule so calls reproduce the fit pipeline's exactly.
    pub n_ve_sweeps: usize,
    pub bound_trace: Vec<f64>,
    pub software_version: String,
    pub signal_digest: String,
    pub kinship_digest: String,
}

fn join_floats(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl ModelArchive {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push(' ');
            out.push_str(&v);
            out.push('\n');
        };
        line("format", ARCHIVE_FORMAT.into());
        line("version", "1".into());
        line("software", self.software_version.clone());
        line("method", self.method.clone());
        line("n_individuals", p.dims().n_individuals().to_string());
        line("n_loci", p.dims().n_loci().to_string());
        line("n_states", p.dims().n_states().to_string());
        line(
            "emission_mode",
            match p.emission().mode() {
                EmissionMode::Homoscedastic => "homoscedastic".into(),
                EmissionMode::Heteroscedastic => "heteroscedastic".into(),
            },
        );
        line("means", join_floats(p.emission().means().iter().copied()));
        line(
            "std_devs",
            join_floats(p.emission().std_devs().iter().copied()),
        );
        line("initial", join_floats(p.chain().initial().iter().copied()));
        for (r, row) in p.chain().transition().rows().into_iter().enumerate() {
            line(&format!("transition_row_{r}"), join_floats(row.iter().copied()));
        }
        line("log_omega", format!("{}", p.coupling().log_omega()));
        for (r, row) in p.similarity().matrix().rows().into_iter().enumerate() {
            line(&format!("similarity_row_{r}"), join_floats(row.iter().copied()));
        }
        line("individual_ids", self.individual_ids.join(","));
        line("converged", self.converged.to_string());
        line("n_iterations", self.n_iterations.to_string());
        line("n_ve_sweeps", self.n_ve_sweeps.to_string());
        line("bound_trace", join_floats(self.bound_trace.iter().copied()));
        line("signal_digest", self.signal_digest.clone());
        line("kinship_digest", self.kinship_digest.clone());
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = parse_document(text)?;
        if doc.get("format").map(String::as_str) != Some(ARCHIVE_FORMAT) {
            return Err(ChmmError::Input(format!(
                "not a model archive (format line says '{}')",
                doc.get("format").cloned().unwrap_or_default()
            )));
        }
        let n_individuals: usize = field(&doc, "n_individuals")?;
        let n_loci: usize = field(&doc, "n_loci")?;
        let n_states: usize = field(&doc, "n_states")?;
        let dims = ModelDims::new(n_individuals, n_loci, n_states)?;
        let mode = match get(&doc, "emission_mode")?.as_str() {
            "homoscedastic" => EmissionMode::Homoscedastic,
            "heteroscedastic" => EmissionMode::Heteroscedastic,
            other => {
                return Err(ChmmError::Input(format!("unknown emission mode '{other}'")))
            }
        };
        let emission = EmissionParams::new(
            float_list(&doc, "means")?,
            float_list(&doc, "std_devs")?,
            mode,
        )?;
        let initial = Array1::from_vec(float_list(&doc, "initial")?);
        let mut transition = Array2::zeros((n_states, n_states));
        for r in 0..n_states {
            let row = float_list(&doc, &format!("transition_row_{r}"))?;
            if row.len() != n_states {
                return Err(ChmmError::Input(format!(
                    "transition_row_{r} has {} entries, expected {n_states}",
                    row.len()
                )));
            }
            for (c, v) in row.into_iter().enumerate() {
                transition[(r, c)] = v;
            }
        }
        let chain = ChainParams::new(initial, transition)?;
        let coupling = CouplingParams::new(field(&doc, "log_omega")?)?;
        let mut similarity = Array2::zeros((n_individuals, n_individuals));
        for r in 0..n_individuals {
            let row = float_list(&doc, &format!("similarity_row_{r}"))?;
            if row.len() != n_individuals {
                return Err(ChmmError::Input(format!(
                    "similarity_row_{r} has {} entries, expected {n_individuals}",
                    row.len()
                )));
            }
            for (c, v) in row.into_iter().enumerate() {
                similarity[(r, c)] = v;
            }
        }
        let params = ModelParams::new(
            dims,
            emission,
            chain,
            coupling,
            SimilarityMatrix::new(similarity)?,
        )?;
        let individual_ids: Vec<String> = get(&doc, "individual_ids")?
            .split(',')
            .map(str::to_string)
            .collect();
        if individual_ids.len() != n_individuals {
            return Err(ChmmError::Input(format!(
                "archive lists {} individual ids for {n_individuals} individuals",
                individual_ids.len()
            )));
        }
        Ok(ModelArchive {
            params,
            method: get(&doc, "method")?.clone(),
            individual_ids,
            converged: field(&doc, "converged")?,
            n_iterations: field(&doc, "n_iterations")?,
            n_ve_sweeps: field(&doc, "n_ve_sweeps")?,
            bound_trace: float_list(&doc, "bound_trace")?,
            software_version: get(&doc, "software")?.clone(),
            signal_digest: get(&doc, "signal_digest")?.clone(),
            kinship_digest: get(&doc, "kinship_digest")?.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ChmmError::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

fn parse_document(text: &str) -> Result<HashMap<String, String>> {
    let mut doc = HashMap::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once(' ').ok_or_else(|| {
            ChmmError::Input(format!("line {}: expected 'key value'", line_no + 1))
        })?;
        if doc.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(ChmmError::Input(format!("duplicate key '{key}'")));
        }
    }
    Ok(doc)
}

fn get<'a>(doc: &'a HashMap<String, String>, key: &str) -> Result<&'a String> {
    doc.get(key)
        .ok_or_else(|| ChmmError::Input(format!("missing key '{key}'")))
}

fn field<T: std::str::FromStr>(doc: &HashMap<String, String>, key: &str) -> Result<T> {
    get(doc, key)?
        .parse()
        .map_err(|_| ChmmError::Input(format!("cannot parse value of '{key}'")))
}

fn float_list(doc: &HashMap<String, String>, key: &str) -> Result<Vec<f64>> {
    let raw = get(doc, key)?;
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| ChmmError::Input(format!("bad number '{v}' in '{key}'")))
        })
        .collect()
}

/// Parse a simulation config document. `kinship` is either the word
/// `synthetic-blocks` (two blocks, 0.8 within, 0.1 between) or a path to a
/// kinship file, resolved relative to `base_dir` when relative.
pub fn parse_sim_config(text: &str, base_dir: &Path) -> Result<SimulationConfig> {
    let doc = parse_document(text)?;
    if doc.get("format").map(String::as_str) != Some(CONFIG_FORMAT) {
        return Err(ChmmError::Input(format!(
            "not a simulation config (expected 'format {CONFIG_FORMAT}')"
        )));
    }
    let n_individuals: usize = field(&doc, "n_individuals")?;
    let n_loci: usize = field(&doc, "n_loci")?;
    let scenario = match get(&doc, "scenario")?.as_str() {
        "homoscedastic" => EmissionScenario::Homoscedastic {
            sigma: field(&doc, "sigma")?,
        },
        "hetero_a" => EmissionScenario::HeteroA,
        "hetero_b" => EmissionScenario::HeteroB,
        other => {
            return Err(ChmmError::Input(format!(
                "unknown scenario '{other}' (homoscedastic, hetero_a, hetero_b)"
            )))
        }
    };
    let similarity = match doc.get("kinship").map(String::as_str) {
        None | Some("synthetic-blocks") => {
            crate::simulate::block_kinship(n_individuals, 2, 0.8, 0.1)?
        }
        Some(path) => {
            let mut p = std::path::PathBuf::from(path);
            if p.is_relative() {
                p = base_dir.join(p);
            }
            read_kinship(&p)?.similarity
        }
    };
    if similarity.n_individuals() != n_individuals {
        return Err(ChmmError::Input(format!(
            "kinship is for {} individuals, config says {n_individuals}",
            similarity.n_individuals()
        )));
    }
    let mut config = SimulationConfig::new(
        n_individuals,
        n_loci,
        scenario,
        field(&doc, "log_omega")?,
        similarity,
        field(&doc, "seed")?,
    );
    if doc.contains_key("window_spacing") {
        config.window_spacing = field(&doc, "window_spacing")?;
    }
    if doc.contains_key("window_mean_length") {
        config.window_mean_length = field(&doc, "window_mean_length")?;
    }
    Ok(config)
}
