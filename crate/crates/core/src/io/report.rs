//! Delimited report emission: call sets, selection grids, benchmark tables.

use std::path::{Path, PathBuf};

use crate::decoding::CallSet;
use crate::error::Result;
use crate::model::EmissionParams;
use crate::selection::SelectionReport;
use crate::simulate::BenchmarkReport;

use super::write_atomic;

/// Human-readable state labels keyed to the canonical (mean-sorted) order.
/// Three states get the usual copy-number names; otherwise states below the
/// near-zero mean are `del_k`, above it `amp_k`.
pub fn state_labels(emission: &EmissionParams) -> Vec<String> {
    let q = emission.n_states();
    if q == 3 {
        return vec![
            "deletion".to_string(),
            "normal".to_string(),
            "amplification".to_string(),
        ];
    }
    let mut normal = 0;
    for (r, mu) in emission.means().iter().enumerate() {
        if mu.abs() < emission.means()[normal].abs() {
            normal = r;
        }
    }
    (0..q)
        .map(|r| {
            use std::cmp::Ordering::*;
            match r.cmp(&normal) {
                Less => format!("del_{}", normal - r),
                Equal => "normal".to_string(),
                Greater => format!("amp_{}", r - normal),
            }
        })
        .collect()
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v}")
    }
}

/// Long-format call table: one row per (individual, locus) with the decoded
/// label under the requested rule and the posterior for every state.
pub fn write_callset(
    path: &Path,
    calls: &CallSet,
    rule_viterbi: bool,
    individual_ids: &[String],
    locus_ids: &[String],
    emission: &EmissionParams,
) -> Result<()> {
    let labels = state_labels(emission);
    let (n_ind, n_loci, q) = calls.tau.dim();
    let mut out = String::from("individual,locus,state");
    for label in &labels {
        out.push_str(",tau_");
        out.push_str(label);
    }
    out.push('\n');
    let chosen = if rule_viterbi {
        &calls.viterbi_path
    } else {
        &calls.local_map
    };
    for i in 0..n_ind {
        for t in 0..n_loci {
            out.push_str(&individual_ids[i]);
            out.push(',');
            out.push_str(&locus_ids[t]);
            out.push(',');
            out.push_str(&labels[chosen[(i, t)]]);
            for r in 0..q {
                out.push(',');
                out.push_str(&fmt(calls.tau[(i, t, r)]));
            }
            out.push('\n');
        }
    }
    write_atomic(path, &out)
}

/// Selection grid as a table; whichever grid the report carries is written.
pub fn write_selection_report(path: &Path, report: &SelectionReport) -> Result<()> {
    let mut out = String::new();
    if !report.q_candidates.is_empty() {
        out.push_str("n_states,bound,penalty,criterion,chosen,error\n");
        for c in &report.q_candidates {
            let chosen = report.chosen_q == Some(c.n_states);
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.n_states,
                fmt(c.bound),
                fmt(c.penalty),
                fmt(c.criterion),
                chosen,
                c.error.clone().unwrap_or_default()
            ));
        }
    } else {
        out.push_str("log_omega,bound,rss,chosen,error\n");
        for c in &report.omega_candidates {
            let chosen = report.chosen_log_omega == Some(c.log_omega);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt(c.log_omega),
                fmt(c.bound),
                fmt(c.rss),
                chosen,
                c.error.clone().unwrap_or_default()
            ));
        }
    }
    write_atomic(path, &out)
}

/// Benchmark tables under `dir`: `replicates.csv` and `summary.csv` are
/// deterministic given the root seed; `timings.csv` holds wall-clock
/// measurements and is excluded from any reproducibility contract.
pub fn write_benchmark_report(dir: &Path, report: &BenchmarkReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let mut rows = String::from("config,method,replicate,seed,fpr,fnr,accuracy,converged,error\n");
    for r in &report.rows {
        let (fpr, fnr, acc) = match &r.metrics {
            Some(m) => (fmt(m.fpr), fmt(m.fnr), fmt(m.accuracy)),
            None => ("NA".into(), "NA".into(), "NA".into()),
        };
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.config,
            r.method,
            r.replicate,
            r.seed,
            fpr,
            fnr,
            acc,
            r.converged,
            r.error.clone().unwrap_or_default()
        ));
    }
    let path = dir.join("replicates.csv");
    write_atomic(&path, &rows)?;
    written.push(path);

    let mut summary = String::from("config,method,n_ok,n_failed,mean_fpr,mean_fnr,mean_accuracy\n");
    for s in &report.summaries {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.config,
            s.method,
            s.n_ok,
            s.n_failed,
            fmt(s.mean_fpr),
            fmt(s.mean_fnr),
            fmt(s.mean_accuracy)
        ));
    }
    let path = dir.join("summary.csv");
    write_atomic(&path, &summary)?;
    written.push(path);

    let mut timings = String::from("config,method,replicate,wall_seconds\n");
    for t in &report.timings {
        timings.push_str(&format!(
            "{},{},{},{}\n",
            t.config,
            t.method,
            t.replicate,
            fmt(t.wall_seconds)
        ));
    }
    let path = dir.join("timings.csv");
    write_atomic(&path, &timings)?;
    written.push(path);

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmissionMode;

    #[test]
    fn three_state_labels_are_the_cnv_names() {
        let e = EmissionParams::new(
            vec![-1.0, 0.0, 1.0],
            vec![0.3; 3],
            EmissionMode::Homoscedastic,
        )
        .unwrap();
        assert_eq!(state_labels(&e), vec!["deletion", "normal", "amplification"]);
    }

    #[test]
    fn generic_labels_fan_out_from_the_near_zero_state() {
        let e = EmissionParams::new(
            vec![-2.0, -1.0, 0.05, 1.5],
            vec![0.3; 4],
            EmissionMode::Homoscedastic,
        )
        .unwrap();
        assert_eq!(state_labels(&e), vec!["del_2", "del_1", "normal", "amp_1"]);
        let single =
            EmissionParams::new(vec![0.0], vec![1.0], EmissionMode::Homoscedastic).unwrap();
        assert_eq!(state_labels(&single), vec!["normal"]);
    }
}
