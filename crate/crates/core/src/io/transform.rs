//! Domain transforms: log R ratios from intensity pairs and the SNP-based
//! kinship estimator.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{ChmmError, Result};
use crate::model::SimilarityMatrix;

use super::matrix::parse_matrix_text;

/// `X_it = log2(observed_it / expected_t)`. Missing observed cells propagate
/// as missing; anything nonpositive is an input error naming the cell.
pub fn compute_lrr(observed: &Array2<f64>, expected: &[f64]) -> Result<Array2<f64>> {
    if observed.ncols() != expected.len() {
        return Err(ChmmError::Input(format!(
            "observed has {} loci, expected intensities have {}",
            observed.ncols(),
            expected.len()
        )));
    }
    for (t, &e) in expected.iter().enumerate() {
        if !(e.is_finite() && e > 0.0) {
            return Err(ChmmError::Input(format!(
                "expected intensity at locus {t} is {e}; must be positive"
            )));
        }
    }
    let mut out = Array2::zeros(observed.dim());
    for ((i, t), &v) in observed.indexed_iter() {
        if v.is_nan() {
            out[(i, t)] = f64::NAN;
            continue;
        }
        if v <= 0.0 {
            return Err(ChmmError::Input(format!(
                "observed intensity at row {i}, locus {t} is {v}; must be positive"
            )));
        }
        out[(i, t)] = (v / expected[t]).log2();
    }
    Ok(out)
}

/// SNP-based kinship with its diagnostics. `similarity` has negatives clamped
/// to zero for model use; `raw` keeps the estimator's actual values.
#[derive(Debug, Clone)]
pub struct KinshipEstimate {
    pub similarity: SimilarityMatrix,
    pub raw: Array2<f64>,
    /// Monomorphic SNPs dropped (only for `alpha ≠ 0`).
    pub dropped_monomorphic: usize,
}

/// Minor-allele-count kinship:
/// `s_ij(α) = (1/L) Σ_t (Z_it − 2p_t)(Z_jt − 2p_t) / [2p_t(1−p_t)]^α`
/// with `p_t` the column mean over 2. Monomorphic columns are dropped when
/// `α ≠ 0` (the denominator vanishes there).
pub fn kinship_from_snp(counts: &Array2<u8>, alpha: i32) -> Result<KinshipEstimate> {
    let (n_ind, n_snp) = counts.dim();
    if n_ind == 0 || n_snp == 0 {
        return Err(ChmmError::Input("SNP matrix is empty".into()));
    }
    if counts.iter().any(|&z| z > 2) {
        return Err(ChmmError::Input(
            "SNP counts must be minor allele counts in {0, 1, 2}".into(),
        ));
    }

    let mut retained: Vec<(usize, f64, f64)> = Vec::with_capacity(n_snp); // (t, p, denom)
    let mut dropped = 0usize;
    for t in 0..n_snp {
        let sum: f64 = (0..n_ind).map(|i| f64::from(counts[(i, t)])).sum();
        let p = sum / (2.0 * n_ind as f64);
        let monomorphic = p == 0.0 || p == 1.0;
        if alpha != 0 && monomorphic {
            dropped += 1;
            continue;
        }
        let denom = if alpha == 0 {
            1.0
        } else {
            (2.0 * p * (1.0 - p)).powi(alpha)
        };
        retained.push((t, p, denom));
    }
    if retained.is_empty() {
        return Err(ChmmError::Input(format!(
            "all {n_snp} SNP columns are monomorphic; kinship undefined for alpha = {alpha}"
        )));
    }
    let l = retained.len() as f64;

    let mut raw = Array2::zeros((n_ind, n_ind));
    for i in 0..n_ind {
        for j in i..n_ind {
            let mut acc = 0.0;
            for &(t, p, denom) in &retained {
                let zi = f64::from(counts[(i, t)]) - 2.0 * p;
                let zj = f64::from(counts[(j, t)]) - 2.0 * p;
                acc += zi * zj / denom;
            }
            let v = acc / l;
            raw[(i, j)] = v;
            raw[(j, i)] = v;
        }
    }
    let clamped = raw.mapv(|v| v.max(0.0));
    Ok(KinshipEstimate {
        similarity: SimilarityMatrix::new(clamped)?,
        raw,
        dropped_monomorphic: dropped,
    })
}

/// Read a SNP count matrix in the shared layout (rows individuals, columns
/// SNPs, integer entries 0/1/2, no NA).
pub fn read_snp_counts(path: &Path) -> Result<(Vec<String>, Array2<u8>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| ChmmError::Input(format!("cannot read {}: {e}", path.display())))?;
    let (row_ids, _col_ids, data) = parse_matrix_text(&text)?;
    let mut counts = Array2::zeros(data.dim());
    for ((i, t), &v) in data.indexed_iter() {
        if v.is_nan() {
            return Err(ChmmError::Input(format!(
                "SNP matrix row '{}' has a missing genotype at column {}",
                row_ids[i],
                t + 1
            )));
        }
        if v != 0.0 && v != 1.0 && v != 2.0 {
            return Err(ChmmError::Input(format!(
                "SNP matrix row '{}', column {}: genotype {v} not in {{0,1,2}}",
                row_ids[i],
                t + 1
            )));
        }
        counts[(i, t)] = v as u8;
    }
    Ok((row_ids, counts))
}
