//! Delimited matrix files: signal (individuals × loci), kinship (square),
//! and the grouping table.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{ChmmError, Result};
use crate::model::{ObservationMatrix, SimilarityMatrix};

use super::write_atomic;

/// A parsed signal matrix: rows are individuals, columns are loci, header row
/// of locus identifiers, first column of individual identifiers, `NA` for
/// missing cells.
#[derive(Debug, Clone)]
pub struct SignalFile {
    pub individual_ids: Vec<String>,
    pub locus_ids: Vec<String>,
    pub observations: ObservationMatrix,
}

/// Generic parse of the matrix layout. Values must be finite or `NA`.
pub fn parse_matrix_text(text: &str) -> Result<(Vec<String>, Vec<String>, Array2<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| ChmmError::Input("matrix file is empty".into()))?;
    let mut cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(ChmmError::Input(
            "matrix header needs an id column plus at least one data column".into(),
        ));
    }
    cols.remove(0); // id column label
    let col_ids: Vec<String> = cols.iter().map(|c| c.to_string()).collect();

    let mut row_ids = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let mut fields = line.split(',').map(str::trim);
        let id = fields
            .next()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| {
                ChmmError::Input(format!("row {} has no identifier", line_no + 2))
            })?;
        row_ids.push(id.to_string());
        let mut count = 0;
        for field in fields {
            count += 1;
            if field == "NA" {
                values.push(f64::NAN);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                ChmmError::Input(format!(
                    "row '{id}', column {count}: cannot parse '{field}' as a number"
                ))
            })?;
            if !v.is_finite() {
                return Err(ChmmError::Input(format!(
                    "row '{id}', column {count}: non-finite value '{field}'"
                )));
            }
            values.push(v);
        }
        if count != col_ids.len() {
            return Err(ChmmError::Input(format!(
                "row '{id}' has {count} values, header declares {}",
                col_ids.len()
            )));
        }
    }
    if row_ids.is_empty() {
        return Err(ChmmError::Input("matrix file has no data rows".into()));
    }
    let data = Array2::from_shape_vec((row_ids.len(), col_ids.len()), values)
        .map_err(|e| ChmmError::Input(format!("matrix shape error: {e}")))?;
    Ok((row_ids, col_ids, data))
}

/// Read and validate a signal file.
pub fn read_signal(path: &Path) -> Result<SignalFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| ChmmError::Input(format!("cannot read {}: {e}", path.display())))?;
    let (individual_ids, locus_ids, data) = parse_matrix_text(&text)?;
    if locus_ids.len() < 2 {
        return Err(ChmmError::Input(format!(
            "signal file {} needs at least 2 loci",
            path.display()
        )));
    }
    check_unique(&individual_ids, "individual")?;
    Ok(SignalFile {
        individual_ids,
        locus_ids,
        observations: ObservationMatrix::new(data)?,
    })
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashMap::new();
    for id in ids {
        if seen.insert(id, ()).is_some() {
            return Err(ChmmError::Input(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(())
}

/// Serialize a matrix in the shared layout. `NaN` renders as `NA`.
pub fn write_matrix(
    path: &Path,
    row_ids: &[String],
    col_ids: &[String],
    data: &Array2<f64>,
) -> Result<()> {
    let mut out = String::from("id");
    for c in col_ids {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (r, id) in row_ids.iter().enumerate() {
        out.push_str(id);
        for c in 0..col_ids.len() {
            out.push(',');
            let v = data[(r, c)];
            if v.is_nan() {
                out.push_str("NA");
            } else {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    write_atomic(path, &out)
}

/// A kinship matrix as loaded from disk: symmetrized, negatives clamped for
/// model use, raw values and ingestion diagnostics retained.
#[derive(Debug, Clone)]
pub struct KinshipLoad {
    pub ids: Vec<String>,
    pub similarity: SimilarityMatrix,
    pub raw: Array2<f64>,
    pub max_asymmetry: f64,
    pub n_clamped: usize,
}

impl KinshipLoad {
    /// Restrict and reorder to the given individuals (typically the signal
    /// file's), erroring on any id the kinship file does not know.
    pub fn align_to(&self, individual_ids: &[String]) -> Result<SimilarityMatrix> {
        let index: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(k, v)| (v.as_str(), k))
            .collect();
        let mut subset = Vec::with_capacity(individual_ids.len());
        for id in individual_ids {
            match index.get(id.as_str()) {
                Some(&k) => subset.push(k),
                None => {
                    return Err(ChmmError::Input(format!(
                        "kinship matrix has no entry for individual '{id}'"
                    )))
                }
            }
        }
        self.similarity.subset(&subset)
    }
}

/// Read a square kinship file; NA entries are not allowed here.
pub fn read_kinship(path: &Path) -> Result<KinshipLoad> {
    let text = fs::read_to_string(path)
        .map_err(|e| ChmmError::Input(format!("cannot read {}: {e}", path.display())))?;
    let (row_ids, col_ids, raw) = parse_matrix_text(&text)?;
    if row_ids != col_ids {
        return Err(ChmmError::Input(format!(
            "kinship file {} must carry matching row and column identifiers",
            path.display()
        )));
    }
    check_unique(&row_ids, "kinship")?;
    if raw.iter().any(|v| v.is_nan()) {
        return Err(ChmmError::Input(format!(
            "kinship file {} contains NA entries",
            path.display()
        )));
    }
    let n = row_ids.len();
    let mut max_asymmetry = 0.0f64;
    let mut sym = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let a = raw[(i, j)];
            let b = raw[(j, i)];
            max_asymmetry = max_asymmetry.max((a - b).abs());
            sym[(i, j)] = 0.5 * (a + b);
        }
    }
    let mut n_clamped = 0;
    let clamped = sym.mapv(|v| {
        if v < 0.0 {
            n_clamped += 1;
            0.0
        } else {
            v
        }
    });
    Ok(KinshipLoad {
        ids: row_ids,
        similarity: SimilarityMatrix::new(clamped)?,
        raw,
        max_asymmetry,
        n_clamped,
    })
}

/// Parse a two-column `individual,group` file against a roster. Every roster
/// individual must be assigned exactly once; groups keep first-appearance
/// order.
pub fn read_groups(path: &Path, roster: &[String]) -> Result<Vec<(String, Vec<usize>)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| ChmmError::Input(format!("cannot read {}: {e}", path.display())))?;
    let index: HashMap<&str, usize> = roster
        .iter()
        .enumerate()
        .map(|(k, v)| (v.as_str(), k))
        .collect();
    let mut assigned: Vec<Option<String>> = vec![None; roster.len()];
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (line_no == 0 && line.to_lowercase().starts_with("individual")) {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let (Some(id), Some(group)) = (fields.next(), fields.next()) else {
            return Err(ChmmError::Input(format!(
                "groups file line {}: expected 'individual,group'",
                line_no + 1
            )));
        };
        let Some(&row) = index.get(id) else {
            return Err(ChmmError::Input(format!(
                "groups file assigns unknown individual '{id}'"
            )));
        };
        if let Some(already) = &assigned[row] {
            return Err(ChmmError::Input(format!(
                "individual '{id}' assigned twice (groups '{already}' and '{group}')"
            )));
        }
        assigned[row] = Some(group.to_string());
        match groups.iter_mut().find(|(g, _)| g == group) {
            Some((_, members)) => members.push(row),
            None => groups.push((group.to_string(), vec![row])),
        }
    }
    if let Some(missing) = assigned.iter().position(Option::is_none) {
        return Err(ChmmError::Input(format!(
            "individual '{}' is not assigned to any group",
            roster[missing]
        )));
    }
    Ok(groups)
}
