//! File formats and ingestion: delimited signal/kinship matrices, model
//! archives, SNP-based kinship, log R ratios, and report emission.
//!
//! All delimited output is comma-separated with `.` decimals, independent of
//! locale. Writes are atomic: content goes to a sibling temporary file which
//! is renamed into place, so a failed run never leaves a partial output.

mod archive;
mod matrix;
mod report;
mod transform;

pub use archive::{parse_sim_config, ModelArchive};
pub use matrix::{
    parse_matrix_text, read_groups, read_kinship, read_signal, write_matrix, KinshipLoad,
    SignalFile,
};
pub use report::{
    state_labels, write_benchmark_report, write_callset, write_selection_report,
};
pub use transform::{compute_lrr, kinship_from_snp, read_snp_counts, KinshipEstimate};

use std::fs;
use std::path::Path;

use crate::error::{ChmmError, Result};

/// FNV-1a 64-bit content digest, hex-encoded. Used to tie archives to the
/// files they were fitted on.
pub fn content_digest(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Digest of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| ChmmError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(content_digest(&bytes))
}

/// Write-then-rename. The temporary sibling carries a `.tmp` suffix.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, contents)
        .map_err(|e| ChmmError::Input(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| ChmmError::Input(format!("cannot rename into {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable() {
        assert_eq!(content_digest(b""), "cbf29ce484222325");
        assert_eq!(content_digest(b"chmm"), content_digest(b"chmm"));
        assert_ne!(content_digest(b"a"), content_digest(b"b"));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = std::env::temp_dir().join("chmm-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("out.csv");
        write_atomic(&path, "first").unwrap();
        write_atomic(&path, "second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        std::fs::remove_dir_all(&dir).ok();
    }
}
