pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use crate::Failure;

/// Files in `dir` with a `.pgm` or `.vol` extension, sorted by name.
pub fn data_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Failure::usage(format!("cannot read {}: {e}", dir.display())))? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("pgm" | "vol")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// File stem with `suffix` removed, if the stem ends with it.
pub fn key_with_suffix(path: &Path, suffix: &str) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    stem.strip_suffix(suffix).filter(|k| !k.is_empty()).map(str::to_string)
}
