use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rankcount_core::data::file_sha256;
use serde::{Deserialize, Serialize};

/// Record of one CLI invocation, sufficient to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Fully resolved argument list, including the seed actually used.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    /// Output artifact path to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: Vec<String>, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            argv,
            config,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    /// Hashes `path` (a file or a directory tree) as outputs of a run whose
    /// `--out` was `out`. Keys are portable across output locations; see
    /// [`output_key`].
    pub fn record_outputs(&mut self, path: &Path, out: &Path) -> Result<()> {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        for f in files {
            if f.file_name().is_some_and(|n| n.to_string_lossy().ends_with("manifest.json")) {
                continue;
            }
            self.outputs.insert(output_key(out, &f), file_sha256(&f)?);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

/// Key for an output file: its path relative to `out` when `out` is a
/// directory, otherwise its file name with the stem of `out` written as `{out}`.
pub fn output_key(out: &Path, file: &Path) -> String {
    if let Ok(rel) = file.strip_prefix(out) {
        if !rel.as_os_str().is_empty() {
            return rel.display().to_string();
        }
    }
    let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match out.file_stem().map(|s| s.to_string_lossy().into_owned()) {
        Some(stem) if name.starts_with(&stem) => format!("{{out}}{}", &name[stem.len()..]),
        _ => name,
    }
}

/// Inverse of [`output_key`] for a run written to `out`.
pub fn resolve_output(out: &Path, key: &str) -> PathBuf {
    match key.strip_prefix("{out}") {
        Some(rest) => {
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.with_file_name(format!("{stem}{rest}"))
        }
        None if out.is_dir() => out.join(key),
        None => out.with_file_name(key),
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for e in entries {
        collect_files(&e, out)?;
    }
    Ok(())
}

/// Where a run writing to `out` keeps its manifest.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_outputs_are_keyed_by_suffix() {
        let out = Path::new("/runs/a/report.csv");
        assert_eq!(output_key(out, Path::new("/runs/a/report.json")), "{out}.json");
        assert_eq!(output_key(out, out), "{out}.csv");
        assert_eq!(resolve_output(Path::new("/x/r2.csv"), "{out}.json"), PathBuf::from("/x/r2.json"));
    }

    #[test]
    fn directory_outputs_are_keyed_by_relative_path() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("sub").join("x.bin");
        assert_eq!(output_key(dir.path(), &f), Path::new("sub").join("x.bin").display().to_string());
        assert_eq!(resolve_output(dir.path(), "sub/x.bin"), dir.path().join("sub/x.bin"));
    }
}
