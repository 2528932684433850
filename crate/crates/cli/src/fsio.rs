//! Input loading and atomic output writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cascade_core::corpus::{parse_corpus, Corpus, LabelSpace};
use cascade_core::ensemble::{parse_ensemble_log, EnsembleLog};
use cascade_core::router::InputFile;

use crate::exit::invalid;

pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

fn utf8<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a str> {
    std::str::from_utf8(bytes).map_err(|e| invalid(format!("{} is not UTF-8: {e}", path.display())))
}

/// Label space from a label file or a comma-separated list.
pub fn label_space(file: Option<&Path>, inline: Option<&str>, oos_token: &str) -> Result<LabelSpace> {
    match (file, inline) {
        (Some(_), Some(_)) => Err(invalid("give either --labels-file or --labels, not both")),
        (Some(path), None) => LabelSpace::from_file(path, oos_token).map_err(Into::into),
        (None, Some(list)) => LabelSpace::new(list.split(',').map(str::trim), oos_token).map_err(Into::into),
        (None, None) => Err(invalid("a label space is required: --labels-file or --labels")),
    }
}

pub fn load_corpus(path: &Path, ls: &LabelSpace) -> Result<(Corpus, InputFile)> {
    let bytes = read_input(path)?;
    let corpus = parse_corpus(utf8(path, &bytes)?, ls).with_context(|| format!("in corpus {}", path.display()))?;
    Ok((corpus, InputFile::from_bytes(path.display().to_string(), &bytes)))
}

pub fn load_ensemble(path: &Path, ls: &LabelSpace, runs: usize) -> Result<(EnsembleLog, InputFile)> {
    let bytes = read_input(path)?;
    let log = parse_ensemble_log(utf8(path, &bytes)?, ls, runs)
        .with_context(|| format!("in ensemble log {}", path.display()))?;
    Ok((log, InputFile::from_bytes(path.display().to_string(), &bytes)))
}

/// Re-reads an input named by a manifest and checks its digest.
pub fn verify_input(file: &InputFile) -> Result<Vec<u8>> {
    let bytes = read_input(Path::new(&file.path))?;
    let actual = InputFile::from_bytes(file.path.clone(), &bytes);
    if actual.sha256 != file.sha256 {
        return Err(invalid(format!(
            "{} changed since the manifest was written (sha256 {} != {})",
            file.path, actual.sha256, file.sha256
        )));
    }
    Ok(bytes)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Fails early if an output cannot be created in its directory.
pub fn check_output(path: &Path) -> Result<()> {
    let dir = parent_dir(path);
    if !dir.is_dir() {
        return Err(invalid(format!("output directory {} does not exist", dir.display())));
    }
    if path.is_dir() {
        return Err(invalid(format!("output {} is a directory", path.display())));
    }
    Ok(())
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(parent_dir(path))
        .with_context(|| format!("cannot create temporary file for {}", path.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
