//! Atomic writes, hashing and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(hsivar_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().ok_or_else(|| CliError::Usage(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path, e)
    })
}

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

/// Inputs must exist before anything is computed or written.
pub fn require_inputs(paths: &[&Path]) -> Result<(), CliError> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::Usage(format!("input `{}` does not exist", p.display())));
        }
    }
    Ok(())
}

/// Sidecar path convention: `<output>.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn display_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Plain-text `key = value` record of one command. File names are stored
/// without directories so two runs in different places compare equal.
#[derive(Debug, Default)]
pub struct Manifest {
    lines: Vec<String>,
}

impl Manifest {
    pub fn new(verb: &str) -> Self {
        let mut m = Manifest::default();
        m.put("verb", verb);
        m.put("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} = {value}"));
    }

    /// Every line of a `key = value` block under a prefix.
    pub fn put_block(&mut self, prefix: &str, text: &str) {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            self.lines.push(format!("{prefix}.{}", line.trim()));
        }
    }

    pub fn input(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.put(&format!("input.{role}"), format!("{} sha256={}", display_name(path), sha256_hex(bytes)));
    }

    pub fn output(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.put(&format!("output.{role}"), format!("{} sha256={}", display_name(path), sha256_hex(bytes)));
    }

    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    /// Written beside the primary output as `<output>.manifest`.
    pub fn write_beside(&self, output: &Path) -> Result<(), CliError> {
        write_atomic(&sibling(output, "manifest"), self.text().as_bytes())
    }
}
