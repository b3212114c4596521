//! Run manifests: config snapshot, input/output inventory with content
//! digests, and wall-clock timings. Everything above the timing section is
//! deterministic for a fixed (config, seed), which is what reproducibility
//! checks compare.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use stegolab_core::error::{Error, Result};
use stegolab_core::kv::KvFile;

/// 64-bit FNV-1a over raw bytes; cheap reproducibility fingerprint.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn digest_file(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(fnv1a64(&bytes))
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub stage: String,
    pub seed: u64,
    pub config: KvFile,
    pub inputs: Vec<(String, u64)>,
    pub outputs: Vec<(String, u64)>,
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn new(stage: &str, seed: u64, config: KvFile) -> Self {
        RunManifest {
            stage: stage.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push((rel_name(path), digest_file(path)?));
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push((rel_name(path), digest_file(path)?));
        Ok(())
    }

    pub fn record_timing(&mut self, label: &str, seconds: f64) {
        self.timings.push((label.to_string(), seconds));
    }

    /// Deterministic section: identical across reruns of the same (config,
    /// seed) when the pipeline is reproducible.
    pub fn deterministic_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "stage={}", self.stage);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "[config]");
        out.push_str(&self.config.to_text());
        let _ = writeln!(out, "[inputs]");
        for (name, digest) in &self.inputs {
            let _ = writeln!(out, "{name}={digest:016x}");
        }
        let _ = writeln!(out, "[outputs]");
        for (name, digest) in &self.outputs {
            let _ = writeln!(out, "{name}={digest:016x}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = self.deterministic_text();
        let _ = writeln!(out, "[timing]");
        for (label, seconds) in &self.timings {
            let _ = writeln!(out, "{label}={seconds:.3}");
        }
        out
    }

    pub fn save(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.txt");
        std::fs::write(&path, self.to_text())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

/// Manifests reference files by name only; runs are compared across
/// different output directories.
fn rel_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| path.display().to_string())
}

/// Deterministic sections of two manifest files, for rerun comparisons.
pub fn deterministic_section(manifest_text: &str) -> &str {
    match manifest_text.find("[timing]") {
        Some(pos) => &manifest_text[..pos],
        None => manifest_text,
    }
}
