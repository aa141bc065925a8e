//! Run manifests: everything needed to repeat a training run bit for bit.
//!
//! ```text
//! tool_version = 0.1.0
//! seed = 7
//! corpus_sha256 = 3f1a…
//! artifact = metrics.log
//! artifact = model.ckpt
//! [config]
//! n_encoder_layers = 2
//! …
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use mvsa_core::training::TrainConfig;

use crate::config::{parse_train_config, write_train_config};
use crate::error::{read, read_text, write_atomic, Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const CONFIG_HEADER: &str = "[config]";

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    /// Lowercase hex SHA-256 over the corpus files.
    pub corpus_sha256: String,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub config: TrainConfig,
}

/// Hashes each file's name and length-prefixed contents, in the given order.
pub fn fingerprint(files: &[std::path::PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let bytes = read(f)?;
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "tool_version = {}\nseed = {}\ncorpus_sha256 = {}\n",
            self.tool_version, self.seed, self.corpus_sha256
        );
        for a in &self.artifacts {
            s.push_str(&format!("artifact = {a}\n"));
        }
        s.push_str(CONFIG_HEADER);
        s.push('\n');
        s.push_str(&write_train_config(&self.config));
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (head, config) = text
            .split_once(&format!("{CONFIG_HEADER}\n"))
            .ok_or_else(|| Error::format(path, format!("missing `{CONFIG_HEADER}` section")))?;
        let config = parse_train_config(config).map_err(|e| Error::format(path, format!("config {e}")))?;
        let (mut version, mut seed, mut hash, mut artifacts) = (None, None, None, Vec::new());
        for (i, line) in head.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::format(path, format!("line {}: `{line}`", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            let v = v.trim().to_string();
            match k.trim() {
                "tool_version" => version = Some(v),
                "seed" => seed = Some(v.parse().map_err(|_| bad())?),
                "corpus_sha256" => hash = Some(v),
                "artifact" => artifacts.push(v),
                _ => return Err(bad()),
            }
        }
        let missing = |k: &str| Error::format(path, format!("missing `{k}`"));
        Ok(RunManifest {
            tool_version: version.ok_or_else(|| missing("tool_version"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            corpus_sha256: hash.ok_or_else(|| missing("corpus_sha256"))?,
            artifacts,
            config,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }
}
