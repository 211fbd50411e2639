use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, RunConfig};

/// The command line that produced a run, archived next to its outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Invocation {
    pub command: String,
    pub options: Vec<(String, String)>,
}

impl Invocation {
    pub fn new(command: &str) -> Self {
        Invocation { command: command.into(), options: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.options.push((key.into(), value.to_string()));
        self
    }
}

/// First 12 hex digits of the SHA-256 of the resolved config and invocation.
pub fn config_hash(cfg: &RunConfig, inv: &Invocation) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_toml().as_bytes());
    h.update(serde_json::to_vec(inv).expect("invocation serializes"));
    hex::encode(h.finalize())[..12].to_string()
}

/// Creates `<output_root>/<UTC timestamp>-<hash>` (with a numeric suffix on
/// collision) and archives `config.toml` and `invocation.json` in it.
pub fn create_run_dir(cfg: &RunConfig, inv: &Invocation) -> Result<PathBuf, CliError> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{}", config_hash(cfg, inv));
    fs::create_dir_all(&cfg.output_root).map_err(hwau_core::Error::from)?;
    let mut dir = cfg.output_root.join(&base);
    let mut n = 1;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => break,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = cfg.output_root.join(format!("{base}-{n}"));
                n += 1;
            }
            Err(e) => return Err(hwau_core::Error::from(e).into()),
        }
    }
    archive(&dir, cfg, inv)?;
    Ok(dir)
}

pub(crate) fn archive(dir: &Path, cfg: &RunConfig, inv: &Invocation) -> Result<(), CliError> {
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(hwau_core::Error::from)?;
    let inv = serde_json::to_string_pretty(inv).expect("invocation serializes");
    fs::write(dir.join("invocation.json"), inv + "\n").map_err(hwau_core::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_are_unique_and_archived() {
        let root = tempfile::tempdir().unwrap();
        let cfg = RunConfig { output_root: root.path().to_path_buf(), ..RunConfig::default() };
        let inv = Invocation::new("train");
        let a = create_run_dir(&cfg, &inv).unwrap();
        let b = create_run_dir(&cfg, &inv).unwrap();
        assert_ne!(a, b);
        let hash = config_hash(&cfg, &inv);
        for d in [&a, &b] {
            assert!(d.file_name().unwrap().to_str().unwrap().contains(&hash));
            let archived: RunConfig = toml::from_str(&fs::read_to_string(d.join("config.toml")).unwrap()).unwrap();
            assert_eq!(archived, cfg);
        }
    }

    #[test]
    fn hash_tracks_config_and_command() {
        let cfg = RunConfig::default();
        let other = RunConfig { seed: 1, ..RunConfig::default() };
        let inv = Invocation::new("train");
        assert_eq!(config_hash(&cfg, &inv).len(), 12);
        assert_ne!(config_hash(&cfg, &inv), config_hash(&other, &inv));
        assert_ne!(config_hash(&cfg, &inv), config_hash(&cfg, &Invocation::new("ablate")));
    }
}
