//! Optional TOML config file.
//!
//! Top-level keys hold the global options; one table per subcommand holds
//! that command's options under the same names as its flags (with `_` for
//! `-`). Relative paths are resolved against the config file's directory.
//! Command-line flags override file values.
//!
//! ```toml
//! seed = 3
//! out_dir = "runs"
//!
//! [attack]
//! spec = "target.net"
//! weights = "target.w"
//! data = "mnist"
//! type = 2
//! tap = "pool2"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub log_every: Option<usize>,
    pub train: TrainSection,
    pub attack: AttackSection,
    #[serde(rename = "compare-layers", alias = "compare_layers")]
    pub compare_layers: CompareSection,
    pub audit: AuditSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub spec: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub oracle: Option<bool>,
    pub seeds: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub spec: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub data: Option<PathBuf>,
    #[serde(rename = "type")]
    pub kind: Option<u8>,
    pub tap: Option<String>,
    pub sample: Option<String>,
    pub donor: Option<String>,
    pub source_class: Option<usize>,
    pub donor_class: Option<usize>,
    pub preset: Option<String>,
    pub steps: Option<String>,
    pub iterations: Option<usize>,
    pub step: Option<f64>,
    pub lambda: Option<String>,
    pub label: Option<usize>,
    pub oracle_spec: Option<PathBuf>,
    pub oracle_weights: Option<Vec<PathBuf>>,
    pub no_clamp: Option<bool>,
    pub name: Option<String>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub spec: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub seeds: Option<String>,
    pub taps: Option<Vec<String>>,
    pub iterations: Option<usize>,
    pub step: Option<f64>,
    pub source_class: Option<usize>,
    pub donor_class: Option<usize>,
    pub name: Option<String>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub spec: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub trials: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: ConfigFile = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.train.spec,
            &mut self.train.data,
            &mut self.train.out,
        ] {
            fix(p);
        }
        for p in [
            &mut self.attack.spec,
            &mut self.attack.weights,
            &mut self.attack.data,
            &mut self.attack.oracle_spec,
        ] {
            fix(p);
        }
        if let Some(list) = &mut self.attack.oracle_weights {
            for p in list.iter_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        for p in [
            &mut self.compare_layers.spec,
            &mut self.compare_layers.weights,
            &mut self.compare_layers.data,
        ] {
            fix(p);
        }
        fix(&mut self.audit.spec);
        fix(&mut self.audit.weights);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_rebasing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 4\n[attack]\nspec = \"t.net\"\ntype = 2\n[compare-layers]\ntaps = [\"pool1\"]\n",
        )
        .unwrap();
        let cfg = ConfigFile::load(&path).unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.attack.kind, Some(2));
        assert_eq!(cfg.attack.spec, Some(dir.path().join("t.net")));
        assert_eq!(cfg.compare_layers.taps, Some(vec!["pool1".to_string()]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[attack]\nsteps_typo = 1\n").unwrap();
        assert!(matches!(
            ConfigFile::load(&path),
            Err(CliError::Config { .. })
        ));
    }
}
