//! `key = value` run configuration. Explicit command-line flags always win
//! over config entries; config entries win over built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use voltvar::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct RunConfig {
    path: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            entries.insert(k.trim().to_string(), (v.trim().to_string(), i + 1));
        }
        Ok(RunConfig { path: path.display().to_string(), entries })
    }

    fn err(&self, key: &str, line: usize, msg: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: format!("key `{key}`: {msg}"),
        }
    }

    pub fn get_str(&self, key: &str) -> Option<String> {
        self.entries.get(key).map(|(v, _)| v.clone())
    }

    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.get_str(key).map(PathBuf::from)
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| self.err(key, *line, format!("bad float `{v}`"))),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| self.err(key, *line, format!("bad integer `{v}`"))),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| self.err(key, *line, format!("bad integer `{v}`"))),
        }
    }
}

// Flag-over-config resolution helpers.

pub fn path_or(flag: Option<PathBuf>, cfg: &RunConfig, key: &str) -> Option<PathBuf> {
    flag.or_else(|| cfg.get_path(key))
}

pub fn need_path(flag: Option<PathBuf>, cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    path_or(flag, cfg, key).ok_or_else(|| {
        Error::ModelInvalid(format!("missing --{} (or config key `{key}`)", key.replace('_', "-")))
    })
}

pub fn str_or(flag: Option<String>, cfg: &RunConfig, key: &str, default: &str) -> String {
    flag.or_else(|| cfg.get_str(key)).unwrap_or_else(|| default.to_string())
}

pub fn f64_or(flag: Option<f64>, cfg: &RunConfig, key: &str, default: f64) -> Result<f64> {
    Ok(match flag {
        Some(v) => v,
        None => cfg.get_f64(key)?.unwrap_or(default),
    })
}

pub fn f64_opt(flag: Option<f64>, cfg: &RunConfig, key: &str) -> Result<Option<f64>> {
    Ok(match flag {
        Some(v) => Some(v),
        None => cfg.get_f64(key)?,
    })
}

pub fn u64_or(flag: Option<u64>, cfg: &RunConfig, key: &str, default: u64) -> Result<u64> {
    Ok(match flag {
        Some(v) => v,
        None => cfg.get_u64(key)?.unwrap_or(default),
    })
}

pub fn usize_or(flag: Option<usize>, cfg: &RunConfig, key: &str, default: usize) -> Result<usize> {
    Ok(match flag {
        Some(v) => v,
        None => cfg.get_usize(key)?.unwrap_or(default),
    })
}

/// Positive-value guard for tolerances and rates.
pub fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::ModelInvalid(format!("`{name}` must be positive, got {v}")))
    }
}
