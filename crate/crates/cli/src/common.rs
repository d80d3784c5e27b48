use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use deshadow_core::config::Config;
use deshadow_core::trainer::RunManifest;
use sha2::{Digest, Sha256};

use crate::{ConfigArgs, DataArgs};

pub const DATA_ROOT_ENV: &str = "DESHADOW_DATA_ROOT";

/// Marks an error as the caller's fault (exit status 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(deshadow_core::Error::Config(_)) = cause.downcast_ref::<deshadow_core::Error>() {
            return 1;
        }
    }
    2
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| usage(format!("override {s:?} is not KEY=VALUE")))
}

pub fn apply_overrides(cfg: &mut Config, overrides: &[String]) -> Result<()> {
    let pairs = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>>>()?;
    cfg.set_many(&pairs)?;
    Ok(())
}

/// Config from a TOML file or a run manifest, then `--set` overrides.
pub fn load_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        None => Config::default(),
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let manifest: RunManifest =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: not a run manifest: {e}", p.display())))?;
            manifest.config.validate()?;
            manifest.config
        }
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("config file {} does not exist", p.display())));
            }
            Config::load(p)?
        }
    };
    apply_overrides(&mut cfg, &args.overrides)?;
    Ok(cfg)
}

/// Flag or environment first, then the config's `data.root`.
pub fn data_root(args: &DataArgs, cfg: &Config) -> Result<PathBuf> {
    let root = args
        .data_root
        .clone()
        .or_else(|| cfg.data.root.clone())
        .ok_or_else(|| usage(format!("no dataset root: pass --data-root, set {DATA_ROOT_ENV} or data.root")))?;
    if !root.is_dir() {
        return Err(usage(format!("dataset root {} is not a directory", root.display())));
    }
    Ok(root)
}

pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// Fresh `<base>/<prefix>-<UTC timestamp>-<hash>` directory.
pub fn new_run_dir(base: &Path, prefix: &str, hash_input: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let name = format!("{prefix}-{stamp}-{}", short_hash(hash_input));
    let mut dir = base.join(&name);
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = base.join(format!("{name}-{k}"));
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", p.display())))
    }
}

pub fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", p.display())))
    }
}
