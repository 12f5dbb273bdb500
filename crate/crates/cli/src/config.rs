//! Run configuration: defaults, then an optional `key = value` file, then
//! command-line flags. The resolved settings are written to the output
//! directory as `config.txt` in the same grammar.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// File name of the resolved configuration in every output directory.
pub const RESOLVED: &str = "config.txt";

/// A configuration key accepted by a subcommand. The flag is the key with
/// `_` replaced by `-`.
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    /// Takes several values; stored comma-separated.
    pub multi: bool,
}

const fn key(name: &'static str, help: &'static str) -> Key {
    Key { name, help, multi: false }
}

const fn multi(name: &'static str, help: &'static str) -> Key {
    Key { name, help, multi: true }
}

pub const GEN_DATA: &[Key] = &[
    key("out", "dataset directory to write"),
    key("seed", "generation seed"),
    key("size", "image height and width"),
    key("n_train", "training images"),
    key("n_val", "validation images"),
    key("n_test", "test images"),
    key("ellipses_min", "fewest inner ellipses per image"),
    key("ellipses_max", "most inner ellipses per image"),
    key("roi_contrast", "ROI intensity relative to the brightest other tissue"),
    key("roi_fraction", "fraction of images containing an ROI"),
    key("phase_amplitude", "largest phase excursion in radians"),
    key("phase_order", "degree of the phase polynomial"),
    key("intensity_scale", "peak magnitude"),
];

pub const TRAIN: &[Key] = &[
    key("data", "dataset directory"),
    key("out", "run directory to write"),
    key("seed", "training seed"),
    key("preset", "architecture and schedule preset: desk or paper"),
    key("epochs", "training epochs"),
    key("batch_size", "images per optimizer step"),
    key("lr", "Adam learning rate"),
    key("beta1", "Adam beta1"),
    key("beta2", "Adam beta2"),
    key("ratio", "fraction of k-space columns sampled"),
    key("noise_std", "complex Gaussian noise on measured k-space"),
    key("smoothing", "one-sided label smoothing of the discriminator"),
    key("replay_capacity", "replay buffer capacity"),
    key("replay_p", "probability of drawing a discriminator fake from the buffer"),
    key("train_limit", "use only the first N training images (or none)"),
    key("val_limit", "use only the first N validation images (or none)"),
    key("max_steps", "stop after N optimizer steps, leaving a resumable state (or none)"),
];

pub const TRAIN_REFINE_EXTRA: &[Key] = &[key("stage1_ckpt", "stage-1 run or checkpoint directory")];

pub const RECON: &[Key] = &[
    key("data", "dataset directory"),
    key("out", "directory for reconstructed test images"),
    key("ckpt", "stage-1 run or checkpoint directory"),
    key("refine_ckpt", "stage-2 run or refiner checkpoint directory"),
    key("seed", "seed of the test-set sampling masks"),
    key("ratio", "fraction of k-space columns sampled"),
    key("noise_std", "complex Gaussian noise on measured k-space"),
];

pub const EVAL: &[Key] = &[
    key("data", "dataset directory"),
    key("out", "directory for metrics reports"),
    multi("ckpts", "run directories to evaluate (stage-1, stage-2, joint) or 'identity'"),
    key("seg_ckpt", "segmenter run or checkpoint directory"),
    key("seed", "seed of the test-set sampling masks"),
    key("ratio", "fraction of k-space columns sampled"),
    key("noise_std", "complex Gaussian noise on measured k-space"),
    key("ssim_window", "gaussian (11x11, sigma 1.5) or block8"),
    key("panels", "test images saved for reconstruction panels"),
];

pub const REPORT: &[Key] = &[
    multi("eval_dirs", "eval output directories to compare"),
    key("out", "directory for tables and plots"),
];

/// Resolved `key -> value` settings of one command.
#[derive(Debug, Clone)]
pub struct Settings {
    command: String,
    values: BTreeMap<String, String>,
    keys: Vec<Key>,
}

/// Parses the `key = value` grammar. Blank lines and text after `#` are
/// ignored; a key may appear once.
pub fn parse_file(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected 'key = value', got '{}'", origin.display(), n + 1, line))?;
        let (k, v) = (k.trim().replace('-', "_"), v.trim().to_string());
        if k.is_empty() {
            bail!("{}:{}: missing key", origin.display(), n + 1);
        }
        if out.insert(k.clone(), v).is_some() {
            bail!("{}:{}: key '{}' given twice", origin.display(), n + 1, k);
        }
    }
    Ok(out)
}

impl Settings {
    pub fn new(command: &str, keys: &[Key]) -> Self {
        Self { command: command.into(), values: BTreeMap::new(), keys: keys.to_vec() }
    }

    fn known(&self, k: &str) -> bool {
        self.keys.iter().any(|key| key.name == k)
    }

    /// Merges a configuration file; unknown keys are an error.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        for (k, v) in parse_file(&text, path)? {
            if !self.known(&k) {
                bail!("{}: unknown key '{}' for {}", path.display(), k, self.command);
            }
            self.values.insert(k, v);
        }
        Ok(())
    }

    /// Sets a value, overriding the file.
    pub fn set(&mut self, k: &str, v: impl Into<String>) {
        debug_assert!(self.known(k), "unregistered key {k}");
        self.values.insert(k.into(), v.into());
    }

    /// Sets a value only if none was given.
    pub fn fallback(&mut self, k: &str, v: impl Display) {
        if !self.values.contains_key(k) {
            self.set(k, v.to_string());
        }
    }

    pub fn raw(&self, k: &str) -> Option<&str> {
        self.values.get(k).map(String::as_str)
    }

    pub fn require(&self, k: &str) -> Result<&str> {
        self.raw(k).ok_or_else(|| anyhow!("{} needs --{}", self.command, k.replace('_', "-")))
    }

    pub fn path(&self, k: &str) -> Result<PathBuf> {
        self.require(k).map(PathBuf::from)
    }

    pub fn opt_path(&self, k: &str) -> Option<PathBuf> {
        self.raw(k).filter(|v| !is_none(v)).map(PathBuf::from)
    }

    pub fn get<T: FromStr>(&self, k: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.require(k)?;
        v.parse().map_err(|e| anyhow!("invalid value '{v}' for {k}: {e}"))
    }

    /// A value that may be `none`.
    pub fn opt<T: FromStr>(&self, k: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(k) {
            None => Ok(None),
            Some(v) if is_none(v) => Ok(None),
            Some(_) => self.get(k).map(Some),
        }
    }

    pub fn list(&self, k: &str) -> Vec<String> {
        self.raw(k).map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()).unwrap_or_default()
    }

    /// The resolved configuration in file grammar, keys sorted.
    pub fn render(&self) -> String {
        let mut out = format!("# resolved configuration of `{}`\ncommand = {}\n", self.command, self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(RESOLVED);
        fs::write(&path, self.render()).with_context(|| format!("cannot write {}", path.display()))
    }
}

fn is_none(v: &str) -> bool {
    v.eq_ignore_ascii_case("none") || v.is_empty()
}

/// Reads a `config.txt` written by an earlier run.
pub fn read_resolved(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(RESOLVED);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_file(&text, &path)
}
