//! Experiment directory layout, locking and guarded writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use porestack::models::Family;

use crate::config::{ExperimentConfig, CONFIG_FILE};
use crate::error::{Category, CliError, Result};

pub const LOCK_FILE: &str = ".porestack.lock";

pub struct Workspace {
    pub root: PathBuf,
    pub config: ExperimentConfig,
}

impl Workspace {
    /// Config from `config` if given, else `<root>/experiment.toml` if it
    /// exists, else defaults.
    pub fn open(root: &Path, config: Option<&Path>) -> Result<Self> {
        let default_path = root.join(CONFIG_FILE);
        let config = match config {
            Some(p) => ExperimentConfig::load(p)?,
            None if default_path.exists() => ExperimentConfig::load(&default_path)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self {
            root: root.to_path_buf(),
            config,
        })
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join(&self.config.data.dir)
    }

    pub fn stats_path(&self) -> PathBuf {
        self.root.join("stats.json")
    }

    pub fn model_dir(&self, family: Family) -> PathBuf {
        self.root.join("models").join(family.name())
    }

    pub fn results_dir(&self, family: Family, level: usize) -> PathBuf {
        self.root.join("results").join(family.name()).join(format!("L{level}"))
    }

    pub fn eval_dir(&self, family: Family, level: usize) -> PathBuf {
        self.root.join("eval").join(family.name()).join(format!("L{level}"))
    }

    pub fn bulk_dir(&self) -> PathBuf {
        self.root.join("bulk")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

/// Exclusive per-experiment lock, released on drop.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                Err(CliError::new(
                    Category::Locked,
                    format!(
                        "{} is held by process {}; remove it if that process is gone",
                        path.display(),
                        holder.trim()
                    ),
                ))
            }
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Fail if `path` exists, unless `force`, in which case it is removed.
pub fn claim(path: &Path, force: bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(CliError::new(
            Category::Exists,
            format!("{} already exists; pass --force to replace it", path.display()),
        ));
    }
    let removed = if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    };
    removed.map_err(|e| CliError::io(path, e))
}

/// Write a file; identical existing content is left alone, differing
/// content needs `force`.
pub fn write_output(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if let Ok(old) = fs::read(path) {
        if old == bytes {
            return Ok(());
        }
        if !force {
            return Err(CliError::new(
                Category::Exists,
                format!("{} exists with different content; pass --force to replace it", path.display()),
            ));
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(what, path, hint))
    }
}
