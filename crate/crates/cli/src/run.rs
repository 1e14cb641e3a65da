//! Plumbing shared by the subcommands: effective configuration, output
//! layout, directory locks and the exit-code contract.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rlhb_core::train::{Lab, TrainConfig};
use rlhb_core::Error;

use crate::{Common, OUTPUT_ROOT_VAR};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PREREQUISITE: u8 = 3;
pub const EXIT_COLLAPSE: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::MissingPrerequisite(_) | Error::VersionMismatch { .. } => EXIT_PREREQUISITE,
            Error::Diverged { .. } | Error::NonFinite(_) => EXIT_COLLAPSE,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_FAILURE, e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Config file, then `--set` overrides, then `--seed`.
pub fn effective_config(common: &Common) -> CliResult<TrainConfig> {
    let base = match &common.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn output_root(common: &Common) -> PathBuf {
    common.out.clone().or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Effective configuration echoed to stdout before any work starts.
pub fn echo_config(cfg: &TrainConfig) {
    println!("# effective configuration (hash {})", cfg.hash());
    print!("{}", cfg.to_toml());
    println!();
}

pub fn lab(cfg: &TrainConfig) -> CliResult<Lab> {
    Ok(Lab::new(cfg.clone())?)
}

/// Exclusive claim on an output directory for one invocation.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const NAME: &'static str = ".rlhb.lock";

    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::new(
                EXIT_FAILURE,
                format!("{} is in use by another invocation (remove {} if that process is gone)", dir.display(), path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Fail with an actionable message when an input artifact is absent.
pub fn require(path: &Path, what: &str, how: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_PREREQUISITE, format!("missing {what} at {}; run `rlhb {how}` first", path.display())))
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}
