//! Epoch checkpoints on disk and the lock that guards their directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use ifrp::checkpoint::Archive;
use ifrp::networks::{build_dn, build_srn};
use ifrp::optim::{RmspropState, TrainState};
use ifrp::psi::FeatureExtractor;
use ifrp::Error;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

const PREFIX: &str = "epoch_";
const SUFFIX: &str = ".ckpt";
const LOCK_FILE: &str = ".lock";

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("{PREFIX}{epoch:04}{SUFFIX}"))
}

fn epoch_of(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix(PREFIX)?.strip_suffix(SUFFIX)?.parse().ok()
}

/// Epoch checkpoints in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<(u64, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| epoch_of(&p).map(|n| (n, p)))
        .collect();
    out.sort();
    Ok(out)
}

pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    Ok(list_checkpoints(dir)?.pop().map(|(_, p)| p))
}

/// Deletes all but the newest `keep` checkpoints.
pub fn prune(dir: &Path, keep: usize) -> Result<()> {
    let all = list_checkpoints(dir)?;
    let excess = all.len().saturating_sub(keep);
    for (_, p) in &all[..excess] {
        fs::remove_file(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Exclusive lock on a checkpoint directory, released on drop.
pub struct DirLock {
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(CliError::Locked(dir.display().to_string())),
            Err(fs::TryLockError::Error(e)) => Err(Error::io(&path, e).into()),
        }
    }
}

fn push_optimizer(a: &mut Archive, prefix: &str, s: &RmspropState) -> ifrp::Result<()> {
    for (k, v) in s.tensors() {
        a.push(format!("{prefix}.v.{k}"), v.clone())?;
    }
    Ok(())
}

fn optimizer(a: &Archive, prefix: &str) -> RmspropState {
    let head = format!("{prefix}.v.");
    let v: BTreeMap<String, _> = a
        .records()
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(&head).map(|k| (k.to_string(), t.clone())))
        .collect();
    RmspropState::from_map(v)
}

/// Serializes the full training state plus the config that produced it.
pub fn to_archive(state: &TrainState, cfg: &RunConfig, psi: &dyn FeatureExtractor) -> Result<Archive> {
    let mut a = Archive::new();
    a.push_bytes("config", cfg.echo().to_json().as_bytes())?;
    a.push_counter("epoch", state.epoch)?;
    a.push_model("theta", &state.theta)?;
    a.push_model("phi", &state.phi)?;
    push_optimizer(&mut a, "opt_theta", &state.opt_theta)?;
    push_optimizer(&mut a, "opt_phi", &state.opt_phi)?;
    if cfg.extractor.kind != "tiny-fixed" {
        a.push_model("psi", psi.params())?;
    }
    Ok(a)
}

pub fn save_state(dir: &Path, state: &TrainState, cfg: &RunConfig, psi: &dyn FeatureExtractor) -> Result<PathBuf> {
    let path = checkpoint_path(dir, state.epoch);
    to_archive(state, cfg, psi)?.save(&path)?;
    Ok(path)
}

/// The config echo stored in a checkpoint.
pub fn stored_config(a: &Archive) -> Result<RunConfig> {
    let bytes = a.bytes("config")?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Corrupt("config echo is not UTF-8".into()))?;
    RunConfig::from_json(&text).map_err(|e| Error::Corrupt(format!("config echo: {e}")).into())
}

/// Rebuilds the training state, checking every tensor against the
/// architecture the stored config describes.
pub fn state_from_archive(a: &Archive) -> Result<(TrainState, RunConfig)> {
    let cfg = stored_config(a)?;
    let corrupt = |e: ifrp::Error| -> CliError {
        match e {
            Error::InvalidArgument(m) => Error::Corrupt(m).into(),
            other => other.into(),
        }
    };
    let theta_ref = build_srn(&cfg.srn(), 0).map_err(corrupt)?;
    let phi_ref = build_dn(&cfg.dn(), 0).map_err(corrupt)?;
    let theta = a.model("theta", &theta_ref)?;
    let phi = a.model("phi", &phi_ref)?;
    let opt_theta = optimizer(a, "opt_theta");
    let opt_phi = optimizer(a, "opt_phi");
    opt_theta.check_schema(&theta).map_err(corrupt)?;
    opt_phi.check_schema(&phi).map_err(corrupt)?;
    let state = TrainState {
        theta,
        phi,
        opt_theta,
        opt_phi,
        epoch: a.counter("epoch")?,
    };
    Ok((state, cfg))
}

pub fn load_state(path: &Path) -> Result<(TrainState, RunConfig)> {
    state_from_archive(&Archive::load(path)?)
}
