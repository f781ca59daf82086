//! Run configuration: JSON file with every field optional, layered as
//! defaults, then the file, then command-line overrides.

use std::path::{Path, PathBuf};

use ifrp::losses::TrainSchedule;
use ifrp::networks::{DnConfig, SrnConfig};
use ifrp::optim::{RmspropConfig, TrainLoopConfig};
use ifrp::psi::ExtractorSpec;
use ifrp::synth::{ManifestSpec, PerturbRanges};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DATA_ROOT_ENV: &str = "IFRP_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub resolution: usize,
    pub srn_channels: [usize; 4],
    pub dn_channels: [usize; 4],
    pub use_stn: bool,
    pub batch_size: usize,
    pub epochs: u64,
    pub lr: f64,
    pub lr_decay: f64,
    pub rho: f64,
    pub rms_eps: f64,
    /// Learning-rate multiplier for the STN localization networks.
    pub stn_lr_scale: f64,
    pub lambda0: f64,
    pub eta0: f64,
    pub d_steps: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub extractor: ExtractorConfig,
    pub paths: PathsConfig,
    /// Most recent epoch checkpoints kept on disk.
    pub keep_checkpoints: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Procedural identities generated when `face_dir` is unset.
    pub num_identities: u32,
    /// Directory of aligned real face PNGs to use instead.
    pub face_dir: Option<PathBuf>,
    pub seen_styles: Vec<u32>,
    pub unseen_styles: Vec<u32>,
    pub pairs_per_style: usize,
    pub test_fraction: f64,
    pub rot_max_deg: f64,
    pub trans_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub kind: String,
    pub seed: u64,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let srn = SrnConfig::with_resolution(128);
        let dn = DnConfig::with_resolution(128);
        let opt = RmspropConfig::default();
        let sched = TrainSchedule::default();
        Self {
            resolution: 128,
            srn_channels: srn.channels,
            dn_channels: dn.channels,
            use_stn: true,
            batch_size: TrainLoopConfig::default().batch_size,
            epochs: 60,
            lr: opt.lr0,
            lr_decay: opt.decay,
            rho: opt.rho,
            rms_eps: opt.eps,
            stn_lr_scale: opt.localization_lr_scale,
            lambda0: sched.lambda0,
            eta0: sched.eta0,
            d_steps: 1,
            seed: 0,
            data: DataConfig::default(),
            extractor: ExtractorConfig::default(),
            paths: PathsConfig::default(),
            keep_checkpoints: 2,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = ManifestSpec::default();
        Self {
            num_identities: 64,
            face_dir: None,
            seen_styles: spec.seen_styles,
            unseen_styles: spec.unseen_styles,
            pairs_per_style: spec.pairs_per_style,
            test_fraction: spec.test_fraction,
            rot_max_deg: spec.perturb.rot_max_deg,
            trans_max: spec.perturb.trans_max,
            scale_min: spec.perturb.scale.0,
            scale_max: spec.perturb.scale.1,
        }
    }
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        let spec = ExtractorSpec::tiny_fixed(0);
        Self {
            kind: spec.kind,
            seed: spec.seed,
            path: None,
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data")),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

/// Values given on the command line; each one replaces the file's.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
    pub epochs: Option<u64>,
    pub batch_size: Option<usize>,
    pub data_root: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Defaults, then `file` if given, then `over`.
    pub fn resolve(file: Option<&Path>, over: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(over);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, over: &Overrides) {
        if let Some(v) = over.seed {
            self.seed = v;
        }
        if let Some(v) = over.resolution {
            self.resolution = v;
        }
        if let Some(v) = over.epochs {
            self.epochs = v;
        }
        if let Some(v) = over.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = &over.data_root {
            self.paths.data_root = v.clone();
        }
        if let Some(v) = &over.checkpoint_dir {
            self.paths.checkpoint_dir = v.clone();
        }
        if let Some(v) = &over.report_dir {
            self.paths.report_dir = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.srn().validate()?;
        if self.batch_size < 2 {
            return Err(CliError::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.d_steps == 0 {
            return Err(CliError::Config("d_steps must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.stn_lr_scale >= 0.0 && self.stn_lr_scale.is_finite()) {
            return Err(CliError::Config(format!("stn_lr_scale must be non-negative, got {}", self.stn_lr_scale)));
        }
        if self.keep_checkpoints == 0 {
            return Err(CliError::Config("keep_checkpoints must be at least 1".into()));
        }
        self.manifest_spec().validate()?;
        Ok(())
    }

    pub fn srn(&self) -> SrnConfig {
        SrnConfig {
            resolution: self.resolution,
            channels: self.srn_channels,
            use_stn: self.use_stn,
        }
    }

    pub fn dn(&self) -> DnConfig {
        DnConfig {
            resolution: self.resolution,
            channels: self.dn_channels,
        }
    }

    pub fn rmsprop(&self) -> RmspropConfig {
        RmspropConfig {
            lr0: self.lr,
            rho: self.rho,
            eps: self.rms_eps,
            decay: self.lr_decay,
            localization_lr_scale: self.stn_lr_scale,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            lambda0: self.lambda0,
            eta0: self.eta0,
            ..TrainSchedule::default()
        }
    }

    pub fn loop_config(&self) -> TrainLoopConfig {
        TrainLoopConfig {
            batch_size: self.batch_size,
            seed: self.seed,
            d_steps: self.d_steps,
        }
    }

    pub fn manifest_spec(&self) -> ManifestSpec {
        let d = &self.data;
        ManifestSpec {
            seen_styles: d.seen_styles.clone(),
            unseen_styles: d.unseen_styles.clone(),
            pairs_per_style: d.pairs_per_style,
            test_fraction: d.test_fraction,
            seed: self.seed,
            perturb: PerturbRanges {
                rot_max_deg: d.rot_max_deg,
                trans_max: d.trans_max,
                scale: (d.scale_min, d.scale_max),
            },
        }
    }

    pub fn extractor_spec(&self) -> ExtractorSpec {
        ExtractorSpec {
            kind: self.extractor.kind.clone(),
            seed: self.extractor.seed,
            path: self.extractor.path.clone(),
        }
    }

    /// The copy stored in checkpoints. Paths describe where a run lives, not
    /// what it computes, so they are reset to keep checkpoints relocatable.
    pub fn echo(&self) -> Self {
        Self {
            paths: PathsConfig {
                data_root: PathBuf::new(),
                checkpoint_dir: PathBuf::new(),
                report_dir: PathBuf::new(),
            },
            ..self.clone()
        }
    }

    /// Everything that must agree for a resumed run to continue the same
    /// trajectory.
    pub fn trajectory_key(&self) -> String {
        let mut c = self.echo();
        c.epochs = 0;
        c.keep_checkpoints = 0;
        serde_json::to_string(&c).expect("config serializes")
    }
}
