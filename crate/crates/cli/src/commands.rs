use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ifrp::autodiff::Mode;
use ifrp::checkpoint::Archive;
use ifrp::gradcheck::{standard_suite, CheckRow};
use ifrp::metrics::{build_report, EvalSample, MetricsReport, DEFAULT_TOP_K};
use ifrp::networks::{srn_forward, ModelParams, Side, SrnConfig};
use ifrp::optim::{train_epoch, EpochSummary, TrainSetup, TrainState, LOG_HEADER};
use ifrp::psi::{ConvStack, ExtractorRegistry, FeatureExtractor};
use ifrp::synth::faces::synthetic_face;
use ifrp::synth::{self, build_manifest, Image, PairManifest, Split};
use ifrp::tensor::Tensor;
use ifrp::Error;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::store;

pub const LOSS_LOG: &str = "losses.csv";
pub const REPORT_CSV: &str = "metrics.csv";
pub const REPORT_TEXT: &str = "metrics.txt";
pub const RECOVERED_SUFFIX: &str = ".recovered.png";
const RECOVER_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutcome {
    /// Pairs per `(split, style)`.
    pub counts: BTreeMap<(Split, u32), usize>,
    pub files_written: usize,
    pub up_to_date: bool,
}

impl SynthOutcome {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for ((split, style), n) in &self.counts {
            writeln!(s, "{split} style {style}: {n} pairs").unwrap();
        }
        for split in [Split::Train, Split::Test] {
            let total: usize = self.counts.iter().filter(|((sp, _), _)| *sp == split).map(|(_, n)| n).sum();
            writeln!(s, "{split} total: {total} pairs").unwrap();
        }
        if self.up_to_date {
            s.push_str("up-to-date\n");
        } else {
            writeln!(s, "wrote {} files", self.files_written).unwrap();
        }
        s
    }
}

fn source_faces(cfg: &RunConfig) -> Result<Vec<(u32, Image)>> {
    match &cfg.data.face_dir {
        Some(dir) => Ok(synth::ingest(dir, cfg.resolution)?
            .into_iter()
            .enumerate()
            .map(|(i, (_, img))| (i as u32, img))
            .collect()),
        None => {
            if cfg.data.num_identities == 0 {
                return Err(CliError::Config("num_identities must be positive".into()));
            }
            Ok((0..cfg.data.num_identities)
                .map(|i| (i, synthetic_face(i, cfg.resolution, cfg.seed)))
                .collect())
        }
    }
}

pub fn synth(cfg: &RunConfig) -> Result<SynthOutcome> {
    let faces = source_faces(cfg)?;
    let built = build_manifest(&faces, &cfg.manifest_spec(), &cfg.paths.data_root)?;
    let mut counts = built.train.counts();
    counts.extend(built.test.counts());
    Ok(SynthOutcome {
        counts,
        files_written: built.files_written,
        up_to_date: built.up_to_date(),
    })
}

/// The configured extractor. Weights stored in a checkpoint take precedence
/// over the configured path for non-default kinds.
pub fn extractor(cfg: &RunConfig, archive: Option<&Archive>) -> Result<Box<dyn FeatureExtractor>> {
    if let Some(a) = archive {
        if cfg.extractor.kind != "tiny-fixed" && a.get("psi.param.block1.conv1.weight").is_some() {
            let params = a.model_unchecked("psi", Side::Psi)?;
            return Ok(Box::new(ConvStack::from_params(&cfg.extractor.kind, params)?));
        }
    }
    Ok(ExtractorRegistry::default().build(&cfg.extractor_spec())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub resumed_from: Option<u64>,
    pub summaries: Vec<EpochSummary>,
    pub final_epoch: u64,
    pub checkpoint: Option<PathBuf>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Rows of an existing loss log for epochs before `upto`.
fn previous_rows(path: &Path, upto: u64) -> Result<Vec<String>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Corrupt(format!("{} has an unexpected header", path.display())).into());
    }
    Ok(lines
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<u64>().ok())
                .is_some_and(|e| e < upto)
        })
        .map(str::to_string)
        .collect())
}

/// Trains up to `cfg.epochs`, resuming from the newest checkpoint in the
/// checkpoint directory. Each epoch appends a loss row, then writes a
/// checkpoint.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dir = &cfg.paths.checkpoint_dir;
    let _lock = store::DirLock::acquire(dir)?;
    let manifest = PairManifest::read(&cfg.paths.data_root)?.split(Split::Train);
    if manifest.is_empty() {
        return Err(CliError::Usage(format!(
            "no training pairs in {}",
            cfg.paths.data_root.display()
        )));
    }
    let data = manifest.load()?;

    let (mut state, resumed_from) = match store::latest_checkpoint(dir)? {
        Some(path) => {
            let (state, stored) = store::load_state(&path)?;
            if stored.trajectory_key() != cfg.trajectory_key() {
                return Err(CliError::Usage(format!(
                    "{} was written with a different configuration; use a fresh checkpoint directory",
                    path.display()
                )));
            }
            log::info!("resuming from {} (epoch {})", path.display(), state.epoch);
            let e = state.epoch;
            (state, Some(e))
        }
        None => (TrainState::init(&cfg.srn(), &cfg.dn(), cfg.seed)?, None),
    };

    let psi = extractor(cfg, None)?;
    let (srn, dn) = (cfg.srn(), cfg.dn());
    let (sched, opt, loop_cfg) = (cfg.schedule(), cfg.rmsprop(), cfg.loop_config());
    let setup = TrainSetup {
        srn: &srn,
        dn: &dn,
        psi: psi.as_ref(),
        sched: &sched,
        opt: &opt,
        loop_cfg: &loop_cfg,
    };
    let log_path = dir.join(LOSS_LOG);
    let mut rows = previous_rows(&log_path, state.epoch)?;
    let mut summaries = Vec::new();
    let mut checkpoint = store::latest_checkpoint(dir)?;
    while state.epoch < cfg.epochs {
        let t0 = Instant::now();
        let s = train_epoch(&mut state, &data, &setup)?;
        rows.push(s.csv_row());
        let mut text = format!("{LOG_HEADER}\n");
        for r in &rows {
            text.push_str(r);
            text.push('\n');
        }
        write_atomic(&log_path, text.as_bytes())?;
        checkpoint = Some(store::save_state(dir, &state, cfg, psi.as_ref())?);
        store::prune(dir, cfg.keep_checkpoints)?;
        log::info!(
            "epoch {} mse {:.5} adv {:.4} id {:.5} dis {:.4} ({:.1}s)",
            s.epoch,
            s.mse,
            s.adv_g,
            s.id,
            s.dis,
            t0.elapsed().as_secs_f64()
        );
        summaries.push(s);
    }
    Ok(TrainOutcome {
        resumed_from,
        summaries,
        final_epoch: state.epoch,
        checkpoint,
    })
}

/// Generator weights and architecture from a checkpoint file.
pub struct Generator {
    pub theta: ModelParams,
    pub srn: SrnConfig,
    pub config: RunConfig,
    pub archive: Archive,
}

impl Generator {
    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        let (state, config) = store::state_from_archive(&archive)?;
        Ok(Self {
            theta: state.theta,
            srn: config.srn(),
            config,
            archive,
        })
    }

    fn check_image(&self, img: &Image, what: &str) -> Result<()> {
        let r = self.srn.resolution;
        if img.height() != r || img.width() != r {
            return Err(CliError::Usage(format!(
                "{what} is {}x{}, the checkpoint expects {r}x{r}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Eval-mode outputs; batching does not change results in eval mode.
    pub fn recover(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(RECOVER_CHUNK) {
            let items: Vec<Tensor> = chunk.iter().map(|i| i.to_tensor()).collect();
            let refs: Vec<&Tensor> = items.iter().collect();
            let y = srn_forward(&self.theta, &self.srn, &Tensor::stack_batch(&refs)?, Mode::Eval)?.output;
            for i in 0..chunk.len() {
                out.push(Image::from_batch(&y, i)?);
            }
        }
        Ok(out)
    }
}

pub fn recovered_path(input: &Path) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    input.with_file_name(format!("{stem}{RECOVERED_SUFFIX}"))
}

/// Writes `<stem>.recovered.png` next to each input.
pub fn recover(checkpoint: &Path, inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(CliError::Usage("no input images given".into()));
    }
    let generator = Generator::load(checkpoint)?;
    let mut outputs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let img = Image::read_png(input)?;
        generator.check_image(&img, &input.display().to_string())?;
        let t0 = Instant::now();
        let rec = generator.recover(&[&img])?.remove(0);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let out = recovered_path(input);
        rec.write_png(&out)?;
        log::info!("{} -> {} in {ms:.1} ms", input.display(), out.display());
        outputs.push(out);
    }
    Ok(outputs)
}

pub fn resolve_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => store::latest_checkpoint(&cfg.paths.checkpoint_dir)?.ok_or_else(|| {
            CliError::Usage(format!(
                "no checkpoint in {}",
                cfg.paths.checkpoint_dir.display()
            ))
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub csv_path: PathBuf,
    pub text_path: PathBuf,
}

/// Recovers every test pair and scores recovered and stylized inputs
/// against ground truth, grouped by seen and unseen styles.
pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutcome> {
    let generator = Generator::load(checkpoint)?;
    let manifest = PairManifest::read(&cfg.paths.data_root)?;
    let seen = manifest.seen_styles();
    let test = manifest.split(Split::Test);
    if test.is_empty() {
        return Err(CliError::Usage(format!(
            "no test pairs in {}",
            cfg.paths.data_root.display()
        )));
    }
    let root = &cfg.paths.data_root;
    let mut inputs = Vec::with_capacity(test.records.len());
    let mut truths = Vec::with_capacity(test.records.len());
    for r in &test.records {
        let sf = Image::read_png(&root.join(&r.path_sf))?;
        generator.check_image(&sf, &r.path_sf)?;
        inputs.push(sf);
        truths.push(Image::read_png(&root.join(&r.path_rf))?);
    }
    let refs: Vec<&Image> = inputs.iter().collect();
    let recovered = generator.recover(&refs)?;

    let mut gallery = BTreeMap::new();
    let mut samples = Vec::with_capacity(test.records.len());
    for ((r, (input, truth)), rec) in test.records.iter().zip(inputs.into_iter().zip(truths)).zip(recovered) {
        gallery.entry(r.identity_id).or_insert_with(|| truth.clone());
        samples.push(EvalSample {
            identity: r.identity_id,
            style: r.style_id,
            seen: seen.contains(&r.style_id),
            input,
            recovered: rec,
            truth,
        });
    }
    let gallery: Vec<(u32, Image)> = gallery.into_iter().collect();
    let psi = extractor(&generator.config, Some(&generator.archive))?;
    let k = DEFAULT_TOP_K.min(gallery.len());
    let report = build_report(&samples, &gallery, psi.as_ref(), k)?;

    let dir = &cfg.paths.report_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(REPORT_CSV);
    let text_path = dir.join(REPORT_TEXT);
    write_atomic(&csv_path, report.to_csv().as_bytes())?;
    write_atomic(&text_path, report.to_text().as_bytes())?;
    Ok(EvalOutcome {
        report,
        csv_path,
        text_path,
    })
}

pub fn format_checks(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<26} {:>12} {:>10}  result\n", "check", "max rel err", "tolerance");
    for r in rows {
        writeln!(
            s,
            "{:<26} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        )
        .unwrap();
    }
    s
}

pub fn gradcheck(seed: u64) -> Result<Vec<CheckRow>> {
    Ok(standard_suite(seed)?)
}

