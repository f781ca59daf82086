use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ifrp::losses::schedule_weight;
use ifrp::synth::Image;
use ifrp_cli::commands::{LOSS_LOG, REPORT_CSV};
use ifrp_cli::store::list_checkpoints;

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    /// A small, fast run: narrow nets at 32x32 over a handful of identities.
    fn new(extra: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("run.json");
        let text = format!(
            r#"{{
  "resolution": 32,
  "srn_channels": [4, 8, 8, 8],
  "dn_channels": [4, 4, 8, 8],
  "batch_size": 4,
  "epochs": 2,
  "data": {{"num_identities": 8}},
  "paths": {{"data_root": "{d}", "checkpoint_dir": "{c}", "report_dir": "{r}"}}{extra}
}}"#,
            d = root.join("data").display(),
            c = root.join("ckpt").display(),
            r = root.join("reports").display(),
        );
        fs::write(&config, text).unwrap();
        Self { _tmp: tmp, root, config }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ifrp"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env_remove("IFRP_DATA_ROOT")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn ckpt(&self) -> PathBuf {
        self.root.join("ckpt")
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_reports_counts_and_is_idempotent() {
    let ws = Workspace::new(r#", "seed": 3"#);
    fs::write(
        &ws.config,
        fs::read_to_string(&ws.config)
            .unwrap()
            .replace(r#""num_identities": 8"#, r#""num_identities": 16, "test_fraction": 0.0, "unseen_styles": []"#),
    )
    .unwrap();
    let first = ws.ok(&["synth"]);
    assert!(first.contains("train total: 48 pairs"), "{first}");
    for s in 0..3 {
        assert!(first.contains(&format!("train style {s}: 16 pairs")), "{first}");
    }
    let before = snapshot(&ws.root.join("data"));
    let second = ws.ok(&["synth"]);
    assert!(second.contains("up-to-date"), "{second}");
    assert_eq!(before, snapshot(&ws.root.join("data")));
}

#[test]
fn overlapping_styles_are_a_usage_error() {
    let ws = Workspace::new(r#", "seed": 1"#);
    let text = fs::read_to_string(&ws.config)
        .unwrap()
        .replace(r#""num_identities": 8"#, r#""num_identities": 8, "unseen_styles": [2]"#);
    fs::write(&ws.config, text).unwrap();
    let out = ws.run(&["synth"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_field_is_a_usage_error() {
    let ws = Workspace::new(r#", "batchsize": 3"#);
    assert_eq!(code(&ws.run(&["synth"])), 2);
}

#[test]
fn train_without_dataset_is_a_usage_error() {
    let ws = Workspace::new("");
    let out = ws.run(&["train"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_logs_one_row_per_epoch_with_scheduled_weights() {
    let ws = Workspace::new(r#", "lambda0": 0.5"#);
    ws.ok(&["synth"]);
    ws.ok(&["train", "--epochs", "3"]);
    let log = fs::read_to_string(ws.ckpt().join(LOSS_LOG)).unwrap();
    let rows: Vec<Vec<f64>> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for (n, r) in rows.iter().enumerate() {
        assert_eq!(r[0], n as f64);
        assert_eq!(r[2], schedule_weight(0.5, 2.0, n as u64));
        assert_eq!(r[3], schedule_weight(1e-3, 2.0, n as u64));
    }
    let kept: Vec<u64> = list_checkpoints(&ws.ckpt()).unwrap().into_iter().map(|(e, _)| e).collect();
    assert_eq!(kept, vec![2, 3]);
    let again = ws.ok(&["train", "--epochs", "3"]);
    assert!(again.contains("already trained to epoch 3"), "{again}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let whole = Workspace::new("");
    whole.ok(&["synth"]);
    whole.ok(&["train", "--epochs", "4"]);

    let split = Workspace::new("");
    split.ok(&["synth"]);
    split.ok(&["train", "--epochs", "2"]);
    split.ok(&["train", "--epochs", "4"]);

    let read = |ws: &Workspace, e: u64| fs::read(ifrp_cli::store::checkpoint_path(&ws.ckpt(), e)).unwrap();
    assert_eq!(read(&whole, 4), read(&split, 4));
    assert_eq!(
        fs::read(whole.ckpt().join(LOSS_LOG)).unwrap(),
        fs::read(split.ckpt().join(LOSS_LOG)).unwrap()
    );
}

#[test]
fn resume_with_changed_recipe_is_refused() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["train", "--epochs", "1"]);
    let text = fs::read_to_string(&ws.config).unwrap().replace(r#""batch_size": 4"#, r#""batch_size": 2"#);
    fs::write(&ws.config, text).unwrap();
    assert_eq!(code(&ws.run(&["train", "--epochs", "2"])), 2);
}

#[test]
fn corrupt_checkpoint_exits_with_three() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["train", "--epochs", "1"]);
    let path = ifrp_cli::store::checkpoint_path(&ws.ckpt(), 1);
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&path, &bytes).unwrap();
    assert_eq!(code(&ws.run(&["train", "--epochs", "2"])), 3);
    let p = path.to_str().unwrap();
    assert_eq!(code(&ws.run(&["eval", "--checkpoint", p])), 3);
    fs::write(&path, &bytes[..mid]).unwrap();
    assert_eq!(code(&ws.run(&["train", "--epochs", "2"])), 3);
}

#[test]
fn recover_writes_one_deterministic_output_per_input() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["train", "--epochs", "1"]);
    let ckpt = ifrp_cli::store::checkpoint_path(&ws.ckpt(), 1);
    let inputs: Vec<PathBuf> = (0..3).map(|s| ws.root.join(format!("in{s}.png"))).collect();
    for (i, p) in inputs.iter().enumerate() {
        fs::copy(ws.root.join(format!("data/test/{}", i % 3)).read_dir().unwrap().next().unwrap().unwrap().path(), p)
            .unwrap();
    }
    let mut args = vec!["recover", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(inputs.iter().map(|p| p.to_str().unwrap()));
    let listed = ws.ok(&args);
    assert_eq!(listed.lines().count(), 3);
    let outputs: Vec<PathBuf> = inputs
        .iter()
        .map(|p| p.with_file_name(format!("{}.recovered.png", p.file_stem().unwrap().to_str().unwrap())))
        .collect();
    let first: Vec<Vec<u8>> = outputs.iter().map(|p| fs::read(p).unwrap()).collect();
    ws.ok(&args);
    let second: Vec<Vec<u8>> = outputs.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
    let img = Image::read_png(&outputs[0]).unwrap();
    assert_eq!((img.height(), img.width()), (32, 32));

    let big = ws.root.join("big.png");
    Image::from_fn(64, 64, |_, _, _| 0.5).write_png(&big).unwrap();
    let out = ws.run(&["recover", "--checkpoint", ckpt.to_str().unwrap(), big.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_reports_every_group_with_fixed_columns() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["train", "--epochs", "1"]);
    let text = ws.ok(&["eval"]);
    assert!(text.contains("unseen"), "{text}");
    let csv = fs::read_to_string(ws.root.join("reports").join(REPORT_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("group,n,psnr_db,ssim,frr_pct,fcr_pct"));
    let groups: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        groups,
        ["style_0", "style_1", "style_2", "style_3", "seen", "unseen", "all", "input_seen", "input_unseen", "input_all"]
    );
    let before = fs::read(ws.root.join("reports").join(REPORT_CSV)).unwrap();
    ws.ok(&["eval"]);
    assert_eq!(before, fs::read(ws.root.join("reports").join(REPORT_CSV)).unwrap());
}

#[test]
fn eval_without_test_pairs_is_a_usage_error() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["train", "--epochs", "1"]);
    let manifest = ws.root.join("data/manifest.csv");
    let header = fs::read_to_string(&manifest).unwrap().lines().next().unwrap().to_string();
    fs::write(&manifest, format!("{header}\n")).unwrap();
    assert_eq!(code(&ws.run(&["eval"])), 2);
}

#[test]
fn flags_override_the_config_file() {
    let ws = Workspace::new("");
    let other = ws.root.join("elsewhere");
    ws.ok(&["--data-root", other.to_str().unwrap(), "synth"]);
    assert!(other.join("manifest.csv").exists());
    assert!(!ws.root.join("data").exists());
}

#[test]
fn gradcheck_passes_on_a_clean_build() {
    let ws = Workspace::new("");
    let out = ws.ok(&["gradcheck"]);
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out.lines().count() > 20);
}

#[test]
fn shipped_desk_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = ifrp_cli::config::RunConfig::resolve(Some(&path), &Default::default()).unwrap();
    assert_eq!((cfg.resolution, cfg.epochs, cfg.batch_size), (32, 60, 16));
}
