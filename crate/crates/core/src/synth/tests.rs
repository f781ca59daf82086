use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use super::faces::synthetic_face;
use super::*;
use crate::stn::AffineParams;

fn gray2x2(v: [f64; 4]) -> Image {
    Image::from_fn(2, 2, |_, y, x| v[y * 2 + x])
}

fn faces(n: u32, res: usize) -> Vec<(u32, Image)> {
    (0..n).map(|i| (i, synthetic_face(i, res, 7))).collect()
}

fn spec(seen: &[u32], unseen: &[u32]) -> ManifestSpec {
    ManifestSpec {
        seen_styles: seen.to_vec(),
        unseen_styles: unseen.to_vec(),
        seed: 11,
        ..ManifestSpec::default()
    }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn quarter_turn_permutes_pixels() {
    let img = gray2x2([1.0, 2.0, 3.0, 4.0]);
    let out = warp(&img, AffineParams::similarity(FRAC_PI_2, 1.0, 0.0, 0.0)).unwrap();
    for c in 0..3 {
        assert_eq!(out.channel(c), &[2.0, 4.0, 1.0, 3.0]);
    }
}

#[test]
fn zero_ranges_leave_image_unchanged() {
    let img = synthetic_face(3, 32, 0);
    let out = perturb_affine(&img, 99, &PerturbRanges::NONE).unwrap();
    assert_eq!(out, img);
}

#[test]
fn perturbation_is_seeded_and_bounded() {
    let r = PerturbRanges::default();
    assert_eq!(perturbation(5, &r), perturbation(5, &r));
    assert_ne!(perturbation(5, &r), perturbation(6, &r));
    for seed in 0..200 {
        let [a, b, tx, ty] = perturbation(seed, &r).to_array();
        let scale = a.hypot(b);
        let angle = b.atan2(a).to_degrees();
        assert!((0.9 - 1e-12..=1.1 + 1e-12).contains(&scale));
        assert!(angle.abs() <= 30.0 + 1e-9);
        assert!(tx.abs() <= 0.2 + 1e-12 && ty.abs() <= 0.2 + 1e-12);
    }
}

#[test]
fn crop_resize_of_portrait_image() {
    let img = Image::from_fn(218, 178, |c, y, x| ((c * 7 + y * 3 + x) % 256) as f64 / 255.0);
    let out = crop_resize(&img, 32).unwrap();
    assert_eq!((out.height(), out.width()), (32, 32));
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));

    // a square input at the output size is passed through exactly
    let sq = Image::from_fn(32, 32, |c, y, x| ((c + y * x) % 11) as f64 / 10.0);
    assert_eq!(crop_resize(&sq, 32).unwrap(), sq);

    // the crop keeps the vertical center of the portrait
    let marked = Image::from_fn(218, 178, |_, y, _| if (20..198).contains(&y) { 1.0 } else { 0.0 });
    assert!(crop_resize(&marked, 178).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn ingest_skips_undecodable_files() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_face(0, 40, 1).write_png(&dir.path().join("b.png")).unwrap();
    synthetic_face(1, 48, 1).write_png(&dir.path().join("a.png")).unwrap();
    std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let got = ingest(dir.path(), 32).unwrap();
    let names: Vec<_> = got.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["a", "b"]);
    assert!(got.iter().all(|(_, i)| i.height() == 32 && i.width() == 32));

    let empty = tempfile::tempdir().unwrap();
    assert!(ingest(empty.path(), 32).is_err());
}

#[test]
fn constant_image_survives_neutral_style() {
    let img = Image::from_fn(16, 16, |_, _, _| 0.4);
    let mut style = StyleSpec::neutral(0);
    style.smooth_sigma = 0.05;
    let out = stylize(&img, &style);
    for (a, b) in out.data().iter().zip(img.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn styles_are_deterministic_and_distinct() {
    let face = synthetic_face(2, 32, 0);
    assert_eq!(StyleSpec::from_id(4), StyleSpec::from_id(4));
    let outs: Vec<Image> = (0..4).map(|s| stylize(&face, &StyleSpec::from_id(s))).collect();
    assert_eq!(outs[1], stylize(&face, &StyleSpec::from_id(1)));
    for i in 0..outs.len() {
        assert!(outs[i].data().iter().all(|v| (0.0..=1.0).contains(v)));
        for j in i + 1..outs.len() {
            let d = outs[i].mean_abs_diff(&outs[j]);
            assert!(d > 0.01, "styles {i} and {j} differ by only {d}");
        }
    }
}

#[test]
fn faces_differ_between_identities() {
    let a = synthetic_face(0, 32, 0);
    assert_eq!(a, synthetic_face(0, 32, 0));
    assert!(a.mean_abs_diff(&synthetic_face(1, 32, 0)) > 0.02);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn manifest_counts_and_disjoint_splits() {
    let dir = tempfile::tempdir().unwrap();
    let built = build_manifest(&faces(12, 32), &spec(&[0, 1, 2], &[]), dir.path()).unwrap();
    let train_ids = built.train.identities(Split::Train);
    let test_ids = built.test.identities(Split::Test);
    assert_eq!((train_ids.len(), test_ids.len()), (9, 3));
    assert!(train_ids.is_disjoint(&test_ids));
    assert_eq!(built.train.records.len(), 3 * train_ids.len());
    assert_eq!(built.train.seen_styles().len(), 3);

    let all = PairManifest::read(dir.path()).unwrap();
    let test_styles: std::collections::BTreeSet<u32> = all.split(Split::Test).styles();
    assert!(test_styles.is_subset(&all.seen_styles()), "no unseen styles were requested");

    let set = built.train.load().unwrap();
    assert_eq!(set.len(), built.train.records.len());
    assert_eq!(set.resolution(), Some(32));
}

#[test]
fn unseen_styles_only_in_test() {
    let dir = tempfile::tempdir().unwrap();
    let built = build_manifest(&faces(8, 32), &spec(&[0, 1], &[5]), dir.path()).unwrap();
    assert!(built.train.records.iter().all(|r| r.style_id != 5));
    let unseen = built.test.records.iter().filter(|r| r.style_id == 5).count();
    assert_eq!(unseen, built.test.identities(Split::Test).len());
}

#[test]
fn pairs_per_style_caps_identities() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(&[0, 1], &[]);
    s.pairs_per_style = 2;
    let built = build_manifest(&faces(8, 32), &s, dir.path()).unwrap();
    assert_eq!(built.train.records.len(), 4);
}

#[test]
fn rerun_is_byte_identical_and_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(&[0, 1], &[2]);
    let first = build_manifest(&faces(6, 32), &s, dir.path()).unwrap();
    assert!(!first.up_to_date());
    let before = tree(dir.path());
    let second = build_manifest(&faces(6, 32), &s, dir.path()).unwrap();
    assert!(second.up_to_date());
    assert_eq!(second.files_unchanged, first.files_written);
    assert_eq!(tree(dir.path()), before);
    assert_eq!((first.train, first.test), (second.train, second.test));
}

#[test]
fn overlapping_style_lists_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(build_manifest(&faces(4, 32), &spec(&[0, 1], &[1]), dir.path()).is_err());
    assert!(build_manifest(&faces(4, 32), &spec(&[], &[1]), dir.path()).is_err());
}

#[test]
fn manifest_csv_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    build_manifest(&faces(4, 32), &spec(&[0], &[1]), dir.path()).unwrap();
    let bytes = std::fs::read(PairManifest::path(dir.path())).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert!(text.starts_with("path_sf,path_rf,identity_id,style_id,split,seed\n"));
    let m = PairManifest::from_csv(dir.path(), &bytes).unwrap();
    assert_eq!(m.to_csv().unwrap(), bytes);

    let bad_header = text.replacen("path_sf", "sf", 1);
    assert!(PairManifest::from_csv(dir.path(), bad_header.as_bytes()).is_err());
    let bad_split = text.replacen(",train,", ",dev,", 1);
    assert!(PairManifest::from_csv(dir.path(), bad_split.as_bytes()).is_err());

    // an identity placed in both splits violates disjointness
    let leaked = format!(
        "{}test/0/{id}.png,test/real/{id}.png,{id},0,test,1\n",
        text,
        id = m.identities(Split::Train).first().unwrap()
    );
    assert!(PairManifest::from_csv(dir.path(), leaked.as_bytes()).is_err());
}
