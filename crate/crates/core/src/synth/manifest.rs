use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;

use super::{perturb_affine, stylize, Image, PerturbRanges, StyleSpec};
use crate::error::{ensure, Error, Result};
use crate::optim::PairSet;
use crate::random;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const HEADER: [&str; 6] = ["path_sf", "path_rf", "identity_id", "style_id", "split", "seed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Corrupt(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One stylized/real pair. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub path_sf: String,
    pub path_rf: String,
    pub identity_id: u32,
    pub style_id: u32,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairManifest {
    pub root: PathBuf,
    pub records: Vec<PairRecord>,
}

impl PairManifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join(MANIFEST_FILE)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidArgument(format!("manifest encoding: {e}"));
        w.write_record(HEADER).map_err(err)?;
        for r in &self.records {
            let fields = [
                r.path_sf.clone(),
                r.path_rf.clone(),
                r.identity_id.to_string(),
                r.style_id.to_string(),
                r.split.to_string(),
                r.seed.to_string(),
            ];
            w.write_record(&fields).map_err(err)?;
        }
        w.into_inner()
            .map_err(|e| Error::InvalidArgument(format!("manifest encoding: {e}")))
    }

    pub fn from_csv(root: &Path, bytes: &[u8]) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(bytes);
        let corrupt = |e: csv::Error| Error::Corrupt(format!("manifest: {e}"));
        let header = rd.headers().map_err(corrupt)?.clone();
        if header.iter().ne(HEADER) {
            return Err(Error::Corrupt(format!(
                "manifest header {:?}, expected {}",
                header.iter().collect::<Vec<_>>(),
                HEADER.join(",")
            )));
        }
        let mut records = Vec::new();
        for (line, row) in rd.records().enumerate() {
            let row = row.map_err(corrupt)?;
            let num = |i: usize| -> Result<u64> {
                row[i]
                    .parse()
                    .map_err(|_| Error::Corrupt(format!("manifest row {}: bad {} {:?}", line + 1, HEADER[i], &row[i])))
            };
            records.push(PairRecord {
                path_sf: row[0].to_string(),
                path_rf: row[1].to_string(),
                identity_id: num(2)? as u32,
                style_id: num(3)? as u32,
                split: Split::parse(&row[4])?,
                seed: num(5)?,
            });
        }
        let m = Self {
            root: root.to_path_buf(),
            records,
        };
        m.check().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(m)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = Self::path(root);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_csv(root, &bytes)
    }

    pub fn split(&self, split: Split) -> Self {
        Self {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identities(&self, split: Split) -> BTreeSet<u32> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.identity_id).collect()
    }

    /// Styles present in the training split.
    pub fn seen_styles(&self) -> BTreeSet<u32> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.style_id)
            .collect()
    }

    pub fn styles(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.style_id).collect()
    }

    /// Pair counts per `(split, style)`.
    pub fn counts(&self) -> BTreeMap<(Split, u32), usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry((r.split, r.style_id)).or_insert(0) += 1;
        }
        m
    }

    /// Identity-disjoint splits, and training pairs only from styles that
    /// the training split declares.
    pub fn check(&self) -> Result<()> {
        let train = self.identities(Split::Train);
        let test = self.identities(Split::Test);
        if let Some(id) = train.intersection(&test).next() {
            return Err(Error::InvalidArgument(format!(
                "identity {id} appears in both train and test splits"
            )));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            ensure!(
                seen.insert((r.split, r.style_id, r.identity_id)),
                "duplicate pair for identity {} style {} in {}",
                r.identity_id,
                r.style_id,
                r.split
            );
        }
        Ok(())
    }

    pub fn load(&self) -> Result<PairSet> {
        let mut sf = Vec::with_capacity(self.records.len());
        let mut rf = Vec::with_capacity(self.records.len());
        for r in &self.records {
            sf.push(Image::read_png(&self.root.join(&r.path_sf))?.to_tensor());
            rf.push(Image::read_png(&self.root.join(&r.path_rf))?.to_tensor());
        }
        PairSet::new(sf, rf)
    }
}

/// Dataset construction parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestSpec {
    pub seen_styles: Vec<u32>,
    pub unseen_styles: Vec<u32>,
    /// Identities per style and split; 0 uses all of them.
    pub pairs_per_style: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub perturb: PerturbRanges,
}

impl Default for ManifestSpec {
    fn default() -> Self {
        Self {
            seen_styles: vec![0, 1, 2],
            unseen_styles: vec![3],
            pairs_per_style: 0,
            test_fraction: 0.25,
            seed: 0,
            perturb: PerturbRanges::default(),
        }
    }
}

impl ManifestSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seen_styles.is_empty(), "at least one seen style is required");
        let seen: BTreeSet<_> = self.seen_styles.iter().collect();
        let unseen: BTreeSet<_> = self.unseen_styles.iter().collect();
        ensure!(
            seen.len() == self.seen_styles.len() && unseen.len() == self.unseen_styles.len(),
            "style lists contain duplicates"
        );
        if let Some(s) = seen.intersection(&unseen).next() {
            return Err(Error::InvalidArgument(format!(
                "style {s} is listed as both seen and unseen"
            )));
        }
        ensure!(
            (0.0..1.0).contains(&self.test_fraction),
            "test fraction must lie in [0, 1), got {}",
            self.test_fraction
        );
        Ok(())
    }
}

/// Result of a build: the manifest plus how many files changed on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltDataset {
    pub train: PairManifest,
    pub test: PairManifest,
    pub files_written: usize,
    pub files_unchanged: usize,
}

impl BuiltDataset {
    pub fn up_to_date(&self) -> bool {
        self.files_written == 0
    }
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(false);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

fn pair_seed(seed: u64, identity: u32, style: u32) -> u64 {
    random::stream(seed, random::label(&format!("pair/{identity}/{style}"))).next_u64()
}

/// Identity-disjoint split of `ids` with a seeded shuffle.
fn split_identities(ids: &[u32], spec: &ManifestSpec) -> (Vec<u32>, Vec<u32>) {
    let perm = random::permutation(ids.len(), &mut random::stream(spec.seed, random::label("split")));
    let mut n_test = (ids.len() as f64 * spec.test_fraction).round() as usize;
    if spec.test_fraction > 0.0 && ids.len() >= 2 {
        n_test = n_test.clamp(1, ids.len() - 1);
    }
    let mut test: Vec<u32> = perm[..n_test].iter().map(|&i| ids[i]).collect();
    let mut train: Vec<u32> = perm[n_test..].iter().map(|&i| ids[i]).collect();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Generates and writes every pair under `root`: real faces at
/// `<split>/real/<id>.png`, stylized misaligned faces at
/// `<split>/<style>/<id>.png`, and `manifest.csv`. Files whose bytes would
/// not change are left untouched.
pub fn build_manifest(rf_set: &[(u32, Image)], spec: &ManifestSpec, root: &Path) -> Result<BuiltDataset> {
    spec.validate()?;
    ensure!(!rf_set.is_empty(), "no source faces");
    let mut ids: Vec<u32> = rf_set.iter().map(|(i, _)| *i).collect();
    ids.sort_unstable();
    ensure!(
        ids.windows(2).all(|w| w[0] != w[1]),
        "source faces have duplicate identity ids"
    );
    let by_id: BTreeMap<u32, &Image> = rf_set.iter().map(|(i, img)| (*i, img)).collect();
    let (train_ids, test_ids) = split_identities(&ids, spec);

    let mut written = 0;
    let mut unchanged = 0;
    let mut emit = |path: &Path, bytes: &[u8]| -> Result<()> {
        if write_if_changed(path, bytes)? {
            written += 1;
        } else {
            unchanged += 1;
        }
        Ok(())
    };

    let mut records = Vec::new();
    let all_styles: Vec<u32> = spec.seen_styles.iter().chain(&spec.unseen_styles).copied().collect();
    for (split, members, styles) in [
        (Split::Train, &train_ids, &spec.seen_styles),
        (Split::Test, &test_ids, &all_styles),
    ] {
        for &id in members.iter() {
            let rel = format!("{split}/real/{id}.png");
            emit(&root.join(&rel), &by_id[&id].to_png_bytes()?)?;
        }
        for &style_id in styles.iter() {
            let style = StyleSpec::from_id(style_id);
            let cap = if spec.pairs_per_style == 0 {
                members.len()
            } else {
                spec.pairs_per_style.min(members.len())
            };
            for &id in &members[..cap] {
                let seed = pair_seed(spec.seed, id, style_id);
                let unaligned = perturb_affine(by_id[&id], seed, &spec.perturb)?;
                let sf = stylize(&unaligned, &style);
                let rel_sf = format!("{split}/{style_id}/{id}.png");
                emit(&root.join(&rel_sf), &sf.to_png_bytes()?)?;
                records.push(PairRecord {
                    path_sf: rel_sf,
                    path_rf: format!("{split}/real/{id}.png"),
                    identity_id: id,
                    style_id,
                    split,
                    seed,
                });
            }
        }
    }
    let manifest = PairManifest {
        root: root.to_path_buf(),
        records,
    };
    manifest.check()?;
    emit(&PairManifest::path(root), &manifest.to_csv()?)?;
    Ok(BuiltDataset {
        train: manifest.split(Split::Train),
        test: manifest.split(Split::Test),
        files_written: written,
        files_unchanged: unchanged,
    })
}
