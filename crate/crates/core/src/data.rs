//! Annotation consolidation, dataset manifests and reproducible splits.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("record {image_id}: expected 5 votes, got {got}")]
    WrongVoteCount { image_id: String, got: usize },
    #[error("invalid count label {0:?}")]
    InvalidLabel(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("duplicate image path {0}")]
    DuplicatePath(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("train fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    Schema {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One of the five subitizing classes, in score-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CountLabel {
    Zero,
    One,
    Two,
    Three,
    FourPlus,
}

impl CountLabel {
    pub const ALL: [CountLabel; 5] = [
        CountLabel::Zero,
        CountLabel::One,
        CountLabel::Two,
        CountLabel::Three,
        CountLabel::FourPlus,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Class for an exact object count; anything above three is `FourPlus`.
    pub fn from_count(n: usize) -> Self {
        Self::ALL[n.min(4)]
    }
}

impl fmt::Display for CountLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

impl FromStr for CountLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "0" => Ok(CountLabel::Zero),
            "1" => Ok(CountLabel::One),
            "2" => Ok(CountLabel::Two),
            "3" => Ok(CountLabel::Three),
            "4" | "4+" => Ok(CountLabel::FourPlus),
            other => Err(DataError::InvalidLabel(other.to_string())),
        }
    }
}

impl Serialize for CountLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CountLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Animal,
    Food,
    People,
    Vehicle,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Animal,
        Category::Food,
        Category::People,
        Category::Vehicle,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Animal => "animal",
            Category::Food => "food",
            Category::People => "people",
            Category::Vehicle => "vehicle",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| DataError::UnknownCategory(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub votes: Vec<CountLabel>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Consolidation {
    pub kept: Vec<(String, CountLabel)>,
    pub excluded: Vec<String>,
}

/// Votes needed for a consensus label.
pub const CONSENSUS_VOTES: usize = 4;
pub const VOTES_PER_IMAGE: usize = 5;

/// Keeps an image iff one class receives at least four of its five votes.
pub fn consolidate_annotations(records: &[AnnotationRecord]) -> Result<Consolidation> {
    let mut out = Consolidation::default();
    for rec in records {
        if rec.votes.len() != VOTES_PER_IMAGE {
            return Err(DataError::WrongVoteCount {
                image_id: rec.image_id.clone(),
                got: rec.votes.len(),
            });
        }
        let mut tally = [0usize; CountLabel::COUNT];
        for v in &rec.votes {
            tally[v.index()] += 1;
        }
        // at most one class can reach 4 of 5
        match tally.iter().position(|&n| n >= CONSENSUS_VOTES) {
            Some(c) => out.kept.push((rec.image_id.clone(), CountLabel::ALL[c])),
            None => out.excluded.push(rec.image_id.clone()),
        }
    }
    Ok(out)
}

/// A category is kept iff at least two of the three voters chose it.
pub fn majority_category(votes: &[BTreeSet<Category>; 3]) -> BTreeSet<Category> {
    Category::ALL
        .into_iter()
        .filter(|c| votes.iter().filter(|v| v.contains(c)).count() >= 2)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: String,
    pub label: CountLabel,
    pub categories: BTreeSet<Category>,
}

impl ManifestEntry {
    pub fn new(image_path: impl Into<String>, label: CountLabel) -> Self {
        Self {
            image_path: image_path.into(),
            label,
            categories: BTreeSet::new(),
        }
    }
}

/// Labeled image list with unique paths. Relative paths are resolved against
/// `base_dir` when loading images.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.image_path.as_str()) {
                return Err(DataError::DuplicatePath(e.image_path.clone()));
            }
        }
        Ok(Self {
            entries,
            base_dir: None,
        })
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<CountLabel> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Filesystem path of entry `i`.
    pub fn resolve(&self, i: usize) -> PathBuf {
        let p = Path::new(&self.entries[i].image_path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn subset(&self, keep: impl Fn(usize, &ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .enumerate()
                .filter(|(i, e)| keep(*i, e))
                .map(|(_, e)| e.clone())
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Reads `image_path,label,categories` CSV with a header row; categories
    /// are `;`-joined and may be empty. The file's directory becomes the base
    /// directory for relative paths.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|source| DataError::Csv {
            path: path.to_owned(),
            source,
        })?;
        let mut entries = Vec::new();
        for row in rdr.deserialize::<ManifestRow>() {
            let row = row.map_err(|source| DataError::Csv {
                path: path.to_owned(),
                source,
            })?;
            let line = entries.len() as u64 + 2;
            let schema = |reason: String| DataError::Schema {
                path: path.to_owned(),
                line,
                reason,
            };
            let label = row.label.parse().map_err(|e: DataError| schema(e.to_string()))?;
            let categories = parse_categories(&row.categories).map_err(|e| schema(e.to_string()))?;
            entries.push(ManifestEntry {
                image_path: row.image_path,
                label,
                categories,
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(entries)?.with_base_dir(base))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wrap = |source| DataError::Csv {
            path: path.to_owned(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(wrap)?;
        for e in &self.entries {
            w.serialize(ManifestRow {
                image_path: e.image_path.clone(),
                label: e.label.to_string(),
                categories: e
                    .categories
                    .iter()
                    .map(|c| c.as_str())
                    .collect::<Vec<_>>()
                    .join(";"),
            })
            .map_err(wrap)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: path.to_owned(),
            source,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    image_path: String,
    label: String,
    #[serde(default)]
    categories: String,
}

fn parse_categories(s: &str) -> Result<BTreeSet<Category>> {
    s.split(';')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

/// Reads `image_id,v1,v2,v3,v4,v5` with a header row; votes are `0..4`, with
/// `4` meaning 4+. Rows with a different vote count are reported by
/// [`consolidate_annotations`], not here.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|source| DataError::Csv {
            path: path.to_owned(),
            source,
        })?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: path.to_owned(),
            source,
        })?;
        let mut fields = rec.iter();
        let image_id = fields.next().unwrap_or_default().to_string();
        let votes = fields
            .filter(|f| !f.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<CountLabel>>>()
            .map_err(|e| DataError::Schema {
                path: path.to_owned(),
                line: i as u64 + 2,
                reason: e.to_string(),
            })?;
        out.push(AnnotationRecord { image_id, votes });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DataError::InvalidFraction(train_fraction));
        }
        Ok(Self {
            train_fraction,
            seed,
        })
    }
}

/// Global uniform split: seeded shuffle of indices, the first
/// `round(fraction * N)` go to train. Both halves keep manifest order.
pub fn split_dataset(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if manifest.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    SplitSpec::new(spec.train_fraction, spec.seed)?;
    let n = manifest.len();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(spec.seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    Ok((
        manifest.subset(|i, _| in_train[i]),
        manifest.subset(|i, _| !in_train[i]),
    ))
}

/// Sidecar written next to a split so it can be reproduced.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitSidecar {
    pub seed: u64,
    pub train_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Writes `train.csv`, `test.csv` and `split.json` into `dir`.
pub fn write_split(
    dir: impl AsRef<Path>,
    spec: &SplitSpec,
    train: &DatasetManifest,
    test: &DatasetManifest,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_owned(),
        source,
    })?;
    train.write_csv(dir.join("train.csv"))?;
    test.write_csv(dir.join("test.csv"))?;
    let sidecar = SplitSidecar {
        seed: spec.seed,
        train_fraction: spec.train_fraction,
        n_train: train.len(),
        n_test: test.len(),
    };
    let path = dir.join("split.json");
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&path, json + "\n").map_err(|source| DataError::Io { path, source })
}

/// Leave-one-category-out protocol: every training image carrying `category`
/// moves to the test side, joined by the original test images labeled `0`.
pub fn leave_one_category_out(
    train: &DatasetManifest,
    test: &DatasetManifest,
    category: Category,
) -> (DatasetManifest, DatasetManifest) {
    let new_train = train.subset(|_, e| !e.categories.contains(&category));
    let mut held_out = train.subset(|_, e| e.categories.contains(&category));
    held_out.entries.extend(
        test.entries
            .iter()
            .filter(|e| e.label == CountLabel::Zero)
            .cloned(),
    );
    (new_train, held_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, votes: &[usize]) -> AnnotationRecord {
        AnnotationRecord {
            image_id: id.into(),
            votes: votes.iter().map(|&v| CountLabel::ALL[v]).collect(),
        }
    }

    fn cats(list: &[Category]) -> BTreeSet<Category> {
        list.iter().copied().collect()
    }

    fn toy_manifest(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| ManifestEntry::new(format!("img{i}.png"), CountLabel::ALL[i % 5]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn consolidation_examples() {
        let c = consolidate_annotations(&[
            rec("a", &[1, 1, 1, 1, 2]),
            rec("b", &[2, 2, 2, 1, 1]),
            rec("c", &[0, 0, 0, 0, 0]),
        ])
        .unwrap();
        assert_eq!(
            c.kept,
            vec![("a".into(), CountLabel::One), ("c".into(), CountLabel::Zero)]
        );
        assert_eq!(c.excluded, vec!["b".to_string()]);
    }

    #[test]
    fn consolidation_rejects_malformed() {
        assert!(matches!(
            consolidate_annotations(&[rec("x", &[1, 1, 1, 1])]),
            Err(DataError::WrongVoteCount { got: 4, .. })
        ));
    }

    #[test]
    fn consolidation_exhaustive_over_vote_multisets() {
        // every ordered 5-vote tuple over 5 classes (3125 cases)
        for code in 0..5usize.pow(5) {
            let votes: Vec<usize> = (0..5).map(|k| (code / 5usize.pow(k)) % 5).collect();
            let max_count = (0..5).map(|c| votes.iter().filter(|&&v| v == c).count()).max().unwrap();
            let c = consolidate_annotations(&[rec("x", &votes)]).unwrap();
            assert_eq!(c.kept.len() == 1, max_count >= 4, "{votes:?}");
            if let Some((_, label)) = c.kept.first() {
                assert!(votes.iter().filter(|&&v| v == label.index()).count() >= 4);
            }
        }
    }

    #[test]
    fn majority_examples() {
        use Category::*;
        assert_eq!(majority_category(&[cats(&[Animal]), cats(&[Animal]), cats(&[People])]), cats(&[Animal]));
        assert_eq!(
            majority_category(&[cats(&[Animal, People]), cats(&[People]), cats(&[Animal])]),
            cats(&[Animal, People])
        );
        assert!(majority_category(&[cats(&[Food]), cats(&[Vehicle]), cats(&[Other])]).is_empty());
    }

    #[test]
    fn label_text_forms() {
        assert_eq!(CountLabel::FourPlus.to_string(), "4");
        assert_eq!("4+".parse::<CountLabel>().unwrap(), CountLabel::FourPlus);
        assert!("5".parse::<CountLabel>().is_err());
        assert_eq!(CountLabel::from_count(7), CountLabel::FourPlus);
        assert!("plant".parse::<Category>().is_err());
    }

    #[test]
    fn split_sizes() {
        let m = toy_manifest(10);
        let spec = SplitSpec::new(0.8, 42).unwrap();
        let (tr, te) = split_dataset(&m, &spec).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(split_dataset(&m, &spec).unwrap(), (tr, te));
        // full-size dataset count
        assert_eq!((0.8f64 * 13707.0).round() as usize, 10966);
        let big = toy_manifest(13707);
        assert_eq!(split_dataset(&big, &spec).unwrap().0.len(), 10966);
    }

    #[test]
    fn split_rejects_empty_and_bad_fraction() {
        let spec = SplitSpec { train_fraction: 0.8, seed: 1 };
        assert!(matches!(
            split_dataset(&DatasetManifest::default(), &spec),
            Err(DataError::EmptyManifest)
        ));
        assert!(SplitSpec::new(1.0, 0).is_err());
        assert!(SplitSpec::new(0.0, 0).is_err());
    }

    #[test]
    fn leave_one_out_toy() {
        let mut entries: Vec<ManifestEntry> = (0..6)
            .map(|i| ManifestEntry::new(format!("t{i}"), CountLabel::ALL[1 + i % 4]))
            .collect();
        entries[1].categories = cats(&[Category::Animal]);
        entries[4].categories = cats(&[Category::Animal, Category::People]);
        let train = DatasetManifest::new(entries).unwrap();
        let test = DatasetManifest::new(vec![
            ManifestEntry::new("z0", CountLabel::Zero),
            ManifestEntry::new("z1", CountLabel::Two),
        ])
        .unwrap();
        let (tr, te) = leave_one_category_out(&train, &test, Category::Animal);
        assert_eq!(tr.len(), 4);
        let names: Vec<_> = te.entries().iter().map(|e| e.image_path.as_str()).collect();
        assert_eq!(names, vec!["t1", "t4", "z0"]);

        let (tr, _) = leave_one_category_out(&train, &test, Category::Food);
        assert_eq!(tr, train);
    }

    #[test]
    fn manifest_csv_round_trip_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy_manifest(4);
        m.entries[2].categories = cats(&[Category::Food, Category::Other]);
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("image_path,label,categories\n"));
        assert!(text.contains("img2.png,2,food;other"));
        let back = DatasetManifest::read_csv(&path).unwrap();
        assert_eq!(back.entries(), m.entries());
        assert_eq!(back.resolve(0), dir.path().join("img0.png"));

        fs::write(&path, "image_path,label,categories\na.png,7,\n").unwrap();
        assert!(matches!(DatasetManifest::read_csv(&path), Err(DataError::Schema { .. })));
        fs::write(&path, "image_path,label,categories\na.png,1,\na.png,2,\n").unwrap();
        assert!(matches!(DatasetManifest::read_csv(&path), Err(DataError::DuplicatePath(_))));
    }

    #[test]
    fn annotations_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        fs::write(&path, "image_id,v1,v2,v3,v4,v5\na,1,1,1,1,2\nb,4,4,4,4,4\nc,1,2\n").unwrap();
        let recs = read_annotations(&path).unwrap();
        assert_eq!(recs[1].votes, vec![CountLabel::FourPlus; 5]);
        assert!(consolidate_annotations(&recs).is_err());
        let c = consolidate_annotations(&recs[..2]).unwrap();
        assert_eq!(c.kept.len(), 2);
    }

    fn arb_set() -> impl Strategy<Value = BTreeSet<Category>> {
        proptest::sample::subsequence(Category::ALL.to_vec(), 0..=5).prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..200, frac in 0.05f64..0.95, seed: u64) {
            let m = toy_manifest(n);
            let (tr, te) = split_dataset(&m, &SplitSpec::new(frac, seed).unwrap()).unwrap();
            prop_assert_eq!(tr.len() + te.len(), n);
            prop_assert_eq!(tr.len(), (frac * n as f64).round() as usize);
            let a: HashSet<_> = tr.entries().iter().map(|e| e.image_path.clone()).collect();
            prop_assert!(te.entries().iter().all(|e| !a.contains(&e.image_path)));
        }

        #[test]
        fn majority_is_voter_symmetric(a in arb_set(), b in arb_set(), c in arb_set()) {
            let base = majority_category(&[a.clone(), b.clone(), c.clone()]);
            prop_assert_eq!(&base, &majority_category(&[b.clone(), c.clone(), a.clone()]));
            prop_assert_eq!(&base, &majority_category(&[c, a, b]));
        }
    }
}
