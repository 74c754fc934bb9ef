//! Labeled image manifests and stratified k-fold assignment.
//!
//! A manifest is a CSV file with header `path,label,image_type`. Relative
//! paths are resolved against the directory holding the manifest.
//!
//! Folds are stratified on the full `label x image_type` cross product. Each
//! of the six strata is shuffled with its own seeded stream and dealt
//! round-robin, starting at fold `stratum_ordinal mod k`, so per-stratum fold
//! sizes never differ by more than one.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::derive_stream;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: unknown {field} `{value}`")]
    UnknownLabel {
        line: u64,
        field: &'static str,
        value: String,
    },
    #[error("duplicate path `{0}`")]
    DuplicatePath(String),
    #[error("number of folds must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("line {line}: fold {fold} out of range for k = {k}")]
    FoldOutOfRange { line: u64, fold: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Healthy,
    DownyMildew,
    SpiderMite,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Healthy, Label::DownyMildew, Label::SpiderMite];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::DownyMildew => "downy_mildew",
            Label::SpiderMite => "spider_mite",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Label::ALL.into_iter().find(|l| l.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImageType {
    LeafFocused,
    Canopy,
}

impl ImageType {
    pub const ALL: [ImageType; 2] = [ImageType::LeafFocused, ImageType::Canopy];

    pub fn as_str(self) -> &'static str {
        match self {
            ImageType::LeafFocused => "leaf_focused",
            ImageType::Canopy => "canopy",
        }
    }
}

impl fmt::Display for ImageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        ImageType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub image_type: ImageType,
}

impl ManifestEntry {
    pub fn stratum(&self) -> Stratum {
        Stratum {
            label: self.label,
            image_type: self.image_type,
        }
    }
}

/// One cell of the `label x image_type` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Stratum {
    pub label: Label,
    pub image_type: ImageType,
}

impl Stratum {
    pub fn all() -> impl Iterator<Item = Stratum> {
        Label::ALL.into_iter().flat_map(|label| {
            ImageType::ALL
                .into_iter()
                .map(move |image_type| Stratum { label, image_type })
        })
    }

    /// Position in `Stratum::all()`.
    pub fn ordinal(self) -> usize {
        self.label as usize * ImageType::ALL.len() + self.image_type as usize
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.label, self.image_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for e in &entries {
            check_path_field(&e.path, 0)?;
            if !seen.insert(e.path.as_str()) {
                return Err(DatasetError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Self {
            entries,
            base_dir: PathBuf::new(),
        })
    }

    pub fn with_base_dir(mut self, base_dir: impl Into<PathBuf>) -> Self {
        self.base_dir = base_dir.into();
        self
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

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Filesystem location of an entry.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    /// Keeps the entries accepted by `keep`, preserving order.
    pub fn filter<F: FnMut(&ManifestEntry) -> bool>(&self, mut keep: F) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn stratum_counts(&self) -> HashMap<Stratum, usize> {
        let mut counts = HashMap::new();
        for e in &self.entries {
            *counts.entry(e.stratum()).or_default() += 1;
        }
        counts
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| DatasetError::Parse {
            line: 0,
            message: e.to_string(),
        };
        w.write_record(["path", "label", "image_type"])
            .map_err(io)?;
        for e in &self.entries {
            w.write_record([e.path.as_str(), e.label.as_str(), e.image_type.as_str()])
                .map_err(io)?;
        }
        w.flush().map_err(|source| DatasetError::Io {
            path: PathBuf::from("<output>"),
            source,
        })
    }
}

fn check_path_field(path: &str, line: u64) -> Result<(), DatasetError> {
    if path.is_empty() {
        return Err(DatasetError::Parse {
            line,
            message: "empty path".into(),
        });
    }
    if path.contains(',') || path.contains('"') {
        return Err(DatasetError::Parse {
            line,
            message: format!("path `{path}` contains a comma or quote"),
        });
    }
    Ok(())
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input)
}

fn check_header<R: Read>(
    reader: &mut csv::Reader<R>,
    expected: &[&str],
) -> Result<(), DatasetError> {
    let header = reader.headers().map_err(|e| DatasetError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(DatasetError::Parse {
            line: 1,
            message: format!(
                "expected header `{}`, found `{}`",
                expected.join(","),
                got.join(",")
            ),
        });
    }
    Ok(())
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Reads a manifest. Paths are kept exactly as written.
pub fn parse_manifest<R: Read>(input: R) -> Result<DatasetManifest, DatasetError> {
    let mut reader = csv_reader(input);
    check_header(&mut reader, &["path", "label", "image_type"])?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| DatasetError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record_line(&record);
        if record.len() != 3 {
            return Err(DatasetError::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let path = record[0].trim();
        check_path_field(path, line)?;
        let label = record[1].trim();
        let label = label.parse().map_err(|_| DatasetError::UnknownLabel {
            line,
            field: "label",
            value: label.to_string(),
        })?;
        let image_type = record[2].trim();
        let image_type = image_type.parse().map_err(|_| DatasetError::UnknownLabel {
            line,
            field: "image_type",
            value: image_type.to_string(),
        })?;
        if !seen.insert(path.to_string()) {
            return Err(DatasetError::DuplicatePath(path.to_string()));
        }
        entries.push(ManifestEntry {
            path: path.to_string(),
            label,
            image_type,
        });
    }
    Ok(DatasetManifest {
        entries,
        base_dir: PathBuf::new(),
    })
}

/// Reads a manifest file and resolves its entries against the file's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(parse_manifest(file)?.with_base_dir(base))
}

/// Fold index for every manifest path, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    assignment: Vec<(String, usize)>,
}

impl FoldAssignment {
    pub fn new(k: usize, assignment: Vec<(String, usize)>) -> Result<Self, DatasetError> {
        if k == 0 {
            return Err(DatasetError::InvalidK(k));
        }
        let mut seen = HashSet::new();
        for (path, fold) in &assignment {
            if *fold >= k {
                return Err(DatasetError::FoldOutOfRange {
                    line: 0,
                    fold: *fold,
                    k,
                });
            }
            if !seen.insert(path.as_str()) {
                return Err(DatasetError::DuplicatePath(path.clone()));
            }
        }
        Ok(Self { k, assignment })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[(String, usize)] {
        &self.assignment
    }

    pub fn fold_of(&self, path: &str) -> Option<usize> {
        self.assignment
            .iter()
            .find(|(p, _)| p == path)
            .map(|(_, f)| *f)
    }

    pub fn lookup(&self) -> HashMap<&str, usize> {
        self.assignment
            .iter()
            .map(|(p, f)| (p.as_str(), *f))
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for (_, f) in &self.assignment {
            sizes[*f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold assignment over `label x image_type`.
pub fn stratified_kfold(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, DatasetError> {
    if k == 0 {
        return Err(DatasetError::InvalidK(k));
    }
    let mut folds = vec![0usize; manifest.len()];
    for stratum in Stratum::all() {
        let mut members: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.stratum() == stratum)
            .map(|(i, _)| i)
            .collect();
        let mut stream = derive_stream(seed, &format!("split:{stratum}"));
        members.shuffle(stream.rng());
        let start = stratum.ordinal() % k;
        for (j, idx) in members.into_iter().enumerate() {
            folds[idx] = (start + j) % k;
        }
    }
    let assignment = manifest
        .entries
        .iter()
        .map(|e| e.path.clone())
        .zip(folds)
        .collect();
    Ok(FoldAssignment { k, assignment })
}

pub fn write_fold_assignment<W: Write>(fa: &FoldAssignment, out: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| DatasetError::Parse {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(["path", "fold"]).map_err(err)?;
    for (path, fold) in &fa.assignment {
        w.write_record([path.as_str(), &fold.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: PathBuf::from("<output>"),
        source,
    })
}

/// Reads a `path,fold` file; every fold must lie in `[0, k)`.
pub fn read_fold_assignment<R: Read>(input: R, k: usize) -> Result<FoldAssignment, DatasetError> {
    if k == 0 {
        return Err(DatasetError::InvalidK(k));
    }
    let mut reader = csv_reader(input);
    check_header(&mut reader, &["path", "fold"])?;
    let mut assignment = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| DatasetError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record_line(&record);
        if record.len() != 2 {
            return Err(DatasetError::Parse {
                line,
                message: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let path = record[0].trim().to_string();
        check_path_field(&path, line)?;
        let fold: usize = record[1].trim().parse().map_err(|_| DatasetError::Parse {
            line,
            message: format!("fold `{}` is not a non-negative integer", &record[1]),
        })?;
        if fold >= k {
            return Err(DatasetError::FoldOutOfRange { line, fold, k });
        }
        if !seen.insert(path.clone()) {
            return Err(DatasetError::DuplicatePath(path));
        }
        assignment.push((path, fold));
    }
    Ok(FoldAssignment { k, assignment })
}

/// Infers `k` as one more than the largest fold in the file.
pub fn load_fold_assignment(path: &Path) -> Result<FoldAssignment, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let k = text
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.trim().parse::<usize>().ok())
        .max()
        .map_or(1, |m| m + 1);
    read_fold_assignment(text.as_bytes(), k)
}

/// Per-stratum image counts of the 1,469-image grapevine dataset
/// (547 healthy, 496 downy mildew, 426 spider mite; 841 leaf-focused, 628 canopy).
pub const GRAPEVINE_STRATUM_COUNTS: [(Stratum, usize); 6] = [
    (
        Stratum {
            label: Label::Healthy,
            image_type: ImageType::LeafFocused,
        },
        308,
    ),
    (
        Stratum {
            label: Label::Healthy,
            image_type: ImageType::Canopy,
        },
        239,
    ),
    (
        Stratum {
            label: Label::DownyMildew,
            image_type: ImageType::LeafFocused,
        },
        275,
    ),
    (
        Stratum {
            label: Label::DownyMildew,
            image_type: ImageType::Canopy,
        },
        221,
    ),
    (
        Stratum {
            label: Label::SpiderMite,
            image_type: ImageType::LeafFocused,
        },
        258,
    ),
    (
        Stratum {
            label: Label::SpiderMite,
            image_type: ImageType::Canopy,
        },
        168,
    ),
];

/// Synthetic manifest with the given count for every stratum, in
/// `Stratum::all()` order. Paths look like `healthy/canopy/0007.png`.
pub fn synthetic_manifest(counts: &[(Stratum, usize)]) -> DatasetManifest {
    let entries = counts
        .iter()
        .flat_map(|(s, n)| {
            (0..*n).map(move |i| ManifestEntry {
                path: format!("{}/{}/{i:04}.png", s.label, s.image_type),
                label: s.label,
                image_type: s.image_type,
            })
        })
        .collect();
    DatasetManifest {
        entries,
        base_dir: PathBuf::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stratum(label: Label, image_type: ImageType) -> Stratum {
        Stratum { label, image_type }
    }

    #[test]
    fn header_only_is_empty() {
        let m = parse_manifest("path,label,image_type\n".as_bytes()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn parses_rows() {
        let text =
            "path,label,image_type\na.png,healthy,canopy\nb/c.jpg,spider_mite,leaf_focused\n";
        let m = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries()[1].label, Label::SpiderMite);
        assert_eq!(m.entries()[1].image_type, ImageType::LeafFocused);
    }

    #[test]
    fn unknown_label() {
        let text = "path,label,image_type\na.png,healthy,canopy\nb.png,mildew,canopy\n";
        match parse_manifest(text.as_bytes()) {
            Err(DatasetError::UnknownLabel { line, value, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(value, "mildew");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_image_type() {
        let text = "path,label,image_type\na.png,healthy,aerial\n";
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(DatasetError::UnknownLabel {
                field: "image_type",
                ..
            })
        ));
    }

    #[test]
    fn duplicate_path() {
        let text = "path,label,image_type\na.png,healthy,canopy\na.png,healthy,leaf_focused\n";
        assert!(
            matches!(parse_manifest(text.as_bytes()), Err(DatasetError::DuplicatePath(p)) if p == "a.png")
        );
    }

    #[test]
    fn malformed_rows() {
        let bad_header = "file,label,type\n";
        assert!(matches!(
            parse_manifest(bad_header.as_bytes()),
            Err(DatasetError::Parse { line: 1, .. })
        ));
        let short = "path,label,image_type\na.png,healthy\n";
        assert!(matches!(
            parse_manifest(short.as_bytes()),
            Err(DatasetError::Parse { line: 2, .. })
        ));
        let quoted = "path,label,image_type\n\"a,b.png\",healthy,canopy\n";
        assert!(matches!(
            parse_manifest(quoted.as_bytes()),
            Err(DatasetError::Parse { line: 2, .. })
        ));
    }

    fn table_one() -> DatasetManifest {
        synthetic_manifest(&GRAPEVINE_STRATUM_COUNTS)
    }

    #[test]
    fn table_one_manifest_round_trips_through_csv() {
        let m = table_one();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let parsed = parse_manifest(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), 1469);
        let by_label = |l| parsed.entries().iter().filter(|e| e.label == l).count();
        assert_eq!(by_label(Label::Healthy), 547);
        assert_eq!(by_label(Label::DownyMildew), 496);
        assert_eq!(by_label(Label::SpiderMite), 426);
        let by_type = |t| {
            parsed
                .entries()
                .iter()
                .filter(|e| e.image_type == t)
                .count()
        };
        assert_eq!(by_type(ImageType::LeafFocused), 841);
        assert_eq!(by_type(ImageType::Canopy), 628);
    }

    #[test]
    fn single_fold() {
        let fa = stratified_kfold(&table_one(), 1, 9).unwrap();
        assert!(fa.assignment().iter().all(|(_, f)| *f == 0));
    }

    #[test]
    fn invalid_k() {
        assert!(matches!(
            stratified_kfold(&table_one(), 0, 0),
            Err(DatasetError::InvalidK(0))
        ));
    }

    #[test]
    fn seven_in_five_folds() {
        let m = synthetic_manifest(&[(stratum(Label::Healthy, ImageType::Canopy), 7)]);
        for seed in 0..20 {
            let mut sizes = stratified_kfold(&m, 5, seed).unwrap().fold_sizes();
            sizes.sort_unstable();
            assert_eq!(sizes, vec![1, 1, 1, 2, 2]);
        }
    }

    #[test]
    fn table_one_folds_are_balanced() {
        let m = table_one();
        let fa = stratified_kfold(&m, 5, 0).unwrap();
        assert_eq!(fa.assignment().len(), 1469);
        for size in fa.fold_sizes() {
            assert!((size as f64 - 1469.0 / 5.0).abs() <= 6.0, "{size}");
            assert!((size as f64 / 1469.0 - 0.2).abs() <= 6.0 / 1469.0);
        }
        let lookup = fa.lookup();
        for s in Stratum::all() {
            let mut per_fold = [0usize; 5];
            for e in m.entries().iter().filter(|e| e.stratum() == s) {
                per_fold[lookup[e.path.as_str()]] += 1;
            }
            let max = per_fold.iter().max().unwrap();
            let min = per_fold.iter().min().unwrap();
            assert!(max - min <= 1, "{s}: {per_fold:?}");
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let m = table_one();
        assert_eq!(
            stratified_kfold(&m, 5, 3).unwrap(),
            stratified_kfold(&m, 5, 3).unwrap()
        );
        assert_ne!(
            stratified_kfold(&m, 5, 3).unwrap(),
            stratified_kfold(&m, 5, 4).unwrap()
        );
    }

    #[test]
    fn fold_file_round_trip_and_bounds() {
        let fa = stratified_kfold(&table_one(), 5, 1).unwrap();
        let mut buf = Vec::new();
        write_fold_assignment(&fa, &mut buf).unwrap();
        assert_eq!(read_fold_assignment(buf.as_slice(), 5).unwrap(), fa);

        let text = "path,fold\na.png,0\nb.png,5\n";
        assert!(matches!(
            read_fold_assignment(text.as_bytes(), 5),
            Err(DatasetError::FoldOutOfRange {
                line: 3,
                fold: 5,
                k: 5
            })
        ));
        assert!(matches!(
            read_fold_assignment("path,fold\na.png,x\n".as_bytes(), 5),
            Err(DatasetError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_assignment_is_header_only() {
        let fa = FoldAssignment::new(5, vec![]).unwrap();
        let mut buf = Vec::new();
        write_fold_assignment(&fa, &mut buf).unwrap();
        assert_eq!(buf, b"path,fold\n");
    }

    proptest! {
        #[test]
        fn folds_partition_and_balance(
            counts in prop::collection::vec(0usize..40, 6),
            k in 1usize..9,
            seed in any::<u64>(),
        ) {
            let cells: Vec<(Stratum, usize)> = Stratum::all().zip(counts).collect();
            let m = synthetic_manifest(&cells);
            let fa = stratified_kfold(&m, k, seed).unwrap();
            prop_assert_eq!(fa.assignment().len(), m.len());
            for ((path, fold), e) in fa.assignment().iter().zip(m.entries()) {
                prop_assert_eq!(path, &e.path);
                prop_assert!(*fold < k);
            }
            let lookup = fa.lookup();
            for s in Stratum::all() {
                let mut per_fold = vec![0usize; k];
                for e in m.entries().iter().filter(|e| e.stratum() == s) {
                    per_fold[lookup[e.path.as_str()]] += 1;
                }
                prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
            }
        }
    }
}
