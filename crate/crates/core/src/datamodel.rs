//! Dataset manifests, identity label spaces and the joint source+target
//! label space used for joint pre-training.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Five (x, y) landmarks in source-image pixel coordinates: left eye,
/// right eye, nose tip, left mouth corner, right mouth corner.
pub type Landmarks = [[f64; 2]; 5];

pub const MANIFEST_HEADER: [&str; 14] = [
    "path", "identity", "modality", "split", "lx1", "ly1", "lx2", "ly2", "lx3", "ly3", "lx4",
    "ly4", "lx5", "ly5",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "VIS")]
    Vis,
    #[serde(rename = "NIR")]
    Nir,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Vis => "VIS",
            Modality::Nir => "NIR",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "VIS" => Ok(Modality::Vis),
            "NIR" => Ok(Modality::Nir),
            other => Err(format!("unknown modality `{other}` (expected VIS or NIR)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Probe,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Probe => "probe",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "gallery" => Ok(Split::Gallery),
            "probe" => Ok(Split::Probe),
            other => Err(format!(
                "unknown split `{other}` (expected train, gallery or probe)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Image location, relative to the manifest directory unless absolute.
    pub path: String,
    pub identity: String,
    pub modality: Modality,
    pub split: Split,
    pub landmarks: Option<Landmarks>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if self.identity.is_empty() {
            return Err(Error::InvalidRecord(format!("{}: empty identity", self.path)));
        }
        if let Some(points) = &self.landmarks {
            if points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidRecord(format!(
                    "{}: non-finite landmark coordinate",
                    self.path
                )));
            }
        }
        Ok(())
    }
}

/// Bijection between identity keys and contiguous labels `0..C`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityIndex {
    ids: IndexSet<String>,
}

impl IdentityIndex {
    /// Builds the index in first-appearance order.
    pub fn from_identities<'a>(identities: impl IntoIterator<Item = &'a str>) -> Self {
        let mut ids = IndexSet::new();
        for id in identities {
            if !ids.contains(id) {
                ids.insert(id.to_string());
            }
        }
        IdentityIndex { ids }
    }

    pub fn label(&self, identity: &str) -> Option<usize> {
        self.ids.get_index_of(identity)
    }

    pub fn identity(&self, label: usize) -> Option<&str> {
        self.ids.get_index(label).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }
}

/// Which records a protocol or training phase selects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFilter {
    pub modality: Option<Modality>,
    pub split: Option<Split>,
}

impl RecordFilter {
    pub fn new(modality: Option<Modality>, split: Option<Split>) -> Self {
        RecordFilter { modality, split }
    }

    pub fn split(split: Split) -> Self {
        RecordFilter {
            modality: None,
            split: Some(split),
        }
    }

    pub fn matches(&self, record: &ImageRecord) -> bool {
        self.modality.is_none_or(|m| m == record.modality)
            && self.split.is_none_or(|s| s == record.split)
    }
}

impl fmt::Display for RecordFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let modality = self.modality.map_or("any".to_string(), |m| m.to_string());
        let split = self.split.map_or("any".to_string(), |s| s.to_string());
        write!(f, "{modality}/{split}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    /// Directory relative record paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    pub identity_index: IdentityIndex,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Result<Self> {
        let name = name.into();
        if records.is_empty() {
            return Err(Error::EmptySubset(name));
        }
        for record in &records {
            record.validate()?;
        }
        let identity_index = IdentityIndex::from_identities(records.iter().map(|r| r.identity.as_str()));
        Ok(DatasetManifest {
            name,
            root: root.into(),
            records,
            identity_index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.identity_index.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| self.identity_index.label(&r.identity).expect("identity indexed"))
            .collect()
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        let path = Path::new(&record.path);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn subset(&self, filter: &RecordFilter) -> Result<DatasetManifest> {
        subset(self, filter)
    }
}

fn parse_row(path: &Path, line: usize, row: &csv::StringRecord) -> Result<ImageRecord> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    if row.len() != MANIFEST_HEADER.len() {
        return Err(err(format!(
            "expected {} columns, found {}",
            MANIFEST_HEADER.len(),
            row.len()
        )));
    }
    let modality = row[2].trim().parse::<Modality>().map_err(&err)?;
    let split = row[3].trim().parse::<Split>().map_err(&err)?;
    let cells: Vec<&str> = (4..14).map(|i| row[i].trim()).collect();
    let landmarks = if cells.iter().all(|c| c.is_empty()) {
        None
    } else if cells.iter().any(|c| c.is_empty()) {
        return Err(err("landmark cells must be all empty or all present".into()));
    } else {
        let mut points = [[0.0; 2]; 5];
        for (i, cell) in cells.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .map_err(|_| err(format!("bad landmark value `{cell}`")))?;
            if !value.is_finite() {
                return Err(err(format!("non-finite landmark value `{cell}`")));
            }
            points[i / 2][i % 2] = value;
        }
        Some(points)
    };
    let identity = row[1].trim().to_string();
    if identity.is_empty() {
        return Err(err("empty identity".into()));
    }
    Ok(ImageRecord {
        path: row[0].trim().to_string(),
        identity,
        modality,
        split,
        landmarks,
    })
}

/// Reads a manifest CSV. Records keep file order and labels are assigned by
/// first appearance of each identity.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(file);
    let header = reader.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let header: Vec<&str> = header.iter().map(str::trim).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        records.push(parse_row(path, line, &row)?);
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".to_string());
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(name, root, records)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut writer = csv::Writer::from_path(path).map_err(io_err)?;
    writer.write_record(MANIFEST_HEADER).map_err(io_err)?;
    for record in &manifest.records {
        let mut row = vec![
            record.path.clone(),
            record.identity.clone(),
            record.modality.to_string(),
            record.split.to_string(),
        ];
        match &record.landmarks {
            Some(points) => row.extend(points.iter().flatten().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), 10)),
        }
        writer.write_record(&row).map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Filters a manifest; the identity index is rebuilt over the survivors.
pub fn subset(manifest: &DatasetManifest, filter: &RecordFilter) -> Result<DatasetManifest> {
    let records: Vec<ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| filter.matches(r))
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(Error::EmptySubset(format!("{} [{filter}]", manifest.name)));
    }
    DatasetManifest::new(manifest.name.clone(), manifest.root.clone(), records)
}

/// Identity space over source followed by target identities. Source labels
/// occupy `0..C_src`, target labels the contiguous block after them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointLabelMap {
    pub source_ids: Vec<String>,
    /// Target identities under their joint (possibly suffixed) names.
    pub target_ids: Vec<String>,
    /// Original target identity name -> joint name, for renamed entries only.
    pub renamed: HashMap<String, String>,
    joint_index: IdentityIndex,
}

pub const COLLISION_SUFFIX: &str = "#tgt";

impl JointLabelMap {
    pub fn new(source_ids: Vec<String>, target_ids: Vec<String>) -> Self {
        let mut taken: IndexSet<String> = source_ids.iter().cloned().collect();
        let mut renamed = HashMap::new();
        let mut joint_targets = Vec::with_capacity(target_ids.len());
        for id in target_ids {
            let mut name = id.clone();
            while taken.contains(&name) {
                name.push_str(COLLISION_SUFFIX);
            }
            if name != id {
                renamed.insert(id, name.clone());
            }
            taken.insert(name.clone());
            joint_targets.push(name);
        }
        let joint_index = IdentityIndex { ids: taken };
        JointLabelMap {
            source_ids,
            target_ids: joint_targets,
            renamed,
            joint_index,
        }
    }

    pub fn num_source(&self) -> usize {
        self.source_ids.len()
    }

    pub fn num_target(&self) -> usize {
        self.target_ids.len()
    }

    pub fn len(&self) -> usize {
        self.joint_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint_index.is_empty()
    }

    pub fn joint_index(&self) -> &IdentityIndex {
        &self.joint_index
    }

    pub fn source_label(&self, identity: &str) -> Option<usize> {
        self.joint_index
            .label(identity)
            .filter(|&l| l < self.num_source())
    }

    /// Joint label for a target identity given by its original name.
    pub fn target_label(&self, identity: &str) -> Option<usize> {
        let name = self.renamed.get(identity).map_or(identity, String::as_str);
        self.joint_index
            .label(name)
            .filter(|&l| l >= self.num_source())
    }

    /// Target identities under their original names, in target-block order.
    pub fn original_target_ids(&self) -> Vec<String> {
        let reverse: HashMap<&str, &str> = self
            .renamed
            .iter()
            .map(|(orig, joint)| (joint.as_str(), orig.as_str()))
            .collect();
        self.target_ids
            .iter()
            .map(|id| reverse.get(id.as_str()).copied().unwrap_or(id).to_string())
            .collect()
    }

    /// Position of a target identity (original name) within the target block.
    pub fn target_offset(&self, identity: &str) -> Option<usize> {
        self.target_label(identity).map(|l| l - self.num_source())
    }
}

pub fn merge_identity_spaces(source: &DatasetManifest, target: &DatasetManifest) -> JointLabelMap {
    JointLabelMap::new(
        source.identity_index.iter().map(str::to_string).collect(),
        target.identity_index.iter().map(str::to_string).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(id: &str, modality: Modality, split: Split) -> ImageRecord {
        ImageRecord {
            path: format!("{id}.png"),
            identity: id.into(),
            modality,
            split,
            landmarks: None,
        }
    }

    fn write_file(contents: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(contents.as_bytes())
            .unwrap();
        (dir, path)
    }

    const HEADER: &str = "path,identity,modality,split,lx1,ly1,lx2,ly2,lx3,ly3,lx4,ly4,lx5,ly5\n";

    #[test]
    fn three_rows_two_identities() {
        let body = format!(
            "{HEADER}a.png,bob,VIS,train,,,,,,,,,,\nb.png,amy,NIR,probe,1,2,3,4,5,6,7,8,9,10\nc.png,bob,NIR,gallery,,,,,,,,,,\n"
        );
        let (_dir, path) = write_file(&body);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.identity_index.label("bob"), Some(0));
        assert_eq!(m.identity_index.label("amy"), Some(1));
        assert_eq!(m.labels(), vec![0, 1, 0]);
        assert_eq!(m.records[1].landmarks.unwrap()[4], [9.0, 10.0]);
    }

    #[test]
    fn bad_modality_names_the_line() {
        let body = format!("{HEADER}a.png,bob,VIS,train,,,,,,,,,,\nb.png,amy,IR,train,,,,,,,,,,\n");
        let (_dir, path) = write_file(&body);
        match load_manifest(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("IR"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_column_count_and_nonfinite_landmarks() {
        let body = format!("{HEADER}a.png,bob,VIS,train\n");
        let (_dir, path) = write_file(&body);
        assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 2, .. })));

        let body = format!("{HEADER}a.png,bob,VIS,train,1,2,3,4,5,6,7,8,9,inf\n");
        let (_dir, path) = write_file(&body);
        assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 2, .. })));

        let body = format!("{HEADER}a.png,bob,VIS,train,1,2,3,4,5,6,7,8,9,\n");
        let (_dir, path) = write_file(&body);
        assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_file_is_an_error() {
        let (_dir, path) = write_file(HEADER);
        assert!(matches!(load_manifest(&path), Err(Error::EmptyManifest(_))));
        let (_dir, path) = write_file("");
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn merge_assigns_contiguous_blocks() {
        let src = DatasetManifest::new(
            "src",
            "",
            vec![record("A", Modality::Vis, Split::Train), record("B", Modality::Vis, Split::Train)],
        )
        .unwrap();
        let tgt = DatasetManifest::new("tgt", "", vec![record("C", Modality::Nir, Split::Train)]).unwrap();
        let joint = merge_identity_spaces(&src, &tgt);
        assert_eq!(joint.source_label("A"), Some(0));
        assert_eq!(joint.source_label("B"), Some(1));
        assert_eq!(joint.target_label("C"), Some(2));
        assert_eq!(joint.len(), 3);
    }

    #[test]
    fn merge_renames_colliding_target_identities() {
        let src = DatasetManifest::new("src", "", vec![record("A", Modality::Vis, Split::Train)]).unwrap();
        let tgt = DatasetManifest::new("tgt", "", vec![record("A", Modality::Nir, Split::Train)]).unwrap();
        let joint = merge_identity_spaces(&src, &tgt);
        assert_eq!(joint.len(), 2);
        assert_eq!(joint.target_ids, vec!["A#tgt".to_string()]);
        assert_eq!(joint.source_label("A"), Some(0));
        assert_eq!(joint.target_label("A"), Some(1));
        assert_eq!(joint.target_offset("A"), Some(0));
    }

    #[test]
    fn subset_filters_and_reindexes() {
        let m = DatasetManifest::new(
            "m",
            "",
            vec![
                record("A", Modality::Vis, Split::Train),
                record("B", Modality::Vis, Split::Gallery),
                record("C", Modality::Vis, Split::Gallery),
            ],
        )
        .unwrap();
        let gallery = subset(&m, &RecordFilter::split(Split::Gallery)).unwrap();
        assert_eq!(gallery.records.len(), 2);
        assert!(gallery.records.iter().all(|r| r.split == Split::Gallery));
        assert_eq!(gallery.identity_index.label("B"), Some(0));
        assert_eq!(gallery.identity_index.label("A"), None);

        let nir = RecordFilter::new(Some(Modality::Nir), None);
        assert!(matches!(subset(&m, &nir), Err(Error::EmptySubset(_))));
    }
}
