//! Bags, pseudo bags, class priority and the on-disk feature store.
//!
//! A feature store is a directory holding `manifest.json` and one raw
//! little-endian `f32` file per bag (row-major `N×d`, no header).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Total order over class indices. A higher rank dominates when merging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPriority {
    classes: Vec<String>,
    rank: Vec<usize>,
}

impl ClassPriority {
    /// `rank[k]` is the priority of class index `k`; ranks must be a
    /// permutation of `0..C`.
    pub fn new(classes: Vec<String>, rank: Vec<usize>) -> Result<Self> {
        let c = classes.len();
        if c < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {c}")));
        }
        if rank.len() != c {
            return Err(Error::Domain(format!("{} ranks for {c} classes", rank.len())));
        }
        let mut seen = vec![false; c];
        for &r in &rank {
            if r >= c || seen[r] {
                return Err(Error::Domain(format!("ranks {rank:?} are not a permutation of 0..{c}")));
            }
            seen[r] = true;
        }
        Ok(ClassPriority { classes, rank })
    }

    /// Classes listed lowest priority first; rank equals index.
    pub fn ascending(classes: Vec<String>) -> Result<Self> {
        let rank = (0..classes.len()).collect();
        ClassPriority::new(classes, rank)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class]
    }

    pub fn rank(&self, class: usize) -> usize {
        self.rank[class]
    }

    pub fn ranks(&self) -> &[usize] {
        &self.rank
    }

    pub fn is_identity(&self) -> bool {
        self.rank.iter().enumerate().all(|(i, r)| i == *r)
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class < self.classes.len() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "class {class} out of range for {} classes",
                self.classes.len()
            )))
        }
    }

    /// The class of lowest priority.
    pub fn lowest(&self) -> usize {
        self.rank.iter().position(|r| *r == 0).expect("ranks are a permutation")
    }

    /// Class of maximum priority in a non-empty set of labels.
    pub fn max_of(&self, labels: impl IntoIterator<Item = usize>) -> Option<usize> {
        labels.into_iter().max_by_key(|c| self.rank[*c])
    }
}

/// Returns whichever of `a`, `b` has the higher priority.
pub fn max_priority_label(a: usize, b: usize, priority: &ClassPriority) -> Result<usize> {
    priority.check_class(a)?;
    priority.check_class(b)?;
    Ok(if priority.rank(b) > priority.rank(a) { b } else { a })
}

/// A parent sample: `N×d` instance features and a bag label.
///
/// Oracle instance labels, when present, are reachable only through
/// [`Bag::oracle_instance_labels`]; the training path never calls it.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    id: String,
    num_instances: usize,
    dim: usize,
    features: Vec<f32>,
    label: usize,
    instance_labels: Option<Vec<usize>>,
}

impl Bag {
    pub fn new(
        id: impl Into<String>,
        num_instances: usize,
        dim: usize,
        features: Vec<f32>,
        label: usize,
        instance_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let id = id.into();
        if num_instances == 0 || dim == 0 {
            return Err(Error::Data(format!("bag {id}: empty shape {num_instances}x{dim}")));
        }
        if features.len() != num_instances * dim {
            return Err(Error::Integrity(format!(
                "bag {id}: {} values for {num_instances}x{dim}",
                features.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("bag {id}: non-finite value at offset {pos}")));
        }
        if let Some(il) = &instance_labels {
            if il.len() != num_instances {
                return Err(Error::Data(format!(
                    "bag {id}: {} instance labels for {num_instances} instances",
                    il.len()
                )));
            }
        }
        Ok(Bag {
            id,
            num_instances,
            dim,
            features,
            label,
            instance_labels,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw storage-precision features, row-major.
    pub fn raw_features(&self) -> &[f32] {
        &self.features
    }

    pub fn instance(&self, j: usize) -> &[f32] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    /// All instances widened to `f64`.
    pub fn features(&self) -> Matrix {
        let data = self.features.iter().map(|v| f64::from(*v)).collect();
        Matrix::new(self.num_instances, self.dim, data).expect("shape checked at construction")
    }

    /// The listed instances, in the given order, widened to `f64`.
    pub fn gather(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &j in indices {
            if j >= self.num_instances {
                return Err(Error::Contract(format!(
                    "instance {j} out of range for bag {} with {} instances",
                    self.id, self.num_instances
                )));
            }
            data.extend(self.instance(j).iter().map(|v| f64::from(*v)));
        }
        Matrix::new(indices.len(), self.dim, data)
    }

    pub fn has_oracle(&self) -> bool {
        self.instance_labels.is_some()
    }

    /// Ground-truth instance labels of synthetic data. Metrics and data
    /// generation only.
    pub fn oracle_instance_labels(&self) -> Option<&[usize]> {
        self.instance_labels.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Pending,
    Labeled,
    Unlabeled,
    Discarded,
}

/// A subset of a parent bag's instances carrying the parent's label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoBag {
    /// Position of the parent in its dataset.
    pub parent: usize,
    pub parent_id: String,
    members: Vec<usize>,
    pub inherited_label: usize,
    status: Status,
    pub prediction: Option<usize>,
    pub confidence: Option<f64>,
}

impl PseudoBag {
    /// `members` are sorted and must be non-empty and duplicate free.
    pub fn new(parent: usize, parent_bag: &Bag, mut members: Vec<usize>) -> Result<Self> {
        members.sort_unstable();
        if members.is_empty() {
            return Err(Error::Contract(format!("empty pseudo bag of {}", parent_bag.id())));
        }
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!("duplicate member in pseudo bag of {}", parent_bag.id())));
        }
        if *members.last().expect("non-empty") >= parent_bag.num_instances() {
            return Err(Error::Contract(format!(
                "member out of range for {} with {} instances",
                parent_bag.id(),
                parent_bag.num_instances()
            )));
        }
        Ok(PseudoBag {
            parent,
            parent_id: parent_bag.id().to_string(),
            members,
            inherited_label: parent_bag.label(),
            status: Status::Pending,
            prediction: None,
            confidence: None,
        })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn status(&self) -> Status {
        self.status
    }

    /// Moves a pending pseudo bag to its final status. Any other transition
    /// is rejected.
    pub fn set_status(&mut self, next: Status) -> Result<()> {
        if self.status != Status::Pending || next == Status::Pending {
            return Err(Error::Contract(format!(
                "illegal pseudo bag transition {:?} -> {next:?}",
                self.status
            )));
        }
        self.status = next;
        Ok(())
    }

    /// Adds recycled instances; only pending pseudo bags may grow.
    pub fn absorb(&mut self, extra: &[usize]) -> Result<()> {
        if self.status != Status::Pending {
            return Err(Error::Contract(format!("cannot grow a {:?} pseudo bag", self.status)));
        }
        self.members.extend_from_slice(extra);
        self.members.sort_unstable();
        if self.members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("recycled instance already present".into()));
        }
        Ok(())
    }

    /// Class used for priority comparisons: the inherited label once labeled,
    /// otherwise the teacher's prediction when one exists.
    pub fn effective_class(&self) -> usize {
        match self.status {
            Status::Labeled => self.inherited_label,
            _ => self.prediction.unwrap_or(self.inherited_label),
        }
    }

    pub fn features(&self, parent: &Bag) -> Result<Matrix> {
        parent.gather(&self.members)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    bags: Vec<Bag>,
    priority: ClassPriority,
    split: BTreeMap<String, Split>,
}

impl Dataset {
    /// Validates ids, labels, dimensions and oracle consistency.
    ///
    /// Bags missing from `split` are assigned to the training split.
    pub fn new(bags: Vec<Bag>, priority: ClassPriority, mut split: BTreeMap<String, Split>) -> Result<Self> {
        if bags.is_empty() {
            return Err(Error::Data("dataset has no bags".into()));
        }
        let dim = bags[0].dim();
        let c = priority.num_classes();
        let mut ids = HashSet::new();
        for bag in &bags {
            if !ids.insert(bag.id()) {
                return Err(Error::Data(format!("duplicate bag id {}", bag.id())));
            }
            if bag.dim() != dim {
                return Err(Error::Data(format!(
                    "bag {} has dim {}, expected {dim}",
                    bag.id(),
                    bag.dim()
                )));
            }
            if bag.label() >= c {
                return Err(Error::Data(format!(
                    "bag {} label {} out of range for {c} classes",
                    bag.id(),
                    bag.label()
                )));
            }
            if let Some(il) = bag.oracle_instance_labels() {
                if let Some(bad) = il.iter().find(|l| **l >= c) {
                    return Err(Error::Data(format!(
                        "bag {} instance label {bad} out of range",
                        bag.id()
                    )));
                }
                let oracle = priority.max_of(il.iter().copied()).expect("non-empty bag");
                if oracle != bag.label() {
                    return Err(Error::Data(format!(
                        "bag {} label {} disagrees with max-priority instance label {oracle}",
                        bag.id(),
                        bag.label()
                    )));
                }
            }
            split.entry(bag.id().to_string()).or_insert(Split::Train);
        }
        if let Some(stray) = split.keys().find(|k| !ids.contains(k.as_str())) {
            return Err(Error::Data(format!("split names unknown bag {stray}")));
        }
        Ok(Dataset { bags, priority, split })
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn bag(&self, index: usize) -> &Bag {
        &self.bags[index]
    }

    pub fn find(&self, id: &str) -> Option<(usize, &Bag)> {
        self.bags.iter().enumerate().find(|(_, b)| b.id() == id)
    }

    pub fn priority(&self) -> &ClassPriority {
        &self.priority
    }

    pub fn num_classes(&self) -> usize {
        self.priority.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.bags[0].dim()
    }

    pub fn split_of(&self, id: &str) -> Split {
        self.split.get(id).copied().unwrap_or(Split::Train)
    }

    /// Indices of the bags in `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.bags.len())
            .filter(|i| self.split_of(self.bags[*i].id()) == split)
            .collect()
    }

    pub fn has_oracle(&self) -> bool {
        self.bags.iter().all(Bag::has_oracle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    dim: usize,
    classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    priority: Option<Vec<usize>>,
    bags: Vec<ManifestBag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBag {
    id: String,
    label: usize,
    num_instances: usize,
    file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instance_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

pub fn load_feature_store(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Format(format!("missing {}", manifest_path.display())),
        _ => Error::io(&manifest_path, e),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.dim == 0 {
        return Err(Error::Format("manifest dim must be positive".into()));
    }
    let priority = match manifest.priority {
        Some(rank) => ClassPriority::new(manifest.classes, rank)?,
        None => ClassPriority::ascending(manifest.classes)?,
    };

    let mut bags = Vec::with_capacity(manifest.bags.len());
    let mut split = BTreeMap::new();
    for entry in manifest.bags {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = entry.num_instances * manifest.dim * 4;
        if bytes.len() != expected {
            return Err(Error::Integrity(format!(
                "{}: {} bytes, manifest implies {}x{}x4 = {expected}",
                path.display(),
                bytes.len(),
                entry.num_instances,
                manifest.dim
            )));
        }
        let features = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(s) = entry.split {
            split.insert(entry.id.clone(), s);
        }
        bags.push(Bag::new(
            entry.id,
            entry.num_instances,
            manifest.dim,
            features,
            entry.label,
            entry.instance_labels,
        )?);
    }
    Dataset::new(bags, priority, split)
}

/// Writes `manifest.json` plus one `bag_NNNNN.f32` file per bag.
pub fn save_feature_store(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.bags.len());
    for (i, bag) in ds.bags.iter().enumerate() {
        let file = format!("bag_{i:05}.f32");
        let bytes: Vec<u8> = bag.features.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestBag {
            id: bag.id.clone(),
            label: bag.label,
            num_instances: bag.num_instances,
            file,
            instance_labels: bag.instance_labels.clone(),
            split: Some(ds.split_of(&bag.id)),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dim: ds.dim(),
        classes: ds.priority.names().to_vec(),
        priority: (!ds.priority.is_identity()).then(|| ds.priority.ranks().to_vec()),
        bags: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary() -> ClassPriority {
        ClassPriority::ascending(vec!["normal".into(), "tumor".into()]).unwrap()
    }

    fn write_store(dir: &Path, n: usize, bytes: usize) {
        let manifest = serde_json::json!({
            "version": 1, "dim": 3, "classes": ["normal", "tumor"],
            "bags": [{"id": "a", "label": 1, "num_instances": n, "file": "a.f32"}]
        });
        fs::write(dir.join(MANIFEST_FILE), manifest.to_string()).unwrap();
        let data: Vec<u8> = (0..bytes).map(|i| if i % 4 == 3 { 0x3f } else { 0 }).collect();
        fs::write(dir.join("a.f32"), data).unwrap();
    }

    #[test]
    fn loads_two_by_three_bag() {
        let tmp = tempfile::tempdir().unwrap();
        write_store(tmp.path(), 2, 24);
        let ds = load_feature_store(tmp.path()).unwrap();
        assert_eq!(ds.bags().len(), 1);
        assert_eq!(ds.bag(0).features().shape(), (2, 3));
        assert_eq!(ds.bag(0).label(), 1);
        assert_eq!(ds.split_of("a"), Split::Train);
    }

    #[test]
    fn short_file_is_an_integrity_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_store(tmp.path(), 2, 20);
        assert!(matches!(load_feature_store(tmp.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_or_corrupt_manifest_is_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_feature_store(tmp.path()), Err(Error::Format(_))));
        fs::write(tmp.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(load_feature_store(tmp.path()), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_value_is_a_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_store(tmp.path(), 2, 24);
        let mut bytes = fs::read(tmp.path().join("a.f32")).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(tmp.path().join("a.f32"), bytes).unwrap();
        assert!(matches!(load_feature_store(tmp.path()), Err(Error::Data(_))));
    }

    #[test]
    fn save_writes_manifest_and_one_file_per_bag() {
        let bags = (0..3)
            .map(|i| Bag::new(format!("b{i}"), 2, 2, vec![i as f32; 4], 0, Some(vec![0, 0])).unwrap())
            .collect();
        let ds = Dataset::new(bags, binary(), BTreeMap::new()).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_feature_store(&ds, tmp.path()).unwrap();
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 4);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(tmp.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest["bags"][0]["instance_labels"].as_array().unwrap().len(), 2);
        assert!(manifest.get("priority").is_none());
    }

    #[test]
    fn non_identity_priority_round_trips() {
        let prio = ClassPriority::new(vec!["x".into(), "y".into(), "z".into()], vec![2, 0, 1]).unwrap();
        let bag = Bag::new("only", 1, 1, vec![0.5], 0, Some(vec![0])).unwrap();
        let ds = Dataset::new(vec![bag], prio, BTreeMap::new()).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_feature_store(&ds, tmp.path()).unwrap();
        assert_eq!(load_feature_store(tmp.path()).unwrap(), ds);
    }

    #[test]
    fn max_priority_label_examples() {
        let p = binary();
        assert_eq!(max_priority_label(1, 0, &p).unwrap(), 1);
        assert_eq!(max_priority_label(0, 1, &p).unwrap(), 1);
        assert_eq!(max_priority_label(0, 0, &p).unwrap(), 0);
        assert!(matches!(max_priority_label(2, 0, &p), Err(Error::Domain(_))));

        let bracs = ClassPriority::ascending(vec!["benign".into(), "at".into(), "mt".into()]).unwrap();
        assert_eq!(max_priority_label(0, 2, &bracs).unwrap(), 2);
        assert_eq!(max_priority_label(1, 0, &bracs).unwrap(), 1);
        assert_eq!(max_priority_label(2, 1, &bracs).unwrap(), 2);
    }

    #[test]
    fn pseudo_bag_lifecycle() {
        let bag = Bag::new("p", 4, 1, vec![0.0; 4], 1, None).unwrap();
        let mut pb = PseudoBag::new(0, &bag, vec![3, 1]).unwrap();
        assert_eq!(pb.members(), &[1, 3]);
        assert_eq!(pb.inherited_label, 1);
        pb.absorb(&[0]).unwrap();
        assert!(pb.absorb(&[1]).is_err());
        pb.set_status(Status::Unlabeled).unwrap();
        assert!(pb.set_status(Status::Labeled).is_err());
        assert!(pb.absorb(&[2]).is_err());
        assert!(PseudoBag::new(0, &bag, vec![]).is_err());
        assert!(PseudoBag::new(0, &bag, vec![4]).is_err());
    }

    #[test]
    fn priority_validation() {
        assert!(ClassPriority::ascending(vec!["only".into()]).is_err());
        assert!(ClassPriority::new(vec!["a".into(), "b".into()], vec![0, 0]).is_err());
        assert!(ClassPriority::new(vec!["a".into(), "b".into()], vec![0, 2]).is_err());
        let p = ClassPriority::new(vec!["a".into(), "b".into(), "c".into()], vec![1, 2, 0]).unwrap();
        assert_eq!(p.lowest(), 2);
    }

    #[test]
    fn dataset_rejects_inconsistent_oracle() {
        let bag = Bag::new("x", 2, 1, vec![0.0, 1.0], 0, Some(vec![0, 1])).unwrap();
        assert!(matches!(
            Dataset::new(vec![bag], binary(), BTreeMap::new()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dataset_rejects_duplicate_ids_and_bad_labels() {
        let a = Bag::new("x", 1, 1, vec![0.0], 0, None).unwrap();
        assert!(Dataset::new(vec![a.clone(), a.clone()], binary(), BTreeMap::new()).is_err());
        let bad = Bag::new("y", 1, 1, vec![0.0], 5, None).unwrap();
        assert!(Dataset::new(vec![bad], binary(), BTreeMap::new()).is_err());
    }
}
