//! Datasets, CSV ingestion and privacy-group assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{PrivacyGroup, PrivacySpec};
use crate::rng::{Stream, StreamRng};
use crate::{Error, GroupId, Result};

/// Group every point belongs to before any assignment.
pub const DEFAULT_GROUP: &str = "default";

/// Per-column mean and standard deviation removed at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    group_of: Vec<GroupId>,
    standardization: Option<Standardization>,
}

impl Dataset {
    /// Row-major `features` of `labels.len()` rows. All points start in
    /// [`DEFAULT_GROUP`].
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("feature dimension must be at least 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Validation(format!(
                "{} feature values do not form {} rows of {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature in row {}", i / dim)));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Validation(format!("label {l} outside [0, {num_classes})")));
        }
        let n = labels.len();
        Ok(Dataset {
            features,
            dim,
            labels,
            num_classes,
            group_of: vec![GroupId::new(DEFAULT_GROUP); n],
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn group_of(&self) -> &[GroupId] {
        &self.group_of
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn with_groups(mut self, group_of: Vec<GroupId>) -> Result<Self> {
        if group_of.len() != self.len() {
            return Err(Error::Validation(format!(
                "{} group ids for {} points",
                group_of.len(),
                self.len()
            )));
        }
        self.group_of = group_of;
        Ok(self)
    }

    pub fn group_sizes(&self) -> BTreeMap<GroupId, u64> {
        let mut sizes = BTreeMap::new();
        for g in &self.group_of {
            *sizes.entry(g.clone()).or_insert(0) += 1;
        }
        sizes
    }

    /// Builds the privacy spec for the current assignment. Every assigned
    /// group needs a budget and every budgeted group needs points.
    pub fn privacy_spec(&self, budgets: &[(GroupId, f64)], delta: f64) -> Result<PrivacySpec> {
        let sizes = self.group_sizes();
        let budgeted: BTreeSet<&GroupId> = budgets.iter().map(|(g, _)| g).collect();
        if let Some(g) = sizes.keys().find(|g| !budgeted.contains(g)) {
            return Err(Error::Validation(format!("group `{g}` has points but no budget")));
        }
        let groups = budgets
            .iter()
            .map(|(id, eps)| {
                let size = sizes.get(id).copied().unwrap_or(0);
                if size == 0 {
                    return Err(Error::Validation(format!("group `{id}` has no points")));
                }
                Ok(PrivacyGroup::new(id.clone(), size, *eps))
            })
            .collect::<Result<Vec<_>>>()?;
        PrivacySpec::new(groups, delta)
    }

    /// Standardizes every column to zero mean and unit variance (columns
    /// with zero variance are only centered).
    pub fn standardize(mut self, column_names: Vec<String>) -> Self {
        let n = self.len().max(1) as f64;
        let d = self.dim;
        let mut means = vec![0.0; d];
        for i in 0..self.len() {
            for (m, v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut stds = vec![0.0; d];
        for i in 0..self.len() {
            for ((s, v), m) in stds.iter_mut().zip(self.row(i)).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in stds.iter_mut() {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        for (j, v) in self.features.iter_mut().enumerate() {
            let c = j % d;
            *v = (*v - means[c]) / stds[c];
        }
        self.standardization = Some(Standardization {
            columns: column_names,
            means,
            stds,
        });
        self
    }
}

/// Two isotropic unit-variance Gaussian clusters centred at ±(separation/2)·e₁,
/// labelled 0 and 1. Class 0 rows come first.
pub fn make_blobs(n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || dim == 0 {
        return Err(Error::Validation("make_blobs needs n_per_class >= 1 and dim >= 1".into()));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::Validation(format!("separation {separation} must be >= 0")));
    }
    let mut rng = StreamRng::new(seed, Stream::Data);
    let mut features = Vec::with_capacity(2 * n_per_class * dim);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for label in 0..2usize {
        let shift = if label == 0 { -0.5 } else { 0.5 } * separation;
        for _ in 0..n_per_class {
            for j in 0..dim {
                let z = rng.standard_normal();
                features.push(if j == 0 { z + shift } else { z });
            }
            labels.push(label);
        }
    }
    Dataset::new(features, dim, labels, 2)
}

/// Column selection for [`load_csv`].
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub label_column: String,
    pub group_column: Option<String>,
    /// Defaults to every column other than the label and group columns.
    pub feature_columns: Option<Vec<String>>,
    /// When set, group ids outside this list are rejected.
    pub known_groups: Option<Vec<GroupId>>,
    /// Number of classes; defaults to `max label + 1` (at least 2).
    pub num_classes: Option<usize>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    load_csv_from(file, schema)
}

/// Parses a CSV with a header row and standardizes the feature columns.
pub fn load_csv_from<R: Read>(input: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_owned())
        .collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let label_idx = find(&schema.label_column)?;
    let group_idx = schema.group_column.as_deref().map(find).transpose()?;
    let feature_names: Vec<String> = match &schema.feature_columns {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label_idx && Some(*i) != group_idx)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if feature_names.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    let feature_idx = feature_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;
    let known: Option<BTreeSet<&GroupId>> = schema.known_groups.as_ref().map(|g| g.iter().collect());

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for &j in &feature_idx {
            let raw = record[j].trim();
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: `{raw}` is not a number", headers[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column `{}` is not finite", headers[j]),
                });
            }
            features.push(v);
        }
        let raw = record[label_idx].trim();
        let label: usize = raw.parse().map_err(|_| Error::Parse {
            line,
            message: format!("label `{raw}` is not a non-negative integer"),
        })?;
        labels.push(label);
        match group_idx {
            Some(g) => {
                let id = GroupId::new(record[g].trim());
                if let Some(known) = &known {
                    if !known.contains(&id) {
                        return Err(Error::Validation(format!(
                            "line {line}: unknown group id `{id}`"
                        )));
                    }
                }
                groups.push(id);
            }
            None => groups.push(GroupId::new(DEFAULT_GROUP)),
        }
    }
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    let dim = feature_idx.len();
    Dataset::new(features, dim, labels, num_classes)?
        .with_groups(groups)
        .map(|d| d.standardize(feature_names))
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssignmentStrategy {
    /// `⌊proportion · N⌋` points per group via a seeded shuffle; the rounding
    /// remainder goes to the group with the largest proportion.
    RandomProportions(Vec<(GroupId, f64)>),
    /// Every label maps to one group.
    PerClass(BTreeMap<usize, GroupId>),
}

pub fn assign_groups(dataset: Dataset, strategy: &AssignmentStrategy, seed: u64) -> Result<Dataset> {
    let n = dataset.len();
    match strategy {
        AssignmentStrategy::RandomProportions(props) => {
            if props.is_empty() {
                return Err(Error::Validation("no group proportions given".into()));
            }
            let total: f64 = props.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-9 || props.iter().any(|(_, p)| !(*p >= 0.0)) {
                return Err(Error::Validation(format!(
                    "group proportions must be non-negative and sum to 1, got {total}"
                )));
            }
            let mut counts: Vec<usize> = props
                .iter()
                .map(|(_, p)| (p * n as f64 + 1e-9).floor() as usize)
                .collect();
            let assigned: usize = counts.iter().sum();
            let largest = props
                .iter()
                .enumerate()
                .fold(0, |best, (i, (_, p))| if *p > props[best].1 { i } else { best });
            counts[largest] += n - assigned;

            let mut order: Vec<usize> = (0..n).collect();
            StreamRng::new(seed, Stream::Shuffle).shuffle(&mut order);
            let mut group_of = vec![GroupId::new(DEFAULT_GROUP); n];
            let mut cursor = 0;
            for ((id, _), count) in props.iter().zip(&counts) {
                for &idx in &order[cursor..cursor + count] {
                    group_of[idx] = id.clone();
                }
                cursor += count;
            }
            dataset.with_groups(group_of)
        }
        AssignmentStrategy::PerClass(map) => {
            let group_of = dataset
                .labels()
                .iter()
                .map(|l| {
                    map.get(l)
                        .cloned()
                        .ok_or_else(|| Error::Validation(format!("label {l} has no group mapping")))
                })
                .collect::<Result<Vec<_>>>()?;
            dataset.with_groups(group_of)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_centred() {
        let a = make_blobs(500, 3, 4.0, 1).unwrap();
        let b = make_blobs(500, 3, 4.0, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_blobs(500, 3, 4.0, 2).unwrap());
        assert_eq!(a.len(), 1000);
        let mean0: f64 = (0..500).map(|i| a.row(i)[0]).sum::<f64>() / 500.0;
        let mean1: f64 = (500..1000).map(|i| a.row(i)[0]).sum::<f64>() / 500.0;
        assert!((mean0 + 2.0).abs() < 0.2 && (mean1 - 2.0).abs() < 0.2);
        assert!(make_blobs(0, 2, 1.0, 0).is_err());
        assert!(make_blobs(3, 2, -1.0, 0).is_err());
    }

    #[test]
    fn csv_basic() {
        let text = "a,b,label\n1,2,0\n3,4,1\n5,6,1\n";
        let schema = CsvSchema {
            label_column: "label".into(),
            ..Default::default()
        };
        let d = load_csv_from(text.as_bytes(), &schema).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert_eq!(d.labels(), &[0, 1, 1]);
        assert!(d.group_of().iter().all(|g| g.as_str() == DEFAULT_GROUP));
        // Standardized: column a = {1,3,5} -> mean 3, std sqrt(8/3).
        let s = (8.0f64 / 3.0).sqrt();
        assert!((d.row(0)[0] + 2.0 / s).abs() < 1e-12);
        let st = d.standardization().unwrap();
        assert_eq!(st.columns, vec!["a".to_string(), "b".to_string()]);
        assert!((st.means[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn csv_missing_label_column() {
        let schema = CsvSchema {
            label_column: "y".into(),
            ..Default::default()
        };
        assert!(matches!(
            load_csv_from("a,b\n1,2\n".as_bytes(), &schema),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn csv_groups_and_errors() {
        let schema = CsvSchema {
            label_column: "label".into(),
            group_column: Some("grp".into()),
            known_groups: Some(vec![GroupId::new("strict"), GroupId::new("loose")]),
            ..Default::default()
        };
        let ok = "x,label,grp\n0.5,0,strict\n1.5,1,loose\n2.5,1,loose\n";
        let d = load_csv_from(ok.as_bytes(), &schema).unwrap();
        assert_eq!(d.dim(), 1);
        let sizes = d.group_sizes();
        assert_eq!(sizes[&GroupId::new("loose")], 2);
        assert_eq!(sizes[&GroupId::new("strict")], 1);

        let unknown = "x,label,grp\n0.5,0,strict\n1.5,1,other\n";
        assert!(matches!(load_csv_from(unknown.as_bytes(), &schema), Err(Error::Validation(_))));

        let malformed = "x,label,grp\n0.5,0,strict\nabc,1,loose\n";
        match load_csv_from(malformed.as_bytes(), &schema) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let short = "x,label,grp\n0.5,0\n";
        assert!(matches!(
            load_csv_from(short.as_bytes(), &schema),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    fn props(v: &[(&str, f64)]) -> AssignmentStrategy {
        AssignmentStrategy::RandomProportions(v.iter().map(|(g, p)| (GroupId::new(*g), *p)).collect())
    }

    #[test]
    fn random_proportions_sizes() {
        let d = make_blobs(5000, 2, 1.0, 0).unwrap();
        let d = assign_groups(d, &props(&[("e1", 0.34), ("e2", 0.43), ("e3", 0.23)]), 3).unwrap();
        let sizes = d.group_sizes();
        assert_eq!(sizes[&GroupId::new("e1")], 3400);
        assert_eq!(sizes[&GroupId::new("e2")], 4300);
        assert_eq!(sizes[&GroupId::new("e3")], 2300);
    }

    #[test]
    fn remainder_goes_to_largest_group() {
        let d = make_blobs(5, 1, 1.0, 0).unwrap();
        let d = assign_groups(d, &props(&[("a", 0.3), ("b", 0.7)]), 0).unwrap();
        let sizes = d.group_sizes();
        assert_eq!(sizes[&GroupId::new("a")], 3);
        assert_eq!(sizes[&GroupId::new("b")], 7);
    }

    #[test]
    fn single_group_and_validation() {
        let d = make_blobs(10, 1, 1.0, 0).unwrap();
        let all = assign_groups(d.clone(), &props(&[("only", 1.0)]), 0).unwrap();
        assert!(all.group_of().iter().all(|g| g.as_str() == "only"));
        assert!(assign_groups(d, &props(&[("a", 0.5), ("b", 0.4)]), 0).is_err());
    }

    #[test]
    fn per_class_mapping() {
        let d = make_blobs(10, 1, 1.0, 0).unwrap();
        let mut map = BTreeMap::new();
        map.insert(0, GroupId::new("eps3"));
        map.insert(1, GroupId::new("eps2"));
        let out = assign_groups(d.clone(), &AssignmentStrategy::PerClass(map.clone()), 0).unwrap();
        for i in 0..out.len() {
            let want = if out.label(i) == 0 { "eps3" } else { "eps2" };
            assert_eq!(out.group_of()[i].as_str(), want);
        }
        map.remove(&1);
        assert!(assign_groups(d, &AssignmentStrategy::PerClass(map), 0).is_err());
    }

    #[test]
    fn privacy_spec_from_assignment() {
        let d = make_blobs(50, 1, 1.0, 0).unwrap();
        let d = assign_groups(d, &props(&[("a", 0.6), ("b", 0.4)]), 1).unwrap();
        let spec = d
            .privacy_spec(&[(GroupId::new("a"), 1.0), (GroupId::new("b"), 2.0)], 1e-5)
            .unwrap();
        assert_eq!(spec.total_points(), 100);
        assert_eq!(spec.groups()[0].size, 60);
        assert!(d.privacy_spec(&[(GroupId::new("a"), 1.0)], 1e-5).is_err());
    }
}
