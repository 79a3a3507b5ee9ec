//! Run configuration: a TOML file of dotted keys (`train.steps = 500`,
//! `privacy.delta = 1e-5`, ...). See `docs/config.md` for the full schema.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::calibration::{CalibrationOptions, Method, PrivacySpec};
use crate::data::{assign_groups, load_csv, make_blobs, AssignmentStrategy, CsvSchema, Dataset};
use crate::engine::{Divisor, TrainConfig};
use crate::model::{Architecture, DEFAULT_HIDDEN};
use crate::{Error, GroupId, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub privacy: PrivacyConfig,
    pub method: MethodConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Blobs,
    Csv,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub seed: u64,
    pub n_per_class: Option<usize>,
    pub dim: Option<usize>,
    pub separation: Option<f64>,
    pub test_per_class: Option<usize>,
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub label_column: Option<String>,
    pub group_column: Option<String>,
    pub feature_columns: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentKind {
    #[default]
    Random,
    PerClass,
    Column,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub id: String,
    pub epsilon: f64,
    pub proportion: Option<f64>,
    pub size: Option<u64>,
}

fn default_precision() -> f64 {
    0.01
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub delta: f64,
    #[serde(default)]
    pub assignment: AssignmentKind,
    #[serde(default = "default_precision")]
    pub precision: f64,
    pub groups: Vec<GroupConfig>,
    /// Label (as a string key) to group id, for `assignment = "per-class"`.
    pub class_map: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: Method,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    #[default]
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivideBy {
    #[default]
    Realized,
    Expected,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

fn default_stride() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: u64,
    pub steps: u64,
    pub clip: f64,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelName,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_stride")]
    pub checkpoint_stride: u64,
    #[serde(default)]
    pub divide_by: DivideBy,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

/// Everything a command needs, validated and materialized.
pub struct ResolvedRun {
    pub dataset: Dataset,
    pub test: Option<Dataset>,
    pub spec: PrivacySpec,
    pub train: TrainConfig,
    pub architecture: Architecture,
    pub method: Method,
    pub weight: f64,
    pub options: CalibrationOptions,
}

impl ResolvedRun {
    pub fn base_rate(&self) -> f64 {
        self.train.base_rate(self.dataset.len())
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies an `IDP_SEED`-style override of `train.seed`.
    pub fn with_seed_override(mut self, seed: Option<&str>) -> Result<Self> {
        if let Some(raw) = seed {
            self.train.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("IDP_SEED `{raw}` is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn budgets(&self) -> Vec<(GroupId, f64)> {
        self.privacy
            .groups
            .iter()
            .map(|g| (GroupId::new(g.id.clone()), g.epsilon))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.privacy.groups.is_empty() {
            return bad("privacy.groups is empty".into());
        }
        if !(self.privacy.precision > 0.0) {
            return bad("privacy.precision must be positive".into());
        }
        if self.method.name == Method::Combined {
            match self.method.weight {
                Some(w) if (0.0..=1.0).contains(&w) => {}
                Some(w) => return bad(format!("method.weight {w} outside [0, 1]")),
                None => return bad("method.weight is required for the combined method".into()),
            }
        }
        match self.data.source {
            DataSource::Blobs => {
                if self.data.n_per_class.is_none() {
                    return bad("data.n_per_class is required for blobs".into());
                }
            }
            DataSource::Csv => {
                if self.data.path.is_none() || self.data.label_column.is_none() {
                    return bad("data.path and data.label_column are required for csv".into());
                }
            }
        }
        match self.privacy.assignment {
            AssignmentKind::Random => {
                let all_props = self.privacy.groups.iter().all(|g| g.proportion.is_some());
                let all_sizes = self.privacy.groups.iter().all(|g| g.size.is_some());
                if !all_props && !all_sizes {
                    return bad("random assignment needs a proportion (or a size) for every group".into());
                }
            }
            AssignmentKind::PerClass => {
                if self.privacy.class_map.is_none() {
                    return bad("per-class assignment needs privacy.class_map".into());
                }
            }
            AssignmentKind::Column => {
                if self.data.source != DataSource::Csv || self.data.group_column.is_none() {
                    return bad("column assignment needs a csv source with data.group_column".into());
                }
            }
        }
        Ok(())
    }

    fn load_datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        let d = &self.data;
        match d.source {
            DataSource::Blobs => {
                let n = d.n_per_class.expect("validated");
                let dim = d.dim.unwrap_or(2);
                let sep = d.separation.unwrap_or(2.0);
                let train = make_blobs(n, dim, sep, d.seed)?;
                let test = d
                    .test_per_class
                    .map(|m| make_blobs(m, dim, sep, d.seed.wrapping_add(1)))
                    .transpose()?;
                Ok((train, test))
            }
            DataSource::Csv => {
                let known = match self.privacy.assignment {
                    AssignmentKind::Column => Some(self.budgets().into_iter().map(|(g, _)| g).collect()),
                    _ => None,
                };
                let schema = CsvSchema {
                    label_column: d.label_column.clone().expect("validated"),
                    group_column: match self.privacy.assignment {
                        AssignmentKind::Column => d.group_column.clone(),
                        _ => None,
                    },
                    feature_columns: d.feature_columns.clone(),
                    known_groups: known,
                    num_classes: None,
                };
                let train = load_csv(d.path.as_ref().expect("validated"), &schema)?;
                let test = match &d.test_path {
                    Some(p) => {
                        let schema = CsvSchema {
                            group_column: None,
                            known_groups: None,
                            num_classes: Some(train.num_classes()),
                            ..schema
                        };
                        Some(load_csv(p, &schema)?)
                    }
                    None => None,
                };
                Ok((train, test))
            }
        }
    }

    fn strategy(&self, n: usize) -> Result<Option<AssignmentStrategy>> {
        let p = &self.privacy;
        Ok(match p.assignment {
            AssignmentKind::Column => None,
            AssignmentKind::Random => {
                let props = if p.groups.iter().all(|g| g.proportion.is_some()) {
                    p.groups
                        .iter()
                        .map(|g| (GroupId::new(g.id.clone()), g.proportion.expect("checked")))
                        .collect()
                } else {
                    let total: u64 = p.groups.iter().map(|g| g.size.expect("validated")).sum();
                    if total as usize != n {
                        return Err(Error::Config(format!(
                            "group sizes sum to {total}, dataset has {n} points"
                        )));
                    }
                    p.groups
                        .iter()
                        .map(|g| (GroupId::new(g.id.clone()), g.size.expect("validated") as f64 / n as f64))
                        .collect()
                };
                Some(AssignmentStrategy::RandomProportions(props))
            }
            AssignmentKind::PerClass => {
                let mut map = BTreeMap::new();
                for (label, group) in p.class_map.as_ref().expect("validated") {
                    let label: usize = label
                        .parse()
                        .map_err(|_| Error::Config(format!("class_map key `{label}` is not a label")))?;
                    map.insert(label, GroupId::new(group.clone()));
                }
                Some(AssignmentStrategy::PerClass(map))
            }
        })
    }

    /// Loads data, assigns groups and derives the privacy spec.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let (dataset, test) = self.load_datasets()?;
        let dataset = match self.strategy(dataset.len())? {
            Some(s) => assign_groups(dataset, &s, self.train.seed)?,
            None => dataset,
        };
        let spec = dataset.privacy_spec(&self.budgets(), self.privacy.delta)?;
        let t = &self.train;
        let train = TrainConfig {
            learning_rate: t.learning_rate,
            expected_batch: t.batch_size,
            steps: t.steps,
            base_clip: t.clip,
            seed: t.seed,
            checkpoint_stride: t.checkpoint_stride,
            divisor: match t.divide_by {
                DivideBy::Realized => Divisor::Realized,
                DivideBy::Expected => Divisor::Expected,
            },
        };
        train.validate(dataset.len())?;
        let classes = dataset.num_classes().max(test.as_ref().map_or(0, |d| d.num_classes()));
        let architecture = match t.model {
            ModelName::Logistic => Architecture::logistic(dataset.dim(), classes),
            ModelName::Mlp => Architecture::mlp(dataset.dim(), t.hidden, classes),
        };
        Ok(ResolvedRun {
            dataset,
            test,
            spec,
            train,
            architecture,
            method: self.method.name,
            weight: self.method.weight.unwrap_or(1.0),
            options: CalibrationOptions::with_precision(self.privacy.precision),
        })
    }
}
