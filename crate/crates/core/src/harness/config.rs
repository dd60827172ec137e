//! Experiment configuration files.
//!
//! One TOML file describes one experiment:
//!
//! ```toml
//! scenario = "pairwise"        # pairwise | sequence | train_on_all | few_sample(100)
//! n_seeds = 7
//!
//! [generator]                  # or: csv = ["s.csv", "t1.csv"]
//! n_datasets = 2
//!
//! [network]
//! hidden = [32]
//! activation = "relu"
//!
//! [strategy]
//! kind = "rawm"
//! eta = 0.5
//!
//! [[sweep]]
//! field = "eta"
//! values = [0.0, 0.25, 0.5, 0.75, 1.0]
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::netcore::{validate_specs, Activation, LayerSpec};
use crate::strategies::StrategyConfig;
use crate::taskgen::GeneratorConfig;

/// Order in which the datasets of a stream are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scenario {
    /// S, then each later dataset separately starting from the S model.
    #[default]
    Pairwise,
    /// Every dataset in order.
    Sequence,
    /// One joint run over the union of all training splits.
    TrainOnAll,
    /// Like `Sequence`, with every dataset after the first cut to `n` training rows.
    FewSample(usize),
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Pairwise => f.write_str("pairwise"),
            Scenario::Sequence => f.write_str("sequence"),
            Scenario::TrainOnAll => f.write_str("train_on_all"),
            Scenario::FewSample(n) => write!(f, "few_sample({n})"),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "pairwise" => return Ok(Scenario::Pairwise),
            "sequence" => return Ok(Scenario::Sequence),
            "train_on_all" => return Ok(Scenario::TrainOnAll),
            _ => {}
        }
        let n = s
            .strip_prefix("few_sample(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("few_sample:"))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scenario '{s}' (expected pairwise, sequence, train_on_all or few_sample(N))"
                ))
            })?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("few_sample needs a row count, got '{n}'")))?;
        if n == 0 {
            return Err(Error::Config("few_sample needs at least one row".into()));
        }
        Ok(Scenario::FewSample(n))
    }
}

impl Serialize for Scenario {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hidden layer widths and activation, or an explicit layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<LayerSpec>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![32],
            activation: Activation::Relu,
            layers: Vec::new(),
        }
    }
}

impl NetworkConfig {
    pub fn specs(&self, input_dim: usize, classes: usize) -> Result<Vec<LayerSpec>> {
        let specs = if self.layers.is_empty() {
            if self.activation == Activation::SoftmaxOutput {
                return Err(Error::Config("softmax_output is only valid on the last layer".into()));
            }
            let mut dims = vec![input_dim];
            dims.extend(&self.hidden);
            dims.push(classes);
            let last = dims.len() - 2;
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let act = if i == last { Activation::SoftmaxOutput } else { self.activation };
                    LayerSpec::new(w[0], w[1], act)
                })
                .collect()
        } else {
            self.layers.clone()
        };
        validate_specs(&specs).map_err(|e| Error::Config(e.to_string()))?;
        let (first, last) = (&specs[0], &specs[specs.len() - 1]);
        if first.input_dim != input_dim || last.output_dim != classes {
            return Err(Error::Config(format!(
                "network maps {} -> {} but the data has {input_dim} features and {classes} classes",
                first.input_dim, last.output_dim
            )));
        }
        Ok(specs)
    }
}

/// One swept strategy field and the values it takes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub field: String,
    pub values: Vec<toml::Value>,
}

fn default_n_seeds() -> usize {
    7
}

fn default_max_runs() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    /// Feature CSV files, one per dataset, in stream order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub csv: Vec<PathBuf>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub scenario: Scenario,
    /// Defaults to EER for two classes and accuracy otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepAxis>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    /// First seed; runs use `seed .. seed + n_seeds`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generator: None,
            csv: Vec::new(),
            network: NetworkConfig::default(),
            strategy: StrategyConfig::default(),
            scenario: Scenario::default(),
            metric: None,
            sweep: Vec::new(),
            n_seeds: default_n_seeds(),
            seed: 0,
            max_runs: default_max_runs(),
            output_dir: None,
        }
    }
}

/// A single (strategy, seed) unit of work after sweep expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub strategy: StrategyConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative CSV paths are resolved against the config file.
        if let Some(dir) = path.parent() {
            for p in &mut cfg.csv {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        self.generator.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator.is_some() && !self.csv.is_empty() {
            return Err(Error::Config("give either [generator] or csv paths, not both".into()));
        }
        if self.csv.is_empty() {
            let g = self.generator_config();
            g.validate()?;
            if g.stable_classes != self.strategy.stable_classes {
                return Err(Error::Config(format!(
                    "generator stable classes {:?} differ from strategy stable classes {:?}",
                    g.stable_classes, self.strategy.stable_classes
                )));
            }
        }
        let n_datasets = if self.csv.is_empty() {
            self.generator_config().n_datasets
        } else {
            self.csv.len()
        };
        if n_datasets < 2 && self.scenario != Scenario::TrainOnAll {
            return Err(Error::Config(format!("scenario {} needs at least two datasets", self.scenario)));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        self.strategy.validate()?;
        let mut seen = BTreeSet::new();
        for axis in &self.sweep {
            if !StrategyConfig::has_field(&axis.field) {
                return Err(Error::Config(format!("sweep field '{}' is not a strategy field", axis.field)));
            }
            if !seen.insert(axis.field.as_str()) {
                return Err(Error::Config(format!("sweep field '{}' listed twice", axis.field)));
            }
            if axis.values.is_empty() {
                return Err(Error::Config(format!("sweep field '{}' has no values", axis.field)));
            }
        }
        let points: usize = self.sweep.iter().map(|a| a.values.len()).product();
        let runs = points.saturating_mul(self.n_seeds);
        if runs > self.max_runs {
            return Err(Error::Config(format!(
                "experiment expands to {runs} runs, above max_runs = {}",
                self.max_runs
            )));
        }
        self.sweep_points()?;
        Ok(())
    }

    /// Strategy variants with their row labels, in sweep order (last axis fastest).
    pub fn sweep_points(&self) -> Result<Vec<(String, StrategyConfig)>> {
        let mut points = vec![(Vec::<String>::new(), self.strategy.clone())];
        for axis in &self.sweep {
            let mut next = Vec::with_capacity(points.len() * axis.values.len());
            for (parts, base) in &points {
                for v in &axis.values {
                    let cfg = base.with_field(&axis.field, v.clone())?;
                    let mut parts = parts.clone();
                    if axis.field != "kind" {
                        parts.push(format!("{}={}", axis.field, value_text(v)));
                    }
                    next.push((parts, cfg));
                }
            }
            points = next;
        }
        Ok(points
            .into_iter()
            .map(|(parts, cfg)| {
                let mut label = cfg.kind.to_string();
                for p in parts {
                    label.push(' ');
                    label.push_str(&p);
                }
                (label, cfg)
            })
            .collect())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Every run of the experiment, sweep points outermost.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let mut out = Vec::new();
        for (label, strategy) in self.sweep_points()? {
            for seed in self.seeds() {
                out.push(RunSpec {
                    label: label.clone(),
                    strategy: strategy.clone(),
                    seed,
                });
            }
        }
        Ok(out)
    }

    /// Hex SHA-256 over everything that determines a run's results apart from the seed.
    pub fn config_hash(&self, strategy: &StrategyConfig) -> Result<String> {
        let key = serde_json::json!({
            "generator": self.generator,
            "csv": self.csv,
            "network": self.network,
            "strategy": strategy,
            "scenario": self.scenario,
            "metric": self.metric,
        });
        let digest = Sha256::digest(serde_json::to_vec(&key)?);
        Ok(hex::encode(digest))
    }
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategies::StrategyKind;

    #[test]
    fn scenario_parsing() {
        for s in ["pairwise", "sequence", "train_on_all", "few_sample(100)"] {
            assert_eq!(s.parse::<Scenario>().unwrap().to_string(), s);
        }
        assert_eq!("few_sample:7".parse::<Scenario>().unwrap(), Scenario::FewSample(7));
        assert!("few_sample(0)".parse::<Scenario>().is_err());
        assert!("bogus".parse::<Scenario>().is_err());
    }

    #[test]
    fn default_network_specs() {
        let specs = NetworkConfig::default().specs(20, 2).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[1].activation, Activation::SoftmaxOutput);
        let linear = NetworkConfig {
            hidden: vec![],
            ..NetworkConfig::default()
        };
        assert_eq!(linear.specs(5, 3).unwrap(), vec![LayerSpec::new(5, 3, Activation::SoftmaxOutput)]);
    }

    #[test]
    fn parses_minimal_and_full_files() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.n_seeds, 7);
        assert_eq!(cfg.scenario, Scenario::Pairwise);

        let text = r#"
            scenario = "few_sample(100)"
            n_seeds = 2
            [generator]
            n_datasets = 2
            [strategy]
            kind = "owm"
            [[sweep]]
            field = "eta"
            values = [0.0, 0.5]
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.strategy.kind, StrategyKind::Owm);
        let runs = cfg.runs().unwrap();
        assert_eq!(runs.len(), 4);
        assert_eq!(runs[0].label, "owm eta=0.0");
        assert_eq!(runs[3].strategy.eta, 0.5);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            "unknown_key = 1",
            "[strategy]\neta = 2.0",
            "[[sweep]]\nfield = \"nope\"\nvalues = [1]",
            "csv = [\"a.csv\", \"b.csv\"]\n[generator]\ndim = 3",
            "n_seeds = 65",
            "[[sweep]]\nfield = \"eta\"\nvalues = [0.0, 0.5, 1.0]\n[[sweep]]\nfield = \"m\"\nvalues = [0.0, 0.1, 0.2, 0.3]",
            "[generator]\nn_datasets = 1",
        ];
        for text in cases {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(err.is_config_error(), "{text}: {err}");
        }
        match ExperimentConfig::from_toml("n_seeds = 3\nn_seeds = \"x\"") {
            Err(Error::Parse { line, .. }) => assert!(line >= 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kind_sweep_labels() {
        let text = "[[sweep]]\nfield = \"kind\"\nvalues = [\"finetune\", \"owm\", \"rawm\"]";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let labels: Vec<String> = cfg.sweep_points().unwrap().into_iter().map(|(l, _)| l).collect();
        assert_eq!(labels, ["finetune", "owm", "rawm"]);
    }

    #[test]
    fn hash_tracks_strategy() {
        let cfg = ExperimentConfig::default();
        let a = cfg.config_hash(&cfg.strategy).unwrap();
        assert_eq!(a, cfg.config_hash(&cfg.strategy).unwrap());
        assert_eq!(a.len(), 64);
        let mut other = cfg.strategy.clone();
        other.eta = 0.25;
        assert_ne!(a, cfg.config_hash(&other).unwrap());
    }
}
