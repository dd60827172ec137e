//! Sequential dataset streams.
//!
//! The synthetic generator draws every class from an isotropic Gaussian.
//! Stable classes keep (almost) the same mean in every dataset and have a
//! tighter spread; volatile classes move to a new location per dataset.
//! Real precomputed features can be loaded from CSV instead.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Matrix;
use crate::projector::validate_stable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Input(format!("unknown split '{other}'"))),
        }
    }
}

/// Labelled feature rows, each tagged with the split it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    features: Matrix,
    labels: Vec<usize>,
    splits: Vec<Split>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        splits: Vec<Split>,
        classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || splits.len() != n {
            return Err(Error::Input(format!(
                "{n} feature rows but {} labels and {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
        }
        let ds = Dataset {
            name: name.into(),
            features,
            labels,
            splits,
            classes,
        };
        let train: BTreeSet<usize> = ds.indices(Split::Train).iter().map(|&i| ds.labels[i]).collect();
        if let Some(missing) = (0..classes).find(|c| !train.contains(c)) {
            return Err(Error::Input(format!(
                "dataset '{}': class {missing} absent from the training split",
                ds.name
            )));
        }
        Ok(ds)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Feature rows and labels of one split, in dataset order.
    pub fn split_data(&self, split: Split) -> (Matrix, Vec<usize>) {
        let idx = self.indices(split);
        (
            self.features.select_rows(&idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Same rows declared over a larger label space.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if classes < self.classes {
            return Err(Error::Input(format!(
                "cannot shrink class count from {} to {classes}",
                self.classes
            )));
        }
        self.classes = classes;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
}

impl SplitSizes {
    fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Eval => self.eval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_datasets: usize,
    pub dim: usize,
    pub classes: usize,
    pub stable_classes: BTreeSet<usize>,
    /// Examples per class in each split.
    pub per_class: SplitSizes,
    /// Distance of each class mean from the origin in the first dataset.
    pub mean_scale: f64,
    /// Norm of the random offset applied to stable-class means per dataset.
    pub stable_jitter: f64,
    /// Norm of the displacement of volatile-class means per dataset.
    pub volatile_shift: f64,
    /// Stable classes also move, by half the volatile shift.
    pub wild_mode: bool,
    /// Per-class standard deviation. Empty means 0.5 for stable and 1.0 for volatile classes.
    pub class_spread: Vec<f64>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_datasets: 4,
            dim: 20,
            classes: 2,
            stable_classes: BTreeSet::from([0]),
            per_class: SplitSizes {
                train: 500,
                dev: 100,
                eval: 200,
            },
            mean_scale: 1.0,
            stable_jitter: 0.1,
            volatile_shift: 6.0,
            wild_mode: false,
            class_spread: Vec::new(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Four-class emotion-style stream with class 0 as the stable class.
    pub fn ser_preset() -> Self {
        GeneratorConfig {
            classes: 4,
            stable_classes: BTreeSet::from([0]),
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_datasets == 0 || self.dim == 0 || self.classes < 2 {
            return Err(Error::Config(
                "generator needs at least one dataset, one dimension and two classes".into(),
            ));
        }
        if self.per_class.train == 0 || self.per_class.eval == 0 {
            return Err(Error::Config("generator needs training and evaluation examples".into()));
        }
        validate_stable(&self.stable_classes, self.classes)?;
        if !self.class_spread.is_empty() && self.class_spread.len() != self.classes {
            return Err(Error::Config(format!(
                "class_spread has {} entries for {} classes",
                self.class_spread.len(),
                self.classes
            )));
        }
        let nonneg = [self.mean_scale, self.stable_jitter]
            .iter()
            .chain(&self.class_spread)
            .all(|v| *v >= 0.0 && v.is_finite());
        if !nonneg || !(self.volatile_shift > 0.0 && self.volatile_shift.is_finite()) {
            return Err(Error::Config(
                "scales must be finite, spreads/jitter non-negative and volatile_shift positive".into(),
            ));
        }
        Ok(())
    }

    pub fn spread(&self, class: usize) -> f64 {
        match self.class_spread.get(class) {
            Some(s) => *s,
            None if self.stable_classes.contains(&class) => 0.5,
            None => 1.0,
        }
    }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn axpy(base: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + scale * d).collect()
}

/// Per-dataset class means, `means[j][c]`.
pub fn class_means(config: &GeneratorConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    means_with_rng(config, &mut rng)
}

fn means_with_rng(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Vec<f64>>>> {
    let dim = config.dim;
    let base: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            let u = unit_vector(dim, rng);
            u.iter().map(|x| x * config.mean_scale).collect()
        })
        .collect();
    let mut all = vec![base.clone()];
    for _ in 1..config.n_datasets {
        let means = (0..config.classes)
            .map(|c| {
                if config.stable_classes.contains(&c) {
                    let jitter = unit_vector(dim, rng);
                    let mut m = axpy(&base[c], config.stable_jitter, &jitter);
                    if config.wild_mode {
                        let dir = unit_vector(dim, rng);
                        m = axpy(&m, config.volatile_shift / 2.0, &dir);
                    }
                    m
                } else {
                    let dir = unit_vector(dim, rng);
                    axpy(&base[c], config.volatile_shift, &dir)
                }
            })
            .collect();
        all.push(means);
    }
    Ok(all)
}

/// Draws the whole stream; datasets are named `S`, `T1`, `T2`, ...
pub fn generate_stream(config: &GeneratorConfig) -> Result<Vec<Dataset>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let means = means_with_rng(config, &mut rng)?;
    means
        .iter()
        .enumerate()
        .map(|(j, class_means)| {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            let mut splits = Vec::new();
            for split in Split::ALL {
                for (c, mu) in class_means.iter().enumerate() {
                    let sd = config.spread(c);
                    for _ in 0..config.per_class.get(split) {
                        data.extend(mu.iter().map(|m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + sd * z
                        }));
                        labels.push(c);
                        splits.push(split);
                    }
                }
            }
            let features = Matrix::new(labels.len(), config.dim, data)?;
            let name = if j == 0 { "S".to_string() } else { format!("T{j}") };
            Dataset::new(name, features, labels, splits, config.classes)
        })
        .collect()
}

fn header(dim: usize) -> Vec<String> {
    (0..dim)
        .map(|i| format!("feature_{i}"))
        .chain(["label".to_string(), "split".to_string()])
        .collect()
}

/// Reads `feature_0,...,feature_{d-1},label,split` rows; `#` starts a comment line.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_csv(&text, &name)
}

pub fn parse_csv(text: &str, name: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let head = reader
        .headers()
        .map_err(|e| Error::Format(format!("cannot read header: {e}")))?
        .clone();
    if head.len() < 3 {
        return Err(Error::Format(format!(
            "header needs at least one feature column plus label and split, got {} columns",
            head.len()
        )));
    }
    let dim = head.len() - 2;
    for (i, (got, want)) in head.iter().zip(header(dim)).enumerate() {
        if got.trim() != want {
            return Err(Error::Format(format!(
                "header column {i} is '{got}', expected '{want}'"
            )));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 2 {
            return Err(Error::Format(format!(
                "line {line}: expected {} fields, found {}",
                dim + 2,
                record.len()
            )));
        }
        for (j, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature_{j} value '{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("feature_{j} is not finite"),
                });
            }
            data.push(v);
        }
        let label: usize = record[dim].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("label '{}' is not a class index", &record[dim]),
        })?;
        let split: Split = record[dim + 1].parse().map_err(|e: Error| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        labels.push(label);
        splits.push(split);
    }
    if labels.is_empty() {
        return Err(Error::Format("CSV has no data rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Matrix::new(labels.len(), dim, data)?;
    Dataset::new(name, features, labels, splits, classes)
}

pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(format!("CSV write failed: {e}"));
    w.write_record(header(dataset.dim())).map_err(csv_err)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(dataset.labels[i].to_string());
        rec.push(dataset.splits[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(format!("CSV flush failed: {e}")))?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

/// Keeps `n` training rows, drawn without replacement and stratified by class
/// (largest-remainder allocation, at least one row per class). Dev and eval
/// rows are untouched.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let train = dataset.indices(Split::Train);
    if n > train.len() {
        return Err(Error::Input(format!(
            "cannot keep {n} training rows, only {} available",
            train.len()
        )));
    }
    if n < dataset.classes {
        return Err(Error::Input(format!(
            "{n} rows cannot cover {} classes",
            dataset.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for &i in &train {
        by_class[dataset.labels[i]].push(i);
    }
    for rows in &mut by_class {
        rows.shuffle(&mut rng);
    }
    let quotas = allocate(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), n);
    let mut chosen: Vec<usize> = by_class
        .iter()
        .zip(&quotas)
        .flat_map(|(rows, &q)| rows[..q].iter().copied())
        .collect();
    chosen.shuffle(&mut rng);

    let mut rows: Vec<usize> = chosen;
    rows.extend((0..dataset.len()).filter(|&i| dataset.splits[i] != Split::Train));
    let features = dataset.features.select_rows(&rows);
    let labels = rows.iter().map(|&i| dataset.labels[i]).collect();
    let splits = rows.iter().map(|&i| dataset.splits[i]).collect();
    Dataset::new(dataset.name.clone(), features, labels, splits, dataset.classes)
}

/// Largest-remainder apportionment of `n` across classes of the given sizes,
/// with every non-empty class receiving at least one slot.
fn allocate(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * n as f64 / total as f64).collect();
    let mut quota: Vec<usize> = exact
        .iter()
        .zip(sizes)
        .map(|(e, &s)| (e.floor() as usize).max(usize::from(s > 0)).min(s))
        .collect();
    let mut assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - quota[a] as f64;
        let rb = exact[b] - quota[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    while assigned < n {
        let mut progressed = false;
        for &c in &order {
            if assigned < n && quota[c] < sizes[c] {
                quota[c] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    while assigned > n {
        // Only reachable when the one-per-class floor overshoots; trim the largest.
        let c = (0..sizes.len()).max_by_key(|&c| (quota[c], usize::MAX - c)).unwrap();
        quota[c] -= 1;
        assigned -= 1;
    }
    quota
}
