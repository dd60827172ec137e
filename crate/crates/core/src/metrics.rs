//! Equal error rate, accuracy and stage-by-dataset reports.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{argmax_rows, forward, Network};
use crate::taskgen::{Dataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Eer,
    Accuracy,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Eer => "eer",
            MetricKind::Accuracy => "accuracy",
        }
    }

    /// Whether a larger value is better.
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Accuracy)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "eer" => Ok(MetricKind::Eer),
            "accuracy" | "acc" => Ok(MetricKind::Accuracy),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

/// One operating point of the threshold sweep: accept as target when
/// `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct OperatingPoint {
    far: f64,
    frr: f64,
}

/// Error rates for every cut of the sorted scores, from "accept all" (lowest
/// threshold) to "accept none".
fn sweep(scores: &[f64], is_target: &[bool]) -> Result<Vec<OperatingPoint>> {
    if scores.len() != is_target.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            is_target.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!("non-finite score {s}")));
    }
    let targets = is_target.iter().filter(|t| **t).count();
    let nontargets = is_target.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(Error::Input("EER needs both target and non-target trials".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let (nt, nn) = (targets as f64, nontargets as f64);
    let mut rejected_targets = 0usize;
    let mut rejected_nontargets = 0usize;
    let mut points = Vec::with_capacity(scores.len() + 1);
    let mut i = 0;
    while i <= order.len() {
        points.push(OperatingPoint {
            far: (nontargets - rejected_nontargets) as f64 / nn,
            frr: rejected_targets as f64 / nt,
        });
        if i == order.len() {
            break;
        }
        // Move past every trial sharing this score.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_target[order[i]] {
                rejected_targets += 1;
            } else {
                rejected_nontargets += 1;
            }
            i += 1;
        }
        if i == order.len() {
            points.push(OperatingPoint {
                far: 0.0,
                frr: 1.0,
            });
            break;
        }
    }
    Ok(points)
}

/// Equal error rate at the threshold minimizing `|FAR - FRR|`, reported as
/// `(FAR + FRR) / 2`. Higher scores mean "target"; ties in `|FAR - FRR|` go to
/// the lower threshold.
pub fn eer(scores: &[f64], is_target: &[bool]) -> Result<f64> {
    let points = sweep(scores, is_target)?;
    let mut best = points[0];
    for p in &points[1..] {
        if (p.far - p.frr).abs() < (best.far - best.frr).abs() {
            best = *p;
        }
    }
    Ok((best.far + best.frr) / 2.0)
}

/// EER from linear interpolation of the two operating points that bracket
/// `FAR = FRR`.
pub fn eer_interpolated(scores: &[f64], is_target: &[bool]) -> Result<f64> {
    let points = sweep(scores, is_target)?;
    for w in points.windows(2) {
        let d0 = w[0].far - w[0].frr;
        let d1 = w[1].far - w[1].frr;
        if d0 >= 0.0 && d1 <= 0.0 {
            if d0 == d1 {
                return Ok((w[0].far + w[0].frr) / 2.0);
            }
            let t = d0 / (d0 - d1);
            return Ok(w[0].far + t * (w[1].far - w[0].far));
        }
    }
    Err(Error::Numeric("error-rate curves never cross".into()))
}

/// Fraction of predictions equal to the label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Scores the evaluation split. EER treats class 0 as the target class and
/// uses its probability as the score; accuracy uses the argmax class.
pub fn evaluate(net: &Network, dataset: &Dataset, kind: MetricKind) -> Result<f64> {
    evaluate_split(net, dataset, Split::Eval, kind)
}

pub fn evaluate_split(net: &Network, dataset: &Dataset, split: Split, kind: MetricKind) -> Result<f64> {
    let (x, labels) = dataset.split_data(split);
    if labels.is_empty() {
        return Err(Error::Input(format!(
            "dataset '{}' has an empty {split} split",
            dataset.name()
        )));
    }
    let (probs, _) = forward(net, &x)?;
    match kind {
        MetricKind::Eer => {
            let scores: Vec<f64> = (0..probs.rows()).map(|i| probs[(i, 0)]).collect();
            let targets: Vec<bool> = labels.iter().map(|&y| y == 0).collect();
            eer(&scores, &targets)
        }
        MetricKind::Accuracy => accuracy(&argmax_rows(&probs), &labels),
    }
}

/// Metrics measured after one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Datasets trained during this stage.
    pub trained: Vec<usize>,
    /// One value per dataset; `None` marks a cell that was not evaluated.
    pub values: Vec<Option<f64>>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Row label used when aggregating reports (method and sweep point).
    pub label: String,
    pub scenario: String,
    pub metric: MetricKind,
    pub config_hash: String,
    pub seed: u64,
    pub datasets: Vec<String>,
    pub stages: Vec<StageRecord>,
    /// Final-stage value minus the value right after the dataset's own
    /// training (sign flipped for accuracy), so positive means forgetting.
    pub forgetting: Vec<Option<f64>>,
    pub failed: bool,
    pub error: Option<String>,
}

/// Metadata carried into a report.
#[derive(Clone, Debug, Default)]
pub struct ReportMeta {
    pub label: String,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
}

pub fn forgetting_report(
    history: &[StageRecord],
    datasets: &[String],
    metric: MetricKind,
    meta: &ReportMeta,
) -> Result<EvalReport> {
    if history.is_empty() {
        return Err(Error::Report("a report needs at least one stage".into()));
    }
    for s in history {
        if s.values.len() != datasets.len() {
            return Err(Error::Report(format!(
                "stage '{}' has {} cells for {} datasets",
                s.name,
                s.values.len(),
                datasets.len()
            )));
        }
        if let Some(d) = s.trained.iter().find(|&&d| d >= datasets.len()) {
            return Err(Error::Report(format!("stage '{}' trained unknown dataset {d}", s.name)));
        }
        for v in s.values.iter().flatten() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Report(format!("stage '{}': {metric} value {v} outside [0,1]", s.name)));
            }
        }
    }
    let last = history.last().expect("non-empty");
    let forgetting = (0..datasets.len())
        .map(|d| {
            let own = history.iter().find(|s| s.trained.contains(&d))?;
            let (after_own, final_v) = (own.values[d]?, last.values[d]?);
            Some(if metric.higher_is_better() {
                after_own - final_v
            } else {
                final_v - after_own
            })
        })
        .collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        label: meta.label.clone(),
        scenario: meta.scenario.clone(),
        metric,
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        datasets: datasets.to_vec(),
        stages: history.to_vec(),
        forgetting,
        failed: false,
        error: None,
    })
}

impl EvalReport {
    /// Report for a run that stopped early; completed stages are kept.
    pub fn failed(
        history: &[StageRecord],
        datasets: &[String],
        metric: MetricKind,
        meta: &ReportMeta,
        error: &Error,
    ) -> EvalReport {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            label: meta.label.clone(),
            scenario: meta.scenario.clone(),
            metric,
            config_hash: meta.config_hash.clone(),
            seed: meta.seed,
            datasets: datasets.to_vec(),
            stages: history.to_vec(),
            forgetting: vec![None; datasets.len()],
            failed: true,
            error: Some(error.to_string()),
        }
    }

    /// Value grid, one row per stage.
    pub fn grid(&self) -> Vec<Vec<Option<f64>>> {
        self.stages.iter().map(|s| s.values.clone()).collect()
    }

    pub fn final_row(&self) -> Option<&[Option<f64>]> {
        self.stages.last().map(|s| s.values.as_slice())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Report(format!(
                "report schema version {} is not supported (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// `stage,<dataset...>` rows followed by a `forgetting` row; empty cells
    /// are not-evaluated.
    pub fn to_csv(&self) -> String {
        let cell = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::new();
        out.push_str("stage");
        for d in &self.datasets {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for s in &self.stages {
            out.push_str(&s.name);
            for v in &s.values {
                out.push(',');
                out.push_str(&cell(v));
            }
            out.push('\n');
        }
        out.push_str("forgetting");
        for v in &self.forgetting {
            out.push(',');
            out.push_str(&cell(v));
        }
        out.push('\n');
        out
    }
}
