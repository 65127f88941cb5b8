//! Confusion matrices, accuracy, macro F1 and run comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelBundle;
use crate::signal::{Activity, SyncedSample};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn activities() -> Self {
        Self::new(Activity::class_names())
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = class_names.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::shape(format!("confusion counts must be {k}x{k}")));
        }
        Ok(ConfusionMatrix { class_names, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.n_classes();
        if truth >= k || predicted >= k {
            return Err(Error::arg(format!("class index out of range ({truth}, {predicted}) for {k} classes")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|c| self.counts[c][c]).sum()
    }

    /// Element-wise sum, for merging shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_names != self.class_names {
            return Err(Error::arg("cannot merge confusion matrices over different classes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::arg("accuracy of an empty confusion matrix"));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// F1 of every class, with 0/0 taken as 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        let k = self.n_classes();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let predicted: u64 = (0..k).map(|r| self.counts[r][c]).sum();
                let actual: u64 = self.counts[c].iter().sum();
                let precision = ratio(tp, predicted as f64);
                let recall = ratio(tp, actual as f64);
                ratio(2.0 * precision * recall, precision + recall)
            })
            .collect()
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for n in &self.class_names {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            s.push_str(name);
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Unweighted mean of per-class F1 over every class, absent ones included.
pub fn macro_f1(confusion: &ConfusionMatrix) -> Result<f64> {
    if confusion.total() == 0 {
        return Err(Error::arg("macro F1 of an empty confusion matrix"));
    }
    let f1 = confusion.per_class_f1();
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(MetricsReport {
            accuracy: confusion.accuracy()?,
            per_class_f1: confusion.per_class_f1(),
            macro_f1: macro_f1(&confusion)?,
            n_samples: confusion.total() as usize,
            confusion,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn report_from_predictions(truth: &[usize], predicted: &[usize]) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(Error::arg("cannot evaluate an empty set"));
    }
    if truth.len() != predicted.len() {
        return Err(Error::shape("truth and prediction lengths differ"));
    }
    let mut cm = ConfusionMatrix::activities();
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.record(t, p)?;
    }
    MetricsReport::from_confusion(cm)
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode predictions for every sample, in order.
pub fn predict(bundle: &ModelBundle, samples: &[SyncedSample]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&SyncedSample> = chunk.iter().collect();
        let logits = bundle.logits(&refs)?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

pub fn evaluate(bundle: &ModelBundle, test: &[SyncedSample]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::arg("cannot evaluate an empty test set"));
    }
    let predicted = predict(bundle, test)?;
    let truth: Vec<usize> = test.iter().map(|s| s.label.index()).collect();
    report_from_predictions(&truth, &predicted)
}

/// One finished run as seen by [`compare_runs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: String,
    /// Labelled examples per class; `None` means the whole training split.
    pub shots: Option<usize>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub method: String,
    pub shots: Option<usize>,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Percentage-point deltas against the reference (first) run.
    pub delta_accuracy_pp: f64,
    pub delta_macro_f1_pp: f64,
    pub delta_per_class_f1_pp: Vec<f64>,
}

/// Mean macro F1 of one method at one shot count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub shots: Option<usize>,
    pub mean_macro_f1: f64,
    pub mean_accuracy: f64,
    pub n_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub class_names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub curves: Vec<CurvePoint>,
}

pub fn shots_label(shots: Option<usize>) -> String {
    shots.map_or_else(|| "all".to_string(), |k| k.to_string())
}

/// Align runs against the first one and average per (method, shots).
pub fn compare_runs(runs: &[RunSummary]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::arg(format!("need at least 2 runs to compare, got {}", runs.len())));
    }
    let base = &runs[0];
    let names = &base.report.confusion.class_names;
    if let Some(bad) = runs.iter().find(|r| &r.report.confusion.class_names != names) {
        return Err(Error::arg(format!("run '{}' uses a different class set", bad.name)));
    }
    let rows = runs
        .iter()
        .map(|r| ComparisonRow {
            name: r.name.clone(),
            method: r.method.clone(),
            shots: r.shots,
            accuracy: r.report.accuracy,
            macro_f1: r.report.macro_f1,
            delta_accuracy_pp: 100.0 * (r.report.accuracy - base.report.accuracy),
            delta_macro_f1_pp: 100.0 * (r.report.macro_f1 - base.report.macro_f1),
            delta_per_class_f1_pp: r
                .report
                .per_class_f1
                .iter()
                .zip(&base.report.per_class_f1)
                .map(|(a, b)| 100.0 * (a - b))
                .collect(),
        })
        .collect();
    // None (all) sorts after every finite shot count.
    let mut groups: BTreeMap<(String, (bool, usize)), Vec<&MetricsReport>> = BTreeMap::new();
    for r in runs {
        let key = (r.method.clone(), (r.shots.is_none(), r.shots.unwrap_or(0)));
        groups.entry(key).or_default().push(&r.report);
    }
    let curves = groups
        .into_iter()
        .map(|((method, (all, k)), reps)| {
            let n = reps.len() as f64;
            CurvePoint {
                method,
                shots: (!all).then_some(k),
                mean_macro_f1: reps.iter().map(|r| r.macro_f1).sum::<f64>() / n,
                mean_accuracy: reps.iter().map(|r| r.accuracy).sum::<f64>() / n,
                n_runs: reps.len(),
            }
        })
        .collect();
    Ok(Comparison {
        reference: base.name.clone(),
        class_names: names.clone(),
        rows,
        curves,
    })
}

impl Comparison {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("name,method,shots,accuracy,macro_f1,delta_accuracy_pp,delta_macro_f1_pp");
        for c in &self.class_names {
            write!(s, ",delta_f1_pp_{c}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(
                s,
                "{},{},{},{:.6},{:.6},{:.4},{:.4}",
                r.name,
                r.method,
                shots_label(r.shots),
                r.accuracy,
                r.macro_f1,
                r.delta_accuracy_pp,
                r.delta_macro_f1_pp
            )
            .unwrap();
            for d in &r.delta_per_class_f1_pp {
                write!(s, ",{d:.4}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("method,shots,mean_macro_f1,mean_accuracy,n_runs\n");
        for p in &self.curves {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{}",
                p.method,
                shots_label(p.shots),
                p.mean_macro_f1,
                p.mean_accuracy,
                p.n_runs
            )
            .unwrap();
        }
        s
    }
}
