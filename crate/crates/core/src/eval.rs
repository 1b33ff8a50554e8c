//! Evaluation: accuracy/loss over encoded examples, 5x5 confusion matrices,
//! adjacent accuracy, and the cross-model comparison report.

use crate::encoder::{EncodedBatch, Model};
use crate::error::{Error, Result};
use crate::finetune::TrainRunRecord;
use crate::tensor::{cross_entropy, Real};
use crate::tokenizer::EncodedInput;
use crate::treebank::NUM_CLASSES;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Strongly Negative",
    "Weakly Negative",
    "Neutral",
    "Weakly Positive",
    "Strongly Positive",
];

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub predictions: Vec<u8>,
}

/// Deterministic evaluation: dropout off, argmax ties broken toward the
/// lower class index.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    examples: &[EncodedInput],
    batch_size: usize,
) -> Result<EvalResult> {
    let classifier = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("model has no classification head".into()))?;
    if examples.is_empty() {
        return Err(Error::Data("evaluate called on an empty example list".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let num_classes = classifier.out_dim();
    let mut predictions = Vec::with_capacity(examples.len());
    let mut total_loss = 0.0f64;
    for chunk in examples.chunks(batch_size) {
        let refs: Vec<&EncodedInput> = chunk.iter().collect();
        let batch = EncodedBatch::from_inputs(&refs, true)?;
        let out = model.forward(&batch, None)?;
        let logits = classifier.forward(&out.pooled)?;
        for (bi, input) in chunk.iter().enumerate() {
            let label = input
                .label
                .ok_or_else(|| Error::Data("example has no label".into()))?
                as usize;
            if label >= num_classes {
                return Err(Error::Index(format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            let row = logits.row(bi);
            let mut best = 0usize;
            for c in 1..num_classes {
                if row[c] > row[best] {
                    best = c; // strict: ties keep the lower index
                }
            }
            predictions.push(best as u8);
            let (loss, _) = cross_entropy(row, label)?;
            total_loss += loss.as_f64();
        }
    }
    let n = examples.len() as f64;
    let correct = predictions
        .iter()
        .zip(examples)
        .filter(|(p, e)| Some(**p) == e.label)
        .count();
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        mean_loss: total_loss / n,
        predictions,
    })
}

/// 5x5 count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![0; classes * classes],
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.count(c, c)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|t| (0..self.classes).map(|p| self.count(t, p)).sum())
            .collect()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("empty confusion matrix".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Row-normalized view (each row sums to 1; all-zero rows stay zero).
    pub fn row_normalized(&self) -> Vec<f64> {
        let sums = self.row_sums();
        let mut out = vec![0.0; self.counts.len()];
        for t in 0..self.classes {
            if sums[t] == 0 {
                continue;
            }
            for p in 0..self.classes {
                out[t * self.classes + p] = self.count(t, p) as f64 / sums[t] as f64;
            }
        }
        out
    }

    /// CSV with a class-name header row and column, raw counts.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut s = String::from("true\\predicted");
        for name in class_names.iter().take(self.classes) {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for t in 0..self.classes {
            s.push_str(class_names[t]);
            for p in 0..self.classes {
                s.push_str(&format!(",{}", self.count(t, p)));
            }
            s.push('\n');
        }
        s
    }

    /// CSV of the row-normalized percentages.
    pub fn to_csv_normalized(&self, class_names: &[&str]) -> String {
        let normalized = self.row_normalized();
        let mut s = String::from("true\\predicted");
        for name in class_names.iter().take(self.classes) {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for t in 0..self.classes {
            s.push_str(class_names[t]);
            for p in 0..self.classes {
                s.push_str(&format!(",{:.4}", normalized[t * self.classes + p]));
            }
            s.push('\n');
        }
        s
    }
}

/// Tallies `counts[true][predicted]` over equal-length label sequences.
pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(NUM_CLASSES);
    for (&p, &t) in predictions.iter().zip(labels) {
        if p as usize >= NUM_CLASSES || t as usize >= NUM_CLASSES {
            return Err(Error::Index(format!(
                "class value outside 0..={}",
                NUM_CLASSES - 1
            )));
        }
        m.counts[t as usize * NUM_CLASSES + p as usize] += 1;
    }
    Ok(m)
}

/// Fraction of examples within one class of the truth — the
/// mistakes-on-the-margins view that plain accuracy understates.
pub fn adjacent_accuracy(matrix: &ConfusionMatrix) -> Result<f64> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let mut near = 0u64;
    for t in 0..matrix.classes() {
        for p in 0..matrix.classes() {
            if t.abs_diff(p) <= 1 {
                near += matrix.count(t, p);
            }
        }
    }
    Ok(near as f64 / total as f64)
}

/// One line of the model-comparison table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub mean_epoch_seconds: f64,
    pub best_test_accuracy: f64,
    pub best_epoch: usize,
    pub parameter_count: u64,
}

impl ComparisonRow {
    pub fn from_record(name: &str, record: &TrainRunRecord) -> Self {
        let mean_epoch_seconds = if record.entries.is_empty() {
            0.0
        } else {
            record.entries.iter().map(|e| e.epoch_seconds).sum::<f64>()
                / record.entries.len() as f64
        };
        Self {
            name: name.to_string(),
            mean_epoch_seconds,
            best_test_accuracy: record.test_accuracy.unwrap_or(f64::NAN),
            best_epoch: record.best_epoch,
            parameter_count: record.parameter_count,
        }
    }
}

/// Renders seconds as `m:ss`.
pub fn format_mmss(seconds: f64) -> String {
    let total = seconds.round().max(0.0) as u64;
    format!("{}:{:02}", total / 60, total % 60)
}

/// Sorted comparison rows (best accuracy first, ties by name) plus the
/// rendered text table and CSV.
pub fn compare_report(records: &[(String, &TrainRunRecord)]) -> Result<(Vec<ComparisonRow>, String, String)> {
    if records.is_empty() {
        return Err(Error::Data("no run records to compare".into()));
    }
    let mut rows: Vec<ComparisonRow> = records
        .iter()
        .map(|(name, record)| ComparisonRow::from_record(name, record))
        .collect();
    rows.sort_by(|a, b| {
        b.best_test_accuracy
            .partial_cmp(&a.best_test_accuracy)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });

    let mut csv = String::from(
        "model,epoch_time,mean_epoch_seconds,best_test_accuracy,best_epoch,parameters\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.3},{:.4},{},{}\n",
            r.name,
            format_mmss(r.mean_epoch_seconds),
            r.mean_epoch_seconds,
            r.best_test_accuracy,
            r.best_epoch,
            r.parameter_count
        ));
    }

    let name_width = rows
        .iter()
        .map(|r| r.name.len())
        .chain(["Model".len()])
        .max()
        .unwrap();
    let mut text = format!(
        "{:<name_width$}  {:>10}  {:>14}  {:>10}  {:>12}\n",
        "Model", "Epoch Time", "Best Test Acc.", "Best Epoch", "Parameters"
    );
    for r in &rows {
        text.push_str(&format!(
            "{:<name_width$}  {:>10}  {:>14.4}  {:>10}  {:>12}\n",
            r.name,
            format_mmss(r.mean_epoch_seconds),
            r.best_test_accuracy,
            r.best_epoch,
            r.parameter_count
        ));
    }
    Ok((rows, text, csv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::EpochEntry;
    use proptest::prelude::*;

    #[test]
    fn confusion_identity_and_single() {
        let m = confusion(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(m.trace(), 5);
        assert_eq!(m.total(), 5);
        assert_eq!(m.accuracy().unwrap(), 1.0);

        let m = confusion(&[3], &[4]).unwrap();
        assert_eq!(m.count(4, 3), 1);
        assert_eq!(m.total(), 1);
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert!(confusion(&[0, 1], &[0]).is_err());
        assert!(confusion(&[5], &[0]).is_err());
    }

    #[test]
    fn adjacent_accuracy_bounds() {
        let diagonal = confusion(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(adjacent_accuracy(&diagonal).unwrap(), 1.0);
        let extreme = confusion(&[4, 4], &[0, 0]).unwrap();
        assert_eq!(adjacent_accuracy(&extreme).unwrap(), 0.0);
        assert!(adjacent_accuracy(&ConfusionMatrix::new(5)).is_err());
    }

    proptest! {
        #[test]
        fn confusion_invariants(
            pairs in proptest::collection::vec((0u8..5, 0u8..5), 1..200)
        ) {
            let predictions: Vec<u8> = pairs.iter().map(|(p, _)| *p).collect();
            let labels: Vec<u8> = pairs.iter().map(|(_, t)| *t).collect();
            let m = confusion(&predictions, &labels).unwrap();
            prop_assert_eq!(m.total() as usize, pairs.len());
            // row sums equal true-label counts
            let mut label_counts = [0u64; 5];
            for &t in &labels { label_counts[t as usize] += 1; }
            prop_assert_eq!(m.row_sums(), label_counts.to_vec());
            // accuracy identity and adjacent dominance
            let accuracy = m.trace() as f64 / m.total() as f64;
            prop_assert_eq!(m.accuracy().unwrap(), accuracy);
            prop_assert!(adjacent_accuracy(&m).unwrap() >= accuracy);
            // brute-force recount of the adjacent mass
            let near = predictions.iter().zip(&labels)
                .filter(|(p, t)| p.abs_diff(**t) <= 1).count();
            let adj = adjacent_accuracy(&m).unwrap();
            prop_assert!((adj - near as f64 / pairs.len() as f64).abs() < 1e-12);
        }
    }

    fn record_with(accuracy: f64, seconds: f64) -> TrainRunRecord {
        TrainRunRecord {
            entries: vec![EpochEntry {
                epoch: 0,
                train_loss: 1.0,
                train_accuracy: 0.5,
                dev_loss: 1.0,
                dev_accuracy: 0.5,
                epoch_seconds: seconds,
            }],
            best_epoch: 0,
            stopped_early: false,
            test_loss: Some(1.0),
            test_accuracy: Some(accuracy),
            parameter_count: 1000,
            optimizer_steps: 1,
            checkpoint: None,
        }
    }

    #[test]
    fn comparison_reproduces_published_ordering() {
        // the published per-model accuracies sort the table
        let records = vec![
            ("bert_base".to_string(), record_with(0.549, 338.0)),
            ("bert_large".to_string(), record_with(0.562, 758.0)),
            ("albert_base".to_string(), record_with(0.490, 196.0)),
            ("distilbert_base".to_string(), record_with(0.532, 174.0)),
            ("roberta_large".to_string(), record_with(0.602, 900.0)),
        ];
        let refs: Vec<(String, &TrainRunRecord)> =
            records.iter().map(|(n, r)| (n.clone(), r)).collect();
        let (rows, text, csv) = compare_report(&refs).unwrap();
        let order: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            order,
            vec![
                "roberta_large",
                "bert_large",
                "bert_base",
                "distilbert_base",
                "albert_base"
            ]
        );
        assert!(text.contains("bert_large"));
        // 338 s renders like the published per-epoch time style
        assert!(csv.contains("bert_base,5:38"));
    }

    #[test]
    fn comparison_tie_breaks_by_name_and_handles_single() {
        let records = vec![
            ("zeta".to_string(), record_with(0.5, 10.0)),
            ("alpha".to_string(), record_with(0.5, 10.0)),
        ];
        let refs: Vec<(String, &TrainRunRecord)> =
            records.iter().map(|(n, r)| (n.clone(), r)).collect();
        let (rows, _, _) = compare_report(&refs).unwrap();
        assert_eq!(rows[0].name, "alpha");

        let single = vec![("only".to_string(), record_with(0.4, 5.0))];
        let refs: Vec<(String, &TrainRunRecord)> =
            single.iter().map(|(n, r)| (n.clone(), r)).collect();
        let (rows, _, csv) = compare_report(&refs).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(csv.lines().count(), 2);

        assert!(compare_report(&[]).is_err());
    }

    #[test]
    fn mmss_rendering() {
        assert_eq!(format_mmss(338.0), "5:38");
        assert_eq!(format_mmss(59.6), "1:00");
        assert_eq!(format_mmss(0.0), "0:00");
        assert_eq!(format_mmss(758.0), "12:38");
    }
}
