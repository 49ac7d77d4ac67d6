use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_acc,val_loss,val_acc,top5_acc,learning_rate,seconds";

/// One line of the per-epoch metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub top5_acc: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics CSV: {e}"))
}

/// Appends rows to a CSV file, flushing after each one.
pub struct MetricsWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        Ok(Self {
            inner: csv::Writer::from_writer(BufWriter::new(file)),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Writes a header row even when there are no data rows.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if rows.is_empty() {
        std::fs::write(path, format!("{METRICS_HEADER}\n"))?;
        return Ok(());
    }
    let mut w = MetricsWriter::create(path)?;
    for r in rows {
        w.write(r)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != METRICS_HEADER {
        return Err(Error::Format(format!(
            "unexpected metrics header `{header}`"
        )));
    }
    reader.deserialize().map(|r| r.map_err(csv_err)).collect()
}

/// Position of `label` when classes are sorted by descending logit, ties
/// placing the lower class index first.
pub fn label_rank<T: Element>(logits: &[T], label: usize) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count()
}

/// Samples whose label is among the `k` largest of its row.
pub fn topk_hits<T: Element>(scores: &Tensor<T>, labels: &[usize], k: usize) -> Result<usize> {
    let classes = scores.shape().c;
    if scores.shape().n != labels.len() || scores.shape().plane() != 1 {
        return Err(Error::InvalidArgument(format!(
            "scores {} do not match {} labels",
            scores.shape(),
            labels.len()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(row, &label)| {
            if label >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
            Ok(usize::from(
                label_rank(&scores.data()[row * classes..(row + 1) * classes], label) < k,
            ))
        })
        .sum()
}
