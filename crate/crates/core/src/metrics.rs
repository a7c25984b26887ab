//! Task metrics and expert-utilization diagnostics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{GmopeError, Result};

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GmopeError::Metric("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GmopeError::Metric("scores contain NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(GmopeError::Metric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based midranks of the positives, kept doubled so it stays integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(GmopeError::Metric("accuracy needs two equal, non-empty label vectors".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(GmopeError::Metric("no values to summarize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// One routed batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub step: u64,
    pub stage: String,
    pub dataset: String,
    pub rawscores: Vec<f64>,
    pub active: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub mean_weights: Vec<f64>,
    /// Population variance of `mean_weights`.
    pub weight_variance: f64,
    pub selection_counts: Vec<usize>,
    /// Least over most frequently selected expert.
    pub selection_ratio: f64,
    pub batches: usize,
}

pub fn utilization(log: &[RoutingRecord]) -> Result<UtilizationReport> {
    let first = log.first().ok_or_else(|| GmopeError::arg("routing log is empty"))?;
    let m = first.weights.len();
    if m == 0 || log.iter().any(|r| r.weights.len() != m) {
        return Err(GmopeError::arg("routing records disagree on the number of experts"));
    }
    let mut mean_weights = vec![0.0; m];
    let mut selection_counts = vec![0usize; m];
    for record in log {
        for (acc, w) in mean_weights.iter_mut().zip(&record.weights) {
            *acc += w;
        }
        for &e in &record.active {
            if e >= m {
                return Err(GmopeError::arg(format!("active expert {e} out of range")));
            }
            selection_counts[e] += 1;
        }
    }
    for w in &mut mean_weights {
        *w /= log.len() as f64;
    }
    let (_, std) = mean_std(&mean_weights)?;
    let max = *selection_counts.iter().max().unwrap();
    let min = *selection_counts.iter().min().unwrap();
    Ok(UtilizationReport {
        weight_variance: std * std,
        selection_ratio: if max == 0 { 0.0 } else { min as f64 / max as f64 },
        mean_weights,
        selection_counts,
        batches: log.len(),
    })
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

fn split<T: std::str::FromStr>(field: &str) -> Result<Vec<T>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|s| s.parse().map_err(|_| GmopeError::arg(format!("bad routing field {s:?}"))))
        .collect()
}

/// Columns: `step, stage, dataset, rawscore_0.., active, weight_0..`; the
/// active set is `;`-separated.
pub fn write_routing_csv<W: Write>(writer: W, log: &[RoutingRecord]) -> Result<()> {
    let m = log.first().map_or(0, |r| r.weights.len());
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["step".to_string(), "stage".into(), "dataset".into()];
    header.extend((0..m).map(|i| format!("rawscore_{i}")));
    header.push("active".into());
    header.extend((0..m).map(|i| format!("weight_{i}")));
    let csv_err = |e: csv::Error| GmopeError::arg(format!("routing log write failed: {e}"));
    out.write_record(&header).map_err(csv_err)?;
    for r in log {
        let mut row = vec![r.step.to_string(), r.stage.clone(), r.dataset.clone()];
        row.extend(r.rawscores.iter().map(f64::to_string));
        row.push(join(&r.active));
        row.extend(r.weights.iter().map(f64::to_string));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush().map_err(|e| GmopeError::arg(format!("routing log write failed: {e}")))?;
    Ok(())
}

pub fn read_routing_csv<R: Read>(reader: R) -> Result<Vec<RoutingRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let csv_err = |e: csv::Error| GmopeError::arg(format!("routing log read failed: {e}"));
    let header = rdr.headers().map_err(csv_err)?.clone();
    let m = header.iter().filter(|h| h.starts_with("weight_")).count();
    let mut log = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != 4 + 2 * m {
            return Err(GmopeError::arg("routing row has the wrong number of columns"));
        }
        let num = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|_| GmopeError::arg(format!("bad number {:?}", &row[i])))
        };
        log.push(RoutingRecord {
            step: row[0].parse().map_err(|_| GmopeError::arg("bad step"))?,
            stage: row[1].to_string(),
            dataset: row[2].to_string(),
            rawscores: (3..3 + m).map(num).collect::<Result<_>>()?,
            active: split(&row[3 + m])?,
            weights: (4 + m..4 + 2 * m).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(weights: Vec<f64>, active: Vec<usize>) -> RoutingRecord {
        RoutingRecord {
            step: 0,
            stage: "pretrain".into(),
            dataset: "toy".into(),
            rawscores: vec![0.0; weights.len()],
            active,
            weights,
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 1], &[0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn utilization_examples() {
        let uniform = utilization(&vec![record(vec![0.5, 0.5], vec![0, 1]); 3]).unwrap();
        assert_eq!(uniform.weight_variance, 0.0);
        assert_eq!(uniform.selection_ratio, 1.0);
        let one = utilization(&vec![record(vec![1.0, 0.0], vec![0]); 4]).unwrap();
        assert_eq!(one.selection_ratio, 0.0);
        assert_eq!(one.selection_counts, vec![4, 0]);
        let two = utilization(&[record(vec![0.8, 0.2], vec![0, 1]), record(vec![0.6, 0.4], vec![0, 1])]).unwrap();
        assert!((two.mean_weights[0] - 0.7).abs() < 1e-12);
        assert!((two.mean_weights[1] - 0.3).abs() < 1e-12);
        assert!((two.weight_variance - 0.04).abs() < 1e-12);
        assert!(utilization(&[]).is_err());
    }

    #[test]
    fn mean_std_single_value() {
        assert_eq!(mean_std(&[0.8]).unwrap(), (0.8, 0.0));
    }

    #[test]
    fn routing_csv_round_trip() {
        let mut r = record(vec![0.731058578630005, 0.268941421369995, 0.0], vec![0, 1]);
        r.rawscores = vec![1.25, 2.0, 1e-17];
        let log = vec![r.clone(), RoutingRecord { step: 1, ..r }];
        let mut buf = Vec::new();
        write_routing_csv(&mut buf, &log).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("step,stage,dataset,rawscore_0"));
        assert_eq!(read_routing_csv(buf.as_slice()).unwrap(), log);
    }
}
