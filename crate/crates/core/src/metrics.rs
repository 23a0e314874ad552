//! Ranking metrics for binary tasks and confusion-matrix metrics for any
//! number of classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::ClassifierOutput;
use crate::nn::softmax;

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, split into blocks of equal score.
fn tie_blocks(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match blocks.last_mut() {
            Some(block) if scores[block[0]] == scores[i] => block.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    // negatives strictly below the current block, counted from the bottom
    let mut wins = 0.0;
    let mut neg_below = neg;
    for block in tie_blocks(scores) {
        let p = block.iter().filter(|&&i| labels[i]).count();
        let n = block.len() - p;
        neg_below -= n;
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: sum over descending score blocks of
/// `(recall_k - recall_{k-1}) * precision_k`.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_scores(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metric("AUPRC needs at least one positive".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for block in tie_blocks(scores) {
        let p = block.iter().filter(|&&i| labels[i]).count();
        tp += p;
        seen += block.len();
        ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[label][predicted]`
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auprc: Option<f64>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn multiclass_metrics(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(c) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::Metric(format!("class {c} not in [0, {n_classes})")));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let (p, r) = (ratio(tp, predicted), ratio(tp, actual));
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        mp += p;
        mr += r;
        mf += f;
    }
    let k = n_classes as f64;
    Ok(MetricsReport {
        n: preds.len(),
        accuracy: ratio(correct, preds.len()),
        macro_precision: mp / k,
        macro_recall: mr / k,
        macro_f1: mf / k,
        confusion,
        auroc: None,
        auprc: None,
    })
}

/// Full report from classifier outputs. With two classes the positive
/// score is the softmax probability of class 1; ranking metrics are left
/// out when only one class is present.
pub fn evaluate_outputs(
    outputs: &[ClassifierOutput],
    labels: &[usize],
    n_classes: usize,
) -> Result<MetricsReport> {
    let preds: Vec<usize> = outputs.iter().map(|o| o.predicted).collect();
    let mut report = multiclass_metrics(&preds, labels, n_classes)?;
    if n_classes == 2 {
        let scores: Vec<f64> = outputs.iter().map(|o| softmax(&o.logits)[1]).collect();
        let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        report.auroc = auroc(&scores, &truth).ok();
        report.auprc = auprc(&scores, &truth).ok();
    }
    Ok(report)
}
