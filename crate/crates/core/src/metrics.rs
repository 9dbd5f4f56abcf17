//! Classification metrics over score matrices `[N, K]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn check<R: Real>(scores: &Tensor<R>, labels: &[usize]) -> Result<(usize, usize)> {
    let s = scores.shape();
    ensure!(
        s.len() == 2 && s[0] == labels.len(),
        Shape,
        "scores {:?} vs {} labels",
        s,
        labels.len()
    );
    ensure!(
        labels.iter().all(|&l| l < s[1]),
        Data,
        "label out of range for {} classes",
        s[1]
    );
    Ok((s[0], s[1]))
}

/// Index of the largest score per row; ties go to the lowest index.
pub fn argmax<R: Real>(scores: &Tensor<R>) -> Vec<usize> {
    let k = scores.shape()[1];
    scores
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}

/// Fraction of rows whose label ranks within the top `k` scores. Ties count
/// against the label: a class scoring equal to the label and listed earlier
/// outranks it.
pub fn top_k_accuracy<R: Real>(scores: &Tensor<R>, labels: &[usize], k: usize) -> Result<f64> {
    let (n, classes) = check(scores, labels)?;
    if n == 0 {
        return Ok(0.0);
    }
    let hits = scores
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let target = row[l];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(i, &v)| v > target || (v == target && i < l))
                .count();
            rank < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// `confusion[true][predicted]` counts.
pub fn confusion<R: Real>(scores: &Tensor<R>, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let (_, classes) = check(scores, labels)?;
    let mut m = vec![vec![0; classes]; classes];
    for (p, &l) in argmax(scores).into_iter().zip(labels) {
        m[l][p] += 1;
    }
    Ok(m)
}

/// Per-class recall; classes without samples report `None`.
pub fn per_class_accuracy(confusion: &[Vec<usize>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_scores<R: Real>(scores: &Tensor<R>, labels: &[usize]) -> Result<Self> {
        let confusion = confusion(scores, labels)?;
        Ok(Self {
            top1: top_k_accuracy(scores, labels, 1)?,
            top5: top_k_accuracy(scores, labels, 5)?,
            per_class: per_class_accuracy(&confusion),
            confusion,
        })
    }
}
