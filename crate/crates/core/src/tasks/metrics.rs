//! Clustering and classification metrics.

use std::collections::BTreeMap;

use crate::error::{Result, RmlError};

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(RmlError::Config(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Maps arbitrary label values to `0..m` in increasing order.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let ids: BTreeMap<usize, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

fn contingency(pred: &[usize], truth: &[usize]) -> Vec<Vec<usize>> {
    let (p, np) = compact(pred);
    let (t, nt) = compact(truth);
    let mut table = vec![vec![0usize; nt]; np];
    for (&a, &b) in p.iter().zip(&t) {
        table[a][b] += 1;
    }
    table
}

/// Minimum-cost perfect assignment on a square matrix; returns the column
/// assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Fraction of points labeled correctly under the best one-to-one mapping
/// from cluster ids to classes.
pub fn clustering_acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let table = contingency(pred, truth);
    let size = table.len().max(table[0].len());
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|r| {
            (0..size)
                .map(|c| -(table.get(r).and_then(|row| row.get(c)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    let matched: f64 = hungarian(&cost)
        .iter()
        .enumerate()
        .map(|(r, &c)| -cost[r][c])
        .sum();
    Ok(matched / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, normalized by the geometric mean of the
/// two entropies. When either labeling is constant the score is 1 if the
/// partitions coincide and 0 otherwise.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let n = pred.len() as f64;
    let table = contingency(pred, truth);
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..table[0].len()).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let hp = entropy(rows.iter().copied(), n);
    let ht = entropy(cols.iter().copied(), n);
    if hp == 0.0 || ht == 0.0 {
        return Ok(if rows.len() == cols.len() && rows.len() == 1 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            if count > 0 {
                let joint = count as f64 / n;
                mi += joint * (count as f64 * n / (rows[r] as f64 * cols[c] as f64)).ln();
            }
        }
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationReport {
    pub acc: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Accuracy plus macro precision and F1 over the classes that occur in
/// either `pred` or `truth`. Per-class 0/0 terms count as 0.
pub fn classification_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<ClassificationReport> {
    check_lengths(pred, truth)?;
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= classes) {
        return Err(RmlError::Config(format!("label {bad} outside 0..{classes}")));
    }
    if pred.is_empty() {
        return Err(RmlError::Config("no predictions to score".into()));
    }
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut actual = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let present: Vec<usize> = (0..classes).filter(|&c| predicted[c] + actual[c] > 0).collect();
    let mut precision = 0.0;
    let mut f1 = 0.0;
    for &c in &present {
        let p = ratio(tp[c], predicted[c]);
        let r = ratio(tp[c], actual[c]);
        precision += p;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let m = present.len() as f64;
    Ok(ClassificationReport {
        acc: ratio(tp.iter().sum(), pred.len()),
        precision: precision / m,
        f1: f1 / m,
    })
}
