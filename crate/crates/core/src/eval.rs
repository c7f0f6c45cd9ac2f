//! Open-set evaluation: group accuracies, H-score, an MMD separation
//! diagnostic and embedding export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::separation::compute_entropy;
use crate::tensor::DenseMatrix;

/// Harmonic mean of known and unknown accuracy; zero when both are zero.
pub fn h_score(acc_tk: f64, acc_tu: f64) -> f64 {
    let s = acc_tk + acc_tu;
    if s <= 0.0 {
        0.0
    } else if acc_tk == acc_tu {
        acc_tk
    } else {
        2.0 * acc_tk * acc_tu / s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionRule {
    /// Argmax over the `k + 1` logits.
    #[default]
    Argmax,
    /// Argmax over the known logits, replaced by unknown when the normalized
    /// known-class entropy exceeds the threshold.
    EntropyThreshold(f64),
}

/// Class predictions from `n × (k+1)` logits.
pub fn predict(logits: &DenseMatrix, rule: PredictionRule) -> Result<Vec<usize>> {
    let c = logits.cols();
    if c < 2 {
        return Err(Error::invalid("logits need at least one known and the unknown column"));
    }
    match rule {
        PredictionRule::Argmax => Ok(logits.argmax_rows()),
        PredictionRule::EntropyThreshold(tau) => {
            let known = known_columns(logits);
            let profile = compute_entropy(&known)?;
            Ok(known
                .argmax_rows()
                .into_iter()
                .zip(&profile.normalized)
                .map(|(p, &e)| if e > tau { c - 1 } else { p })
                .collect())
        }
    }
}

/// The first `k` columns of `n × (k+1)` logits.
pub fn known_columns(logits: &DenseMatrix) -> DenseMatrix {
    let k = logits.cols() - 1;
    let mut out = DenseMatrix::zeros(logits.rows(), k);
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&logits.row(r)[..k]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub acc_tk: f64,
    pub acc_tu: f64,
    pub h_score: f64,
    /// Accuracy per class id `0..=k`; `None` for classes with no nodes.
    pub per_class: Vec<Option<f64>>,
    pub evaluated_nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd_after: Option<f64>,
}

/// Scores predictions against held-out open-set labels (`0..k` known, `k`
/// unknown). Unlabeled nodes are skipped.
pub fn evaluate_predictions(
    preds: &[usize],
    labels: &[Option<usize>],
    known_count: usize,
) -> Result<EvalReport> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let classes = known_count + 1;
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, l) in preds.iter().zip(labels) {
        let Some(l) = *l else { continue };
        if l >= classes {
            return Err(Error::invalid(format!("label {l} outside 0..={known_count}")));
        }
        totals[l] += 1;
        hits[l] += usize::from(p == l);
    }
    let evaluated: usize = totals.iter().sum();
    if evaluated == 0 {
        return Err(Error::invalid("no labeled target nodes to evaluate"));
    }
    let ratio = |h: usize, t: usize| if t == 0 { 0.0 } else { h as f64 / t as f64 };
    let acc_tk = ratio(hits[..known_count].iter().sum(), totals[..known_count].iter().sum());
    let acc_tu = ratio(hits[known_count], totals[known_count]);
    Ok(EvalReport {
        acc: ratio(hits.iter().sum(), evaluated),
        acc_tk,
        acc_tu,
        h_score: h_score(acc_tk, acc_tu),
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| ratio(h, t)))
            .collect(),
        evaluated_nodes: evaluated,
        mmd_before: None,
        mmd_after: None,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance of the pooled sample, from an evenly strided
/// subset of at most 1000 points.
fn median_distance(points: &[&[f64]]) -> f64 {
    let stride = points.len().div_ceil(1000).max(1);
    let sub: Vec<&[f64]> = points.iter().step_by(stride).copied().collect();
    let mut d = Vec::with_capacity(sub.len() * sub.len() / 2);
    for i in 0..sub.len() {
        for j in i + 1..sub.len() {
            d.push(sq_dist(sub[i], sub[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Unbiased squared MMD with an RBF kernel of median-distance bandwidth.
///
/// Equal-size groups use the paired U-statistic, whose cross term skips
/// `i = j` so a set against itself scores exactly zero. Returns `None` when
/// either group has fewer than two points.
pub fn mmd_unbiased(x: &[&[f64]], y: &[&[f64]]) -> Option<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return None;
    }
    let pooled: Vec<&[f64]> = x.iter().chain(y).copied().collect();
    let sigma = median_distance(&pooled);
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let within = |s: &[&[f64]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += 2.0 * k(s[i], s[j]);
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    let (kxx, kyy) = (within(x), within(y));
    let kxy = if m == n {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..n {
                if i != j {
                    acc += k(x[i], y[j]);
                }
            }
        }
        acc / (m * (m - 1)) as f64
    } else {
        let mut acc = 0.0;
        for a in x {
            for b in y {
                acc += k(a, b);
            }
        }
        acc / (m * n) as f64
    };
    Some(kxx + kyy - 2.0 * kxy)
}

/// MMD between the known and unknown groups of one embedding matrix.
pub fn group_mmd(embeddings: &DenseMatrix, is_unknown: &[Option<bool>]) -> Option<f64> {
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for (r, flag) in is_unknown.iter().enumerate() {
        match flag {
            Some(true) => unknown.push(embeddings.row(r)),
            Some(false) => known.push(embeddings.row(r)),
            None => {}
        }
    }
    mmd_unbiased(&known, &unknown)
}

/// Known/unknown MMD before and after training.
pub fn mmd_diagnostic(
    before: &DenseMatrix,
    after: &DenseMatrix,
    labels: &[Option<usize>],
    known_count: usize,
) -> (Option<f64>, Option<f64>) {
    let flags: Vec<Option<bool>> = labels.iter().map(|l| l.map(|c| c >= known_count)).collect();
    (group_mmd(before, &flags), group_mmd(after, &flags))
}

/// Parsed embedding export.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub node_ids: Vec<usize>,
    pub true_labels: Vec<Option<usize>>,
    pub predicted: Vec<usize>,
    pub embeddings: DenseMatrix,
}

/// One line per node: `node_id true_label predicted_label e_1 … e_d`, with
/// `-1` for an unlabeled node. Values use shortest round-trip formatting.
pub fn format_embeddings(
    embeddings: &DenseMatrix,
    labels: &[Option<usize>],
    predicted: &[usize],
) -> Result<String> {
    let n = embeddings.rows();
    if labels.len() != n || predicted.len() != n {
        return Err(Error::invalid("embedding export needs one label and prediction per row"));
    }
    let mut out = String::new();
    for r in 0..n {
        let label = labels[r].map_or("-1".to_string(), |l| l.to_string());
        out.push_str(&format!("{r} {label} {}", predicted[r]));
        for v in embeddings.row(r) {
            out.push_str(&format!(" {v:?}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(
    path: &Path,
    embeddings: &DenseMatrix,
    labels: &[Option<usize>],
    predicted: &[usize],
) -> Result<()> {
    let text = format_embeddings(embeddings, labels, predicted)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable {
        node_ids: Vec::new(),
        true_labels: Vec::new(),
        predicted: Vec::new(),
        embeddings: DenseMatrix::zeros(0, 0),
    };
    let mut values = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::Parse {
            path: "<embeddings>".into(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.is_empty() {
            continue;
        }
        if t.len() < 4 {
            return Err(bad("expected id, label, prediction and values"));
        }
        let d = t.len() - 3;
        if *width.get_or_insert(d) != d {
            return Err(bad("inconsistent embedding width"));
        }
        table.node_ids.push(t[0].parse().map_err(|_| bad("bad node id"))?);
        let label: i64 = t[1].parse().map_err(|_| bad("bad label"))?;
        table.true_labels.push((label >= 0).then_some(label as usize));
        table.predicted.push(t[2].parse().map_err(|_| bad("bad prediction"))?);
        for v in &t[3..] {
            values.push(v.parse::<f64>().map_err(|_| bad("bad value"))?);
        }
    }
    table.embeddings = DenseMatrix::from_vec(table.node_ids.len(), width.unwrap_or(0), values)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h_score_examples() {
        assert_eq!(h_score(0.6, 0.6), 0.6);
        assert_eq!(h_score(1.0, 0.0), 0.0);
        assert_eq!(h_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn oracle_and_constant_unknown() {
        let labels = vec![Some(0), Some(1), Some(2), Some(2)];
        let oracle: Vec<usize> = labels.iter().map(|l| l.unwrap()).collect();
        let r = evaluate_predictions(&oracle, &labels, 2).unwrap();
        assert_eq!((r.acc, r.acc_tk, r.acc_tu, r.h_score), (1.0, 1.0, 1.0, 1.0));
        let r = evaluate_predictions(&[2; 4], &labels, 2).unwrap();
        assert_eq!((r.acc_tk, r.acc_tu, r.h_score), (0.0, 1.0, 0.0));
    }

    #[test]
    fn missing_labels_rejected() {
        assert!(evaluate_predictions(&[0, 1], &[None, None], 2).is_err());
    }

    #[test]
    fn threshold_rule() {
        let logits = DenseMatrix::from_rows(&[[5.0, 0.0, 9.0], [0.0, 0.0, -9.0]]);
        assert_eq!(predict(&logits, PredictionRule::Argmax).unwrap(), vec![2, 0]);
        assert_eq!(
            predict(&logits, PredictionRule::EntropyThreshold(0.5)).unwrap(),
            vec![0, 2]
        );
    }

    #[test]
    fn mmd_self_is_zero() {
        let pts = [vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 0.3]];
        let x: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        assert!(mmd_unbiased(&x, &x).unwrap().abs() <= 1e-12);
        assert!(mmd_unbiased(&x[..1], &x).is_none());
    }

    #[test]
    fn embedding_round_trip() {
        let z = DenseMatrix::from_rows(&[[0.1, -1e-300], [1.0 / 3.0, 2.5]]);
        let text = format_embeddings(&z, &[Some(1), None], &[1, 2]).unwrap();
        let t = parse_embeddings(&text).unwrap();
        assert_eq!(t.embeddings, z);
        assert_eq!(t.true_labels, vec![Some(1), None]);
        assert_eq!(t.predicted, vec![1, 2]);
    }
}
