//! Adversarial, classification and entropy objectives as scalar tape nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::separation::PosteriorAssignment;
use crate::tensor::{DenseMatrix, NodeId, Tape};

/// How the entropy objective scores the discriminator against `p(tu)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntDomainTerm {
    /// Binary cross-entropy on the tu probability renormalized over the two
    /// target columns.
    #[default]
    Binary,
    /// Three-way cross-entropy against `[0, p(tk), p(tu)]`.
    ThreeWay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub cls: f64,
    pub ent: f64,
    pub total: f64,
}

fn check_posteriors(rows: usize, post: &PosteriorAssignment) -> Result<()> {
    if post.len() != rows {
        return Err(Error::invalid(format!(
            "posteriors cover {} target nodes, logits have {rows} rows",
            post.len()
        )));
    }
    Ok(())
}

/// `−Σ (targets ⊙ log_probs) · scale`.
fn weighted_nll(tape: &mut Tape, log_probs: NodeId, targets: DenseMatrix, scale: f64) -> Result<NodeId> {
    let t = tape.leaf(targets);
    let prod = tape.mul(log_probs, t)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -scale))
}

fn domain_targets(post: &PosteriorAssignment) -> DenseMatrix {
    let mut t = DenseMatrix::zeros(post.len(), 3);
    for i in 0..post.len() {
        t.set(i, 1, post.p_tk[i]);
        t.set(i, 2, post.p_tu[i]);
    }
    t
}

/// Soft-label cross-entropy of the domain discriminator, averaged over all
/// `n_s + n_t` rows. Source rows target `[1, 0, 0]`, target rows
/// `[0, p(tk), p(tu)]`.
pub fn adv_loss(
    tape: &mut Tape,
    source_logits: NodeId,
    target_logits: NodeId,
    post: &PosteriorAssignment,
) -> Result<NodeId> {
    let ns = tape.value(source_logits).rows();
    let nt = tape.value(target_logits).rows();
    check_posteriors(nt, post)?;
    let scale = 1.0 / (ns + nt) as f64;
    let ls = tape.log_softmax_rows(source_logits)?;
    let mut ys = DenseMatrix::zeros(ns, 3);
    for i in 0..ns {
        ys.set(i, 0, 1.0);
    }
    let src = weighted_nll(tape, ls, ys, scale)?;
    let lt = tape.log_softmax_rows(target_logits)?;
    let tgt = weighted_nll(tape, lt, domain_targets(post), scale)?;
    tape.add(src, tgt)
}

/// Cross-entropy over `k + 1` classes plus `λ` times the cross-entropy toward
/// the unknown class with each row's true logit masked out. With `λ = 0` the
/// second term is not recorded at all.
pub fn cls_loss(tape: &mut Tape, logits: NodeId, labels: &[usize], lambda: f64) -> Result<NodeId> {
    let (n, c) = tape.value(logits).shape();
    if n != labels.len() || n == 0 {
        return Err(Error::invalid(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let unknown = c - 1;
    if let Some(bad) = labels.iter().find(|&&l| l >= unknown) {
        return Err(Error::invalid(format!(
            "source label {bad} is not a known class (unknown id {unknown})"
        )));
    }
    let mut onehot = DenseMatrix::zeros(n, c);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(i, l, 1.0);
    }
    let ls = tape.log_softmax_rows(logits)?;
    let first = weighted_nll(tape, ls, onehot, 1.0 / n as f64)?;
    if lambda == 0.0 {
        return Ok(first);
    }
    let mut include = DenseMatrix::ones(n, c);
    let mut to_unknown = DenseMatrix::zeros(n, c);
    for (i, &l) in labels.iter().enumerate() {
        include.set(i, l, 0.0);
        to_unknown.set(i, unknown, 1.0);
    }
    let masked = tape.masked_log_softmax_rows(logits, include)?;
    let second = weighted_nll(tape, masked, to_unknown, lambda / n as f64)?;
    tape.add(first, second)
}

/// Mean softmax entropy of target predictions plus a domain term tying the
/// discriminator's tu probability to `p(tu)`.
pub fn ent_loss(
    tape: &mut Tape,
    class_logits: NodeId,
    domain_logits: NodeId,
    post: &PosteriorAssignment,
    mode: EntDomainTerm,
) -> Result<NodeId> {
    let n = tape.value(class_logits).rows();
    check_posteriors(n, post)?;
    if tape.value(domain_logits).rows() != n {
        return Err(Error::invalid("domain and class logits cover different nodes"));
    }
    let scale = 1.0 / n as f64;
    let ls = tape.log_softmax_rows(class_logits)?;
    let p = tape.exp(ls);
    let plogp = tape.mul(p, ls)?;
    let s = tape.sum_all(plogp);
    let entropy = tape.scale(s, -scale);
    let domain = match mode {
        EntDomainTerm::Binary => {
            let mut include = DenseMatrix::ones(n, 3);
            for i in 0..n {
                include.set(i, 0, 0.0);
            }
            let lq = tape.masked_log_softmax_rows(domain_logits, include)?;
            weighted_nll(tape, lq, domain_targets(post), scale)?
        }
        EntDomainTerm::ThreeWay => {
            let lq = tape.log_softmax_rows(domain_logits)?;
            weighted_nll(tape, lq, domain_targets(post), scale)?
        }
    };
    tape.add(entropy, domain)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(tk: &[f64]) -> PosteriorAssignment {
        PosteriorAssignment {
            p_tk: tk.to_vec(),
            p_tu: tk.iter().map(|p| 1.0 - p).collect(),
        }
    }

    #[test]
    fn adv_uniform_source_is_ln3() {
        let mut t = Tape::new();
        let s = t.leaf(DenseMatrix::zeros(2, 3));
        let g = t.leaf(DenseMatrix::zeros(1, 3));
        let l = adv_loss(&mut t, s, g, &post(&[0.5])).unwrap();
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adv_rejects_missing_posteriors() {
        let mut t = Tape::new();
        let s = t.leaf(DenseMatrix::zeros(1, 3));
        let g = t.leaf(DenseMatrix::zeros(2, 3));
        assert!(adv_loss(&mut t, s, g, &post(&[0.5])).is_err());
    }

    #[test]
    fn cls_lambda_zero_is_plain_ce() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::from_rows(&[[1.0, 0.0, 0.0]]));
        let l = cls_loss(&mut t, x, &[0], 0.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((t.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cls_rejects_unknown_label() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::zeros(1, 3));
        assert!(cls_loss(&mut t, x, &[2], 0.1).is_err());
    }

    #[test]
    fn ent_terms() {
        let mut t = Tape::new();
        // Uniform 4-way prediction; discriminator equal on tk and tu.
        let c = t.leaf(DenseMatrix::zeros(1, 4));
        let d = t.leaf(DenseMatrix::from_rows(&[[5.0, 0.0, 0.0]]));
        let l = ent_loss(&mut t, c, d, &post(&[0.5]), EntDomainTerm::Binary).unwrap();
        let expect = 4f64.ln() + 2f64.ln();
        assert!((t.value(l).item() - expect).abs() < 1e-12);
    }
}
