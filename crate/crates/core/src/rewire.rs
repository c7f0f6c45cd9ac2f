//! Graph reprogramming of the target domain: an additive learnable feature
//! offset and budgeted XOR edge flips.
//!
//! Edge flips are chosen from a candidate pool (current edges for deletion,
//! sampled absent pairs for addition) by a first-order estimate of how each
//! flip changes the loss. The estimate differentiates the loss through the
//! normalized operator `D̃^{-1/2}(A + I)D̃^{-1/2}` with respect to a continuous
//! adjacency entry `a_uv = a_vu`, degree terms included.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::CsrAdjacency;
use crate::tensor::{DenseMatrix, NodeId, Tape};

/// Learnable `ΔX_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDelta {
    pub delta: DenseMatrix,
}

impl FeatureDelta {
    pub fn zeros(n: usize, f: usize) -> Self {
        FeatureDelta {
            delta: DenseMatrix::zeros(n, f),
        }
    }
}

/// `X_t + ΔX_t` on the tape.
pub fn apply_feature_delta(tape: &mut Tape, features: NodeId, delta: NodeId) -> Result<NodeId> {
    tape.add(features, delta)
}

/// Canonical unordered pair, `u < v`.
pub type Pair = (usize, usize);

fn canonical(u: usize, v: usize) -> Pair {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidatePool {
    pub existing: Vec<Pair>,
    pub sampled_nonedges: Vec<Pair>,
    pub m: usize,
}

impl CandidatePool {
    /// All current edges plus up to `m` distinct absent pairs drawn uniformly.
    /// Pairs in `exclude` (already flipped) are left out of both sets.
    pub fn build<R: Rng>(
        adj: &CsrAdjacency,
        m: usize,
        exclude: &BTreeSet<Pair>,
        rng: &mut R,
    ) -> Self {
        let n = adj.node_count();
        let existing: Vec<Pair> = adj.edges().filter(|p| !exclude.contains(p)).collect();
        let total_pairs = n * n.saturating_sub(1) / 2;
        let available = total_pairs
            .saturating_sub(adj.edge_count())
            .saturating_sub(exclude.iter().filter(|&&(u, v)| !adj.has_edge(u, v)).count());
        let target = m.min(available);
        let mut seen = BTreeSet::new();
        let mut sampled = Vec::with_capacity(target);
        // Rejection sampling; callers keep m well below the number of absent
        // pairs in sparse graphs, and the attempt cap bounds dense corner cases.
        let mut attempts = 0usize;
        while sampled.len() < target && attempts < 50 * target + 1000 {
            attempts += 1;
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            if u == v {
                continue;
            }
            let p = canonical(u, v);
            if adj.has_edge(p.0, p.1) || exclude.contains(&p) || !seen.insert(p) {
                continue;
            }
            sampled.push(p);
        }
        CandidatePool {
            existing,
            sampled_nonedges: sampled,
            m,
        }
    }

    pub fn len(&self) -> usize {
        self.existing.len() + self.sampled_nonedges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `∂L/∂Â` restricted to the quantities the flip estimate needs, gathered
/// from every propagation through one adjacency on a differentiated tape.
pub struct AdjacencyGradient<'a> {
    adj: &'a CsrAdjacency,
    terms: Vec<(&'a DenseMatrix, &'a DenseMatrix)>,
    /// `S_u = Σ_j (G_uj + G_ju) Â_uj` over stored entries of row `u`.
    row_terms: Vec<f64>,
}

impl<'a> AdjacencyGradient<'a> {
    pub fn from_tape(tape: &'a Tape, adj: &'a Arc<CsrAdjacency>) -> Result<Self> {
        if !tape.has_gradients() {
            return Err(Error::State("adjacency gradient needs a completed backward pass".into()));
        }
        let terms = tape.spmm_terms(adj);
        let adj: &CsrAdjacency = adj;
        let vals = adj.norm_values()?;
        let mut grad = AdjacencyGradient {
            adj,
            terms,
            row_terms: Vec::new(),
        };
        let mut row_terms = vec![0.0; adj.node_count()];
        for (u, s) in row_terms.iter_mut().enumerate() {
            let lo = adj.row_ptr()[u];
            for (k, &j) in adj.neighbors(u).iter().enumerate() {
                *s += (grad.entry(u, j) + grad.entry(j, u)) * vals[lo + k];
            }
        }
        grad.row_terms = row_terms;
        Ok(grad)
    }

    /// `∂L/∂Â_ij = Σ g_i · x_j` over recorded propagations.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.terms
            .iter()
            .map(|(x, g)| g.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// Derivative of the loss with respect to the symmetric entry `a_uv`.
    pub fn pair(&self, u: usize, v: usize) -> f64 {
        let du = self.adj.degree(u) as f64;
        let dv = self.adj.degree(v) as f64;
        (self.entry(u, v) + self.entry(v, u)) / (du * dv).sqrt()
            - self.row_terms[u] / (2.0 * du)
            - self.row_terms[v] / (2.0 * dv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipKind {
    Add,
    Del,
}

impl fmt::Display for FlipKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlipKind::Add => "add",
            FlipKind::Del => "del",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredFlip {
    pub pair: Pair,
    pub kind: FlipKind,
    /// Predicted loss decrease; positive means the flip should help.
    pub score: f64,
}

/// Scores every pool candidate as `−s · ∂L/∂a_uv` with `s = +1` for
/// additions and `−1` for deletions.
pub fn score_edge_flips(pool: &CandidatePool, grad: &AdjacencyGradient<'_>) -> Result<Vec<ScoredFlip>> {
    if pool.is_empty() {
        return Err(Error::invalid("candidate pool is empty"));
    }
    let existing = pool.existing.iter().map(|&p| (p, FlipKind::Del, 1.0));
    let added = pool.sampled_nonedges.iter().map(|&p| (p, FlipKind::Add, -1.0));
    Ok(existing
        .chain(added)
        .map(|(pair, kind, sign)| ScoredFlip {
            pair,
            kind,
            score: sign * grad.pair(pair.0, pair.1),
        })
        .collect())
}

/// Up to `k` positive-score flips, best first; ties go to the smaller pair.
pub fn select_flips(mut scored: Vec<ScoredFlip>, k: usize) -> Vec<ScoredFlip> {
    scored.retain(|s| s.score > 0.0);
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.pair.cmp(&b.pair)));
    scored.truncate(k);
    scored
}

/// `A ⊕ ΔA` for the given pairs, with normalization rebuilt.
pub fn commit_flips(adj: &CsrAdjacency, flips: &[Pair]) -> Result<CsrAdjacency> {
    let mut toggled: BTreeSet<Pair> = BTreeSet::new();
    for &(u, v) in flips {
        if u == v {
            return Err(Error::invalid(format!("self-loop flip ({u}, {v})")));
        }
        if u >= adj.node_count() || v >= adj.node_count() {
            return Err(Error::invalid(format!("flip ({u}, {v}) outside the graph")));
        }
        let p = canonical(u, v);
        if !toggled.insert(p) {
            toggled.remove(&p);
        }
    }
    let kept = adj.edges().filter(|p| !toggled.contains(p));
    let added: Vec<Pair> = toggled
        .iter()
        .copied()
        .filter(|&(u, v)| !adj.has_edge(u, v))
        .collect();
    CsrAdjacency::from_edges(adj.node_count(), kept.chain(added))
}

/// Recomputes `1/sqrt(d̃_u d̃_v)` for every entry.
pub fn rebuild_normalization(mut adj: CsrAdjacency) -> CsrAdjacency {
    adj.rebuild_normalization();
    adj
}

/// Cumulative record of flipped pairs against the global budget.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeEditSet {
    pub flips: BTreeSet<Pair>,
    pub budget: usize,
    pub scores: HashMap<Pair, f64>,
}

impl EdgeEditSet {
    pub fn new(budget: usize) -> Self {
        EdgeEditSet {
            budget,
            ..Default::default()
        }
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.flips.len()
    }

    /// Applies `chosen` to `adj` and records them. Fails without side effects
    /// when the budget would be exceeded or a pair was already flipped.
    pub fn commit(&mut self, adj: &CsrAdjacency, chosen: &[ScoredFlip]) -> Result<CsrAdjacency> {
        if chosen.len() > self.remaining() {
            return Err(Error::Budget {
                requested: chosen.len(),
                remaining: self.remaining(),
            });
        }
        if let Some(dup) = chosen.iter().find(|c| self.flips.contains(&c.pair)) {
            return Err(Error::invalid(format!("pair {:?} already flipped", dup.pair)));
        }
        let pairs: Vec<Pair> = chosen.iter().map(|c| c.pair).collect();
        let next = commit_flips(adj, &pairs)?;
        for c in chosen {
            self.flips.insert(c.pair);
            self.scores.insert(c.pair, c.score);
        }
        Ok(next)
    }
}

/// One line of the edit log: `epoch u v add|del score`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditRecord {
    pub epoch: usize,
    pub u: usize,
    pub v: usize,
    pub kind: FlipKind,
    pub score: f64,
}

impl fmt::Display for EditRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {:?}", self.epoch, self.u, self.v, self.kind, self.score)
    }
}

impl FromStr for EditRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::invalid(format!("malformed edit record {s:?}"));
        let [epoch, u, v, kind, score] = t.as_slice() else {
            return Err(bad());
        };
        Ok(EditRecord {
            epoch: epoch.parse().map_err(|_| bad())?,
            u: u.parse().map_err(|_| bad())?,
            v: v.parse().map_err(|_| bad())?,
            kind: match *kind {
                "add" => FlipKind::Add,
                "del" => FlipKind::Del,
                _ => return Err(bad()),
            },
            score: score.parse().map_err(|_| bad())?,
        })
    }
}

pub fn parse_edit_log(text: &str) -> Result<Vec<EditRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(str::parse)
        .collect()
}

/// Replays logged flips epoch by epoch. Each record's kind is checked
/// against the adjacency it applies to.
pub fn replay_edits(adj: &CsrAdjacency, records: &[EditRecord]) -> Result<CsrAdjacency> {
    let mut current = adj.clone();
    let mut start = 0;
    while start < records.len() {
        let epoch = records[start].epoch;
        let end = start
            + records[start..]
                .iter()
                .take_while(|r| r.epoch == epoch)
                .count();
        for r in &records[start..end] {
            let present = current.has_edge(r.u, r.v);
            if present != (r.kind == FlipKind::Del) {
                return Err(Error::invalid(format!(
                    "edit {r} does not match the replayed graph"
                )));
            }
        }
        let pairs: Vec<Pair> = records[start..end].iter().map(|r| (r.u, r.v)).collect();
        current = commit_flips(&current, &pairs)?;
        start = end;
    }
    Ok(current)
}
