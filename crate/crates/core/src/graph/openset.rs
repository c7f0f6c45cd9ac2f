use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::CsrAdjacency;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::DenseMatrix;

/// A graph with node features and optional per-node class labels.
#[derive(Clone, Debug)]
pub struct LabeledGraph {
    pub adjacency: Arc<CsrAdjacency>,
    pub features: DenseMatrix,
    pub labels: Vec<Option<usize>>,
    pub class_count: usize,
}

impl LabeledGraph {
    pub fn new(
        adjacency: CsrAdjacency,
        features: DenseMatrix,
        labels: Vec<Option<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        let n = adjacency.node_count();
        if features.rows() != n || labels.len() != n {
            return Err(Error::invalid(format!(
                "graph has {n} nodes but {} feature rows and {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if !features.is_finite() {
            return Err(Error::invalid("features contain non-finite values"));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        Ok(LabeledGraph {
            adjacency: Arc::new(adjacency),
            features,
            labels,
            class_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.node_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Scales each feature row to unit L2 norm; zero rows are left alone.
    pub fn l2_normalize_rows(&mut self) {
        for r in 0..self.features.rows() {
            let row = self.features.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
}

/// Labeled source graph, target graph and the size of the shared label space.
///
/// Target labels are carried for evaluation only; training code reads the
/// target's structure and features but never its labels.
#[derive(Clone, Debug)]
pub struct DomainPair {
    pub source: LabeledGraph,
    pub target: LabeledGraph,
    pub known_count: usize,
}

impl DomainPair {
    pub fn new(source: LabeledGraph, target: LabeledGraph, known_count: usize) -> Result<Self> {
        if known_count == 0 {
            return Err(Error::invalid("known_count must be positive"));
        }
        if let Some(bad) = source.labels.iter().flatten().find(|&&l| l >= known_count) {
            return Err(Error::invalid(format!(
                "source label {bad} is not a known class (< {known_count})"
            )));
        }
        if let Some(bad) = target.labels.iter().flatten().find(|&&l| l > known_count) {
            return Err(Error::invalid(format!(
                "target label {bad} exceeds unknown id {known_count}"
            )));
        }
        if source.feature_dim() != target.feature_dim() {
            return Err(Error::Dimension {
                op: "domain pair features",
                left: source.features.shape(),
                right: target.features.shape(),
            });
        }
        Ok(DomainPair {
            source,
            target,
            known_count,
        })
    }

    /// Class id shared by every target-only class.
    pub fn unknown_id(&self) -> usize {
        self.known_count
    }

    /// Relabels raw source/target graphs against the given known classes.
    pub fn from_raw(source: &LabeledGraph, target: &LabeledGraph, known: &[usize]) -> Result<Self> {
        let s = relabel_openset(source, known)?;
        let t = relabel_openset(target, known)?;
        let known_count = s.class_count - 1;
        let mut s = s;
        s.class_count = known_count;
        if s.labels.iter().flatten().any(|&l| l == known_count) {
            // Source nodes of non-known classes carry no supervision.
            s.labels = s
                .labels
                .into_iter()
                .map(|l| l.filter(|&c| c < known_count))
                .collect();
        }
        DomainPair::new(s, t, known_count)
    }
}

/// Maps known classes to `0..k` in ascending original id order and every
/// other class to the unknown id `k`.
pub fn relabel_openset(graph: &LabeledGraph, known_classes: &[usize]) -> Result<LabeledGraph> {
    if known_classes.is_empty() {
        return Err(Error::invalid("known class set is empty"));
    }
    let mut known: Vec<usize> = known_classes.to_vec();
    known.sort_unstable();
    known.dedup();
    let unknown = known.len();
    let remap: BTreeMap<usize, usize> = known.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let labels = graph
        .labels
        .iter()
        .map(|l| l.map(|c| remap.get(&c).copied().unwrap_or(unknown)))
        .collect();
    Ok(LabeledGraph {
        adjacency: Arc::clone(&graph.adjacency),
        features: graph.features.clone(),
        labels,
        class_count: unknown + 1,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub sanity: Vec<usize>,
}

/// Stratified 70/10/20 split over source nodes with a known label.
///
/// Per class of size `n`, validation gets `floor(n/10)`, sanity gets
/// `floor(n/5)` and the remainder goes to training. Classes with fewer than
/// three nodes are placed wholly in training.
pub fn split_source(graph: &LabeledGraph, known_count: usize, seed: u64) -> SplitIndices {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in graph.labels.iter().enumerate() {
        if let Some(c) = *l {
            if c < known_count {
                by_class.entry(c).or_default().push(i);
            }
        }
    }
    let mut rng = stream(seed, Stream::Split);
    let mut split = SplitIndices::default();
    for (class, mut nodes) in by_class {
        if nodes.len() < 3 {
            log::warn!(
                "class {class} has {} labeled source nodes; using all for training",
                nodes.len()
            );
            split.train.extend(nodes);
            continue;
        }
        nodes.shuffle(&mut rng);
        let n_valid = nodes.len() / 10;
        let n_sanity = nodes.len() / 5;
        split.valid.extend_from_slice(&nodes[..n_valid]);
        split
            .sanity
            .extend_from_slice(&nodes[n_valid..n_valid + n_sanity]);
        split.train.extend_from_slice(&nodes[n_valid + n_sanity..]);
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.sanity.sort_unstable();
    split
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with_labels(labels: Vec<Option<usize>>, classes: usize) -> LabeledGraph {
        let n = labels.len();
        let adj = CsrAdjacency::from_edges(n, []).unwrap();
        LabeledGraph::new(adj, DenseMatrix::ones(n, 1), labels, classes).unwrap()
    }

    #[test]
    fn unknown_classes_collapse() {
        let g = graph_with_labels((0..5).map(Some).collect(), 5);
        let r = relabel_openset(&g, &[0, 1, 2]).unwrap();
        assert_eq!(
            r.labels,
            vec![Some(0), Some(1), Some(2), Some(3), Some(3)]
        );
        assert_eq!(r.class_count, 4);
    }

    #[test]
    fn all_known_is_identity() {
        let g = graph_with_labels((0..4).map(Some).collect(), 4);
        let r = relabel_openset(&g, &[0, 1, 2, 3]).unwrap();
        assert_eq!(r.labels, g.labels);
    }

    #[test]
    fn single_known_class_remaps_to_zero() {
        let g = graph_with_labels(vec![Some(2), Some(0), None], 3);
        let r = relabel_openset(&g, &[2]).unwrap();
        assert_eq!(r.labels, vec![Some(0), Some(1), None]);
    }

    #[test]
    fn empty_known_set_rejected() {
        let g = graph_with_labels(vec![Some(0)], 1);
        assert!(relabel_openset(&g, &[]).is_err());
    }

    #[test]
    fn split_proportions() {
        let g = graph_with_labels(vec![Some(0); 100], 1);
        let s = split_source(&g, 1, 3);
        assert_eq!((s.train.len(), s.valid.len(), s.sanity.len()), (70, 10, 20));

        let g = graph_with_labels(vec![Some(0); 10], 1);
        let s = split_source(&g, 1, 3);
        assert_eq!((s.train.len(), s.valid.len(), s.sanity.len()), (7, 1, 2));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let labels = (0..57).map(|i| Some(i % 3)).collect();
        let g = graph_with_labels(labels, 3);
        let a = split_source(&g, 3, 11);
        assert_eq!(a, split_source(&g, 3, 11));
        let mut all: Vec<usize> = a
            .train
            .iter()
            .chain(&a.valid)
            .chain(&a.sanity)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_class_goes_to_train() {
        let g = graph_with_labels(vec![Some(0), Some(0), Some(1), Some(1), Some(1)], 2);
        let s = split_source(&g, 2, 0);
        assert!(s.train.contains(&0) && s.train.contains(&1));
    }

    #[test]
    fn split_ignores_unknown_and_unlabeled() {
        let g = graph_with_labels(vec![Some(0), Some(0), Some(0), Some(1), None], 2);
        let s = split_source(&g, 1, 0);
        assert_eq!(s.train.len() + s.valid.len() + s.sanity.len(), 3);
    }
}
