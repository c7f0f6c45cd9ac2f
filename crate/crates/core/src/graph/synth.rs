//! Stochastic-block-model domain pairs with controllable shift.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CsrAdjacency, DomainPair, LabeledGraph};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::DenseMatrix;

/// How the target domain departs from the source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// Added to the intra-class edge probability in the target.
    pub p_intra_delta: f64,
    /// Added to the inter-class edge probability in the target.
    pub p_inter_delta: f64,
    /// Angle (radians) of the plane rotations applied to target class means.
    pub mean_rotation: f64,
    /// Magnitude of a common offset added to every target class mean.
    pub mean_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub source_nodes: usize,
    pub target_nodes: usize,
    pub class_count: usize,
    pub known_count: usize,
    pub feature_dim: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Standard deviation of class-mean entries.
    #[serde(default = "one")]
    pub mean_scale: f64,
    /// Per-entry Gaussian feature noise.
    #[serde(default = "one")]
    pub noise: f64,
    #[serde(default)]
    pub shift: ShiftSpec,
}

fn one() -> f64 {
    1.0
}

impl GeneratorSpec {
    /// All violated constraints, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.class_count == 0 {
            out.push("class_count must be positive".to_string());
        }
        if self.known_count == 0 || self.known_count >= self.class_count {
            out.push(format!(
                "known_count ({}) must be in 1..class_count ({})",
                self.known_count, self.class_count
            ));
        }
        if self.feature_dim == 0 {
            out.push("feature_dim must be positive".to_string());
        }
        if self.source_nodes == 0 || self.target_nodes == 0 {
            out.push("node counts must be positive".to_string());
        }
        let probs = [
            ("p_intra", self.p_intra),
            ("p_inter", self.p_inter),
            ("p_intra + p_intra_delta", self.p_intra + self.shift.p_intra_delta),
            ("p_inter + p_inter_delta", self.p_inter + self.shift.p_inter_delta),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.noise < 0.0 || self.mean_scale < 0.0 {
            out.push("noise and mean_scale must be nonnegative".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

fn normal_vec<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn sample_sbm<R: Rng>(rng: &mut R, classes: &[usize], p_intra: f64, p_inter: f64) -> Vec<(usize, usize)> {
    let n = classes.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if classes[u] == classes[v] { p_intra } else { p_inter };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    edges
}

fn sample_domain<R: Rng>(
    rng: &mut R,
    n: usize,
    classes_present: usize,
    means: &[Vec<f64>],
    noise: f64,
    p_intra: f64,
    p_inter: f64,
    class_count: usize,
) -> Result<LabeledGraph> {
    let mut classes: Vec<usize> = (0..n).map(|i| i * classes_present / n).collect();
    classes.shuffle(rng);
    let edges = sample_sbm(rng, &classes, p_intra, p_inter);
    let f = means[0].len();
    let mut features = DenseMatrix::zeros(n, f);
    for (i, &c) in classes.iter().enumerate() {
        let row = features.row_mut(i);
        for (x, m) in row.iter_mut().zip(&means[c]) {
            *x = m + noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
    }
    let adjacency = CsrAdjacency::from_edges(n, edges)?;
    LabeledGraph::new(adjacency, features, classes.into_iter().map(Some).collect(), class_count)
}

/// Raw source and target graphs with original class ids. The source holds
/// classes `0..known_count`; the target holds all `class_count` classes.
pub fn generate_raw(spec: &GeneratorSpec, seed: u64) -> Result<(LabeledGraph, LabeledGraph)> {
    spec.validate()?;
    let mut rng = stream(seed, Stream::Generate);
    let f = spec.feature_dim;
    let means: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| normal_vec(&mut rng, f, spec.mean_scale))
        .collect();
    let offset = normal_vec(&mut rng, f, 1.0);
    let (cos, sin) = (spec.shift.mean_rotation.cos(), spec.shift.mean_rotation.sin());
    let target_means: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let mut t = m.clone();
            for k in (0..f.saturating_sub(1)).step_by(2) {
                let (a, b) = (m[k], m[k + 1]);
                t[k] = cos * a - sin * b;
                t[k + 1] = sin * a + cos * b;
            }
            for (x, o) in t.iter_mut().zip(&offset) {
                *x += spec.shift.mean_shift * o;
            }
            t
        })
        .collect();

    let source = sample_domain(
        &mut rng,
        spec.source_nodes,
        spec.known_count,
        &means,
        spec.noise,
        spec.p_intra,
        spec.p_inter,
        spec.class_count,
    )?;
    let target = sample_domain(
        &mut rng,
        spec.target_nodes,
        spec.class_count,
        &target_means,
        spec.noise,
        spec.p_intra + spec.shift.p_intra_delta,
        spec.p_inter + spec.shift.p_inter_delta,
        spec.class_count,
    )?;
    Ok((source, target))
}

/// Generated pair relabeled so that classes `0..known_count` are known and
/// the rest collapse into the unknown id.
pub fn generate_synthetic_pair(spec: &GeneratorSpec, seed: u64) -> Result<DomainPair> {
    let (source, target) = generate_raw(spec, seed)?;
    let known: Vec<usize> = (0..spec.known_count).collect();
    DomainPair::from_raw(&source, &target, &known)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GeneratorSpec {
        GeneratorSpec {
            source_nodes: 200,
            target_nodes: 200,
            class_count: 5,
            known_count: 3,
            feature_dim: 8,
            p_intra: 0.1,
            p_inter: 0.01,
            mean_scale: 1.0,
            noise: 0.5,
            shift: ShiftSpec::default(),
        }
    }

    fn class_means(g: &LabeledGraph, class: usize) -> Vec<f64> {
        let rows: Vec<usize> = (0..g.node_count())
            .filter(|&i| g.labels[i] == Some(class))
            .collect();
        let mut m = vec![0.0; g.feature_dim()];
        for &r in &rows {
            for (a, b) in m.iter_mut().zip(g.features.row(r)) {
                *a += b / rows.len() as f64;
            }
        }
        m
    }

    #[test]
    fn zero_shift_gives_matching_class_means() {
        let mut s = spec();
        s.noise = 0.0;
        let (src, tgt) = generate_raw(&s, 5).unwrap();
        for c in 0..s.known_count {
            for (a, b) in class_means(&src, c).iter().zip(class_means(&tgt, c)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relabeled_target_labels_within_unknown_id() {
        let pair = generate_synthetic_pair(&spec(), 1).unwrap();
        assert!(pair.target.labels.iter().flatten().all(|&l| l <= 3));
        assert!(pair.target.labels.iter().flatten().any(|&l| l == 3));
        assert!(pair.source.labels.iter().flatten().all(|&l| l < 3));
    }

    #[test]
    fn invalid_specs_are_enumerated() {
        let mut s = spec();
        s.known_count = 5;
        s.p_intra = 1.5;
        let problems = s.problems();
        assert_eq!(problems.len(), 3, "{problems:?}");
        assert!(generate_raw(&s, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, _) = generate_raw(&spec(), 9).unwrap();
        let (b, _) = generate_raw(&spec(), 9).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(*a.adjacency, *b.adjacency);
    }
}
