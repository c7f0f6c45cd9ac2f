//! Model reprogramming: per-layer binary masks from mask-gradient magnitudes.

use crate::error::{Error, Result};
use crate::model::{BoundModel, GraphRtaModel};
use crate::tensor::{DenseMatrix, Tape};

/// Per-layer binary masks with the sparsity they were built at.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<DenseMatrix>,
    pub sparsity: f64,
    pub last_scores: Vec<DenseMatrix>,
}

impl MaskSet {
    /// Masks of all ones matching the model's layer shapes.
    pub fn dense(model: &GraphRtaModel) -> Self {
        let masks: Vec<DenseMatrix> = model
            .extractor
            .layers
            .iter()
            .map(|l| DenseMatrix::ones(l.weight.rows(), l.weight.cols()))
            .collect();
        MaskSet {
            last_scores: masks
                .iter()
                .map(|m| DenseMatrix::zeros(m.rows(), m.cols()))
                .collect(),
            masks,
            sparsity: 0.0,
        }
    }

    /// Fraction of zero entries across all layers.
    pub fn zero_fraction(&self) -> f64 {
        let total: usize = self.masks.iter().map(DenseMatrix::len).sum();
        let zeros: usize = self.masks.iter().map(DenseMatrix::count_zeros).sum();
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }
}

/// Number of entries zeroed out of `k` at sparsity `rho`.
pub fn zero_count(rho: f64, k: usize) -> usize {
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    ((rho * k as f64) + 1e-9).floor().min(k as f64) as usize
}

/// `|∂L/∂M^l|` for every layer, read from a tape on which `backward` has run.
pub fn score_importance(tape: &Tape, bound: &BoundModel) -> Result<Vec<DenseMatrix>> {
    if !tape.has_gradients() {
        return Err(Error::State(
            "importance scoring needs a completed backward pass".into(),
        ));
    }
    Ok(bound
        .masks
        .iter()
        .map(|&m| tape.grad(m).map(f64::abs))
        .collect())
}

/// Zeroes the `floor(rho·k)` lowest scores of each layer. Ties go to the lowest
/// flat index first, so the zero set grows monotonically with `rho`.
pub fn build_masks(scores: Vec<DenseMatrix>, rho: f64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("sparsity {rho} outside [0, 1]")));
    }
    let masks = scores
        .iter()
        .map(|s| {
            let vals = s.values();
            let mut order: Vec<usize> = (0..vals.len()).collect();
            order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
            let mut mask = DenseMatrix::ones(s.rows(), s.cols());
            for &i in &order[..zero_count(rho, vals.len())] {
                mask.values_mut()[i] = 0.0;
            }
            mask
        })
        .collect();
    Ok(MaskSet {
        masks,
        sparsity: rho,
        last_scores: scores,
    })
}

/// Installs masks on the extractor; weights are left untouched.
pub fn apply_masks(model: &mut GraphRtaModel, set: &MaskSet) -> Result<()> {
    if set.masks.len() != model.extractor.layers.len() {
        return Err(Error::invalid(format!(
            "{} masks for {} layers",
            set.masks.len(),
            model.extractor.layers.len()
        )));
    }
    for (layer, mask) in model.extractor.layers.iter().zip(&set.masks) {
        if layer.weight.shape() != mask.shape() {
            return Err(Error::Dimension {
                op: "apply_masks",
                left: layer.weight.shape(),
                right: mask.shape(),
            });
        }
    }
    for (layer, mask) in model.extractor.layers.iter_mut().zip(&set.masks) {
        layer.mask = mask.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelDims};

    fn row(v: &[f64]) -> DenseMatrix {
        DenseMatrix::from_rows(&[v])
    }

    #[test]
    fn rho_zero_keeps_everything() {
        let set = build_masks(vec![row(&[3.0, 1.0, 2.0])], 0.0).unwrap();
        assert_eq!(set.masks[0], DenseMatrix::ones(1, 3));
    }

    #[test]
    fn lowest_half_zeroed() {
        let set = build_masks(vec![row(&[1.0, 2.0, 3.0, 4.0])], 0.5).unwrap();
        assert_eq!(set.masks[0].values(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn ties_break_by_flat_index() {
        let set = build_masks(vec![DenseMatrix::filled(2, 4, 0.7)], 0.25).unwrap();
        assert_eq!(
            set.masks[0].values(),
            &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn out_of_range_rho_rejected() {
        assert!(build_masks(vec![row(&[1.0])], 1.5).is_err());
        assert!(build_masks(vec![row(&[1.0])], -0.1).is_err());
    }

    #[test]
    fn zero_count_absorbs_rounding() {
        assert_eq!(zero_count(0.29, 100), 29);
        assert_eq!(zero_count(0.9, 10), 9);
        assert_eq!(zero_count(1.0, 7), 7);
        assert_eq!(zero_count(0.5, 3), 1);
    }

    #[test]
    fn scoring_requires_backward() {
        let m = GraphRtaModel::init(
            ModelDims {
                input: 2,
                layers: vec![2],
                known_count: 2,
                disc_hidden: 2,
            },
            Activation::Relu,
            0,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape).unwrap();
        assert!(matches!(
            score_importance(&tape, &bound),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn apply_is_idempotent_and_checks_shapes() {
        let mut m = GraphRtaModel::init(
            ModelDims {
                input: 2,
                layers: vec![2],
                known_count: 2,
                disc_hidden: 2,
            },
            Activation::Relu,
            0,
        )
        .unwrap();
        let set = build_masks(vec![row(&[4.0, 3.0, 2.0, 1.0]).clone()], 0.5).unwrap();
        assert!(apply_masks(&mut m, &set).is_err());
        let set = build_masks(
            vec![DenseMatrix::from_rows(&[[4.0, 3.0], [2.0, 1.0]])],
            0.5,
        )
        .unwrap();
        let w = m.extractor.layers[0].weight.clone();
        apply_masks(&mut m, &set).unwrap();
        let once = m.clone();
        apply_masks(&mut m, &set).unwrap();
        assert_eq!(m, once);
        assert_eq!(m.extractor.layers[0].weight, w);
        assert_eq!(m.extractor.layers[0].mask.values(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
