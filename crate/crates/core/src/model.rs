//! Masked GCN feature extractor, unknown-augmented classifier and the
//! three-way domain discriminator.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CsrAdjacency;
use crate::rng::{stream, Stream};
use crate::tensor::{DenseMatrix, NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
        }
    }
}

/// Layer sizes for the whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    /// Output width of each GCN layer; the last entry is the embedding size.
    pub layers: Vec<usize>,
    pub known_count: usize,
    pub disc_hidden: usize,
}

impl ModelDims {
    pub fn embedding(&self) -> usize {
        *self.layers.last().expect("validated dims")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0
            || self.layers.is_empty()
            || self.layers.contains(&0)
            || self.known_count == 0
            || self.disc_hidden == 0
        {
            return Err(Error::invalid(format!("model dimensions must be nonzero: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: DenseMatrix,
    /// Binary mask with the weight's shape.
    pub mask: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<GcnLayer>,
    pub activation: Activation,
}

/// `[φᵀz, ŵᵀz]`: known-class logits plus one unknown logit.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetClassifier {
    pub known_head: DenseMatrix,
    pub unknown_head: DenseMatrix,
}

/// Two-layer perceptron over {source, target-known, target-unknown}.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDiscriminator {
    pub hidden: DenseMatrix,
    pub output: DenseMatrix,
    pub grl_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphRtaModel {
    pub dims: ModelDims,
    pub extractor: FeatureExtractor,
    pub classifier: OpenSetClassifier,
    pub discriminator: DomainDiscriminator,
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> DenseMatrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    DenseMatrix::from_vec(fan_in, fan_out, data).expect("glorot shape")
}

impl GraphRtaModel {
    /// Glorot-uniform weights drawn from the seed's init stream; masks all ones.
    pub fn init(dims: ModelDims, activation: Activation, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut layers = Vec::with_capacity(dims.layers.len());
        let mut fan_in = dims.input;
        for &out in &dims.layers {
            layers.push(GcnLayer {
                weight: glorot(&mut rng, fan_in, out),
                mask: DenseMatrix::ones(fan_in, out),
            });
            fan_in = out;
        }
        let d = dims.embedding();
        let classifier = OpenSetClassifier {
            known_head: glorot(&mut rng, d, dims.known_count),
            unknown_head: glorot(&mut rng, d, 1),
        };
        let discriminator = DomainDiscriminator {
            hidden: glorot(&mut rng, d, dims.disc_hidden),
            output: glorot(&mut rng, dims.disc_hidden, 3),
            grl_scale: 1.0,
        };
        Ok(GraphRtaModel {
            dims,
            extractor: FeatureExtractor { layers, activation },
            classifier,
            discriminator,
        })
    }

    /// Trainable matrices in a fixed order shared with [`BoundModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = self
            .extractor
            .layers
            .iter_mut()
            .map(|l| &mut l.weight)
            .collect();
        out.push(&mut self.classifier.known_head);
        out.push(&mut self.classifier.unknown_head);
        out.push(&mut self.discriminator.hidden);
        out.push(&mut self.discriminator.output);
        out
    }

    /// Embeddings and `k + 1` logits for one graph, without gradients.
    pub fn infer(
        &self,
        adj: &Arc<CsrAdjacency>,
        features: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.leaf(features.clone());
        let z = bound.forward_extractor(&mut tape, adj, x)?;
        let logits = bound.classify(&mut tape, z)?;
        Ok((tape.value(z).clone(), tape.value(logits).clone()))
    }

    pub fn masks(&self) -> Vec<&DenseMatrix> {
        self.extractor.layers.iter().map(|l| &l.mask).collect()
    }

    /// Records every parameter and mask as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        self.bind_with_masks(tape, self.masks().into_iter().cloned().collect())
    }

    /// Like [`bind`](Self::bind) but with caller-supplied masks, e.g. all ones
    /// while scoring importance.
    pub fn bind_with_masks(&self, tape: &mut Tape, masks: Vec<DenseMatrix>) -> Result<BoundModel> {
        if masks.len() != self.extractor.layers.len() {
            return Err(Error::invalid(format!(
                "{} masks for {} layers",
                masks.len(),
                self.extractor.layers.len()
            )));
        }
        let mut weights = Vec::new();
        let mut mask_ids = Vec::new();
        let mut effective = Vec::new();
        for (layer, mask) in self.extractor.layers.iter().zip(masks) {
            let w = tape.leaf(layer.weight.clone());
            let m = tape.leaf(mask);
            effective.push(tape.mul(w, m)?);
            weights.push(w);
            mask_ids.push(m);
        }
        Ok(BoundModel {
            weights,
            masks: mask_ids,
            effective,
            known_head: tape.leaf(self.classifier.known_head.clone()),
            unknown_head: tape.leaf(self.classifier.unknown_head.clone()),
            disc_hidden: tape.leaf(self.discriminator.hidden.clone()),
            disc_output: tape.leaf(self.discriminator.output.clone()),
            activation: self.extractor.activation,
            grl_scale: self.discriminator.grl_scale,
        })
    }
}

/// Tape handles for one model snapshot.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub weights: Vec<NodeId>,
    pub masks: Vec<NodeId>,
    effective: Vec<NodeId>,
    pub known_head: NodeId,
    pub unknown_head: NodeId,
    pub disc_hidden: NodeId,
    pub disc_output: NodeId,
    pub activation: Activation,
    pub grl_scale: f64,
}

impl BoundModel {
    /// Parameter handles in the order of [`GraphRtaModel::params_mut`].
    pub fn params(&self) -> Vec<NodeId> {
        let mut out = self.weights.clone();
        out.extend([
            self.known_head,
            self.unknown_head,
            self.disc_hidden,
            self.disc_output,
        ]);
        out
    }

    /// `Z^l = σ(Â Z^{l-1} (W^l ⊙ M^l))`, with the last layer left linear.
    pub fn forward_extractor(
        &self,
        tape: &mut Tape,
        adj: &Arc<CsrAdjacency>,
        features: NodeId,
    ) -> Result<NodeId> {
        let mut z = features;
        let last = self.effective.len() - 1;
        for (l, &w) in self.effective.iter().enumerate() {
            let (zr, zc) = tape.value(z).shape();
            let (wr, wc) = tape.value(w).shape();
            if zc != wr {
                return Err(Error::Dimension {
                    op: "gcn layer",
                    left: (zr, zc),
                    right: (wr, wc),
                });
            }
            // Â (Z W) equals (Â Z) W; propagate the narrower side.
            let h = if wc <= zc {
                let zw = tape.matmul(z, w)?;
                tape.spmm(adj, zw)?
            } else {
                let az = tape.spmm(adj, z)?;
                tape.matmul(az, w)?
            };
            z = if l < last { self.activation.apply(tape, h) } else { h };
        }
        Ok(z)
    }

    /// `n × (k+1)` logits: known heads followed by the unknown head.
    pub fn classify(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let known = tape.matmul(z, self.known_head)?;
        let unknown = tape.matmul(z, self.unknown_head)?;
        tape.concat_cols(known, unknown)
    }

    /// `n × 3` domain logits. With `reverse` the input passes through a
    /// gradient-reversal node scaled by `grl_scale`.
    pub fn discriminate(&self, tape: &mut Tape, z: NodeId, reverse: bool) -> Result<NodeId> {
        let input = if reverse {
            tape.grad_reverse(z, self.grl_scale)
        } else {
            z
        };
        let h = tape.matmul(input, self.disc_hidden)?;
        let h = tape.relu(h);
        tape.matmul(h, self.disc_output)
    }
}
