//! Versioned little-endian binary snapshot of a trained run.
//!
//! Layout after the 8-byte magic `GRTACKPT` and a `u32` version:
//! seed `u64`; activation tag `u8` (0 relu, 1 leaky) and slope `f64`;
//! GRL scale `f64`; prediction rule tag `u8` (0 argmax, 1 threshold) and
//! threshold `f64`; input width, layer count, each layer width, known class
//! count and discriminator width as `u64`; then matrices as `rows u64,
//! cols u64, values f64…` in the order weights, masks, known head, unknown
//! head, discriminator hidden, discriminator output, feature delta; finally
//! the flip count and `(u, v)` pairs as `u64`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::eval::{evaluate_predictions, mmd_diagnostic, predict, EvalReport, PredictionRule};
use crate::graph::{CsrAdjacency, LabeledGraph};
use crate::model::{
    Activation, DomainDiscriminator, FeatureExtractor, GcnLayer, GraphRtaModel, ModelDims,
    OpenSetClassifier,
};
use crate::rewire::{commit_flips, Pair};
use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"GRTACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub model: GraphRtaModel,
    pub feature_delta: DenseMatrix,
    /// Flips applied to the original target graph.
    pub flips: Vec<Pair>,
    pub rule: PredictionRule,
}

/// Target-side outputs of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetView {
    pub embeddings: DenseMatrix,
    pub logits: DenseMatrix,
    pub predictions: Vec<usize>,
}

impl Checkpoint {
    pub fn target_adjacency(&self, base: &CsrAdjacency) -> Result<CsrAdjacency> {
        if self.flips.is_empty() {
            return Ok(base.clone());
        }
        commit_flips(base, &self.flips)
    }

    /// Runs the model on the reprogrammed target graph.
    pub fn infer(&self, target: &LabeledGraph) -> Result<TargetView> {
        let want = (self.feature_delta.rows(), self.model.dims.input);
        let have = (target.node_count(), target.feature_dim());
        if want != have {
            return Err(Error::Dimension {
                op: "checkpoint vs target graph (nodes, features)",
                left: want,
                right: have,
            });
        }
        let adj = Arc::new(self.target_adjacency(&target.adjacency)?);
        let mut x = target.features.clone();
        x.add_assign(&self.feature_delta);
        let (embeddings, logits) = self.model.infer(&adj, &x)?;
        let predictions = predict(&logits, self.rule)?;
        Ok(TargetView {
            embeddings,
            logits,
            predictions,
        })
    }

    pub fn evaluate(&self, target: &LabeledGraph) -> Result<EvalReport> {
        let view = self.infer(target)?;
        evaluate_predictions(&view.predictions, &target.labels, self.model.dims.known_count)
    }

    /// Like [`Checkpoint::evaluate`], with the known/unknown MMD of the
    /// untrained model on the original graph (`mmd_before`) and of this
    /// snapshot on the reprogrammed graph (`mmd_after`). The untrained model
    /// is rebuilt from the stored seed.
    pub fn evaluate_with_mmd(&self, target: &LabeledGraph) -> Result<EvalReport> {
        let view = self.infer(target)?;
        let k = self.model.dims.known_count;
        let mut report = evaluate_predictions(&view.predictions, &target.labels, k)?;
        let initial = GraphRtaModel::init(self.model.dims.clone(), self.model.extractor.activation, self.seed)?;
        let (before, _) = initial.infer(&target.adjacency, &target.features)?;
        let (b, a) = mmd_diagnostic(&before, &view.embeddings, &target.labels, k);
        report.mmd_before = b;
        report.mmd_after = a;
        Ok(report)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.u64(self.seed);
        match self.model.extractor.activation {
            Activation::Relu => {
                w.0.push(0);
                w.f64(0.0);
            }
            Activation::LeakyRelu(s) => {
                w.0.push(1);
                w.f64(s);
            }
        }
        w.f64(self.model.discriminator.grl_scale);
        match self.rule {
            PredictionRule::Argmax => {
                w.0.push(0);
                w.f64(0.0);
            }
            PredictionRule::EntropyThreshold(t) => {
                w.0.push(1);
                w.f64(t);
            }
        }
        let dims = &self.model.dims;
        w.u64(dims.input as u64);
        w.u64(dims.layers.len() as u64);
        for &l in &dims.layers {
            w.u64(l as u64);
        }
        w.u64(dims.known_count as u64);
        w.u64(dims.disc_hidden as u64);
        for l in &self.model.extractor.layers {
            w.matrix(&l.weight);
        }
        for l in &self.model.extractor.layers {
            w.matrix(&l.mask);
        }
        w.matrix(&self.model.classifier.known_head);
        w.matrix(&self.model.classifier.unknown_head);
        w.matrix(&self.model.discriminator.hidden);
        w.matrix(&self.model.discriminator.output);
        w.matrix(&self.feature_delta);
        w.u64(self.flips.len() as u64);
        for &(u, v) in &self.flips {
            w.u64(u as u64);
            w.u64(v as u64);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::invalid("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let seed = r.u64()?;
        let activation = match (r.u8()?, r.f64()?) {
            (0, _) => Activation::Relu,
            (1, s) => Activation::LeakyRelu(s),
            (t, _) => return Err(Error::invalid(format!("unknown activation tag {t}"))),
        };
        let grl_scale = r.f64()?;
        let rule = match (r.u8()?, r.f64()?) {
            (0, _) => PredictionRule::Argmax,
            (1, t) => PredictionRule::EntropyThreshold(t),
            (t, _) => return Err(Error::invalid(format!("unknown prediction rule tag {t}"))),
        };
        let input = r.usize()?;
        let count = r.usize()?;
        if count == 0 || count > 1024 {
            return Err(Error::invalid(format!("implausible layer count {count}")));
        }
        let layers = (0..count).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let dims = ModelDims {
            input,
            layers,
            known_count: r.usize()?,
            disc_hidden: r.usize()?,
        };
        dims.validate()?;
        let mut shapes = Vec::new();
        let mut fan_in = dims.input;
        for &l in &dims.layers {
            shapes.push((fan_in, l));
            fan_in = l;
        }
        let weights = shapes
            .iter()
            .map(|&s| r.matrix(s))
            .collect::<Result<Vec<_>>>()?;
        let masks = shapes
            .iter()
            .map(|&s| r.matrix(s))
            .collect::<Result<Vec<_>>>()?;
        let d = dims.embedding();
        let known_head = r.matrix((d, dims.known_count))?;
        let unknown_head = r.matrix((d, 1))?;
        let hidden = r.matrix((d, dims.disc_hidden))?;
        let output = r.matrix((dims.disc_hidden, 3))?;
        let feature_delta = r.any_matrix()?;
        if feature_delta.cols() != dims.input {
            return Err(Error::Dimension {
                op: "checkpoint feature delta",
                left: feature_delta.shape(),
                right: (feature_delta.rows(), dims.input),
            });
        }
        let flip_count = r.usize()?;
        let mut flips = Vec::with_capacity(flip_count.min(1 << 20));
        for _ in 0..flip_count {
            flips.push((r.usize()?, r.usize()?));
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            seed,
            model: GraphRtaModel {
                dims,
                extractor: FeatureExtractor {
                    layers: weights
                        .into_iter()
                        .zip(masks)
                        .map(|(weight, mask)| GcnLayer { weight, mask })
                        .collect(),
                    activation,
                },
                classifier: OpenSetClassifier {
                    known_head,
                    unknown_head,
                },
                discriminator: DomainDiscriminator {
                    hidden,
                    output,
                    grl_scale,
                },
            },
            feature_delta,
            flips,
            rule,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix(&mut self, m: &DenseMatrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &v in m.values() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::invalid("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::invalid("value exceeds usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn any_matrix(&mut self) -> Result<DenseMatrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::invalid("truncated checkpoint"))?;
        let values = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_vec(rows, cols, values)
    }

    fn matrix(&mut self, shape: (usize, usize)) -> Result<DenseMatrix> {
        let m = self.any_matrix()?;
        if m.shape() != shape {
            return Err(Error::Dimension {
                op: "checkpoint matrix",
                left: m.shape(),
                right: shape,
            });
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let dims = ModelDims {
            input: 3,
            layers: vec![4, 2],
            known_count: 2,
            disc_hidden: 3,
        };
        Checkpoint {
            seed: 9,
            model: GraphRtaModel::init(dims, Activation::LeakyRelu(0.2), 9).unwrap(),
            feature_delta: DenseMatrix::filled(5, 3, 0.125),
            flips: vec![(0, 4), (1, 2)],
            rule: PredictionRule::EntropyThreshold(0.3),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
