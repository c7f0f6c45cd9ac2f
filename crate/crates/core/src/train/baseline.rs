//! Source-only GCN reference, written against the tape directly.

use std::sync::Arc;

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::graph::{split_source, CsrAdjacency, DomainPair};
use crate::model::{Activation, GraphRtaModel};
use crate::tensor::{DenseMatrix, NodeId, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct PlainGcnRun {
    pub acc_val: Vec<f64>,
    pub cls: Vec<f64>,
    /// Epoch with the best validation accuracy (earliest on ties).
    pub selected_epoch: usize,
    pub target_predictions: Vec<usize>,
}

/// Parameters: GCN weights, then the `k`-way and single unknown heads.
struct Params {
    layers: Vec<DenseMatrix>,
    known: DenseMatrix,
    unknown: DenseMatrix,
    activation: Activation,
}

impl Params {
    fn forward(&self, tape: &mut Tape, adj: &Arc<CsrAdjacency>, x: &DenseMatrix) -> Result<(Vec<NodeId>, NodeId)> {
        let mut ids = Vec::new();
        let mut z = tape.leaf(x.clone());
        for (l, w) in self.layers.iter().enumerate() {
            let w_id = tape.leaf(w.clone());
            ids.push(w_id);
            let h = if w.cols() <= tape.value(z).cols() {
                let zw = tape.matmul(z, w_id)?;
                tape.spmm(adj, zw)?
            } else {
                let az = tape.spmm(adj, z)?;
                tape.matmul(az, w_id)?
            };
            z = if l + 1 < self.layers.len() {
                match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::LeakyRelu(s) => tape.leaky_relu(h, s),
                }
            } else {
                h
            };
        }
        let k = tape.leaf(self.known.clone());
        let u = tape.leaf(self.unknown.clone());
        ids.extend([k, u]);
        Ok((ids, z))
    }

    fn logits(&self, tape: &mut Tape, ids: &[NodeId], z: NodeId) -> Result<NodeId> {
        let n = ids.len();
        let a = tape.matmul(z, ids[n - 2])?;
        let b = tape.matmul(z, ids[n - 1])?;
        tape.concat_cols(a, b)
    }

    fn predict(&self, adj: &Arc<CsrAdjacency>, x: &DenseMatrix) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let (ids, z) = self.forward(&mut tape, adj, x)?;
        let logits = self.logits(&mut tape, &ids, z)?;
        Ok(tape.value(logits).argmax_rows())
    }
}

/// Trains a plain GCN with cross-entropy on the labeled source split,
/// starting from the same initial weights as the full model for `config.seed`.
pub fn train_plain_gcn(pair: &DomainPair, config: &TrainConfig) -> Result<PlainGcnRun> {
    let k = pair.known_count;
    let split = split_source(&pair.source, k, config.seed);
    if split.train.is_empty() {
        return Err(Error::invalid("source graph has no labeled training nodes"));
    }
    let init = GraphRtaModel::init(
        config.dims(pair.source.feature_dim(), k),
        config.activation,
        config.seed,
    )?;
    let mut p = Params {
        layers: init.extractor.layers.iter().map(|l| l.weight.clone()).collect(),
        known: init.classifier.known_head,
        unknown: init.classifier.unknown_head,
        activation: config.activation,
    };
    let mut onehot = DenseMatrix::zeros(split.train.len(), k + 1);
    for (r, &i) in split.train.iter().enumerate() {
        onehot.set(r, pair.source.labels[i].expect("labeled"), 1.0);
    }
    let idx = Arc::new(split.train.clone());
    let scale = 1.0 / split.train.len() as f64;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut run = PlainGcnRun {
        acc_val: Vec::new(),
        cls: Vec::new(),
        selected_epoch: 0,
        target_predictions: Vec::new(),
    };
    let mut best = f64::NEG_INFINITY;
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let (ids, z) = p.forward(&mut tape, &pair.source.adjacency, &pair.source.features)?;
        let zt = tape.gather_rows(z, idx.clone())?;
        let logits = p.logits(&mut tape, &ids, zt)?;
        let ls = tape.log_softmax_rows(logits)?;
        let y = tape.leaf(onehot.clone());
        let prod = tape.mul(ls, y)?;
        let sum = tape.sum_all(prod);
        let loss = tape.scale(sum, -scale);
        run.cls.push(tape.value(loss).item());
        tape.backward(loss)?;
        let grads: Vec<&DenseMatrix> = ids.iter().map(|&i| tape.grad(i)).collect();
        let mut params: Vec<&mut DenseMatrix> = p.layers.iter_mut().collect();
        params.push(&mut p.known);
        params.push(&mut p.unknown);
        opt.step(&mut params, &grads);

        let preds = p.predict(&pair.source.adjacency, &pair.source.features)?;
        let hits = split
            .valid
            .iter()
            .filter(|&&i| pair.source.labels[i] == Some(preds[i]))
            .count();
        let acc = if split.valid.is_empty() {
            0.0
        } else {
            hits as f64 / split.valid.len() as f64
        };
        run.acc_val.push(acc);
        if acc > best {
            best = acc;
            run.selected_epoch = epoch;
            run.target_predictions = p.predict(&pair.target.adjacency, &pair.target.features)?;
        }
    }
    if config.epochs == 0 {
        run.target_predictions = p.predict(&pair.target.adjacency, &pair.target.features)?;
    }
    Ok(run)
}
