use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{SelectBy, Separation, Settings, TrainConfig};
use super::loss::{adv_loss, cls_loss, ent_loss, EntDomainTerm, LossBreakdown};
use super::optim::AdamW;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{h_score, known_columns, predict};
use crate::graph::{split_source, CsrAdjacency, DomainPair, SplitIndices};
use crate::model::{BoundModel, GraphRtaModel};
use crate::prune::{apply_masks, build_masks, score_importance, MaskSet};
use crate::rewire::{
    apply_feature_delta, score_edge_flips, select_flips, AdjacencyGradient, CandidatePool,
    EdgeEditSet, EditRecord, Pair,
};
use crate::rng::{stream, Stream};
use crate::separation::{compute_entropy, fit_beta_mixture_em, BetaMixture, PosteriorAssignment};
use crate::tensor::{DenseMatrix, NodeId, Tape};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: String,
    pub adv: f64,
    pub cls: f64,
    pub ent: f64,
    pub total: f64,
    pub acc_val: f64,
    pub h_val: f64,
    pub alpha_tk: f64,
    pub beta_tk: f64,
    pub alpha_tu: f64,
    pub beta_tu: f64,
    pub mix_tk: f64,
    pub flips_committed: usize,
    pub mask_zero_frac: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot at the selected epoch.
    pub checkpoint: Checkpoint,
    pub selected_epoch: usize,
    /// Target adjacency after the last epoch; replaying `edits` on the
    /// original target graph reproduces it.
    pub final_adjacency: CsrAdjacency,
    pub edits: Vec<EditRecord>,
    pub metrics: Vec<EpochMetrics>,
    pub settings: Settings,
    pub split: SplitIndices,
    /// Target embeddings of the untrained model on the original graph.
    pub initial_embeddings: DenseMatrix,
}

/// Scalar loss nodes of one forward pass; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub adv: Option<NodeId>,
    pub cls: NodeId,
    pub ent: Option<NodeId>,
    pub total: NodeId,
}

/// Everything the total loss needs besides the model and the two feature
/// inputs.
pub struct Objective<'a> {
    pub source_adj: &'a Arc<CsrAdjacency>,
    pub target_adj: &'a Arc<CsrAdjacency>,
    /// Labeled source rows used by the classification loss.
    pub train_idx: Arc<Vec<usize>>,
    pub train_labels: &'a [usize],
    pub posteriors: &'a PosteriorAssignment,
    pub lambda: f64,
    pub adversarial: bool,
    pub entropy: bool,
    pub ent_domain_term: EntDomainTerm,
}

impl Objective<'_> {
    /// Records `L_cls` plus the enabled adversarial and entropy terms.
    pub fn build(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        source_x: NodeId,
        target_x: NodeId,
    ) -> Result<LossNodes> {
        let zs = bound.forward_extractor(tape, self.source_adj, source_x)?;
        let zs_train = tape.gather_rows(zs, self.train_idx.clone())?;
        let logits_s = bound.classify(tape, zs_train)?;
        let cls = cls_loss(tape, logits_s, self.train_labels, self.lambda)?;
        let mut total = cls;
        let (mut adv, mut ent) = (None, None);
        if self.adversarial || self.entropy {
            let zt = bound.forward_extractor(tape, self.target_adj, target_x)?;
            if self.adversarial {
                let ds = bound.discriminate(tape, zs, true)?;
                let dt = bound.discriminate(tape, zt, true)?;
                let a = adv_loss(tape, ds, dt, self.posteriors)?;
                total = tape.add(total, a)?;
                adv = Some(a);
            }
            if self.entropy {
                let logits_t = bound.classify(tape, zt)?;
                let dt = bound.discriminate(tape, zt, false)?;
                let e = ent_loss(tape, logits_t, dt, self.posteriors, self.ent_domain_term)?;
                total = tape.add(total, e)?;
                ent = Some(e);
            }
        }
        Ok(LossNodes { adv, cls, ent, total })
    }
}

struct Trainer<'a> {
    pair: &'a DomainPair,
    cfg: &'a TrainConfig,
    s: Settings,
    split: SplitIndices,
    train_idx: Arc<Vec<usize>>,
    train_labels: Vec<usize>,
    src_adj: Arc<CsrAdjacency>,
    tgt_adj: Arc<CsrAdjacency>,
    model: GraphRtaModel,
    delta: DenseMatrix,
    mixture: BetaMixture,
    posteriors: PosteriorAssignment,
    edits: EdgeEditSet,
    log: Vec<EditRecord>,
}

/// Trains on `pair` and returns the selected snapshot with its history.
pub fn run_training(pair: &DomainPair, config: &TrainConfig) -> Result<TrainOutcome> {
    run_training_with(pair, config, |_| {})
}

/// Like [`run_training`], calling `on_epoch` after every epoch.
pub fn run_training_with(
    pair: &DomainPair,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut t = Trainer::new(pair, config)?;
    let initial_embeddings = t.model.infer(&t.tgt_adj, &pair.target.features)?.0;
    t.refresh_separation()?;

    let mut masks = MaskSet::dense(&t.model);
    let mut model_opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut delta_opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut rng = stream(config.seed, Stream::Sampling);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..config.epochs {
        t.model.discriminator.grl_scale = grl_schedule(config, epoch);
        // Model phase: graph parameters fixed.
        if t.s.rho > 0.0 {
            let ones = MaskSet::dense(&t.model).masks;
            let mut tape = Tape::new();
            let bound = t.model.bind_with_masks(&mut tape, ones)?;
            let x = tape.leaf(t.target_input());
            let nodes = t.losses(&mut tape, &bound, x)?;
            tape.backward(nodes.total)?;
            masks = build_masks(score_importance(&tape, &bound)?, t.s.rho)?;
            apply_masks(&mut t.model, &masks)?;
        }
        let mut breakdown = LossBreakdown::default();
        for _ in 0..config.model_steps {
            let mut tape = Tape::new();
            let bound = t.model.bind(&mut tape)?;
            let x = tape.leaf(t.target_input());
            let nodes = t.losses(&mut tape, &bound, x)?;
            breakdown = check_finite(&tape, &nodes, epoch)?;
            tape.backward(nodes.total)?;
            let grads: Vec<&DenseMatrix> = bound.params().into_iter().map(|p| tape.grad(p)).collect();
            model_opt.step(&mut t.model.params_mut(), &grads);
        }

        // Graph phase: model parameters fixed.
        t.refresh_separation()?;
        if t.edits.remaining() > 0 || !t.s.freeze_delta {
            t.graph_step(epoch, &mut delta_opt, &mut rng)?;
        }

        let (acc_val, h_val) = t.validation()?;
        let m = EpochMetrics {
            epoch,
            phase: "model".into(),
            adv: breakdown.adv,
            cls: breakdown.cls,
            ent: breakdown.ent,
            total: breakdown.total,
            acc_val,
            h_val,
            alpha_tk: t.mixture.alpha_tk,
            beta_tk: t.mixture.beta_tk,
            alpha_tu: t.mixture.alpha_tu,
            beta_tu: t.mixture.beta_tu,
            mix_tk: t.mixture.mix_tk,
            flips_committed: t.edits.flips.len(),
            mask_zero_frac: masks.zero_fraction(),
        };
        on_epoch(&m);
        let score = match t.s.select_by {
            SelectBy::Last => epoch as f64,
            SelectBy::ValAcc => acc_val,
            SelectBy::ValH => h_val,
        };
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, t.snapshot()));
        }
        metrics.push(m);
    }

    let (selected_epoch, checkpoint) = match best {
        Some((_, e, c)) => (e, c),
        None => (0, t.snapshot()),
    };
    Ok(TrainOutcome {
        checkpoint,
        selected_epoch,
        final_adjacency: (*t.tgt_adj).clone(),
        edits: t.log,
        metrics,
        settings: t.s,
        split: t.split,
        initial_embeddings,
    })
}

/// Reversal scale for `epoch`.
pub fn grl_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    if !config.grl_warmup {
        return config.grl_scale;
    }
    let p = epoch as f64 / config.epochs.max(1) as f64;
    config.grl_scale * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

fn check_finite(tape: &Tape, nodes: &LossNodes, epoch: usize) -> Result<LossBreakdown> {
    let value = |n: Option<NodeId>| n.map_or(0.0, |n| tape.value(n).item());
    let b = LossBreakdown {
        adv: value(nodes.adv),
        cls: tape.value(nodes.cls).item(),
        ent: value(nodes.ent),
        total: tape.value(nodes.total).item(),
    };
    for (term, v) in [("adv", b.adv), ("cls", b.cls), ("ent", b.ent), ("total", b.total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { epoch, term });
        }
    }
    Ok(b)
}

fn accuracy(preds: &[usize], idx: &[usize], labels: &[Option<usize>]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let hits = idx.iter().filter(|&&i| labels[i] == Some(preds[i])).count();
    hits as f64 / idx.len() as f64
}

impl<'a> Trainer<'a> {
    fn new(pair: &'a DomainPair, cfg: &'a TrainConfig) -> Result<Self> {
        let k = pair.known_count;
        let s = cfg.settings(pair.target.adjacency.edge_count());
        let split = split_source(&pair.source, k, cfg.seed);
        if split.train.is_empty() {
            return Err(Error::invalid("source graph has no labeled training nodes"));
        }
        let train_labels = split
            .train
            .iter()
            .map(|&i| pair.source.labels[i].expect("split holds labeled nodes"))
            .collect();
        let mut model = GraphRtaModel::init(
            cfg.dims(pair.source.feature_dim(), k),
            cfg.activation,
            cfg.seed,
        )?;
        model.discriminator.grl_scale = cfg.grl_scale;
        let n_t = pair.target.node_count();
        Ok(Trainer {
            pair,
            cfg,
            train_idx: Arc::new(split.train.clone()),
            train_labels,
            split,
            src_adj: pair.source.adjacency.clone(),
            tgt_adj: pair.target.adjacency.clone(),
            model,
            delta: DenseMatrix::zeros(n_t, pair.target.feature_dim()),
            mixture: fit_beta_mixture_em(&[0.5; 10], 1)?,
            posteriors: PosteriorAssignment {
                p_tk: vec![0.5; n_t],
                p_tu: vec![0.5; n_t],
            },
            edits: EdgeEditSet::new(s.budget),
            log: Vec::new(),
            s,
        })
    }

    /// `X_t + ΔX_t` as a constant.
    fn target_input(&self) -> DenseMatrix {
        let mut x = self.pair.target.features.clone();
        x.add_assign(&self.delta);
        x
    }

    fn objective(&self) -> Objective<'_> {
        Objective {
            source_adj: &self.src_adj,
            target_adj: &self.tgt_adj,
            train_idx: self.train_idx.clone(),
            train_labels: &self.train_labels,
            posteriors: &self.posteriors,
            lambda: self.s.lambda,
            adversarial: self.s.adversarial,
            entropy: self.s.entropy,
            ent_domain_term: self.cfg.ent_domain_term,
        }
    }

    fn losses(&self, tape: &mut Tape, bound: &BoundModel, target_x: NodeId) -> Result<LossNodes> {
        let sx = tape.leaf(self.pair.source.features.clone());
        self.objective().build(tape, bound, sx, target_x)
    }

    fn refresh_separation(&mut self) -> Result<()> {
        let (_, logits) = self.model.infer(&self.tgt_adj, &self.target_input())?;
        let profile = compute_entropy(&known_columns(&logits))?;
        self.mixture = fit_beta_mixture_em(&profile.normalized, self.cfg.em_iters)?;
        self.posteriors = match self.s.separation {
            Separation::Mixture => self.mixture.posteriors(&profile),
            Separation::Threshold(tau) => PosteriorAssignment::from_threshold(&profile, tau),
        };
        Ok(())
    }

    fn graph_step(
        &mut self,
        epoch: usize,
        delta_opt: &mut AdamW,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let x = tape.leaf(self.pair.target.features.clone());
        let d = tape.leaf(self.delta.clone());
        let tx = apply_feature_delta(&mut tape, x, d)?;
        let nodes = self.losses(&mut tape, &bound, tx)?;
        check_finite(&tape, &nodes, epoch)?;
        tape.backward(nodes.total)?;

        let remaining = self.edits.remaining();
        if remaining > 0 {
            let m = self.cfg.pool_factor * self.tgt_adj.edge_count();
            let pool = CandidatePool::build(&self.tgt_adj, m, &self.edits.flips, rng);
            if !pool.is_empty() {
                let chosen = {
                    let grad = AdjacencyGradient::from_tape(&tape, &self.tgt_adj)?;
                    select_flips(score_edge_flips(&pool, &grad)?, self.s.flip_cap.min(remaining))
                };
                if !chosen.is_empty() {
                    let next = self.edits.commit(&self.tgt_adj, &chosen)?;
                    self.log.extend(chosen.iter().map(|c| EditRecord {
                        epoch,
                        u: c.pair.0,
                        v: c.pair.1,
                        kind: c.kind,
                        score: c.score,
                    }));
                    self.tgt_adj = Arc::new(next);
                }
            }
        }
        if !self.s.freeze_delta {
            let g = tape.grad(d).clone();
            delta_opt.step(&mut [&mut self.delta], &[&g]);
        }
        Ok(())
    }

    /// Source validation accuracy and the selection proxy.
    fn validation(&self) -> Result<(f64, f64)> {
        let src = &self.pair.source;
        let (_, logits_s) = self.model.infer(&self.src_adj, &src.features)?;
        let preds_s = logits_s.argmax_rows();
        let acc_val = accuracy(&preds_s, &self.split.valid, &src.labels);
        let acc_sanity = accuracy(&preds_s, &self.split.sanity, &src.labels);
        let (_, logits_t) = self.model.infer(&self.tgt_adj, &self.target_input())?;
        let preds_t = predict(&logits_t, self.s.rule)?;
        let unknown = self.pair.known_count;
        let agree = preds_t
            .iter()
            .zip(&self.posteriors.p_tu)
            .filter(|&(&p, &tu)| (p == unknown) == (tu > 0.5))
            .count();
        let consistency = agree as f64 / preds_t.len().max(1) as f64;
        Ok((acc_val, h_score(acc_sanity, consistency)))
    }

    fn snapshot(&self) -> Checkpoint {
        Checkpoint {
            seed: self.cfg.seed,
            model: self.model.clone(),
            feature_delta: self.delta.clone(),
            flips: self.log.iter().map(|r| (r.u, r.v)).collect::<Vec<Pair>>(),
            rule: self.s.rule,
        }
    }
}
