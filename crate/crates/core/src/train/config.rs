use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::loss::EntDomainTerm;
use crate::error::{Error, Result};
use crate::eval::PredictionRule;
use crate::model::{Activation, ModelDims};

/// Method variants used by the ablation arms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Hard entropy threshold in place of the unknown head and the mixture.
    Threshold(f64),
    NoMr,
    NoGr,
    NoAdapt,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::Threshold(t) => write!(f, "threshold:{t}"),
            Variant::NoMr => f.write_str("no_mr"),
            Variant::NoGr => f.write_str("no_gr"),
            Variant::NoAdapt => f.write_str("no_adapt"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `full`, `no_mr`, `no_gr`, `no_adapt`, `threshold` (τ = 0.5) or
    /// `threshold:<τ>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown variant {s:?}"));
        Ok(match s {
            "full" => Variant::Full,
            "no_mr" => Variant::NoMr,
            "no_gr" => Variant::NoGr,
            "no_adapt" => Variant::NoAdapt,
            "threshold" => Variant::Threshold(0.5),
            _ => {
                let tau = s.strip_prefix("threshold:").ok_or_else(bad)?;
                Variant::Threshold(tau.parse().map_err(|_| bad())?)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectBy {
    Last,
    ValAcc,
    /// Harmonic mean of source sanity accuracy and target-posterior
    /// consistency.
    #[default]
    ValH,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub rho: f64,
    /// Edge-flip budget as a fraction of the target edge count.
    pub budget_ratio: f64,
    /// Absolute budget; overrides `budget_ratio` when set.
    pub budget: Option<usize>,
    pub epochs: usize,
    pub em_iters: usize,
    pub seed: u64,
    pub grl_scale: f64,
    /// Ramp the reversal scale as `2/(1 + exp(−10p)) − 1` over training
    /// progress `p`.
    pub grl_warmup: bool,
    pub variant: Variant,
    /// Widths of the hidden GCN layers.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub disc_hidden: usize,
    pub activation: Activation,
    pub ent_domain_term: EntDomainTerm,
    /// Sampled non-edge candidates per current target edge.
    pub pool_factor: usize,
    /// Flips committed per epoch at most; defaults to `max(1, B/50)`.
    pub flip_cap: Option<usize>,
    pub model_steps: usize,
    pub select_by: SelectBy,
    pub adversarial: bool,
    pub entropy: bool,
    pub freeze_delta: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            lambda: 0.1,
            rho: 0.1,
            budget_ratio: 0.05,
            budget: None,
            epochs: 200,
            em_iters: 20,
            seed: 0,
            grl_scale: 1.0,
            grl_warmup: true,
            variant: Variant::Full,
            hidden: vec![128],
            embedding_dim: 128,
            disc_hidden: 64,
            activation: Activation::Relu,
            ent_domain_term: EntDomainTerm::Binary,
            pool_factor: 5,
            flip_cap: None,
            model_steps: 1,
            select_by: SelectBy::ValH,
            adversarial: true,
            entropy: true,
            freeze_delta: false,
        }
    }
}

/// How target nodes are split into known and unknown for the losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Separation {
    Mixture,
    Threshold(f64),
}

/// Switches after applying the variant on top of the configured values.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub lambda: f64,
    pub rho: f64,
    pub budget: usize,
    pub flip_cap: usize,
    pub freeze_delta: bool,
    pub adversarial: bool,
    pub entropy: bool,
    pub separation: Separation,
    pub rule: PredictionRule,
    pub select_by: SelectBy,
}

impl TrainConfig {
    pub fn dims(&self, input: usize, known_count: usize) -> ModelDims {
        let mut layers = self.hidden.clone();
        layers.push(self.embedding_dim);
        ModelDims {
            input,
            layers,
            known_count,
            disc_hidden: self.disc_hidden,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be positive and finite, got {v}"));
            }
        };
        positive("learning_rate", self.learning_rate);
        positive("grl_scale", self.grl_scale);
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            out.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            out.push(format!("rho must be in [0, 1], got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.budget_ratio) {
            out.push(format!("budget_ratio must be in [0, 1], got {}", self.budget_ratio));
        }
        if let Variant::Threshold(t) = self.variant {
            if !(0.0..=1.0).contains(&t) {
                out.push(format!("threshold must be in [0, 1], got {t}"));
            }
        }
        if self.em_iters == 0 {
            out.push("em_iters must be at least 1".into());
        }
        if self.model_steps == 0 {
            out.push("model_steps must be at least 1".into());
        }
        if self.embedding_dim == 0 || self.disc_hidden == 0 || self.hidden.contains(&0) {
            out.push("layer widths must be positive".into());
        }
        if self.flip_cap == Some(0) {
            out.push("flip_cap must be at least 1".into());
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

    /// Resolves the variant against the configured switches for a target
    /// graph with `target_edges` edges.
    pub fn settings(&self, target_edges: usize) -> Settings {
        let budget = self
            .budget
            .unwrap_or_else(|| (self.budget_ratio * target_edges as f64 + 1e-9).floor() as usize);
        let mut s = Settings {
            lambda: self.lambda,
            rho: self.rho,
            budget,
            flip_cap: 1,
            freeze_delta: self.freeze_delta,
            adversarial: self.adversarial,
            entropy: self.entropy,
            separation: Separation::Mixture,
            rule: PredictionRule::Argmax,
            select_by: self.select_by,
        };
        match self.variant {
            Variant::Full => {}
            Variant::NoMr => s.rho = 0.0,
            Variant::NoGr => {
                s.budget = 0;
                s.freeze_delta = true;
            }
            Variant::NoAdapt => {
                s.lambda = 0.0;
                s.rho = 0.0;
                s.budget = 0;
                s.freeze_delta = true;
                s.adversarial = false;
                s.entropy = false;
                s.select_by = SelectBy::ValAcc;
            }
            Variant::Threshold(tau) => {
                s.lambda = 0.0;
                s.separation = Separation::Threshold(tau);
                s.rule = PredictionRule::EntropyThreshold(tau);
            }
        }
        s.flip_cap = self.flip_cap.unwrap_or((s.budget / 50).max(1));
        s
    }
}
