//! Known/unknown separation of target nodes.
//!
//! Prediction entropies over the known classes are normalized into (0, 1) and
//! modeled as a two-component Beta mixture fitted by EM. The low-entropy
//! component is target-known (tk), the high-entropy one target-unknown (tu);
//! the Bayes posterior of each component replaces a hand-set threshold.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Clamp margin keeping normalized entropies inside the Beta support.
pub const ENTROPY_EPS: f64 = 1e-4;

const MIN_SHAPE: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyProfile {
    pub raw: Vec<f64>,
    /// `raw / ln k`, clamped to `[ε, 1 − ε]`.
    pub normalized: Vec<f64>,
}

/// Shannon entropy of the softmax over each row of `known_logits` (the
/// unknown logit must already be excluded).
pub fn compute_entropy(known_logits: &DenseMatrix) -> Result<EntropyProfile> {
    let k = known_logits.cols();
    if k < 2 {
        return Err(Error::invalid(format!(
            "entropy normalization needs at least 2 known classes, got {k}"
        )));
    }
    let max_entropy = (k as f64).ln();
    let mut raw = Vec::with_capacity(known_logits.rows());
    for r in 0..known_logits.rows() {
        let row = known_logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lz = z.ln();
        let h: f64 = row
            .iter()
            .map(|v| {
                let p = (v - max).exp() / z;
                if p > 0.0 {
                    -p * (v - max - lz)
                } else {
                    0.0
                }
            })
            .sum();
        raw.push(h.clamp(0.0, max_entropy));
    }
    let normalized = raw
        .iter()
        .map(|h| (h / max_entropy).clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS))
        .collect();
    Ok(EntropyProfile { raw, normalized })
}

pub fn beta_ln_pdf(x: f64, alpha: f64, beta: f64) -> f64 {
    (alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - ln_beta(alpha, beta)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Two-component Beta mixture over normalized entropies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    pub alpha_tk: f64,
    pub beta_tk: f64,
    pub alpha_tu: f64,
    pub beta_tu: f64,
    pub mix_tk: f64,
    pub mix_tu: f64,
    /// Set when the samples had no spread; posteriors are then 0.5.
    pub degenerate: bool,
    /// Log-likelihood of the data under the final parameters.
    pub log_likelihood: f64,
}

impl BetaMixture {
    pub fn mean_tk(&self) -> f64 {
        self.alpha_tk / (self.alpha_tk + self.beta_tk)
    }

    pub fn mean_tu(&self) -> f64 {
        self.alpha_tu / (self.alpha_tu + self.beta_tu)
    }

    fn degenerate_fallback() -> Self {
        BetaMixture {
            alpha_tk: 1.0,
            beta_tk: 1.0,
            alpha_tu: 1.0,
            beta_tu: 1.0,
            mix_tk: 0.5,
            mix_tu: 0.5,
            degenerate: true,
            log_likelihood: 0.0,
        }
    }

    fn log_joint(&self, e: f64) -> (f64, f64) {
        (
            self.mix_tk.ln() + beta_ln_pdf(e, self.alpha_tk, self.beta_tk),
            self.mix_tu.ln() + beta_ln_pdf(e, self.alpha_tu, self.beta_tu),
        )
    }

    /// Mixture density `p(e)`.
    pub fn density(&self, e: f64) -> f64 {
        let (a, b) = self.log_joint(e);
        a.exp() + b.exp()
    }

    pub fn log_likelihood_of(&self, samples: &[f64]) -> f64 {
        samples
            .iter()
            .map(|&e| {
                let (a, b) = self.log_joint(e);
                log_add(a, b)
            })
            .sum()
    }

    /// `(p(tk|e), p(tu|e))` with `e` clamped into `[ε, 1 − ε]`.
    pub fn posterior_known(&self, e: f64) -> (f64, f64) {
        if self.degenerate {
            return (0.5, 0.5);
        }
        let e = e.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
        let (lk, lu) = self.log_joint(e);
        let p_tk = if lk == f64::NEG_INFINITY && lu == f64::NEG_INFINITY {
            0.5
        } else {
            // Logistic form is stable when either joint underflows.
            1.0 / (1.0 + (lu - lk).exp())
        };
        (p_tk, 1.0 - p_tk)
    }

    pub fn posteriors(&self, profile: &EntropyProfile) -> PosteriorAssignment {
        let (p_tk, p_tu) = profile
            .normalized
            .iter()
            .map(|&e| self.posterior_known(e))
            .unzip();
        PosteriorAssignment { p_tk, p_tu }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorAssignment {
    pub p_tk: Vec<f64>,
    pub p_tu: Vec<f64>,
}

impl PosteriorAssignment {
    /// Hard assignment: known below or at `tau`, unknown above.
    pub fn from_threshold(profile: &EntropyProfile, tau: f64) -> Self {
        let p_tu: Vec<f64> = profile
            .normalized
            .iter()
            .map(|&e| if e > tau { 1.0 } else { 0.0 })
            .collect();
        PosteriorAssignment {
            p_tk: p_tu.iter().map(|p| 1.0 - p).collect(),
            p_tu,
        }
    }

    pub fn len(&self) -> usize {
        self.p_tk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_tk.is_empty()
    }
}

/// Weighted mean/variance moment match `(α, β)`.
fn moment_match(samples: &[f64], weights: &[f64]) -> Option<(f64, f64)> {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 1e-12 {
        return None;
    }
    let m = samples.iter().zip(weights).map(|(x, w)| w * x).sum::<f64>() / wsum;
    let v = samples
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - m) * (x - m))
        .sum::<f64>()
        / wsum;
    let bound = m * (1.0 - m);
    // Beta requires v < m(1 − m); a zero-variance component gets a sharp peak.
    let v = v.clamp(bound * 1e-6, bound * 0.999);
    let c = bound / v - 1.0;
    Some(((m * c).max(MIN_SHAPE), ((1.0 - m) * c).max(MIN_SHAPE)))
}

/// EM for the two-component Beta mixture with method-of-moments M-steps.
///
/// Initialization splits the sorted samples at the median: the lower half
/// seeds tk, the upper half tu. After fitting, components are ordered so tk
/// has the lower mean.
pub fn fit_beta_mixture_em(samples: &[f64], iterations: usize) -> Result<BetaMixture> {
    if samples.len() < 10 {
        return Err(Error::invalid(format!(
            "Beta mixture needs at least 10 samples, got {}",
            samples.len()
        )));
    }
    if iterations == 0 {
        return Err(Error::invalid("EM needs at least one iteration"));
    }
    let xs: Vec<f64> = samples
        .iter()
        .map(|e| e.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS))
        .collect();
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi - lo < 1e-12 {
        log::warn!("entropies have no spread; Beta mixture falls back to p_tk = 0.5");
        return Ok(BetaMixture::degenerate_fallback());
    }

    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let half = xs.len() / 2;
    let mut w_tk = vec![0.0; xs.len()];
    for &i in &order[..half] {
        w_tk[i] = 1.0;
    }
    let w_tu: Vec<f64> = w_tk.iter().map(|w| 1.0 - w).collect();
    let (a_tk, b_tk) = moment_match(&xs, &w_tk).expect("non-empty lower half");
    let (a_tu, b_tu) = moment_match(&xs, &w_tu).expect("non-empty upper half");
    let mut mix = BetaMixture {
        alpha_tk: a_tk,
        beta_tk: b_tk,
        alpha_tu: a_tu,
        beta_tu: b_tu,
        mix_tk: 0.5,
        mix_tu: 0.5,
        degenerate: false,
        log_likelihood: 0.0,
    };
    let mut prev_ll = mix.log_likelihood_of(&xs);

    for it in 0..iterations {
        let resp: Vec<f64> = xs.iter().map(|&e| mix.posterior_known(e).0).collect();
        let resp_tu: Vec<f64> = resp.iter().map(|r| 1.0 - r).collect();
        let mix_tk = resp.iter().sum::<f64>() / xs.len() as f64;
        let mut next = mix.clone();
        if let Some((a, b)) = moment_match(&xs, &resp) {
            next.alpha_tk = a;
            next.beta_tk = b;
        }
        if let Some((a, b)) = moment_match(&xs, &resp_tu) {
            next.alpha_tu = a;
            next.beta_tu = b;
        }
        next.mix_tk = mix_tk.clamp(1e-6, 1.0 - 1e-6);
        next.mix_tu = 1.0 - next.mix_tk;
        let ll = next.log_likelihood_of(&xs);
        if ll < prev_ll - 1e-8 {
            log::debug!("EM iteration {it}: log-likelihood fell from {prev_ll} to {ll}");
        }
        prev_ll = ll;
        mix = next;
    }

    if mix.mean_tk() > mix.mean_tu() {
        mix = BetaMixture {
            alpha_tk: mix.alpha_tu,
            beta_tk: mix.beta_tu,
            alpha_tu: mix.alpha_tk,
            beta_tu: mix.beta_tk,
            mix_tk: mix.mix_tu,
            mix_tu: mix.mix_tk,
            ..mix
        };
    }
    mix.log_likelihood = prev_ll;
    Ok(mix)
}
