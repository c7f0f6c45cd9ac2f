//! Acceptance gate: one PASS/FAIL line per criterion. Runs without the libtest
//! harness so the lines print in order. Gating failures exit nonzero only when
//! `ACCEPTANCE_STRICT` is set.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use graphrta::graph::io::load_graph_dir;
use graphrta::graph::synth::{generate_synthetic_pair, GeneratorSpec, ShiftSpec};
use graphrta::graph::DomainPair;
use graphrta::prune::build_masks;
use graphrta::rewire::{parse_edit_log, replay_edits};
use graphrta::tensor::DenseMatrix;
use graphrta::train::{run_training, TrainConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;


const SEEDS: u64 = 5;
const MARGIN: f64 = 0.03;
const TAUS: [f64; 3] = [0.3, 0.5, 0.7];

type Check = Result<String, String>;

/// Runs panicking checks, turning the first panic into a failure message.
fn guarded(checks: &[(&str, fn())]) -> Check {
    for (name, f) in checks {
        catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            format!("{name}: {msg}")
        })?;
    }
    Ok(format!("{} checks", checks.len()))
}

fn timed(limit_s: f64, f: impl FnOnce() -> Check) -> Check {
    let start = Instant::now();
    let detail = f()?;
    let t = start.elapsed().as_secs_f64();
    if t >= limit_s {
        return Err(format!("{detail}; took {t:.1}s, limit {limit_s}s"));
    }
    Ok(format!("{detail}; {t:.1}s"))
}

fn gradients() -> Check {
    timed(10.0, || {
        guarded(&[
            ("every op", gradients::every_op_matches_finite_differences),
            ("reversal", gradients::gradient_reversal_negates_and_scales),
            ("total loss", gradients::total_loss_gradients_on_four_node_fixture),
        ])
    })
}

fn formulas() -> Check {
    guarded(&[
        ("h", formulas::h_score_hand_values),
        ("entropy", formulas::entropy_hand_values),
        ("posterior", formulas::posterior_matches_independent_density_ratio),
        ("adv", formulas::adv_loss_hand_values),
        ("cls", formulas::cls_loss_hand_values),
        ("cls masked", formulas::cls_loss_masked_term_ignores_the_true_logit),
        ("xor", formulas::xor_flip_removes_and_adds_symmetrically),
        ("involution", formulas::xor_flip_is_an_involution),
        ("edit set", formulas::edit_set_rejects_repeat_pairs_and_overspend),
        ("self loop", formulas::self_loop_flip_rejected),
        ("rebuild", formulas::normalization_rebuild_after_edits),
        ("3-cycle", formulas::three_cycle_propagation_preserves_ones),
    ])
}

fn masks() -> Check {
    let rhos = [0.0, 0.25, 0.5, 0.9];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..200 {
        let scores: Vec<DenseMatrix> = (0..rng.random_range(1..4))
            .map(|_| {
                let (r, c) = (rng.random_range(1..9), rng.random_range(1..9));
                let v = (0..r * c).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
                DenseMatrix::from_vec(r, c, v).unwrap()
            })
            .collect();
        let sets: Vec<_> = rhos.iter().map(|&r| build_masks(scores.clone(), r).unwrap()).collect();
        for (rho, set) in rhos.iter().zip(&sets) {
            for (m, s) in set.masks.iter().zip(&scores) {
                let want = (rho * s.len() as f64).floor() as usize;
                if m.count_zeros() != want {
                    return Err(format!("trial {trial}: rho {rho} zeroed {} of {}, want {want}", m.count_zeros(), s.len()));
                }
            }
        }
        for w in sets.windows(2) {
            for (lo, hi) in w[0].masks.iter().zip(&w[1].masks) {
                if lo.values().iter().zip(hi.values()).any(|(a, b)| *a == 0.0 && *b == 1.0) {
                    return Err(format!("trial {trial}: zero set shrank as rho grew"));
                }
            }
        }
    }
    guarded(&[("rho 0 forward", masks::rho_zero_reproduces_unmasked_forward_bit_for_bit)])?;
    Ok("200 random score sets; rho 0 forward bit-identical".into())
}

fn synthetic_spec() -> GeneratorSpec {
    GeneratorSpec {
        source_nodes: 400,
        target_nodes: 400,
        class_count: 5,
        known_count: 3,
        feature_dim: 32,
        p_intra: 0.05,
        p_inter: 0.005,
        mean_scale: 1.0,
        noise: 1.0,
        shift: ShiftSpec {
            mean_rotation: 0.3,
            mean_shift: 0.3,
            ..Default::default()
        },
    }
}

fn synthetic_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![64],
        embedding_dim: 32,
        disc_hidden: 32,
        learning_rate: 0.001,
        ..Default::default()
    }
}

fn budget() -> Check {
    let pair = generate_synthetic_pair(&synthetic_spec(), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 200,
        budget: Some(50),
        ..synthetic_config()
    };
    let out = run_training(&pair, &cfg).map_err(|e| e.to_string())?;
    let text: String = out.edits.iter().map(|r| format!("{r}\n")).collect();
    let log = parse_edit_log(&text).map_err(|e| e.to_string())?;
    let pairs: BTreeSet<_> = log.iter().map(|r| (r.u.min(r.v), r.u.max(r.v))).collect();
    if pairs.len() > 50 || log.len() != pairs.len() {
        return Err(format!("{} records over {} distinct pairs", log.len(), pairs.len()));
    }
    let replayed = replay_edits(&pair.target.adjacency, &log).map_err(|e| e.to_string())?;
    if replayed != out.final_adjacency {
        return Err("replayed log differs from the final adjacency".into());
    }
    Ok(format!("{} pairs committed, replay exact", pairs.len()))
}

fn em_recovery() -> Check {
    timed(5.0, || guarded(&[("recovery", em::recovers_means_and_weights_for_most_seeds)]))
}

fn ablations() -> Check {
    guarded(&[
        ("no_adapt", training::no_adapt_matches_plain_gcn_reference),
        ("no_mr", training::no_mr_equals_full_with_rho_zero),
        ("no_gr", training::no_gr_equals_full_with_zero_budget_and_frozen_delta),
    ])
}

/// Per-seed H-scores and MMD pairs for one variant on the synthetic pairs.
struct VariantRun {
    h: Vec<f64>,
    mmd: Vec<(Option<f64>, Option<f64>)>,
}

impl VariantRun {
    fn mean_h(&self) -> f64 {
        self.h.iter().sum::<f64>() / self.h.len() as f64
    }
}

fn run_variant(pairs: &[DomainPair], variant: Variant) -> Result<VariantRun, String> {
    let mut run = VariantRun { h: vec![], mmd: vec![] };
    for (seed, pair) in pairs.iter().enumerate() {
        let cfg = TrainConfig {
            seed: seed as u64,
            variant,
            ..synthetic_config()
        };
        let out = run_training(pair, &cfg).map_err(|e| e.to_string())?;
        let report = out.checkpoint.evaluate_with_mmd(&pair.target).map_err(|e| e.to_string())?;
        run.h.push(report.h_score);
        run.mmd.push((report.mmd_before, report.mmd_after));
    }
    Ok(run)
}

fn end_to_end() -> (Check, Check) {
    let start = Instant::now();
    let pairs: Result<Vec<DomainPair>, String> = (0..SEEDS)
        .map(|s| generate_synthetic_pair(&synthetic_spec(), s).map_err(|e| e.to_string()))
        .collect();
    let runs = pairs.and_then(|pairs| {
        let full = run_variant(&pairs, Variant::Full)?;
        let plain = run_variant(&pairs, Variant::NoAdapt)?;
        let thresholds = TAUS
            .iter()
            .map(|&t| run_variant(&pairs, Variant::Threshold(t)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((full, plain, thresholds))
    });
    let (full, plain, thresholds) = match runs {
        Ok(r) => r,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let elapsed = start.elapsed().as_secs_f64();

    let (best_tau, best_thr) = TAUS
        .iter()
        .zip(&thresholds)
        .map(|(t, r)| (*t, r.mean_h()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let detail = format!(
        "full {:.3}, no_adapt {:.3}, threshold {:.3} (tau {best_tau}); {elapsed:.0}s",
        full.mean_h(),
        plain.mean_h(),
        best_thr
    );
    let beats = full.mean_h() - plain.mean_h() >= MARGIN && full.mean_h() - best_thr >= MARGIN;
    let e2e = if beats && elapsed < 300.0 { Ok(detail) } else { Err(detail) };

    let rising = full
        .mmd
        .iter()
        .filter(|(b, a)| matches!((b, a), (Some(b), Some(a)) if a > b))
        .count();
    let listing: Vec<String> = full
        .mmd
        .iter()
        .map(|(b, a)| format!("{:.3}->{:.3}", b.unwrap_or(f64::NAN), a.unwrap_or(f64::NAN)))
        .collect();
    let detail = format!("{rising}/{SEEDS} seeds rise [{}]", listing.join(", "));
    let mmd = if rising >= 4 { Ok(detail) } else { Err(detail) };
    (e2e, mmd)
}

/// Cornell to Wisconsin on real files, when `GRAPHRTA_WEBKB` names a directory
/// holding `cornell/` and `wisconsin/` in the graph directory format.
fn webkb() -> Option<Check> {
    let root = PathBuf::from(std::env::var_os("GRAPHRTA_WEBKB")?);
    let run = || -> Result<String, String> {
        let load = |name: &str| {
            let mut g = load_graph_dir(root.join(name)).map_err(|e| e.to_string())?;
            g.l2_normalize_rows();
            Ok::<_, String>(g)
        };
        let pair = DomainPair::from_raw(&load("cornell")?, &load("wisconsin")?, &[0, 1, 2]).map_err(|e| e.to_string())?;
        let mut h = vec![];
        for seed in 0..SEEDS {
            let cfg = TrainConfig { seed, ..Default::default() };
            let out = run_training(&pair, &cfg).map_err(|e| e.to_string())?;
            h.push(100.0 * out.checkpoint.evaluate(&pair.target).map_err(|e| e.to_string())?.h_score);
        }
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        let detail = format!("H {mean:.2} over {SEEDS} seeds, band [20, 45]");
        if (20.0..=45.0).contains(&mean) { Ok(detail) } else { Err(detail) }
    };
    Some(run())
}

fn main() {
    let mut gating_failures = 0;
    let mut report = |id: usize, name: &str, gating: bool, result: Check| {
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                gating_failures += gating as usize;
                ("FAIL", d)
            }
        };
        let note = if gating { "" } else { " (non-gating)" };
        println!("criterion {id} {tag} {name}{note}: {detail}");
    };
    report(1, "gradient correctness", true, gradients());
    report(2, "formula oracles", true, formulas());
    report(3, "mask contract", true, masks());
    report(4, "budget contract", true, budget());
    report(5, "EM recovery", true, em_recovery());
    report(6, "ablation collapse", true, ablations());
    let (e2e, mmd) = end_to_end();
    report(7, "synthetic end-to-end", true, e2e);
    match webkb() {
        Some(r) => report(8, "WebKB Cornell to Wisconsin", false, r),
        None => println!("criterion 8 SKIP WebKB Cornell to Wisconsin (non-gating): set GRAPHRTA_WEBKB to run"),
    }
    report(9, "MMD direction", true, mmd);
    if gating_failures > 0 {
        println!("{gating_failures} gating criteria failed");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
