//! Checkpoint persistence and evaluation through a reloaded snapshot.

use graphrta::checkpoint::Checkpoint;
use graphrta::graph::synth::{generate_synthetic_pair, GeneratorSpec, ShiftSpec};
use graphrta::train::{run_training, TrainConfig};
use graphrta::Error;

fn spec(feature_dim: usize) -> GeneratorSpec {
    GeneratorSpec {
        source_nodes: 50,
        target_nodes: 50,
        class_count: 4,
        known_count: 2,
        feature_dim,
        p_intra: 0.15,
        p_inter: 0.02,
        mean_scale: 1.0,
        noise: 1.0,
        shift: ShiftSpec::default(),
    }
}

fn trained() -> (graphrta::graph::DomainPair, graphrta::train::TrainOutcome) {
    let pair = generate_synthetic_pair(&spec(6), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        hidden: vec![6],
        embedding_dim: 4,
        disc_hidden: 4,
        rho: 0.3,
        budget: Some(4),
        ..Default::default()
    };
    let out = run_training(&pair, &cfg).unwrap();
    (pair, out)
}

#[test]
fn reloaded_checkpoint_reproduces_evaluation() {
    let (pair, out) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), out.checkpoint.to_bytes());
    assert_eq!(
        back.evaluate(&pair.target).unwrap(),
        out.checkpoint.evaluate(&pair.target).unwrap()
    );
    assert!(back.flips.len() <= 4);
    let target = back.target_adjacency(&pair.target.adjacency).unwrap();
    assert!(target.is_symmetric());
}

#[test]
fn corrupted_bytes_are_rejected() {
    let (_, out) = trained();
    let bytes = out.checkpoint.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&magic).is_err());
}

#[test]
fn feature_mismatch_names_both_sides() {
    let (_, out) = trained();
    let other = generate_synthetic_pair(&spec(9), 0).unwrap();
    match out.checkpoint.infer(&other.target) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left.1, 6);
            assert_eq!(right.1, 9);
        }
        r => panic!("unexpected {:?}", r.map(|v| v.predictions)),
    }
}
