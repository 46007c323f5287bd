mod common;

use advsdf_core::advtrain::{checkpoint_bytes, load_checkpoint, load_checkpoint_for, parse_checkpoint, save_checkpoint};
use advsdf_core::pipeline::fit;
use advsdf_core::Error;
use common::{small_config, small_prepared};

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = small_config();
    let (_, p) = small_prepared(&cfg);
    let out = fit(&p, &cfg, "digest").unwrap();
    let bytes = checkpoint_bytes(&out.best).unwrap();
    let back = parse_checkpoint(&bytes).unwrap();
    assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
    assert_eq!(back.model, out.best.model);
    assert_eq!(back.config, cfg);
    assert_eq!(back.rng, out.best.rng);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&out.best, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(load_checkpoint_for(&path, &cfg.digest()).is_ok());
    let other = {
        let mut c = cfg.clone();
        c.train.lambda = 0.5;
        c.digest()
    };
    assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::DigestMismatch { .. })));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small_config();
    let (_, p) = small_prepared(&cfg);
    let mut c = cfg.clone();
    c.train.iterations = 0;
    let bytes = checkpoint_bytes(&fit(&p, &c, "d").unwrap().best).unwrap();
    assert!(parse_checkpoint(&bytes[..bytes.len() / 2]).is_err());
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    assert!(parse_checkpoint(&flipped).is_err());
    let dir = tempfile::tempdir().unwrap();
    let err = load_checkpoint(&dir.path().join("missing.bin")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let mut cfg = small_config();
    cfg.train.iterations = 0;
    let (_, p) = small_prepared(&cfg);
    let out = fit(&p, &cfg, "d").unwrap();
    assert_eq!(out.iterations_run, 0);
    assert_eq!(out.best.iteration, 0);
    assert_eq!(out.log.len(), 1);
    let init = advsdf_core::Model::init(&p.prep, &p.train, &cfg.features, &cfg.net, cfg.seed).unwrap();
    assert_eq!(out.best.model, init);
}

#[test]
fn training_is_deterministic_and_keeps_the_best_validation_point() {
    let cfg = small_config();
    let (_, p) = small_prepared(&cfg);
    let a = fit(&p, &cfg, "d").unwrap();
    let b = fit(&p, &cfg, "d").unwrap();
    assert_eq!(checkpoint_bytes(&a.best).unwrap(), checkpoint_bytes(&b.best).unwrap());
    assert_eq!(a.last, b.last);
    assert_eq!(a.log.len(), 7);
    let iters: Vec<u64> = a.log.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, vec![0, 5, 10, 15, 20, 25, 30]);
    assert!(a.log.iter().all(|r| r.val_loss.is_finite()));
    let min = a.log.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best.val_loss, min);
    let mut other = cfg.clone();
    other.seed = 4;
    let c = fit(&p, &other, "d").unwrap();
    assert_ne!(c.last, a.last);
}

#[test]
fn huge_learning_rate_diverges_with_last_good_checkpoint() {
    let mut cfg = small_config();
    cfg.train.lr_phi = 1e12;
    cfg.train.lr_psi = 1e12;
    cfg.train.eval_interval = 1;
    let (_, p) = small_prepared(&cfg);
    match fit(&p, &cfg, "d") {
        Err(e @ Error::Diverged { .. }) => {
            assert_eq!(e.exit_code(), 3);
            if let Error::Diverged { last_good, iteration, .. } = e {
                assert!(last_good.iteration < iteration);
                assert!(last_good.val_loss.is_finite());
            }
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.iterations_run)),
    }
}

#[test]
fn patience_stops_a_stalled_run() {
    let mut cfg = small_config();
    cfg.train.lr_phi = 0.0;
    cfg.train.lr_psi = 0.0;
    cfg.train.patience = 2;
    cfg.train.iterations = 100;
    let (_, p) = small_prepared(&cfg);
    let out = fit(&p, &cfg, "d").unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.iterations_run, 10);
    assert_eq!(out.best.iteration, 0);
}
