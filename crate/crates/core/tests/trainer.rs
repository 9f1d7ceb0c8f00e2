//! Joint training loop: parameter isolation, warm-up gating, pseudo-label
//! delegation, resume determinism and the refiner loss curve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refinedial::config::RunConfig;
use refinedial::corpus::synthetic::{generate as synthesize, SyntheticSpec};
use refinedial::corpus::Corpus;
use refinedial::experiment::Experiment;
use refinedial::pipeline::Ablation;
use refinedial::token_refiner::pseudo_label;
use refinedial::trainer::{latest_checkpoint, Trainer};

fn experiment(spec: &SyntheticSpec, tweak: impl FnOnce(&mut RunConfig)) -> Experiment {
    let corpus = Corpus::from_records(synthesize(spec).unwrap().records).unwrap();
    let mut cfg = RunConfig::default();
    cfg.training.valid_limit = 8;
    cfg.training.eval_interval = 10;
    tweak(&mut cfg);
    Experiment::new(cfg, corpus).unwrap()
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        users: 40,
        pairs_per_user: 16,
        vocab_size: 800,
        ..SyntheticSpec::default()
    }
}

fn trainer(ex: &Experiment) -> Trainer<'_> {
    let classifier = ex.train_topics().unwrap().classifier;
    ex.trainer(classifier, Ablation::None).unwrap()
}

#[test]
fn refiner_and_generator_steps_touch_only_their_groups() {
    let ex = experiment(&small_spec(), |c| c.training.n_f = 2);
    let mut t = trainer(&ex);
    let gen_ids = t.model.generator_params();
    let ref_ids = t.model.refiner_params();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<_> = t.train[..16].to_vec();

    let (g0, r0) = (t.model.store.fingerprint(&gen_ids), t.model.store.fingerprint(&ref_ids));
    let report = t.refiner_step_on(&batch, &mut rng).unwrap();
    assert!(report.loss.is_some());
    assert_eq!(t.model.store.fingerprint(&gen_ids), g0);
    let r1 = t.model.store.fingerprint(&ref_ids);
    assert_ne!(r1, r0);

    t.generator_step_on(3, &batch).unwrap();
    assert_eq!(t.model.store.fingerprint(&ref_ids), r1);
    assert_ne!(t.model.store.fingerprint(&gen_ids), g0);
}

#[test]
fn isolation_checks_hold_through_training() {
    let ex = experiment(&small_spec(), |c| {
        c.training.n_f = 5;
        c.training.max_steps = 15;
        c.training.check_isolation = true;
    });
    let mut t = trainer(&ex);
    let state = t.train().unwrap();
    assert_eq!(state.step, 15);
    assert_eq!(state.generator_losses.len(), 10);
}

#[test]
fn generator_step_is_gated_by_warm_up() {
    let ex = experiment(&small_spec(), |c| c.training.n_f = 4);
    let mut t = trainer(&ex);
    let batch: Vec<_> = t.train[..16].to_vec();
    for step in 0..=4 {
        assert!(t.generator_step_on(step, &batch).is_err(), "step {step} should be refused");
    }
    assert!(t.generator_step_on(5, &batch).is_ok());
}

#[test]
fn zero_warm_up_trains_the_generator_from_step_one() {
    let ex = experiment(&small_spec(), |c| {
        c.training.n_f = 0;
        c.training.max_steps = 3;
    });
    let mut t = trainer(&ex);
    let state = t.train().unwrap();
    let steps: Vec<u64> = state.generator_losses.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, [1, 2, 3]);
}

#[test]
fn warm_up_defers_generator_losses_exactly() {
    let ex = experiment(&small_spec(), |c| {
        c.training.n_f = 6;
        c.training.max_steps = 9;
    });
    let mut t = trainer(&ex);
    let state = t.train().unwrap();
    assert_eq!(state.generator_losses.first().map(|l| l.0), Some(7));
    assert_eq!(state.refiner_losses.first().map(|l| l.0), Some(1));
}

#[test]
fn step_pseudo_labels_match_the_oracle() {
    let ex = experiment(&small_spec(), |_| {});
    let mut t = trainer(&ex);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch: Vec<_> = t.train[100..116].to_vec();
    let report = t.refiner_step_on(&batch, &mut rng).unwrap();
    assert!(!report.examples.is_empty());
    let alpha = t.model.cfg.token_refiner.alpha;
    for e in &report.examples {
        let y = ex.corpus.response(&e.triplet);
        let r = &ex.corpus.users[e.sentence.0].pairs[e.sentence.1].response;
        let probs = t.nonpersonal_distributions(&e.triplet).unwrap();
        assert_eq!(pseudo_label(y, &probs, r, alpha).unwrap(), e.label);
    }
}

#[test]
fn batch_larger_than_training_split_is_rejected() {
    let spec = SyntheticSpec {
        users: 4,
        pairs_per_user: 4,
        vocab_size: 800,
        clusters: 2,
        ..SyntheticSpec::default()
    };
    let ex = experiment(&spec, |c| {
        c.training.batch_refiner = 64;
        c.pipeline.k_u = 2;
    });
    let classifier = ex.train_topics().unwrap().classifier;
    assert!(ex.trainer(classifier, Ablation::None).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ex = experiment(&small_spec(), |c| {
        c.training.n_f = 5;
        c.training.max_steps = 30;
    });
    let classifier = ex.train_topics().unwrap().classifier;
    let snapshot = serde_json::to_value(&ex.cfg).unwrap();

    let full_dir = tempfile::tempdir().unwrap();
    let mut full = ex.trainer(classifier.clone(), Ablation::None).unwrap().with_output(full_dir.path(), snapshot.clone()).unwrap();
    let full_state = full.train().unwrap().clone();

    let dir = tempfile::tempdir().unwrap();
    let mut first = ex.trainer(classifier.clone(), Ablation::None).unwrap().with_output(dir.path(), snapshot.clone()).unwrap();
    first.cfg.max_steps = 20;
    first.train().unwrap();
    drop(first);

    let ck = latest_checkpoint(dir.path()).unwrap().expect("checkpoint written");
    let mut resumed = ex.trainer(classifier, Ablation::None).unwrap();
    resumed.load_checkpoint(&ck).unwrap();
    assert_eq!(resumed.state.step, 20);
    let mut resumed = resumed.with_output(dir.path(), snapshot).unwrap();
    let state = resumed.train().unwrap();

    assert_eq!(state.generator_losses, full_state.generator_losses);
    assert_eq!(state.refiner_losses, full_state.refiner_losses);
    assert_eq!(state.valid_losses, full_state.valid_losses);
    let log = |d: &std::path::Path| std::fs::read_to_string(d.join("train.log")).unwrap();
    assert_eq!(log(dir.path()), log(full_dir.path()));
}

/// Measured curve on the default synthetic corpus under joint training: the
/// mean matching loss of the last ten of 600 steps is about 30% below that of
/// the first ten. The bound asks for 20%.
#[test]
fn refiner_loss_falls_over_600_steps() {
    let ex = experiment(&SyntheticSpec::default(), |c| {
        c.training.max_steps = 600;
        c.training.eval_interval = 600;
    });
    let mut t = trainer(&ex);
    let state = t.train().unwrap();
    let l = &state.refiner_losses;
    assert!(l.len() >= 390, "only {} refiner steps ran", l.len());
    let mean = |s: &[(u64, f64)]| s.iter().map(|x| x.1).sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&l[..10]), mean(&l[l.len() - 10..]));
    println!("L^s first-10 mean {head:.4}, last-10 mean {tail:.4}, drop {:.1}%", (1.0 - tail / head) * 100.0);
    assert!(tail <= 0.8 * head, "L^s fell from {head:.4} to {tail:.4}");
}
