//! The binding layer without a Python interpreter.

use refinedial_py::api;

#[test]
fn text_metrics_match_hand_values() {
    assert!((api::bleu("the cat", "the cat sat", 1).unwrap() - (-0.5f64).exp()).abs() < 1e-4);
    assert!((api::rouge_l("a b c", "a x c") - 2.0 / 3.0).abs() < 1e-9);
    assert!((api::distinct(&["the the the".into()], 1).unwrap() - 1.0 / 3.0).abs() < 1e-9);
    let history = vec!["b c d".to_string()];
    assert!((api::persona_f1("a b", &history, &[]) - 0.4).abs() < 1e-9);
    assert_eq!(api::persona_f1("a b", &history, &["b".into()]), 0.0);
}

#[test]
fn synthesize_reports_requested_users() {
    let dir = tempfile::tempdir().unwrap();
    let stats = api::synthesize(dir.path(), 20, 10, 800, 3).unwrap();
    assert_eq!(stats["users"], 20.0);
    assert_eq!(stats["pairs"], 200.0);
    assert!(dir.path().join("corpus.jsonl").exists());
}

#[test]
fn opening_a_missing_run_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = refinedial::experiment::TrainedRun::open(dir.path(), None).err().unwrap();
    assert!(err.to_string().contains("config.toml"), "{err}");
}
