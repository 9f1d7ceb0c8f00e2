//! End-to-end runs of the `refinedial` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use refinedial::corpus::Corpus;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_refinedial"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(str::to_string).collect()
}

/// Writes a run config over `corpus` with small training settings.
fn write_config(dir: &Path, corpus: &Path, steps: u64) -> PathBuf {
    let text = ok(&["config"]);
    let mut cfg: toml::Table = toml::from_str(&text).unwrap();
    let set = |cfg: &mut toml::Table, section: &str, key: &str, v: toml::Value| {
        cfg[section].as_table_mut().unwrap().insert(key.into(), v);
    };
    set(&mut cfg, "corpus", "path", s(&corpus.join("corpus.jsonl")).into());
    set(&mut cfg, "training", "max_steps", (steps as i64).into());
    set(&mut cfg, "training", "n_f", 20.into());
    set(&mut cfg, "training", "eval_interval", 30.into());
    set(&mut cfg, "training", "valid_limit", 8.into());
    set(&mut cfg, "eval", "limit", 12.into());
    set(&mut cfg, "eval", "sweep_k_p", toml::Value::Array(vec![1.into(), 5.into(), 30.into()]));
    set(&mut cfg, "eval", "sweep_seeds", toml::Value::Array(vec![1.into()]));
    let path = dir.join("run.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

fn small_corpus(dir: &Path, seed: u64) {
    ok(&[
        "corpus", "--out", s(dir), "--users", "30", "--pairs-per-user", "16", "--vocab-size", "800", "--seed",
        &seed.to_string(),
    ]);
}

/// A corpus and a 60-step run shared by the generate and eval tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        small_corpus(&root.join("corpus"), 7);
        let cfg = write_config(&root, &root.join("corpus"), 60);
        let run = root.join("run");
        ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
        Fixture { _dir: dir, root, run }
    })
}

#[test]
fn corpus_summary_lists_default_users_and_reingests() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["corpus", "--out", s(dir.path())]);
    assert!(out.contains("# Users"), "{out}");
    assert!(out.contains("Avg. history length"), "{out}");
    let users = out.lines().find(|l| l.starts_with("# Users")).unwrap();
    assert_eq!(users.split_whitespace().last(), Some("200"));
    let corpus = Corpus::ingest(&dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.users.len(), 200);
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn bad_argument_type_is_a_usage_error() {
    let out = run(&["corpus", "--out", "x", "--seed", "seven"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["train", "--config", "c.toml", "--out", "r", "--ablate", "everything"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_corpus_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("nowhere"), 10);
    let out = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn smoke_training_writes_checkpoints_and_config_snapshot() {
    let f = fixture();
    let ck: Vec<_> = std::fs::read_dir(f.run.join("checkpoints")).unwrap().collect();
    assert!(!ck.is_empty());
    for file in ["config.toml", "model.bin", "train.log", "summary.json", "topics.bin", "vocab.txt"] {
        assert!(f.run.join(file).exists(), "{file} missing");
    }
}

#[test]
fn every_ablation_flag_trains() {
    let f = fixture();
    let cfg = f.root.join("run.toml");
    for name in ["user-refiner", "topic-refiner", "token-refiner", "sim-profile", "per-profile", "joint-training"] {
        let out = f.root.join(format!("ablate-{name}"));
        ok(&["train", "--config", s(&cfg), "--out", s(&out), "--ablate", name, "--max-steps", "3"]);
        assert!(out.join("model.bin").exists());
    }
}

#[test]
fn interrupted_training_resumes_identically() {
    let f = fixture();
    let cfg = f.root.join("run.toml");
    let resumed = f.root.join("resumed");
    ok(&["train", "--config", s(&cfg), "--out", s(&resumed), "--max-steps", "30"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&resumed), "--resume"]);
    assert_eq!(lines(&resumed.join("train.log")), lines(&f.run.join("train.log")));
    assert_eq!(
        std::fs::read(resumed.join("model.bin")).unwrap(),
        std::fs::read(f.run.join("model.bin")).unwrap()
    );
}

#[test]
fn generation_is_seeded_and_profiles_change_outputs() {
    let f = fixture();
    let out = |name: &str| f.root.join("gen").join(name);
    ok(&["generate", "--run", s(&f.run), "--out", s(&out("a.txt")), "--seed", "4", "--dump-profiles"]);
    ok(&["generate", "--run", s(&f.run), "--out", s(&out("b.txt")), "--seed", "4"]);
    ok(&["generate", "--run", s(&f.run), "--out", s(&out("c.txt")), "--seed", "4", "--no-profile"]);
    let (a, b, c) = (lines(&out("a.txt")), lines(&out("b.txt")), lines(&out("c.txt")));
    assert_eq!(a, b);
    assert_eq!(a.len(), 12);
    let differ = a.iter().zip(&c).filter(|(x, y)| x != y).count();
    assert!(differ * 2 >= a.len(), "only {differ}/{} differ", a.len());
    let dump = lines(&out("a.txt.profiles"));
    let row = dump.iter().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(row.split(", ").count(), 4, "{row}");
    assert!(out("config.toml").exists());
}

#[test]
fn empty_query_lines_are_skipped_with_a_warning() {
    let f = fixture();
    let corpus = Corpus::ingest(&f.root.join("corpus/corpus.jsonl")).unwrap();
    let user = &corpus.users[0];
    let query = corpus.vocab.decode(&user.pairs[0].query);
    let queries = f.root.join("queries.tsv");
    std::fs::write(&queries, format!("{}\t{query}\n\n{}\t  \nstranger\t{query}\n", user.user_id, user.user_id)).unwrap();
    let out_path = f.root.join("q").join("out.txt");
    let out = run(&["generate", "--run", s(&f.run), "--queries", s(&queries), "--out", s(&out_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty query skipped"));
    assert_eq!(lines(&out_path).len(), 2);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let f = fixture();
    let other = f.root.join("other-corpus");
    small_corpus(&other, 8);
    let run_copy = f.root.join("mismatched");
    std::fs::create_dir_all(&run_copy).unwrap();
    for file in ["model.bin", "topics.bin", "vocab.txt"] {
        std::fs::copy(f.run.join(file), run_copy.join(file)).unwrap();
    }
    let mut cfg: toml::Table = toml::from_str(&std::fs::read_to_string(f.run.join("config.toml")).unwrap()).unwrap();
    cfg["corpus"].as_table_mut().unwrap().insert("path".into(), s(&other.join("corpus.jsonl")).into());
    std::fs::write(run_copy.join("config.toml"), toml::to_string(&cfg).unwrap()).unwrap();
    let out = run(&["generate", "--run", s(&run_copy), "--out", s(&f.root.join("mm.txt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}

#[test]
fn self_evaluation_scores_full_overlap() {
    let f = fixture();
    let gen = f.root.join("self").join("gen.txt");
    ok(&["generate", "--run", s(&f.run), "--out", s(&gen)]);
    let refs = PathBuf::from(format!("{}.references", gen.display()));
    let hist = PathBuf::from(format!("{}.histories", gen.display()));
    let report = f.root.join("self").join("report");
    let stdout = ok(&["eval", "--responses", s(&refs), "--references", s(&refs), "--histories", s(&hist), "--out", s(&report)]);
    let csv = lines(&report.join("report.csv"));
    let bleu1 = csv.iter().find(|l| l.starts_with("BLEU-1,")).unwrap();
    assert_eq!(bleu1.split(',').nth(1).unwrap().parse::<f64>().unwrap(), 100.0);
    for metric in [
        "BLEU-1", "BLEU-2", "ROUGE-L", "Dist-1", "Dist-2", "Average", "Extrema", "Greedy", "P-F1", "P-Cover",
    ] {
        assert!(stdout.contains(metric), "{metric} missing");
    }
    assert!(csv.len() >= 13);
    assert!(report.join("config.toml").exists());
}

#[test]
fn misaligned_eval_inputs_report_counts() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("r.txt"), "a b\nc d\n").unwrap();
    std::fs::write(p("f.txt"), "a b\n").unwrap();
    std::fs::write(p("h.txt"), "[\"a\"]\n[\"c\"]\n").unwrap();
    let out = run(&[
        "eval", "--responses", s(&p("r.txt")), "--references", s(&p("f.txt")), "--histories", s(&p("h.txt")), "--out",
        s(&p("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("2 responses") && err.contains("1 references"), "{err}");
}

#[test]
fn sweep_writes_one_row_per_k_p() {
    let f = fixture();
    let out = f.root.join("sweep");
    ok(&["eval", "--run", s(&f.run), "--sweep", "k_p", "--out", s(&out)]);
    let csv = lines(&out.join("sweep_k_p.csv"));
    assert_eq!(csv.len(), 1 + 3);
    let ks: Vec<&str> = csv[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["1", "5", "30"]);
    assert!(out.join("config.toml").exists());
}

#[test]
fn bm25_baseline_mode_reports() {
    let f = fixture();
    let out = f.root.join("bm25");
    ok(&["eval", "--run", s(&f.run), "--mode", "bm25-baseline", "--out", s(&out)]);
    assert!(out.join("report.csv").exists());
    let snapshot = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snapshot.to_lowercase().contains("bm25"), "{snapshot}");
}
