//! Plain-Rust layer behind the Python functions, testable without an
//! interpreter.

use std::collections::BTreeMap;
use std::path::Path;

use refinedial::corpus::synthetic::{generate as synthesize_corpus, SyntheticSpec};
use refinedial::corpus::{Corpus, Vocabulary};
use refinedial::experiment::{profiles_for_query, respond as respond_one, TrainedRun};
use refinedial::metrics::{self, Stopwords};
use refinedial::pipeline::Ablation;
use refinedial::Result;

pub fn synthesize(
    out: &Path,
    users: usize,
    pairs_per_user: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<BTreeMap<&'static str, f64>> {
    let spec = SyntheticSpec {
        users,
        pairs_per_user,
        vocab_size,
        seed,
        ..SyntheticSpec::default()
    };
    synthesize_corpus(&spec)?.write(out)?;
    let s = Corpus::ingest(&out.join("corpus.jsonl"))?.stats();
    Ok(BTreeMap::from([
        ("users", s.users as f64),
        ("pairs", s.pairs as f64),
        ("avg_history_length", s.avg_history_length),
        ("avg_response_tokens", s.avg_response_tokens),
        ("vocab_size", s.vocab_size as f64),
    ]))
}

pub fn bleu(candidate: &str, reference: &str, n: usize) -> Result<f64> {
    let mut v = Vocabulary::new();
    let (c, r) = (v.encode_growing(candidate), v.encode_growing(reference));
    metrics::bleu(&c, &r, n)
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let mut v = Vocabulary::new();
    let (c, r) = (v.encode_growing(candidate), v.encode_growing(reference));
    metrics::rouge_l(&c, &r)
}

pub fn distinct(candidates: &[String], n: usize) -> Result<f64> {
    let mut v = Vocabulary::new();
    let ids: Vec<Vec<usize>> = candidates.iter().map(|c| v.encode_growing(c)).collect();
    let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    metrics::distinct(&refs, n)
}

pub fn persona_f1(response: &str, history: &[String], stopwords: &[String]) -> f64 {
    let mut v = Vocabulary::new();
    let r = v.encode_growing(response);
    let h: Vec<Vec<usize>> = history.iter().map(|s| v.encode_growing(s)).collect();
    let stop = Stopwords::new(stopwords.iter().filter_map(|w| v.id(w)));
    let refs: Vec<&[usize]> = h.iter().map(Vec::as_slice).collect();
    metrics::persona_f1(&r, &refs, &stop)
}

/// A decoded response with the profiles it was conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub response: String,
    pub sim_profile: String,
    pub per_profile: String,
}

/// Samples one response per `(user, query)`; query `i` uses stream `i` of a
/// generator seeded with `seed`.
pub fn respond(run: &TrainedRun, queries: &[(Option<String>, String)], seed: u64, no_profile: bool) -> Result<Vec<Response>> {
    let ctx = run.ex.context(run.classifier.clone(), &run.model)?;
    let vocab = &run.ex.corpus.vocab;
    let ablation = if no_profile { Ablation::NoProfile } else { Ablation::None };
    queries
        .iter()
        .enumerate()
        .map(|(i, (user, text))| {
            let uid = user.as_deref().and_then(|u| run.ex.corpus.user_index(u));
            let query = vocab.encode(text);
            let profiles = profiles_for_query(&ctx, &run.model, uid, &query, ablation)?;
            let g = respond_one(&run.model, &profiles, &query, ablation, seed, i as u64)?;
            Ok(Response {
                response: vocab.decode(&g.response),
                sim_profile: vocab.decode(&g.sim_profile),
                per_profile: vocab.decode(&g.per_profile),
            })
        })
        .collect()
}
