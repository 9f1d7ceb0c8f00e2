//! Synthetic personalised corpus with planted interest clusters, topic
//! labels and per-user, per-topic signature tokens.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_jsonl, Record};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub users: usize,
    pub clusters: usize,
    pub topics: usize,
    pub pairs_per_user: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Tokens reserved for each topic's queries.
    pub query_vocab: usize,
    /// Tokens reserved for each (cluster, topic) cell.
    pub cell_vocab: usize,
    /// Signature tokens of each (user, topic); every response carries one.
    pub signatures_per_topic: usize,
    pub filler_vocab: usize,
    /// Probability that a user talks about the cluster's home topic rather
    /// than a uniformly drawn one.
    pub home_topic_bias: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 200,
            clusters: 5,
            topics: 5,
            pairs_per_user: 40,
            vocab_size: 2000,
            seed: 7,
            query_vocab: 30,
            cell_vocab: 10,
            signatures_per_topic: 1,
            filler_vocab: 30,
            home_topic_bias: 0.4,
        }
    }
}

const MIN_NOISE: usize = 50;
const QUERY_TOPIC_TOKENS: usize = 4;
const RESPONSE_SIGNATURES: usize = 1;
const RESPONSE_CELL_TOKENS: usize = 4;
const RESPONSE_FILLERS: usize = 1;
const RESPONSE_NOISE: usize = 3;

/// Generated records plus the planted ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub records: Vec<Record>,
    /// Cluster of each user, keyed by user id.
    pub clusters: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Truth {
    spec: SyntheticSpec,
    clusters: BTreeMap<String, usize>,
}

impl SyntheticSpec {
    fn reserved_tokens(&self) -> usize {
        super::vocab::NUM_RESERVED
            + 1
            + self.filler_vocab
            + self.topics * self.query_vocab
            + self.clusters * self.topics * self.cell_vocab
            + self.users * self.topics * self.signatures_per_topic
    }

    pub fn noise_vocab(&self) -> usize {
        self.vocab_size.saturating_sub(self.reserved_tokens())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("users", self.users),
            ("clusters", self.clusters),
            ("topics", self.topics),
            ("pairs_per_user", self.pairs_per_user),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synthetic {name} must be positive")));
            }
        }
        if self.topics < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 topics".into()));
        }
        if self.query_vocab < QUERY_TOPIC_TOKENS
            || self.cell_vocab < RESPONSE_CELL_TOKENS
            || self.signatures_per_topic < RESPONSE_SIGNATURES
            || self.filler_vocab < RESPONSE_FILLERS
        {
            return Err(Error::Config("synthetic sub-vocabularies too small for one sentence".into()));
        }
        if !(0.0..=1.0).contains(&self.home_topic_bias) {
            return Err(Error::Config("home_topic_bias must lie in [0, 1]".into()));
        }
        if self.noise_vocab() < MIN_NOISE {
            return Err(Error::Config(format!(
                "vocab_size {} too small: disjoint vocabularies need {} ids plus {MIN_NOISE} noise tokens",
                self.vocab_size,
                self.reserved_tokens()
            )));
        }
        Ok(())
    }
}

pub fn user_name(u: usize) -> String {
    format!("u{u:05}")
}

pub fn filler_token(i: usize) -> String {
    format!("f{i}")
}

pub fn query_token(topic: usize, i: usize) -> String {
    format!("q{topic}_{i}")
}

pub fn cell_token(cluster: usize, topic: usize, i: usize) -> String {
    format!("c{cluster}t{topic}_{i}")
}

pub fn signature_token(user: usize, topic: usize, i: usize) -> String {
    format!("s{user}t{topic}_{i}")
}

pub fn noise_token(i: usize) -> String {
    format!("n{i}")
}

/// Builds the corpus; the same spec always yields the same records.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let user_cluster: Vec<usize> = (0..spec.users).map(|u| u % spec.clusters).collect();
    let noise = spec.noise_vocab();

    // A global interleaving of who answers at each timestamp.
    let mut schedule: Vec<usize> = (0..spec.users)
        .flat_map(|u| std::iter::repeat(u).take(spec.pairs_per_user))
        .collect();
    schedule.shuffle(&mut rng);

    let mut records = Vec::with_capacity(schedule.len());
    for (ts, &u) in schedule.iter().enumerate() {
        let c = user_cluster[u];
        let topic = if rng.gen_bool(spec.home_topic_bias) {
            c % spec.topics
        } else {
            rng.gen_range(0..spec.topics)
        };

        let mut query: Vec<String> = rand::seq::index::sample(&mut rng, spec.query_vocab, QUERY_TOPIC_TOKENS)
            .into_iter()
            .map(|i| query_token(topic, i))
            .collect();
        query.push(filler_token(rng.gen_range(0..spec.filler_vocab)));
        query.shuffle(&mut rng);

        let mut response: Vec<String> = Vec::new();
        response.extend(
            rand::seq::index::sample(&mut rng, spec.signatures_per_topic, RESPONSE_SIGNATURES)
                .into_iter()
                .map(|i| signature_token(u, topic, i)),
        );
        response.extend(
            rand::seq::index::sample(&mut rng, spec.cell_vocab, RESPONSE_CELL_TOKENS)
                .into_iter()
                .map(|i| cell_token(c, topic, i)),
        );
        response.extend((0..RESPONSE_FILLERS).map(|_| filler_token(rng.gen_range(0..spec.filler_vocab))));
        response.extend((0..RESPONSE_NOISE).map(|_| noise_token(rng.gen_range(0..noise))));
        response.shuffle(&mut rng);

        records.push(Record {
            user_id: user_name(u),
            ts: ts as u64,
            query: query.join(" "),
            response: response.join(" "),
            topic: Some(topic),
        });
    }
    let clusters = user_cluster
        .iter()
        .enumerate()
        .map(|(u, &c)| (user_name(u), c))
        .collect();
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        records,
        clusters,
    })
}

impl SyntheticCorpus {
    /// Writes `corpus.jsonl` and the `truth.json` sidecar into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&self.records, &dir.join("corpus.jsonl"))?;
        let truth = Truth {
            spec: self.spec.clone(),
            clusters: self.clusters.clone(),
        };
        let text = serde_json::to_string_pretty(&truth).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("truth.json"), text + "\n")?;
        Ok(())
    }

    /// Reads the planted clusters back from a `truth.json` sidecar.
    pub fn read_clusters(path: &Path) -> Result<BTreeMap<String, usize>> {
        let text = std::fs::read_to_string(path)?;
        let truth: Truth = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Ok(truth.clusters)
    }
}

/// Parses a synthetic token back to the (cluster, topic) cell it was drawn
/// from, if it is a cell token.
pub fn cell_of(token: &str) -> Option<(usize, usize)> {
    let rest = token.strip_prefix('c')?;
    let (c, rest) = rest.split_once('t')?;
    let (t, _) = rest.split_once('_')?;
    Some((c.parse().ok()?, t.parse().ok()?))
}

/// Topic of a query token, if it is one.
pub fn query_topic_of(token: &str) -> Option<usize> {
    let (t, _) = token.strip_prefix('q')?.split_once('_')?;
    t.parse().ok()
}
