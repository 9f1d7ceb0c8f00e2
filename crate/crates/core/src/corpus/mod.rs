//! Dialogue data model, JSONL ingestion and chronological splitting.

pub mod synthetic;
pub mod vocab;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use vocab::Vocabulary;

/// One line of the corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub user_id: String,
    pub ts: u64,
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<usize>,
}

/// A (query, response) exchange where `user` is the responder.
#[derive(Clone, Debug, PartialEq)]
pub struct DialoguePair {
    pub query: Vec<usize>,
    pub response: Vec<usize>,
    pub user: usize,
    pub ts: u64,
    pub topic: Option<usize>,
}

/// Pairs answered by one user, sorted by timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_id: String,
    pub pairs: Vec<DialoguePair>,
}

impl UserHistory {
    /// Pairs strictly before `ts`.
    pub fn before(&self, ts: u64) -> &[DialoguePair] {
        let end = self.pairs.partition_point(|p| p.ts < ts);
        &self.pairs[..end]
    }
}

/// A training example: the `index`-th pair of `user`, whose history is
/// every earlier pair of the same user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainingTriplet {
    pub user: usize,
    pub index: usize,
    pub ts: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    /// Sorted by user id.
    pub users: Vec<UserHistory>,
}

impl Corpus {
    /// Reads a JSONL corpus, building a fresh vocabulary.
    pub fn ingest(path: &Path) -> Result<Self> {
        Self::ingest_inner(path, None)
    }

    /// Reads a JSONL corpus against a fixed vocabulary; unknown tokens map
    /// to the unknown id.
    pub fn ingest_with_vocab(path: &Path, vocab: Vocabulary) -> Result<Self> {
        Self::ingest_inner(path, Some(vocab))
    }

    fn ingest_inner(path: &Path, vocab: Option<Vocabulary>) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push((i + 1, rec));
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{}: corpus is empty", path.display())));
        }
        Self::build(records, vocab, Some(path))
    }

    /// Builds a corpus from in-memory records.
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        let numbered = records.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect();
        Self::build(numbered, None, None)
    }

    fn build(records: Vec<(usize, Record)>, vocab: Option<Vocabulary>, path: Option<&Path>) -> Result<Self> {
        let fixed = vocab.is_some();
        let mut vocab = vocab.unwrap_or_default();
        let err = |line: usize, msg: String| match path {
            Some(p) => Error::Parse {
                path: p.to_path_buf(),
                line,
                msg,
            },
            None => Error::Data(format!("record {line}: {msg}")),
        };
        let mut by_user: BTreeMap<String, Vec<(u64, usize, DialoguePair)>> = BTreeMap::new();
        let mut seen = HashSet::new();
        for (line, rec) in records {
            if !seen.insert((rec.user_id.clone(), rec.ts)) {
                return Err(err(
                    line,
                    format!("duplicate (user, ts) = ({}, {})", rec.user_id, rec.ts),
                ));
            }
            let (query, response) = if fixed {
                (vocab.encode(&rec.query), vocab.encode(&rec.response))
            } else {
                (vocab.encode_growing(&rec.query), vocab.encode_growing(&rec.response))
            };
            if query.is_empty() || response.is_empty() {
                return Err(err(line, "query and response must both be non-empty".into()));
            }
            by_user.entry(rec.user_id).or_default().push((
                rec.ts,
                line,
                DialoguePair {
                    query,
                    response,
                    user: 0,
                    ts: rec.ts,
                    topic: rec.topic,
                },
            ));
        }
        let users = by_user
            .into_iter()
            .enumerate()
            .map(|(u, (user_id, mut pairs))| {
                pairs.sort_by_key(|(ts, line, _)| (*ts, *line));
                UserHistory {
                    user_id,
                    pairs: pairs
                        .into_iter()
                        .map(|(_, _, mut p)| {
                            p.user = u;
                            p
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(Self { vocab, users })
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.users
            .binary_search_by(|u| u.user_id.as_str().cmp(user_id))
            .ok()
    }

    pub fn num_pairs(&self) -> usize {
        self.users.iter().map(|u| u.pairs.len()).sum()
    }

    /// One triplet per dialogue pair.
    pub fn triplets(&self) -> Vec<TrainingTriplet> {
        self.users
            .iter()
            .enumerate()
            .flat_map(|(u, h)| {
                h.pairs.iter().enumerate().map(move |(i, p)| TrainingTriplet {
                    user: u,
                    index: i,
                    ts: p.ts,
                })
            })
            .collect()
    }

    pub fn pair(&self, t: &TrainingTriplet) -> &DialoguePair {
        &self.users[t.user].pairs[t.index]
    }

    pub fn query(&self, t: &TrainingTriplet) -> &[usize] {
        &self.pair(t).query
    }

    pub fn response(&self, t: &TrainingTriplet) -> &[usize] {
        &self.pair(t).response
    }

    /// The responder's pairs strictly before the triplet.
    pub fn history(&self, t: &TrainingTriplet) -> &[DialoguePair] {
        &self.users[t.user].pairs[..t.index]
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = self
            .users
            .iter()
            .flat_map(|h| {
                h.pairs.iter().map(|p| Record {
                    user_id: h.user_id.clone(),
                    ts: p.ts,
                    query: self.vocab.decode(&p.query),
                    response: self.vocab.decode(&p.response),
                    topic: p.topic,
                })
            })
            .collect();
        out.sort_by(|a, b| (a.ts, &a.user_id).cmp(&(b.ts, &b.user_id)));
        out
    }

    /// Writes the corpus back out as JSONL, ordered by (ts, user).
    pub fn export(&self, path: &Path) -> Result<()> {
        write_jsonl(&self.to_records(), path)
    }

    /// Summary counts in the shape of a dataset statistics table.
    pub fn stats(&self) -> CorpusStats {
        let n = self.users.len();
        let pairs = self.num_pairs();
        let lens: Vec<usize> = self
            .users
            .iter()
            .flat_map(|u| u.pairs.iter().map(|p| p.response.len()))
            .collect();
        CorpusStats {
            users: n,
            pairs,
            avg_history_length: if n == 0 { 0.0 } else { pairs as f64 / n as f64 },
            avg_response_tokens: lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64,
            vocab_size: self.vocab.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub users: usize,
    pub pairs: usize,
    pub avg_history_length: f64,
    pub avg_response_tokens: f64,
    pub vocab_size: usize,
}

pub fn write_jsonl(records: &[Record], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Train/valid/test partition by global timestamp order.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<TrainingTriplet>,
    pub valid: Vec<TrainingTriplet>,
    pub test: Vec<TrainingTriplet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub ratios: [f64; 3],
    pub sizes: [usize; 3],
    /// Last timestamp in train and in valid.
    pub train_end_ts: u64,
    pub valid_end_ts: u64,
}

impl Split {
    pub fn manifest(&self, ratios: [f64; 3]) -> SplitManifest {
        SplitManifest {
            ratios,
            sizes: [self.train.len(), self.valid.len(), self.test.len()],
            train_end_ts: self.train.last().map_or(0, |t| t.ts),
            valid_end_ts: self.valid.last().map_or(0, |t| t.ts),
        }
    }
}

/// Sorts triplets by (ts, user, index) and cuts them contiguously.
pub fn chronological_split(triplets: &[TrainingTriplet], ratios: [f64; 3]) -> Result<Split> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Contract(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut sorted = triplets.to_vec();
    sorted.sort_by_key(|t| (t.ts, t.user, t.index));
    let n = sorted.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let test = sorted.split_off((n_train + n_valid).min(n));
    let valid = sorted.split_off(n_train.min(sorted.len()));
    let split = Split {
        train: sorted,
        valid,
        test,
    };
    if split.train.is_empty() || split.valid.is_empty() || split.test.is_empty() {
        return Err(Error::Data(format!(
            "split of {n} triplets with ratios {ratios:?} leaves an empty partition"
        )));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, ts: u64, q: &str, r: &str) -> Record {
        Record {
            user_id: user.into(),
            ts,
            query: q.into(),
            response: r.into(),
            topic: None,
        }
    }

    #[test]
    fn triplet_histories_are_strict_prefixes() {
        let c = Corpus::from_records(vec![
            rec("u1", 30, "c", "z"),
            rec("u1", 10, "a", "x"),
            rec("u2", 5, "q", "w"),
            rec("u1", 20, "b", "y"),
        ])
        .unwrap();
        let u1: Vec<_> = c.triplets().into_iter().filter(|t| t.user == 0).collect();
        let lens: Vec<usize> = u1.iter().map(|t| c.history(t).len()).collect();
        assert_eq!(lens, vec![0, 1, 2]);
        for t in c.triplets() {
            assert!(c.history(&t).iter().all(|p| p.ts < t.ts));
        }
        assert_eq!(c.users[0].before(20).len(), 1);
    }

    #[test]
    fn rejects_duplicates_and_empty_sides() {
        let dup = Corpus::from_records(vec![rec("u", 1, "a", "b"), rec("u", 1, "c", "d")]);
        assert!(dup.unwrap_err().to_string().contains("duplicate"));
        assert!(Corpus::from_records(vec![rec("u", 1, "  ", "b")]).is_err());
        assert!(Corpus::from_records(vec![]).is_err());
    }

    #[test]
    fn ingest_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"user_id\":\"a\",\"ts\":1,\"query\":\"x\",\"response\":\"y\"}\n{\"user_id\":\"a\",\"ts\":\"oops\"}\n",
        )
        .unwrap();
        let err = Corpus::ingest(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        std::fs::write(&p, "").unwrap();
        assert!(Corpus::ingest(&p).is_err());
    }

    #[test]
    fn export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let text = "{\"user_id\":\"a\",\"ts\":1,\"query\":\"x y\",\"response\":\"y\",\"topic\":2}\n\
                    {\"user_id\":\"b\",\"ts\":2,\"query\":\"x\",\"response\":\"z w\"}\n";
        std::fs::write(&p, text).unwrap();
        let c = Corpus::ingest(&p).unwrap();
        let out = dir.path().join("out.jsonl");
        c.export(&out).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), text);
    }

    #[test]
    fn split_sizes_and_ordering() {
        let triplets: Vec<_> = (0..100)
            .map(|i| TrainingTriplet {
                user: i % 7,
                index: i / 7,
                ts: i as u64,
            })
            .collect();
        let s = chronological_split(&triplets, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let max_train = s.train.iter().map(|t| t.ts).max().unwrap();
        let min_test = s.test.iter().map(|t| t.ts).min().unwrap();
        assert!(max_train <= min_test);

        let mut shuffled = triplets.clone();
        shuffled.reverse();
        shuffled.swap(3, 50);
        assert_eq!(chronological_split(&shuffled, [0.8, 0.1, 0.1]).unwrap(), s);

        assert!(chronological_split(&triplets, [0.5, 0.2, 0.2]).is_err());
        assert!(chronological_split(&triplets[..3], [0.98, 0.01, 0.01]).is_err());
    }
}
