//! The refiner cascade (user, topic, token) that turns a query and the
//! corpus into the `c_sim` and `c_per` profiles, plus the BM25 alternative.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TrainingTriplet};
use crate::encoder::{BagOfWords, SentenceEmbedder};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{kernels, Tensor};
use crate::token_refiner::{ProfileSource, ProfileTokens};
use crate::topic_refiner::{filter_history, with_fallback, TopicClassifier};
use crate::user_refiner::{DenseIndex, UserVector};

/// Parts of the system switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Random similar users instead of retrieved ones.
    UserRefiner,
    /// No topic filtering.
    TopicRefiner,
    /// Every retained token instead of the attention top-k.
    TokenRefiner,
    SimProfile,
    PerProfile,
    /// Refiner parameters never updated.
    JointTraining,
    /// Both profiles empty.
    NoProfile,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::None,
        Ablation::UserRefiner,
        Ablation::TopicRefiner,
        Ablation::TokenRefiner,
        Ablation::SimProfile,
        Ablation::PerProfile,
        Ablation::JointTraining,
        Ablation::NoProfile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::UserRefiner => "user-refiner",
            Ablation::TopicRefiner => "topic-refiner",
            Ablation::TokenRefiner => "token-refiner",
            Ablation::SimProfile => "sim-profile",
            Ablation::PerProfile => "per-profile",
            Ablation::JointTraining => "joint-training",
            Ablation::NoProfile => "no-profile",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// User, topic and token refiners.
    #[default]
    Refiners,
    /// BM25 retrieval of the current user's responses.
    Bm25,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_u: usize,
    pub k_p: usize,
    /// Sentence embedding dimension of the bag-of-words embedder.
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub aggregate: crate::user_refiner::Aggregate,
    pub normalize_users: bool,
    /// Similar users contribute only pairs older than the query.
    pub restrict_past: bool,
    pub fallback_recent: usize,
    pub selection: Selection,
    pub bm25_top: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_u: 10,
            k_p: 30,
            embed_dim: 128,
            embed_seed: 17,
            aggregate: crate::user_refiner::Aggregate::Sum,
            normalize_users: false,
            restrict_past: true,
            fallback_recent: 3,
            selection: Selection::Refiners,
            bm25_top: 15,
            bm25_k1: 1.2,
            bm25_b: 0.75,
        }
    }
}

/// Candidate history sentences for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Pools {
    pub users: Vec<usize>,
    /// Pair indices in the current user's history.
    pub retained_cur: Vec<usize>,
    /// (user, pair index) in similar users' histories.
    pub retained_sim: Vec<(usize, usize)>,
    /// Tokens in all candidate history responses before any refinement.
    pub full: usize,
}

/// Profiles for one query plus bookkeeping about what was considered.
#[derive(Clone, Debug, PartialEq)]
pub struct Profiles {
    pub sim: ProfileTokens,
    pub per: ProfileTokens,
    pub similar_users: Vec<usize>,
    /// (user, pair index) of every history response handed to the token
    /// refiner, current user first.
    pub retained_cur: Vec<usize>,
    pub retained_sim: Vec<(usize, usize)>,
    /// Tokens in all candidate history responses before any refinement.
    pub full_history_tokens: usize,
}

/// Everything precomputed from a corpus for fast profile extraction.
pub struct Context<'a> {
    pub corpus: &'a Corpus,
    pub cfg: PipelineConfig,
    pub embedder: BagOfWords,
    pub classifier: TopicClassifier,
    /// Predicted topic of every pair's query, `[user][pair]`.
    pub pair_topics: Vec<Vec<usize>>,
    /// `prefix[u][n]` is the user vector of the first `n` pairs.
    prefix: Vec<Vec<Vec<f64>>>,
    pub index: DenseIndex,
    query_enc: Vec<Vec<Tensor>>,
    response_enc: Vec<Vec<Tensor>>,
}

impl<'a> Context<'a> {
    /// `index_cutoff` is the last timestamp whose pairs may enter the user
    /// index (the end of the training period).
    pub fn new(
        corpus: &'a Corpus,
        cfg: PipelineConfig,
        classifier: TopicClassifier,
        model: &Model,
        index_cutoff: u64,
    ) -> Result<Self> {
        let embedder = BagOfWords::seeded(corpus.vocab.len(), cfg.embed_dim, cfg.embed_seed);
        if classifier.dim() != embedder.dim() {
            return Err(Error::Config(format!(
                "topic classifier expects {}-dimensional embeddings, pipeline produces {}",
                classifier.dim(),
                embedder.dim()
            )));
        }
        let d = embedder.dim();
        let mut pair_topics = Vec::with_capacity(corpus.users.len());
        let mut prefix = Vec::with_capacity(corpus.users.len());
        for h in &corpus.users {
            let mut topics = Vec::with_capacity(h.pairs.len());
            let mut acc = vec![vec![0.0; 2 * d]];
            for p in &h.pairs {
                let q = embedder.embed(&p.query)?.vector;
                let r = embedder.embed(&p.response)?.vector;
                topics.push(kernels::argmax(&classifier.logits(&q)?));
                let mut next = acc.last().expect("non-empty").clone();
                next[..d].iter_mut().zip(&q).for_each(|(a, b)| *a += b);
                next[d..].iter_mut().zip(&r).for_each(|(a, b)| *a += b);
                acc.push(next);
            }
            if cfg.aggregate == crate::user_refiner::Aggregate::Mean {
                for (n, v) in acc.iter_mut().enumerate().skip(1) {
                    v.iter_mut().for_each(|x| *x /= n as f64);
                }
            }
            pair_topics.push(topics);
            prefix.push(acc);
        }
        let vectors: Vec<UserVector> = corpus
            .users
            .iter()
            .enumerate()
            .filter_map(|(u, h)| {
                let n = h.pairs.partition_point(|p| p.ts <= index_cutoff);
                (n > 0).then(|| UserVector {
                    user: u,
                    vector: prefix[u][n].clone(),
                })
            })
            .collect();
        let index = DenseIndex::build(vectors, cfg.normalize_users)?;
        let mut ctx = Self {
            corpus,
            cfg,
            embedder,
            classifier,
            pair_topics,
            prefix,
            index,
            query_enc: Vec::new(),
            response_enc: Vec::new(),
        };
        ctx.refresh_encodings(model)?;
        Ok(ctx)
    }

    /// Re-encodes every query and response with the model's current encoder.
    pub fn refresh_encodings(&mut self, model: &Model) -> Result<()> {
        let users = &self.corpus.users;
        self.query_enc = users
            .iter()
            .map(|h| h.pairs.iter().map(|p| model.encode(&p.query)).collect())
            .collect::<Result<_>>()?;
        self.response_enc = users
            .iter()
            .map(|h| h.pairs.iter().map(|p| model.encode(&p.response)).collect())
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn query_encoding(&self, t: &TrainingTriplet) -> &Tensor {
        &self.query_enc[t.user][t.index]
    }

    pub fn response_encoding(&self, user: usize, index: usize) -> &Tensor {
        &self.response_enc[user][index]
    }

    /// Number of the user's pairs strictly before `ts`.
    pub fn history_len(&self, user: usize, ts: u64) -> usize {
        self.corpus.users[user].pairs.partition_point(|p| p.ts < ts)
    }

    /// Pairs of a similar user visible to a query at `ts`.
    pub fn visible_len(&self, user: usize, ts: u64) -> usize {
        if self.cfg.restrict_past {
            self.history_len(user, ts)
        } else {
            self.corpus.users[user].pairs.len()
        }
    }

    pub fn user_vector(&self, user: usize, n: usize) -> Option<UserVector> {
        (n > 0).then(|| UserVector {
            user,
            vector: self.prefix[user][n].clone(),
        })
    }

    /// Similar users by dense retrieval (or at random under the ablation).
    pub fn similar_users(&self, user: usize, n: usize, ablation: Ablation) -> Result<Vec<usize>> {
        if ablation == Ablation::UserRefiner {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.embed_seed ^ ((user as u64) << 20) ^ n as u64);
            let others: Vec<usize> = (0..self.corpus.users.len()).filter(|&u| u != user).collect();
            let k = self.cfg.k_u.min(others.len());
            let mut picked: Vec<usize> = sample(&mut rng, others.len(), k).into_iter().map(|i| others[i]).collect();
            picked.sort_unstable();
            return Ok(picked);
        }
        let Some(current) = self.user_vector(user, n) else {
            return Ok(Vec::new());
        };
        if self.index.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self
            .index
            .top_k_similar(&current, self.cfg.k_u)?
            .into_iter()
            .map(|(u, _)| u)
            .collect())
    }

    fn retain(&self, user: usize, n: usize, topic: usize, ablation: Ablation) -> Vec<usize> {
        if ablation == Ablation::TopicRefiner {
            return (0..n).collect();
        }
        let kept = filter_history(&self.pair_topics[user][..n], topic);
        with_fallback(kept, n, self.cfg.fallback_recent)
    }

    /// Profiles for a corpus triplet.
    pub fn profiles(&self, model: &Model, t: &TrainingTriplet, ablation: Ablation) -> Result<Profiles> {
        let topic = self.pair_topics[t.user][t.index];
        self.profiles_for(model, t.user, self.corpus.query(t), self.query_encoding(t), topic, t.index, t.ts, ablation)
    }

    /// Similar users and the topic-filtered history sentences of the current
    /// and similar users, before token selection.
    pub fn pools(&self, user: usize, n: usize, topic: usize, ts: u64, ablation: Ablation) -> Result<Pools> {
        let users = self.similar_users(user, n, ablation)?;
        let mut full = self.corpus.users[user].pairs[..n].iter().map(|p| p.response.len()).sum::<usize>();
        let retained_cur = self.retain(user, n, topic, ablation);
        let mut retained_sim = Vec::new();
        for &s in &users {
            let m = self.visible_len(s, ts);
            full += self.corpus.users[s].pairs[..m].iter().map(|p| p.response.len()).sum::<usize>();
            retained_sim.extend(self.retain(s, m, topic, ablation).into_iter().map(|i| (s, i)));
        }
        Ok(Pools {
            users,
            retained_cur,
            retained_sim,
            full,
        })
    }

    pub fn pools_of(&self, t: &TrainingTriplet, ablation: Ablation) -> Result<Pools> {
        self.pools(t.user, t.index, self.pair_topics[t.user][t.index], t.ts, ablation)
    }

    /// Profiles for an arbitrary query by `user` at time `ts`, whose own
    /// history is its first `n` pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn profiles_for(
        &self,
        model: &Model,
        user: usize,
        query: &[usize],
        query_enc: &Tensor,
        topic: usize,
        n: usize,
        ts: u64,
        ablation: Ablation,
    ) -> Result<Profiles> {
        let Pools {
            users,
            retained_cur,
            retained_sim,
            full,
        } = self.pools(user, n, topic, ts, ablation)?;
        let cur_pairs = &self.corpus.users[user].pairs[..n];

        if self.cfg.selection == Selection::Bm25 {
            let per = self.bm25_profile(model, user, n, query)?;
            return Ok(Profiles {
                sim: ProfileTokens::empty(ProfileSource::Sim),
                per,
                similar_users: Vec::new(),
                retained_cur: Vec::new(),
                retained_sim: Vec::new(),
                full_history_tokens: cur_pairs.iter().map(|p| p.response.len()).sum(),
            });
        }

        let k_p = self.cfg.k_p;
        let (sim, per) = match ablation {
            Ablation::NoProfile => (ProfileTokens::empty(ProfileSource::Sim), ProfileTokens::empty(ProfileSource::Cur)),
            Ablation::TokenRefiner => {
                let cap = self.all_tokens_cap(model, query.len());
                (
                    self.all_tokens(retained_sim.iter().copied(), cap, ProfileSource::Sim),
                    self.all_tokens(retained_cur.iter().map(|&i| (user, i)), cap, ProfileSource::Cur),
                )
            }
            _ => {
                let sim = if ablation == Ablation::SimProfile {
                    ProfileTokens::empty(ProfileSource::Sim)
                } else {
                    self.select(model, query_enc, &retained_sim, k_p, ProfileSource::Sim)?
                };
                let per = if ablation == Ablation::PerProfile {
                    ProfileTokens::empty(ProfileSource::Cur)
                } else {
                    let cur: Vec<(usize, usize)> = retained_cur.iter().map(|&i| (user, i)).collect();
                    self.select(model, query_enc, &cur, k_p, ProfileSource::Cur)?
                };
                (sim, per)
            }
        };
        Ok(Profiles {
            sim,
            per,
            similar_users: users,
            retained_cur,
            retained_sim,
            full_history_tokens: full,
        })
    }

    fn select(
        &self,
        model: &Model,
        query_enc: &Tensor,
        pairs: &[(usize, usize)],
        k_p: usize,
        source: ProfileSource,
    ) -> Result<ProfileTokens> {
        let responses: Vec<(&[usize], &Tensor)> = pairs
            .iter()
            .map(|&(u, i)| (self.corpus.users[u].pairs[i].response.as_slice(), &self.response_enc[u][i]))
            .collect();
        model.refiner.extract_profile(&model.store, query_enc, &responses, k_p, source)
    }

    /// Room per profile when every retained token is kept.
    fn all_tokens_cap(&self, model: &Model, query_len: usize) -> usize {
        let g = &model.cfg.generator;
        g.max_positions.saturating_sub(query_len + 1 + g.max_len) / 2
    }

    /// The most recent retained tokens up to `cap`, in chronological order.
    fn all_tokens(&self, pairs: impl DoubleEndedIterator<Item = (usize, usize)>, cap: usize, source: ProfileSource) -> ProfileTokens {
        let mut chunks = Vec::new();
        let mut total = 0;
        let mut ordered: Vec<(u64, usize, usize)> = pairs.map(|(u, i)| (self.corpus.users[u].pairs[i].ts, u, i)).collect();
        ordered.sort_unstable();
        for &(_, u, i) in ordered.iter().rev() {
            let r = &self.corpus.users[u].pairs[i].response;
            if total + r.len() > cap {
                break;
            }
            total += r.len();
            chunks.push(r.as_slice());
        }
        let tokens: Vec<usize> = chunks.into_iter().rev().flatten().copied().collect();
        ProfileTokens {
            scores: vec![1.0; tokens.len()],
            tokens,
            source,
        }
    }

    fn bm25_profile(&self, model: &Model, user: usize, n: usize, query: &[usize]) -> Result<ProfileTokens> {
        let docs: Vec<&[usize]> = self.corpus.users[user].pairs[..n].iter().map(|p| p.response.as_slice()).collect();
        if docs.is_empty() {
            return Ok(ProfileTokens::empty(ProfileSource::Cur));
        }
        let bm25 = Bm25::new(&docs, self.cfg.bm25_k1, self.cfg.bm25_b);
        let top = bm25.top(query, self.cfg.bm25_top);
        let cap = self.all_tokens_cap(model, query.len()) * 2;
        let mut tokens = Vec::new();
        let mut scores = Vec::new();
        for (doc, score) in top {
            if tokens.len() + docs[doc].len() > cap {
                break;
            }
            tokens.extend_from_slice(docs[doc]);
            scores.extend(std::iter::repeat(score).take(docs[doc].len()));
        }
        Ok(ProfileTokens {
            tokens,
            scores,
            source: ProfileSource::Cur,
        })
    }
}

/// Okapi BM25 over token-id documents.
pub struct Bm25<'d> {
    docs: &'d [&'d [usize]],
    df: HashMap<usize, usize>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

impl<'d> Bm25<'d> {
    pub fn new(docs: &'d [&'d [usize]], k1: f64, b: f64) -> Self {
        let mut df = HashMap::new();
        for d in docs {
            let mut seen: Vec<usize> = d.to_vec();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let avg_len = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / docs.len().max(1) as f64;
        Self { docs, df, avg_len, k1, b }
    }

    fn idf(&self, t: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = *self.df.get(&t).unwrap_or(&0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn score(&self, query: &[usize], doc: usize) -> f64 {
        let d = self.docs[doc];
        let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
        for &t in d {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        let norm = self.k1 * (1.0 - self.b + self.b * d.len() as f64 / self.avg_len.max(f64::MIN_POSITIVE));
        query
            .iter()
            .map(|t| {
                let f = tf.get(t).copied().unwrap_or(0.0);
                self.idf(*t) * f * (self.k1 + 1.0) / (f + norm)
            })
            .sum()
    }

    /// The `k` best documents, ties broken towards the most recent.
    pub fn top(&self, query: &[usize], k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.docs.len()).map(|i| (i, self.score(query, i))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
        scored.truncate(k);
        scored
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("everything").is_err());
    }

    #[test]
    fn bm25_prefers_matching_documents() {
        let docs: Vec<&[usize]> = vec![&[1, 2, 3], &[4, 5, 6, 7], &[4, 4, 8]];
        let bm = Bm25::new(&docs, 1.2, 0.75);
        let top = bm.top(&[4], 3);
        assert_eq!(top[0].0, 2);
        assert_eq!(top[1].0, 1);
        assert_eq!(top[2].1, 0.0);
        // Hand value for doc 1: idf = ln((3 - 2 + .5)/(2 + .5) + 1), tf = 1.
        let idf = (1.5f64 / 2.5 + 1.0).ln();
        let norm = 1.2 * (1.0 - 0.75 + 0.75 * 4.0 / (10.0 / 3.0));
        assert!((bm.score(&[4], 1) - idf * 2.2 / (1.0 + norm)).abs() < 1e-12);
        assert_eq!(bm.top(&[99], 2).iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 1]);
    }
}
