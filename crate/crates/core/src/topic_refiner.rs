//! Topic classification of queries and hard-argmax history filtering.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SentenceEmbedder;
use crate::error::{contract, Error, Result};
use crate::nn::{Binding, Linear};
use crate::tensor::checkpoint::Container;
use crate::tensor::{kernels, OptimizerState, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicConfig {
    pub topics: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Most recent pairs handed on when filtering keeps nothing.
    pub fallback_recent: usize,
}

impl Default for TopicConfig {
    fn default() -> Self {
        Self {
            topics: 5,
            hidden: 32,
            epochs: 200,
            batch_size: 64,
            lr: 0.01,
            seed: 11,
            fallback_recent: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicDistribution {
    pub logits: Vec<f64>,
    pub argmax: usize,
}

/// One-hidden-layer MLP from a sentence embedding to topic logits.
#[derive(Clone, Debug)]
pub struct TopicClassifier {
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
    dim: usize,
    hidden: usize,
    topics: usize,
}

impl TopicClassifier {
    pub fn new(dim: usize, hidden: usize, topics: usize, seed: u64) -> Result<Self> {
        if topics < 2 {
            return contract(format!("topic count must be at least 2, got {topics}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "topic.l1", dim, hidden, true, &mut rng)?;
        let l2 = Linear::new(&mut store, "topic.l2", hidden, topics, true, &mut rng)?;
        Ok(Self {
            store,
            l1,
            l2,
            dim,
            hidden,
            topics,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": "refinedial-topic-classifier",
            "dim": self.dim,
            "hidden": self.hidden,
            "topics": self.topics,
        });
        let mut c = Container::new(header);
        c.extend_from_store(&self.store);
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.header["kind"] != "refinedial-topic-classifier" {
            return Err(Error::Format(format!("{} is not a topic classifier", path.display())));
        }
        let field = |k: &str| {
            c.header[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("topic classifier header lacks `{k}`")))
        };
        let mut cls = Self::new(field("dim")?, field("hidden")?, field("topics")?, 0)?;
        c.load_into(&mut cls.store)?;
        Ok(cls)
    }

    pub fn topics(&self) -> usize {
        self.topics
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, tape: &mut Tape, p: Binding, x: crate::tensor::Var) -> Result<crate::tensor::Var> {
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.tanh(h);
        self.l2.forward(tape, p, h)
    }

    /// Logits for an already embedded sentence.
    pub fn logits(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1, embedding.len()], embedding.to_vec())?;
        let y = self.forward(&mut tape, Binding::frozen(&self.store), x)?;
        Ok(tape.value(y).to_vec())
    }

    pub fn classify(&self, query: &[usize], embedder: &dyn SentenceEmbedder) -> Result<TopicDistribution> {
        if query.is_empty() {
            return contract("cannot classify an empty query");
        }
        let e = embedder.embed(query)?;
        let logits = self.logits(&e.vector)?;
        let argmax = kernels::argmax(&logits);
        Ok(TopicDistribution { logits, argmax })
    }

    pub fn accuracy(&self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let mut hits = 0;
        for (e, &l) in embeddings.iter().zip(labels) {
            if kernels::argmax(&self.logits(e)?) == l {
                hits += 1;
            }
        }
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCurve {
    pub epoch_loss: Vec<f64>,
}

/// Minibatch Adam on cross entropy over pre-computed sentence embeddings.
pub fn train_topic_classifier(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    cfg: &TopicConfig,
) -> Result<(TopicClassifier, TrainingCurve)> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return contract("topic training needs one label per embedding and at least one example");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.topics) {
        return contract(format!("topic label {bad} outside 0..{}", cfg.topics));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < cfg.topics {
        return contract(format!(
            "only {} distinct topic labels for {} topics",
            distinct.len(),
            cfg.topics
        ));
    }
    let dim = embeddings[0].len();
    let mut cls = TopicClassifier::new(dim, cfg.hidden, cfg.topics, cfg.seed)?;
    let ids: Vec<_> = cls.store.ids().collect();
    let mut opt = OptimizerState::adam(cfg.lr, &cls.store, ids);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| embeddings[i].iter().copied()).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(&Tensor::new(vec![chunk.len(), dim], x)?);
            let logits = cls.forward(&mut tape, Binding::trainable(&cls.store), xv)?;
            let loss = tape.cross_entropy(logits, &y, None)?;
            total += tape.scalar(loss) * chunk.len() as f64;
            tape.backward(loss)?;
            cls.store.zero_grad();
            cls.store.accumulate_from(&tape);
            opt.step(&mut cls.store)?;
        }
        let mean = total / labels.len() as f64;
        log::debug!("topic epoch {epoch} loss {mean:.6}");
        curve.push(mean);
    }
    Ok((cls, TrainingCurve { epoch_loss: curve }))
}

/// Positions of the pairs whose topic equals `current`, in order.
pub fn filter_history(topics: &[usize], current: usize) -> Vec<usize> {
    topics
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == current)
        .map(|(i, _)| i)
        .collect()
}

/// `retained`, or the last `recent` positions of a history of length `len`
/// when nothing was retained.
pub fn with_fallback(retained: Vec<usize>, len: usize, recent: usize) -> Vec<usize> {
    if retained.is_empty() {
        (len.saturating_sub(recent)..len).collect()
    } else {
        retained
    }
}

/// Seeded k-means (k-means++ initialisation) producing pseudo topic labels
/// for corpora without them.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || points.len() < k {
        return contract(format!("k-means needs at least k = {k} points, got {}", points.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centres: Vec<Vec<f64>> = vec![points[rng.gen_range(0..points.len())].clone()];
    while centres.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centres.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total == 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if target < *di {
                    pick = i;
                    break;
                }
                target -= di;
            }
            pick
        };
        centres.push(points[next].clone());
    }
    let mut assign = vec![0; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let d: Vec<f64> = centres.iter().map(|c| -dist2(p, c)).collect();
            let best = kernels::argmax(&d);
            changed |= best != assign[i];
            assign[i] = best;
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            centre.iter_mut().enumerate().for_each(|(j, x)| {
                *x = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            });
        }
        if !changed {
            break;
        }
    }
    Ok(assign)
}
