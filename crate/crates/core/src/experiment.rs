//! End-to-end runs shared by the command line and the test suites: corpus
//! split, topic classifier, training, generation over held-out triplets and
//! scoring.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{chronological_split, Corpus, Split, SplitManifest, TrainingTriplet, Vocabulary};
use crate::encoder::{BagOfWords, SentenceEmbedder};
use crate::error::{Error, Result};
use crate::generator::build_input;
use crate::metrics::{evaluate, EmbeddingTable, EvalSample, IdfTable, MetricOptions, MetricReport, SampleScores, Stopwords};
use crate::model::Model;
use crate::pipeline::{Ablation, Context, Profiles};
use crate::token_refiner::{ProfileSource, ProfileTokens};
use crate::topic_refiner::{kmeans, train_topic_classifier, TopicClassifier, TrainingCurve};
use crate::trainer::Trainer;

/// A loaded corpus with its chronological split.
pub struct Experiment {
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub split: Split,
    pub manifest: SplitManifest,
}

/// Topic classifier plus how it was obtained.
pub struct TopicReport {
    pub classifier: TopicClassifier,
    pub curve: TrainingCurve,
    /// False when labels came from k-means over query embeddings.
    pub labelled: bool,
    /// Accuracy on the validation and test queries.
    pub held_out_accuracy: f64,
}

/// One generated response and the inputs that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub user: usize,
    pub index: usize,
    pub query: Vec<usize>,
    pub reference: Vec<usize>,
    pub response: Vec<usize>,
    pub sim_profile: Vec<usize>,
    pub per_profile: Vec<usize>,
    /// Max-attention score of each profile token.
    pub sim_scores: Vec<f64>,
    pub per_scores: Vec<f64>,
    /// Generator input length, including BOS.
    pub input_len: usize,
    /// Tokens in every candidate history response before refinement.
    pub full_history_tokens: usize,
    /// Nucleus size at each decoding step.
    pub nucleus_sizes: Vec<usize>,
}

/// A trained run directory, reloaded for generation or scoring.
pub struct TrainedRun {
    pub ex: Experiment,
    pub classifier: TopicClassifier,
    pub model: Model,
}

impl TrainedRun {
    /// Opens the run written by training under `dir`. `checkpoint` selects a
    /// checkpoint directory or parameter file instead of the final model.
    pub fn open(dir: &Path, checkpoint: Option<&Path>) -> Result<Self> {
        let config = dir.join("config.toml");
        if !config.exists() {
            return Err(Error::Data(format!("run config not found: {}", config.display())));
        }
        let ex = Experiment::load(RunConfig::load(&config)?)?;
        let saved = dir.join("vocab.txt");
        if saved.exists() && Vocabulary::load(&saved)? != ex.corpus.vocab {
            return Err(Error::Data(format!(
                "vocabulary of {} does not match the run's {}",
                ex.cfg.corpus.path.display(),
                saved.display()
            )));
        }
        let classifier = TopicClassifier::load(&dir.join("topics.bin"))?;
        let model_path = match checkpoint {
            Some(ck) if ck.is_dir() => ck.join("params.bin"),
            Some(ck) => ck.to_path_buf(),
            None => dir.join("model.bin"),
        };
        if !model_path.exists() {
            return Err(Error::Data(format!("model not found: {}", model_path.display())));
        }
        let model = Model::load(&model_path)?;
        if model.vocab_size != ex.corpus.vocab.len() {
            return Err(Error::Data(format!(
                "vocabulary mismatch: checkpoint has {} tokens, corpus has {}",
                model.vocab_size,
                ex.corpus.vocab.len()
            )));
        }
        Ok(Self { ex, classifier, model })
    }
}

impl Experiment {
    pub fn new(cfg: RunConfig, corpus: Corpus) -> Result<Self> {
        cfg.validate()?;
        let split = chronological_split(&corpus.triplets(), cfg.corpus.split)?;
        let manifest = split.manifest(cfg.corpus.split);
        Ok(Self {
            cfg,
            corpus,
            split,
            manifest,
        })
    }

    /// Reads the corpus named by the configuration.
    pub fn load(cfg: RunConfig) -> Result<Self> {
        let path = cfg.corpus.path.clone();
        if !path.exists() {
            return Err(Error::Data(format!("corpus not found: {}", path.display())));
        }
        let corpus = Corpus::ingest(&path)?;
        Self::new(cfg, corpus)
    }

    pub fn embedder(&self) -> BagOfWords {
        let p = &self.cfg.pipeline;
        BagOfWords::seeded(self.corpus.vocab.len(), p.embed_dim, p.embed_seed)
    }

    fn query_embeddings(&self, triplets: &[TrainingTriplet]) -> Result<Vec<Vec<f64>>> {
        let bow = self.embedder();
        triplets.iter().map(|t| Ok(bow.embed(self.corpus.query(t))?.vector)).collect()
    }

    /// Topic labels of `triplets`, if every pair carries one.
    fn labels(&self, triplets: &[TrainingTriplet]) -> Option<Vec<usize>> {
        triplets.iter().map(|t| self.corpus.pair(t).topic).collect()
    }

    /// Trains the query topic classifier on the training split, using planted
    /// labels when present and k-means clusters otherwise.
    pub fn train_topics(&self) -> Result<TopicReport> {
        let tc = &self.cfg.topics;
        let x = self.query_embeddings(&self.split.train)?;
        let (y, labelled) = match self.labels(&self.split.train) {
            Some(y) => (y, true),
            None => {
                log::info!("corpus has no topic labels; clustering queries into {} topics", tc.topics);
                (kmeans(&x, tc.topics, 50, tc.seed)?, false)
            }
        };
        let (classifier, curve) = train_topic_classifier(&x, &y, tc)?;
        let held: Vec<TrainingTriplet> = self.split.valid.iter().chain(&self.split.test).copied().collect();
        let held_out_accuracy = match (labelled, self.labels(&held)) {
            (true, Some(hy)) if !hy.is_empty() => classifier.accuracy(&self.query_embeddings(&held)?, &hy)?,
            _ => f64::NAN,
        };
        Ok(TopicReport {
            classifier,
            curve,
            labelled,
            held_out_accuracy,
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.corpus.vocab.len(), self.cfg.model.clone(), self.cfg.seed)
    }

    /// Refiner context whose user index covers the training period only.
    pub fn context(&self, classifier: TopicClassifier, model: &Model) -> Result<Context<'_>> {
        Context::new(
            &self.corpus,
            self.cfg.pipeline.clone(),
            classifier,
            model,
            self.manifest.train_end_ts,
        )
    }

    /// A fresh trainer for the configured run under `ablation`.
    pub fn trainer(&self, classifier: TopicClassifier, ablation: Ablation) -> Result<Trainer<'_>> {
        let model = self.model()?;
        let ctx = self.context(classifier, &model)?;
        let mut cfg = self.cfg.training.clone();
        cfg.ablation = ablation;
        Trainer::new(cfg, ctx, model, self.split.train.clone(), self.split.valid.clone())
    }

    /// The first `limit` test triplets (all when `limit` is 0) that have a
    /// non-empty history.
    pub fn test_triplets(&self, limit: usize) -> Vec<TrainingTriplet> {
        let usable = self.split.test.iter().filter(|t| t.index > 0).copied();
        if limit == 0 {
            usable.collect()
        } else {
            usable.take(limit).collect()
        }
    }

    /// Persona-metric stopwords from the configured token list.
    pub fn stopwords(&self) -> Stopwords {
        Stopwords::new(self.cfg.eval.stopwords.iter().filter_map(|w| self.corpus.vocab.id(w)))
    }

    /// IDF over the training responses.
    pub fn idf(&self) -> IdfTable {
        IdfTable::build(self.split.train.iter().map(|t| self.corpus.response(t)))
    }

    /// Scoring inputs: the responder's past responses form the history.
    pub fn samples(&self, generated: &[Generated]) -> Vec<EvalSample> {
        generated
            .iter()
            .map(|g| EvalSample {
                candidate: g.response.clone(),
                reference: g.reference.clone(),
                history: self.corpus.users[g.user].pairs[..g.index]
                    .iter()
                    .map(|p| p.response.clone())
                    .collect(),
            })
            .collect()
    }

    /// Full metric table for generated responses, with token embeddings
    /// taken from the model's generator.
    pub fn score(&self, model: &Model, generated: &[Generated]) -> Result<(MetricReport, Vec<SampleScores>)> {
        let table = EmbeddingTable::from_matrix(model.store.get(model.generator.tok))?;
        let opts = MetricOptions {
            coverage_target: self.cfg.eval.coverage_target,
        };
        evaluate(&self.samples(generated), &table, &self.idf(), &self.stopwords(), &opts)
    }

    /// Persona-F1 and the full table at each profile size, one report per
    /// sampling seed.
    pub fn sweep_k_p(
        &self,
        ctx: &mut Context<'_>,
        model: &Model,
        triplets: &[TrainingTriplet],
    ) -> Result<BTreeMap<usize, Vec<MetricReport>>> {
        let original = ctx.cfg.k_p;
        let mut out = BTreeMap::new();
        for &k in &self.cfg.eval.sweep_k_p {
            ctx.cfg.k_p = k;
            let mut reports = Vec::new();
            for &seed in &self.cfg.eval.sweep_seeds {
                let generated = generate(ctx, model, triplets, Ablation::None, seed)?;
                reports.push(self.score(model, &generated)?.0);
            }
            log::info!("k_p {k}: mean Persona-F1 {:.4}", mean_persona_f1(&reports));
            out.insert(k, reports);
        }
        ctx.cfg.k_p = original;
        Ok(out)
    }
}

pub fn mean_persona_f1(reports: &[MetricReport]) -> f64 {
    reports.iter().map(|r| r.persona_f1).sum::<f64>() / reports.len().max(1) as f64
}

/// Samples one response per triplet. Sample `i` draws from its own stream of
/// a generator seeded with `seed`, so results do not depend on batching.
pub fn generate(
    ctx: &Context<'_>,
    model: &Model,
    triplets: &[TrainingTriplet],
    ablation: Ablation,
    seed: u64,
) -> Result<Vec<Generated>> {
    triplets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let profiles = ctx.profiles(model, t, ablation)?;
            let mut g = respond(model, &profiles, ctx.corpus.query(t), ablation, seed, i as u64)?;
            g.user = t.user;
            g.index = t.index;
            g.reference = ctx.corpus.response(t).to_vec();
            Ok(g)
        })
        .collect()
}

/// Profiles for a query outside the corpus. A known user sees their whole
/// history and every similar user's; an unknown user gets empty profiles.
pub fn profiles_for_query(
    ctx: &Context<'_>,
    model: &Model,
    user: Option<usize>,
    query: &[usize],
    ablation: Ablation,
) -> Result<Profiles> {
    let empty = || Profiles {
        sim: ProfileTokens::empty(ProfileSource::Sim),
        per: ProfileTokens::empty(ProfileSource::Cur),
        similar_users: Vec::new(),
        retained_cur: Vec::new(),
        retained_sim: Vec::new(),
        full_history_tokens: 0,
    };
    let Some(user) = user else {
        return Ok(empty());
    };
    let topic = ctx.classifier.classify(query, &ctx.embedder)?.argmax;
    let n = ctx.corpus.users[user].pairs.len();
    let enc = model.encode(query)?;
    ctx.profiles_for(model, user, query, &enc, topic, n, u64::MAX, ablation)
}

/// Samples a response to `query` given its profiles, from stream `stream`
/// of a generator seeded with `seed`.
pub fn respond(
    model: &Model,
    profiles: &Profiles,
    query: &[usize],
    ablation: Ablation,
    seed: u64,
    stream: u64,
) -> Result<Generated> {
    let g = &model.cfg.generator;
    let generator = if ablation == Ablation::NoProfile {
        model.nonpersonal_generator()
    } else {
        &model.generator
    };
    let input = build_input(&profiles.sim, &profiles.per, query)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (response, nucleus_sizes) = generator.nucleus_sample(&model.store, &input, g.top_p, g.max_len, &mut rng)?;
    Ok(Generated {
        user: 0,
        index: 0,
        query: query.to_vec(),
        reference: Vec::new(),
        response,
        sim_profile: profiles.sim.tokens.clone(),
        per_profile: profiles.per.tokens.clone(),
        sim_scores: profiles.sim.scores.clone(),
        per_scores: profiles.per.scores.clone(),
        input_len: input.len(),
        full_history_tokens: profiles.full_history_tokens,
        nucleus_sizes,
    })
}

impl Generated {
    /// Debug dump of both profiles, `rank, token, score, source` per line.
    pub fn profile_dump(&self, vocab: &crate::corpus::Vocabulary) -> Vec<String> {
        let sim = ProfileTokens {
            tokens: self.sim_profile.clone(),
            scores: self.sim_scores.clone(),
            source: ProfileSource::Sim,
        };
        let per = ProfileTokens {
            tokens: self.per_profile.clone(),
            scores: self.per_scores.clone(),
            source: ProfileSource::Cur,
        };
        let mut lines = sim.dump(vocab);
        lines.extend(per.dump(vocab));
        lines
    }
}

/// One JSON object per generated response, tokens decoded.
pub fn write_generations(corpus: &Corpus, generated: &[Generated], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in generated {
        let user = &corpus.users[g.user].user_id;
        let line = serde_json::json!({
            "user": user,
            "query": corpus.vocab.decode(&g.query),
            "reference": corpus.vocab.decode(&g.reference),
            "response": corpus.vocab.decode(&g.response),
            "sim_profile": corpus.vocab.decode(&g.sim_profile),
            "per_profile": corpus.vocab.decode(&g.per_profile),
            "nucleus_sizes": g.nucleus_sizes,
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
