//! Alternating joint training: refiner updates on the matching loss with
//! pseudo-labels, then (after the warm-up gate) generator updates on the
//! generation loss with profiles extracted by the frozen refiner.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::TrainingTriplet;
use crate::error::{contract, Error, Result};
use crate::generator::{build_input, generation_loss};
use crate::model::Model;
use crate::nn::Binding;
use crate::pipeline::{Ablation, Context};
use crate::tensor::checkpoint::Container;
use crate::tensor::{OptimizerKind, OptimizerState, ParamId, Tape, Tensor, Var};
use crate::token_refiner::{matching_loss, pseudo_label, PseudoLabel, ProfileSource, ProfileTokens};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Refiner batch size `n_s`.
    pub batch_refiner: usize,
    /// Generator batch size `n_d`.
    pub batch_generator: usize,
    /// Refiner-only steps before generator training starts.
    pub n_f: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub refiner_optimizer: OptimizerConfig,
    pub generator_optimizer: OptimizerConfig,
    pub eval_interval: u64,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    /// Validation triplets scored at each evaluation.
    pub valid_limit: usize,
    /// History responses per triplet fed to the matching head, from the
    /// current user and from similar users.
    pub sentences_cur: usize,
    pub sentences_sim: usize,
    pub ablation: Ablation,
    /// Generator steps between copies of the generator's token embeddings
    /// into the encoder (followed by re-encoding the corpus).
    pub encoder_sync_interval: u64,
    /// Verify parameter-group isolation with fingerprints on every step.
    pub check_isolation: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_refiner: 16,
            batch_generator: 16,
            n_f: 200,
            max_steps: 1200,
            seed: 1,
            refiner_optimizer: OptimizerConfig::default(),
            generator_optimizer: OptimizerConfig {
                kind: OptimizerKind::AdamwWithWarmup {
                    warmup_steps: 100,
                    weight_decay: 0.0,
                },
                lr: 2e-3,
            },
            eval_interval: 200,
            patience: 5,
            valid_limit: 64,
            sentences_cur: 2,
            sentences_sim: 2,
            ablation: Ablation::None,
            encoder_sync_interval: 50,
            check_isolation: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_refiner", self.batch_refiner as u64),
            ("batch_generator", self.batch_generator as u64),
            ("max_steps", self.max_steps),
            ("eval_interval", self.eval_interval),
            ("patience", self.patience as u64),
            ("encoder_sync_interval", self.encoder_sync_interval),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("training.{name} must be positive")));
            }
        }
        for o in [&self.refiner_optimizer, &self.generator_optimizer] {
            if !(o.lr > 0.0) {
                return Err(Error::Config("learning rates must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Progress that a checkpoint must carry for an exact resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// `(step, L^s)` for every refiner step that ran.
    pub refiner_losses: Vec<(u64, f64)>,
    /// `(step, L^g)` for every generator step.
    pub generator_losses: Vec<(u64, f64)>,
    /// `(step, validation L^g)`.
    pub valid_losses: Vec<(u64, f64)>,
    pub best_valid: Option<f64>,
    pub bad_evals: usize,
    pub converged: bool,
    pub refiner_rng: RngState,
    pub generator_rng: RngState,
    /// Checkpoint directories relative to the run directory.
    pub checkpoints: Vec<PathBuf>,
}

impl TrainState {
    fn fresh(seed: u64) -> Self {
        Self {
            step: 0,
            refiner_losses: Vec::new(),
            generator_losses: Vec::new(),
            valid_losses: Vec::new(),
            best_valid: None,
            bad_evals: 0,
            converged: false,
            refiner_rng: RngState::of(&ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(1))),
            generator_rng: RngState::of(&ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(2))),
            checkpoints: Vec::new(),
        }
    }

    /// Mean of the last `n` generator losses.
    pub fn final_generator_mean(&self, n: usize) -> Option<f64> {
        tail_mean(&self.generator_losses, n)
    }

    pub fn final_refiner_mean(&self, n: usize) -> Option<f64> {
        tail_mean(&self.refiner_losses, n)
    }
}

fn tail_mean(xs: &[(u64, f64)], n: usize) -> Option<f64> {
    if xs.is_empty() || n == 0 {
        return None;
    }
    let tail = &xs[xs.len().saturating_sub(n)..];
    Some(tail.iter().map(|x| x.1).sum::<f64>() / tail.len() as f64)
}

/// One pseudo-labelled matching example used in a refiner step.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingExample {
    pub triplet: TrainingTriplet,
    pub sentence: (usize, usize),
    pub label: PseudoLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerStepReport {
    pub loss: Option<f64>,
    pub examples: Vec<MatchingExample>,
    pub skipped: usize,
}

pub struct Trainer<'c> {
    pub cfg: TrainingConfig,
    pub ctx: Context<'c>,
    pub model: Model,
    pub state: TrainState,
    pub train: Vec<TrainingTriplet>,
    pub valid: Vec<TrainingTriplet>,
    opt_refiner: OptimizerState,
    opt_generator: OptimizerState,
    opt_nonpersonal: Option<OptimizerState>,
    refiner_ids: Vec<ParamId>,
    generator_ids: Vec<ParamId>,
    nonpersonal_ids: Vec<ParamId>,
    out_dir: Option<PathBuf>,
    /// Extra JSON stored in every checkpoint (the resolved run config).
    snapshot: serde_json::Value,
    log: Option<BufWriter<std::fs::File>>,
    timing: Option<BufWriter<std::fs::File>>,
}

fn optimizer(cfg: &OptimizerConfig, model: &Model, ids: Vec<ParamId>) -> OptimizerState {
    OptimizerState::new(cfg.kind, cfg.lr, &model.store, ids)
}

impl<'c> Trainer<'c> {
    pub fn new(
        cfg: TrainingConfig,
        ctx: Context<'c>,
        model: Model,
        train: Vec<TrainingTriplet>,
        valid: Vec<TrainingTriplet>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.len() < cfg.batch_refiner.max(cfg.batch_generator) {
            return contract(format!(
                "training split of {} triplets is smaller than one batch",
                train.len()
            ));
        }
        let refiner_ids = model.refiner_params();
        let generator_ids = model.generator_params();
        let nonpersonal_ids = model.nonpersonal_params();
        let opt_refiner = optimizer(&cfg.refiner_optimizer, &model, refiner_ids.clone());
        let opt_generator = optimizer(&cfg.generator_optimizer, &model, generator_ids.clone());
        let opt_nonpersonal = model
            .nonpersonal
            .as_ref()
            .map(|_| optimizer(&cfg.generator_optimizer, &model, nonpersonal_ids.clone()));
        let mut valid = valid;
        valid.truncate(cfg.valid_limit);
        Ok(Self {
            state: TrainState::fresh(cfg.seed),
            cfg,
            ctx,
            model,
            train,
            valid,
            opt_refiner,
            opt_generator,
            opt_nonpersonal,
            refiner_ids,
            generator_ids,
            nonpersonal_ids,
            out_dir: None,
            snapshot: serde_json::Value::Null,
            log: None,
            timing: None,
        })
    }

    /// Writes `train.log`, `timing.log` and checkpoints under `dir`.
    /// `snapshot` is stored alongside each checkpoint.
    pub fn with_output(mut self, dir: &Path, snapshot: serde_json::Value) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let append = self.state.step > 0;
        if append {
            for name in ["train.log", "timing.log"] {
                trim_log(&dir.join(name), self.state.step)?;
            }
        }
        let open = |name: &str| -> Result<BufWriter<std::fs::File>> {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        self.log = Some(open("train.log")?);
        self.timing = Some(open("timing.log")?);
        self.out_dir = Some(dir.to_path_buf());
        self.snapshot = snapshot;
        Ok(self)
    }

    fn log_line(&mut self, step: u64, phase: &str, loss: Option<f64>, lr: f64, wall_ms: u128) -> Result<()> {
        if let Some(w) = &mut self.log {
            let line = json!({"step": step, "phase": phase, "loss": loss, "lr": lr});
            writeln!(w, "{line}")?;
        }
        if let Some(w) = &mut self.timing {
            writeln!(w, "{}", json!({"step": step, "phase": phase, "wall_ms": wall_ms as u64}))?;
        }
        Ok(())
    }

    fn sample_batch(train: &[TrainingTriplet], n: usize, rng: &mut ChaCha8Rng) -> Vec<TrainingTriplet> {
        (0..n).map(|_| train[rng.gen_range(0..train.len())]).collect()
    }

    /// Empty-profile next-token distributions for the ground truth positions
    /// of `t` (one row per response token).
    pub fn nonpersonal_distributions(&self, t: &TrainingTriplet) -> Result<Tensor> {
        let empty = build_input(
            &ProfileTokens::empty(ProfileSource::Sim),
            &ProfileTokens::empty(ProfileSource::Cur),
            self.ctx.corpus.query(t),
        )?;
        let y = self.ctx.corpus.response(t);
        let probs = self
            .model
            .nonpersonal_generator()
            .distributions(&self.model.store, &empty, y)?;
        let v = self.model.vocab_size;
        Tensor::new(vec![y.len(), v], probs.data()[..y.len() * v].to_vec())
    }

    /// Pseudo-labelled matching examples for one triplet: sentences drawn
    /// from the full past histories of the current and similar users.
    fn matching_examples(&self, t: &TrainingTriplet, rng: &mut ChaCha8Rng) -> Result<Vec<MatchingExample>> {
        let users = self.ctx.similar_users(t.user, t.index, self.cfg.ablation)?;
        let cur: Vec<(usize, usize)> = (0..t.index).map(|i| (t.user, i)).collect();
        let sim: Vec<(usize, usize)> = users
            .iter()
            .flat_map(|&s| (0..self.ctx.visible_len(s, t.ts)).map(move |i| (s, i)))
            .collect();
        let mut chosen = Vec::new();
        for (pool, k) in [(&cur, self.cfg.sentences_cur), (&sim, self.cfg.sentences_sim)] {
            let k = k.min(pool.len());
            if k == 0 {
                continue;
            }
            let mut picks: Vec<usize> = sample(rng, pool.len(), k).into_vec();
            picks.sort_unstable();
            chosen.extend(picks.into_iter().map(|i| pool[i]));
        }
        if chosen.is_empty() {
            return Ok(Vec::new());
        }
        let y_hat = self.nonpersonal_distributions(t)?;
        let y = self.ctx.corpus.response(t);
        let alpha = self.model.cfg.token_refiner.alpha;
        chosen
            .into_iter()
            .map(|(u, i)| {
                let r = &self.ctx.corpus.users[u].pairs[i].response;
                Ok(MatchingExample {
                    triplet: *t,
                    sentence: (u, i),
                    label: pseudo_label(y, &y_hat, r, alpha)?,
                })
            })
            .collect()
    }

    fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        Ok(tape.scale(total, 1.0 / losses.len() as f64))
    }

    /// Matching-loss update of the refiner parameters on `batch`.
    pub fn refiner_step_on(&mut self, batch: &[TrainingTriplet], rng: &mut ChaCha8Rng) -> Result<RefinerStepReport> {
        let mut examples = Vec::new();
        let mut skipped = 0;
        for t in batch {
            let ex = self.matching_examples(t, rng)?;
            if ex.is_empty() {
                skipped += 1;
            }
            examples.extend(ex);
        }
        if examples.is_empty() {
            log::info!("refiner step skipped: no usable history in batch");
            return Ok(RefinerStepReport {
                loss: None,
                examples,
                skipped,
            });
        }
        let before = self
            .cfg
            .check_isolation
            .then(|| self.model.store.fingerprint(&self.generator_ids));
        let mut tape = Tape::new();
        let p = Binding::trainable(&self.model.store);
        let mut losses = Vec::with_capacity(examples.len());
        for ex in &examples {
            let hq = tape.constant(self.ctx.query_encoding(&ex.triplet));
            let hr = tape.constant(self.ctx.response_encoding(ex.sentence.0, ex.sentence.1));
            let logit = self.model.refiner.match_logit(&mut tape, p, hq, hr)?;
            losses.push(matching_loss(&mut tape, logit, &ex.label)?);
        }
        let loss = Self::mean_of(&mut tape, &losses)?;
        let value = tape.scalar(loss);
        tape.backward(loss)?;
        self.model.store.zero_grads_of(&self.refiner_ids);
        self.model.store.accumulate_from(&tape);
        self.opt_refiner.step(&mut self.model.store)?;
        self.model.store.clear_grads();
        if let Some(h) = before {
            if h != self.model.store.fingerprint(&self.generator_ids) {
                return contract("refiner step changed generator parameters");
            }
        }
        Ok(RefinerStepReport {
            loss: Some(value),
            examples,
            skipped,
        })
    }

    /// Mean generation loss of `batch` recorded on `tape`.
    fn generation_batch_loss(&self, tape: &mut Tape, batch: &[TrainingTriplet], trainable: bool) -> Result<Var> {
        let p = if trainable {
            Binding::trainable(&self.model.store)
        } else {
            Binding::frozen(&self.model.store)
        };
        let mut losses = Vec::with_capacity(batch.len());
        for t in batch {
            let profiles = self.ctx.profiles(&self.model, t, self.cfg.ablation)?;
            let input = build_input(&profiles.sim, &profiles.per, self.ctx.corpus.query(t))?;
            let y = self.ctx.corpus.response(t);
            let logits = self.model.generator.forward(tape, p, &input, y)?;
            losses.push(generation_loss(tape, logits, y)?);
        }
        Self::mean_of(tape, &losses)
    }

    fn nonpersonal_batch_loss(ctx: &Context, model: &Model, tape: &mut Tape, batch: &[TrainingTriplet]) -> Result<Var> {
        let p = Binding::trainable(&model.store);
        let g = model.nonpersonal_generator();
        let mut losses = Vec::with_capacity(batch.len());
        for t in batch {
            let empty = build_input(
                &ProfileTokens::empty(ProfileSource::Sim),
                &ProfileTokens::empty(ProfileSource::Cur),
                ctx.corpus.query(t),
            )?;
            let y = ctx.corpus.response(t);
            let logits = g.forward(tape, p, &empty, y)?;
            losses.push(generation_loss(tape, logits, y)?);
        }
        Self::mean_of(tape, &losses)
    }

    /// Generation-loss update of the generator on `batch`; refused until the
    /// step counter has passed `n_f`.
    pub fn generator_step_on(&mut self, step: u64, batch: &[TrainingTriplet]) -> Result<f64> {
        if step <= self.cfg.n_f {
            return contract(format!(
                "generator step requested at step {step}, but training only starts after step {}",
                self.cfg.n_f
            ));
        }
        let before = self
            .cfg
            .check_isolation
            .then(|| self.model.store.fingerprint(&self.refiner_ids));
        let mut tape = Tape::new();
        let loss = self.generation_batch_loss(&mut tape, batch, true)?;
        let value = tape.scalar(loss);
        tape.backward(loss)?;
        self.model.store.zero_grads_of(&self.generator_ids);
        self.model.store.accumulate_from(&tape);
        self.opt_generator.step(&mut self.model.store)?;
        self.model.store.clear_grads();

        if let Some(opt) = &mut self.opt_nonpersonal {
            let mut tape = Tape::new();
            let loss = Self::nonpersonal_batch_loss(&self.ctx, &self.model, &mut tape, batch)?;
            tape.backward(loss)?;
            self.model.store.zero_grads_of(&self.nonpersonal_ids);
            self.model.store.accumulate_from(&tape);
            opt.step(&mut self.model.store)?;
            self.model.store.clear_grads();
        }
        if let Some(h) = before {
            if h != self.model.store.fingerprint(&self.refiner_ids) {
                return contract("generator step changed refiner parameters");
            }
        }
        Ok(value)
    }

    /// Mean generation loss over the validation triplets.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let l = self.generation_batch_loss(&mut tape, &self.valid.clone(), false)?;
        Ok(Some(tape.scalar(l)))
    }

    /// Runs until `max_steps` or a validation plateau.
    pub fn train(&mut self) -> Result<&TrainState> {
        let mut ref_rng = self.state.refiner_rng.restore();
        let mut gen_rng = self.state.generator_rng.restore();
        let refine = !matches!(self.cfg.ablation, Ablation::JointTraining | Ablation::NoProfile);
        while self.state.step < self.cfg.max_steps && !self.state.converged {
            let step = self.state.step + 1;
            let batch = Self::sample_batch(&self.train, self.cfg.batch_refiner, &mut ref_rng);
            if refine {
                let clock = Instant::now();
                let report = self.refiner_step_on(&batch, &mut ref_rng)?;
                if let Some(l) = report.loss {
                    self.state.refiner_losses.push((step, l));
                }
                let lr = self.opt_refiner.lr;
                self.log_line(step, "refiner", report.loss, lr, clock.elapsed().as_millis())?;
            }
            let gen_batch = Self::sample_batch(&self.train, self.cfg.batch_generator, &mut gen_rng);
            if step > self.cfg.n_f {
                let clock = Instant::now();
                let lr = self.opt_generator.effective_lr();
                let l = self.generator_step_on(step, &gen_batch)?;
                self.state.generator_losses.push((step, l));
                self.log_line(step, "generator", Some(l), lr, clock.elapsed().as_millis())?;
                if (step - self.cfg.n_f) % self.cfg.encoder_sync_interval == 0 {
                    self.sync_encoder()?;
                }
            }
            self.state.step = step;
            self.state.refiner_rng = RngState::of(&ref_rng);
            self.state.generator_rng = RngState::of(&gen_rng);
            if step % self.cfg.eval_interval == 0 || step == self.cfg.max_steps {
                self.evaluate_and_checkpoint(step)?;
            }
        }
        self.flush()?;
        Ok(&self.state)
    }

    /// Copies the generator's token embeddings into the encoder and
    /// re-encodes the corpus.
    pub fn sync_encoder(&mut self) -> Result<()> {
        self.model.sync_encoder_embeddings()?;
        self.ctx.refresh_encodings(&self.model)
    }

    fn evaluate_and_checkpoint(&mut self, step: u64) -> Result<()> {
        if step > self.cfg.n_f {
            if let Some(v) = self.validation_loss()? {
                self.state.valid_losses.push((step, v));
                match self.state.best_valid {
                    Some(best) if v >= best => {
                        self.state.bad_evals += 1;
                        if self.state.bad_evals >= self.cfg.patience {
                            self.state.converged = true;
                        }
                    }
                    _ => {
                        self.state.best_valid = Some(v);
                        self.state.bad_evals = 0;
                    }
                }
                self.log_line(step, "valid", Some(v), 0.0, 0)?;
            }
        }
        if let Some(dir) = self.out_dir.clone() {
            let ck = dir.join("checkpoints").join(format!("step-{step:06}"));
            self.state.checkpoints.push(PathBuf::from("checkpoints").join(format!("step-{step:06}")));
            self.save_checkpoint(&ck)?;
        }
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.log, &mut self.timing].into_iter().flatten() {
            w.flush()?;
        }
        Ok(())
    }

    /// Directory with `config.json`, `params.bin` (parameters and optimizer
    /// moments) and `state.json` (counters, loss history, RNG state).
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let config = serde_json::to_string_pretty(&self.snapshot).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("config.json"), config + "\n")?;
        let mut c = self.model.to_container();
        let opts = [
            ("refiner", Some(&self.opt_refiner)),
            ("generator", Some(&self.opt_generator)),
            ("nonpersonal", self.opt_nonpersonal.as_ref()),
        ];
        let mut steps = serde_json::Map::new();
        for (name, opt) in opts {
            let Some(opt) = opt else { continue };
            steps.insert(name.into(), json!(opt.step));
            let (m, v) = opt.moments();
            for (k, id) in opt.params().iter().enumerate() {
                let pname = self.model.store.name(*id);
                c.push(format!("opt.{name}.m.{pname}"), Tensor::vector(m[k].clone()));
                c.push(format!("opt.{name}.v.{pname}"), Tensor::vector(v[k].clone()));
            }
        }
        c.header["optimizer_steps"] = serde_json::Value::Object(steps);
        c.save(&dir.join("params.bin"))?;
        let state = serde_json::to_string_pretty(&self.state).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("state.json"), state + "\n")?;
        Ok(())
    }

    /// Restores parameters, optimizer moments and progress from a
    /// checkpoint directory written by [`Self::save_checkpoint`].
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let c = Container::load(&dir.join("params.bin"))?;
        c.load_into(&mut self.model.store)?;
        let steps = c.header["optimizer_steps"].clone();
        let store = &self.model.store;
        let opts = [
            ("refiner", Some(&mut self.opt_refiner)),
            ("generator", Some(&mut self.opt_generator)),
            ("nonpersonal", self.opt_nonpersonal.as_mut()),
        ];
        for (name, opt) in opts {
            let Some(opt) = opt else { continue };
            let mut m = Vec::new();
            let mut v = Vec::new();
            for id in opt.params() {
                let pname = store.name(*id);
                let get = |kind: &str| -> Result<Vec<f64>> {
                    c.get(&format!("opt.{name}.{kind}.{pname}"))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer state for `{pname}`")))
                };
                m.push(get("m")?);
                v.push(get("v")?);
            }
            opt.set_moments(m, v)?;
            opt.step = steps[name]
                .as_u64()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks the {name} optimizer step")))?;
        }
        self.ctx.refresh_encodings(&self.model)?;
        let text = std::fs::read_to_string(dir.join("state.json"))?;
        self.state = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: dir.join("state.json"),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Ok(())
    }
}

/// Drops log lines written after `step`, left behind by an interrupted run.
fn trim_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v["step"].as_u64())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept)?;
    Ok(())
}

/// Newest checkpoint directory under `<run>/checkpoints`, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("state.json").exists())
        .collect();
    found.sort();
    Ok(found.pop())
}
