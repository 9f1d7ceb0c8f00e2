//! Decoder-only transformer over `[c_sim; c_per; q; BOS]` with segment
//! tags, teacher-forced scoring and nucleus sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS, NUM_RESERVED};
use crate::error::{contract, Result};
use crate::nn::{causal_mask, Binding, Block, KvCache, LayerNorm};
use crate::tensor::{kernels, ParamId, ParamStore, Tape, Tensor, Var};
use crate::token_refiner::ProfileTokens;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    /// Nucleus mass.
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            ff_dim: 128,
            max_positions: 512,
            top_p: 0.9,
            max_len: 24,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Segment {
    Sim = 0,
    Per = 1,
    Query = 2,
    Response = 3,
}

pub const NUM_SEGMENTS: usize = 4;

/// Token ids and their segment tags; always ends with BOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationInput {
    pub tokens: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl GenerationInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `[sim; per; query; BOS]` with one segment tag per token.
pub fn build_input(sim: &ProfileTokens, per: &ProfileTokens, query: &[usize]) -> Result<GenerationInput> {
    if query.is_empty() {
        return contract("generation input needs a non-empty query");
    }
    let mut tokens = Vec::with_capacity(sim.len() + per.len() + query.len() + 1);
    let mut segments = Vec::with_capacity(tokens.capacity());
    for (part, seg) in [
        (&sim.tokens[..], Segment::Sim),
        (&per.tokens[..], Segment::Per),
        (query, Segment::Query),
        (&[BOS][..], Segment::Response),
    ] {
        tokens.extend_from_slice(part);
        segments.extend(std::iter::repeat(seg).take(part.len()));
    }
    Ok(GenerationInput { tokens, segments })
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub vocab_size: usize,
    pub tok: ParamId,
    pub pos: ParamId,
    pub seg: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub out_bias: ParamId,
}

impl Generator {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, vocab_size: usize, cfg: GeneratorConfig, rng: &mut R) -> Result<Self> {
        if vocab_size <= NUM_RESERVED {
            return contract(format!("generator vocabulary of {vocab_size} is too small"));
        }
        if cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return contract(format!("d_model {} must be divisible by heads {}", cfg.d_model, cfg.heads));
        }
        let d = cfg.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let tok = store.add_uniform(format!("{prefix}.tok"), &[vocab_size, d], scale, rng)?;
        let pos = store.add_uniform(format!("{prefix}.pos"), &[cfg.max_positions, d], scale, rng)?;
        let seg = store.add_uniform(format!("{prefix}.seg"), &[NUM_SEGMENTS, d], scale, rng)?;
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(store, &format!("{prefix}.block{l}"), d, cfg.heads, cfg.ff_dim, rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, &format!("{prefix}.ln_f"), d)?;
        let out_bias = store.add_const(format!("{prefix}.out_bias"), &[vocab_size], 0.0)?;
        Ok(Self {
            cfg,
            vocab_size,
            tok,
            pos,
            seg,
            blocks,
            ln_f,
            out_bias,
        })
    }

    /// Logits `[target.len() + 1, vocab]` for the response positions: row
    /// `i` predicts `target[i]`, and the last row predicts what follows the
    /// whole target.
    pub fn forward(&self, tape: &mut Tape, p: Binding, input: &GenerationInput, target: &[usize]) -> Result<Var> {
        let n_in = input.len();
        if n_in == 0 || input.tokens[n_in - 1] != BOS || input.segments.len() != n_in {
            return contract("generation input must be tagged and end with BOS");
        }
        let n = n_in + target.len();
        if n > self.cfg.max_positions {
            return contract(format!(
                "generator sequence of {n} tokens exceeds max_positions = {}",
                self.cfg.max_positions
            ));
        }
        let ids: Vec<usize> = input.tokens.iter().chain(target).copied().collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return contract(format!("token id {bad} outside generator vocabulary of {}", self.vocab_size));
        }
        let segs: Vec<usize> = input
            .segments
            .iter()
            .map(|s| *s as usize)
            .chain(std::iter::repeat(Segment::Response as usize).take(target.len()))
            .collect();
        let positions: Vec<usize> = (0..n).collect();
        let tok = p.bind(tape, self.tok);
        let pos = p.bind(tape, self.pos);
        let seg = p.bind(tape, self.seg);
        let x = tape.embedding(tok, &ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let se = tape.embedding(seg, &segs)?;
        let h = tape.add(x, pe)?;
        let mut h = tape.add(h, se)?;
        let mask = tape.constant(&causal_mask(n));
        for block in &self.blocks {
            h = block.forward(tape, p, h, Some(mask))?;
        }
        let h = self.ln_f.forward(tape, p, h)?;
        let resp = tape.slice_rows(h, n_in - 1, target.len() + 1)?;
        let logits = tape.matmul_bt(resp, tok)?;
        let b = p.bind(tape, self.out_bias);
        tape.add_row(logits, b)
    }

    /// Softmax distributions for the response positions, without gradients.
    pub fn distributions(&self, store: &ParamStore, input: &GenerationInput, target: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, Binding::frozen(store), input, target)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(tape.tensor(probs))
    }

    /// Samples until EOS or `max_len` tokens. Returns the tokens (without
    /// EOS) and the nucleus size used at each step.
    pub fn nucleus_sample<R: Rng>(
        &self,
        store: &ParamStore,
        input: &GenerationInput,
        top_p: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(top_p > 0.0 && top_p <= 1.0) {
            return contract(format!("nucleus mass must lie in (0, 1], got {top_p}"));
        }
        if max_len == 0 {
            return contract("max_len must be at least 1");
        }
        let mut out = Vec::new();
        let mut sizes = Vec::new();
        let mut dec = self.decoder(store, input)?;
        loop {
            let probs = kernels::softmax(dec.logits());
            let set = nucleus(&probs, top_p);
            sizes.push(set.len());
            let next = sample_from(&set, rng);
            if next == EOS {
                break;
            }
            out.push(next);
            if out.len() == max_len {
                break;
            }
            dec.push(next)?;
        }
        Ok((out, sizes))
    }

    /// Incremental decoder primed with `input`; its logits predict the first
    /// response token.
    pub fn decoder<'g>(&'g self, store: &'g ParamStore, input: &GenerationInput) -> Result<Decoder<'g>> {
        let n = input.len();
        if n == 0 || input.tokens[n - 1] != BOS || input.segments.len() != n {
            return contract("generation input must be tagged and end with BOS");
        }
        let mut dec = Decoder {
            g: self,
            store,
            caches: vec![KvCache::default(); self.blocks.len()],
            len: 0,
            logits: Vec::new(),
        };
        let segs: Vec<usize> = input.segments.iter().map(|s| *s as usize).collect();
        dec.extend(&input.tokens, &segs)?;
        Ok(dec)
    }
}

/// Cached key/value decoding over frozen weights; matches
/// [`Generator::forward`] row by row.
pub struct Decoder<'g> {
    g: &'g Generator,
    store: &'g ParamStore,
    caches: Vec<KvCache>,
    len: usize,
    logits: Vec<f64>,
}

impl Decoder<'_> {
    /// Next-token logits after the last pushed token.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one response token.
    pub fn push(&mut self, token: usize) -> Result<()> {
        self.extend(&[token], &[Segment::Response as usize])
    }

    fn extend(&mut self, ids: &[usize], segs: &[usize]) -> Result<()> {
        let g = self.g;
        let d = g.cfg.d_model;
        let rows = ids.len();
        if self.len + rows > g.cfg.max_positions {
            return contract(format!(
                "generator sequence of {} tokens exceeds max_positions = {}",
                self.len + rows,
                g.cfg.max_positions
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= g.vocab_size) {
            return contract(format!("token id {bad} outside generator vocabulary of {}", g.vocab_size));
        }
        let tok = self.store.get(g.tok).data();
        let pos = self.store.get(g.pos).data();
        let seg = self.store.get(g.seg).data();
        let mut x = Vec::with_capacity(rows * d);
        for (i, (&t, &s)) in ids.iter().zip(segs).enumerate() {
            let p = self.len + i;
            x.extend((0..d).map(|k| tok[t * d + k] + pos[p * d + k] + seg[s * d + k]));
        }
        for (block, cache) in g.blocks.iter().zip(&mut self.caches) {
            x = block.step(self.store, &x, rows, cache);
        }
        self.len += rows;
        let h = g.ln_f.apply(self.store, &x[(rows - 1) * d..]);
        let mut logits = kernels::matmul_bt(&h, tok, 1, d, g.vocab_size);
        let b = self.store.get(g.out_bias).data();
        logits.iter_mut().zip(b).for_each(|(l, b)| *l += b);
        self.logits = logits;
        Ok(())
    }
}

/// The smallest descending-probability prefix with mass at least `p`,
/// renormalised. Equal probabilities keep the lower id first.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = Vec::new();
    for i in order {
        keep.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    keep.into_iter().map(|i| (i, probs[i] / mass)).collect()
}

fn sample_from<R: Rng>(set: &[(usize, f64)], rng: &mut R) -> usize {
    let mut u: f64 = rng.gen();
    for &(i, q) in set {
        if u < q {
            return i;
        }
        u -= q;
    }
    set.last().map_or(EOS, |x| x.0)
}

/// Mean token negative log-likelihood of `y ++ EOS`.
pub fn generation_loss(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    let targets: Vec<usize> = y.iter().copied().chain([EOS]).collect();
    tape.cross_entropy(logits, &targets, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_refiner::ProfileSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(tokens: &[usize], source: ProfileSource) -> ProfileTokens {
        ProfileTokens {
            tokens: tokens.to_vec(),
            scores: vec![1.0; tokens.len()],
            source,
        }
    }

    fn small(d: usize, heads: usize, layers: usize) -> (ParamStore, Generator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = GeneratorConfig {
            d_model: d,
            heads,
            layers,
            ff_dim: 2 * d,
            max_positions: 16,
            ..GeneratorConfig::default()
        };
        let g = Generator::new(&mut store, "gen", 12, cfg, &mut rng).unwrap();
        (store, g)
    }

    #[test]
    fn input_layout() {
        let q = [7, 8, 9, 10, 11];
        let empty = ProfileTokens::empty(ProfileSource::Sim);
        let x = build_input(&empty, &ProfileTokens::empty(ProfileSource::Cur), &q).unwrap();
        assert_eq!(x.tokens, vec![7, 8, 9, 10, 11, BOS]);
        let x = build_input(&profile(&[4, 5, 6], ProfileSource::Sim), &profile(&[5, 6], ProfileSource::Cur), &q).unwrap();
        assert_eq!(x.len(), 11);
        assert_eq!(x.segments[..4], [Segment::Sim, Segment::Sim, Segment::Sim, Segment::Per]);
        assert_eq!(*x.segments.last().unwrap(), Segment::Response);
        let text = serde_json::to_string(&x).unwrap();
        assert_eq!(serde_json::from_str::<GenerationInput>(&text).unwrap(), x);
        assert!(build_input(&empty, &empty, &[]).is_err());
    }

    #[test]
    fn distributions_normalised_and_causal() {
        let (store, g) = small(8, 2, 2);
        let x = build_input(&profile(&[4], ProfileSource::Sim), &profile(&[5], ProfileSource::Cur), &[6, 7]).unwrap();
        let a = g.distributions(&store, &x, &[8, 9, 10]).unwrap();
        assert_eq!(a.shape(), &[4, 12]);
        for i in 0..4 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let b = g.distributions(&store, &x, &[8, 11, 4]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let (store, g) = small(8, 2, 2);
        let x = build_input(&profile(&[4, 9], ProfileSource::Sim), &profile(&[5], ProfileSource::Cur), &[6, 7]).unwrap();
        let target = [8, 11, 4];
        let mut tape = Tape::new();
        let full = g.forward(&mut tape, Binding::frozen(&store), &x, &target).unwrap();
        let full = tape.tensor(full);
        let mut dec = g.decoder(&store, &x).unwrap();
        for (i, &t) in target.iter().chain([&0]).enumerate() {
            for (a, b) in dec.logits().iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
            if i < target.len() {
                dec.push(t).unwrap();
            }
        }
        assert_eq!(dec.len(), x.len() + target.len());
    }

    #[test]
    fn overlong_input_names_limit() {
        let (store, g) = small(8, 2, 1);
        let x = build_input(&profile(&[4; 10], ProfileSource::Sim), &ProfileTokens::empty(ProfileSource::Cur), &[5; 4]).unwrap();
        let err = g.distributions(&store, &x, &[6, 6]).unwrap_err().to_string();
        assert!(err.contains("max_positions = 16"), "{err}");
    }

    #[test]
    fn loss_delegates_to_cross_entropy() {
        let (store, g) = small(8, 2, 1);
        let x = build_input(&ProfileTokens::empty(ProfileSource::Sim), &ProfileTokens::empty(ProfileSource::Cur), &[6, 7]).unwrap();
        let mut tape = Tape::new();
        let logits = g.forward(&mut tape, Binding::frozen(&store), &x, &[8, 9]).unwrap();
        let l = generation_loss(&mut tape, logits, &[8, 9]).unwrap();
        let direct = tape.cross_entropy(logits, &[8, 9, EOS], None).unwrap();
        assert_eq!(tape.scalar(l).to_bits(), tape.scalar(direct).to_bits());

        let mut tape = Tape::new();
        let uniform = tape.constant(&Tensor::zeros(&[3, 12]));
        let l = generation_loss(&mut tape, uniform, &[8, 9]).unwrap();
        assert!((tape.scalar(l) - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nucleus_boundary() {
        let set = nucleus(&[0.6, 0.3, 0.1], 0.7);
        assert_eq!(set.len(), 2);
        assert_eq!(set[0].0, 0);
        assert!((set[0].1 - 2.0 / 3.0).abs() < 1e-12 && (set[1].1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(nucleus(&[0.6, 0.3, 0.1], 1.0).len(), 3);
        assert_eq!(nucleus(&[0.2, 0.5, 0.3], 1e-12), vec![(1, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_ne!(sample_from(&set, &mut rng), 2);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (store, g) = small(8, 2, 1);
        let x = build_input(&ProfileTokens::empty(ProfileSource::Sim), &ProfileTokens::empty(ProfileSource::Cur), &[6, 7]).unwrap();
        let run = |seed| g.nucleus_sample(&store, &x, 0.9, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(4), run(4));
        let (toks, sizes) = run(4);
        assert!(toks.len() <= 5 && !sizes.is_empty());
        assert!(g.nucleus_sample(&store, &x, 0.0, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    /// One layer, one head, d = 2, zero feed-forward and zero positional and
    /// segment embeddings: the BOS row sees both input tokens, the first row
    /// only itself.
    #[test]
    fn single_layer_matches_hand_computation() {
        let (mut store, g) = small(2, 1, 1);
        let tok: Vec<f64> = (0..24).map(|i| ((i * 5 % 13) as f64 - 6.0) / 5.0).collect();
        store.set(g.tok, &tok).unwrap();
        store.set(g.pos, &[0.0; 32]).unwrap();
        store.set(g.seg, &[0.0; 8]).unwrap();
        let bias: Vec<f64> = (0..12).map(|i| i as f64 * 0.01).collect();
        store.set(g.out_bias, &bias).unwrap();
        let b = &g.blocks[0];
        let wq = [0.3, -0.7, 0.9, 0.2];
        let wk = [-0.4, 0.6, 0.5, 1.1];
        let wv = [0.8, -0.3, 0.1, 0.7];
        let wo = [0.5, 0.2, -0.4, 0.9];
        store.set(b.attn.wq.w, &wq).unwrap();
        store.set(b.attn.wk.w, &wk).unwrap();
        store.set(b.attn.wv.w, &wv).unwrap();
        store.set(b.attn.wo.w, &wo).unwrap();
        for id in [b.ff1.w, b.ff2.w] {
            let n = store.get(id).numel();
            store.set(id, &vec![0.0; n]).unwrap();
        }
        let input = GenerationInput {
            tokens: vec![9, BOS],
            segments: vec![Segment::Query, Segment::Response],
        };
        let got = g.distributions(&store, &input, &[]).unwrap();
        assert_eq!(got.shape(), &[1, 12]);

        let ln = |v: [f64; 2]| -> [f64; 2] {
            let mean = (v[0] + v[1]) / 2.0;
            let var = ((v[0] - mean).powi(2) + (v[1] - mean).powi(2)) / 2.0;
            let r = 1.0 / (var + 1e-5).sqrt();
            [(v[0] - mean) * r, (v[1] - mean) * r]
        };
        let mm = |v: [f64; 2], w: &[f64; 4]| [v[0] * w[0] + v[1] * w[2], v[0] * w[1] + v[1] * w[3]];
        let x: Vec<[f64; 2]> = [9usize, BOS].iter().map(|&i| [tok[i * 2], tok[i * 2 + 1]]).collect();
        let h: Vec<[f64; 2]> = x.iter().map(|&v| ln(v)).collect();
        let q = mm(h[1], &wq);
        let k: Vec<_> = h.iter().map(|&v| mm(v, &wk)).collect();
        let v: Vec<_> = h.iter().map(|&v| mm(v, &wv)).collect();
        let s: Vec<f64> = (0..2).map(|j| (q[0] * k[j][0] + q[1] * k[j][1]) / 2f64.sqrt()).collect();
        let m = s[0].max(s[1]);
        let e = [(s[0] - m).exp(), (s[1] - m).exp()];
        let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let att = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
        let o = mm(att, &wo);
        let hf = ln([x[1][0] + o[0], x[1][1] + o[1]]);
        let logits: Vec<f64> = (0..12).map(|t| hf[0] * tok[t * 2] + hf[1] * tok[t * 2 + 1] + bias[t]).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for t in 0..12 {
            assert!((got.get2(0, t) - logits[t].exp() / z).abs() < 1e-9, "token {t}");
        }
    }
}
