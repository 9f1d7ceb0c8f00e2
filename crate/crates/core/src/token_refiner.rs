//! Query-to-history cross attention, top-k profile token selection, the
//! sentence matching head and its pseudo-label supervision.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{Binding, Linear, Lstm};
use crate::tensor::{kernels, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenRefinerConfig {
    /// Pseudo-label threshold.
    pub alpha: f64,
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
    pub lstm_hidden: usize,
}

impl Default for TokenRefinerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            channels: 8,
            kernel: 3,
            pool: 2,
            lstm_hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileSource {
    Sim,
    Cur,
}

impl std::fmt::Display for ProfileSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProfileSource::Sim => "sim",
            ProfileSource::Cur => "cur",
        })
    }
}

/// Selected history tokens, best score first.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileTokens {
    pub tokens: Vec<usize>,
    pub scores: Vec<f64>,
    pub source: ProfileSource,
}

impl ProfileTokens {
    pub fn empty(source: ProfileSource) -> Self {
        Self {
            tokens: Vec::new(),
            scores: Vec::new(),
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Debug dump lines `rank, token, score, source`.
    pub fn dump(&self, vocab: &crate::corpus::Vocabulary) -> Vec<String> {
        self.tokens
            .iter()
            .zip(&self.scores)
            .enumerate()
            .map(|(rank, (&t, s))| format!("{}, {}, {s:.6}, {}", rank + 1, vocab.token(t).unwrap_or("?"), self.source))
            .collect()
    }
}

/// Row-stochastic attention of query positions over history positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub a: Tensor,
}

impl AttentionMap {
    /// Per history position, the maximum attention it receives from any
    /// query position.
    pub fn column_max(&self) -> Vec<f64> {
        let (rows, cols) = self.a.dims2().expect("attention is a matrix");
        (0..cols)
            .map(|j| (0..rows).map(|i| self.a.get2(i, j)).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Positions of the `k` largest scores, best first; earlier positions win
/// ties.
pub fn top_k_positions(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// TopK over concatenated per-sentence column maxima.
pub fn select_profile(
    sentences: &[(&[usize], &[f64])],
    k_p: usize,
    source: ProfileSource,
) -> Result<ProfileTokens> {
    if k_p == 0 {
        return contract("k_p must be at least 1");
    }
    let mut tokens = Vec::new();
    let mut scores = Vec::new();
    for (t, s) in sentences {
        if t.len() != s.len() {
            return Err(Error::Shape {
                op: "select_profile",
                lhs: vec![t.len()],
                rhs: vec![s.len()],
            });
        }
        tokens.extend_from_slice(t);
        scores.extend_from_slice(s);
    }
    let keep = top_k_positions(&scores, k_p);
    Ok(ProfileTokens {
        tokens: keep.iter().map(|&i| tokens[i]).collect(),
        scores: keep.iter().map(|&i| scores[i]).collect(),
        source,
    })
}

/// Fixed interpretation of the soft label: per ground-truth position, the
/// largest `onehot(y) - ŷ'` over the tokens present in `r`, clamped at 0,
/// averaged over positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    pub g: bool,
    pub g_soft: f64,
    pub alpha: f64,
}

/// `y_hat_prime` holds one vocabulary distribution per position of `y`.
pub fn pseudo_label(y: &[usize], y_hat_prime: &Tensor, r: &[usize], alpha: f64) -> Result<PseudoLabel> {
    if y.is_empty() {
        return contract("pseudo label of an empty response");
    }
    let (rows, vocab) = y_hat_prime.dims2()?;
    if rows != y.len() {
        return contract(format!(
            "pseudo label needs one distribution per target position: {} targets, {rows} distributions",
            y.len()
        ));
    }
    let mut mask: Vec<usize> = r.iter().copied().filter(|&t| t < vocab).collect();
    mask.sort_unstable();
    mask.dedup();
    let mut total = 0.0;
    for (pos, &yt) in y.iter().enumerate() {
        let row = y_hat_prime.row(pos);
        let best = mask
            .iter()
            .map(|&v| f64::from(u8::from(v == yt)) - row[v])
            .fold(0.0, f64::max);
        total += best;
    }
    let g_soft = total / y.len() as f64;
    Ok(PseudoLabel {
        g: g_soft >= alpha,
        g_soft,
        alpha,
    })
}

/// CNN over `A·V` as a one-channel image, max pooling, an LSTM over pooled
/// rows and an MLP to one logit.
#[derive(Clone, Debug)]
pub struct MatchingHead {
    conv_w: ParamId,
    conv_b: ParamId,
    lstm: Lstm,
    mlp1: Linear,
    mlp2: Linear,
    kernel: usize,
    pool: usize,
    channels: usize,
    d_model: usize,
}

impl MatchingHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, cfg: &TokenRefinerConfig, rng: &mut R) -> Result<Self> {
        if cfg.kernel % 2 == 0 || cfg.pool == 0 || d_model < cfg.pool {
            return contract("matching head needs an odd kernel and a pool no wider than the model");
        }
        let k = cfg.kernel;
        let fan = (k * k) as f64;
        let conv_w = store.add_uniform(
            format!("{name}.conv.w"),
            &[cfg.channels, 1, k, k],
            (3.0 / fan).sqrt(),
            rng,
        )?;
        let conv_b = store.add_const(format!("{name}.conv.b"), &[cfg.channels], 0.0)?;
        let features = cfg.channels * (d_model / cfg.pool);
        let lstm = Lstm::new(store, &format!("{name}.lstm"), features, cfg.lstm_hidden, rng)?;
        let mlp1 = Linear::new(store, &format!("{name}.mlp1"), cfg.lstm_hidden, cfg.lstm_hidden, true, rng)?;
        let mlp2 = Linear::new(store, &format!("{name}.mlp2"), cfg.lstm_hidden, 1, true, rng)?;
        Ok(Self {
            conv_w,
            conv_b,
            lstm,
            mlp1,
            mlp2,
            kernel: k,
            pool: cfg.pool,
            channels: cfg.channels,
            d_model,
        })
    }

    /// Pre-sigmoid matching logit for `h = A·V` of shape `[rows, d]`.
    pub fn logit(&self, tape: &mut Tape, p: Binding, h: Var) -> Result<Var> {
        let rows = tape.shape(h)[0];
        let min_rows = self.kernel.max(self.pool);
        let h = if rows < min_rows {
            let pad = tape.constant(&Tensor::zeros(&[min_rows - rows, self.d_model]));
            tape.concat_rows(&[h, pad])?
        } else {
            h
        };
        let rows = rows.max(min_rows);
        let img = tape.reshape(h, vec![1, rows, self.d_model])?;
        let w = p.bind(tape, self.conv_w);
        let b = p.bind(tape, self.conv_b);
        let conv = tape.conv2d(img, w, b, self.kernel / 2)?;
        let conv = tape.relu(conv);
        let pooled = tape.max_pool2d(conv, self.pool)?;
        let (ph, pw) = (rows / self.pool, self.d_model / self.pool);
        let seq = tape.swap01(pooled)?;
        let seq = tape.reshape(seq, vec![ph, self.channels * pw])?;
        let last = self.lstm.forward(tape, p, seq)?;
        let z = self.mlp1.forward(tape, p, last)?;
        let z = tape.tanh(z);
        self.mlp2.forward(tape, p, z)
    }
}

/// `W_Q`, `W_K`, `W_V` over frozen encoder states plus the matching head;
/// together these are the parameters trained by the matching loss.
#[derive(Clone, Debug)]
pub struct TokenRefiner {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub head: MatchingHead,
    pub d_model: usize,
}

impl TokenRefiner {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, cfg: &TokenRefinerConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            wq: store.add_xavier(format!("{prefix}.wq"), d_model, d_model, rng)?,
            wk: store.add_xavier(format!("{prefix}.wk"), d_model, d_model, rng)?,
            wv: store.add_xavier(format!("{prefix}.wv"), d_model, d_model, rng)?,
            head: MatchingHead::new(store, &format!("{prefix}.match"), d_model, cfg, rng)?,
            d_model,
        })
    }

    /// `A = softmax(Q Kᵀ / √d)` and `V` for encoded query and response.
    pub fn attention(&self, tape: &mut Tape, p: Binding, hq: Var, hr: Var) -> Result<(Var, Var)> {
        if tape.shape(hq)[0] == 0 || tape.shape(hr)[0] == 0 {
            return contract("cross attention over an empty sequence");
        }
        let wq = p.bind(tape, self.wq);
        let wk = p.bind(tape, self.wk);
        let wv = p.bind(tape, self.wv);
        let q = tape.matmul(hq, wq)?;
        let k = tape.matmul(hr, wk)?;
        let v = tape.matmul(hr, wv)?;
        let logits = tape.matmul_bt(q, k)?;
        let logits = tape.scale(logits, 1.0 / (self.d_model as f64).sqrt());
        let a = tape.softmax(logits, 1)?;
        Ok((a, v))
    }

    /// Matching logit for one (query, history response) pair.
    pub fn match_logit(&self, tape: &mut Tape, p: Binding, hq: Var, hr: Var) -> Result<Var> {
        let (a, v) = self.attention(tape, p, hq, hr)?;
        let h = tape.matmul(a, v)?;
        self.head.logit(tape, p, h)
    }

    /// ĝ for one pair, without gradients.
    pub fn match_score(&self, store: &ParamStore, hq: &Tensor, hr: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let q = tape.constant(hq);
        let r = tape.constant(hr);
        let z = self.match_logit(&mut tape, Binding::frozen(store), q, r)?;
        Ok(kernels::sigmoid(tape.scalar(z)))
    }

    pub fn cross_attention(&self, store: &ParamStore, hq: &Tensor, hr: &Tensor) -> Result<AttentionMap> {
        let mut tape = Tape::new();
        let q = tape.constant(hq);
        let r = tape.constant(hr);
        let (a, _) = self.attention(&mut tape, Binding::frozen(store), q, r)?;
        Ok(AttentionMap { a: tape.tensor(a) })
    }

    /// Column maxima of the attention over each response, computed with one
    /// product against all responses at once. Equal to running
    /// [`Self::cross_attention`] per response.
    pub fn column_scores(&self, store: &ParamStore, hq: &Tensor, responses: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let d = self.d_model;
        let (lq, dq) = hq.dims2()?;
        if lq == 0 || dq != d {
            return contract(format!("query encoding must be [len > 0, {d}], got {:?}", hq.shape()));
        }
        let q = kernels::matmul(hq.data(), store.get(self.wq).data(), lq, d, d);
        let m = kernels::matmul_bt(&q, store.get(self.wk).data(), lq, d, d);
        let mut all = Vec::new();
        let mut lens = Vec::with_capacity(responses.len());
        for r in responses {
            let (n, dr) = r.dims2()?;
            if n == 0 || dr != d {
                return contract(format!("response encoding must be [len > 0, {d}], got {:?}", r.shape()));
            }
            lens.push(n);
            all.extend_from_slice(r.data());
        }
        let total: usize = lens.iter().sum();
        let mut s = kernels::matmul_bt(&m, &all, lq, d, total);
        let scale = 1.0 / (d as f64).sqrt();
        s.iter_mut().for_each(|x| *x *= scale);
        let mut out = Vec::with_capacity(lens.len());
        let mut start = 0;
        for n in lens {
            let mut colmax = vec![f64::NEG_INFINITY; n];
            for i in 0..lq {
                let seg = &mut s[i * total + start..i * total + start + n];
                kernels::softmax_in_place(seg);
                colmax.iter_mut().zip(seg.iter()).for_each(|(c, x)| *c = c.max(*x));
            }
            out.push(colmax);
            start += n;
        }
        Ok(out)
    }

    /// Scores every response against the query and keeps the best `k_p`
    /// tokens across all of them.
    pub fn extract_profile(
        &self,
        store: &ParamStore,
        hq: &Tensor,
        responses: &[(&[usize], &Tensor)],
        k_p: usize,
        source: ProfileSource,
    ) -> Result<ProfileTokens> {
        if responses.is_empty() {
            return Ok(ProfileTokens::empty(source));
        }
        let enc: Vec<&Tensor> = responses.iter().map(|(_, h)| *h).collect();
        let scores = self.column_scores(store, hq, &enc)?;
        let sentences: Vec<(&[usize], &[f64])> = responses
            .iter()
            .zip(&scores)
            .map(|((t, _), s)| (*t, s.as_slice()))
            .collect();
        select_profile(&sentences, k_p, source)
    }
}

/// Binary cross entropy of the matching logit against the pseudo-label.
pub fn matching_loss(tape: &mut Tape, logit: Var, label: &PseudoLabel) -> Result<Var> {
    tape.bce_with_logits(logit, if label.g { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn refiner(d: usize) -> (ParamStore, TokenRefiner) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = TokenRefiner::new(&mut store, "refiner", d, &TokenRefinerConfig::default(), &mut rng).unwrap();
        (store, r)
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_shape_and_rows() {
        let (store, r) = refiner(8);
        let a = r.cross_attention(&store, &rand_tensor(4, 8, 1), &rand_tensor(7, 8, 2)).unwrap();
        assert_eq!(a.a.shape(), &[4, 7]);
        for i in 0..4 {
            assert!((a.a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(r.cross_attention(&store, &Tensor::zeros(&[0, 8]), &rand_tensor(2, 8, 2)).is_err());
    }

    #[test]
    fn zero_projections_give_uniform_attention() {
        let (mut store, r) = refiner(8);
        store.set(r.wq, &[0.0; 64]).unwrap();
        store.set(r.wk, &[0.0; 64]).unwrap();
        let a = r.cross_attention(&store, &rand_tensor(3, 8, 1), &rand_tensor(5, 8, 2)).unwrap();
        assert!(a.a.data().iter().all(|x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn hand_set_one_dimensional_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TokenRefinerConfig {
            pool: 1,
            ..TokenRefinerConfig::default()
        };
        let r = TokenRefiner::new(&mut store, "refiner", 1, &cfg, &mut rng).unwrap();
        store.set(r.wq, &[2.0]).unwrap();
        store.set(r.wk, &[0.5]).unwrap();
        let hq = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let hr = Tensor::new(vec![2, 1], vec![3.0, 1.0]).unwrap();
        let a = r.cross_attention(&store, &hq, &hr).unwrap();
        // logits q_i * k_j with q = 2·hq, k = 0.5·hr, d = 1
        for (i, qi) in [2.0f64, -2.0].iter().enumerate() {
            let l: [f64; 2] = [qi * 1.5, qi * 0.5];
            let z = l[0].exp() + l[1].exp();
            assert!((a.a.get2(i, 0) - l[0].exp() / z).abs() < 1e-9);
            assert!((a.a.get2(i, 1) - l[1].exp() / z).abs() < 1e-9);
        }
    }

    #[test]
    fn column_scores_match_per_response_attention() {
        let (store, r) = refiner(8);
        let hq = rand_tensor(3, 8, 5);
        let rs = [rand_tensor(4, 8, 6), rand_tensor(1, 8, 7), rand_tensor(6, 8, 8)];
        let refs: Vec<&Tensor> = rs.iter().collect();
        let fast = r.column_scores(&store, &hq, &refs).unwrap();
        for (f, resp) in fast.iter().zip(&rs) {
            let slow = r.cross_attention(&store, &hq, resp).unwrap().column_max();
            for (a, b) in f.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_profile_hand_case() {
        let toks = [10, 11, 12];
        let p = select_profile(&[(&toks, &[0.9, 0.1, 0.5])], 2, ProfileSource::Cur).unwrap();
        assert_eq!(p.tokens, vec![10, 12]);
        assert_eq!(p.scores, vec![0.9, 0.5]);
        let all = select_profile(&[(&toks[..2], &[0.2, 0.3]), (&toks[2..], &[0.25])], 9, ProfileSource::Sim).unwrap();
        assert_eq!(all.tokens, vec![11, 12, 10]);
        assert!(select_profile(&[], 0, ProfileSource::Sim).is_err());
        assert_eq!(top_k_positions(&[0.5, 0.5, 0.7], 2), vec![2, 0]);
    }

    #[test]
    fn pseudo_label_worked_cases() {
        let uniform = Tensor::new(vec![2, 3], vec![1.0 / 3.0; 6]).unwrap();
        let l = pseudo_label(&[0, 1], &uniform, &[0], 0.1).unwrap();
        assert_eq!(l.g_soft, (1.0 - 1.0 / 3.0) / 2.0);
        assert!(l.g);

        let exact = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let l = pseudo_label(&[0, 1], &exact, &[0, 1, 2], 0.1).unwrap();
        assert_eq!((l.g_soft, l.g), (0.0, false));

        let l = pseudo_label(&[0, 1], &uniform, &[2], 0.1).unwrap();
        assert_eq!((l.g_soft, l.g), (0.0, false));

        assert!(pseudo_label(&[0], &uniform, &[0], 0.1).is_err());
        assert!(pseudo_label(&[], &uniform, &[0], 0.1).is_err());
    }

    #[test]
    fn matching_loss_values() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(0.0));
        let neg = PseudoLabel {
            g: false,
            g_soft: 0.0,
            alpha: 0.1,
        };
        let l = matching_loss(&mut tape, z, &neg).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let z = tape.constant(&Tensor::scalar(30.0));
        let pos = PseudoLabel { g: true, ..neg };
        let l = matching_loss(&mut tape, z, &pos).unwrap();
        let eps = 1.0 - kernels::sigmoid(30.0);
        assert!((tape.scalar(l) - eps).abs() < 1e-12);
    }

    #[test]
    fn match_score_in_open_interval_and_deterministic() {
        let (store, r) = refiner(8);
        for (lq, lr) in [(1, 1), (2, 5), (5, 2), (6, 9)] {
            let hq = rand_tensor(lq, 8, lq as u64);
            let hr = rand_tensor(lr, 8, 100 + lr as u64);
            let s = r.match_score(&store, &hq, &hr).unwrap();
            assert!(s > 0.0 && s < 1.0);
            assert_eq!(s, r.match_score(&store, &hq, &hr).unwrap());
        }
    }
}
