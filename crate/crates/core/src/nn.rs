//! Layers built on the tape: linear maps, layer norm, multi-head attention
//! and the pre-norm transformer block shared by the encoder and decoder.

use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor::{kernels, ParamId, ParamStore, Tape, Tensor, Var};

/// Additive logit used for masked attention entries.
pub const MASKED: f64 = -1e9;

/// A parameter store viewed for one forward pass. Only bindings marked
/// `trainable` record gradients.
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binding<'a> {
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }

    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.store, id, self.trainable)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = if bias {
            Some(store.add_const(format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    /// `x [rows, in] · W + b` on plain values.
    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let w = store.get(self.w);
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut y = kernels::matmul(x, w.data(), rows, k, n);
        if let Some(b) = self.b {
            let b = store.get(b).data();
            for row in y.chunks_mut(n) {
                row.iter_mut().zip(b).for_each(|(v, c)| *v += c);
            }
        }
        y
    }

    pub fn forward(&self, tape: &mut Tape, p: Binding, x: Var) -> Result<Var> {
        let w = p.bind(tape, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = p.bind(tape, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    /// Row-wise normalisation on plain values.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let g = store.get(self.gamma).data();
        let b = store.get(self.beta).data();
        let n = g.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + Self::EPS).sqrt();
            out.extend(row.iter().enumerate().map(|(j, v)| g[j] * (v - mean) * r + b[j]));
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, p: Binding, x: Var) -> Result<Var> {
        let g = p.bind(tape, self.gamma);
        let b = p.bind(tape, self.beta);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// Scaled dot-product attention split over `heads` equal column blocks.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return contract(format!("model dimension {d_model} not divisible by {heads} heads"));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), d_model, d_model, false, rng)?,
            wk: Linear::new(store, &format!("{name}.k"), d_model, d_model, false, rng)?,
            wv: Linear::new(store, &format!("{name}.v"), d_model, d_model, false, rng)?,
            wo: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng)?,
            heads,
            d_model,
        })
    }

    /// `mask`, when given, is an additive `[len_q, len_kv]` constant.
    pub fn forward(&self, tape: &mut Tape, p: Binding, xq: Var, xkv: Var, mask: Option<Var>) -> Result<Var> {
        let q = self.wq.forward(tape, p, xq)?;
        let k = self.wk.forward(tape, p, xkv)?;
        let v = self.wv.forward(tape, p, xkv)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let logits = tape.matmul_bt(qh, kh)?;
            let mut logits = tape.scale(logits, scale);
            if let Some(m) = mask {
                logits = tape.add(logits, m)?;
            }
            let a = tape.softmax(logits, 1)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.wo.forward(tape, p, cat)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d_model, ff_dim, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, d_model, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: Binding, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let f = self.ff1.forward(tape, p, h)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, p, f)?;
        tape.add(x, f)
    }
}

/// Keys and values of one block for the positions decoded so far.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl Block {
    /// Causal forward of `rows` new positions on plain values, attending to
    /// the cached positions and to each other; extends the cache.
    pub fn step(&self, store: &ParamStore, x: &[f64], rows: usize, cache: &mut KvCache) -> Vec<f64> {
        self.run(store, x, rows, cache, true)
    }

    /// Unmasked forward of a whole sequence on plain values.
    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        self.run(store, x, rows, &mut KvCache::default(), false)
    }

    fn run(&self, store: &ParamStore, x: &[f64], rows: usize, cache: &mut KvCache, causal: bool) -> Vec<f64> {
        let d = self.attn.d_model;
        let heads = self.attn.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let past = cache.keys.len() / d;
        let h = self.ln1.apply(store, x);
        let q = self.attn.wq.apply(store, &h, rows);
        cache.keys.extend(self.attn.wk.apply(store, &h, rows));
        cache.values.extend(self.attn.wv.apply(store, &h, rows));
        let mut cat = vec![0.0; rows * d];
        let mut logits = Vec::with_capacity(past + rows);
        for i in 0..rows {
            let visible = if causal { past + i + 1 } else { past + rows };
            for head in 0..heads {
                let c = head * dh;
                let qi = &q[i * d + c..i * d + c + dh];
                logits.clear();
                logits.extend((0..visible).map(|j| kernels::dot(qi, &cache.keys[j * d + c..j * d + c + dh]) * scale));
                kernels::softmax_in_place(&mut logits);
                let out = &mut cat[i * d + c..i * d + c + dh];
                for (j, a) in logits.iter().enumerate() {
                    let v = &cache.values[j * d + c..j * d + c + dh];
                    out.iter_mut().zip(v).for_each(|(o, v)| *o += a * v);
                }
            }
        }
        let a = self.attn.wo.apply(store, &cat, rows);
        let x: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + a).collect();
        let h = self.ln2.apply(store, &x);
        let mut f = self.ff1.apply(store, &h, rows);
        f.iter_mut().for_each(|v| *v = v.max(0.0));
        let f = self.ff2.apply(store, &f, rows);
        x.iter().zip(&f).map(|(x, f)| x + f).collect()
    }
}

/// Additive causal mask: row `i` may attend to columns `0..=i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASKED;
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Single-layer LSTM with gates ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            wx: Linear::new(store, &format!("{name}.wx"), input, 4 * hidden, true, rng)?,
            wh: Linear::new(store, &format!("{name}.wh"), hidden, 4 * hidden, false, rng)?,
            hidden,
        })
    }

    /// Runs over the rows of `seq: [T, input]` and returns the final hidden
    /// state `[1, hidden]`.
    pub fn forward(&self, tape: &mut Tape, p: Binding, seq: Var) -> Result<Var> {
        let steps = tape.shape(seq)[0];
        if steps == 0 {
            return contract("LSTM over an empty sequence");
        }
        let n = self.hidden;
        let gx = self.wx.forward(tape, p, seq)?;
        let mut h = tape.constant(&Tensor::zeros(&[1, n]));
        let mut c = tape.constant(&Tensor::zeros(&[1, n]));
        for t in 0..steps {
            let xt = tape.slice_rows(gx, t, 1)?;
            let ht = self.wh.forward(tape, p, h)?;
            let g = tape.add(xt, ht)?;
            let i = tape.slice_cols(g, 0, n)?;
            let f = tape.slice_cols(g, n, n)?;
            let u = tape.slice_cols(g, 2 * n, n)?;
            let o = tape.slice_cols(g, 3 * n, n)?;
            let (i, f, u, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(u), tape.sigmoid(o));
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, u)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
        }
        Ok(h)
    }
}
