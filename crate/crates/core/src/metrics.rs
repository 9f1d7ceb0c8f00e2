//! Overlap, diversity, embedding and persona metrics for generated
//! responses. Scores live in [0, 1]; reports display them ×100.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::kernels;

/// Smoothing floor for zero n-gram precisions.
pub const BLEU_EPSILON: f64 = 1e-9;
/// Recall weight of the ROUGE F-measure.
pub const ROUGE_BETA: f64 = 1.2;

fn ngrams(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for one pair.
fn clipped(candidate: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let refs = ngrams(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Corpus-level BLEU-n: uniform geometric mean of modified 1..n-gram
/// precisions times the brevity penalty, counts pooled over all pairs.
pub fn corpus_bleu(pairs: &[(&[usize], &[usize])], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return contract(format!("BLEU order must be in 1..=4, got {n}"));
    }
    let cand_len: usize = pairs.iter().map(|p| p.0.len()).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let ref_len: usize = pairs.iter().map(|p| p.1.len()).sum();
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut m, mut t) = (0, 0);
        for (c, r) in pairs {
            let (a, b) = clipped(c, r, k);
            m += a;
            t += b;
        }
        // No shared unigram means no overlap at all; smoothing only
        // rescues higher orders.
        if k == 1 && m == 0 {
            return Ok(0.0);
        }
        let p = if t == 0 || m == 0 { BLEU_EPSILON } else { m as f64 / t as f64 };
        log_sum += p.ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// BLEU-n of one candidate against one reference.
pub fn bleu(candidate: &[usize], reference: &[usize], n: usize) -> Result<f64> {
    corpus_bleu(&[(candidate, reference)], n)
}

fn f_beta(p: f64, r: f64) -> f64 {
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// ROUGE-N F-measure from clipped n-gram overlap.
pub fn rouge_n(candidate: &[usize], reference: &[usize], n: usize) -> f64 {
    let (m, t) = clipped(candidate, reference, n);
    let rt = reference.len().saturating_sub(n - 1);
    if t == 0 || rt == 0 {
        return 0.0;
    }
    f_beta(m as f64 / t as f64, m as f64 / rt as f64)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    f_beta(l / candidate.len() as f64, l / reference.len() as f64)
}

/// Distinct n-grams over all candidates divided by total n-grams.
pub fn distinct(candidates: &[&[usize]], n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return contract(format!("distinct order must be 1 or 2, got {n}"));
    }
    let mut seen = HashSet::new();
    let mut total = 0;
    for c in candidates {
        if c.len() >= n {
            for w in c.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { seen.len() as f64 / total as f64 })
}

/// Token embeddings for the embedding-based metrics.
pub trait TokenEmbeddings {
    fn dim(&self) -> usize;
    fn token(&self, id: usize) -> Option<&[f64]>;
}

/// Row-per-token embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return contract("embedding rows must be non-empty and equally long");
        }
        Ok(Self { dim, rows })
    }

    /// Columns of a projection matrix `[V, d]` as token embeddings.
    pub fn from_matrix(m: &crate::tensor::Tensor) -> Result<Self> {
        let s = m.shape();
        if s.len() != 2 {
            return contract("embedding matrix must be 2-d");
        }
        Self::new(m.data().chunks(s[1]).map(<[f64]>::to_vec).collect())
    }
}

impl TokenEmbeddings for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token(&self, id: usize) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    kernels::dot(a, b) / (na * nb)
}

fn vectors<'e>(tokens: &[usize], e: &'e dyn TokenEmbeddings) -> Vec<&'e [f64]> {
    tokens.iter().filter_map(|&t| e.token(t)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

/// Average, extrema and greedy embedding similarity.
pub fn embedding_metrics(candidate: &[usize], reference: &[usize], e: &dyn TokenEmbeddings) -> EmbeddingScores {
    let c = vectors(candidate, e);
    let r = vectors(reference, e);
    if c.is_empty() || r.is_empty() {
        return EmbeddingScores::default();
    }
    let d = e.dim();
    let mean = |xs: &[&[f64]]| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for x in xs {
            m.iter_mut().zip(x.iter()).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= xs.len() as f64);
        m
    };
    let extrema = |xs: &[&[f64]]| -> Vec<f64> {
        (0..d)
            .map(|k| xs.iter().map(|x| x[k]).fold(0.0, |best: f64, v| if v.abs() > best.abs() { v } else { best }))
            .collect()
    };
    let one_way = |a: &[&[f64]], b: &[&[f64]]| -> f64 {
        a.iter()
            .map(|x| b.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / a.len() as f64
    };
    EmbeddingScores {
        average: cosine(&mean(&c), &mean(&r)),
        extrema: cosine(&extrema(&c), &extrema(&r)),
        greedy: 0.5 * (one_way(&c, &r) + one_way(&r, &c)),
    }
}

/// Token ids excluded from the persona metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stopwords(HashSet<usize>);

impl Stopwords {
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        Self(ids.into_iter().collect())
    }

    pub fn contains(&self, id: usize) -> bool {
        self.0.contains(&id)
    }

    fn types<'a>(&self, tokens: impl IntoIterator<Item = &'a usize>) -> HashSet<usize> {
        tokens.into_iter().copied().filter(|t| !self.0.contains(t)).collect()
    }
}

/// F1 between the unigram types of the candidate and of the history.
pub fn persona_f1(candidate: &[usize], history: &[&[usize]], stop: &Stopwords) -> f64 {
    let c = stop.types(candidate);
    let h = stop.types(history.iter().flat_map(|s| s.iter()));
    if c.is_empty() || h.is_empty() {
        return 0.0;
    }
    let overlap = c.intersection(&h).count() as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / c.len() as f64;
    let r = overlap / h.len() as f64;
    2.0 * p * r / (p + r)
}

/// Smoothed inverse document frequencies over a document collection.
#[derive(Clone, Debug, PartialEq)]
pub struct IdfTable {
    docs: usize,
    df: HashMap<usize, usize>,
}

impl IdfTable {
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let mut df = HashMap::new();
        let mut n = 0;
        for d in docs {
            n += 1;
            let set: HashSet<usize> = d.iter().copied().collect();
            for t in set {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        Self { docs: n, df }
    }

    /// Table with explicit values, for tests and external tables.
    pub fn from_values(values: impl IntoIterator<Item = (usize, f64)>) -> FixedIdf {
        FixedIdf(values.into_iter().collect())
    }

    /// `ln((N + 1) / (df + 1)) + 1`; unseen tokens get the `df = 0` value.
    pub fn idf(&self, token: usize) -> f64 {
        let df = self.df.get(&token).copied().unwrap_or(0);
        ((self.docs as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }

    pub fn docs(&self) -> usize {
        self.docs
    }
}

/// Fixed token → IDF values.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedIdf(HashMap<usize, f64>);

pub trait Idf {
    fn weight(&self, token: usize) -> f64;
}

impl Idf for IdfTable {
    fn weight(&self, token: usize) -> f64 {
        self.idf(token)
    }
}

impl Idf for FixedIdf {
    fn weight(&self, token: usize) -> f64 {
        self.0.get(&token).copied().unwrap_or(0.0)
    }
}

/// Best IDF-weighted share of a history sentence's words found in the
/// candidate, over all sentences.
pub fn persona_coverage(candidate: &[usize], sentences: &[&[usize]], idf: &dyn Idf, stop: &Stopwords) -> f64 {
    let c = stop.types(candidate);
    sentences
        .iter()
        .map(|s| {
            let words = stop.types(s.iter());
            let total: f64 = words.iter().map(|&w| idf.weight(w)).sum();
            if total <= 0.0 {
                return 0.0;
            }
            words.iter().filter(|w| c.contains(w)).map(|&w| idf.weight(w)).sum::<f64>() / total
        })
        .fold(0.0, f64::max)
}

/// One generated response with what it is scored against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub candidate: Vec<usize>,
    pub reference: Vec<usize>,
    /// The responder's past responses.
    pub history: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageTarget {
    #[default]
    History,
    Reference,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub coverage_target: CoverageTarget,
}

/// The twelve reported metrics, in [0, 1].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub emb_average: f64,
    pub emb_extrema: f64,
    pub emb_greedy: f64,
    pub persona_f1: f64,
    pub persona_coverage: f64,
    pub samples: usize,
}

/// Per-sample scores written to the detail file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub index: usize,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub embedding: EmbeddingScores,
    pub persona_f1: f64,
    pub persona_coverage: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 14] = [
        "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L", "Dist-1", "Dist-2", "Average",
        "Extrema", "Greedy", "P-F1", "P-Cover",
    ];

    pub fn values(&self) -> [f64; 14] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
            self.distinct1,
            self.distinct2,
            self.emb_average,
            self.emb_extrema,
            self.emb_greedy,
            self.persona_f1,
            self.persona_coverage,
        ]
    }

    /// `(metric, value × 100)` rows.
    pub fn table(&self) -> Vec<(&'static str, f64)> {
        Self::NAMES.iter().copied().zip(self.values().map(|v| v * 100.0)).collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<10} {:>8}\n", "metric", "value");
        for (name, v) in self.table() {
            out.push_str(&format!("{name:<10} {v:>8.3}\n"));
        }
        out
    }
}

/// Scores every sample; returns the aggregate and per-sample rows.
pub fn evaluate(
    samples: &[EvalSample],
    embeddings: &dyn TokenEmbeddings,
    idf: &dyn Idf,
    stop: &Stopwords,
    opts: &MetricOptions,
) -> Result<(MetricReport, Vec<SampleScores>)> {
    if samples.iter().any(|s| s.reference.is_empty()) {
        return Err(Error::Data("evaluation sample with an empty reference".into()));
    }
    let n = samples.len();
    if n == 0 {
        return Ok((MetricReport::default(), Vec::new()));
    }
    let pairs: Vec<(&[usize], &[usize])> = samples
        .iter()
        .map(|s| (s.candidate.as_slice(), s.reference.as_slice()))
        .collect();
    let cands: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
    let mut rep = MetricReport {
        bleu1: corpus_bleu(&pairs, 1)?,
        bleu2: corpus_bleu(&pairs, 2)?,
        bleu3: corpus_bleu(&pairs, 3)?,
        bleu4: corpus_bleu(&pairs, 4)?,
        distinct1: distinct(&cands, 1)?,
        distinct2: distinct(&cands, 2)?,
        samples: n,
        ..MetricReport::default()
    };
    let mut rows = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let hist: Vec<&[usize]> = s.history.iter().map(Vec::as_slice).collect();
        let emb = embedding_metrics(&s.candidate, &s.reference, embeddings);
        let cover = match opts.coverage_target {
            CoverageTarget::History => persona_coverage(&s.candidate, &hist, idf, stop),
            CoverageTarget::Reference => persona_coverage(&s.candidate, &[s.reference.as_slice()], idf, stop),
        };
        let row = SampleScores {
            index: i,
            bleu1: bleu(&s.candidate, &s.reference, 1)?,
            rouge_l: rouge_l(&s.candidate, &s.reference),
            embedding: emb,
            persona_f1: persona_f1(&s.candidate, &hist, stop),
            persona_coverage: cover,
        };
        rep.rouge1 += rouge_n(&s.candidate, &s.reference, 1);
        rep.rouge2 += rouge_n(&s.candidate, &s.reference, 2);
        rep.rouge_l += row.rouge_l;
        rep.emb_average += emb.average;
        rep.emb_extrema += emb.extrema;
        rep.emb_greedy += emb.greedy;
        rep.persona_f1 += row.persona_f1;
        rep.persona_coverage += row.persona_coverage;
        rows.push(row);
    }
    for v in [
        &mut rep.rouge1,
        &mut rep.rouge2,
        &mut rep.rouge_l,
        &mut rep.emb_average,
        &mut rep.emb_extrema,
        &mut rep.emb_greedy,
        &mut rep.persona_f1,
        &mut rep.persona_coverage,
    ] {
        *v /= n as f64;
    }
    Ok((rep, rows))
}

/// Report as `metric,value` CSV rows (values ×100).
pub fn write_report_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["metric", "value"]).map_err(csv_err)?;
    for (name, v) in report.table() {
        w.write_record([name.to_string(), format!("{v:.6}")]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per sample.
pub fn write_details(rows: &[SampleScores], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Sweep results: one row per swept value with every metric (×100).
pub fn write_sweep_csv(param: &str, rows: &BTreeMap<usize, Vec<MetricReport>>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec![param.to_string(), "seeds".to_string()];
    header.extend(MetricReport::NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for (value, reports) in rows {
        let mut rec = vec![value.to_string(), reports.len().to_string()];
        for k in 0..MetricReport::NAMES.len() {
            let mean = reports.iter().map(|r| r.values()[k]).sum::<f64>() / reports.len().max(1) as f64;
            rec.push(format!("{:.6}", mean * 100.0));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
