//! Similar-user retrieval by dot product over summed history embeddings.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DialoguePair;
use crate::encoder::SentenceEmbedder;
use crate::error::{contract, Error, Result};
use crate::tensor::kernels;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    #[default]
    Sum,
    Mean,
}

/// `[U_q ; U_r]` for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserVector {
    pub user: usize,
    pub vector: Vec<f64>,
}

/// Sums (or averages) query and response embeddings separately and
/// concatenates the two halves.
pub fn build_user_vector(
    user: usize,
    history: &[DialoguePair],
    embedder: &dyn SentenceEmbedder,
    aggregate: Aggregate,
) -> Result<UserVector> {
    if history.is_empty() {
        return contract(format!("user {user} has an empty history"));
    }
    let d = embedder.dim();
    let mut vector = vec![0.0; 2 * d];
    for pair in history {
        let q = embedder.embed(&pair.query)?;
        let r = embedder.embed(&pair.response)?;
        vector[..d].iter_mut().zip(&q.vector).for_each(|(a, b)| *a += b);
        vector[d..].iter_mut().zip(&r.vector).for_each(|(a, b)| *a += b);
    }
    if aggregate == Aggregate::Mean {
        let n = history.len() as f64;
        vector.iter_mut().for_each(|x| *x /= n);
    }
    Ok(UserVector { user, vector })
}

/// Exact brute-force inner-product index.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<usize>,
    /// Row-major `ids.len() × dim`.
    matrix: Vec<f64>,
    normalize: bool,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = kernels::l2_norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

impl DenseIndex {
    /// With `normalize`, rows and queries are L2-normalised so the score is
    /// a cosine.
    pub fn build(vectors: Vec<UserVector>, normalize: bool) -> Result<Self> {
        let dim = vectors.first().map_or(0, |v| v.vector.len());
        let mut ids = Vec::with_capacity(vectors.len());
        let mut matrix = Vec::with_capacity(vectors.len() * dim);
        let mut seen = std::collections::HashSet::new();
        for v in vectors {
            if v.vector.len() != dim {
                return Err(Error::Shape {
                    op: "dense index",
                    lhs: vec![dim],
                    rhs: vec![v.vector.len()],
                });
            }
            if !seen.insert(v.user) {
                return contract(format!("user {} registered twice in the index", v.user));
            }
            if v.vector.iter().any(|x| !x.is_finite()) {
                return contract(format!("user {} has a non-finite vector", v.user));
            }
            ids.push(v.user);
            if normalize {
                matrix.extend(normalized(&v.vector));
            } else {
                matrix.extend(v.vector);
            }
        }
        Ok(Self {
            dim,
            ids,
            matrix,
            normalize,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        &self.matrix[row * self.dim..(row + 1) * self.dim]
    }

    /// Scores of every row against `query`, in row order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::Shape {
                op: "dense index query",
                lhs: vec![self.dim],
                rhs: vec![query.len()],
            });
        }
        let q = if self.normalize { normalized(query) } else { query.to_vec() };
        Ok(kernels::matmul_bt(&q, &self.matrix, 1, self.dim, self.ids.len()))
    }

    /// The `k` highest-scoring users other than `current.user`, best first,
    /// ties broken by ascending id.
    pub fn top_k_similar(&self, current: &UserVector, k: usize) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return contract("top-k query against an empty index");
        }
        if k == 0 {
            return contract("k_u must be at least 1");
        }
        let scores = self.scores(&current.vector)?;
        let mut ranked: Vec<(usize, f64)> = self
            .ids
            .iter()
            .copied()
            .zip(scores)
            .filter(|(id, _)| *id != current.user)
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if ranked.len() > k {
            ranked.select_nth_unstable_by(k - 1, cmp);
            ranked.truncate(k);
        }
        ranked.sort_by(cmp);
        Ok(ranked)
    }

    /// Little-endian: `u64` count, `u64` dim, `u8` normalise flag, then per
    /// user a `u64` id followed by `dim` `f64` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&[self.normalize as u8])?;
        for (row, id) in self.ids.iter().enumerate() {
            w.write_all(&(*id as u64).to_le_bytes())?;
            for x in self.vector(row) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut ids = Vec::with_capacity(n);
        let mut matrix = Vec::with_capacity(n * dim);
        for _ in 0..n {
            ids.push(read_u64(&mut r)? as usize);
            for _ in 0..dim {
                matrix.push(f64::from_bits(read_u64(&mut r)?));
            }
        }
        let vectors = ids
            .into_iter()
            .zip(matrix.chunks(dim.max(1)))
            .map(|(user, v)| UserVector {
                user,
                vector: if dim == 0 { Vec::new() } else { v.to_vec() },
            })
            .collect();
        let mut index = Self::build(vectors, false)?;
        index.dim = dim;
        index.normalize = flag[0] != 0;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
