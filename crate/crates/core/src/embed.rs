//! Clustered low-rank token embedding.
//!
//! The vocabulary is partitioned into `c` clusters. Cluster 0 keeps a full
//! `n_0 x d` table; every other cluster `i` stores a factor pair
//! `U_i (n_i x r_i)` and `V_iᵀ (r_i x d)` and reconstructs a row on lookup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{matmul_into, Epilogue, MatMut, MatRef, MicroKernelShape, OpCounts};
use crate::qcore::{requantize, QTensor, QuantParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub sizes: Vec<usize>,
    pub ranks: Vec<usize>,
}

impl ClusterSpec {
    /// One unfactorized cluster covering the whole vocabulary.
    pub fn full(vocab: usize, d: usize) -> Self {
        Self {
            sizes: vec![vocab],
            ranks: vec![d],
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn vocab(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn validate(&self, vocab: usize, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvariantViolation(m));
        if self.sizes.is_empty() || self.sizes.len() != self.ranks.len() {
            return bad(format!(
                "{} cluster sizes vs {} ranks",
                self.sizes.len(),
                self.ranks.len()
            ));
        }
        if self.sizes.len() > 256 {
            return bad(format!("{} clusters exceed the u8 token map", self.sizes.len()));
        }
        if self.vocab() != vocab {
            return bad(format!("cluster sizes sum to {}, vocabulary is {vocab}", self.vocab()));
        }
        if self.sizes.contains(&0) {
            return bad("empty cluster".into());
        }
        if self.ranks[0] != d {
            return bad(format!("cluster 0 rank {} must equal d = {d}", self.ranks[0]));
        }
        if let Some(r) = self.ranks.iter().find(|&&r| r == 0 || r > d) {
            return bad(format!("rank {r} outside [1, {d}]"));
        }
        Ok(())
    }

    /// Token map assigning ids to clusters in contiguous ascending blocks.
    pub fn contiguous_map(&self) -> Vec<u8> {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c as u8, n))
            .collect()
    }
}

/// `n_0 * d + Σ_{i≥1} r_i * (n_i + d)`: the stored token-embedding parameters.
pub fn embedding_param_count(spec: &ClusterSpec, d: usize) -> usize {
    spec.sizes
        .iter()
        .zip(&spec.ranks)
        .enumerate()
        .map(|(i, (&n, &r))| if i == 0 { n * d } else { r * (n + d) })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub u: QTensor,
    pub vt: QTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredEmbedding {
    spec: ClusterSpec,
    d: usize,
    u0: QTensor,
    factors: Vec<FactorPair>,
    token_cluster: Vec<u8>,
    token_row: Vec<u32>,
}

impl ClusteredEmbedding {
    /// Rows within a cluster are assigned in ascending token-id order.
    pub fn new(spec: ClusterSpec, d: usize, token_cluster: Vec<u8>, u0: QTensor, factors: Vec<FactorPair>) -> Result<Self> {
        let vocab = token_cluster.len();
        spec.validate(vocab, d)?;
        let c = spec.num_clusters();
        let mut counts = vec![0usize; c];
        let mut token_row = Vec::with_capacity(vocab);
        for (id, &cl) in token_cluster.iter().enumerate() {
            let cl = cl as usize;
            if cl >= c {
                return Err(Error::InvariantViolation(format!("token {id} mapped to cluster {cl} of {c}")));
            }
            token_row.push(counts[cl] as u32);
            counts[cl] += 1;
        }
        if counts != spec.sizes {
            return Err(Error::InvariantViolation(format!(
                "token map cluster counts {counts:?} differ from sizes {:?}",
                spec.sizes
            )));
        }
        if u0.shape() != [spec.sizes[0], d] {
            return Err(Error::InvariantViolation(format!("U0 shape {:?}", u0.shape())));
        }
        if factors.len() != c - 1 {
            return Err(Error::InvariantViolation(format!("{} factor pairs for {c} clusters", factors.len())));
        }
        for (i, f) in factors.iter().enumerate() {
            let (n, r) = (spec.sizes[i + 1], spec.ranks[i + 1]);
            if f.u.shape() != [n, r] || f.vt.shape() != [r, d] {
                return Err(Error::InvariantViolation(format!(
                    "cluster {} factors {:?} x {:?}, expected [{n}, {r}] x [{r}, {d}]",
                    i + 1,
                    f.u.shape(),
                    f.vt.shape()
                )));
            }
        }
        Ok(Self {
            spec,
            d,
            u0,
            factors,
            token_cluster,
            token_row,
        })
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn vocab(&self) -> usize {
        self.token_cluster.len()
    }

    pub fn u0(&self) -> &QTensor {
        &self.u0
    }

    pub fn factors(&self) -> &[FactorPair] {
        &self.factors
    }

    pub fn token_cluster(&self) -> &[u8] {
        &self.token_cluster
    }

    pub fn param_count(&self) -> usize {
        self.u0.len() + self.factors.iter().map(|f| f.u.len() + f.vt.len()).sum::<usize>()
    }

    /// (cluster, row) of a token id.
    pub fn locate(&self, token_id: usize) -> Result<(usize, usize)> {
        match self.token_cluster.get(token_id) {
            Some(&c) => Ok((c as usize, self.token_row[token_id] as usize)),
            None => Err(Error::TokenOutOfRange {
                id: token_id,
                vocab: self.vocab(),
            }),
        }
    }

    /// Writes the `d` codes of one token's embedding into `out`.
    pub fn lookup_into(&self, token_id: usize, out: &mut [i8], out_qp: QuantParams, mk: MicroKernelShape) -> Result<OpCounts> {
        if out.len() != self.d {
            return Err(Error::ShapeMismatch(format!("lookup row of {} for d = {}", out.len(), self.d)));
        }
        let (cluster, row) = self.locate(token_id)?;
        if cluster == 0 {
            let qp = self.u0.qp();
            let mult = qp.scale / out_qp.scale;
            let src = &self.u0.data()[row * self.d..(row + 1) * self.d];
            for (o, &q) in out.iter_mut().zip(src) {
                *o = requantize(q as i32 - qp.zero_point, mult, out_qp.zero_point);
            }
            return Ok(OpCounts {
                loads: self.d as u64,
                stores: self.d as u64,
                ..Default::default()
            });
        }
        let f = &self.factors[cluster - 1];
        let r = self.spec.ranks[cluster];
        let u_row = MatRef::row_major(&f.u.data()[row * r..(row + 1) * r], 1, r, f.u.qp())?;
        let vt = MatRef::from_tensor(&f.vt)?;
        let mut dst = MatMut::row_major(out, 1, self.d, out_qp)?;
        matmul_into(&u_row, &vt, None, &mut dst, mk, Epilogue::Store)
    }
}

pub fn embed_lookup(token_id: usize, emb: &ClusteredEmbedding, out_qp: QuantParams) -> Result<QTensor> {
    out_qp.validate()?;
    let mut data = vec![0i8; emb.dim()];
    emb.lookup_into(token_id, &mut data, out_qp, MicroKernelShape::default())?;
    QTensor::new(data, vec![1, emb.dim()], out_qp)
}

pub fn cluster_of(token_id: usize, emb: &ClusteredEmbedding) -> Result<usize> {
    emb.locate(token_id).map(|(c, _)| c)
}
