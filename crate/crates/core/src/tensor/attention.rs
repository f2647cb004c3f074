use std::sync::Arc;

use rayon::prelude::*;

use super::{Backward, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Which keys each query row may attend to.
#[derive(Clone, Debug)]
pub enum KeySet {
    /// Every key.
    All,
    /// Row-major `[N_q, N_k]` boolean mask; `false` entries are treated as −∞
    /// logits.
    Mask(Vec<bool>),
    /// Explicit ascending key indices per query row.
    Lists(Vec<Vec<u32>>),
}

/// Compressed row lists.
#[derive(Debug)]
struct Csr {
    offsets: Vec<usize>,
    keys: Vec<u32>,
}

#[derive(Clone, Debug)]
enum Keys {
    All(usize),
    Sparse(Arc<Csr>),
}

impl Keys {
    fn resolve(set: &KeySet, nq: usize, nk: usize) -> Result<Self> {
        let lists: Vec<Vec<u32>> = match set {
            KeySet::All => return Ok(Keys::All(nk)),
            KeySet::Mask(mask) => {
                if mask.len() != nq * nk {
                    shape_err!("attention mask: expected {nq}×{nk} entries, got {}", mask.len());
                }
                mask.chunks(nk)
                    .map(|row| (0..nk as u32).filter(|&j| row[j as usize]).collect())
                    .collect()
            }
            KeySet::Lists(lists) => {
                if lists.len() != nq {
                    shape_err!("attention key lists: expected {nq} rows, got {}", lists.len());
                }
                if lists.iter().flatten().any(|&j| j as usize >= nk) {
                    shape_err!("attention key lists: index outside {nk} keys");
                }
                lists.clone()
            }
        };
        if let Some(row) = lists.iter().position(Vec::is_empty) {
            return Err(Error::Invalid(format!("attention: query row {row} has no allowed keys")));
        }
        let mut offsets = Vec::with_capacity(nq + 1);
        offsets.push(0);
        let mut keys = Vec::new();
        for l in lists {
            keys.extend(l);
            offsets.push(keys.len());
        }
        Ok(Keys::Sparse(Arc::new(Csr { offsets, keys })))
    }

    #[inline]
    fn row(&self, i: usize) -> RowKeys<'_> {
        match self {
            Keys::All(n) => RowKeys::All(*n),
            Keys::Sparse(c) => RowKeys::List(&c.keys[c.offsets[i]..c.offsets[i + 1]]),
        }
    }
}

enum RowKeys<'a> {
    All(usize),
    List(&'a [u32]),
}

impl RowKeys<'_> {
    fn len(&self) -> usize {
        match self {
            RowKeys::All(n) => *n,
            RowKeys::List(l) => l.len(),
        }
    }
    #[inline]
    fn get(&self, j: usize) -> usize {
        match self {
            RowKeys::All(_) => j,
            RowKeys::List(l) => l[j] as usize,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scaled logits of one query row into `scores`; returns log-sum-exp.
fn row_scores(q: &[f64], k: &[f64], d: usize, keys: &RowKeys, scale: f64, scores: &mut Vec<f64>) -> f64 {
    scores.clear();
    let mut m = f64::NEG_INFINITY;
    for j in 0..keys.len() {
        let kj = keys.get(j);
        let s = dot(q, &k[kj * d..(kj + 1) * d]) * scale;
        m = m.max(s);
        scores.push(s);
    }
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - m).exp();
        z += *s;
    }
    for s in scores.iter_mut() {
        *s /= z;
    }
    m + z.ln()
}

struct Attention {
    keys: Keys,
    dims: [usize; 4], // h, nq, nk, d
    lse: Vec<f64>,
}

impl Backward for Attention {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let [h, nq, nk, d] = self.dims;
        let scale = 1.0 / (d as f64).sqrt();
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let mut gq = vec![0.0; h * nq * d];
        let mut gk = vec![0.0; h * nk * d];
        let mut gv = vec![0.0; h * nk * d];
        gq.par_chunks_mut(nq * d)
            .zip(gk.par_chunks_mut(nk * d))
            .zip(gv.par_chunks_mut(nk * d))
            .enumerate()
            .for_each(|(head, ((gq_h, gk_h), gv_h))| {
                let qh = &q[head * nq * d..][..nq * d];
                let kh = &k[head * nk * d..][..nk * d];
                let vh = &v[head * nk * d..][..nk * d];
                let oh = &out.data()[head * nq * d..][..nq * d];
                let gh = &grad.data()[head * nq * d..][..nq * d];
                for i in 0..nq {
                    let keys = self.keys.row(i);
                    let qi = &qh[i * d..(i + 1) * d];
                    let go = &gh[i * d..(i + 1) * d];
                    let delta = dot(go, &oh[i * d..(i + 1) * d]);
                    let lse = self.lse[head * nq + i];
                    for jj in 0..keys.len() {
                        let j = keys.get(jj);
                        let kj = &kh[j * d..(j + 1) * d];
                        let p = (dot(qi, kj) * scale - lse).exp();
                        let dp = dot(go, &vh[j * d..(j + 1) * d]);
                        let ds = p * (dp - delta) * scale;
                        for t in 0..d {
                            gv_h[j * d + t] += p * go[t];
                            gq_h[i * d + t] += ds * kj[t];
                            gk_h[j * d + t] += ds * qi[t];
                        }
                    }
                }
            });
        vec![
            Some(Tensor {
                shape: vec![h, nq, d],
                data: gq,
            }),
            Some(Tensor {
                shape: vec![h, nk, d],
                data: gk,
            }),
            Some(Tensor {
                shape: vec![h, nk, d],
                data: gv,
            }),
        ]
    }
}

fn check_qkv(q: &[usize], k: &[usize], v: &[usize]) -> Result<[usize; 4]> {
    let [h, nq, d] = q[..] else {
        shape_err!("attention Q: expected [h, N_q, d], got {q:?}");
    };
    let [hk, nk, dk] = k[..] else {
        shape_err!("attention K: expected [h, N_k, d], got {k:?}");
    };
    if hk != h || dk != d {
        shape_err!("attention K {k:?} incompatible with Q {q:?}");
    }
    if v != k {
        shape_err!("attention V {v:?} must match K {k:?}");
    }
    Ok([h, nq, nk, d])
}

/// Dense `[h, N_q, N_k]` attention probabilities (zero where masked).
pub fn attention_weights(q: &Tensor, k: &Tensor, keys: &KeySet) -> Result<Tensor> {
    let [h, nq, nk, d] = check_qkv(q.shape(), k.shape(), k.shape())?;
    let keys = Keys::resolve(keys, nq, nk)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[h, nq, nk]);
    let mut scores = Vec::new();
    for head in 0..h {
        for i in 0..nq {
            let row = keys.row(i);
            let qi = &q.data()[(head * nq + i) * d..][..d];
            row_scores(qi, &k.data()[head * nk * d..][..nk * d], d, &row, scale, &mut scores);
            for (jj, p) in scores.iter().enumerate() {
                out.data_mut()[(head * nq + i) * nk + row.get(jj)] = *p;
            }
        }
    }
    Ok(out)
}

impl Graph {
    /// Multi-head scaled dot-product attention `softmax(QKᵀ/√d)·V` over the
    /// allowed keys of each query row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, keys: &KeySet) -> Result<Var> {
        let dims = check_qkv(self.shape(q), self.shape(k), self.shape(v))?;
        let [h, nq, nk, d] = dims;
        let keys = Keys::resolve(keys, nq, nk)?;
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; h * nq * d];
        let mut lse = vec![0.0; h * nq];
        out.par_chunks_mut(nq * d)
            .zip(lse.par_chunks_mut(nq))
            .enumerate()
            .for_each(|(head, (o_h, lse_h))| {
                let kh = &kv[head * nk * d..][..nk * d];
                let vh = &vv[head * nk * d..][..nk * d];
                let mut scores = Vec::new();
                for i in 0..nq {
                    let row = keys.row(i);
                    let qi = &qv[(head * nq + i) * d..][..d];
                    lse_h[i] = row_scores(qi, kh, d, &row, scale, &mut scores);
                    let oi = &mut o_h[i * d..(i + 1) * d];
                    for (jj, &p) in scores.iter().enumerate() {
                        let j = row.get(jj);
                        for (o, x) in oi.iter_mut().zip(&vh[j * d..(j + 1) * d]) {
                            *o += p * x;
                        }
                    }
                }
            });
        let y = Tensor {
            shape: vec![h, nq, d],
            data: out,
        };
        Ok(self.push(y, &[q, k, v], Attention { keys, dims, lse }))
    }
}
