//! Straight-loop references shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Init, ParamStore};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters drawn by `init` from `seed`.
pub fn params(seed: u64, init: impl FnOnce(&mut Init<'_, ChaCha8Rng>)) -> ParamStore {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    init(&mut Init { store: &mut store, rng: &mut r });
    store
}

/// Same as [`params`] with every bias and shift perturbed away from zero.
pub fn busy_params(seed: u64, init: impl FnOnce(&mut Init<'_, ChaCha8Rng>)) -> ParamStore {
    let mut store = params(seed, init);
    let mut r = rng(seed + 1000);
    for (_, t) in store.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.2, &mut r);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    store
}

/// `softmax(q·kᵀ/√d)·v` per head over `[h, N, d]` tensors; `allowed(i, j)`
/// selects keys.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
    let (h, nq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let nk = k.shape()[1];
    let mut out = Tensor::zeros(&[h, nq, d]);
    for head in 0..h {
        for i in 0..nq {
            let mut logits = Vec::new();
            for j in 0..nk {
                if !allowed(i, j) {
                    continue;
                }
                let mut s = 0.0;
                for t in 0..d {
                    s += q.data()[(head * nq + i) * d + t] * k.data()[(head * nk + j) * d + t];
                }
                logits.push((j, s / (d as f64).sqrt()));
            }
            let m = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l.1 - m).exp()).sum();
            for &(j, l) in &logits {
                let p = (l - m).exp() / z;
                for t in 0..d {
                    out.data_mut()[(head * nq + i) * d + t] += p * v.data()[(head * nk + j) * d + t];
                }
            }
        }
    }
    out
}

/// `[N, din] · wᵀ + b` for `w: [dout, din]`.
pub fn linear_rows(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut out = Tensor::zeros(&[n, dout]);
    for i in 0..n {
        for o in 0..dout {
            let mut s = b.data()[o];
            for t in 0..din {
                s += x.data()[i * din + t] * w.data()[o * din + t];
            }
            out.data_mut()[i * dout + o] = s;
        }
    }
    out
}

/// `[h, N, d]` heads back to `[N, h·d]` rows.
pub fn merge_heads(x: &Tensor) -> Tensor {
    let (h, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[n, h * d]);
    for head in 0..h {
        for i in 0..n {
            for t in 0..d {
                out.data_mut()[i * h * d + head * d + t] = x.data()[(head * n + i) * d + t];
            }
        }
    }
    out
}

/// `[N, C]` rows to `[C, N]` voxels (flattened spatial axis).
pub fn rows_to_channels(x: &Tensor) -> Vec<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for k in 0..c {
            out[k * n + i] = x.data()[i * c + k];
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `[N, h·d]` rows to `[h, N, d]` heads.
pub fn split_heads(x: &Tensor, h: usize) -> Tensor {
    let (n, width) = (x.shape()[0], x.shape()[1]);
    let d = width / h;
    let mut out = Tensor::zeros(&[h, n, d]);
    for head in 0..h {
        for i in 0..n {
            for t in 0..d {
                out.data_mut()[(head * n + i) * d + t] = x.data()[i * width + head * d + t];
            }
        }
    }
    out
}

/// Per-row normalization with biased variance, then `gain`/`shift`.
pub fn layer_norm_rows(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Tensor {
    let c = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / (var + eps).sqrt() * gain.data()[j] + shift.data()[j];
        }
    }
    out
}

/// `[C, N]` voxel data to `[N, C]` rows.
pub fn channels_to_rows(x: &[f64], c: usize) -> Tensor {
    let n = x.len() / c;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for k in 0..c {
            out.data_mut()[i * c + k] = x[k * n + i];
        }
    }
    out
}
