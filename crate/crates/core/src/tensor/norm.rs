use super::{Backward, Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

/// Normalizes contiguous groups of `n` values; returns `(x̂, 1/σ per group)`.
fn normalize_groups(x: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let groups = x.len() / n;
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(groups);
    for chunk in x.chunks(n) {
        let mean = chunk.iter().sum::<f64>() / n as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        xhat.extend(chunk.iter().map(|v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

/// `dx = (1/σ)·(dx̂ − mean(dx̂) − x̂·mean(dx̂·x̂))` per group.
fn normalize_backward(dxhat: &[f64], xhat: &[f64], inv_std: &[f64], n: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(dxhat.len());
    for ((dg, xg), &inv) in dxhat.chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
        let m1 = dg.iter().sum::<f64>() / n as f64;
        let m2 = dg.iter().zip(xg).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        dx.extend(dg.iter().zip(xg).map(|(d, xh)| inv * (d - m1 - xh * m2)));
    }
    dx
}

struct InstanceNorm {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    spatial: usize,
}

impl Backward for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance_norm3d"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let dx = normalize_backward(grad.data(), &self.xhat, &self.inv_std, self.spatial);
        vec![Some(Tensor {
            shape: inputs[0].shape().to_vec(),
            data: dx,
        })]
    }
}

struct LayerNorm {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    width: usize,
}

impl Backward for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let gain = inputs[1];
        let n = self.width;
        let mut dgain = vec![0.0; n];
        let mut dshift = vec![0.0; n];
        let mut dxhat = Vec::with_capacity(grad.numel());
        for (g_row, xh_row) in grad.data().chunks(n).zip(self.xhat.chunks(n)) {
            for j in 0..n {
                dgain[j] += g_row[j] * xh_row[j];
                dshift[j] += g_row[j];
                dxhat.push(g_row[j] * gain.data()[j]);
            }
        }
        let dx = normalize_backward(&dxhat, &self.xhat, &self.inv_std, n);
        vec![
            Some(Tensor {
                shape: inputs[0].shape().to_vec(),
                data: dx,
            }),
            Some(Tensor {
                shape: vec![n],
                data: dgain,
            }),
            Some(Tensor {
                shape: vec![n],
                data: dshift,
            }),
        ]
    }
}

impl Graph {
    /// Per-channel normalization over the spatial axes of `[C, D, H, W]`,
    /// without learnable affine terms.
    pub fn instance_norm3d(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [_, d, h, w] = self.value(x).dims4("instance_norm3d")?;
        if eps < 0.0 || !eps.is_finite() {
            invalid!("instance_norm3d eps {eps} must be a finite value ≥ 0");
        }
        let spatial = d * h * w;
        if eps == 0.0 && spatial < 2 {
            invalid!("instance_norm3d: single-voxel channel with eps = 0 divides by zero variance");
        }
        let (xhat, inv_std) = normalize_groups(self.value(x).data(), spatial, eps);
        if inv_std.iter().any(|v| !v.is_finite()) {
            invalid!("instance_norm3d: zero-variance channel with eps = 0");
        }
        let out = Tensor {
            shape: self.shape(x).to_vec(),
            data: xhat.clone(),
        };
        Ok(self.push(out, &[x], InstanceNorm { xhat, inv_std, spatial }))
    }

    /// Normalization over the last axis followed by `gain ⊙ x̂ + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().expect("rank ≥ 1");
        if self.shape(gain) != [n] || self.shape(shift) != [n] {
            shape_err!(
                "layer_norm: last axis {n} vs gain {:?}, shift {:?}",
                self.shape(gain),
                self.shape(shift)
            );
        }
        if eps < 0.0 || (eps == 0.0 && n < 2) {
            invalid!("layer_norm needs eps > 0 or a last axis ≥ 2 (got eps {eps}, width {n})");
        }
        let (xhat, inv_std) = normalize_groups(self.value(x).data(), n, eps);
        if inv_std.iter().any(|v| !v.is_finite()) {
            invalid!("layer_norm: constant row with eps = 0");
        }
        let (gv, sv) = (self.value(gain).data(), self.value(shift).data());
        let data = xhat
            .chunks(n)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| v * gv[j] + sv[j]))
            .collect();
        let out = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        Ok(self.push(out, &[x, gain, shift], LayerNorm { xhat, inv_std, width: n }))
    }
}
