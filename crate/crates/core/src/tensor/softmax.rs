use super::{Backward, Graph, Tensor, Var};

/// Max-subtracted softmax of one slice, written into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

struct Softmax {
    width: usize,
}

impl Backward for Softmax {
    fn name(&self) -> &'static str {
        "softmax_lastdim"
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.width;
        let mut gx = Vec::with_capacity(out.numel());
        for (p, g) in out.data().chunks(n).zip(grad.data().chunks(n)) {
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            gx.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
        }
        vec![Some(Tensor {
            shape: out.shape().to_vec(),
            data: gx,
        })]
    }
}

struct SoftmaxChannels {
    channels: usize,
}

impl Backward for SoftmaxChannels {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = self.channels;
        let n = out.numel() / c;
        let (p, g) = (out.data(), grad.data());
        let mut gx = vec![0.0; out.numel()];
        for i in 0..n {
            let dot: f64 = (0..c).map(|k| p[k * n + i] * g[k * n + i]).sum();
            for k in 0..c {
                gx[k * n + i] = p[k * n + i] * (g[k * n + i] - dot);
            }
        }
        vec![Some(Tensor {
            shape: out.shape().to_vec(),
            data: gx,
        })]
    }
}

impl Graph {
    /// Softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("rank ≥ 1");
        let mut data = vec![0.0; xv.numel()];
        for (src, dst) in xv.data().chunks(n).zip(data.chunks_mut(n)) {
            softmax_into(src, dst);
        }
        let y = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        self.push(y, &[x], Softmax { width: n })
    }

    /// Softmax over the leading (channel) axis of a `[C, ...]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.numel() / c;
        let src = xv.data();
        let mut data = vec![0.0; xv.numel()];
        let (mut col, mut res) = (vec![0.0; c], vec![0.0; c]);
        for i in 0..n {
            for k in 0..c {
                col[k] = src[k * n + i];
            }
            softmax_into(&col, &mut res);
            for k in 0..c {
                data[k * n + i] = res[k];
            }
        }
        let y = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        self.push(y, &[x], SoftmaxChannels { channels: c })
    }
}
