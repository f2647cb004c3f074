use rayon::prelude::*;

use super::{Backward, Graph, Tensor, Var};
use crate::error::{shape_err, Result};

struct Linear {
    din: usize,
    dout: usize,
}

impl Backward for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (din, dout) = (self.din, self.dout);
        let rows = x.numel() / din;
        let g = grad.data();

        let mut gx = vec![0.0; x.numel()];
        gx.par_chunks_mut(din).enumerate().for_each(|(r, gx_r)| {
            let g_r = &g[r * dout..(r + 1) * dout];
            for (o, &gv) in g_r.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                for (d, &wv) in gx_r.iter_mut().zip(&w.data()[o * din..(o + 1) * din]) {
                    *d += gv * wv;
                }
            }
        });

        let mut gw = vec![0.0; dout * din];
        gw.par_chunks_mut(din).enumerate().for_each(|(o, gw_o)| {
            for r in 0..rows {
                let gv = g[r * dout + o];
                if gv == 0.0 {
                    continue;
                }
                for (d, &xv) in gw_o.iter_mut().zip(&x.data()[r * din..(r + 1) * din]) {
                    *d += gv * xv;
                }
            }
        });

        let mut gb = vec![0.0; dout];
        for row in g.chunks(dout) {
            for (b, v) in gb.iter_mut().zip(row) {
                *b += v;
            }
        }

        vec![
            Some(Tensor {
                shape: x.shape().to_vec(),
                data: gx,
            }),
            Some(Tensor {
                shape: vec![dout, din],
                data: gw,
            }),
            Some(Tensor {
                shape: vec![dout],
                data: gb,
            }),
        ]
    }
}

impl Graph {
    /// Affine map `x·Wᵀ + b` along the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let din = *xs.last().expect("rank ≥ 1");
        let [dout, wdin] = self.shape(w)[..] else {
            shape_err!("linear weight: expected [D_out, D_in], got {:?}", self.shape(w));
        };
        if wdin != din {
            shape_err!("linear: input last axis {din} != weight D_in {wdin}");
        }
        if self.shape(b) != [dout] {
            shape_err!("linear bias: expected [{dout}], got {:?}", self.shape(b));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let rows = xv.len() / din;
        let mut out = vec![0.0; rows * dout];
        out.par_chunks_mut(dout).enumerate().for_each(|(r, y)| {
            let xr = &xv[r * din..(r + 1) * din];
            for (o, yo) in y.iter_mut().enumerate() {
                let wr = &wv[o * din..(o + 1) * din];
                *yo = bv[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        });
        let mut shape = xs;
        *shape.last_mut().expect("rank ≥ 1") = dout;
        let y = Tensor { shape, data: out };
        Ok(self.push(y, &[x, w, b], Linear { din, dout }))
    }
}
