use rayon::prelude::*;

use super::{Backward, Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

/// Stride/padding/grouping of a cubic 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    /// One filter per channel (`weight` shaped `[C, 1, k, k, k]`).
    pub depthwise: bool,
}

impl ConvOpts {
    pub const fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            depthwise: false,
        }
    }

    pub const fn pointwise() -> Self {
        Self {
            stride: 1,
            padding: 0,
            depthwise: false,
        }
    }

    pub const fn depthwise_same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            depthwise: true,
        }
    }

    /// Unpadded stride-2 convolution; paired with a `2³` kernel it halves
    /// every spatial axis.
    pub const fn down2() -> Self {
        Self {
            stride: 2,
            padding: 0,
            depthwise: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    depthwise: bool,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    /// Input channel feeding output channel `co` at filter slot `ci`.
    fn src_channel(&self, co: usize, ci: usize) -> usize {
        if self.depthwise {
            co
        } else {
            ci
        }
    }
    fn filter_in(&self) -> usize {
        if self.depthwise {
            1
        } else {
            self.cin
        }
    }
    /// Output positions `o` along an axis with `o·stride + tap − pad` in range.
    fn valid_range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (n_in, n_out, s, p) = (self.inp[axis] as isize, self.out[axis] as isize, self.stride as isize, self.pad as isize);
        let t = tap as isize;
        // o·s + t − p ≥ 0  and  o·s + t − p ≤ n_in − 1
        let lo = ((p - t) + s - 1).div_euclid(s).max(0);
        let hi = ((n_in - 1 + p - t).div_euclid(s) + 1).min(n_out);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// Visits every (output index, input index) pair for a single filter tap.
#[inline]
fn for_tap(geo: &Geom, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (d0, d1) = geo.valid_range(0, kd);
    let (h0, h1) = geo.valid_range(1, kh);
    let (w0, w1) = geo.valid_range(2, kw);
    if w1 <= w0 {
        return;
    }
    let [_, hi, wi] = geo.inp;
    let [_, ho, wo] = geo.out;
    let s = geo.stride;
    for od in d0..d1 {
        let id = od * s + kd - geo.pad;
        for oh in h0..h1 {
            let ih = oh * s + kh - geo.pad;
            let out_row = (od * ho + oh) * wo;
            let in_row = (id * hi + ih) * wi;
            f(out_row + w0, in_row + w0 * s + kw - geo.pad, w1 - w0);
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, geo: &Geom) -> Tensor {
    let (k, fin) = (geo.k, geo.filter_in());
    let (in_vol, out_vol) = (geo.in_vol(), geo.out_vol());
    let s = geo.stride;
    let mut out = vec![0.0; geo.cout * out_vol];
    out.par_chunks_mut(out_vol).enumerate().for_each(|(co, dst)| {
        dst.fill(b.data[co]);
        for ci in 0..fin {
            let src = &x.data[geo.src_channel(co, ci) * in_vol..][..in_vol];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w.data[(((co * fin + ci) * k + kd) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for_tap(geo, kd, kh, kw, |o, i, n| {
                            let dst = &mut dst[o..o + n];
                            if s == 1 {
                                for (d, &v) in dst.iter_mut().zip(&src[i..i + n]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * src[i + j * s];
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    Tensor {
        shape: vec![geo.cout, geo.out[0], geo.out[1], geo.out[2]],
        data: out,
    }
}

struct Conv3d(Geom);

impl Backward for Conv3d {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let geo = &self.0;
        let (x, w) = (inputs[0], inputs[1]);
        let (k, fin, s) = (geo.k, geo.filter_in(), geo.stride);
        let (in_vol, out_vol) = (geo.in_vol(), geo.out_vol());
        let kvol = k * k * k;

        // bias
        let gb: Vec<f64> = grad.data.chunks(out_vol).map(|c| c.iter().sum()).collect();

        // weight: one output channel per task
        let mut gw = vec![0.0; w.numel()];
        gw.par_chunks_mut(fin * kvol).enumerate().for_each(|(co, gw_co)| {
            let g = &grad.data[co * out_vol..][..out_vol];
            for ci in 0..fin {
                let src = &x.data[geo.src_channel(co, ci) * in_vol..][..in_vol];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let mut acc = 0.0;
                            for_tap(geo, kd, kh, kw, |o, i, n| {
                                for j in 0..n {
                                    acc += g[o + j] * src[i + j * s];
                                }
                            });
                            gw_co[(ci * k + kd) * k * k + kh * k + kw] = acc;
                        }
                    }
                }
            }
        });

        // input: one input channel per task, output channels visited in order
        let mut gx = vec![0.0; x.numel()];
        gx.par_chunks_mut(in_vol).enumerate().for_each(|(src_c, gx_c)| {
            let (co_range, ci) = if geo.depthwise { (src_c..src_c + 1, 0) } else { (0..geo.cout, src_c) };
            for co in co_range {
                let g = &grad.data[co * out_vol..][..out_vol];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = w.data[(((co * fin + ci) * k + kd) * k + kh) * k + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for_tap(geo, kd, kh, kw, |o, i, n| {
                                for j in 0..n {
                                    gx_c[i + j * s] += wv * g[o + j];
                                }
                            });
                        }
                    }
                }
            }
        });

        vec![
            Some(Tensor {
                shape: x.shape.clone(),
                data: gx,
            }),
            Some(Tensor {
                shape: w.shape.clone(),
                data: gw,
            }),
            Some(Tensor {
                shape: vec![geo.cout],
                data: gb,
            }),
        ]
    }
}

struct MaxPool {
    argmax: Vec<usize>,
}

impl Backward for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool3d"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        for (&src, &g) in self.argmax.iter().zip(&grad.data) {
            gx.data[src] += g;
        }
        vec![Some(gx)]
    }
}

struct Upsample {
    factor: usize,
}

impl Backward for Upsample {
    fn name(&self) -> &'static str {
        "nearest_upsample3d"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let [c, d, h, w] = x.dims4("upsample").expect("validated in forward");
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        let mut gx = Tensor::zeros(x.shape());
        for ch in 0..c {
            for od in 0..d * f {
                for oh in 0..ho {
                    let orow = ((ch * d * f + od) * ho + oh) * wo;
                    let irow = ((ch * d + od / f) * h + oh / f) * w;
                    for ow in 0..wo {
                        gx.data[irow + ow / f] += grad.data[orow + ow];
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

impl Graph {
    /// Cubic-kernel 3D convolution over a `[C_in, D, H, W]` volume.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, opts: ConvOpts) -> Result<Var> {
        let [cin, d, h, wd] = self.value(x).dims4("conv3d input")?;
        let ws = self.shape(w).to_vec();
        let [cout, wcin, k, k1, k2] = ws[..] else {
            shape_err!("conv3d weight: expected rank-5 [C_out,C_in,k,k,k], got {ws:?}");
        };
        if k != k1 || k != k2 {
            shape_err!("conv3d weight: kernel axes differ {ws:?}");
        }
        if k % 2 == 0 && opts.padding != 0 {
            invalid!("conv3d kernel size {k} is even; even kernels are only allowed unpadded");
        }
        if !(1..=2).contains(&opts.stride) {
            invalid!("conv3d stride {} not in {{1, 2}}", opts.stride);
        }
        if opts.depthwise {
            if cout != cin {
                shape_err!("depthwise conv3d: axis C_out ({cout}) != C_in ({cin})");
            }
            if wcin != 1 {
                shape_err!("depthwise conv3d: weight axis 1 is {wcin}, expected 1");
            }
        } else if wcin != cin {
            shape_err!("conv3d: weight axis C_in is {wcin}, input channel axis is {cin}");
        }
        if self.shape(b) != [cout] {
            shape_err!("conv3d bias: expected [{cout}], got {:?}", self.shape(b));
        }
        let mut out = [0usize; 3];
        for (axis, (&n, name)) in [d, h, wd].iter().zip(["D", "H", "W"]).enumerate() {
            let span = n + 2 * opts.padding;
            if span < k {
                shape_err!("conv3d: axis {name} extent {n} with padding {} is smaller than kernel {k}", opts.padding);
            }
            out[axis] = (span - k) / opts.stride + 1;
        }
        let geo = Geom {
            cin,
            cout,
            k,
            stride: opts.stride,
            pad: opts.padding,
            depthwise: opts.depthwise,
            inp: [d, h, wd],
            out,
        };
        debug_assert!(geo.cin > 0);
        let y = conv_forward(self.value(x), self.value(w), self.value(b), &geo);
        Ok(self.push(y, &[x, w, b], Conv3d(geo)))
    }

    /// Non-overlapping max pooling with a cubic window. Ties resolve to the
    /// first maximal voxel in scan order.
    pub fn maxpool3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [c, d, h, w] = self.value(x).dims4("maxpool3d")?;
        if factor < 2 {
            invalid!("maxpool3d factor {factor} < 2");
        }
        for (n, name) in [(d, "D"), (h, "H"), (w, "W")] {
            if n % factor != 0 {
                shape_err!("maxpool3d: axis {name} extent {n} not divisible by {factor}");
            }
        }
        let f = factor;
        let (od, oh, ow) = (d / f, h / f, w / f);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(c * od * oh * ow);
        let mut argmax = Vec::with_capacity(data.capacity());
        for ch in 0..c {
            for a in 0..od {
                for b in 0..oh {
                    for e in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for i in 0..f {
                            for j in 0..f {
                                for l in 0..f {
                                    let idx = ((ch * d + a * f + i) * h + b * f + j) * w + e * f + l;
                                    if xv.data[idx] > best {
                                        best = xv.data[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                        }
                        data.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let y = Tensor {
            shape: vec![c, od, oh, ow],
            data,
        };
        Ok(self.push(y, &[x], MaxPool { argmax }))
    }

    /// Replicates every voxel into a `factor³` block.
    pub fn nearest_upsample3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [c, d, h, w] = self.value(x).dims4("nearest_upsample3d")?;
        if factor < 2 {
            invalid!("nearest_upsample3d factor {factor} < 2");
        }
        let f = factor;
        let (ho, wo) = (h * f, w * f);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(c * d * f * ho * wo);
        for ch in 0..c {
            for od in 0..d * f {
                for oh in 0..ho {
                    let irow = ((ch * d + od / f) * h + oh / f) * w;
                    data.extend((0..wo).map(|ow| xv.data[irow + ow / f]));
                }
            }
        }
        let y = Tensor {
            shape: vec![c, d * f, ho, wo],
            data,
        };
        Ok(self.push(y, &[x], Upsample { factor }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop reference convolution.
    fn reference_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [cin, d, h, wd] = x.dims4("x").unwrap();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let o = |n: usize| (n + 2 * pad - k) / stride + 1;
        let (od, oh, ow) = (o(d), o(h), o(wd));
        let mut out = Tensor::zeros(&[cout, od, oh, ow]);
        for co in 0..cout {
            for a in 0..od {
                for bb in 0..oh {
                    for c in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for i in 0..k {
                                for j in 0..k {
                                    for l in 0..k {
                                        let z = (a * stride + i) as isize - pad as isize;
                                        let y = (bb * stride + j) as isize - pad as isize;
                                        let xx = (c * stride + l) as isize - pad as isize;
                                        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((ci * d + z as usize) * h + y as usize) * wd + xx as usize;
                                        let wi = (((co * cin + ci) * k + i) * k + j) * k + l;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((co * od + a) * oh + bb) * ow + c] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let xt = Tensor::randn(&[3, 2, 3, 4], 1.0, &mut rng);
        let x = g.constant(xt.clone());
        let mut wt = Tensor::zeros(&[3, 3, 1, 1, 1]);
        for c in 0..3 {
            wt.data_mut()[c * 3 + c] = 1.0;
        }
        let w = g.constant(wt);
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv3d(x, w, b, ConvOpts::pointwise()).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4, 4]));
        let w = g.constant(Tensor::randn(&[3, 2, 3, 3, 3], 1.0, &mut rng));
        let b = g.constant(Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.conv3d(x, w, b, ConvOpts::same(3)).unwrap();
        for (co, chunk) in g.value(y).data().chunks(64).enumerate() {
            assert!(chunk.iter().all(|&v| v == [0.5, -1.0, 2.0][co]));
        }
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let mut g = Graph::new();
            let xt = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
            let wt = Tensor::randn(&[3, 2, 3, 3, 3], 1.0, &mut rng);
            let bt = Tensor::randn(&[3], 1.0, &mut rng);
            let expected = reference_conv(&xt, &wt, &bt, stride, pad);
            let x = g.constant(xt);
            let w = g.constant(wt);
            let b = g.constant(bt);
            let opts = ConvOpts {
                stride,
                padding: pad,
                depthwise: false,
            };
            let y = g.conv3d(x, w, b, opts).unwrap();
            assert_eq!(g.shape(y), expected.shape());
            assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn strided_2cubed_halves_dims() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 4, 6, 8]));
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let opts = ConvOpts {
            stride: 2,
            padding: 0,
            depthwise: false,
        };
        let y = g.conv3d(x, w, b, opts).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3, 4]);
    }

    #[test]
    fn depthwise_matches_per_channel_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let wt = Tensor::randn(&[2, 1, 3, 3, 3], 1.0, &mut rng);
        let bt = Tensor::randn(&[2], 1.0, &mut rng);
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
        let y = g.conv3d(x, w, b, ConvOpts::depthwise_same(3)).unwrap();
        for c in 0..2 {
            let xc = Tensor::new([1, 3, 3, 3], xt.data()[c * 27..(c + 1) * 27].to_vec()).unwrap();
            let wc = Tensor::new([1, 1, 3, 3, 3], wt.data()[c * 27..(c + 1) * 27].to_vec()).unwrap();
            let bc = Tensor::new([1], vec![bt.data()[c]]).unwrap();
            let r = reference_conv(&xc, &wc, &bc, 1, 1);
            let got = &g.value(y).data()[c * 27..(c + 1) * 27];
            for (a, b) in got.iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_name_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 5, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let err = g.conv3d(x, w, b, ConvOpts::same(3)).unwrap_err().to_string();
        assert!(err.contains("C_in"), "{err}");
        let even = g.constant(Tensor::zeros(&[3, 2, 2, 2, 2]));
        assert!(g.conv3d(x, even, b, ConvOpts::same(3)).is_err());
        assert!(g.conv3d(x, even, b, ConvOpts::down2()).is_ok());
    }

    #[test]
    fn upsample_then_block_mean_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let y = g.nearest_upsample3d(x, 2).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[2, 4, 4, 4]);
        // index-mapping oracle
        for c in 0..2 {
            for d in 0..4 {
                for h in 0..4 {
                    for w in 0..4 {
                        let src = xt.data()[((c * 2 + d / 2) * 2 + h / 2) * 2 + w / 2];
                        assert_eq!(yv.data()[((c * 4 + d) * 4 + h) * 4 + w], src);
                    }
                }
            }
        }
        // block mean, pairwise-tree summation so that 8 equal terms sum exactly
        for (i, &v) in xt.data().iter().enumerate() {
            let (c, r) = (i / 8, i % 8);
            let (d, h, w) = (r / 4, (r / 2) % 2, r % 2);
            let mut block = Vec::new();
            for a in 0..2 {
                for b in 0..2 {
                    for e in 0..2 {
                        block.push(yv.data()[((c * 4 + 2 * d + a) * 4 + 2 * h + b) * 4 + 2 * w + e]);
                    }
                }
            }
            while block.len() > 1 {
                block = block.chunks(2).map(|p| p[0] + p[1]).collect();
            }
            assert_eq!(block[0] / 8.0, v);
        }
    }

    #[test]
    fn upsample_single_voxel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 7.5));
        let y = g.nearest_upsample3d(x, 2).unwrap();
        assert_eq!(g.value(y), &Tensor::full(&[1, 2, 2, 2], 7.5));
    }

    #[test]
    fn maxpool_picks_block_max() {
        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[1, 4, 4, 4]);
        t.data_mut()[0] = 3.0;
        t.data_mut()[63] = 5.0;
        let x = g.constant(t);
        let y = g.maxpool3d(x, 2).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 3.0);
        assert_eq!(v[7], 5.0);
        assert!(v[1..7].iter().all(|&a| a == 0.0));
    }
}
