use super::{Backward, Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

struct Add;
impl Backward for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct Sub;
impl Backward for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut neg = grad.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = -*v);
        vec![Some(grad.clone()), Some(neg)]
    }
}

struct Mul;
impl Backward for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = zip_map(grad, b, |g, y| g * y);
        let gb = zip_map(grad, a, |g, x| g * x);
        vec![Some(ga), Some(gb)]
    }
}

struct Scale(f64);
impl Backward for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = self.0;
        vec![Some(map(grad, |g| g * s))]
    }
}

struct LeakyRelu {
    slope: f64,
    faulty: bool,
}
impl Backward for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let slope = self.slope;
        // The faulty variant drops the negative-branch slope; used only as a
        // negative control for gradient checking.
        let neg = if self.faulty { 1.0 } else { slope };
        vec![Some(zip_map(grad, inputs[0], |g, x| if x >= 0.0 { g } else { g * neg }))]
    }
}

struct Sum;
impl Backward for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

struct WeightedSum(Tensor);
impl Backward for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        vec![Some(map(&self.0, |w| w * g))]
    }
}

struct Modulate;
impl Backward for Modulate {
    fn name(&self) -> &'static str {
        "modulate"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = gamma.numel();
        let per = x.numel() / c;
        let mut gx = Tensor::zeros(x.shape());
        let mut gg = Tensor::zeros(gamma.shape());
        let mut gb = Tensor::zeros(gamma.shape());
        for ch in 0..c {
            let s = 1.0 + gamma.data()[ch];
            let range = ch * per..(ch + 1) * per;
            let (mut acc_g, mut acc_b) = (0.0, 0.0);
            for ((gxv, &gv), &xv) in gx.data_mut()[range.clone()]
                .iter_mut()
                .zip(&grad.data()[range.clone()])
                .zip(&x.data()[range])
            {
                *gxv = gv * s;
                acc_g += gv * xv;
                acc_b += gv;
            }
            gg.data_mut()[ch] = acc_g;
            gb.data_mut()[ch] = acc_b;
        }
        vec![Some(gx), Some(gg), Some(gb)]
    }
}

pub(crate) fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

impl Graph {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            shape_err!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, &[a, b], Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, &[a, b], Mul))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x * s);
        self.push(out, &[a], Scale(s))
    }

    /// Elementwise `x` for `x ≥ 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.leaky_relu_impl(a, slope, false)
    }

    /// Leaky ReLU with a deliberately wrong backward rule.
    #[doc(hidden)]
    pub fn leaky_relu_faulty(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.leaky_relu_impl(a, slope, true)
    }

    fn leaky_relu_impl(&mut self, a: Var, slope: f64, faulty: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            invalid!("leaky_relu slope {slope} outside [0, 1)");
        }
        let out = map(self.value(a), |x| if x >= 0.0 { x } else { slope * x });
        Ok(self.push(out, &[a], LeakyRelu { slope, faulty }))
    }

    /// Sum of all entries; ascending index order.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Sum)
    }

    /// `Σ_i a_i · w_i` for a constant `w` of identical shape.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor) -> Result<Var> {
        if self.shape(a) != w.shape() {
            shape_err!("weighted_sum: {:?} vs {:?}", self.shape(a), w.shape());
        }
        let s = self.value(a).data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), &[a], WeightedSum(w.clone())))
    }

    /// Per-channel affine modulation `(1 + γ_c)·x + β_c` for `x` of shape
    /// `[C, ...]` and `γ, β` of shape `[C]`.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            shape_err!(
                "modulate: channel axis {c} vs gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            );
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let per = xv.numel() / c;
        let mut out = xv.clone();
        for ch in 0..c {
            let (s, b) = (1.0 + gv.data()[ch], bv.data()[ch]);
            for v in &mut out.data_mut()[ch * per..(ch + 1) * per] {
                *v = s * *v + b;
            }
        }
        Ok(self.push(out, &[x, gamma, beta], Modulate))
    }
}
