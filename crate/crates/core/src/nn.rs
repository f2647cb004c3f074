//! Named parameters and the small layers the networks are assembled from.
//!
//! A layer value only describes shapes and the parameter names it owns; the
//! weights live in a [`ParamStore`] and are bound into a [`Graph`] for each
//! forward pass.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvOpts, Graph, Tensor, Var};

/// Ordered map of parameter name → value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    pub fn bind_with(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Gradients of every bound parameter, zero where none reached it.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|(k, v)| {
                let grad = bound
                    .vars
                    .get(k)
                    .and_then(|&var| g.grad(var).cloned())
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), grad)
            })
            .collect()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in &mut self.tensors {
            if k.starts_with(prefix) {
                v.data_mut().fill(0.0);
            }
        }
    }
}

/// Parameters recorded in a particular graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Unknown(name.to_string()))
    }
}

/// Deterministic parameter initializer.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Kaiming-normal weights (fan-in), zero bias.
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = (cin * k * k * k) as f64;
        let w = Tensor::randn(&[cout, cin, k, k, k], (2.0 / fan_in).sqrt(), self.rng);
        self.store.insert(format!("{name}.w"), w);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    /// LeCun-normal weights, zero bias.
    pub fn linear(&mut self, name: &str, dout: usize, din: usize) {
        let w = Tensor::randn(&[dout, din], (1.0 / din as f64).sqrt(), self.rng);
        self.store.insert(format!("{name}.w"), w);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
    }

    pub fn norm(&mut self, name: &str, width: usize) {
        self.store.insert(format!("{name}.gain"), Tensor::ones(&[width]));
        self.store.insert(format!("{name}.shift"), Tensor::zeros(&[width]));
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.insert(name, t);
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub opts: ConvOpts,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, opts: ConvOpts) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            opts,
        }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1, ConvOpts::pointwise())
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        let fin = if self.opts.depthwise { 1 } else { self.cin };
        init.conv(&self.name, self.cout, fin, self.k);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        g.conv3d(x, w, b, self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        init.linear(&self.name, self.dout, self.din);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub width: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, width: usize, eps: f64) -> Self {
        Self {
            name: name.into(),
            width,
            eps,
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        init.norm(&self.name, self.width);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let gain = p.get(&format!("{}.gain", self.name))?;
        let shift = p.get(&format!("{}.shift", self.name))?;
        g.layer_norm(x, gain, shift, self.eps)
    }
}

/// `linear → leaky_relu → linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub slope: f64,
}

impl Mlp {
    pub fn new(name: &str, din: usize, hidden: usize, dout: usize, slope: f64) -> Self {
        Self {
            fc1: Linear::new(format!("{name}.fc1"), din, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, dout),
            slope,
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        self.fc1.init(init);
        self.fc2.init(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.leaky_relu(h, self.slope)?;
        self.fc2.forward(g, p, h)
    }
}

/// Two rounds of `conv3d(k=3, pad=1) → instance_norm3d → leaky_relu`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub eps: f64,
    pub slope: f64,
}

impl ConvBlock {
    pub fn new(name: &str, cin: usize, cout: usize, eps: f64, slope: f64) -> Self {
        Self {
            conv1: Conv::new(format!("{name}.conv1"), cin, cout, 3, ConvOpts::same(3)),
            conv2: Conv::new(format!("{name}.conv2"), cout, cout, 3, ConvOpts::same(3)),
            eps,
            slope,
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        self.conv1.init(init);
        self.conv2.init(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in [&self.conv1, &self.conv2] {
            h = conv.forward(g, p, h)?;
            h = g.instance_norm3d(h, self.eps)?;
            h = g.leaky_relu(h, self.slope)?;
        }
        Ok(h)
    }
}
