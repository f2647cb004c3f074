//! Text-guided fusion: a global affine modulation from the scene vector and
//! dual cross-attention between text tokens and voxel features.

use rand::Rng;

use crate::config::Fusion;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, Mlp};
use crate::tensor::{Graph, KeySet, Tensor, Var};
use crate::voxio::TextEmbedding;

/// Text features recorded in a graph.
#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    /// `[D_g]`
    pub global: Var,
    /// `[L, D_t]`
    pub tokens: Var,
}

impl TextVars {
    pub fn bind(g: &mut Graph, text: &TextEmbedding, requires_grad: bool) -> Result<Self> {
        let global = Tensor::new(vec![text.global.len()], text.global.clone())?;
        Ok(Self {
            global: g.leaf(global, requires_grad),
            tokens: g.leaf(text.tokens.clone(), requires_grad),
        })
    }
}

/// Scene-level modulation `(1 + γ)·F + β` with γ and β predicted from the
/// global text vector.
#[derive(Clone, Debug)]
pub struct Sigm {
    pub gamma: Mlp,
    pub beta: Mlp,
}

impl Sigm {
    pub fn new(name: &str, global_dim: usize, width: usize, slope: f64) -> Self {
        Self {
            gamma: Mlp::new(&format!("{name}.gamma"), global_dim, width, width, slope),
            beta: Mlp::new(&format!("{name}.beta"), global_dim, width, width, slope),
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        self.gamma.init(init);
        self.beta.init(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, global: Var) -> Result<Var> {
        let gamma = self.gamma.forward(g, p, global)?;
        let beta = self.beta.forward(g, p, global)?;
        g.modulate(x, gamma, beta)
    }
}

/// One multi-head attention with its own Q/K/V/output projections.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    pub out: Linear,
}

impl CrossAttention {
    pub fn new(name: &str, width: usize, heads: usize) -> Self {
        let lin = |s: &str| Linear::new(format!("{name}.{s}"), width, width);
        Self {
            heads,
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            out: lin("out"),
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(init);
        }
    }

    /// Head-split `[h, N, d]` queries and keys for rows `[Nq, C]` and `[Nk, C]`.
    pub fn query_key(&self, g: &mut Graph, p: &Bound, queries: Var, keys: Var) -> Result<(Var, Var)> {
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, keys)?;
        Ok((g.split_heads(q, self.heads)?, g.split_heads(k, self.heads)?))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, queries: Var, keys: Var) -> Result<Var> {
        let (q, k) = self.query_key(g, p, queries, keys)?;
        let v = self.v.forward(g, p, keys)?;
        let v = g.split_heads(v, self.heads)?;
        let att = g.attention(q, k, v, &KeySet::All)?;
        let merged = g.merge_heads(att)?;
        self.out.forward(g, p, merged)
    }
}

/// Dual cross-attention between token embeddings and voxel features.
#[derive(Clone, Debug)]
pub struct Dcam {
    pub width: usize,
    token_proj: Linear,
    pub text_self: CrossAttention,
    pub text_to_voxel: CrossAttention,
    pub voxel_to_text: CrossAttention,
    norm: LayerNorm,
}

impl Dcam {
    pub fn new(name: &str, token_dim: usize, width: usize, heads: usize, eps: f64) -> Self {
        Self {
            width,
            token_proj: Linear::new(format!("{name}.token_proj"), token_dim, width),
            text_self: CrossAttention::new(&format!("{name}.text_self"), width, heads),
            text_to_voxel: CrossAttention::new(&format!("{name}.text_to_voxel"), width, heads),
            voxel_to_text: CrossAttention::new(&format!("{name}.voxel_to_text"), width, heads),
            norm: LayerNorm::new(format!("{name}.norm"), width, eps),
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        self.token_proj.init(init);
        self.text_self.init(init);
        self.text_to_voxel.init(init);
        self.voxel_to_text.init(init);
        self.norm.init(init);
    }

    fn check(&self, g: &Graph, x: Var, tokens: Var) -> Result<[usize; 3]> {
        let [c, d, h, w] = g.value(x).dims4("DCAM voxel input")?;
        if c != self.width {
            shape_err!("DCAM width {} vs input channels {c}", self.width);
        }
        if g.shape(tokens).len() != 2 {
            shape_err!("DCAM tokens must be [L, D_t], got {:?}", g.shape(tokens));
        }
        Ok([d, h, w])
    }

    /// Intermediate streams: projected tokens, text after self-attention,
    /// text after attending to voxels, and voxel rows.
    fn text_streams(&self, g: &mut Graph, p: &Bound, x: Var, tokens: Var) -> Result<[Var; 4]> {
        let voxels = g.voxels_to_rows(x)?;
        let t0 = self.token_proj.forward(g, p, tokens)?;
        let t1 = self.text_self.forward(g, p, t0, t0)?;
        let t2 = self.text_to_voxel.forward(g, p, t1, voxels)?;
        Ok([t0, t1, t2, voxels])
    }

    /// Head-split query/key pairs of the three attention stages, in order.
    pub fn stage_query_keys(&self, g: &mut Graph, p: &Bound, x: Var, tokens: Var) -> Result<[(Var, Var); 3]> {
        self.check(g, x, tokens)?;
        let [t0, t1, t2, voxels] = self.text_streams(g, p, x, tokens)?;
        Ok([
            self.text_self.query_key(g, p, t0, t0)?,
            self.text_to_voxel.query_key(g, p, t1, voxels)?,
            self.voxel_to_text.query_key(g, p, voxels, t2)?,
        ])
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, tokens: Var) -> Result<Var> {
        let dims = self.check(g, x, tokens)?;
        let [_, _, t2, voxels] = self.text_streams(g, p, x, tokens)?;
        let enhanced = self.voxel_to_text.forward(g, p, voxels, t2)?;
        let sum = g.add(enhanced, voxels)?;
        let normed = self.norm.forward(g, p, sum)?;
        g.rows_to_voxels(normed, dims)
    }
}

/// Which side of the U-Net a stage output belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Feb,
    Fab,
}

impl StageKind {
    pub fn fused_under(self, placement: Fusion) -> bool {
        match self {
            StageKind::Feb => placement.encoder(),
            StageKind::Fab => placement.decoder(),
        }
    }
}

/// Modulation followed by dual cross-attention at one insertion site.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub sigm: Sigm,
    pub dcam: Dcam,
}

impl FusionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(name: &str, global_dim: usize, token_dim: usize, width: usize, heads: usize, eps: f64, slope: f64) -> Self {
        Self {
            sigm: Sigm::new(&format!("{name}.sigm"), global_dim, width, slope),
            dcam: Dcam::new(&format!("{name}.dcam"), token_dim, width, heads, eps),
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        self.sigm.init(init);
        self.dcam.init(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, text: TextVars) -> Result<Var> {
        let m = self.sigm.forward(g, p, x, text.global)?;
        self.dcam.forward(g, p, m, text.tokens)
    }
}

/// Runs `block` on `x` when `kind` matches `placement`, identity otherwise.
pub fn apply_fusion(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    placement: Fusion,
    kind: StageKind,
    block: Option<&FusionBlock>,
    text: Option<TextVars>,
) -> Result<Var> {
    if !kind.fused_under(placement) {
        return Ok(x);
    }
    let Some(text) = text else {
        invalid!("fusion placement {placement:?} requires a text embedding");
    };
    let Some(block) = block else {
        invalid!("no fusion block built for a {kind:?} stage");
    };
    block.forward(g, p, x, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::attention_weights;
    use crate::testutil::{
        busy_params, channels_to_rows, dense_attention, layer_norm_rows, linear_rows, max_abs, merge_heads, rng,
        rows_to_channels, split_heads,
    };

    fn lin(p: &ParamStore, name: &str) -> (Tensor, Tensor) {
        (p.get(&format!("{name}.w")).unwrap().clone(), p.get(&format!("{name}.b")).unwrap().clone())
    }

    fn apply(p: &ParamStore, name: &str, x: &Tensor) -> Tensor {
        let (w, b) = lin(p, name);
        linear_rows(x, &w, &b)
    }

    fn mlp(p: &ParamStore, name: &str, x: &[f64], slope: f64) -> Vec<f64> {
        let x = Tensor::new(vec![1, x.len()], x.to_vec()).unwrap();
        let mut h = apply(p, &format!("{name}.fc1"), &x);
        for v in h.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        apply(p, &format!("{name}.fc2"), &h).into_data()
    }

    fn sigm_run(s: &Sigm, store: &ParamStore, x: &Tensor, global: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let gv = g.constant(global.clone());
        let y = s.forward(&mut g, &p, xv, gv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_modulation_is_identity() {
        let s = Sigm::new("s", 5, 3, 0.1);
        let mut store = busy_params(1, |i| s.init(i));
        store.zero_prefix("s.");
        let mut r = rng(2);
        let x = Tensor::randn(&[3, 2, 3, 2], 1.0, &mut r);
        let y = sigm_run(&s, &store, &x, &Tensor::randn(&[5], 1.0, &mut r));
        assert_eq!(y, x);
    }

    #[test]
    fn unit_gamma_doubles() {
        let s = Sigm::new("s", 5, 3, 0.1);
        let mut store = busy_params(1, |i| s.init(i));
        store.zero_prefix("s.");
        store.get_mut("s.gamma.fc2.b").unwrap().data_mut().fill(1.0);
        let mut r = rng(3);
        let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r);
        let y = sigm_run(&s, &store, &x, &Tensor::randn(&[5], 1.0, &mut r));
        let twice: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(y.data(), &twice[..]);
    }

    #[test]
    fn modulation_matches_broadcast_oracle() {
        let s = Sigm::new("s", 5, 3, 0.1);
        let store = busy_params(4, |i| s.init(i));
        let mut r = rng(5);
        let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r);
        let global = Tensor::randn(&[5], 1.0, &mut r);
        let y = sigm_run(&s, &store, &x, &global);
        let gamma = mlp(&store, "s.gamma", global.data(), 0.1);
        let beta = mlp(&store, "s.beta", global.data(), 0.1);
        let want: Vec<f64> = x.data().iter().enumerate().map(|(i, v)| (1.0 + gamma[i / 8]) * v + beta[i / 8]).collect();
        assert!(max_abs(y.data(), &want) < 1e-12);
    }

    fn attend(p: &ParamStore, name: &str, heads: usize, queries: &Tensor, keys: &Tensor) -> Tensor {
        let q = split_heads(&apply(p, &format!("{name}.q"), queries), heads);
        let k = split_heads(&apply(p, &format!("{name}.k"), keys), heads);
        let v = split_heads(&apply(p, &format!("{name}.v"), keys), heads);
        let att = dense_attention(&q, &k, &v, |_, _| true);
        apply(p, &format!("{name}.out"), &merge_heads(&att))
    }

    fn dcam_run(d: &Dcam, store: &ParamStore, x: &Tensor, tokens: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let tv = g.constant(tokens.clone());
        let y = d.forward(&mut g, &p, xv, tv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn dual_attention_matches_straight_line_oracle() {
        for heads in [1, 2] {
            let d = Dcam::new("d", 5, 4, heads, 1e-5);
            let store = busy_params(6, |i| d.init(i));
            let mut r = rng(7);
            let x = Tensor::randn(&[4, 2, 2, 2], 1.0, &mut r);
            let tokens = Tensor::randn(&[3, 5], 1.0, &mut r);
            let y = dcam_run(&d, &store, &x, &tokens);
            let voxels = channels_to_rows(x.data(), 4);
            let t0 = apply(&store, "d.token_proj", &tokens);
            let t1 = attend(&store, "d.text_self", heads, &t0, &t0);
            let t2 = attend(&store, "d.text_to_voxel", heads, &t1, &voxels);
            let mut sum = attend(&store, "d.voxel_to_text", heads, &voxels, &t2);
            for (a, b) in sum.data_mut().iter_mut().zip(voxels.data()) {
                *a += b;
            }
            let normed = layer_norm_rows(&sum, store.get("d.norm.gain").unwrap(), store.get("d.norm.shift").unwrap(), 1e-5);
            assert!(max_abs(y.data(), &rows_to_channels(&normed)) < 1e-12);
        }
    }

    #[test]
    fn zero_output_projection_leaves_normalized_input() {
        let d = Dcam::new("d", 5, 4, 2, 1e-5);
        let mut store = busy_params(8, |i| d.init(i));
        store.zero_prefix("d.voxel_to_text.out");
        let mut r = rng(9);
        let x = Tensor::randn(&[4, 2, 1, 3], 1.0, &mut r);
        let y = dcam_run(&d, &store, &x, &Tensor::randn(&[2, 5], 1.0, &mut r));
        let normed = layer_norm_rows(
            &channels_to_rows(x.data(), 4),
            store.get("d.norm.gain").unwrap(),
            store.get("d.norm.shift").unwrap(),
            1e-5,
        );
        assert!(max_abs(y.data(), &rows_to_channels(&normed)) < 1e-12);
    }

    #[test]
    fn attention_stages_are_distributions() {
        for tokens_len in [1, 4] {
            let d = Dcam::new("d", 5, 4, 2, 1e-5);
            let store = busy_params(10, |i| d.init(i));
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let mut r = rng(11);
            let x = g.constant(Tensor::randn(&[4, 2, 2, 2], 1.0, &mut r));
            let t = g.constant(Tensor::randn(&[tokens_len, 5], 1.0, &mut r));
            let stages = d.stage_query_keys(&mut g, &p, x, t).unwrap();
            for (stage, (q, k)) in stages.iter().enumerate() {
                let w = attention_weights(g.value(*q), g.value(*k), &KeySet::All).unwrap();
                let nk = g.shape(*k)[1];
                for row in w.data().chunks(nk) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    if stage == 2 && tokens_len == 1 {
                        assert_eq!(row, [1.0]);
                    }
                }
            }
        }
    }

    #[test]
    fn tokens_receive_gradient() {
        for seed in 0..5 {
            let block = FusionBlock::new("f", 6, 5, 4, 2, 1e-5, 0.1);
            let store = busy_params(seed, |i| block.init(i));
            let mut r = rng(50 + seed);
            let text = TextEmbedding::new(Tensor::randn(&[6], 1.0, &mut r).into_data(), Tensor::randn(&[3, 5], 1.0, &mut r))
                .unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let tv = TextVars::bind(&mut g, &text, true).unwrap();
            let x = g.constant(Tensor::randn(&[4, 2, 2, 2], 1.0, &mut r));
            let y = block.forward(&mut g, &p, x, tv).unwrap();
            let loss = g.weighted_sum(y, &Tensor::randn(&[4, 2, 2, 2], 1.0, &mut r)).unwrap();
            g.backward(loss).unwrap();
            for v in [tv.tokens, tv.global] {
                let norm: f64 = g.grad(v).unwrap().data().iter().map(|x| x * x).sum();
                assert!(norm > 1e-12, "seed {seed}: vanishing text gradient");
            }
        }
    }

    #[test]
    fn placement_selects_stages() {
        let block = FusionBlock::new("f", 6, 5, 4, 2, 1e-5, 0.1);
        let store = busy_params(1, |i| block.init(i));
        let mut r = rng(2);
        let text = TextEmbedding::new(Tensor::randn(&[6], 1.0, &mut r).into_data(), Tensor::randn(&[3, 5], 1.0, &mut r))
            .unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let tv = TextVars::bind(&mut g, &text, false).unwrap();
        let x = g.constant(Tensor::randn(&[4, 2, 2, 2], 1.0, &mut r));
        let b = Some(&block);
        for (placement, kind, fused) in [
            (Fusion::None, StageKind::Feb, false),
            (Fusion::None, StageKind::Fab, false),
            (Fusion::Encoder, StageKind::Fab, false),
            (Fusion::Decoder, StageKind::Feb, false),
            (Fusion::Encoder, StageKind::Feb, true),
            (Fusion::Both, StageKind::Fab, true),
        ] {
            let y = apply_fusion(&mut g, &p, x, placement, kind, b, Some(tv)).unwrap();
            assert_eq!(y != x, fused, "{placement:?} {kind:?}");
        }
        assert!(apply_fusion(&mut g, &p, x, Fusion::Both, StageKind::Feb, b, None).is_err());
        assert_eq!(apply_fusion(&mut g, &p, x, Fusion::None, StageKind::Feb, b, None).unwrap(), x);
    }
}
