//! Attention-based feature aggregation: global self-attention over the
//! upsampled stream plus neighborhood cross-attention against skip features.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::{Bound, Conv, Init, LayerNorm, Linear, Mlp};
use crate::tensor::{ConvOpts, Graph, KeySet, Var};

/// Start and length of a clamped window along one axis.
fn axis_window(p: usize, n: usize, w: usize) -> (usize, usize) {
    if w >= n {
        return (0, n);
    }
    let r = w / 2;
    (p.saturating_sub(r).min(n - w), w)
}

/// Key indices visible to every query voxel of a `dims` volume under an
/// edge-`window` neighborhood. Windows are shifted inward at the borders so
/// that they keep `window³` keys whenever the volume is large enough, and are
/// truncated to the volume otherwise.
pub fn neighborhood_keys(dims: [usize; 3], window: usize) -> Vec<Vec<u32>> {
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let (z0, zl) = axis_window(z, d, window);
        for y in 0..h {
            let (y0, yl) = axis_window(y, h, window);
            for x in 0..w {
                let (x0, xl) = axis_window(x, w, window);
                let mut keys = Vec::with_capacity(zl * yl * xl);
                for a in z0..z0 + zl {
                    for b in y0..y0 + yl {
                        for c in x0..x0 + xl {
                            keys.push(((a * h + b) * w + c) as u32);
                        }
                    }
                }
                out.push(keys);
            }
        }
    }
    out
}

fn spatial(g: &Graph, x: Var) -> Result<[usize; 3]> {
    let [_, d, h, w] = g.value(x).dims4("attention block input")?;
    Ok([d, h, w])
}

/// Multi-head attention over all voxels of the upsampled stream, with
/// `1³` then depthwise `3³` convolutions producing Q, K and V.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub width: usize,
    pub heads: usize,
    qkv_point: [Conv; 3],
    qkv_depth: [Conv; 3],
    out: Linear,
}

impl SelfAttention {
    pub fn new(name: &str, width: usize, heads: usize) -> Self {
        let point = |s: &str| Conv::pointwise(format!("{name}.{s}_pw"), width, width);
        let depth = |s: &str| Conv::new(format!("{name}.{s}_dw"), width, width, 3, ConvOpts::depthwise_same(3));
        Self {
            width,
            heads,
            qkv_point: [point("q"), point("k"), point("v")],
            qkv_depth: [depth("q"), depth("k"), depth("v")],
            out: Linear::new(format!("{name}.out"), width, width),
        }
    }

    pub fn out_proj(&self) -> &str {
        &self.out.name
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        for c in self.qkv_point.iter().chain(&self.qkv_depth) {
            c.init(init);
        }
        self.out.init(init);
    }

    /// Projected `[h, N, d]` Q, K and V.
    pub fn project(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<[Var; 3]> {
        let mut qkv = Vec::with_capacity(3);
        for (pw, dw) in self.qkv_point.iter().zip(&self.qkv_depth) {
            let t = pw.forward(g, p, x)?;
            let t = dw.forward(g, p, t)?;
            let rows = g.voxels_to_rows(t)?;
            qkv.push(g.split_heads(rows, self.heads)?);
        }
        Ok([qkv[0], qkv[1], qkv[2]])
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f_up: Var) -> Result<Var> {
        let dims = spatial(g, f_up)?;
        let [q, k, v] = self.project(g, p, f_up)?;
        let att = g.attention(q, k, v, &KeySet::All)?;
        let merged = g.merge_heads(att)?;
        let proj = self.out.forward(g, p, merged)?;
        let vox = g.rows_to_voxels(proj, dims)?;
        g.add(f_up, vox)
    }
}

/// Windowed cross-attention between the upsampled and skip streams.
#[derive(Clone, Debug)]
pub struct NeighborhoodCrossAttention {
    pub width: usize,
    pub heads: usize,
    pub window: usize,
    /// Queries from the skip stream and keys/values from the upsampled one.
    pub query_from_skip: bool,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl NeighborhoodCrossAttention {
    pub fn new(name: &str, width: usize, heads: usize, window: usize, query_from_skip: bool) -> Self {
        let lin = |s: &str| Linear::new(format!("{name}.{s}"), width, width);
        Self {
            width,
            heads,
            window,
            query_from_skip,
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

    /// Projected `[h, N, d]` Q, K and V with the query/key roles resolved.
    pub fn project(&self, g: &mut Graph, p: &Bound, f_skip: Var, f_up: Var) -> Result<[Var; 3]> {
        if g.shape(f_skip) != g.shape(f_up) {
            shape_err!("NCA: skip {:?} vs upsampled {:?}", g.shape(f_skip), g.shape(f_up));
        }
        let (q_src, kv_src) = if self.query_from_skip { (f_skip, f_up) } else { (f_up, f_skip) };
        let q_rows = g.voxels_to_rows(q_src)?;
        let kv_rows = g.voxels_to_rows(kv_src)?;
        let q = self.q.forward(g, p, q_rows)?;
        let k = self.k.forward(g, p, kv_rows)?;
        let v = self.v.forward(g, p, kv_rows)?;
        Ok([g.split_heads(q, self.heads)?, g.split_heads(k, self.heads)?, g.split_heads(v, self.heads)?])
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f_skip: Var, f_up: Var) -> Result<Var> {
        let dims = spatial(g, f_up)?;
        let [q, k, v] = self.project(g, p, f_skip, f_up)?;
        let keys = KeySet::Lists(neighborhood_keys(dims, self.window));
        let att = g.attention(q, k, v, &keys)?;
        let merged = g.merge_heads(att)?;
        let proj = self.out.forward(g, p, merged)?;
        let vox = g.rows_to_voxels(proj, dims)?;
        let residual = if self.query_from_skip { f_skip } else { f_up };
        g.add(residual, vox)
    }
}

/// Attention-based feature aggregation block.
#[derive(Clone, Debug)]
pub struct PnaFab {
    pub width: usize,
    /// Layer norm and pointwise reduction of the coarse input to the skip width.
    in_norm: LayerNorm,
    reduce: Linear,
    pub sa: SelfAttention,
    pub nca: NeighborhoodCrossAttention,
    norm: LayerNorm,
    pub ffn: Mlp,
}

impl PnaFab {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        coarse_width: usize,
        width: usize,
        heads: usize,
        window: usize,
        query_from_skip: bool,
        ffn_mult: usize,
        eps: f64,
        slope: f64,
    ) -> Self {
        Self {
            width,
            in_norm: LayerNorm::new(format!("{name}.in_norm"), coarse_width, eps),
            reduce: Linear::new(format!("{name}.reduce"), coarse_width, width),
            sa: SelfAttention::new(&format!("{name}.sa"), width, heads),
            nca: NeighborhoodCrossAttention::new(&format!("{name}.nca"), width, heads, window, query_from_skip),
            norm: LayerNorm::new(format!("{name}.norm"), width, eps),
            ffn: Mlp::new(&format!("{name}.ffn"), width, ffn_mult * width, width, slope),
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        self.in_norm.init(init);
        self.reduce.init(init);
        self.sa.init(init);
        self.nca.init(init);
        self.norm.init(init);
        self.ffn.init(init);
    }

    /// Upsampled stream at the skip width. The per-voxel norm and reduction
    /// commute with nearest upsampling, so they run at the coarse resolution.
    /// Without the norm the residual stream grows stage by stage and the
    /// attention logits saturate.
    pub fn upsampled(&self, g: &mut Graph, p: &Bound, f_in: Var) -> Result<Var> {
        let dims = spatial(g, f_in)?;
        let rows = g.voxels_to_rows(f_in)?;
        let normed = self.in_norm.forward(g, p, rows)?;
        let reduced = self.reduce.forward(g, p, normed)?;
        let reduced = g.rows_to_voxels(reduced, dims)?;
        g.nearest_upsample3d(reduced, 2)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f_in: Var, f_skip: Var) -> Result<Var> {
        let [_, d, h, w] = g.value(f_in).dims4("PNA FAB coarse input")?;
        let fine = spatial(g, f_skip)?;
        if fine != [2 * d, 2 * h, 2 * w] {
            shape_err!("PNA FAB: skip dims {fine:?} are not twice the coarse dims {:?}", [d, h, w]);
        }
        let f_up = self.upsampled(g, p, f_in)?;
        let f_self = self.sa.forward(g, p, f_up)?;
        let f_cross = self.nca.forward(g, p, f_skip, f_up)?;
        let fused = g.add(f_self, f_cross)?;
        let rows = g.voxels_to_rows(fused)?;
        let normed = self.norm.forward(g, p, rows)?;
        let refined = self.ffn.forward(g, p, normed)?;
        let out = g.add(refined, rows)?;
        g.rows_to_voxels(out, fine)
    }
}
