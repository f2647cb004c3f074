//! The refinement U-Net: label embedding, encoder, bottleneck, decoder and
//! per-scale prediction heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderVariant, Downsample, FebBlocks, RefineConfig, BOTTLENECK_SCALE, STAGES};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Bound, Conv, ConvBlock, Init, ParamStore};
use crate::pnam::PnaFab;
use crate::tensor::{ConvOpts, Graph, Tensor, Var};
use crate::vlgm::{apply_fusion, FusionBlock, StageKind, TextVars};
use crate::voxio::{SemGrid, TextEmbedding};

/// Per-voxel lookup into a class table followed by a pointwise projection.
#[derive(Clone, Debug)]
pub struct LabelEmbed {
    pub table: String,
    pub rows: usize,
    pub dim: usize,
    pub conv_in: Conv,
}

impl LabelEmbed {
    pub fn new(rows: usize, dim: usize, width: usize) -> Self {
        Self {
            table: "embed.table".into(),
            rows,
            dim,
            conv_in: Conv::pointwise("embed.conv_in", dim, width),
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        init.normal(&self.table, &[self.rows, self.dim], 1.0);
        self.conv_in.init(init);
    }

    /// The raw `[embed_dim, X, Y, Z]` lookup.
    pub fn lookup(&self, g: &mut Graph, p: &Bound, grid: &SemGrid) -> Result<Var> {
        if grid.max_label() as usize >= self.rows {
            invalid!("label {} outside the {}-row embedding table", grid.max_label(), self.rows);
        }
        let ids: Vec<usize> = grid.labels().iter().map(|&l| l as usize).collect();
        let table = p.get(&self.table)?;
        let rows = g.embedding(table, &ids)?;
        g.rows_to_voxels(rows, grid.dims())
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, grid: &SemGrid) -> Result<Var> {
        let emb = self.lookup(g, p, grid)?;
        self.conv_in.forward(g, p, emb)
    }
}

#[derive(Clone, Debug)]
pub enum Down {
    /// Stride-2 `2³` convolution to twice the width.
    Conv(Conv),
    /// `2³` max pooling, then a pointwise convolution to twice the width.
    Pool(Conv),
}

/// Feature encoding block.
#[derive(Clone, Debug)]
pub struct Feb {
    pub block: ConvBlock,
    pub down: Down,
    pub post: Option<ConvBlock>,
}

impl Feb {
    pub fn new(name: &str, width: usize, cfg: &RefineConfig) -> Self {
        let (eps, slope) = (cfg.norm_eps, cfg.leaky_slope);
        let down = match cfg.feb_downsample {
            Downsample::ConvDown => Down::Conv(Conv::new(format!("{name}.down"), width, 2 * width, 2, ConvOpts::down2())),
            Downsample::Maxpool => Down::Pool(Conv::pointwise(format!("{name}.down"), width, 2 * width)),
        };
        let post = (cfg.feb_blocks == FebBlocks::TwoBlocks)
            .then(|| ConvBlock::new(&format!("{name}.post"), 2 * width, 2 * width, eps, slope));
        Self {
            block: ConvBlock::new(&format!("{name}.block"), width, width, eps, slope),
            down,
            post,
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        self.block.init(init);
        match &self.down {
            Down::Conv(c) | Down::Pool(c) => c.init(init),
        }
        if let Some(b) = &self.post {
            b.init(init);
        }
    }

    /// Returns `(skip, downsampled)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let [_, d, h, w] = g.value(x).dims4("FEB input")?;
        for (axis, n) in ["D", "H", "W"].into_iter().zip([d, h, w]) {
            if n % 2 != 0 {
                shape_err!("FEB input axis {axis} has odd extent {n}");
            }
        }
        let refined = self.block.forward(g, p, x)?;
        let skip = g.add(refined, x)?;
        let mut out = match &self.down {
            Down::Conv(c) => c.forward(g, p, skip)?,
            Down::Pool(c) => {
                let pooled = g.maxpool3d(skip, 2)?;
                c.forward(g, p, pooled)?
            }
        };
        if let Some(b) = &self.post {
            out = b.forward(g, p, out)?;
        }
        Ok((skip, out))
    }
}

/// Convolutional feature aggregation block.
#[derive(Clone, Debug)]
pub struct ConvFab {
    pub block: ConvBlock,
    pub project: Conv,
}

impl ConvFab {
    pub fn new(name: &str, skip_width: usize, up_width: usize, out_width: usize, eps: f64, slope: f64) -> Self {
        Self {
            block: ConvBlock::new(&format!("{name}.block"), skip_width + up_width, out_width, eps, slope),
            project: Conv::pointwise(format!("{name}.project"), up_width, out_width),
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        self.block.init(init);
        self.project.init(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f_in: Var, f_skip: Var) -> Result<Var> {
        let [_, d, h, w] = g.value(f_in).dims4("FAB coarse input")?;
        let [_, sd, sh, sw] = g.value(f_skip).dims4("FAB skip input")?;
        if [sd, sh, sw] != [2 * d, 2 * h, 2 * w] {
            shape_err!("FAB: skip dims {:?} are not twice the coarse dims {:?}", [sd, sh, sw], [d, h, w]);
        }
        let up = g.nearest_upsample3d(f_in, 2)?;
        let cat = g.concat_channels(f_skip, up)?;
        let fused = self.block.forward(g, p, cat)?;
        let residual = self.project.forward(g, p, up)?;
        g.add(fused, residual)
    }
}

#[derive(Clone, Debug)]
pub enum Fab {
    Conv(ConvFab),
    Pna(Box<PnaFab>),
}

impl Fab {
    pub fn kind(&self) -> &'static str {
        match self {
            Fab::Conv(_) => "conv",
            Fab::Pna(_) => "pnam",
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        match self {
            Fab::Conv(f) => f.init(init),
            Fab::Pna(f) => f.init(init),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f_in: Var, f_skip: Var) -> Result<Var> {
        match self {
            Fab::Conv(f) => f.forward(g, p, f_in, f_skip),
            Fab::Pna(f) => f.forward(g, p, f_in, f_skip),
        }
    }
}

/// Logits per supervised scale, `[C, X/s, Y/s, Z/s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleLogits {
    pub scales: BTreeMap<usize, Tensor>,
}

impl MultiScaleLogits {
    pub fn get(&self, scale: usize) -> Option<&Tensor> {
        self.scales.get(&scale)
    }
}

/// One line of the structural description of a built network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageInfo {
    pub name: String,
    pub kind: &'static str,
    pub scale: usize,
    pub width: usize,
}

/// The assembled network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct RefineNet {
    pub cfg: RefineConfig,
    pub embed: LabelEmbed,
    /// Encoder stages at scales 1, 2, 4, 8.
    pub febs: Vec<Feb>,
    pub bottleneck: ConvBlock,
    /// Decoder stages at scales 8, 4, 2, 1.
    pub fabs: Vec<Fab>,
    pub heads: BTreeMap<usize, Conv>,
    /// Fusion after each encoder stage, keyed by the output scale.
    pub enc_fusion: BTreeMap<usize, FusionBlock>,
    /// Fusion after each decoder stage, keyed by the output scale.
    pub dec_fusion: BTreeMap<usize, FusionBlock>,
}

impl RefineNet {
    pub fn new(cfg: &RefineConfig) -> Result<Self> {
        cfg.validate()?;
        let (eps, slope) = (cfg.norm_eps, cfg.leaky_slope);
        let g = cfg.base_width;
        let embed = LabelEmbed::new(cfg.num_classes, cfg.embed_dim, g);
        let scales: Vec<usize> = (0..STAGES).map(|k| 1 << k).collect();
        let febs = scales.iter().map(|&s| Feb::new(&format!("enc.s{s}"), cfg.width_at(s), cfg)).collect();
        let bw = cfg.width_at(BOTTLENECK_SCALE);
        let bottleneck = ConvBlock::new("bottleneck", bw, bw, eps, slope);
        let fabs = scales
            .iter()
            .rev()
            .map(|&s| {
                let (w, coarse) = (cfg.width_at(s), cfg.width_at(2 * s));
                if cfg.decoder == DecoderVariant::Pnam && s > 1 {
                    Fab::Pna(Box::new(PnaFab::new(
                        &format!("pnam.s{s}"),
                        coarse,
                        w,
                        cfg.heads,
                        cfg.window,
                        cfg.nca_query_from_skip,
                        cfg.ffn_mult,
                        eps,
                        slope,
                    )))
                } else {
                    Fab::Conv(ConvFab::new(&format!("dec.s{s}"), w, coarse, w, eps, slope))
                }
            })
            .collect();
        let heads = cfg
            .scales
            .iter()
            .map(|&s| (s, Conv::pointwise(format!("head.s{s}"), cfg.width_at(s), cfg.num_classes)))
            .collect();
        let fusion = |name: &str, s: usize| {
            FusionBlock::new(name, cfg.text_global_dim, cfg.text_token_dim, cfg.width_at(s), cfg.dcam_heads, eps, slope)
        };
        let enc_fusion = if cfg.fusion.encoder() {
            scales.iter().map(|&s| (2 * s, fusion(&format!("vlgm.enc.s{}", 2 * s), 2 * s))).collect()
        } else {
            BTreeMap::new()
        };
        let dec_fusion = if cfg.fusion.decoder() {
            scales.iter().map(|&s| (s, fusion(&format!("vlgm.dec.s{s}"), s))).collect()
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            febs,
            bottleneck,
            fabs,
            heads,
            enc_fusion,
            dec_fusion,
        })
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) {
        self.embed.init(init);
        for f in &self.febs {
            f.init(init);
        }
        self.bottleneck.init(init);
        for f in &self.fabs {
            f.init(init);
        }
        for h in self.heads.values() {
            h.init(init);
        }
        for f in self.enc_fusion.values().chain(self.dec_fusion.values()) {
            f.init(init);
        }
    }

    /// Fresh parameters drawn from the config seed.
    pub fn init_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.init(&mut Init {
            store: &mut store,
            rng: &mut rng,
        });
        store
    }

    pub fn fusion_site_count(&self) -> usize {
        self.enc_fusion.len() + self.dec_fusion.len()
    }

    /// Encoder, bottleneck and decoder stages in execution order.
    pub fn describe(&self) -> Vec<StageInfo> {
        let mut out = Vec::new();
        for (k, _) in self.febs.iter().enumerate() {
            let s = 1 << k;
            out.push(StageInfo {
                name: format!("enc.s{s}"),
                kind: "feb",
                scale: s,
                width: self.cfg.width_at(s),
            });
        }
        out.push(StageInfo {
            name: "bottleneck".into(),
            kind: "conv",
            scale: BOTTLENECK_SCALE,
            width: self.cfg.width_at(BOTTLENECK_SCALE),
        });
        for (k, fab) in self.fabs.iter().enumerate() {
            let s = 1 << (STAGES - 1 - k);
            out.push(StageInfo {
                name: format!("fab.s{s}"),
                kind: fab.kind(),
                scale: s,
                width: self.cfg.width_at(s),
            });
        }
        out
    }

    /// Logits per configured scale. Grid extents must be multiples of 16.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        grid: &SemGrid,
        text: Option<TextVars>,
    ) -> Result<BTreeMap<usize, Var>> {
        for (axis, d) in ["X", "Y", "Z"].into_iter().zip(grid.dims()) {
            if d % BOTTLENECK_SCALE != 0 {
                shape_err!("grid axis {axis} extent {d} is not divisible by {BOTTLENECK_SCALE}");
            }
        }
        let placement = self.cfg.fusion;
        if placement != crate::config::Fusion::None && text.is_none() {
            invalid!("fusion placement {placement:?} requires a text embedding");
        }
        let mut x = self.embed.forward(g, p, grid)?;
        let mut skips = Vec::with_capacity(STAGES);
        for (k, feb) in self.febs.iter().enumerate() {
            let (skip, down) = feb.forward(g, p, x)?;
            skips.push(skip);
            let s = 2 << k;
            x = apply_fusion(g, p, down, placement, StageKind::Feb, self.enc_fusion.get(&s), text)?;
        }
        let refined = self.bottleneck.forward(g, p, x)?;
        x = g.add(x, refined)?;
        let mut logits = BTreeMap::new();
        for (k, fab) in self.fabs.iter().enumerate() {
            let s = 1 << (STAGES - 1 - k);
            let skip = skips[STAGES - 1 - k];
            x = fab.forward(g, p, x, skip)?;
            x = apply_fusion(g, p, x, placement, StageKind::Fab, self.dec_fusion.get(&s), text)?;
            if let Some(head) = self.heads.get(&s) {
                logits.insert(s, head.forward(g, p, x)?);
            }
        }
        Ok(logits)
    }
}

/// Inference without gradient bookkeeping.
pub fn refine_forward(
    net: &RefineNet,
    params: &ParamStore,
    grid: &SemGrid,
    text: Option<&TextEmbedding>,
) -> Result<MultiScaleLogits> {
    let mut g = Graph::new();
    let p = params.bind_with(&mut g, false);
    let text = text.map(|t| TextVars::bind(&mut g, t, false)).transpose()?;
    let vars = net.forward(&mut g, &p, grid, text)?;
    Ok(MultiScaleLogits {
        scales: vars.into_iter().map(|(s, v)| (s, g.value(v).clone())).collect(),
    })
}

/// Refines a grid of any extent: pads to a multiple of 16, runs the network
/// and returns the scale-1 prediction cropped back, with the input's validity.
pub fn refine_grid(net: &RefineNet, params: &ParamStore, grid: &SemGrid, text: Option<&TextEmbedding>) -> Result<SemGrid> {
    let padded = grid.pad_to_multiple(BOTTLENECK_SCALE);
    let logits = refine_forward(net, params, &padded, text)?;
    let full = argmax_labels(&logits, &padded)?;
    crop_grid(&full, grid.dims())?.with_validity_of(grid)
}

/// Leading `dims` voxels of `grid`.
pub fn crop_grid(grid: &SemGrid, dims: [usize; 3]) -> Result<SemGrid> {
    if grid.dims() == dims {
        return Ok(grid.clone());
    }
    let [sx, sy, sz] = grid.dims();
    let [nx, ny, nz] = dims;
    if nx > sx || ny > sy || nz > sz {
        shape_err!("crop {dims:?} exceeds grid {:?}", grid.dims());
    }
    let mut labels = Vec::with_capacity(nx * ny * nz);
    let mut valid = Vec::with_capacity(nx * ny * nz);
    for x in 0..nx {
        for y in 0..ny {
            let i = (x * sy + y) * sz;
            labels.extend_from_slice(&grid.labels()[i..i + nz]);
            valid.extend_from_slice(&grid.valid()[i..i + nz]);
        }
    }
    SemGrid::new(dims, grid.num_classes(), labels, valid)
}

/// Per-voxel argmax of a `[C, X, Y, Z]` tensor; ties go to the smaller class.
pub fn argmax_channels(logits: &Tensor) -> Result<Vec<u16>> {
    let [c, d, h, w] = logits.dims4("argmax logits")?;
    let n = d * h * w;
    let data = logits.data();
    Ok((0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if data[k * n + i] > data[best * n + i] {
                    best = k;
                }
            }
            best as u16
        })
        .collect())
}

/// Scale-1 prediction with the validity mask of `input`.
pub fn argmax_labels(logits: &MultiScaleLogits, input: &SemGrid) -> Result<SemGrid> {
    let Some(t) = logits.get(1) else {
        invalid!("scale-1 logits missing");
    };
    let [c, d, h, w] = t.dims4("scale-1 logits")?;
    if [d, h, w] != input.dims() {
        shape_err!("logits dims {:?} vs grid dims {:?}", [d, h, w], input.dims());
    }
    let labels = argmax_channels(t)?;
    SemGrid::new(input.dims(), (c - 1) as u16, labels, input.valid().to_vec())
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::config::Fusion;
    use crate::testutil::{busy_params, rng};

    fn cfg(classes: usize, width: usize) -> RefineConfig {
        RefineConfig {
            num_classes: classes,
            base_width: width,
            embed_dim: width,
            dcam_heads: 2,
            ..Default::default()
        }
    }

    fn random_grid(seed: u64, dims: [usize; 3], classes: usize) -> SemGrid {
        let mut r = rng(seed);
        let n: usize = dims.iter().product();
        let labels = (0..n).map(|_| r.random_range(0..classes as u16)).collect();
        SemGrid::new(dims, (classes - 1) as u16, labels, vec![true; n]).unwrap()
    }

    fn text(seed: u64, c: &RefineConfig) -> TextEmbedding {
        let mut r = rng(seed);
        TextEmbedding::new(
            Tensor::randn(&[c.text_global_dim], 1.0, &mut r).into_data(),
            Tensor::randn(&[3, c.text_token_dim], 1.0, &mut r),
        )
        .unwrap()
    }

    #[test]
    fn logits_follow_the_scale_ladder() {
        let base = cfg(3, 4);
        let variants = [
            base.clone(),
            RefineConfig {
                feb_downsample: Downsample::Maxpool,
                feb_blocks: FebBlocks::TwoBlocks,
                ..base.clone()
            },
            RefineConfig {
                decoder: DecoderVariant::Pnam,
                ..base.clone()
            },
        ];
        let grid = random_grid(1, [16, 16, 16], 3);
        for c in variants {
            let net = RefineNet::new(&c).unwrap();
            let out = refine_forward(&net, &net.init_params(), &grid, None).unwrap();
            assert_eq!(out.scales.keys().copied().collect::<Vec<_>>(), [1, 2, 4, 8]);
            for (s, t) in &out.scales {
                assert_eq!(t.shape(), &[3, 16 / s, 16 / s, 16 / s]);
                assert!(t.all_finite());
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = cfg(3, 2);
        let net = RefineNet::new(&c).unwrap();
        let p = net.init_params();
        assert!(refine_forward(&net, &p, &random_grid(2, [16, 16, 8], 3), None).is_err());
        let big = SemGrid::filled([16, 16, 16], 4, 4).unwrap();
        assert!(refine_forward(&net, &p, &big, None).is_err());
        let fused = RefineConfig { fusion: Fusion::Both, ..c };
        let net = RefineNet::new(&fused).unwrap();
        assert!(refine_forward(&net, &net.init_params(), &random_grid(2, [16, 16, 16], 3), None).is_err());
    }

    #[test]
    fn embedding_with_identity_weights_is_one_hot() {
        let embed = LabelEmbed::new(4, 4, 4);
        let mut store = ParamStore::new();
        let eye = |n: usize| {
            let mut t = Tensor::zeros(&[n, n]);
            for i in 0..n {
                t.data_mut()[i * n + i] = 1.0;
            }
            t
        };
        store.insert("embed.table", eye(4));
        store.insert("embed.conv_in.w", eye(4).reshape(&[4, 4, 1, 1, 1]).unwrap());
        store.insert("embed.conv_in.b", Tensor::zeros(&[4]));
        let grid = random_grid(3, [2, 3, 2], 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let y = embed.forward(&mut g, &p, &grid).unwrap();
        let n = grid.len();
        for (i, &l) in grid.labels().iter().enumerate() {
            for k in 0..4 {
                assert_eq!(g.value(y).data()[k * n + i], if k == l as usize { 1.0 } else { 0.0 });
            }
        }
        let raw = embed.lookup(&mut g, &p, &grid).unwrap();
        let s = g.sum(raw);
        g.backward(s).unwrap();
        let grad = g.grad(p.get("embed.table").unwrap()).unwrap();
        for row in 0..4 {
            let count = grid.labels().iter().filter(|&&l| l as usize == row).count() as f64;
            assert!(grad.data()[row * 4..row * 4 + 4].iter().all(|&v| v == count));
        }
    }

    #[test]
    fn class_permutation_with_table_rows_keeps_features() {
        let embed = LabelEmbed::new(4, 3, 5);
        let store = busy_params(4, |i| embed.init(i));
        let perm = [3u16, 0, 2, 1];
        let mut permuted = store.clone();
        let table = store.get("embed.table").unwrap();
        for k in 0..4 {
            let dst = perm[k] as usize * 3;
            permuted.get_mut("embed.table").unwrap().data_mut()[dst..dst + 3].copy_from_slice(&table.data()[k * 3..k * 3 + 3]);
        }
        let grid = random_grid(5, [2, 2, 4], 4);
        let relabeled = SemGrid::new(grid.dims(), 3, grid.labels().iter().map(|&l| perm[l as usize]).collect(), vec![true; 16]).unwrap();
        let run = |s: &ParamStore, grid: &SemGrid| {
            let mut g = Graph::new();
            let p = s.bind(&mut g);
            let y = embed.forward(&mut g, &p, grid).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&store, &grid), run(&permuted, &relabeled));
    }

    #[test]
    fn zero_encoder_block_passes_input_through() {
        for (down, blocks) in [(Downsample::ConvDown, FebBlocks::OneBlock), (Downsample::Maxpool, FebBlocks::TwoBlocks)] {
            let c = RefineConfig {
                feb_downsample: down,
                feb_blocks: blocks,
                ..cfg(3, 3)
            };
            let feb = Feb::new("feb", 3, &c);
            let mut store = busy_params(6, |i| feb.init(i));
            store.zero_prefix("feb.block");
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(Tensor::randn(&[3, 4, 2, 6], 1.0, &mut rng(7)));
            let (skip, out) = feb.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.value(skip), g.value(x));
            assert_eq!(g.shape(out), &[6, 2, 1, 3]);
            let odd = g.constant(Tensor::zeros(&[3, 4, 3, 2]));
            assert!(feb.forward(&mut g, &p, odd).is_err());
        }
    }

    #[test]
    fn pooled_downsampling_keeps_block_maxima() {
        let c = RefineConfig {
            feb_downsample: Downsample::Maxpool,
            feb_blocks: FebBlocks::OneBlock,
            ..cfg(3, 2)
        };
        let feb = Feb::new("feb", 2, &c);
        let mut store = busy_params(8, |i| feb.init(i));
        store.zero_prefix("feb.block");
        let mut w = Tensor::zeros(&[4, 2, 1, 1, 1]);
        for o in 0..4 {
            w.data_mut()[o * 2 + o % 2] = 1.0;
        }
        store.insert("feb.down.w", w);
        store.insert("feb.down.b", Tensor::zeros(&[4]));
        let x = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut rng(9));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let (_, out) = feb.forward(&mut g, &p, xv).unwrap();
        let y = g.value(out);
        for o in 0..4 {
            for (a, b, cc) in (0..2).flat_map(|a| (0..2).flat_map(move |b| (0..1).map(move |cc| (a, b, cc)))) {
                let mut m = f64::NEG_INFINITY;
                for (da, db, dc) in (0..2).flat_map(|i| (0..2).flat_map(move |j| (0..2).map(move |k| (i, j, k)))) {
                    let idx = ((o % 2 * 4 + 2 * a + da) * 4 + 2 * b + db) * 2 + 2 * cc + dc;
                    m = m.max(x.data()[idx]);
                }
                assert_eq!(y.data()[((o * 2 + a) * 2 + b) + cc], m);
            }
        }
    }

    #[test]
    fn zero_decoder_block_returns_projected_upsample() {
        let fab = ConvFab::new("fab", 2, 3, 3, 1e-5, 0.1);
        let mut store = busy_params(10, |i| fab.init(i));
        store.zero_prefix("fab.block");
        let mut eye = Tensor::zeros(&[3, 3, 1, 1, 1]);
        for k in 0..3 {
            eye.data_mut()[k * 3 + k] = 1.0;
        }
        store.insert("fab.project.w", eye);
        store.insert("fab.project.b", Tensor::zeros(&[3]));
        let mut r = rng(11);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let coarse = g.constant(Tensor::randn(&[3, 1, 2, 1], 1.0, &mut r));
        let skip = g.constant(Tensor::randn(&[2, 2, 4, 2], 1.0, &mut r));
        let out = fab.forward(&mut g, &p, coarse, skip).unwrap();
        let up = g.nearest_upsample3d(coarse, 2).unwrap();
        assert_eq!(g.value(out), g.value(up));
        let wrong = g.constant(Tensor::zeros(&[2, 2, 4, 4]));
        assert!(fab.forward(&mut g, &p, coarse, wrong).is_err());
    }

    #[test]
    fn skip_features_come_first_in_the_concatenation() {
        let fab = ConvFab::new("fab", 2, 2, 1, 1e-5, 0.1);
        let mut store = busy_params(12, |i| fab.init(i));
        store.zero_prefix("fab.");
        let mut probe = Tensor::zeros(&[1, 4, 3, 3, 3]);
        probe.data_mut()[13] = 1.0;
        store.insert("fab.block.conv1.w", probe);
        let mut pass = Tensor::zeros(&[1, 1, 3, 3, 3]);
        pass.data_mut()[13] = 1.0;
        store.insert("fab.block.conv2.w", pass);
        let mut r = rng(13);
        let feature = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut r);
        let run = |skip: Tensor, coarse: Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let s = g.constant(skip);
            let c = g.constant(coarse);
            let y = fab.forward(&mut g, &p, c, s).unwrap();
            g.value(y).data().iter().map(|v| v.abs()).sum::<f64>()
        };
        assert!(run(feature.clone(), Tensor::zeros(&[2, 1, 1, 1])) > 0.1);
        let coarse = Tensor::randn(&[2, 1, 1, 1], 1.0, &mut r);
        assert_eq!(run(Tensor::zeros(&[2, 2, 2, 2]), coarse), 0.0);
    }

    #[test]
    fn argmax_breaks_ties_toward_smaller_class() {
        let t = Tensor::new(vec![3, 1, 1, 4], vec![1.0, 0.0, 2.0, 5.0, 1.0, 3.0, 2.0, 5.0, 0.5, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap(), [0, 1, 0, 0]);
        let t = Tensor::randn(&[4, 2, 2, 2], 1.0, &mut rng(14));
        let got = argmax_channels(&t).unwrap();
        for (i, &l) in got.iter().enumerate() {
            let col: Vec<f64> = (0..4).map(|k| t.data()[k * 8 + i]).collect();
            assert!(col.iter().all(|&v| v <= col[l as usize]));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let c = RefineConfig {
            decoder: DecoderVariant::Pnam,
            ..cfg(3, 2)
        };
        let net = RefineNet::new(&c).unwrap();
        assert_eq!(net.init_params(), net.init_params());
        let grid = random_grid(15, [16, 16, 16], 3);
        let a = refine_forward(&net, &net.init_params(), &grid, None).unwrap();
        let b = refine_forward(&net, &net.init_params(), &grid, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn text_is_ignored_without_fusion() {
        let c = cfg(3, 2);
        let net = RefineNet::new(&c).unwrap();
        let p = net.init_params();
        let grid = random_grid(16, [16, 16, 16], 3);
        let without = refine_forward(&net, &p, &grid, None).unwrap();
        let with = refine_forward(&net, &p, &grid, Some(&text(17, &c))).unwrap();
        assert_eq!(without, with);
    }

    #[test]
    fn fusion_changes_logits_and_depends_on_text() {
        let c = RefineConfig {
            fusion: Fusion::Both,
            ..cfg(3, 2)
        };
        let net = RefineNet::new(&c).unwrap();
        let p = net.init_params();
        let grid = random_grid(18, [16, 16, 16], 3);
        let a = refine_forward(&net, &p, &grid, Some(&text(19, &c))).unwrap();
        let b = refine_forward(&net, &p, &grid, Some(&text(20, &c))).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn structure_matches_the_configuration() {
        let c = RefineConfig {
            decoder: DecoderVariant::Pnam,
            ..cfg(3, 2)
        };
        let net = RefineNet::new(&c).unwrap();
        let stages = net.describe();
        let kinds: Vec<(&str, &str, usize)> = stages.iter().map(|s| (s.name.as_str(), s.kind, s.width)).collect();
        assert_eq!(
            kinds,
            [
                ("enc.s1", "feb", 2),
                ("enc.s2", "feb", 4),
                ("enc.s4", "feb", 8),
                ("enc.s8", "feb", 16),
                ("bottleneck", "conv", 32),
                ("fab.s8", "pnam", 16),
                ("fab.s4", "pnam", 8),
                ("fab.s2", "pnam", 4),
                ("fab.s1", "conv", 2),
            ]
        );
        let grid = random_grid(21, [16, 16, 16], 3);
        let plain = RefineNet::new(&cfg(3, 2)).unwrap();
        let a = refine_forward(&net, &net.init_params(), &grid, None).unwrap();
        let b = refine_forward(&plain, &plain.init_params(), &grid, None).unwrap();
        assert_ne!(a, b);
        for (placement, sites) in [(Fusion::None, 0), (Fusion::Encoder, 4), (Fusion::Decoder, 4), (Fusion::Both, 8)] {
            let net = RefineNet::new(&RefineConfig { fusion: placement, ..cfg(3, 2) }).unwrap();
            assert_eq!(net.fusion_site_count(), sites);
            let prefixed = net.init_params().iter().filter(|(k, _)| k.starts_with("vlgm.")).count() > 0;
            assert_eq!(prefixed, sites > 0);
        }
    }

    #[test]
    fn zero_residual_blocks_keep_stage_inputs() {
        let net = RefineNet::new(&cfg(3, 2)).unwrap();
        let mut store = net.init_params();
        for s in [1, 2, 4, 8] {
            store.zero_prefix(&format!("enc.s{s}.block"));
        }
        let grid = random_grid(22, [16, 16, 16], 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut x = net.embed.forward(&mut g, &p, &grid).unwrap();
        for feb in &net.febs {
            let (skip, down) = feb.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.value(skip), g.value(x));
            x = down;
        }
    }

    #[test]
    fn refine_grid_crops_and_keeps_validity() {
        let net = RefineNet::new(&cfg(3, 2)).unwrap();
        let p = net.init_params();
        let mut grid = random_grid(23, [18, 16, 5], 3);
        grid.set_valid(3, false);
        let out = refine_grid(&net, &p, &grid, None).unwrap();
        assert_eq!(out.dims(), [18, 16, 5]);
        assert_eq!(out.valid(), grid.valid());
        assert!(out.max_label() < 3);
    }
}
