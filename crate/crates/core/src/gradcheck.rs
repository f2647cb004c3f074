//! Central finite-difference verification of analytic gradients, and the
//! registry of operations and blocks it covers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{CeNorm, Downsample, FebBlocks, RefineConfig};
use crate::error::{invalid, Result};
use crate::losses::{self, ClassWeights, ScalMode};
use crate::nn::{Bound, ConvBlock, Init, ParamStore};
use crate::pnam::{NeighborhoodCrossAttention, PnaFab, SelfAttention};
use crate::tensor::{ConvOpts, Graph, KeySet, Tensor, Var};
use crate::unet3d::{ConvFab, Feb};
use crate::vlgm::{Dcam, Sigm};
use crate::voxio::SemGrid;

/// Absolute denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;
/// Denominator floor as a fraction of the largest analytic gradient
/// magnitude over all inputs of a case.
pub const REL_SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckOpts {
    pub eps: f64,
    /// At most this many coordinates per input are perturbed; `None` checks
    /// every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOpts {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CheckStats {
    /// Worst error relative to `max(|a|, |n|, floor)`, the floor being
    /// [`REL_FLOOR`] or [`REL_SCALE_FLOOR`] times the largest gradient
    /// component, whichever is larger.
    pub max_rel_err: f64,
    /// Same with the absolute floor only.
    pub max_pointwise_rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
}

impl CheckStats {
    fn merge(&mut self, o: CheckStats) {
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
        self.max_pointwise_rel_err = self.max_pointwise_rel_err.max(o.max_pointwise_rel_err);
        self.max_abs_err = self.max_abs_err.max(o.max_abs_err);
        self.coords += o.coords;
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type CaseFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn eval(inputs: &[Tensor], f: &CaseFn, proj: Option<&Tensor>, requires_grad: bool) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
    let out = f(&mut g, &vars)?;
    let loss = match proj {
        Some(w) => g.weighted_sum(out, w)?,
        None => out,
    };
    Ok((g, vars, loss))
}

/// Compares the analytic gradient of `Σ w ⊙ f(inputs)` (random fixed `w`)
/// with central differences for every selected input coordinate.
pub fn check_gradients(inputs: &[Tensor], f: &CaseFn, opts: &CheckOpts) -> Result<CheckStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let probe = eval(inputs, f, None, false)?;
    let out_shape = probe.0.shape(probe.2).to_vec();
    let proj = Tensor::randn(&out_shape, 1.0, &mut rng);
    let (mut g, vars, loss) = eval(inputs, f, Some(&proj), true)?;
    g.backward(loss)?;
    let analytics: Vec<Tensor> = inputs
        .iter()
        .zip(&vars)
        .map(|(input, &var)| g.grad(var).cloned().unwrap_or_else(|| Tensor::zeros(input.shape())))
        .collect();
    let scale = analytics.iter().flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = REL_FLOOR.max(REL_SCALE_FLOOR * scale);
    let mut stats = CheckStats::default();
    for (j, (input, analytic)) in inputs.iter().zip(&analytics).enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut shifted = inputs.to_vec();
        for k in coords {
            let base = input.data()[k];
            let value = |x: f64, shifted: &mut Vec<Tensor>| -> Result<f64> {
                shifted[j].data_mut()[k] = x;
                let (g, _, l) = eval(shifted, f, Some(&proj), false)?;
                Ok(g.value(l).item())
            };
            let up = value(base + opts.eps, &mut shifted)?;
            let down = value(base - opts.eps, &mut shifted)?;
            shifted[j].data_mut()[k] = base;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.data()[k];
            stats.merge(CheckStats {
                max_rel_err: rel_err(a, numeric, floor),
                max_pointwise_rel_err: rel_err(a, numeric, REL_FLOOR),
                max_abs_err: (a - numeric).abs(),
                coords: 1,
            });
        }
    }
    Ok(stats)
}

/// One instance to differentiate.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub f: Box<CaseFn>,
}

/// A registered operation: builds a random case from an RNG.
pub struct Entry {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Case,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_pointwise_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteOpts {
    pub trials: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    /// Swap the leaky ReLU backward for a deliberately wrong one.
    pub inject_fault: bool,
}

impl Default for SuiteOpts {
    fn default() -> Self {
        Self {
            trials: 10,
            eps: 1e-5,
            tol: 1e-4,
            seed: 7,
            inject_fault: false,
        }
    }
}

fn case(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        f: Box::new(f),
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for piecewise-linear ops.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        *v += 0.05 * v.signum();
    }
    t
}

/// Parameters of a block followed by its feature inputs, as one case.
fn block_case(
    rng: &mut ChaCha8Rng,
    init: impl FnOnce(&mut Init<'_, ChaCha8Rng>),
    features: Vec<Tensor>,
    fwd: impl Fn(&mut Graph, &Bound, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut store = ParamStore::new();
    init(&mut Init { store: &mut store, rng });
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    let nf = features.len();
    let mut inputs = features;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    case(inputs, move |g, vars| {
        let p = Bound::from_pairs(names.iter().cloned().zip(vars[nf..].iter().copied()));
        fwd(g, &p, &vars[..nf])
    })
}

fn random_grid(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: usize) -> SemGrid {
    let n = dims.iter().product();
    let labels = (0..n).map(|i| if i < classes { i as u16 } else { rng.random_range(0..classes as u16) }).collect();
    let valid = (0..n).map(|i| i < classes || rng.random_bool(0.8)).collect();
    SemGrid::new(dims, (classes - 1) as u16, labels, valid).expect("valid grid")
}

fn conv_case(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, opts: ConvOpts, spatial: usize) -> Case {
    let wc = if opts.depthwise { 1 } else { cin };
    let inputs = vec![
        randn(rng, &[cin, spatial, spatial, spatial]),
        randn(rng, &[cout, wc, k, k, k]),
        randn(rng, &[cout]),
    ];
    case(inputs, move |g, v| g.conv3d(v[0], v[1], v[2], opts))
}

fn small_cfg() -> RefineConfig {
    RefineConfig {
        leaky_slope: 0.1,
        ..Default::default()
    }
}

fn registry(inject_fault: bool) -> Vec<Entry> {
    let mut e = vec![
        Entry {
            name: "conv3d",
            build: |r| conv_case(r, 2, 3, 3, ConvOpts::same(3), 4),
        },
        Entry {
            name: "conv3d_stride2",
            build: |r| {
                let opts = ConvOpts {
                    stride: 2,
                    ..ConvOpts::same(3)
                };
                conv_case(r, 2, 2, 3, opts, 4)
            },
        },
        Entry {
            name: "conv3d_down2",
            build: |r| conv_case(r, 2, 4, 2, ConvOpts::down2(), 4),
        },
        Entry {
            name: "conv3d_depthwise",
            build: |r| conv_case(r, 3, 3, 3, ConvOpts::depthwise_same(3), 4),
        },
        Entry {
            name: "instance_norm3d",
            build: |r| case(vec![randn(r, &[2, 3, 4, 2])], |g, v| g.instance_norm3d(v[0], 1e-5)),
        },
        Entry {
            name: "leaky_relu",
            build: |r| case(vec![off_kink(r, &[3, 4, 4])], |g, v| g.leaky_relu(v[0], 0.1)),
        },
        Entry {
            name: "linear",
            build: |r| {
                let inputs = vec![randn(r, &[5, 3]), randn(r, &[4, 3]), randn(r, &[4])];
                case(inputs, |g, v| g.linear(v[0], v[1], v[2]))
            },
        },
        Entry {
            name: "softmax",
            build: |r| case(vec![randn(r, &[4, 5])], |g, v| Ok(g.softmax_lastdim(v[0]))),
        },
        Entry {
            name: "softmax_channels",
            build: |r| case(vec![randn(r, &[3, 2, 3, 2])], |g, v| Ok(g.softmax_channels(v[0]))),
        },
        Entry {
            name: "layer_norm",
            build: |r| {
                let inputs = vec![randn(r, &[6, 4]), randn(r, &[4]), randn(r, &[4])];
                case(inputs, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
            },
        },
        Entry {
            name: "upsample",
            build: |r| case(vec![randn(r, &[2, 2, 2, 2])], |g, v| g.nearest_upsample3d(v[0], 2)),
        },
        Entry {
            name: "maxpool3d",
            build: |r| case(vec![randn(r, &[2, 4, 4, 4])], |g, v| g.maxpool3d(v[0], 2)),
        },
        Entry {
            name: "modulate",
            build: |r| {
                let inputs = vec![randn(r, &[3, 2, 2, 2]), randn(r, &[3]), randn(r, &[3])];
                case(inputs, |g, v| g.modulate(v[0], v[1], v[2]))
            },
        },
        Entry {
            name: "elementwise",
            build: |r| {
                let inputs = vec![randn(r, &[2, 3]), randn(r, &[2, 3])];
                case(inputs, |g, v| {
                    let a = g.mul(v[0], v[1])?;
                    let b = g.sub(a, v[1])?;
                    let c = g.add(b, v[0])?;
                    Ok(g.scale(c, 1.5))
                })
            },
        },
        Entry {
            name: "shape_ops",
            build: |r| {
                let inputs = vec![randn(r, &[2, 2, 2, 2]), randn(r, &[1, 2, 2, 2]), randn(r, &[5, 3])];
                case(inputs, |g, v| {
                    let cat = g.concat_channels(v[0], v[1])?;
                    let rows = g.voxels_to_rows(cat)?;
                    let t = g.transpose2d(rows)?;
                    let t = g.transpose2d(t)?;
                    let emb = g.embedding(v[2], &[4, 0, 4, 2, 1, 1, 3, 0])?;
                    let emb = g.rows_to_voxels(emb, [2, 2, 2])?;
                    let back = g.rows_to_voxels(t, [2, 2, 2])?;
                    let crop = g.crop3d(back, [1, 2, 2])?;
                    let crop_e = g.crop3d(emb, [1, 2, 2])?;
                    let s = g.concat_channels(crop, crop_e)?;
                    let r = g.voxels_to_rows(s)?;
                    let h = g.split_heads(r, 2)?;
                    g.merge_heads(h)
                })
            },
        },
        Entry {
            name: "attention",
            build: |r| {
                let inputs = vec![randn(r, &[2, 3, 2]), randn(r, &[2, 4, 2]), randn(r, &[2, 4, 2])];
                case(inputs, |g, v| g.attention(v[0], v[1], v[2], &KeySet::All))
            },
        },
        Entry {
            name: "attention_masked",
            build: |r| {
                let inputs = vec![randn(r, &[2, 3, 2]), randn(r, &[2, 4, 2]), randn(r, &[2, 4, 2])];
                let keys = KeySet::Lists(vec![vec![0, 2], vec![1], vec![0, 1, 3]]);
                case(inputs, move |g, v| g.attention(v[0], v[1], v[2], &keys))
            },
        },
        Entry {
            name: "conv_block",
            build: |r| {
                let b = ConvBlock::new("cb", 2, 2, 1e-5, 0.1);
                let x = randn(r, &[2, 3, 3, 3]);
                let b2 = b.clone();
                block_case(r, |i| b.init(i), vec![x], move |g, p, v| b2.forward(g, p, v[0]))
            },
        },
        Entry {
            name: "feb",
            build: |r| {
                let cfg = RefineConfig {
                    feb_downsample: Downsample::Maxpool,
                    feb_blocks: FebBlocks::OneBlock,
                    ..small_cfg()
                };
                let feb = Feb::new("feb", 2, &cfg);
                let x = randn(r, &[2, 4, 4, 2]);
                let f2 = feb.clone();
                block_case(r, |i| feb.init(i), vec![x], move |g, p, v| {
                    let (skip, down) = f2.forward(g, p, v[0])?;
                    let s = g.sum(skip);
                    let d = g.sum(down);
                    let both = g.add(s, d)?;
                    Ok(g.scale(both, 0.5))
                })
            },
        },
        Entry {
            name: "conv_fab",
            build: |r| {
                let fab = ConvFab::new("fab", 2, 3, 2, 1e-5, 0.1);
                let xs = vec![randn(r, &[3, 2, 2, 1]), randn(r, &[2, 4, 4, 2])];
                let f2 = fab.clone();
                block_case(r, |i| fab.init(i), xs, move |g, p, v| f2.forward(g, p, v[0], v[1]))
            },
        },
        Entry {
            name: "self_attention",
            build: |r| {
                let sa = SelfAttention::new("sa", 4, 2);
                let x = randn(r, &[4, 2, 2, 2]);
                let s2 = sa.clone();
                block_case(r, |i| sa.init(i), vec![x], move |g, p, v| s2.forward(g, p, v[0]))
            },
        },
        Entry {
            name: "nca",
            build: |r| {
                let nca = NeighborhoodCrossAttention::new("nca", 4, 2, 3, false);
                let xs = vec![randn(r, &[4, 4, 3, 2]), randn(r, &[4, 4, 3, 2])];
                let n2 = nca.clone();
                block_case(r, |i| nca.init(i), xs, move |g, p, v| n2.forward(g, p, v[0], v[1]))
            },
        },
        Entry {
            name: "pna_fab",
            build: |r| {
                let fab = PnaFab::new("pna", 8, 4, 2, 3, false, 2, 1e-5, 0.1);
                let xs = vec![randn(r, &[8, 2, 2, 2]), randn(r, &[4, 4, 4, 4])];
                let f2 = fab.clone();
                block_case(r, |i| fab.init(i), xs, move |g, p, v| f2.forward(g, p, v[0], v[1]))
            },
        },
        Entry {
            name: "sigm",
            build: |r| {
                let s = Sigm::new("sigm", 5, 3, 0.1);
                let xs = vec![randn(r, &[3, 2, 2, 2]), randn(r, &[5])];
                let s2 = s.clone();
                block_case(r, |i| s.init(i), xs, move |g, p, v| s2.forward(g, p, v[0], v[1]))
            },
        },
        Entry {
            name: "dcam",
            build: |r| {
                let d = Dcam::new("dcam", 5, 4, 2, 1e-5);
                let xs = vec![randn(r, &[4, 2, 2, 2]), randn(r, &[3, 5])];
                let d2 = d.clone();
                block_case(r, |i| d.init(i), xs, move |g, p, v| d2.forward(g, p, v[0], v[1]))
            },
        },
        Entry {
            name: "weighted_ce",
            build: |r| {
                let t = random_grid(r, [2, 2, 2], 3);
                let w = ClassWeights {
                    w: (0..3).map(|_| r.random_range(0.5..2.0)).collect(),
                };
                case(vec![randn(r, &[3, 2, 2, 2])], move |g, v| losses::weighted_ce(g, v[0], &t, &w, CeNorm::ClassCount))
            },
        },
        Entry {
            name: "weighted_ce_voxel_mean",
            build: |r| {
                let t = random_grid(r, [2, 2, 2], 3);
                let w = ClassWeights::uniform(3);
                case(vec![randn(r, &[3, 2, 2, 2])], move |g, v| losses::weighted_ce(g, v[0], &t, &w, CeNorm::VoxelMean))
            },
        },
        Entry {
            name: "scal_semantic",
            build: |r| {
                let t = random_grid(r, [2, 2, 2], 3);
                case(vec![randn(r, &[3, 2, 2, 2])], move |g, v| {
                    let p = g.softmax_channels(v[0]);
                    losses::scal(g, p, &t, ScalMode::Semantic)
                })
            },
        },
        Entry {
            name: "scal_geometric",
            build: |r| {
                let t = random_grid(r, [2, 2, 2], 3);
                case(vec![randn(r, &[3, 2, 2, 2])], move |g, v| {
                    let p = g.softmax_channels(v[0]);
                    losses::scal(g, p, &t, ScalMode::Geometric)
                })
            },
        },
        Entry {
            name: "lovasz_softmax",
            build: |r| {
                let t = random_grid(r, [2, 2, 2], 3);
                case(vec![randn(r, &[3, 2, 2, 2])], move |g, v| {
                    let p = g.softmax_channels(v[0]);
                    losses::lovasz_softmax(g, p, &t)
                })
            },
        },
        Entry {
            name: "total_loss",
            build: |r| {
                let t1 = random_grid(r, [4, 4, 2], 3);
                let t2 = crate::voxio::downsample_labels_majority(&t1, 2).expect("even dims");
                let targets = [(1, t1), (2, t2)].into_iter().collect();
                let cfg = RefineConfig {
                    lambda_lovasz: 0.5,
                    ..RefineConfig::default()
                };
                let w = ClassWeights {
                    w: vec![0.7, 1.3, 1.1],
                };
                case(vec![randn(r, &[3, 4, 4, 2]), randn(r, &[3, 2, 2, 1])], move |g, v| {
                    let logits = [(1, v[0]), (2, v[1])].into_iter().collect();
                    Ok(losses::total_loss(g, &logits, &targets, &w, &cfg)?.0)
                })
            },
        },
    ];
    if inject_fault {
        e[5] = Entry {
            name: "leaky_relu",
            build: |r| case(vec![off_kink(r, &[3, 4, 4])], |g, v| g.leaky_relu_faulty(v[0], 0.1)),
        };
    }
    e
}

/// Names of every registered operation.
pub fn registered() -> Vec<&'static str> {
    registry(false).iter().map(|e| e.name).collect()
}

/// Runs the checks for every entry whose name equals `filter` (or all).
pub fn run_suite(filter: Option<&str>, opts: &SuiteOpts) -> Result<Vec<OpReport>> {
    if !(opts.eps > 0.0 && opts.tol > 0.0) || opts.trials == 0 {
        invalid!("gradient check needs eps > 0, tol > 0 and at least one trial");
    }
    let entries: Vec<(usize, Entry)> = registry(opts.inject_fault)
        .into_iter()
        .enumerate()
        .filter(|(_, e)| filter.is_none_or(|f| e.name == f))
        .collect();
    if entries.is_empty() {
        return Err(crate::Error::Unknown(format!(
            "no registered operation named {:?}",
            filter.unwrap_or_default()
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    for (idx, entry) in &entries {
        let mut stats = CheckStats::default();
        for trial in 0..opts.trials {
            let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add((idx * 1000 + trial) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = (entry.build)(&mut rng);
            let check = CheckOpts {
                eps: opts.eps,
                max_coords: None,
                seed,
            };
            stats.merge(check_gradients(&c.inputs, c.f.as_ref(), &check)?);
        }
        out.push(OpReport {
            name: entry.name.to_string(),
            trials: opts.trials,
            coords: stats.coords,
            max_rel_err: stats.max_rel_err,
            max_pointwise_rel_err: stats.max_pointwise_rel_err,
            max_abs_err: stats.max_abs_err,
            passed: stats.max_rel_err < opts.tol,
        });
    }
    Ok(out)
}
