//! Optimization: AdamW, the warmup-cosine schedule, synthetic corruption of
//! ground truth, a procedural training scene, and the training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RefineConfig, BOTTLENECK_SCALE};
use crate::error::{invalid, Error, Result};
use crate::losses::{class_counts, total_loss, ClassWeights, LossBreakdown};
use crate::metrics::{completion_iou, miou, ConfusionMatrix, MIOU_EPS};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Tensor};
use crate::unet3d::{refine_grid, RefineNet};
use crate::vlgm::TextVars;
use crate::voxio::{downsample_labels_majority, load_grid, load_text, SemGrid, TextEmbedding};

/// AdamW hyperparameters for one step.
#[derive(Clone, Copy, Debug)]
pub struct AdamHp {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One AdamW update with decoupled weight decay applied before the
/// bias-corrected adaptive step.
pub fn adamw_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, hp: AdamHp) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            invalid!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), p.shape());
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *pi -= hp.lr * hp.weight_decay * *pi;
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            *pi -= hp.lr * (*mi / c1) / ((*vi / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear ramp to `peak` over the first `round(warmup_frac · total)` steps,
/// then half-cosine decay to zero at `total`.
pub fn cosine_warmup_lr(step: usize, total: usize, peak: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let step = step.min(total);
    let warm = (warmup_frac * total as f64).round() as usize;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    if total == warm {
        return peak;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    0.5 * peak * (1.0 + (PI * progress).cos())
}

/// Relabel `from` as `to` with probability `prob`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Swap {
    pub from: u16,
    pub to: u16,
    pub prob: f64,
}

/// Erase `count` balls of radius `radius` voxels to empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobErase {
    pub count: usize,
    pub radius: f64,
}

/// Synthetic degradation standing in for a backbone's coarse prediction.
/// Applied in order: swaps, dropout, blob erasure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub swaps: Vec<Swap>,
    /// Probability that an occupied voxel becomes empty.
    pub dropout: f64,
    pub blob_erase: Option<BlobErase>,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for s in &self.swaps {
            if !(0.0..=1.0).contains(&s.prob) {
                invalid!("swap probability {} outside [0, 1]", s.prob);
            }
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            invalid!("dropout probability {} outside [0, 1]", self.dropout);
        }
        if let Some(b) = self.blob_erase {
            if !(b.radius >= 0.0 && b.radius.is_finite()) {
                invalid!("blob radius {} must be finite and ≥ 0", b.radius);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorruptionStats {
    pub changed: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Corrupts the labels of `gt`; validity is left untouched.
pub fn corrupt_labels(gt: &SemGrid, noise: &NoiseSpec, seed: u64) -> Result<(SemGrid, CorruptionStats)> {
    noise.validate()?;
    for s in &noise.swaps {
        if s.to > gt.num_classes() {
            invalid!("swap target {} exceeds class count {}", s.to, gt.num_classes());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = gt.clone();
    for s in &noise.swaps {
        for i in 0..out.len() {
            let draw: f64 = rng.random();
            if out.labels()[i] == s.from && draw < s.prob {
                out.set(i, s.to);
            }
        }
    }
    if noise.dropout > 0.0 {
        for i in 0..out.len() {
            let draw: f64 = rng.random();
            if out.labels()[i] != 0 && draw < noise.dropout {
                out.set(i, 0);
            }
        }
    }
    if let Some(b) = noise.blob_erase {
        let [nx, ny, nz] = out.dims();
        let r2 = b.radius * b.radius;
        for _ in 0..b.count {
            let c = [rng.random_range(0..nx), rng.random_range(0..ny), rng.random_range(0..nz)];
            let reach = b.radius.floor() as usize;
            for x in c[0].saturating_sub(reach)..(c[0] + reach + 1).min(nx) {
                for y in c[1].saturating_sub(reach)..(c[1] + reach + 1).min(ny) {
                    for z in c[2].saturating_sub(reach)..(c[2] + reach + 1).min(nz) {
                        let d2 = [x.abs_diff(c[0]), y.abs_diff(c[1]), z.abs_diff(c[2])]
                            .iter()
                            .map(|&d| (d * d) as f64)
                            .sum::<f64>();
                        if d2 <= r2 {
                            let i = out.index(x, y, z);
                            out.set(i, 0);
                        }
                    }
                }
            }
        }
    }
    let changed = out.labels().iter().zip(gt.labels()).filter(|(a, b)| a != b).count();
    let total = gt.len();
    Ok((
        out,
        CorruptionStats {
            changed,
            total,
            fraction: changed as f64 / total as f64,
        },
    ))
}

/// A street-like scene on an `X × Y × Z` grid with `Z` as height.
///
/// Class 1 is a road band along `Y` on the ground, class 2 the sidewalks on
/// either side of it, class 3 building blocks standing on the sidewalks'
/// outer edge and class 4 vegetation blobs. Further classes, when present,
/// are small boxes on the road. Everything above is empty (class 0).
pub fn layered_scene(dims: [usize; 3], num_classes: u16, seed: u64) -> Result<SemGrid> {
    if num_classes < 2 {
        invalid!("layered scene needs at least two semantic classes");
    }
    let [nx, ny, nz] = dims;
    if nx < 8 || nz < 2 {
        invalid!("layered scene needs X ≥ 8 and Z ≥ 2, got {dims:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = SemGrid::filled(dims, num_classes, 0)?;
    let road = (nx * 3 / 8, nx * 5 / 8);
    let walk = (road.0.saturating_sub(nx / 8).max(1), (road.1 + nx / 8).min(nx - 1));
    let top = nz.max(2) - 1;
    for x in 0..nx {
        for y in 0..ny {
            let ground = if x >= road.0 && x < road.1 {
                1
            } else if x >= walk.0 && x < walk.1 {
                2
            } else if num_classes >= 3 {
                3
            } else {
                2
            };
            let i = grid.index(x, y, 0);
            grid.set(i, ground);
            if ground == 3 {
                let height = 1 + ((y / 4 + x / 3) % top.max(1));
                for z in 1..=height.min(top) {
                    let i = grid.index(x, y, z);
                    grid.set(i, 3);
                }
            }
        }
    }
    if num_classes >= 4 {
        let trees = (ny / 4).max(1);
        for _ in 0..trees {
            let side = rng.random_bool(0.5);
            let x = if side { walk.0 } else { walk.1 - 1 };
            let y = rng.random_range(0..ny);
            for dy in 0..2 {
                for z in 1..nz.min(4) {
                    let yy = (y + dy).min(ny - 1);
                    let i = grid.index(x, yy, z);
                    grid.set(i, 4);
                }
            }
        }
    }
    for extra in 5..=num_classes {
        let x = rng.random_range(road.0..road.1);
        let y = rng.random_range(0..ny.saturating_sub(2).max(1));
        for dy in 0..2.min(ny) {
            let i = grid.index(x, y + dy, 1.min(nz - 1));
            grid.set(i, extra);
        }
    }
    Ok(grid)
}

/// Scored refinement of one set of grids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalSummary {
    pub iou: f64,
    pub miou: f64,
}

/// One training scene.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub coarse: SemGrid,
    pub gt: SemGrid,
    pub text: Option<TextEmbedding>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Coarse grids are read from disk.
    Separate,
    /// Coarse grids are regenerated from ground truth every step.
    JointStub,
}

#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub mode: TrainMode,
    /// Corruption used by [`TrainMode::JointStub`].
    pub noise: NoiseSpec,
    /// Validation interval in steps; `None` evaluates once per epoch.
    pub eval_every: Option<usize>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            mode: TrainMode::Separate,
            noise: NoiseSpec::default(),
            eval_every: None,
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        lr: f64,
        loss: LossBreakdown,
    },
    Eval {
        step: usize,
        epoch: usize,
        iou: f64,
        miou: f64,
    },
}

pub struct TrainResult {
    pub params: ParamStore,
    pub log: Vec<LogRecord>,
    pub initial: EvalSummary,
    pub last: EvalSummary,
}

/// Refines every sample's coarse grid and scores it against ground truth.
pub fn evaluate(net: &RefineNet, params: &ParamStore, samples: &[Sample]) -> Result<EvalSummary> {
    let mut cm = ConfusionMatrix::new(net.cfg.num_classes - 1);
    for s in samples {
        let pred = refine_grid(net, params, &s.coarse, s.text.as_ref())?;
        cm.accumulate(&pred, &s.gt)?;
    }
    Ok(EvalSummary {
        iou: completion_iou(&cm).iou,
        miou: miou(&cm, MIOU_EPS).mean,
    })
}

/// Scores the coarse inputs themselves.
pub fn evaluate_coarse(samples: &[Sample], semantic_classes: usize) -> Result<EvalSummary> {
    let mut cm = ConfusionMatrix::new(semantic_classes);
    for s in samples {
        cm.accumulate(&s.coarse, &s.gt)?;
    }
    Ok(EvalSummary {
        iou: completion_iou(&cm).iou,
        miou: miou(&cm, MIOU_EPS).mean,
    })
}

/// Majority-vote targets for every configured scale of a padded grid.
pub fn scale_targets(gt: &SemGrid, scales: &[usize]) -> Result<BTreeMap<usize, SemGrid>> {
    let padded = gt.pad_to_multiple(BOTTLENECK_SCALE);
    scales.iter().map(|&s| Ok((s, downsample_labels_majority(&padded, s)?))).collect()
}

struct Prepared {
    targets: BTreeMap<usize, SemGrid>,
    coarse: SemGrid,
}

/// Trains a fresh network on `samples`, validating on `val`.
pub fn train_refiner(
    cfg: &RefineConfig,
    samples: &[Sample],
    val: &[Sample],
    opts: &TrainOpts,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainResult> {
    let net = RefineNet::new(cfg)?;
    let mut params = net.init_params();
    if samples.is_empty() {
        invalid!("no training samples");
    }
    opts.noise.validate()?;
    let classes = cfg.num_classes;
    for s in samples.iter().chain(val) {
        if s.coarse.dims() != s.gt.dims() {
            invalid!("sample {}: coarse dims {:?} vs gt {:?}", s.name, s.coarse.dims(), s.gt.dims());
        }
        let max = s.coarse.max_label().max(s.gt.max_label()) as usize;
        if max >= classes {
            invalid!("sample {}: label {max} outside {classes} classes", s.name);
        }
        if cfg.fusion != crate::config::Fusion::None && s.text.is_none() {
            invalid!("sample {}: fusion {:?} requires a text embedding", s.name, cfg.fusion);
        }
    }
    let counts = class_counts(samples.iter().map(|s| &s.gt), classes)?;
    let weights = ClassWeights::from_counts(&counts, cfg.class_weight_eps)?;
    let prepared: Vec<Prepared> = samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                targets: scale_targets(&s.gt, &cfg.scales)?,
                coarse: s.coarse.pad_to_multiple(BOTTLENECK_SCALE),
            })
        })
        .collect::<Result<_>>()?;

    let total = cfg.steps.unwrap_or(cfg.epochs * samples.len());
    let eval_every = opts.eval_every.unwrap_or(samples.len()).max(1);
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        log.push(rec);
        Ok(())
    };
    let val_set = if val.is_empty() { samples } else { val };
    let initial = evaluate(&net, &params, val_set)?;
    let mut last = initial;
    let mut state = AdamState::default();
    for step in 0..total {
        let k = step % samples.len();
        let sample = &samples[k];
        let joint;
        let coarse = match opts.mode {
            TrainMode::Separate => &prepared[k].coarse,
            TrainMode::JointStub => {
                let seed = cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(step as u64);
                joint = corrupt_labels(&sample.gt, &opts.noise, seed)?.0.pad_to_multiple(BOTTLENECK_SCALE);
                &joint
            }
        };
        let lr = cosine_warmup_lr(step + 1, total, cfg.lr_peak, cfg.warmup_frac);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let text = sample.text.as_ref().map(|t| TextVars::bind(&mut g, t, false)).transpose()?;
        let logits = net.forward(&mut g, &bound, coarse, text)?;
        let (loss, breakdown) = total_loss(&mut g, &logits, &prepared[k].targets, &weights, cfg)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at step {step}: {breakdown:?}")));
        }
        g.backward(loss)?;
        let grads = params.grads(&g, &bound);
        drop(g);
        let hp = AdamHp {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        };
        adamw_step(&mut params, &grads, &mut state, hp)?;
        emit(
            LogRecord::Step {
                step: step + 1,
                lr,
                loss: breakdown,
            },
            &mut log,
        )?;
        if (step + 1) % eval_every == 0 || step + 1 == total {
            last = evaluate(&net, &params, val_set)?;
            emit(
                LogRecord::Eval {
                    step: step + 1,
                    epoch: (step + 1).div_ceil(samples.len()),
                    iou: last.iou,
                    miou: last.miou,
                },
                &mut log,
            )?;
        }
    }
    Ok(TrainResult {
        params,
        log,
        initial,
        last,
    })
}

/// One scene of a run config; paths are relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub name: Option<String>,
    /// Coarse grid; optional in joint-stub mode.
    pub coarse: Option<PathBuf>,
    pub gt: PathBuf,
    pub text: Option<PathBuf>,
}

/// A training run: every model field at top level plus data and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: RefineConfig,
    pub mode: TrainMode,
    pub train: Vec<SampleSpec>,
    #[serde(default)]
    pub val: Vec<SampleSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
    pub eval_every: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: RefineConfig::default(),
            mode: TrainMode::Separate,
            train: Vec::new(),
            val: Vec::new(),
            noise: NoiseSpec::default(),
            checkpoint: PathBuf::from("refiner.ckpt"),
            log: Some(PathBuf::from("train_log.jsonl")),
            eval_every: None,
        }
    }
}

fn line_of(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(0, |i| i + 1)
}

impl RunConfig {
    /// Parses a run config, naming unknown fields with their line.
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let Some(obj) = value.as_object() else {
            invalid!("run config must be a JSON object");
        };
        let known = serde_json::to_value(RunConfig::default())?;
        let known = known.as_object().expect("struct serializes to an object");
        for key in obj.keys() {
            if !known.contains_key(key) {
                invalid!("unknown field `{key}` at line {}", line_of(text, key));
            }
        }
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.model.validate()?;
        cfg.noise.validate()?;
        Ok(cfg)
    }

    /// Reads every sample; joint-stub samples without a coarse file get a
    /// corrupted copy of their ground truth.
    pub fn load_samples(&self, specs: &[SampleSpec], base: &Path) -> Result<Vec<Sample>> {
        let semantic = u16::try_from(self.model.num_classes - 1).expect("validated class count");
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let gt = load_grid(&base.join(&s.gt))?.with_num_classes(semantic)?;
                let coarse = match &s.coarse {
                    Some(p) => load_grid(&base.join(p))?.with_num_classes(semantic)?,
                    None if self.mode == TrainMode::JointStub => corrupt_labels(&gt, &self.noise, self.model.seed ^ i as u64)?.0,
                    None => invalid!("sample {i}: separate mode needs a coarse grid"),
                };
                let text = s.text.as_ref().map(|p| load_text(&base.join(p))).transpose()?;
                Ok(Sample {
                    name: s.name.clone().unwrap_or_else(|| format!("scene{i}")),
                    coarse,
                    gt,
                    text,
                })
            })
            .collect()
    }
}
