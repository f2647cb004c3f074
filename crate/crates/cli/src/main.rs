//! `essc`: train, apply and score the voxel grid refiner.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use essc_core::checkpoint;
use essc_core::config::{Fusion, RefineConfig};
use essc_core::gradcheck::{self, SuiteOpts};
use essc_core::metrics::{report_table, ConfusionMatrix};
use essc_core::train::{self, corrupt_labels, layered_scene, NoiseSpec, RunConfig, SampleSpec, Swap, TrainMode, TrainOpts};
use essc_core::unet3d::{refine_grid, RefineNet};
use essc_core::voxio::{self, downsample_labels_majority, TextEmbedding};
use essc_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "essc", version, about = "Refine coarse semantic voxel grids")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference check of every registered operation.
    Gradcheck {
        /// Only check the operation with this name.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// List the registered operations and exit.
        #[arg(long)]
        list: bool,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train a refiner from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Refine one coarse grid with a trained checkpoint.
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Coarse grid in the simple grid format.
        coarse: PathBuf,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted grids against ground truth, matched by file name.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Write the CSV table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Majority-downsampled targets of every grid in a directory.
    MakeMsgt {
        gt_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        scales: Vec<usize>,
        /// Receives one `s<scale>/` subdirectory per scale.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a procedural scene, a corrupted copy, a text embedding and a
    /// run config that trains on them.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "32,32,8")]
        dims: Vec<usize>,
        /// Semantic classes, empty excluded.
        #[arg(long, default_value_t = 4)]
        classes: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a run config with every default spelled out.
    PrintDefaultConfig,
}

/// An error with its exit status.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let err = e.into();
        let code = match err.downcast_ref::<Error>() {
            Some(Error::NonFinite(_)) => 2,
            _ => 1,
        };
        Failure { code, err }
    }
}

fn internal(err: anyhow::Error) -> Failure {
    Failure { code: 2, err }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let result = match cli.cmd {
        Cmd::Gradcheck {
            filter,
            trials,
            tol,
            list,
            inject_fault,
        } => cmd_gradcheck(filter.as_deref(), trials, tol, list, inject_fault),
        Cmd::Train { config, seed } => cmd_train(&config, seed),
        Cmd::Refine {
            checkpoint,
            coarse,
            text,
            out,
        } => cmd_refine(&checkpoint, &coarse, text.as_deref(), &out),
        Cmd::Eval { pred_dir, gt_dir, out } => cmd_eval(&pred_dir, &gt_dir, out.as_deref()),
        Cmd::MakeMsgt { gt_dir, scales, out } => cmd_make_msgt(&gt_dir, &scales, &out),
        Cmd::Synth {
            out,
            dims,
            classes,
            seed,
        } => cmd_synth(&out, &dims, classes, seed),
        Cmd::PrintDefaultConfig => print_default_config(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("ESSC_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("ESSC_THREADS={v:?} is not a thread count"))?;
    if n == 0 {
        bail!("ESSC_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn cmd_gradcheck(filter: Option<&str>, trials: usize, tol: f64, list: bool, inject_fault: bool) -> CmdResult {
    if list {
        for name in gradcheck::registered() {
            println!("{name}");
        }
        return Ok(());
    }
    let opts = SuiteOpts {
        trials,
        tol,
        inject_fault,
        ..Default::default()
    };
    let reports = gradcheck::run_suite(filter, &opts)?;
    println!("{:<24} {:>6} {:>7} {:>12} {:>12} {:>12}  result", "operation", "trials", "coords", "max_rel", "pointwise", "max_abs");
    for r in &reports {
        println!(
            "{:<24} {:>6} {:>7} {:>12.3e} {:>12.3e} {:>12.3e}  {}",
            r.name,
            r.trials,
            r.coords,
            r.max_rel_err,
            r.max_pointwise_rel_err,
            r.max_abs_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(internal(anyhow::anyhow!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>) -> CmdResult {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut run = RunConfig::parse(&text).with_context(|| format!("in {}", config.display()))?;
    if let Some(s) = seed {
        run.model.seed = s;
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let samples = run.load_samples(&run.train, base)?;
    let val = run.load_samples(&run.val, base)?;
    let opts = TrainOpts {
        mode: run.mode,
        noise: run.noise.clone(),
        eval_every: run.eval_every,
    };
    let mut log_file = match &run.log {
        Some(p) => {
            let path = base.join(p);
            Some(std::io::BufWriter::new(
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
            ))
        }
        None => None,
    };
    let sink = log_file.as_mut().map(|w| w as &mut dyn Write);
    let result = train::train_refiner(&run.model, &samples, &val, &opts, sink)?;
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    let ckpt = base.join(&run.checkpoint);
    let bytes = checkpoint::save(&ckpt, &run.model, &result.params)?;
    println!("initial iou {:.4} miou {:.4}", result.initial.iou, result.initial.miou);
    println!("final   iou {:.4} miou {:.4}", result.last.iou, result.last.miou);
    println!("checkpoint {} sha256 {}", ckpt.display(), checkpoint::file_digest(&bytes));
    Ok(())
}

fn cmd_refine(ckpt: &Path, coarse: &Path, text: Option<&Path>, out: &Path) -> CmdResult {
    let ck = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let grid = voxio::load_grid(coarse)?;
    let semantic = ck.config.num_classes - 1;
    if grid.max_label() as usize > semantic {
        return Err(anyhow::anyhow!(
            "{}: label {} outside the checkpoint's {semantic} semantic classes",
            coarse.display(),
            grid.max_label()
        )
        .into());
    }
    let grid = grid.with_num_classes(semantic as u16)?;
    let text = text.map(voxio::load_text).transpose()?;
    if ck.config.fusion != Fusion::None && text.is_none() {
        return Err(anyhow::anyhow!("checkpoint uses text fusion ({:?}); pass --text", ck.config.fusion).into());
    }
    if let Some(t) = &text {
        check_text(&ck.config, t)?;
    }
    let net = RefineNet::new(&ck.config)?;
    let expected = net.init_params();
    for (name, t) in expected.iter() {
        match ck.params.get(name) {
            Some(v) if v.shape() == t.shape() => {}
            Some(v) => return Err(anyhow::anyhow!("checkpoint tensor {name} has shape {:?}, expected {:?}", v.shape(), t.shape()).into()),
            None => return Err(anyhow::anyhow!("checkpoint lacks tensor {name}").into()),
        }
    }
    let refined = refine_grid(&net, &ck.params, &grid, text.as_ref())?;
    voxio::save_grid(out, &refined)?;
    Ok(())
}

fn check_text(cfg: &RefineConfig, t: &TextEmbedding) -> anyhow::Result<()> {
    if cfg.fusion != Fusion::None && (t.global_dim() != cfg.text_global_dim || t.token_dim() != cfg.text_token_dim) {
        bail!(
            "text embedding dims ({}, {}) do not match the checkpoint's ({}, {})",
            t.global_dim(),
            t.token_dim(),
            cfg.text_global_dim,
            cfg.text_token_dim
        );
    }
    Ok(())
}

/// Regular files of `dir`, sorted by name.
fn list_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path, out: Option<&Path>) -> CmdResult {
    let gts = list_files(gt_dir)?;
    if gts.is_empty() {
        return Err(anyhow::anyhow!("{} holds no grids", gt_dir.display()).into());
    }
    let preds = list_files(pred_dir)?;
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().map(|n| n.to_owned())).collect::<Vec<_>>();
    if names(&gts) != names(&preds) {
        return Err(anyhow::anyhow!("{} and {} hold different file sets", pred_dir.display(), gt_dir.display()).into());
    }
    let scored: Vec<(String, ConfusionMatrix)> = gts
        .par_iter()
        .zip(&preds)
        .map(|(g, p)| -> anyhow::Result<(String, ConfusionMatrix)> {
            let gt = voxio::load_grid(g)?;
            let pred = voxio::load_grid(p)?;
            let classes = gt.num_classes().max(pred.num_classes()) as usize;
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&pred, &gt).with_context(|| format!("scoring {}", p.display()))?;
            Ok((stem(g), cm))
        })
        .collect::<anyhow::Result<_>>()?;
    let classes = scored.iter().map(|(_, cm)| cm.semantic_classes()).max().unwrap_or(0);
    let scored: Vec<(String, ConfusionMatrix)> = scored
        .into_iter()
        .map(|(n, cm)| (n, widen(&cm, classes)))
        .collect();
    let report = report_table(&scored)?;
    print!("{}", report.to_text(None));
    if let Some(path) = out {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Re-expresses `cm` over `classes` semantic classes.
fn widen(cm: &ConfusionMatrix, classes: usize) -> ConfusionMatrix {
    let mut out = ConfusionMatrix::new(classes);
    let k = cm.semantic_classes();
    for t in 0..=k {
        for p in 0..=k {
            out.add(t, p, cm.get(t, p));
        }
    }
    out
}

fn cmd_make_msgt(gt_dir: &Path, scales: &[usize], out: &Path) -> CmdResult {
    if scales.is_empty() || scales.contains(&0) {
        return Err(anyhow::anyhow!("scales must be positive, got {scales:?}").into());
    }
    let files = list_files(gt_dir)?;
    for &s in scales {
        fs::create_dir_all(out.join(format!("s{s}")))?;
    }
    files.par_iter().try_for_each(|f| -> anyhow::Result<()> {
        let grid = voxio::load_grid(f)?;
        for &s in scales {
            let target = downsample_labels_majority(&grid, s).with_context(|| format!("{} at scale {s}", f.display()))?;
            let name = f.file_name().expect("listed file has a name");
            voxio::save_grid(&out.join(format!("s{s}")).join(name), &target)?;
        }
        Ok(())
    })?;
    Ok(())
}

fn cmd_synth(out: &Path, dims: &[usize], classes: u16, seed: u64) -> CmdResult {
    let [x, y, z] = dims[..] else {
        return Err(anyhow::anyhow!("--dims needs three extents, got {dims:?}").into());
    };
    fs::create_dir_all(out)?;
    let gt = layered_scene([x, y, z], classes, seed)?;
    let noise = NoiseSpec {
        swaps: vec![Swap { from: 1, to: 2, prob: 0.8 }],
        dropout: 0.2,
        blob_erase: None,
    };
    let (coarse, stats) = corrupt_labels(&gt, &noise, seed.wrapping_add(1))?;
    let mut cfg = RefineConfig {
        num_classes: classes as usize + 1,
        seed,
        ..Default::default()
    };
    let text = {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let global = Tensor::randn(&[cfg.text_global_dim], 1.0, &mut rng).into_data();
        TextEmbedding::new(global, Tensor::randn(&[8, cfg.text_token_dim], 1.0, &mut rng))?
    };
    voxio::save_grid(&out.join("gt.grid"), &gt)?;
    voxio::save_grid(&out.join("coarse.grid"), &coarse)?;
    voxio::save_text(&out.join("scene.text"), &text)?;
    cfg.steps = Some(500);
    let run = RunConfig {
        model: cfg,
        mode: TrainMode::Separate,
        train: vec![SampleSpec {
            name: Some("scene".into()),
            coarse: Some("coarse.grid".into()),
            gt: "gt.grid".into(),
            text: Some("scene.text".into()),
        }],
        eval_every: Some(50),
        ..Default::default()
    };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    println!(
        "wrote {} (corrupted {:.1}% of voxels)",
        out.display(),
        100.0 * stats.fraction
    );
    Ok(())
}

fn print_default_config() -> CmdResult {
    println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
    Ok(())
}
