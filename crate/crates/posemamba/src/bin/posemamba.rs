use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use posemamba::ablation::run_ablation;
use posemamba::bench::bench_scan;
use posemamba::data::{load_dataset, save_dataset, synth_generate, SequenceRecord};
use posemamba::eval::{evaluate, predict_sequence};
use posemamba::metrics::Protocol;
use posemamba::model::{load_checkpoint, ModelConfig, PoseMamba};
use posemamba::numerics::{Precision, Scalar, Tensor};
use posemamba::scan_orders::Skeleton;
use posemamba::ssm::ScanMode;
use posemamba::train::{train, TrainConfig};
use posemamba::PoseError;

#[derive(Parser)]
#[command(
    name = "posemamba",
    version,
    about = "2D-to-3D pose lifting with a selective state space model"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating point width: 32 or 64.
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Flip augmentation (training) or flip averaging (evaluation, inference).
    #[arg(long, global = true)]
    flip: bool,
    /// Output path (checkpoint directory, table or prediction file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a training configuration.
    Train,
    /// Per-action MPJPE / P-MPJPE / MPJVE of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// p1, p2 or all.
        #[arg(long, default_value = "all")]
        protocol: String,
        #[arg(long, default_value = ",")]
        delimiter: char,
    },
    /// Predict 3D poses for every sequence of a dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every model gradient at reduced size.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Time sequential and parallel scans over several lengths.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384")]
        lengths: Vec<usize>,
        /// sequential, parallel or both.
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Write a synthetic dataset (configured by `[data.synthetic]`) to --out.
    Synth,
    /// Train all six scan strategies under one budget and tabulate them.
    Ablate {
        #[arg(long, default_value = ",")]
        delimiter: char,
    },
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    let bits: u32 = s.parse().map_err(|_| format!("`{s}` is not 32 or 64"))?;
    Precision::from_bits(bits).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<PoseError>().map_or(2, PoseError::exit_code);
            println!("event=error code={code} message={:?}", format!("{e:#}"));
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Train => cmd_train(c),
        Command::Eval {
            checkpoint,
            data,
            protocol,
            delimiter,
        } => {
            let protocol: Protocol = protocol.parse()?;
            with_checkpoint(checkpoint, c.precision, |m| cmd_eval(m, data, protocol, *delimiter, c))
        }
        Command::Infer { checkpoint, data } => with_checkpoint(checkpoint, c.precision, |m| cmd_infer(m, data, c)),
        Command::Gradcheck { step, tolerance } => cmd_gradcheck(c, *step, *tolerance),
        Command::BenchScan {
            lengths,
            mode,
            width,
            repeats,
        } => cmd_bench_scan(c, lengths, mode, *width, *repeats),
        Command::Ablate { delimiter } => cmd_ablate(c, *delimiter),
        Command::Synth => cmd_synth(c),
    }
}

/// Loads a checkpoint at the requested precision (default: stored config).
fn with_checkpoint(
    path: &Path,
    precision: Option<Precision>,
    f32_or_64: impl Fn(&dyn ModelRef) -> Result<()>,
) -> Result<()> {
    let stored = load_checkpoint::<f64>(path).with_context(|| format!("loading {}", path.display()))?;
    match precision.unwrap_or(stored.config().precision) {
        Precision::F64 => f32_or_64(&stored),
        Precision::F32 => f32_or_64(&load_checkpoint::<f32>(path)?),
    }
}

/// Precision-erased view of a loaded model.
trait ModelRef {
    fn config(&self) -> &ModelConfig;
    fn predict(&self, r: &SequenceRecord, flip: bool) -> posemamba::Result<Tensor<f64>>;
    fn report(&self, records: &[SequenceRecord], flip: bool) -> posemamba::Result<posemamba::metrics::EvalReport>;
}

impl<T: Scalar> ModelRef for PoseMamba<T> {
    fn config(&self) -> &ModelConfig {
        PoseMamba::config(self)
    }

    fn predict(&self, r: &SequenceRecord, flip: bool) -> posemamba::Result<Tensor<f64>> {
        predict_sequence(self, r, flip)
    }

    fn report(&self, records: &[SequenceRecord], flip: bool) -> posemamba::Result<posemamba::metrics::EvalReport> {
        evaluate(self, records, flip)
    }
}

fn load_train_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            TrainConfig::from_toml(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = c.precision {
        cfg.model.precision = p;
    }
    if c.flip {
        cfg.flip_augment = true;
    }
    Ok(cfg)
}

fn read_dataset(path: &Path) -> Result<Vec<SequenceRecord>> {
    load_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn load_training_data(cfg: &TrainConfig) -> Result<(Vec<SequenceRecord>, Skeleton)> {
    let skeleton = match &cfg.data.skeleton {
        Some(p) => Skeleton::load(p)?,
        None => cfg
            .data
            .synthetic
            .as_ref()
            .map_or_else(Skeleton::h36m, |s| s.skeleton.clone()),
    };
    let records = match (&cfg.data.train, &cfg.data.synthetic) {
        (Some(_), Some(_)) => bail!(PoseError::Config(
            "set only one of data.train and data.synthetic".into()
        )),
        (Some(p), None) => read_dataset(p)?,
        (None, Some(s)) => synth_generate(s)?,
        (None, None) => bail!(PoseError::Config(
            "no training data: set data.train or data.synthetic".into()
        )),
    };
    Ok((records, skeleton))
}

fn log_config(cfg: &TrainConfig, records: usize) {
    let m = &cfg.model;
    println!(
        "event=config depth={} d_model={} frames={} joints={} branch_set={} precision={} seed={} sequences={records} params={}",
        m.depth,
        m.d_model,
        m.frames,
        m.joints,
        m.branch_set,
        m.precision.bits(),
        cfg.seed,
        posemamba::model::parameter_count(m)
    );
}

fn cmd_train(c: &Common) -> Result<()> {
    let mut cfg = load_train_config(c)?;
    if let Some(out) = &c.out {
        cfg.checkpoint_dir = Some(out.clone());
    }
    let (records, skeleton) = load_training_data(&cfg)?;
    log_config(&cfg, records.len());
    let mut log = |e: &posemamba::train::TrainEvent| println!("{e}");
    let (initial, fin, val) = match cfg.model.precision {
        Precision::F32 => {
            let o = train::<f32>(&cfg, &records, &skeleton, &mut log)?;
            verify_checkpoint(&cfg, &o.model)?;
            (o.initial_train_mpjpe_mm, o.final_train_mpjpe_mm, o.final_val_mpjpe_mm)
        }
        Precision::F64 => {
            let o = train::<f64>(&cfg, &records, &skeleton, &mut log)?;
            verify_checkpoint(&cfg, &o.model)?;
            (o.initial_train_mpjpe_mm, o.final_train_mpjpe_mm, o.final_val_mpjpe_mm)
        }
    };
    let val = val.map_or_else(|| "none".to_string(), |v| format!("{v:.4}"));
    println!("event=done initial_train_mpjpe_mm={initial:.4} final_train_mpjpe_mm={fin:.4} val_mpjpe_mm={val}");
    Ok(())
}

/// Reloads the final checkpoint and checks it reproduces the trained weights.
fn verify_checkpoint<T: Scalar>(cfg: &TrainConfig, model: &PoseMamba<T>) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        let back = load_checkpoint::<T>(&dir.join("final.pmck"))?;
        if back.params != model.params {
            bail!(PoseError::Checkpoint(
                "reloaded checkpoint differs from the trained model".into()
            ));
        }
        println!("event=checkpoint_verified path={}", dir.join("final.pmck").display());
    }
    Ok(())
}

fn cmd_eval(m: &dyn ModelRef, data: &Path, protocol: Protocol, delimiter: char, c: &Common) -> Result<()> {
    let records = read_dataset(data)?;
    let report = m.report(&records, c.flip)?;
    let table = report.to_table_for(delimiter, protocol);
    let a = &report.average;
    println!(
        "event=eval sequences={} flip={} mpjpe_mm={:.4} p_mpjpe_mm={:.4} mpjve_mm={:.4} skipped_frames={}",
        records.len(),
        report.flip,
        a.mpjpe_mm,
        a.p_mpjpe_mm,
        a.mpjve_mm,
        a.skipped_frames
    );
    write_or_print(c.out.as_deref(), &table)
}

fn cmd_infer(m: &dyn ModelRef, data: &Path, c: &Common) -> Result<()> {
    let Some(out) = &c.out else {
        bail!(PoseError::Config("infer needs --out".into()));
    };
    let records = read_dataset(data)?;
    let mut lines = serde_json::json!({"format": "posemamba-predictions", "version": 1}).to_string();
    lines.push('\n');
    for r in &records {
        let pred = m.predict(r, c.flip)?;
        let line = serde_json::json!({
            "id": r.id,
            "action": r.action,
            "frames": r.frames(),
            "joints": m.config().joints,
            "poses_3d": pred.data(),
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    std::fs::write(out, lines).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "event=infer sequences={} flip={} out={}",
        records.len(),
        c.flip,
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(c: &Common, step: f64, tolerance: f64) -> Result<()> {
    let mut cfg = match &c.config {
        Some(p) => ModelConfig::load(p)?,
        None => {
            let mut m = ModelConfig::small();
            m.depth = 2;
            m.d_model = 8;
            m.frames = 4;
            m
        }
    };
    cfg.precision = Precision::F64;
    cfg.output_scale_mm = 1.0;
    let seed = c.seed.unwrap_or(3);
    let mut model = PoseMamba::<f64>::init(cfg.clone(), Skeleton::h36m(), seed)?;
    model.perturb_for_check(0.1, seed + 100);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens = cfg.frames * cfg.joints;
    let rand = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let x = Tensor::new(&[cfg.frames, cfg.joints, 2], rand(&mut rng, tokens * 2))?;
    let w = Tensor::new(&[tokens, 3], rand(&mut rng, tokens * 3))?;
    let base = model.forward(&x)?.reshape(&[tokens, 3])?;
    let report = model.gradient_check(
        &x,
        |g, out| {
            let wv = g.constant(w.clone());
            let bv = g.constant(base.clone());
            let centred = g.sub(out, bv)?;
            let y = g.mul(centred, wv)?;
            g.mean(y)
        },
        step,
    )?;
    let pass = report.passes(tolerance);
    println!(
        "event=gradcheck coordinates={} max_rel_err={:.3e} tolerance={tolerance:e} pass={pass}",
        report.coordinates, report.max_rel_err
    );
    if !pass {
        bail!(PoseError::NonFinite(format!(
            "gradient check failed: max relative error {:e}",
            report.max_rel_err
        )));
    }
    Ok(())
}

fn cmd_bench_scan(c: &Common, lengths: &[usize], mode: &str, width: usize, repeats: usize) -> Result<()> {
    let modes = match mode {
        "both" => vec![ScanMode::Sequential, ScanMode::Parallel],
        m => vec![m.parse::<ScanMode>()?],
    };
    let seed = c.seed.unwrap_or(0);
    let report = match c.precision.unwrap_or(Precision::F64) {
        Precision::F64 => bench_scan::<f64>(lengths, width, &modes, repeats, seed)?,
        Precision::F32 => bench_scan::<f32>(lengths, width, &modes, repeats, seed)?,
    };
    println!(
        "event=bench_scan width={width} verified_max_abs_diff={:.3e} linear={}",
        report.max_abs_diff,
        report.is_linear()
    );
    write_or_print(c.out.as_deref(), &report.to_table(','))?;
    if !report.is_linear() {
        bail!(PoseError::NonFinite(
            "scan cost per step grows faster than linear".into()
        ));
    }
    Ok(())
}

fn cmd_ablate(c: &Common, delimiter: char) -> Result<()> {
    let mut cfg = load_train_config(c)?;
    if cfg.data.train.is_none() && cfg.data.synthetic.is_none() {
        cfg.data.synthetic = Some(posemamba::data::SyntheticConfig {
            seed: cfg.seed,
            frames: cfg.model.frames,
            ..Default::default()
        });
    }
    let (records, skeleton) = load_training_data(&cfg)?;
    log_config(&cfg, records.len());
    let mut log = |s: posemamba::scan_orders::BranchSet, e: &posemamba::train::TrainEvent| {
        if !matches!(e, posemamba::train::TrainEvent::Step { .. }) {
            println!("strategy={s} {e}");
        }
    };
    let table = match cfg.model.precision {
        Precision::F32 => run_ablation::<f32>(&cfg, &records, &skeleton, &mut log)?,
        Precision::F64 => run_ablation::<f64>(&cfg, &records, &skeleton, &mut log)?,
    };
    for r in &table.rows {
        println!(
            "event=ablation strategy={} params={} macs={} final_loss={:.6} mpjpe_mm={:.4}",
            r.strategy, r.params, r.macs, r.final_loss, r.final_mpjpe_mm
        );
    }
    write_or_print(c.out.as_deref(), &table.to_table(delimiter))
}

fn cmd_synth(c: &Common) -> Result<()> {
    let Some(out) = &c.out else {
        bail!(PoseError::Config("synth needs --out".into()));
    };
    let cfg = load_train_config(c)?;
    let mut synth = cfg.data.synthetic.unwrap_or_default();
    if let Some(s) = c.seed {
        synth.seed = s;
    }
    let records = synth_generate(&synth)?;
    save_dataset(&records, out)?;
    println!(
        "event=synth sequences={} frames={} out={}",
        records.len(),
        synth.frames,
        out.display()
    );
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
