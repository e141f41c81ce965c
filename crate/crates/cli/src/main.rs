use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dfar::checkpoint;
use dfar::config::TrainConfig;
use dfar::data::{generate_synthetic_dataset, load_dataset, SyntheticSpec};
use dfar::eval::{self, REPORT_CONF};
use dfar::head::{INFER_CONF, NMS_IOU};
use dfar::pipeline::{infer_dataset, write_detections, write_visualisation, InferOptions};
use dfar::train::Trainer;

#[derive(Parser, Debug)]
#[command(name = "dfar", version, about = "Moving dim-small target detection in infrared video")]
struct Cli {
    /// TOML training configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a detector and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Run a checkpoint over a dataset and write detections.
    Infer(InferArgs),
    /// Score a detections file against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Export feature heatmaps and a detection overlay for one frame.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root (one directory per sequence).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, the loss log and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Clip length 2R+1 [published default: 5].
    #[arg(long)]
    frames: Option<usize>,
    /// Square network input size [published default: 544].
    #[arg(long)]
    input_size: Option<usize>,
    /// Clips per optimiser step [published default: 4].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Passes over every (sequence, frame) pair [published default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimiser steps.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Constant Adam learning rate [published default: 1e-4; betas 0.9/0.999, eps 1e-8].
    #[arg(long)]
    lr: Option<f64>,
    /// Box-regression weight [published default: 5].
    #[arg(long)]
    lambda_reg: Option<f64>,
    /// Motion-compensation weight; 0 keeps alignment but drops its supervision [published default: 1].
    #[arg(long)]
    eta_mc: Option<f64>,
    /// Disable temporal alignment (also disables its supervision).
    #[arg(long)]
    no_tda: bool,
    /// Disable the motion-compensation loss.
    #[arg(long)]
    no_mc: bool,
    /// Replace refinement with a single wide fusion convolution.
    #[arg(long)]
    no_fr: bool,
    /// Fuse by plain concatenation instead of adaptive weighting.
    #[arg(long)]
    no_afs: bool,
    /// Refine with plain convolutions instead of attention-guided deformable blocks.
    #[arg(long)]
    no_agdf: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Detections file, one `sequence frame x1 y1 x2 y2 score` line per box.
    #[arg(long)]
    out: PathBuf,
    /// Minimum score kept.
    #[arg(long, default_value_t = INFER_CONF)]
    conf: f64,
    #[arg(long, default_value_t = NMS_IOU)]
    nms_iou: f64,
    /// Log the source frame indices of every clip.
    #[arg(long)]
    trace_clips: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Operating point for precision, recall and F1.
    #[arg(long, default_value_t = REPORT_CONF)]
    conf: f64,
    /// JSON metrics report; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// PR-curve CSV.
    #[arg(long, default_value = "pr_curve.csv")]
    pr_curve: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML generator spec; defaults give 8 train and 2 test sequences of 32 frames at 128x128.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output root; sequences go under `train/` and `test/`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sequence: String,
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = INFER_CONF)]
    conf: f64,
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_train_args(cfg: &mut TrainConfig, a: &TrainArgs) {
    macro_rules! set {
        ($($field:ident).+ <- $v:expr) => {
            if let Some(v) = $v {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(frames <- a.frames);
    set!(input_size <- a.input_size);
    set!(batch_size <- a.batch_size);
    set!(epochs <- a.epochs);
    set!(lr <- a.lr);
    set!(loss.lambda_reg <- a.lambda_reg);
    set!(loss.eta_mc <- a.eta_mc);
    if a.max_iterations.is_some() {
        cfg.max_iterations = a.max_iterations;
    }
    let ab = &mut cfg.ablation;
    ab.tda &= !a.no_tda;
    ab.mc_loss &= !a.no_mc;
    ab.fr &= !a.no_fr;
    ab.afs &= !a.no_afs;
    ab.agdf &= !a.no_agdf;
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    apply_train_args(&mut cfg, a);
    cfg.validate()?;
    let data = load_dataset(&a.data)?;
    log::info!("{} sequences, {} frames", data.len(), data.iter().map(|s| s.len()).sum::<usize>());
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    let mut log = BufWriter::new(File::create(a.out.join("loss.ndjson"))?);
    let mut trainer = Trainer::<f32>::new(cfg)?;
    log::info!("{} parameters, ablation {:?}", trainer.model.num_parameters(), trainer.config.ablation);
    let summary = trainer.train(&data, &a.out, &mut log)?;
    println!(
        "trained {} iterations over {} epochs; checkpoint {}",
        summary.iterations,
        summary.epochs,
        summary.last_checkpoint.map_or("none".into(), |p| p.display().to_string())
    );
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let ck = checkpoint::load::<f32>(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let opts = InferOptions {
        input_size: ck.config.input_size,
        conf_thresh: a.conf,
        nms_iou: a.nms_iou,
    };
    let mut trace = Vec::new();
    let dets = infer_dataset(&ck.model, &data, &opts, &mut trace)?;
    if a.trace_clips {
        for t in &trace {
            log::info!("clip {} frame {}: sources {:?}", t.sequence_id, t.frame_index, t.source_indices);
        }
    }
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_detections(&dets, &mut out)?;
    println!("{} detections over {} frames -> {}", dets.len(), trace.len(), a.out.display());
    Ok(())
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.conf) {
        bail!("--conf must lie in [0, 1]");
    }
    let data = load_dataset(&a.data)?;
    let dets = eval::load_detections(&a.detections)?;
    let report = eval::evaluate(&dets, &data, a.conf)?;
    let matches: Vec<_> = eval::match_dataset(&dets, &data)?.into_iter().map(|(_, m)| m).collect();
    eval::export_pr_curve(&matches, &a.pr_curve)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.report {
        Some(p) => {
            std::fs::write(p, &json)?;
            println!(
                "map50 {:.4} precision {:.4} recall {:.4} f1 {:.4}",
                report.map50, report.precision, report.recall, report.f1
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SyntheticSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    generate_synthetic_dataset(&spec, &a.out)?;
    println!(
        "{} train + {} test sequences of {} frames at {}x{} -> {}",
        spec.num_sequences,
        spec.num_test_sequences,
        spec.frames_per_sequence,
        spec.image_size,
        spec.image_size,
        a.out.display()
    );
    Ok(())
}

fn visualize(a: &VisualizeArgs) -> Result<()> {
    let ck = checkpoint::load::<f32>(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let seq = data
        .iter()
        .find(|s| s.id == a.sequence)
        .ok_or_else(|| dfar::Error::UnknownSequence(a.sequence.clone()))?;
    let opts = InferOptions {
        input_size: ck.config.input_size,
        conf_thresh: a.conf,
        nms_iou: NMS_IOU,
    };
    for p in write_visualisation(&ck.model, seq, a.frame, &opts, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.device != "cpu" {
        bail!("device `{}` is not available; use `cpu`", cli.device);
    }
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => evaluate(a),
        Command::Synth(a) => synth(cli, a),
        Command::Visualize(a) => visualize(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        let _ = std::io::stderr().flush();
        std::process::exit(1);
    }
}
