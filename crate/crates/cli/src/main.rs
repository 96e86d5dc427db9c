//! Command-line interface: training, evaluation, redirection, gaze-sample
//! dumps, the gradient-check suite, and the ablation harness.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use gazesplat_core::numerics::rng::RngStream;
use gazesplat_core::pipeline::{
    self, ablate::run_variant, evaluate, load_checkpoint, read_metrics, redirect, save_checkpoint,
    MetricsWriter, TrainConfig,
};
use gazesplat_core::renderer::SamplerKind;
use gazesplat_core::sampler::{self, GazeAngle, SamplerConfig, SamplerMode};
use gazesplat_core::scene::{oracle_gaze, Split};

#[derive(Parser)]
#[command(name = "gazesplat", about = "Desk-scale differentiable gaze-redirection engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model end to end (init stage included).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Redirect the fitted avatar to a commanded gaze and write the image.
    Redirect(RedirectArgs),
    /// Dump a batch of weak-supervision gaze samples as CSV.
    SampleGazes(SampleArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train the full model plus single-component ablations and compare.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key-value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature toggles, e.g. "dit=on,ortho=off,ws=on".
    #[arg(long)]
    toggle: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics, checkpoint, and config snapshot.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// train | val | test | intermediate
    #[arg(long, default_value = "test")]
    split: String,
    /// full | one_step
    #[arg(long, default_value = "full")]
    sampler: String,
}

#[derive(Args)]
struct RedirectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset sample index providing pose and expression.
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    yaw: f64,
    #[arg(long)]
    pitch: f64,
    /// Output image (binary PPM).
    #[arg(long, default_value = "redirected.ppm")]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// uniform | biased_center | mixed
    #[arg(long, default_value = "mixed")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    epoch: usize,
    #[arg(long, default_value_t = 25)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to one module: numerics | rasterizer | renderer | losses.
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn apply_toggles(cfg: &mut TrainConfig, spec: &str) -> anyhow::Result<()> {
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("bad toggle '{part}', expected name=on|off"))?;
        let on = match value.trim() {
            "on" => true,
            "off" => false,
            other => bail!("bad toggle value '{other}'"),
        };
        match key.trim() {
            "dit" => cfg.toggles.dit_renderer = on,
            "ortho" => cfg.toggles.ortho_loss = on,
            "ws" => cfg.toggles.weak_supervision = on,
            other => bail!("unknown toggle '{other}'"),
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(t) = &args.toggle {
        apply_toggles(&mut cfg, t)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.cfg"), cfg.to_text())?;

    println!("preparing scene, datasets, and the frozen gaze estimator...");
    let mut art = pipeline::prepare(&cfg)?;
    println!("init stage: autoencoder pre-fit + neutral Gaussian fit...");
    let report = pipeline::train_stage_init(&mut art)?;
    println!(
        "init stage done: autoencoder mae {:.3}, neutral psnr {:.1} dB",
        report.ae_recon_mae, report.neutral_psnr
    );

    let metrics_path = args.out.join("metrics.csv");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    println!("training {} steps...", cfg.steps);
    pipeline::train_end_to_end(&mut art, &mut metrics)?;

    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&art, &ckpt)?;
    let rows = read_metrics(&metrics_path)?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!(
            "loss: step {} at {:.4} -> step {} at {:.4}",
            first.step, first.loss_total, last.step, last.loss_total
        );
    }
    println!("checkpoint: {}", ckpt.display());
    println!("metrics:    {}", metrics_path.display());
    Ok(())
}

fn parse_sampler(kind: &str) -> anyhow::Result<SamplerKind> {
    match kind {
        "full" => Ok(SamplerKind::Full),
        "one_step" => Ok(SamplerKind::OneStep),
        other => bail!("unknown sampler '{other}'"),
    }
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let art = load_checkpoint(&args.checkpoint)?;
    let split = Split::parse(&args.split)?;
    let sampler = parse_sampler(&args.sampler)?;
    let summary = evaluate(&art.model, &art.dataset, split, sampler)?;
    println!(
        "split {}: psnr {:.2} dB, ssim {:.3}, perceptual {:.4}, gaze {:.3} deg, pose {:.3} deg ({} samples)",
        args.split, summary.psnr, summary.ssim, summary.perceptual, summary.gaze_deg,
        summary.pose_deg, summary.rows
    );
    Ok(())
}

fn cmd_redirect(args: RedirectArgs) -> anyhow::Result<()> {
    let art = load_checkpoint(&args.checkpoint)?;
    let target = GazeAngle::from_degrees(args.yaw, args.pitch);
    let img = redirect(
        &art.model,
        &art.dataset,
        args.sample,
        target,
        None,
        SamplerKind::Full,
    )?;
    let res = art.model.cfg.resolution;
    gazesplat_core::imageio::write_ppm(&args.out, &img, res, res)?;
    let s = &art.dataset.samples[args.sample];
    let reading = oracle_gaze(
        &img,
        &art.model.spec.camera,
        &art.model.spec,
        &s.pose_matrix(),
        s.pose_trans,
    );
    match reading.angle() {
        Some(a) => println!(
            "wrote {} (oracle reads yaw {:.2} deg, pitch {:.2} deg)",
            args.out.display(),
            a.yaw_deg(),
            a.pitch_deg()
        ),
        None => println!("wrote {} (oracle: pupil unobservable)", args.out.display()),
    }
    Ok(())
}

fn cmd_sample_gazes(args: SampleArgs) -> anyhow::Result<()> {
    let mut cfg = SamplerConfig::default();
    cfg.mode = SamplerMode::parse(&args.mode)?;
    cfg.late_mode = cfg.mode;
    let rng = RngStream::new(args.seed, 0).derive("sample-gazes");
    let samples = sampler::sample(&cfg, args.epoch, args.count, &rng)?;
    let mut csv = String::from("yaw_deg,pitch_deg\n");
    for s in &samples {
        csv.push_str(&format!("{:.6},{:.6}\n", s.yaw_deg(), s.pitch_deg()));
    }
    match &args.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let entries = pipeline::gradsuite::run_all(args.seed)?;
    let mut failures = 0;
    for e in entries {
        if let Some(m) = &args.module {
            if e.module != m {
                continue;
            }
        }
        let status = if e.passed { "pass" } else { "FAIL" };
        println!(
            "[{status}] {:>10}::{:<18} rel err {:.3e} (tol {:.0e}, {} coords)",
            e.module, e.name, e.max_rel_err, e.tolerance, e.coords
        );
        if !e.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} gradient checks failed");
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&args.out)?;
    println!("training full model...");
    let (full_row, art) = run_variant(&cfg, "full", &args.out)?;
    println!("training single-component removals...");
    let table =
        pipeline::ablate::ablate_against_full(&cfg, &args.out, full_row, &art.model.estimator)?;
    print!("{}", table.render_text());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Redirect(args) => cmd_redirect(args),
        Command::SampleGazes(args) => cmd_sample_gazes(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}
