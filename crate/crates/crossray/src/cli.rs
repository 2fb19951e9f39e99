//! Command-line surface: dataset generation, training, rendering,
//! evaluation, and the numerical audits.
//!
//! Every run that writes artifacts also writes a `run_config.json` echo of
//! its arguments next to them, so results stay traceable to the exact
//! invocation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::linalg::run_optimality_trial;
use crate::metrics::{evaluate_dataset, predicted_map};
use crate::render::{
    interpolate_appearance, render_multi_appearance, render_novel_view, Model, RenderOptions,
    Renderer, DEFAULT_TILE_ROWS,
};
use crate::scene::{
    generate_dataset, read_rgb_png, write_mask_png, write_rgb_png, CameraModel, Dataset, SceneSpec,
};
use crate::tensor::{op_kind_checks, CheckpointData, Scalar};
use crate::trainer::{
    full_pipeline_grad_check, run_training, Precision, TrainConfig, Variant,
};

#[derive(Parser, Debug)]
#[command(
    name = "crossray",
    version,
    about = "Cross-ray feature volume rendering on synthetic photo collections: \
             appearance transfer, transient masking, training and inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-view photo collection of the built-in scene.
    GenerateData(GenerateDataArgs),
    /// Train a variant on a generated dataset.
    Train(TrainArgs),
    /// Render one dataset camera under a reference appearance image.
    Render(RenderArgs),
    /// Render one camera under several references, running the field pass once.
    RenderMulti(RenderMultiArgs),
    /// Render a sequence interpolating between two reference appearances.
    Interpolate(InterpolateArgs),
    /// Evaluate a checkpoint on a dataset (PSNR/SSIM, transient-mask IoU).
    Evaluate(EvaluateArgs),
    /// Finite-difference audit of every op kind and of the full loss.
    CheckGrad(CheckGradArgs),
    /// Randomized optimality audit of the closed-form appearance transform.
    VerifyTransform(VerifyTransformArgs),
    /// Train and evaluate a grid of variants × ray counts.
    Ablate(AblateArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(args) => generate_data(args),
        Command::Train(args) => train(args),
        Command::Render(args) => render(args),
        Command::RenderMulti(args) => render_multi(args),
        Command::Interpolate(args) => interpolate(args),
        Command::Evaluate(args) => evaluate(args),
        Command::CheckGrad(args) => check_grad(args),
        Command::VerifyTransform(args) => verify_transform(args),
        Command::Ablate(args) => ablate(args),
    }
}

fn write_run_config<T: Serialize>(dir: &Path, command: &str, args: &T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let echo = serde_json::json!({ "command": command, "args": args });
    let path = dir.join("run_config.json");
    fs::write(&path, serde_json::to_string_pretty(&echo)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if p != Path::new("") => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

// ---------------------------------------------------------- generate-data

#[derive(Args, Debug, Serialize)]
pub struct GenerateDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training views.
    #[arg(long, default_value_t = 30)]
    pub train: usize,
    /// Held-out test views (occluder-free).
    #[arg(long, default_value_t = 8)]
    pub test: usize,
    /// Photometric appearance variants (variant 0 is the identity).
    #[arg(long, default_value_t = 5)]
    pub variants: usize,
    /// Probability that a training view receives transient occluders.
    #[arg(long, default_value_t = 0.3)]
    pub occluder_rate: f64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn generate_data(args: GenerateDataArgs) -> Result<()> {
    generate_dataset(
        &SceneSpec::demo(),
        args.train,
        args.test,
        args.variants,
        args.occluder_rate,
        args.image_size,
        args.seed,
        &args.out,
    )?;
    write_run_config(&args.out, "generate-data", &args)?;
    println!(
        "dataset: {} train + {} test views at {}×{} in {}",
        args.train,
        args.test,
        args.image_size,
        args.image_size,
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ train

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Generated dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run directory for train_log.csv and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full", value_parser = Variant::parse)]
    pub variant: Variant,
    /// Rays per training patch (must be a perfect square).
    #[arg(long, default_value_t = 1024)]
    pub rays: usize,
    #[arg(long, default_value_t = 30_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 5e-4)]
    pub learning_rate: f64,
    /// Weight of the occlusion loss in the overall loss.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    /// Weight of the content-anchor term in the appearance loss.
    #[arg(long, default_value_t = 1e-5)]
    pub beta: f64,
    /// Stratified samples per ray.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f64", value_parser = Precision::parse)]
    pub precision: Precision,
    /// Mean-mask regularization weight of the occlusion loss.
    #[arg(long, default_value_t = 0.05)]
    pub mask_reg: f64,
    /// Periodic checkpoint interval in steps (0 = final checkpoint only).
    #[arg(long, default_value_t = 5_000)]
    pub checkpoint_every: u64,
    /// Resume from this checkpoint (config must match apart from --steps).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            rays_per_patch: self.rays,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            beta: self.beta,
            samples_per_ray: self.samples,
            steps: self.steps,
            seed: self.seed,
            precision: self.precision,
            variant: self.variant,
            mask_reg: self.mask_reg,
            checkpoint_every: self.checkpoint_every,
            ..TrainConfig::default()
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset)?;
    let config = args.config();
    write_run_config(&args.out, "train", &args)?;
    let log = match config.precision {
        Precision::F64 => run_training::<f64>(&dataset, &config, &args.out, args.resume.as_deref())?,
        Precision::F32 => run_training::<f32>(&dataset, &config, &args.out, args.resume.as_deref())?,
    };
    match log.records.last() {
        Some(last) => println!(
            "trained {} to step {} (final loss {:.6}) in {}",
            config.variant.as_str(),
            last.step,
            last.loss_total,
            args.out.display()
        ),
        None => println!("nothing to do: checkpoint already at {} steps", config.steps),
    }
    Ok(())
}

// ----------------------------------------------------------------- render

/// Checkpoint + dataset context shared by the rendering commands.
#[derive(Args, Debug, Serialize)]
pub struct RenderContext {
    /// Checkpoint file (ckpt_final.json of a training run).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset the camera comes from (also fixes the ray-march bounds).
    #[arg(long)]
    pub dataset: PathBuf,
    /// View id of the camera to render, e.g. `test_000`.
    #[arg(long)]
    pub camera_id: String,
    /// Rows per field-pass tile.
    #[arg(long, default_value_t = DEFAULT_TILE_ROWS)]
    pub tile_rows: usize,
}

struct RenderSetup {
    ckpt: CheckpointData,
    camera: CameraModel,
    opts: RenderOptions,
}

impl RenderContext {
    fn load(&self) -> Result<RenderSetup> {
        let ckpt = CheckpointData::load(&self.ckpt)?;
        let dataset = Dataset::load(&self.dataset)?;
        let camera = dataset
            .view(&self.camera_id)
            .with_context(|| format!("no view {:?} in {}", self.camera_id, self.dataset.display()))?
            .camera
            .clone();
        let mut opts = RenderOptions::for_scene(&dataset.scene);
        opts.tile_rows = self.tile_rows;
        Ok(RenderSetup { ckpt, camera, opts })
    }
}

/// Runs `f::<f64>` or `f::<f32>` according to the checkpoint's stored dtype.
macro_rules! dispatch_dtype {
    ($ckpt:expr, $f:ident ( $($arg:expr),* )) => {
        match $ckpt.dtype.as_str() {
            "f64" => $f::<f64>($($arg),*),
            "f32" => $f::<f32>($($arg),*),
            other => bail!("unsupported checkpoint dtype {other:?}"),
        }
    };
}

#[derive(Args, Debug, Serialize)]
pub struct RenderArgs {
    #[command(flatten)]
    pub ctx: RenderContext,
    /// Reference appearance image (PNG, any size ≥ the encoder pool). When
    /// omitted the scene is decoded without appearance conditioning, which
    /// is the only mode base / transient-only checkpoints support.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Output PNG path.
    #[arg(long)]
    pub out: PathBuf,
}

fn render(args: RenderArgs) -> Result<()> {
    let setup = args.ctx.load()?;
    let reference = args.reference.as_deref().map(read_rgb_png).transpose()?;
    fs::create_dir_all(parent_dir(&args.out))?;
    fn go<S: Scalar>(
        setup: &RenderSetup,
        reference: Option<&crate::scene::ImageBuf>,
        out: &Path,
    ) -> Result<()> {
        let model = Model::<S>::from_checkpoint(&setup.ckpt)?;
        let image = match reference {
            Some(reference) => render_novel_view(&model, &setup.camera, reference, setup.opts)?,
            None => Renderer::new(&model, setup.camera.clone(), setup.opts)?.render_plain()?,
        };
        write_rgb_png(out, &image)?;
        Ok(())
    }
    dispatch_dtype!(setup.ckpt, go(&setup, reference.as_ref(), &args.out))?;
    write_run_config(&parent_dir(&args.out), "render", &args)?;
    println!("rendered {} -> {}", args.ctx.camera_id, args.out.display());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct RenderMultiArgs {
    #[command(flatten)]
    pub ctx: RenderContext,
    /// Comma-separated reference PNGs; outputs are render_000.png … in order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub references: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Timing CSV path (default: <out-dir>/timing.csv).
    #[arg(long)]
    pub timing_csv: Option<PathBuf>,
}

fn render_multi(args: RenderMultiArgs) -> Result<()> {
    let setup = args.ctx.load()?;
    let references: Vec<_> = args
        .references
        .iter()
        .map(|p| read_rgb_png(p))
        .collect::<Result<_, _>>()?;
    fn go<S: Scalar>(
        setup: &RenderSetup,
        references: &[crate::scene::ImageBuf],
        out_dir: &Path,
        timing_csv: &Path,
    ) -> Result<()> {
        let model = Model::<S>::from_checkpoint(&setup.ckpt)?;
        let (images, report) =
            render_multi_appearance(&model, &setup.camera, references, setup.opts)?;
        for (i, image) in images.iter().enumerate() {
            write_rgb_png(&out_dir.join(format!("render_{i:03}.png")), image)?;
        }
        fs::write(timing_csv, report.csv())
            .with_context(|| format!("writing {}", timing_csv.display()))?;
        println!(
            "{} renders in {:.3}s ({:.3}s field pass, once)",
            images.len(),
            report.seconds_total(),
            report.seconds_shared
        );
        Ok(())
    }
    fs::create_dir_all(&args.out_dir)?;
    let timing = args.timing_csv.clone().unwrap_or_else(|| args.out_dir.join("timing.csv"));
    dispatch_dtype!(setup.ckpt, go(&setup, &references, &args.out_dir, &timing))?;
    write_run_config(&args.out_dir, "render-multi", &args)?;
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub ctx: RenderContext,
    #[arg(long)]
    pub ref_a: PathBuf,
    #[arg(long)]
    pub ref_b: PathBuf,
    /// Ascending interpolation weights in [0, 1]; outputs frame_000.png …
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.25,0.5,0.75,1.0")]
    pub alphas: Vec<f64>,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn interpolate(args: InterpolateArgs) -> Result<()> {
    let setup = args.ctx.load()?;
    let (ref_a, ref_b) = (read_rgb_png(&args.ref_a)?, read_rgb_png(&args.ref_b)?);
    fn go<S: Scalar>(
        setup: &RenderSetup,
        ref_a: &crate::scene::ImageBuf,
        ref_b: &crate::scene::ImageBuf,
        alphas: &[f64],
        out_dir: &Path,
    ) -> Result<()> {
        let model = Model::<S>::from_checkpoint(&setup.ckpt)?;
        let frames = interpolate_appearance(&model, &setup.camera, ref_a, ref_b, alphas, setup.opts)?;
        for (i, frame) in frames.iter().enumerate() {
            write_rgb_png(&out_dir.join(format!("frame_{i:03}.png")), frame)?;
        }
        Ok(())
    }
    fs::create_dir_all(&args.out_dir)?;
    dispatch_dtype!(setup.ckpt, go(&setup, &ref_a, &ref_b, &args.alphas, &args.out_dir))?;
    write_run_config(&args.out_dir, "interpolate", &args)?;
    println!("{} frames in {}", args.alphas.len(), args.out_dir.display());
    Ok(())
}

// --------------------------------------------------------------- evaluate

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Metrics table destination.
    #[arg(long)]
    pub report_csv: PathBuf,
    /// Also dump the segmenter's transient maps of every train view here.
    #[arg(long)]
    pub masks_out: Option<PathBuf>,
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let ckpt = CheckpointData::load(&args.ckpt)?;
    let dataset = Dataset::load(&args.dataset)?;
    fs::create_dir_all(parent_dir(&args.report_csv))?;
    fn go<S: Scalar>(
        ckpt: &CheckpointData,
        dataset: &Dataset,
        report_csv: &Path,
        masks_out: Option<&Path>,
    ) -> Result<()> {
        let model = Model::<S>::from_checkpoint(ckpt)?;
        let report = evaluate_dataset(&model, dataset, RenderOptions::for_scene(&dataset.scene))?;
        fs::write(report_csv, report.csv())
            .with_context(|| format!("writing {}", report_csv.display()))?;
        match &report.iou {
            Some(iou) => println!(
                "mean PSNR {:.3} dB, SSIM {:.4}, mask IoU {:.4} over {} test views",
                report.mean_psnr,
                report.mean_ssim,
                iou.mean,
                report.views.len()
            ),
            None => println!(
                "mean PSNR {:.3} dB, SSIM {:.4} over {} test views",
                report.mean_psnr,
                report.mean_ssim,
                report.views.len()
            ),
        }
        if let Some(dir) = masks_out {
            if !model.config.variant.uses_transient() {
                bail!("--masks-out needs a checkpoint with a segmenter (full or transient-only)");
            }
            fs::create_dir_all(dir)?;
            for view in dataset.train_views() {
                let map = predicted_map(&model, &view.image)?;
                let bytes: Vec<u8> =
                    map.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
                write_mask_png(
                    &dir.join(format!("{}.png", view.record.id)),
                    &bytes,
                    view.image.h,
                    view.image.w,
                )?;
            }
        }
        Ok(())
    }
    dispatch_dtype!(ckpt, go(&ckpt, &dataset, &args.report_csv, args.masks_out.as_deref()))?;
    write_run_config(&parent_dir(&args.report_csv), "evaluate", &args)?;
    Ok(())
}

// -------------------------------------------------------------- check-grad

#[derive(Args, Debug, Serialize)]
pub struct CheckGradArgs {
    /// Maximum accepted relative error between tape and finite differences.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional CSV report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn check_grad(args: CheckGradArgs) -> Result<()> {
    let mut rows = vec!["check,max_rel_err,skipped".to_string()];
    let mut all_ok = true;

    for (op, report) in op_kind_checks(args.seed, args.tolerance)? {
        let ok = report.passed();
        all_ok &= ok;
        println!(
            "op {op}: max rel err {:.3e} {}",
            report.max_error(),
            if ok { "ok" } else { "FAILED" }
        );
        rows.push(format!("op:{op},{:.3e},{}", report.max_error(), report.total_skipped()));
    }

    // Full-loss audit on a small in-memory collection of the built-in scene.
    let tmp = std::env::temp_dir().join(format!("crossray-check-grad-{}", std::process::id()));
    let result = (|| -> Result<()> {
        generate_dataset(&SceneSpec::demo(), 2, 1, 2, 1.0, 16, args.seed, &tmp)?;
        let dataset = Dataset::load(&tmp)?;
        let config = TrainConfig {
            rays_per_patch: 64,
            samples_per_ray: 4,
            field: crate::field::FieldConfig::toy(),
            appearance: crate::appearance::AppearanceConfig::toy(),
            ..TrainConfig::default()
        };
        let report = full_pipeline_grad_check(&dataset, &config, args.tolerance, args.seed)?;
        let ok = report.passed();
        all_ok &= ok;
        println!(
            "full loss ({} params): max rel err {:.3e}, {} kink-skipped probes {}",
            report.per_param.len(),
            report.max_error(),
            report.total_skipped(),
            if ok { "ok" } else { "FAILED" }
        );
        rows.push(format!(
            "full_loss,{:.3e},{}",
            report.max_error(),
            report.total_skipped()
        ));
        Ok(())
    })();
    let _ = fs::remove_dir_all(&tmp);
    result?;

    if let Some(path) = &args.report {
        fs::write(path, rows.join("\n") + "\n")?;
        write_run_config(&parent_dir(path), "check-grad", &args)?;
    }
    if !all_ok {
        bail!("gradient check failed (tolerance {})", args.tolerance);
    }
    Ok(())
}

// --------------------------------------------------------- verify-transform

#[derive(Args, Debug, Serialize)]
pub struct VerifyTransformArgs {
    /// Random instances to audit (dimensions cycle 2…8, β cycles 0.1/1/10).
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Random feasible transforms pitted against each closed form.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination.
    #[arg(long, default_value = "verify_transform.csv")]
    pub out: PathBuf,
}

fn verify_transform(args: VerifyTransformArgs) -> Result<()> {
    let mut csv =
        String::from("trial,objective_closed_form,min_objective_random,constraint_residual\n");
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_residual = 0.0f64;
    for trial in 0..args.trials {
        let dim = 2 + trial % 7;
        let beta = [0.1, 1.0, 10.0][trial % 3];
        let t = run_optimality_trial(dim, beta, args.samples, args.seed ^ trial as u64)?;
        worst_gap = worst_gap.max(t.objective_closed_form - t.min_objective_sampled);
        worst_residual = worst_residual.max(t.constraint_residual);
        csv.push_str(&format!(
            "{trial},{},{},{:e}\n",
            t.objective_closed_form, t.min_objective_sampled, t.constraint_residual
        ));
    }
    fs::write(&args.out, &csv).with_context(|| format!("writing {}", args.out.display()))?;
    write_run_config(&parent_dir(&args.out), "verify-transform", &args)?;
    println!(
        "{} trials: worst closed-form − sampled-best gap {:.3e} (≤ 0 means never beaten), \
         worst constraint residual {:.3e}",
        args.trials, worst_gap, worst_residual
    );
    if worst_gap > 1e-9 || worst_residual > 1e-8 {
        bail!("closed form failed the optimality audit");
    }
    Ok(())
}

// ----------------------------------------------------------------- ablate

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Parent directory; each combination trains into <variant>-m<rays>/.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "full,appearance-only,transient-only,base",
        value_parser = Variant::parse
    )]
    pub variants: Vec<Variant>,
    /// Rays per patch, one training run per value (perfect squares).
    #[arg(long, value_delimiter = ',', default_value = "1024")]
    pub rays: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 30_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f64", value_parser = Precision::parse)]
    pub precision: Precision,
}

fn ablate(args: AblateArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset)?;
    write_run_config(&args.out_dir, "ablate", &args)?;
    let mut summary = String::from("variant,rays_per_patch,mean_psnr,mean_ssim,mean_iou\n");
    for &variant in &args.variants {
        for &rays in &args.rays {
            let config = TrainConfig {
                rays_per_patch: rays,
                samples_per_ray: args.samples,
                steps: args.steps,
                seed: args.seed,
                precision: args.precision,
                variant,
                ..TrainConfig::default()
            };
            let run_dir = args.out_dir.join(format!("{}-m{rays}", variant.as_str()));
            fn go<S: Scalar>(
                dataset: &Dataset,
                config: &TrainConfig,
                run_dir: &Path,
            ) -> Result<crate::metrics::MetricsReport> {
                run_training::<S>(dataset, config, run_dir, None)?;
                let model = Model::<S>::load(&run_dir.join("ckpt_final.json"))?;
                Ok(evaluate_dataset(&model, dataset, RenderOptions::for_scene(&dataset.scene))?)
            }
            let report = match config.precision {
                Precision::F64 => go::<f64>(&dataset, &config, &run_dir)?,
                Precision::F32 => go::<f32>(&dataset, &config, &run_dir)?,
            };
            let iou = report.iou.as_ref().map(|i| format!("{:.6}", i.mean)).unwrap_or_default();
            println!(
                "{} m={rays}: PSNR {:.3} dB, SSIM {:.4}{}",
                variant.as_str(),
                report.mean_psnr,
                report.mean_ssim,
                report
                    .iou
                    .as_ref()
                    .map(|i| format!(", IoU {:.4}", i.mean))
                    .unwrap_or_default()
            );
            summary.push_str(&format!(
                "{},{rays},{:.6},{:.6},{iou}\n",
                variant.as_str(),
                report.mean_psnr,
                report.mean_ssim
            ));
            fs::write(args.out_dir.join("ablation.csv"), &summary)?;
        }
    }
    Ok(())
}
