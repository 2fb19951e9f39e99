//! Training loop: per-step patch sampling, loss assembly
//! L_overall = L_a + λ·L_t, Adam updates, ablation-variant wiring, and
//! checkpointing.
//!
//! Every source of randomness is derived statelessly from (seed, step), so a
//! resumed run continues bit-exactly where an uninterrupted run would be.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{
    alignment_loss, appearance_loss, decode, encode_appearance, init_decoder_params,
    init_encoder_params, init_transform_params, learned_transform, AppearanceConfig, APP_ENC,
    CONTENT_ENC,
};
use crate::field::{
    cross_ray_feature, field_points, init_field_params, per_ray_seed, volume_render, FieldConfig,
};
use crate::scene::{Dataset, DatasetView, Ray, SceneError};
use crate::tensor::{
    grad_check, AdamParams, CheckpointData, CheckpointError, GradCheckReport, ParamSet, Scalar,
    Tape, Tensor, TensorError, Var,
};
use crate::transient::{grid_sample_map, init_segmenter_params, segment_transient, transient_loss};

const SALT_BATCH: u64 = 0x9d8f_3a52_71c6_e04b;
const SALT_JITTER: u64 = 0x1bf5_8c0d_6ea9_4273;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Invalid(String),
    #[error("step {step}: {source}")]
    Step { step: u64, source: Box<TrainError> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(msg: impl Into<String>) -> TrainError {
    TrainError::Invalid(msg.into())
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

/// Ablation variants. The mapping from name to active modules follows the
/// ablation table's numbers: `appearance-only` keeps the appearance stack and
/// drops transient handling, `transient-only` the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    AppearanceOnly,
    TransientOnly,
    Base,
    RaypointFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::AppearanceOnly,
        Variant::TransientOnly,
        Variant::Base,
        Variant::RaypointFusion,
    ];

    pub fn parse(s: &str) -> Result<Variant, TrainError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown variant {s:?}")))
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::AppearanceOnly => "appearance-only",
            Variant::TransientOnly => "transient-only",
            Variant::Base => "base",
            Variant::RaypointFusion => "raypoint-fusion",
        }
    }

    /// Appearance encoders + transform + alignment loss active?
    pub fn uses_appearance(&self) -> bool {
        matches!(self, Variant::Full | Variant::AppearanceOnly | Variant::RaypointFusion)
    }

    /// Segmentation network + visibility gating active?
    pub fn uses_transient(&self) -> bool {
        matches!(self, Variant::Full | Variant::TransientOnly | Variant::RaypointFusion)
    }

    /// Transform applied to per-ray-point features before volume rendering?
    pub fn raypoint(&self) -> bool {
        matches!(self, Variant::RaypointFusion)
    }

    /// Parameter-group prefixes present in this variant's graph.
    pub fn group_prefixes(&self) -> Vec<&'static str> {
        let mut g = vec!["field.", "decoder."];
        if self.uses_appearance() {
            g.extend(["app_enc.", "content_enc.", "transform."]);
        }
        if self.uses_transient() {
            g.push("segmenter.");
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Precision, TrainError> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(invalid(format!("unknown precision {other:?} (expected f64 or f32)"))),
        }
    }
}

/// Full training configuration; echoed into checkpoints and run_config.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// m — rays per training patch; must be a perfect square (patch p×p).
    pub rays_per_patch: usize,
    pub learning_rate: f64,
    /// λ — weight of the occlusion loss in L_overall.
    pub lambda: f64,
    /// β — weight of the content-anchor term inside the appearance loss.
    pub beta: f64,
    pub samples_per_ray: usize,
    pub steps: u64,
    pub seed: u64,
    pub precision: Precision,
    pub variant: Variant,
    pub mask_reg: f64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub field: FieldConfig,
    pub appearance: AppearanceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rays_per_patch: 1024,
            learning_rate: 5e-4,
            lambda: 1e-3,
            beta: 1e-5,
            samples_per_ray: 64,
            steps: 30_000,
            seed: 0,
            precision: Precision::F64,
            variant: Variant::Full,
            mask_reg: 0.05,
            checkpoint_every: 5_000,
            field: FieldConfig::default(),
            appearance: AppearanceConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Side of the p×p training patch (√m).
    pub fn patch_size(&self) -> usize {
        (self.rays_per_patch as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.patch_size();
        if p * p != self.rays_per_patch || p == 0 {
            return Err(invalid(format!("rays_per_patch {} is not a positive perfect square", self.rays_per_patch)));
        }
        if self.lambda < 0.0 || self.beta < 0.0 || self.mask_reg < 0.0 {
            return Err(invalid("lambda, beta, mask_reg must be ≥ 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.samples_per_ray < 2 {
            return Err(invalid("samples_per_ray must be ≥ 2"));
        }
        if self.field.channels != self.appearance.channels {
            return Err(invalid(format!(
                "field channels {} ≠ appearance channels {}",
                self.field.channels, self.appearance.channels
            )));
        }
        Ok(())
    }
}

/// Register every parameter group in the variant's graph. Groups outside the
/// graph are not created at all, so they can neither train nor leak into
/// checkpoints.
pub fn init_variant_params<S: Scalar>(config: &TrainConfig) -> ParamSet<S> {
    let mut ps = ParamSet::new();
    init_field_params(&mut ps, &config.field, config.seed);
    init_decoder_params(&mut ps, &config.appearance, config.seed);
    if config.variant.uses_appearance() {
        init_encoder_params(&mut ps, APP_ENC, &config.appearance, config.seed);
        init_encoder_params(&mut ps, CONTENT_ENC, &config.appearance, config.seed);
        init_transform_params(&mut ps, &config.appearance, config.seed);
    }
    if config.variant.uses_transient() {
        init_segmenter_params(&mut ps, config.seed);
    }
    ps
}

/// One sampled training patch: which view, where, and the rays through it.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Index into `dataset.views`.
    pub view_index: usize,
    /// (row, col) of the patch's top-left pixel.
    pub origin: (usize, usize),
    /// p·p rays in row-major patch order.
    pub rays: Vec<Ray>,
    /// Per-step stratified-sampling seed.
    pub jitter_seed: u64,
}

/// Deterministic (seed, step) → batch: uniform training view, uniform valid
/// patch origin.
pub fn sample_batch(dataset: &Dataset, config: &TrainConfig, step: u64) -> Result<TrainBatch, TrainError> {
    use rand::{Rng, SeedableRng};
    let train_idx: Vec<usize> = dataset
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_train())
        .map(|(i, _)| i)
        .collect();
    if train_idx.is_empty() {
        return Err(invalid("dataset has no training views"));
    }
    let p = config.patch_size();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(per_ray_seed(config.seed ^ SALT_BATCH, step));
    let view_index = train_idx[rng.gen_range(0..train_idx.len())];
    let view = &dataset.views[view_index];
    let (h, w) = (view.image.h, view.image.w);
    if p > h || p > w {
        return Err(invalid(format!("patch {p}×{p} exceeds image {h}×{w}")));
    }
    let r0 = rng.gen_range(0..=h - p);
    let c0 = rng.gen_range(0..=w - p);
    let mut rays = Vec::with_capacity(p * p);
    for r in r0..r0 + p {
        for c in c0..c0 + p {
            rays.push(view.camera.ray_for_pixel(r, c));
        }
    }
    Ok(TrainBatch {
        view_index,
        origin: (r0, c0),
        rays,
        jitter_seed: per_ray_seed(config.seed ^ SALT_JITTER, step),
    })
}

fn image_tensor<S: Scalar>(view: &DatasetView) -> Result<Tensor<S>, TensorError> {
    Tensor::from_f64_slice(&[3, view.image.h, view.image.w], &view.image.data)
}

fn patch_tensor<S: Scalar>(view: &DatasetView, origin: (usize, usize), p: usize) -> Tensor<S> {
    let (h, w) = (view.image.h, view.image.w);
    let mut out = Tensor::zeros(&[3, p, p]);
    for ch in 0..3 {
        for r in 0..p {
            for c in 0..p {
                out.data_mut()[(ch * p + r) * p + c] =
                    S::from_f64(view.image.data[(ch * h + origin.0 + r) * w + origin.1 + c]);
            }
        }
    }
    out
}

pub(crate) struct LossParts<S: Scalar> {
    pub total: Var<S>,
    /// Eq. 8 value, when the appearance stack is active.
    pub loss_a: Option<Var<S>>,
    /// Raw occlusion loss (before the λ weight).
    pub loss_t: Var<S>,
    /// I_n — the decoded patch.
    #[allow(dead_code)]
    pub rendered: Var<S>,
}

/// Assemble the variant's loss graph for one batch on an existing tape.
pub(crate) fn build_losses<S: Scalar>(
    tape: &Tape<S>,
    leaves: &BTreeMap<String, Var<S>>,
    dataset: &Dataset,
    config: &TrainConfig,
    batch: &TrainBatch,
) -> Result<LossParts<S>, TrainError> {
    let view = &dataset.views[batch.view_index];
    let p = config.patch_size();
    let (t_near, t_far) = (dataset.scene.t_near, dataset.scene.t_far);
    let ref_full = tape.constant(image_tensor::<S>(view)?);
    let target = tape.constant(patch_tensor::<S>(view, batch.origin, p));
    let jitter = Some(batch.jitter_seed);

    // rendered feature grid + optional appearance alignment
    let (loss_a, rendered) = if config.variant.raypoint() {
        let rp = field_points(tape, leaves, &config.field, &batch.rays, config.samples_per_ray, t_near, t_far, jitter)?;
        let f_a = encode_appearance(leaves, APP_ENC, &config.appearance, &ref_full)?;
        let moved = learned_transform(leaves, &config.appearance, &rp.features, &f_a)?;
        let injected = volume_render(tape, &moved, &rp.density, &rp.deltas, &rp.t_values)?
            .rendered
            .reshape(&[config.field.channels, p, p])?;
        let anchor = volume_render(tape, &rp.features, &rp.density, &rp.deltas, &rp.t_values)?
            .rendered
            .reshape(&[config.field.channels, p, p])?;
        let out = alignment_loss(leaves, &config.appearance, &injected, &anchor, &f_a, config.beta)?;
        (Some(out.loss), out.decoded)
    } else {
        let grid = cross_ray_feature(tape, leaves, &config.field, &batch.rays, config.samples_per_ray, t_near, t_far, jitter)?.grid;
        if config.variant.uses_appearance() {
            let out = appearance_loss(tape, leaves, &config.appearance, &grid, &ref_full, config.beta)?;
            (Some(out.loss), out.decoded)
        } else {
            let decoded = decode(leaves, &grid)?;
            (None, decoded)
        }
    };

    // visibility map: segment the full reference, grid-sample at ray pixels
    let (map, mask_reg) = if config.variant.uses_transient() {
        let full = segment_transient(leaves, &ref_full)?;
        let coords: Vec<(f64, f64)> =
            batch.rays.iter().map(|r| (r.pixel.0 as f64, r.pixel.1 as f64)).collect();
        (grid_sample_map(&full, &coords)?.reshape(&[1, p, p])?, config.mask_reg)
    } else {
        (tape.constant(Tensor::zeros(&[1, p, p])), 0.0)
    };
    let loss_t = transient_loss(tape, &map, &rendered, &target, mask_reg)?;

    let weighted = loss_t.scalar_mul(config.lambda)?;
    let total = match &loss_a {
        Some(a) => a.add(&weighted)?,
        None => weighted,
    };
    Ok(LossParts { total, loss_a, loss_t, rendered })
}

/// Losses of one completed step (f64 regardless of training precision).
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub loss_total: f64,
    pub loss_a: f64,
    pub loss_t: f64,
}

/// Forward + backward + one Adam update on a given batch.
pub fn step_on_batch<S: Scalar>(
    params: &mut ParamSet<S>,
    dataset: &Dataset,
    config: &TrainConfig,
    batch: &TrainBatch,
) -> Result<StepOutput, TrainError> {
    let tape = Tape::new();
    let leaves = params.leaves(&tape, |_| true);
    let parts = build_losses(&tape, &leaves, dataset, config, batch)?;
    let loss_a = parts.loss_a.as_ref().map(|v| v.value().item().to_f64()).unwrap_or(0.0);
    let loss_t = parts.loss_t.value().item().to_f64();
    let loss_total = tape.backward(&parts.total)?.item().to_f64();
    let grads: BTreeMap<String, Tensor<S>> =
        leaves.iter().filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g))).collect();
    params.adam_step(&grads, AdamParams::new(config.learning_rate))?;
    Ok(StepOutput { loss_total, loss_a, loss_t })
}

/// Sample the step's batch and update; errors carry the step number.
pub fn train_step<S: Scalar>(
    params: &mut ParamSet<S>,
    dataset: &Dataset,
    config: &TrainConfig,
    step: u64,
) -> Result<StepOutput, TrainError> {
    let mut run = || -> Result<StepOutput, TrainError> {
        let batch = sample_batch(dataset, config, step)?;
        step_on_batch(params, dataset, config, &batch)
    };
    run().map_err(|source| TrainError::Step { step, source: Box::new(source) })
}

/// Replace every bias entry with ±U(0.05, 0.3), deterministically per path.
/// Zero-initialized biases leave whole pre-activation channels exactly on
/// the relu kink, where central differences measure the kink's two-sided
/// slope average instead of the derivative the tape computes; displacing
/// the evaluation point makes finite differences meaningful without
/// touching the production init.
fn displace_biases(params: &mut ParamSet<f64>, seed: u64) {
    use rand::{Rng, SeedableRng};
    let paths: Vec<String> =
        params.paths().filter(|p| p.ends_with(".bias")).map(String::from).collect();
    for path in paths {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::tensor::fnv1a(&path) ^ seed);
        for v in params.get_mut(&path).expect("path from iteration").data_mut() {
            *v = rng.gen_range(0.05..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
}

/// Finite-difference audit of ∂L_overall/∂θ over every parameter of the
/// variant's graph, on the deterministic step-0 batch. Runs at f64 (the only
/// precision where 1e-4 agreement is meaningful); biases are displaced off
/// their zero init first — see [`displace_biases`].
pub fn full_pipeline_grad_check(
    dataset: &Dataset,
    config: &TrainConfig,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    config.validate()?;
    if config.precision != Precision::F64 {
        return Err(invalid("gradient checks run at f64"));
    }
    let mut params = init_variant_params::<f64>(config);
    displace_biases(&mut params, seed);
    let batch = sample_batch(dataset, config, 0)?;
    let report = grad_check(
        &|tape, leaves| {
            build_losses(tape, leaves, dataset, config, &batch)
                .map(|p| p.total)
                .map_err(|e| TensorError::invalid("build_losses", e.to_string()))
        },
        &params,
        tolerance,
        seed,
    )?;
    Ok(report)
}

/// One line of train_log.csv.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_a: f64,
    pub loss_t: f64,
    pub seconds: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss_total,loss_a,loss_t,seconds";

impl TrainRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{:.6}", self.step, self.loss_total, self.loss_a, self.loss_t, self.seconds)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

pub fn config_json(config: &TrainConfig) -> Result<serde_json::Value, TrainError> {
    serde_json::to_value(config).map_err(|e| invalid(format!("config serialization: {e}")))
}

/// Run (or resume) training: writes train_log.csv, periodic checkpoints
/// `ckpt_<step>.json`, and a final `ckpt_final.json` under `out_dir`.
pub fn run_training<S: Scalar>(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let (mut params, start_step) = match resume {
        Some(path) => {
            let ckpt = CheckpointData::load(path)?;
            if ckpt.dtype != S::DTYPE {
                return Err(invalid(format!("checkpoint dtype {} ≠ run dtype {}", ckpt.dtype, S::DTYPE)));
            }
            let stored: TrainConfig = serde_json::from_value(ckpt.config.clone())
                .map_err(|e| invalid(format!("checkpoint config: {e}")))?;
            let mut cmp = stored;
            cmp.steps = config.steps;
            if &cmp != config {
                return Err(invalid("resume config differs from checkpoint config (beyond steps)"));
            }
            if ckpt.step > config.steps {
                return Err(invalid(format!("checkpoint at step {} is beyond steps = {}", ckpt.step, config.steps)));
            }
            (ParamSet::from_checkpoint(&ckpt)?, ckpt.step)
        }
        None => (init_variant_params::<S>(config), 0),
    };

    let log_path = out_dir.join("train_log.csv");
    let mut log_file: Box<dyn std::io::Write> = if start_step == 0 {
        let mut f = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
        writeln!(f, "{TRAIN_LOG_HEADER}").map_err(|e| io_err(&log_path, e))?;
        Box::new(f)
    } else {
        Box::new(
            fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(&log_path)
                .map_err(|e| io_err(&log_path, e))?,
        )
    };

    let mut log = TrainLog::default();
    for step in start_step..config.steps {
        let t0 = Instant::now();
        let out = train_step(&mut params, dataset, config, step)?;
        let rec = TrainRecord {
            step,
            loss_total: out.loss_total,
            loss_a: out.loss_a,
            loss_t: out.loss_t,
            seconds: t0.elapsed().as_secs_f64(),
        };
        writeln!(log_file, "{}", rec.csv_line()).map_err(|e| io_err(&log_path, e))?;
        log.records.push(rec);
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
            let path = out_dir.join(format!("ckpt_{done:06}.json"));
            params.to_checkpoint(done, config_json(config)?).save(&path)?;
        }
    }
    log_file.flush().map_err(|e| io_err(&log_path, e))?;
    params
        .to_checkpoint(config.steps, config_json(config)?)
        .save(&out_dir.join("ckpt_final.json"))?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, SceneSpec};
    use tempfile::tempdir;

    fn toy_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            rays_per_patch: 16,
            learning_rate: 2e-3,
            lambda: 1e-3,
            beta: 1e-5,
            samples_per_ray: 4,
            steps: 2,
            seed: 11,
            precision: Precision::F64,
            variant,
            mask_reg: 0.05,
            checkpoint_every: 0,
            field: FieldConfig {
                depth: 2,
                width: 16,
                skip_index: 1,
                pos_levels: 2,
                dir_levels: 1,
                channels: 4,
                feat_hidden: 8,
                pos_scale: 8.0,
            },
            appearance: AppearanceConfig { channels: 4, enc_width: 4, dec_width: 4, pool: 4 },
        }
    }

    fn toy_dataset(dir: &Path) -> Dataset {
        generate_dataset(&SceneSpec::demo(), 3, 1, 2, 1.0, 16, 7, dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = toy_config(Variant::Full);
        c.rays_per_patch = 17;
        assert!(c.validate().is_err());
        let mut c = toy_config(Variant::Full);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = toy_config(Variant::Full);
        c.appearance.channels = 5;
        assert!(c.validate().is_err());
        assert!(toy_config(Variant::Full).validate().is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("fancy").is_err());
        // serde uses the same kebab-case names
        assert_eq!(serde_json::to_string(&Variant::AppearanceOnly).unwrap(), "\"appearance-only\"");
    }

    #[test]
    fn variant_wiring_creates_exactly_the_active_groups() {
        let group_of = |path: &str| -> String {
            format!("{}.", path.split('.').next().unwrap())
        };
        for v in Variant::ALL {
            let ps = init_variant_params::<f64>(&toy_config(v));
            let expected = v.group_prefixes();
            for path in ps.paths() {
                assert!(
                    expected.contains(&group_of(path).as_str()),
                    "{}: unexpected group for {path}",
                    v.as_str()
                );
            }
            for g in expected {
                assert!(
                    ps.paths().any(|p| p.starts_with(g)),
                    "{}: missing group {g}",
                    v.as_str()
                );
            }
        }
        // the reduced variants exclude the unused networks entirely
        let base = init_variant_params::<f64>(&toy_config(Variant::Base));
        assert!(base.paths().all(|p| p.starts_with("field.") || p.starts_with("decoder.")));
        let t = init_variant_params::<f64>(&toy_config(Variant::TransientOnly));
        assert!(t.paths().all(|p| !p.starts_with("app_enc.")
            && !p.starts_with("content_enc.")
            && !p.starts_with("transform.")));
    }

    #[test]
    fn every_variant_trains_one_step_to_finite_loss() {
        let dir = tempdir().unwrap();
        let dataset = toy_dataset(dir.path());
        for v in Variant::ALL {
            let cfg = toy_config(v);
            let mut ps = init_variant_params::<f64>(&cfg);
            let before: Vec<f64> =
                ps.paths().map(|p| ps.get(p).unwrap().data()[0]).collect();
            let out = train_step(&mut ps, &dataset, &cfg, 0).unwrap();
            assert!(out.loss_total.is_finite(), "{}", v.as_str());
            assert!(out.loss_t >= 0.0);
            let after: Vec<f64> = ps.paths().map(|p| ps.get(p).unwrap().data()[0]).collect();
            assert_ne!(before, after, "{}: no parameter moved", v.as_str());
        }
    }

    #[test]
    fn lambda_zero_makes_total_equal_appearance_loss() {
        let dir = tempdir().unwrap();
        let dataset = toy_dataset(dir.path());
        let mut cfg = toy_config(Variant::Full);
        cfg.lambda = 0.0;
        let mut ps = init_variant_params::<f64>(&cfg);
        let out = train_step(&mut ps, &dataset, &cfg, 0).unwrap();
        assert_eq!(out.loss_total, out.loss_a);
        assert!(out.loss_t > 0.0); // still reported, just unweighted
    }

    #[test]
    fn gradient_flows_into_every_group_of_the_full_variant() {
        let dir = tempdir().unwrap();
        let dataset = toy_dataset(dir.path());
        for v in [Variant::Full, Variant::RaypointFusion] {
            let cfg = toy_config(v);
            let ps = init_variant_params::<f64>(&cfg);
            let batch = sample_batch(&dataset, &cfg, 3).unwrap();
            let tape = Tape::new();
            let leaves = ps.leaves(&tape, |_| true);
            let parts = build_losses(&tape, &leaves, &dataset, &cfg, &batch).unwrap();
            tape.backward(&parts.total).unwrap();
            for group in cfg.variant.group_prefixes() {
                let has_signal = leaves.iter().any(|(path, var)| {
                    path.starts_with(group)
                        && var
                            .grad()
                            .map(|g| g.data().iter().any(|&x| x != 0.0))
                            .unwrap_or(false)
                });
                assert!(has_signal, "{}: no gradient reached {group}", v.as_str());
            }
        }
    }

    #[test]
    fn raypoint_fusion_matches_full_variant_shapes() {
        let dir = tempdir().unwrap();
        let dataset = toy_dataset(dir.path());
        let cfg = toy_config(Variant::RaypointFusion);
        let ps = init_variant_params::<f64>(&cfg);
        let batch = sample_batch(&dataset, &cfg, 0).unwrap();
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let parts = build_losses(&tape, &leaves, &dataset, &cfg, &batch).unwrap();
        let p = cfg.patch_size();
        assert_eq!(parts.rendered.shape(), vec![3, p, p]);
        assert!(parts.total.value().item().is_finite());
    }

    #[test]
    fn frozen_batch_overfit_decreases_loss() {
        let dir = tempdir().unwrap();
        let dataset = toy_dataset(dir.path());
        let mut cfg = toy_config(Variant::Full);
        cfg.learning_rate = 2e-3;
        let mut ps = init_variant_params::<f64>(&cfg);
        let batch = sample_batch(&dataset, &cfg, 0).unwrap();
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(step_on_batch(&mut ps, &dataset, &cfg, &batch).unwrap().loss_total);
        }
        let decreases = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(
            decreases * 10 >= (losses.len() - 1) * 9,
            "only {decreases}/{} strict decreases",
            losses.len() - 1
        );
        assert!(
            losses[199] < 0.1 * losses[0],
            "start {} end {}",
            losses[0],
            losses[199]
        );
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let data_dir = tempdir().unwrap();
        let dataset = toy_dataset(data_dir.path());
        let mut cfg = toy_config(Variant::Full);
        cfg.steps = 3;
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let out = tempdir().unwrap();
            let log = run_training::<f64>(&dataset, &cfg, out.path(), None).unwrap();
            let csv = fs::read_to_string(out.path().join("train_log.csv")).unwrap();
            let ckpt = fs::read(out.path().join("ckpt_final.json")).unwrap();
            outputs.push((log, csv, ckpt));
        }
        // losses bit-identical; CSV identical after stripping wall time
        let strip = |csv: &str| -> String {
            csv.lines()
                .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap())
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&outputs[0].1), strip(&outputs[1].1));
        assert_eq!(outputs[0].0.records.len(), 3);
        for (a, b) in outputs[0].0.records.iter().zip(&outputs[1].0.records) {
            assert_eq!(a.loss_total.to_bits(), b.loss_total.to_bits());
        }
        assert_eq!(outputs[0].2, outputs[1].2, "final checkpoints differ");
    }

    #[test]
    fn zero_steps_emits_only_the_init_checkpoint() {
        let data_dir = tempdir().unwrap();
        let dataset = toy_dataset(data_dir.path());
        let mut cfg = toy_config(Variant::Base);
        cfg.steps = 0;
        let out = tempdir().unwrap();
        let log = run_training::<f64>(&dataset, &cfg, out.path(), None).unwrap();
        assert!(log.records.is_empty());
        let csv = fs::read_to_string(out.path().join("train_log.csv")).unwrap();
        assert_eq!(csv.trim(), TRAIN_LOG_HEADER);
        let ckpt = CheckpointData::load(&out.path().join("ckpt_final.json")).unwrap();
        assert_eq!(ckpt.step, 0);
        // bit-identical to a fresh init
        let fresh = init_variant_params::<f64>(&cfg).to_checkpoint(0, config_json(&cfg).unwrap());
        assert_eq!(serde_json::to_string(&ckpt).unwrap(), serde_json::to_string(&fresh).unwrap());
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data_dir = tempdir().unwrap();
        let dataset = toy_dataset(data_dir.path());
        let mut cfg4 = toy_config(Variant::Full);
        cfg4.steps = 4;

        let straight = tempdir().unwrap();
        run_training::<f64>(&dataset, &cfg4, straight.path(), None).unwrap();

        let mut cfg2 = cfg4.clone();
        cfg2.steps = 2;
        let resumed = tempdir().unwrap();
        run_training::<f64>(&dataset, &cfg2, resumed.path(), None).unwrap();
        let mid = resumed.path().join("ckpt_final.json");
        let mid_copy = resumed.path().join("ckpt_mid.json");
        fs::copy(&mid, &mid_copy).unwrap();
        run_training::<f64>(&dataset, &cfg4, resumed.path(), Some(&mid_copy)).unwrap();

        let a = fs::read(straight.path().join("ckpt_final.json")).unwrap();
        let b = fs::read(resumed.path().join("ckpt_final.json")).unwrap();
        assert_eq!(a, b, "resume diverged from the uninterrupted run");
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let data_dir = tempdir().unwrap();
        let dataset = toy_dataset(data_dir.path());
        let mut cfg = toy_config(Variant::Base);
        cfg.steps = 1;
        let out = tempdir().unwrap();
        run_training::<f64>(&dataset, &cfg, out.path(), None).unwrap();
        let ckpt = out.path().join("ckpt_final.json");
        let mut other = cfg.clone();
        other.steps = 2;
        other.learning_rate = 9e-9;
        let err = run_training::<f64>(&dataset, &other, out.path(), Some(&ckpt)).unwrap_err();
        assert!(err.to_string().contains("config"), "{err}");
    }

    #[test]
    fn periodic_checkpoints_are_written() {
        let data_dir = tempdir().unwrap();
        let dataset = toy_dataset(data_dir.path());
        let mut cfg = toy_config(Variant::Base);
        cfg.steps = 4;
        cfg.checkpoint_every = 2;
        let out = tempdir().unwrap();
        run_training::<f64>(&dataset, &cfg, out.path(), None).unwrap();
        assert!(out.path().join("ckpt_000002.json").exists());
        // step 4 is the final step: written as ckpt_final only
        assert!(!out.path().join("ckpt_000004.json").exists());
        assert!(out.path().join("ckpt_final.json").exists());
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let dir = tempdir().unwrap();
        let dataset = toy_dataset(dir.path());
        let cfg = toy_config(Variant::Base);
        let mut ps = init_variant_params::<f64>(&cfg);
        ps.get_mut("decoder.conv1.weight").unwrap().data_mut()[0] = f64::NAN;
        let err = train_step(&mut ps, &dataset, &cfg, 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 7"), "{msg}");
        assert!(msg.contains("non-finite"), "{msg}");
    }

    #[test]
    fn full_pipeline_gradients_pass_finite_differences() {
        let dir = tempdir().unwrap();
        let dataset = toy_dataset(dir.path());
        let cfg = toy_config(Variant::Full);
        let report = full_pipeline_grad_check(&dataset, &cfg, 1e-4, 0).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures());
        for group in cfg.variant.group_prefixes() {
            assert!(
                report.per_param.keys().any(|k| k.starts_with(group)),
                "no parameter of {group} was audited"
            );
        }
        let mut f32_cfg = cfg;
        f32_cfg.precision = Precision::F32;
        assert!(full_pipeline_grad_check(&dataset, &f32_cfg, 1e-4, 0).is_err());
    }

    #[test]
    fn train_log_steps_strictly_increase() {
        let data_dir = tempdir().unwrap();
        let dataset = toy_dataset(data_dir.path());
        let mut cfg = toy_config(Variant::TransientOnly);
        cfg.steps = 3;
        let out = tempdir().unwrap();
        let log = run_training::<f64>(&dataset, &cfg, out.path(), None).unwrap();
        assert!(log.records.windows(2).all(|w| w[1].step > w[0].step));
        let csv = fs::read_to_string(out.path().join("train_log.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRAIN_LOG_HEADER);
        assert_eq!(lines.count(), 3);
    }
}
