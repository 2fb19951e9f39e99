//! Full-image inference on a trained checkpoint.
//!
//! Rendering runs in two stages. The *field pass* marches every pixel's ray
//! (deterministic midpoint samples, no jitter) through the field MLP in
//! row-chunk tiles so the tape for a 64×64 image never holds more than one
//! tile's activations; the per-tile results are concatenated in row order
//! before anything consumes them, so tiling is invisible in the output. The
//! *appearance stage* then injects a reference image's pooled statistics and
//! decodes — cheap next to the field pass, which is what makes amortized
//! multi-appearance rendering worthwhile: [`Renderer`] runs the field pass
//! once and replays only the appearance stage per reference.
//!
//! For raypoint-fusion checkpoints the transform acts on per-point features
//! *before* volume rendering, so the cached stage keeps the (C, n, H·W)
//! point features instead of the rendered grid; the covariance then spans
//! the whole image's points, exactly as a single untiled pass would.

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::appearance::{decode, encode_appearance, learned_transform, APP_ENC};
use crate::field::{field_points, volume_render};
use crate::scene::{CameraModel, ImageBuf, Ray, SceneSpec};
use crate::tensor::{CheckpointData, CheckpointError, ParamSet, Scalar, Tape, Tensor, TensorError};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("render: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn invalid(msg: impl Into<String>) -> RenderError {
    RenderError::Invalid(msg.into())
}

// ----------------------------------------------------------------- model

/// A checkpoint loaded for inference: parameters plus the configuration they
/// were trained under (the config decides variant wiring and architecture).
#[derive(Clone)]
pub struct Model<S: Scalar> {
    pub params: ParamSet<S>,
    pub config: TrainConfig,
    pub step: u64,
}

impl<S: Scalar> Model<S> {
    pub fn from_checkpoint(ckpt: &CheckpointData) -> Result<Self, RenderError> {
        if ckpt.dtype != S::DTYPE {
            return Err(invalid(format!(
                "checkpoint stores {} parameters, not {}",
                ckpt.dtype,
                S::DTYPE
            )));
        }
        let config: TrainConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| invalid(format!("checkpoint config does not parse: {e}")))?;
        config
            .validate()
            .map_err(|e| invalid(format!("checkpoint config invalid: {e}")))?;
        let params = ParamSet::from_checkpoint(ckpt)?;
        Ok(Model { params, config, step: ckpt.step })
    }

    pub fn load(path: &Path) -> Result<Self, RenderError> {
        Self::from_checkpoint(&CheckpointData::load(path)?)
    }
}

// --------------------------------------------------------------- options

/// Rows per field-pass tile. Small enough to cap tape memory at full image
/// width, large enough that the per-tile GEMMs stay fat.
pub const DEFAULT_TILE_ROWS: usize = 4;

/// Ray-march bounds (from the scene the checkpoint was trained on) and the
/// tile height of the field pass.
#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub t_near: f64,
    pub t_far: f64,
    pub tile_rows: usize,
}

impl RenderOptions {
    pub fn new(t_near: f64, t_far: f64) -> Self {
        RenderOptions { t_near, t_far, tile_rows: DEFAULT_TILE_ROWS }
    }

    pub fn for_scene(scene: &SceneSpec) -> Self {
        Self::new(scene.t_near, scene.t_far)
    }
}

// -------------------------------------------------------------- renderer

/// The reference-independent intermediate of one camera's render.
enum Stage<S: Scalar> {
    /// Volume-rendered (C, H, W) cross-ray grid; transform and decode see it
    /// whole.
    Grid(Tensor<S>),
    /// Raypoint-fusion: (C, n, H·W) per-point features with (n, H·W)
    /// densities, spacings and depths, kept raw because the transform runs
    /// before volume rendering.
    Points {
        features: Tensor<S>,
        density: Tensor<S>,
        deltas: Tensor<S>,
        t_values: Tensor<S>,
    },
}

/// One camera's field pass, cached for reuse across appearance references.
pub struct Renderer<'m, S: Scalar> {
    model: &'m Model<S>,
    camera: CameraModel,
    stage: Stage<S>,
}

impl<'m, S: Scalar> Renderer<'m, S> {
    /// Runs the tiled field pass for `camera`. This is the expensive part of
    /// a render; everything per-reference afterwards is convolutions on
    /// small grids.
    pub fn new(
        model: &'m Model<S>,
        camera: CameraModel,
        opts: RenderOptions,
    ) -> Result<Self, RenderError> {
        if opts.tile_rows == 0 {
            return Err(invalid("tile_rows must be ≥ 1"));
        }
        camera.validate().map_err(|e| invalid(e.to_string()))?;
        let (h, w) = (camera.h, camera.w);
        let c = model.config.field.channels;
        let n = model.config.samples_per_ray;

        // Accumulators for whichever stage this variant caches; the unused
        // set stays a scalar placeholder.
        let raypoint = model.config.variant.raypoint();
        let z = Tensor::<S>::zeros;
        let (mut grid, mut features, mut density, mut deltas, mut t_values) = if raypoint {
            (z(&[1]), z(&[c, n, h * w]), z(&[n, h * w]), z(&[n, h * w]), z(&[n, h * w]))
        } else {
            (z(&[c, h, w]), z(&[1]), z(&[1]), z(&[1]), z(&[1]))
        };

        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + opts.tile_rows).min(h);
            let mut rays: Vec<Ray> = Vec::with_capacity((r1 - r0) * w);
            for r in r0..r1 {
                for col in 0..w {
                    rays.push(camera.ray_for_pixel(r, col));
                }
            }
            let tape = Tape::new();
            let leaves = model.params.leaves(&tape, |_| false);
            let pts = field_points(
                &tape,
                &leaves,
                &model.config.field,
                &rays,
                n,
                opts.t_near,
                opts.t_far,
                None,
            )?;
            let col0 = r0 * w;
            if raypoint {
                scatter_cols(&mut features, h * w, &pts.features.value(), rays.len(), col0);
                scatter_cols(&mut density, h * w, &pts.density.value(), rays.len(), col0);
                scatter_cols(&mut deltas, h * w, &pts.deltas, rays.len(), col0);
                scatter_cols(&mut t_values, h * w, &pts.t_values, rays.len(), col0);
            } else {
                let vr = volume_render(&tape, &pts.features, &pts.density, &pts.deltas, &pts.t_values)?;
                scatter_cols(&mut grid, h * w, &vr.rendered.value(), rays.len(), col0);
            }
            r0 = r1;
        }

        let stage = if raypoint {
            Stage::Points { features, density, deltas, t_values }
        } else {
            Stage::Grid(grid)
        };
        Ok(Renderer { model, camera, stage })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    fn require_appearance(&self) -> Result<(), RenderError> {
        if self.model.config.variant.uses_appearance() {
            Ok(())
        } else {
            Err(invalid(format!(
                "a {} checkpoint has no appearance pathway and cannot take a reference image; \
                 use render_plain",
                self.model.config.variant.as_str()
            )))
        }
    }

    /// F^a: the checkpoint's pooled appearance embedding of a reference image
    /// (any size ≥ the pool).
    pub fn embed(&self, reference: &ImageBuf) -> Result<Tensor<S>, RenderError> {
        self.require_appearance()?;
        let tape = Tape::new();
        let leaves = self.model.params.leaves(&tape, |_| false);
        let img = tape.constant(image_to_tensor(reference)?);
        Ok(encode_appearance(&leaves, APP_ENC, &self.model.config.appearance, &img)?.value())
    }

    /// Full render conditioned on a reference image.
    pub fn render_with(&self, reference: &ImageBuf) -> Result<ImageBuf, RenderError> {
        let f_a = self.embed(reference)?;
        self.render_with_embedding(&f_a)
    }

    /// Full render conditioned on an already-computed (or interpolated)
    /// appearance embedding.
    pub fn render_with_embedding(&self, f_a: &Tensor<S>) -> Result<ImageBuf, RenderError> {
        self.require_appearance()?;
        let cfg = &self.model.config.appearance;
        let (h, w) = (self.camera.h, self.camera.w);
        let tape = Tape::new();
        let leaves = self.model.params.leaves(&tape, |_| false);
        let app = tape.constant(f_a.clone());
        let img = match &self.stage {
            Stage::Grid(grid) => {
                let grid = tape.constant(grid.clone());
                decode(&leaves, &learned_transform(&leaves, cfg, &grid, &app)?)?
            }
            Stage::Points { features, density, deltas, t_values } => {
                let feats = tape.constant(features.clone());
                let dens = tape.constant(density.clone());
                let moved = learned_transform(&leaves, cfg, &feats, &app)?;
                let vr = volume_render(&tape, &moved, &dens, deltas, t_values)?;
                let grid = vr.rendered.reshape(&[cfg.channels, h, w])?;
                decode(&leaves, &grid)?
            }
        };
        tensor_to_image(&img.value())
    }

    /// D(F^cr) with no appearance injection — the reconstruction pathway all
    /// variants train, and the only render a base or transient-only
    /// checkpoint supports.
    pub fn render_plain(&self) -> Result<ImageBuf, RenderError> {
        let cfg = &self.model.config.appearance;
        let (h, w) = (self.camera.h, self.camera.w);
        let tape = Tape::new();
        let leaves = self.model.params.leaves(&tape, |_| false);
        let img = match &self.stage {
            Stage::Grid(grid) => decode(&leaves, &tape.constant(grid.clone()))?,
            Stage::Points { features, density, deltas, t_values } => {
                let feats = tape.constant(features.clone());
                let dens = tape.constant(density.clone());
                let vr = volume_render(&tape, &feats, &dens, deltas, t_values)?;
                decode(&leaves, &vr.rendered.reshape(&[cfg.channels, h, w])?)?
            }
        };
        tensor_to_image(&img.value())
    }
}

/// Copy `src`, viewed as (R, src_cols) row-major, into the column window
/// starting at `col0` of `dst` viewed as (R, dst_cols).
fn scatter_cols<S: Scalar>(
    dst: &mut Tensor<S>,
    dst_cols: usize,
    src: &Tensor<S>,
    src_cols: usize,
    col0: usize,
) {
    let rows = src.numel() / src_cols;
    for r in 0..rows {
        let d = r * dst_cols + col0;
        dst.data_mut()[d..d + src_cols]
            .copy_from_slice(&src.data()[r * src_cols..(r + 1) * src_cols]);
    }
}

// ------------------------------------------------------------ operations

/// One-off render of `camera` conditioned on `reference`.
pub fn render_novel_view<S: Scalar>(
    model: &Model<S>,
    camera: &CameraModel,
    reference: &ImageBuf,
    opts: RenderOptions,
) -> Result<ImageBuf, RenderError> {
    Renderer::new(model, camera.clone(), opts)?.render_with(reference)
}

/// Wall-clock seconds of an amortized multi-appearance render: the shared
/// field pass and each per-reference appearance stage.
#[derive(Debug, Clone)]
pub struct MultiRenderReport {
    pub seconds_shared: f64,
    pub seconds_per_image: Vec<f64>,
}

impl MultiRenderReport {
    pub fn seconds_total(&self) -> f64 {
        self.seconds_shared + self.seconds_per_image.iter().sum::<f64>()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("stage,seconds\n");
        out.push_str(&format!("field_pass,{:.6}\n", self.seconds_shared));
        for (i, s) in self.seconds_per_image.iter().enumerate() {
            out.push_str(&format!("image_{i},{s:.6}\n"));
        }
        out.push_str(&format!("total,{:.6}\n", self.seconds_total()));
        out
    }
}

/// Renders `camera` under k reference appearances while running the field
/// pass only once. Outputs are bit-identical to k independent
/// [`render_novel_view`] calls.
pub fn render_multi_appearance<S: Scalar>(
    model: &Model<S>,
    camera: &CameraModel,
    references: &[ImageBuf],
    opts: RenderOptions,
) -> Result<(Vec<ImageBuf>, MultiRenderReport), RenderError> {
    if references.is_empty() {
        return Err(invalid("render_multi_appearance needs at least one reference image"));
    }
    let t0 = Instant::now();
    let renderer = Renderer::new(model, camera.clone(), opts)?;
    let seconds_shared = t0.elapsed().as_secs_f64();
    let mut images = Vec::with_capacity(references.len());
    let mut seconds_per_image = Vec::with_capacity(references.len());
    for reference in references {
        let t = Instant::now();
        images.push(renderer.render_with(reference)?);
        seconds_per_image.push(t.elapsed().as_secs_f64());
    }
    Ok((images, MultiRenderReport { seconds_shared, seconds_per_image }))
}

/// Renders the sequence F^a(α) = (1−α)·F^a(ref_a) + α·F^a(ref_b) over one
/// cached field pass. `alphas` must be ascending and within [0, 1]; the
/// endpoints α = 0 and α = 1 select an operand embedding directly, so those
/// frames are bit-identical to direct renders with the respective reference.
pub fn interpolate_appearance<S: Scalar>(
    model: &Model<S>,
    camera: &CameraModel,
    ref_a: &ImageBuf,
    ref_b: &ImageBuf,
    alphas: &[f64],
    opts: RenderOptions,
) -> Result<Vec<ImageBuf>, RenderError> {
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(invalid(format!("alphas must lie in [0, 1], got {alphas:?}")));
    }
    if alphas.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid(format!("alphas must be ascending, got {alphas:?}")));
    }
    let renderer = Renderer::new(model, camera.clone(), opts)?;
    let f_a = renderer.embed(ref_a)?;
    let f_b = renderer.embed(ref_b)?;
    alphas
        .iter()
        .map(|&alpha| renderer.render_with_embedding(&lerp_embedding(&f_a, &f_b, alpha)))
        .collect()
}

fn lerp_embedding<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, alpha: f64) -> Tensor<S> {
    if alpha == 0.0 {
        return a.clone();
    }
    if alpha == 1.0 {
        return b.clone();
    }
    let (wa, wb) = (S::from_f64(1.0 - alpha), S::from_f64(alpha));
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = o.mulv(wa).addv(bv.mulv(wb));
    }
    out
}

// ----------------------------------------------------------- conversions

/// (3, H, W) image tensor of an [`ImageBuf`] (their layouts coincide).
pub fn image_to_tensor<S: Scalar>(img: &ImageBuf) -> Result<Tensor<S>, TensorError> {
    Tensor::from_f64_slice(&[3, img.h, img.w], &img.data)
}

/// [`ImageBuf`] of a (3, H, W) tensor with values in [0, 1].
pub fn tensor_to_image<S: Scalar>(t: &Tensor<S>) -> Result<ImageBuf, RenderError> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(invalid(format!("expected a (3, H, W) image tensor, got {shape:?}")));
    }
    Ok(ImageBuf {
        h: shape[1],
        w: shape[2],
        data: t.data().iter().map(|x| x.to_f64()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::AppearanceConfig;
    use crate::field::FieldConfig;
    use crate::scene::{write_rgb_png, Vec3};
    use crate::trainer::{config_json, init_variant_params, Variant};
    use tempfile::tempdir;

    fn toy_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            rays_per_patch: 16,
            samples_per_ray: 4,
            seed: 11,
            variant,
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
            ..TrainConfig::default()
        }
    }

    fn toy_model(variant: Variant) -> Model<f64> {
        let config = toy_config(variant);
        Model { params: init_variant_params(&config), config, step: 0 }
    }

    /// 10×12 camera slightly off the demo scene's axis.
    fn toy_camera() -> CameraModel {
        CameraModel::look_at(Vec3::new(0.8, -2.0, -5.0), Vec3::new(0.0, 0.0, 0.0), 12.0, 12.0, 10, 12)
    }

    fn opts() -> RenderOptions {
        RenderOptions::for_scene(&SceneSpec::demo())
    }

    fn ref_image(h: usize, w: usize, phase: f64) -> ImageBuf {
        let mut img = ImageBuf::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = (c as f64 / w as f64, r as f64 / h as f64);
                img.set_pixel(
                    r,
                    c,
                    [
                        0.5 + 0.4 * (6.0 * x + phase).sin(),
                        0.3 + 0.3 * y,
                        0.5 + 0.4 * (4.0 * (x + y) - phase).cos(),
                    ],
                );
            }
        }
        img
    }

    fn assert_same_image(a: &ImageBuf, b: &ImageBuf, what: &str) {
        assert_eq!((a.h, a.w), (b.h, b.w), "{what}: dimensions differ");
        for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
            assert_eq!(x.to_bits(), y.to_bits(), "{what}: pixel scalar {i}: {x} vs {y}");
        }
    }

    #[test]
    fn output_dimensions_match_the_camera() {
        let model = toy_model(Variant::Full);
        let img = render_novel_view(&model, &toy_camera(), &ref_image(16, 16, 0.0), opts()).unwrap();
        assert_eq!((img.h, img.w), (10, 12));
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tiling_is_invisible_in_the_output() {
        let model = toy_model(Variant::Full);
        let reference = ref_image(16, 16, 0.3);
        let mut o = opts();
        o.tile_rows = 10; // single tile
        let whole = render_novel_view(&model, &toy_camera(), &reference, o).unwrap();
        for tile_rows in [1, 3, 4] {
            o.tile_rows = tile_rows;
            let tiled = render_novel_view(&model, &toy_camera(), &reference, o).unwrap();
            assert_same_image(&whole, &tiled, &format!("tile_rows={tile_rows}"));
        }
    }

    #[test]
    fn repeated_renders_and_their_pngs_are_identical() {
        let model = toy_model(Variant::Full);
        let reference = ref_image(12, 12, 1.1);
        let a = render_novel_view(&model, &toy_camera(), &reference, opts()).unwrap();
        let b = render_novel_view(&model, &toy_camera(), &reference, opts()).unwrap();
        assert_same_image(&a, &b, "repeated render");
        let dir = tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.png"), dir.path().join("b.png"));
        write_rgb_png(&pa, &a).unwrap();
        write_rgb_png(&pb, &b).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "png bytes");
    }

    #[test]
    fn checkpoints_without_an_appearance_pathway_refuse_references() {
        for variant in [Variant::Base, Variant::TransientOnly] {
            let model = toy_model(variant);
            let err = render_novel_view(&model, &toy_camera(), &ref_image(8, 8, 0.0), opts())
                .unwrap_err()
                .to_string();
            assert!(err.contains("appearance pathway"), "{variant:?}: {err}");
            // reconstruction rendering still works
            let img = Renderer::new(&model, toy_camera(), opts()).unwrap().render_plain().unwrap();
            assert_eq!((img.h, img.w), (10, 12));
        }
    }

    #[test]
    fn multi_appearance_caching_is_output_transparent() {
        let model = toy_model(Variant::Full);
        let refs: Vec<ImageBuf> = (0..3).map(|i| ref_image(14, 10, i as f64)).collect();
        let (images, report) = render_multi_appearance(&model, &toy_camera(), &refs, opts()).unwrap();
        assert_eq!(images.len(), 3);
        assert_eq!(report.seconds_per_image.len(), 3);
        for (img, reference) in images.iter().zip(&refs) {
            let direct = render_novel_view(&model, &toy_camera(), reference, opts()).unwrap();
            assert_same_image(img, &direct, "cached vs direct");
        }
        let csv = report.csv();
        assert!(csv.starts_with("stage,seconds\nfield_pass,"));
        assert_eq!(csv.lines().count(), 1 + 1 + 3 + 1, "header, shared, 3 images, total");

        let (single, _) = render_multi_appearance(&model, &toy_camera(), &refs[..1], opts()).unwrap();
        assert_same_image(&single[0], &render_novel_view(&model, &toy_camera(), &refs[0], opts()).unwrap(), "k=1");
        assert!(render_multi_appearance(&model, &toy_camera(), &[], opts()).is_err());
    }

    #[test]
    fn interpolation_endpoints_are_bitwise_direct_renders() {
        let model = toy_model(Variant::Full);
        let (ra, rb) = (ref_image(12, 12, 0.0), ref_image(12, 12, 2.0));
        let frames =
            interpolate_appearance(&model, &toy_camera(), &ra, &rb, &[0.0, 0.4, 1.0], opts()).unwrap();
        assert_eq!(frames.len(), 3);
        let direct_a = render_novel_view(&model, &toy_camera(), &ra, opts()).unwrap();
        let direct_b = render_novel_view(&model, &toy_camera(), &rb, opts()).unwrap();
        assert_same_image(&frames[0], &direct_a, "α = 0");
        assert_same_image(&frames[2], &direct_b, "α = 1");

        let same = interpolate_appearance(&model, &toy_camera(), &ra, &ra, &[0.0, 0.5, 1.0], opts()).unwrap();
        assert_same_image(&same[0], &same[1], "identical references, α 0 vs 0.5");
        assert_same_image(&same[1], &same[2], "identical references, α 0.5 vs 1");

        assert!(interpolate_appearance(&model, &toy_camera(), &ra, &rb, &[0.7, 0.2], opts()).is_err());
        assert!(interpolate_appearance(&model, &toy_camera(), &ra, &rb, &[-0.1], opts()).is_err());
        assert!(interpolate_appearance(&model, &toy_camera(), &ra, &rb, &[0.5, 1.2], opts()).is_err());
    }

    #[test]
    fn raypoint_fusion_renders_with_transparent_tiling() {
        let model = toy_model(Variant::RaypointFusion);
        let reference = ref_image(10, 10, 0.7);
        let mut o = opts();
        o.tile_rows = 10;
        let whole = render_novel_view(&model, &toy_camera(), &reference, o).unwrap();
        o.tile_rows = 2;
        let tiled = render_novel_view(&model, &toy_camera(), &reference, o).unwrap();
        assert_same_image(&whole, &tiled, "raypoint tiling");
        assert_eq!((whole.h, whole.w), (10, 12));
        let plain = Renderer::new(&model, toy_camera(), opts()).unwrap().render_plain().unwrap();
        assert_eq!((plain.h, plain.w), (10, 12));
    }

    #[test]
    fn model_round_trips_through_a_checkpoint_file() {
        let config = toy_config(Variant::Full);
        let params = init_variant_params::<f64>(&config);
        let ckpt = params.to_checkpoint(42, config_json(&config).unwrap());
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();

        let model = Model::<f64>::load(&path).unwrap();
        assert_eq!(model.config, config);
        assert_eq!(model.step, 42);
        assert_eq!(model.params.len(), params.len());

        let err = match Model::<f32>::load(&path) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("loading an f64 checkpoint as f32 must fail"),
        };
        assert!(err.contains("f64"), "{err}");
    }

    #[test]
    fn reference_images_of_any_size_down_to_the_pool_work() {
        let model = toy_model(Variant::Full);
        // pool is 4: a 5×7 reference is fine, 3×3 is too small
        assert!(render_novel_view(&model, &toy_camera(), &ref_image(5, 7, 0.2), opts()).is_ok());
        assert!(render_novel_view(&model, &toy_camera(), &ref_image(3, 3, 0.2), opts()).is_err());
    }
}
