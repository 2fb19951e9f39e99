//! Ground-truth rendering, transient compositing, and dataset generation/IO.
//!
//! `gt_render` is the analytic oracle the learnable pipeline is measured
//! against: nearest ray–primitive hit, Lambertian shading under one fixed
//! directional light, then the photometric variant. Occluders are pasted on
//! *after* the variant so the stored mask marks pixels exactly equal to the
//! fill color.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    io_err, AppearanceVariant, CameraModel, CameraRecord, ImageBuf, Occluder, SceneError,
    SceneSpec, TransientSpec, Vec3,
};

/// Unit vector from surfaces toward the fixed directional light
/// (up and slightly toward −z; the world is y-down).
pub fn light_dir() -> Vec3 {
    Vec3::new(-0.4, -0.7, -0.35).normalized()
}

const AMBIENT: f64 = 0.2;
const DIFFUSE: f64 = 0.8;

/// Render the analytic scene through `camera` with `variant` applied.
/// Hits outside [t_near, t_far] are treated as background.
pub fn gt_render(
    scene: &SceneSpec,
    camera: &CameraModel,
    variant: &AppearanceVariant,
) -> Result<ImageBuf, SceneError> {
    scene.validate()?;
    camera.validate()?;
    let l = light_dir();
    let mut img = ImageBuf::new(camera.h, camera.w);
    for r in 0..camera.h {
        let v_frac = (r as f64 + 0.5) / camera.h as f64;
        for c in 0..camera.w {
            let ray = camera.ray_for_pixel(r, c);
            let hit = scene
                .primitives
                .iter()
                .filter_map(|p| {
                    p.intersect(ray.origin, ray.dir, scene.t_near, scene.t_far)
                        .map(|(t, n)| (t, n, p.albedo()))
                })
                .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite t"));
            let (base, is_background) = match hit {
                Some((_, n, albedo)) => {
                    let lambert = AMBIENT + DIFFUSE * n.dot(l).max(0.0);
                    ([albedo[0] * lambert, albedo[1] * lambert, albedo[2] * lambert], false)
                }
                None => (scene.background, true),
            };
            img.set_pixel(r, c, variant.apply(base, is_background, v_frac));
        }
    }
    Ok(img)
}

/// Paste the occluders over `image`; returns the composited image and the
/// 0/1 mask marking exactly the replaced pixels. The seed is part of the
/// interface for future stochastic occluder styles; the current shapes are
/// fully specified, so it is unused.
pub fn composite_transients(
    image: &ImageBuf,
    spec: &TransientSpec,
    _seed: u64,
) -> (ImageBuf, Vec<u8>) {
    let (h, w) = (image.h, image.w);
    let mut out = image.clone();
    let mut mask = vec![0u8; h * w];
    for occ in &spec.occluders {
        match *occ {
            Occluder::Disk { row, col, radius, fill } => {
                for r in 0..h {
                    for c in 0..w {
                        let dr = r as f64 + 0.5 - row;
                        let dc = c as f64 + 0.5 - col;
                        if dr * dr + dc * dc <= radius * radius {
                            out.set_pixel(r, c, fill);
                            mask[r * w + c] = 1;
                        }
                    }
                }
            }
            Occluder::Rect { r0, c0, r1, c1, fill } => {
                for r in r0..r1.min(h) {
                    for c in c0..c1.min(w) {
                        out.set_pixel(r, c, fill);
                        mask[r * w + c] = 1;
                    }
                }
            }
        }
    }
    (out, mask)
}

// --------------------------------------------------------------- generator

fn sample_variant(id: usize, rng: &mut ChaCha8Rng) -> AppearanceVariant {
    AppearanceVariant {
        id,
        gain: [(); 3].map(|_| rng.gen_range(0.4..1.6)),
        tint: [(); 3].map(|_| rng.gen_range(-0.2..0.2)),
        gamma: rng.gen_range(0.7..1.4),
        sky_strength: rng.gen_range(-0.3..0.3),
    }
}

fn sample_transients(h: usize, w: usize, rng: &mut ChaCha8Rng) -> TransientSpec {
    let count = rng.gen_range(1..=2usize);
    let dim = h.min(w) as f64;
    let occluders = (0..count)
        .map(|_| {
            let fill = [(); 3].map(|_| rng.gen_range(0.05..0.95));
            if rng.gen_bool(0.5) {
                Occluder::Disk {
                    row: rng.gen_range(0.15 * h as f64..0.85 * h as f64),
                    col: rng.gen_range(0.15 * w as f64..0.85 * w as f64),
                    radius: rng.gen_range(0.08 * dim..0.18 * dim),
                    fill,
                }
            } else {
                let rh = rng.gen_range((0.15 * h as f64) as usize..(0.3 * h as f64) as usize + 1);
                let rw = rng.gen_range((0.15 * w as f64) as usize..(0.3 * w as f64) as usize + 1);
                let r0 = rng.gen_range(0..h - rh);
                let c0 = rng.gen_range(0..w - rw);
                Occluder::Rect { r0, c0, r1: r0 + rh, c1: c0 + rw, fill }
            }
        })
        .collect();
    TransientSpec { occluders }
}

/// Deterministically generate a photo collection under `out_dir`:
/// `cameras.json`, `variants.json`, `scene.json`, `images/<id>.png`, and
/// train-split `masks/<id>.png` (255 = transient). Cameras sit on a sphere
/// cap above the scene looking at the origin; test views are occluder-free.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    scene: &SceneSpec,
    n_train: usize,
    n_test: usize,
    n_variants: usize,
    occluder_rate: f64,
    image_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<(), SceneError> {
    scene.validate()?;
    if n_variants == 0 {
        return Err(SceneError::Invalid("need at least one appearance variant".into()));
    }
    if !(0.0..=1.0).contains(&occluder_rate) {
        return Err(SceneError::Invalid(format!("occluder_rate {occluder_rate} outside [0,1]")));
    }
    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&img_dir).map_err(|e| io_err(&img_dir, e))?;
    fs::create_dir_all(&mask_dir).map_err(|e| io_err(&mask_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants: Vec<AppearanceVariant> = (0..n_variants)
        .map(|id| if id == 0 { AppearanceVariant::identity(0) } else { sample_variant(id, &mut rng) })
        .collect();

    let (h, w) = (image_size, image_size);
    let focal = 70.0 * w as f64 / 64.0;
    let orbit_radius = 0.5 * (scene.t_near + scene.t_far);
    let mut records = Vec::new();
    for i in 0..n_train + n_test {
        let split = if i < n_train { "train" } else { "test" };
        let idx = if i < n_train { i } else { i - n_train };
        let id = format!("{split}_{idx:03}");
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let phi = rng.gen_range(0.35..1.0f64); // elevation above the horizon
        let eye = Vec3::new(
            orbit_radius * phi.cos() * theta.cos(),
            -orbit_radius * phi.sin(),
            orbit_radius * phi.cos() * theta.sin(),
        );
        let cam = CameraModel::look_at(eye, Vec3::ZERO, focal, focal, h, w);
        let variant_id = rng.gen_range(0..n_variants);
        let with_occluders = split == "train" && rng.gen_bool(occluder_rate);
        let transients = if with_occluders {
            sample_transients(h, w, &mut rng)
        } else {
            TransientSpec::default()
        };

        let clean = gt_render(scene, &cam, &variants[variant_id])?;
        let (img, mask) = composite_transients(&clean, &transients, seed);
        write_rgb_png(&img_dir.join(format!("{id}.png")), &img)?;
        if split == "train" {
            write_mask_png(&mask_dir.join(format!("{id}.png")), &mask, h, w)?;
        }
        records.push(CameraRecord {
            id,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            h,
            w,
            pose: cam.pose.to_vec(),
            split: split.to_string(),
            variant_id,
        });
    }

    write_json(&out_dir.join("cameras.json"), &records)?;
    write_json(&out_dir.join("variants.json"), &variants)?;
    write_json(&out_dir.join("scene.json"), scene)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), SceneError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| SceneError::Json { path: path.display().to_string(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SceneError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| SceneError::Json { path: path.display().to_string(), source: e })
}

// ---------------------------------------------------------------- png io

pub fn write_rgb_png(path: &Path, img: &ImageBuf) -> Result<(), SceneError> {
    let (h, w) = (img.h, img.w);
    let mut bytes = vec![0u8; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = img.at(ch, r, c).clamp(0.0, 1.0);
                bytes[(r * w + c) * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| SceneError::Image { path: path.display().to_string(), source: e })
}

pub fn read_rgb_png(path: &Path) -> Result<ImageBuf, SceneError> {
    let dynimg = image::open(path)
        .map_err(|e| SceneError::Image { path: path.display().to_string(), source: e })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut img = ImageBuf::new(h, w);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                img.data[(ch * h + r) * w + c] = raw[(r * w + c) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Ok(img)
}

pub fn write_mask_png(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<(), SceneError> {
    assert_eq!(mask.len(), h * w);
    let bytes: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ExtendedColorType::L8)
        .map_err(|e| SceneError::Image { path: path.display().to_string(), source: e })
}

pub fn read_mask_png(path: &Path) -> Result<Vec<u8>, SceneError> {
    let dynimg = image::open(path)
        .map_err(|e| SceneError::Image { path: path.display().to_string(), source: e })?;
    Ok(dynimg.to_luma8().into_raw().iter().map(|&b| u8::from(b >= 128)).collect())
}

// ----------------------------------------------------------------- loading

/// One camera + its stored image (and mask, train split only).
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub record: CameraRecord,
    pub camera: CameraModel,
    pub image: ImageBuf,
    pub mask: Option<Vec<u8>>,
}

impl DatasetView {
    pub fn is_train(&self) -> bool {
        self.record.split == "train"
    }
}

/// A generated photo collection loaded back into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub scene: SceneSpec,
    pub variants: Vec<AppearanceVariant>,
    pub views: Vec<DatasetView>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset, SceneError> {
        let scene: SceneSpec = read_json(&dir.join("scene.json"))?;
        let variants: Vec<AppearanceVariant> = read_json(&dir.join("variants.json"))?;
        let records: Vec<CameraRecord> = read_json(&dir.join("cameras.json"))?;
        let mut views = Vec::with_capacity(records.len());
        for record in records {
            let camera = record.to_model()?;
            let image = read_rgb_png(&dir.join("images").join(format!("{}.png", record.id)))?;
            let mask = if record.split == "train" {
                Some(read_mask_png(&dir.join("masks").join(format!("{}.png", record.id)))?)
            } else {
                None
            };
            views.push(DatasetView { record, camera, image, mask });
        }
        Ok(Dataset { root: dir.to_path_buf(), scene, variants, views })
    }

    pub fn train_views(&self) -> impl Iterator<Item = &DatasetView> {
        self.views.iter().filter(|v| v.is_train())
    }

    pub fn test_views(&self) -> impl Iterator<Item = &DatasetView> {
        self.views.iter().filter(|v| !v.is_train())
    }

    pub fn view(&self, id: &str) -> Option<&DatasetView> {
        self.views.iter().find(|v| v.record.id == id)
    }
}
