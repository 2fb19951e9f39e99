//! Image-quality metrics and checkpoint evaluation on a generated dataset.
//!
//! PSNR uses peak 1.0 and caps at 99 dB so identical images stay finite.
//! SSIM runs on luma (0.299 R + 0.587 G + 0.114 B) with uniform 8×8 windows
//! at stride 1 — fully specified, no Gaussian kernel. Evaluation renders
//! every test view conditioned on its own ground-truth image (only the
//! pooled appearance statistics flow in, so reconstruction is not given
//! away) and, when the checkpoint carries a segmenter and the dataset has
//! masks, scores thresholded transient maps by intersection-over-union.

use thiserror::Error;

use crate::render::{Model, RenderError, RenderOptions, Renderer};
use crate::scene::{Dataset, ImageBuf};
use crate::tensor::{Scalar, TensorError};
use crate::transient::segment_transient;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics: {0}")]
    Invalid(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn invalid(msg: impl Into<String>) -> MetricsError {
    MetricsError::Invalid(msg.into())
}

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 1e-4; // (0.01·peak)²
const SSIM_C2: f64 = 9e-4; // (0.03·peak)²

fn check_pair(op: &str, a: &ImageBuf, b: &ImageBuf) -> Result<(), MetricsError> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(invalid(format!("{op}: image shapes {}×{} vs {}×{}", a.h, a.w, b.h, b.w)));
    }
    if a.data.iter().chain(&b.data).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid(format!("{op}: image values must lie in [0, 1]")));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all three channels: 10·log10(1/MSE)
/// with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64, MetricsError> {
    check_pair("psnr", a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn luma(img: &ImageBuf) -> Vec<f64> {
    let hw = img.h * img.w;
    (0..hw)
        .map(|i| 0.299 * img.data[i] + 0.587 * img.data[hw + i] + 0.114 * img.data[2 * hw + i])
        .collect()
}

/// Mean structural similarity over every 8×8 window (stride 1) of the luma
/// images; in [−1, 1], exactly 1 for identical inputs.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64, MetricsError> {
    check_pair("ssim", a, b)?;
    let (h, w) = (a.h, a.w);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!(
            "ssim: image {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let (ya, yb) = (luma(a), luma(b));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=(h - SSIM_WINDOW) {
        for c0 in 0..=(w - SSIM_WINDOW) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let (x, y) = (ya[r * w + c], yb[r * w + c]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (mu_a, mu_b) = (sa / n, sb / n);
            let va = saa / n - mu_a * mu_a;
            let vb = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            total += (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Intersection-over-union of two binary masks. Two empty masks agree
/// perfectly, so an empty union scores 1.
pub fn mask_iou(pred: &[bool], truth: &[bool]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(invalid(format!("mask_iou: lengths {} vs {}", pred.len(), truth.len())));
    }
    let inter = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count();
    let union = pred.iter().zip(truth).filter(|(p, t)| **p || **t).count();
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// The segmenter's transient map of one image, as H·W row-major values in
/// [0, 1]. Requires a checkpoint whose variant trains the segmenter.
pub fn predicted_map<S: Scalar>(
    model: &Model<S>,
    image: &ImageBuf,
) -> Result<Vec<f64>, MetricsError> {
    if !model.config.variant.uses_transient() {
        return Err(invalid(format!(
            "a {} checkpoint has no segmenter",
            model.config.variant.as_str()
        )));
    }
    let tape = crate::tensor::Tape::new();
    let leaves = model.params.leaves(&tape, |_| false);
    let img = tape.constant(crate::render::image_to_tensor(image)?);
    let map = segment_transient(&leaves, &img)?;
    Ok(map.value().data().iter().map(|x| x.to_f64()).collect())
}

/// `predicted_map` thresholded at 0.5.
pub fn predicted_mask<S: Scalar>(
    model: &Model<S>,
    image: &ImageBuf,
) -> Result<Vec<bool>, MetricsError> {
    Ok(predicted_map(model, image)?.into_iter().map(|v| v > 0.5).collect())
}

// -------------------------------------------------------------- reporting

#[derive(Debug, Clone)]
pub struct ViewMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct IouReport {
    /// (view id, IoU) per train view, in dataset order.
    pub per_view: Vec<(String, f64)>,
    pub mean: f64,
}

/// Evaluation results: per-test-view quality, aggregates, and (for
/// checkpoints with a segmenter) transient-mask IoU on the train split.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub iou: Option<IouReport>,
}

impl MetricsReport {
    /// One table: test rows carry psnr/ssim, train rows (present only when
    /// IoU was computed, which also adds the column) carry IoU.
    pub fn csv(&self) -> String {
        let header = if self.iou.is_some() { "view,psnr,ssim,iou\n" } else { "view,psnr,ssim\n" };
        let mut out = String::from(header);
        let tail = if self.iou.is_some() { "," } else { "" };
        for v in &self.views {
            out.push_str(&format!("{},{:.6},{:.6}{tail}\n", v.id, v.psnr, v.ssim));
        }
        if let Some(iou) = &self.iou {
            for (id, val) in &iou.per_view {
                out.push_str(&format!("{id},,,{val:.6}\n"));
            }
            out.push_str(&format!("mean,{:.6},{:.6},{:.6}\n", self.mean_psnr, self.mean_ssim, iou.mean));
        } else {
            out.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_psnr, self.mean_ssim));
        }
        out
    }
}

/// Renders and scores every test view (reference = its own ground-truth
/// image; reconstruction-only for checkpoints without an appearance
/// pathway), then scores transient masks on the train split when possible.
pub fn evaluate_dataset<S: Scalar>(
    model: &Model<S>,
    dataset: &Dataset,
    opts: RenderOptions,
) -> Result<MetricsReport, MetricsError> {
    let test: Vec<_> = dataset.test_views().collect();
    if test.is_empty() {
        return Err(invalid("dataset has no test split"));
    }
    let mut views = Vec::with_capacity(test.len());
    for view in &test {
        let renderer = Renderer::new(model, view.camera.clone(), opts)?;
        let rendered = if model.config.variant.uses_appearance() {
            renderer.render_with(&view.image)?
        } else {
            renderer.render_plain()?
        };
        views.push(ViewMetrics {
            id: view.record.id.clone(),
            psnr: psnr(&rendered, &view.image)?,
            ssim: ssim(&rendered, &view.image)?,
        });
    }
    let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / views.len() as f64;
    let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / views.len() as f64;

    let iou = if model.config.variant.uses_transient() {
        let mut per_view = Vec::new();
        for view in dataset.train_views() {
            let Some(mask) = &view.mask else { continue };
            let truth: Vec<bool> = mask.iter().map(|&b| b == 255).collect();
            let pred = predicted_mask(model, &view.image)?;
            per_view.push((view.record.id.clone(), mask_iou(&pred, &truth)?));
        }
        (!per_view.is_empty()).then(|| {
            let mean = per_view.iter().map(|(_, v)| v).sum::<f64>() / per_view.len() as f64;
            IouReport { per_view, mean }
        })
    } else {
        None
    };

    Ok(MetricsReport { views, mean_psnr, mean_ssim, iou })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::AppearanceConfig;
    use crate::field::FieldConfig;
    use crate::scene::{generate_dataset, SceneSpec};
    use crate::trainer::{init_variant_params, TrainConfig, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn flat(h: usize, w: usize, rgb: [f64; 3]) -> ImageBuf {
        let mut img = ImageBuf::new(h, w);
        for r in 0..h {
            for c in 0..w {
                img.set_pixel(r, c, rgb);
            }
        }
        img
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuf {
        ImageBuf { h, w, data: (0..3 * h * w).map(|_| rng.gen_range(0.0..=1.0)).collect() }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = flat(9, 9, [0.2, 0.5, 0.8]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = flat(9, 9, [0.3, 0.6, 0.9]); // uniform +0.1 → MSE 0.01 → 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_validates_inputs() {
        let a = flat(8, 8, [0.5; 3]);
        assert!(psnr(&a, &flat(8, 9, [0.5; 3])).is_err(), "shape mismatch");
        let mut bad = flat(8, 8, [0.5; 3]);
        bad.data[0] = 1.5;
        assert!(psnr(&a, &bad).is_err(), "out of range");
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 11, 13);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let a = flat(7, 9, [0.5; 3]);
        assert!(ssim(&a, &flat(7, 9, [0.5; 3])).is_err());
        assert!(ssim(&flat(8, 8, [0.5; 3]), &flat(8, 8, [0.5; 3])).is_ok());
    }

    #[test]
    fn ssim_against_a_negated_checkerboard_matches_the_closed_form() {
        // Gray checkerboard 0.5 ± d and its negative: every window has mean
        // exactly 0.5, variance d², covariance −d², so each window scores
        // (C2 − 2d²)/(C2 + 2d²) — well below zero for d = 0.1.
        let d = 0.1;
        let (h, w) = (10, 10);
        let mut a = ImageBuf::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let v = if (r + c) % 2 == 0 { 0.5 + d } else { 0.5 - d };
                a.set_pixel(r, c, [v; 3]);
            }
        }
        let b = ImageBuf { h, w, data: a.data.iter().map(|v| 1.0 - v).collect() };
        let expected = (SSIM_C2 - 2.0 * d * d) / (SSIM_C2 + 2.0 * d * d);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got < -0.9, "luminance term must collapse, got {got}");
    }

    /// Two-pass oracle: explicit means first, then centered moments.
    fn ssim_oracle(a: &ImageBuf, b: &ImageBuf) -> f64 {
        let (h, w) = (a.h, a.w);
        let hw = h * w;
        let lum = |img: &ImageBuf, i: usize| {
            0.299 * img.data[i] + 0.587 * img.data[hw + i] + 0.114 * img.data[2 * hw + i]
        };
        let mut scores = Vec::new();
        for r0 in 0..=(h - 8) {
            for c0 in 0..=(w - 8) {
                let idx: Vec<usize> =
                    (r0..r0 + 8).flat_map(|r| (c0..c0 + 8).map(move |c| r * w + c)).collect();
                let mu_a = idx.iter().map(|&i| lum(a, i)).sum::<f64>() / 64.0;
                let mu_b = idx.iter().map(|&i| lum(b, i)).sum::<f64>() / 64.0;
                let va = idx.iter().map(|&i| (lum(a, i) - mu_a).powi(2)).sum::<f64>() / 64.0;
                let vb = idx.iter().map(|&i| (lum(b, i) - mu_b).powi(2)).sum::<f64>() / 64.0;
                let cov = idx.iter().map(|&i| (lum(a, i) - mu_a) * (lum(b, i) - mu_b)).sum::<f64>()
                    / 64.0;
                scores.push(
                    (2.0 * mu_a * mu_b + 1e-4) * (2.0 * cov + 9e-4)
                        / ((mu_a * mu_a + mu_b * mu_b + 1e-4) * (va + vb + 9e-4)),
                );
            }
        }
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    fn psnr_oracle(a: &ImageBuf, b: &ImageBuf) -> f64 {
        // per-pixel accumulation order (channel innermost), unlike the
        // implementation's flat scan
        let mut se = 0.0;
        for r in 0..a.h {
            for c in 0..a.w {
                for ch in 0..3 {
                    se += (a.at(ch, r, c) - b.at(ch, r, c)).powi(2);
                }
            }
        }
        let mse = se / (3 * a.h * a.w) as f64;
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }

    #[test]
    fn psnr_and_ssim_match_independent_oracles_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let (h, w) = (8 + trial % 5, 8 + trial % 7);
            let a = random_image(&mut rng, h, w);
            let b = random_image(&mut rng, h, w);
            let dp = (psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs();
            let ds = (ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs();
            assert!(dp < 1e-9, "trial {trial}: psnr off by {dp}");
            assert!(ds < 1e-9, "trial {trial}: ssim off by {ds}");
        }
    }

    #[test]
    fn mask_iou_counts() {
        let t = [true, true, false, false];
        assert_eq!(mask_iou(&t, &t).unwrap(), 1.0);
        assert_eq!(mask_iou(&[false; 4], &[false; 4]).unwrap(), 1.0, "empty union");
        assert_eq!(mask_iou(&[true, false, false, false], &[false, false, true, true]).unwrap(), 0.0);
        // overlap 1, union 3
        let got = mask_iou(&[true, true, false, false], &[false, true, true, false]).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-15);
        assert!(mask_iou(&[true], &[true, false]).is_err());
    }

    // ------------------------------------------------------- evaluation

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

    #[test]
    fn ground_truth_scores_itself_perfectly() {
        let dir = tempdir().unwrap();
        generate_dataset(&SceneSpec::demo(), 2, 1, 2, 0.5, 16, 3, dir.path()).unwrap();
        let dataset = Dataset::load(dir.path()).unwrap();
        for view in &dataset.views {
            assert_eq!(psnr(&view.image, &view.image).unwrap(), PSNR_CAP_DB);
            assert_eq!(ssim(&view.image, &view.image).unwrap(), 1.0);
        }
    }

    #[test]
    fn evaluation_report_wiring_per_variant() {
        let dir = tempdir().unwrap();
        generate_dataset(&SceneSpec::demo(), 3, 2, 2, 1.0, 16, 7, dir.path()).unwrap();
        let dataset = Dataset::load(dir.path()).unwrap();
        let opts = RenderOptions::for_scene(&dataset.scene);

        let report = evaluate_dataset(&toy_model(Variant::Full), &dataset, opts).unwrap();
        assert_eq!(report.views.len(), 2);
        let iou = report.iou.as_ref().expect("full variant reports IoU");
        assert_eq!(iou.per_view.len(), 3);
        assert!(report.csv().starts_with("view,psnr,ssim,iou\n"));
        assert!(report.views.iter().all(|v| v.psnr >= 0.0 && (-1.0..=1.0).contains(&v.ssim)));
        assert!(iou.per_view.iter().all(|(_, v)| (0.0..=1.0).contains(v)));

        let base = evaluate_dataset(&toy_model(Variant::Base), &dataset, opts).unwrap();
        assert!(base.iou.is_none());
        assert!(base.csv().starts_with("view,psnr,ssim\n"));
        assert!(!base.csv().lines().next().unwrap().contains("iou"));

        let transient = evaluate_dataset(&toy_model(Variant::TransientOnly), &dataset, opts).unwrap();
        assert!(transient.iou.is_some(), "segmenter plus masks yields IoU without appearance");
    }

    #[test]
    fn evaluation_requires_a_test_split() {
        let dir = tempdir().unwrap();
        generate_dataset(&SceneSpec::demo(), 2, 1, 2, 0.5, 16, 3, dir.path()).unwrap();
        let mut dataset = Dataset::load(dir.path()).unwrap();
        dataset.views.retain(|v| v.is_train());
        let opts = RenderOptions::for_scene(&dataset.scene);
        let err = match evaluate_dataset(&toy_model(Variant::Full), &dataset, opts) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("evaluation without a test split must fail"),
        };
        assert!(err.contains("test split"), "{err}");
    }
}
