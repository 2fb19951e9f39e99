//! Appearance injection: reference-image encoders, the covariance-product
//! transformation of feature grids, the convolutional decoder, and the
//! appearance alignment loss.
//!
//! The transform is literal: T = Cov(φ2(F^cr))·Cov(φ3(F^a)) as a C×C
//! matrix product of spatial covariances, applied channel-wise to φ1(F^cr).
//! Everything here runs on the tape so the loss differentiates end-to-end.

use std::collections::BTreeMap;

use crate::tensor::{ParamSet, Scalar, Tape, TensorError, Var};

/// Widths of the appearance-side networks. `channels` must match the field's
/// feature channels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AppearanceConfig {
    pub channels: usize,
    /// Hidden width of both encoders.
    pub enc_width: usize,
    /// Hidden width of the decoder.
    pub dec_width: usize,
    /// Side of the pooled embedding grid.
    pub pool: usize,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        AppearanceConfig { channels: 16, enc_width: 32, dec_width: 32, pool: 8 }
    }
}

impl AppearanceConfig {
    /// Small variant for finite-difference tests.
    pub fn toy() -> Self {
        AppearanceConfig { channels: 3, enc_width: 4, dec_width: 4, pool: 2 }
    }
}

/// Parameter prefix of the appearance encoder E(I_a).
pub const APP_ENC: &str = "app_enc";
/// Parameter prefix of the content-anchor encoder.
pub const CONTENT_ENC: &str = "content_enc";

// -------------------------------------------------------------------- init

fn init_conv<S: Scalar>(
    params: &mut ParamSet<S>,
    name: &str,
    c_out: usize,
    c_in: usize,
    seed: u64,
) {
    params.init_he_uniform(&format!("{name}.weight"), &[c_out, c_in, 3, 3], c_in * 9, seed);
    params.init_zeros(&format!("{name}.bias"), &[c_out, 1, 1]);
}

/// Register a 3-conv encoder (3 → w → w → C, pooled later) under `prefix.`.
pub fn init_encoder_params<S: Scalar>(
    params: &mut ParamSet<S>,
    prefix: &str,
    cfg: &AppearanceConfig,
    seed: u64,
) {
    init_conv(params, &format!("{prefix}.conv1"), cfg.enc_width, 3, seed);
    init_conv(params, &format!("{prefix}.conv2"), cfg.enc_width, cfg.enc_width, seed);
    init_conv(params, &format!("{prefix}.conv3"), cfg.channels, cfg.enc_width, seed);
}

/// Register the three φ stacks (each two C→C convs) under `transform.`.
pub fn init_transform_params<S: Scalar>(params: &mut ParamSet<S>, cfg: &AppearanceConfig, seed: u64) {
    for phi in ["phi1", "phi2", "phi3"] {
        init_conv(params, &format!("transform.{phi}.conv1"), cfg.channels, cfg.channels, seed);
        init_conv(params, &format!("transform.{phi}.conv2"), cfg.channels, cfg.channels, seed);
    }
}

/// Register the decoder (C → w → w → 3) under `decoder.`.
pub fn init_decoder_params<S: Scalar>(params: &mut ParamSet<S>, cfg: &AppearanceConfig, seed: u64) {
    init_conv(params, "decoder.conv1", cfg.dec_width, cfg.channels, seed);
    init_conv(params, "decoder.conv2", cfg.dec_width, cfg.dec_width, seed);
    init_conv(params, "decoder.conv3", 3, cfg.dec_width, seed);
}

// ----------------------------------------------------------------- forward

fn lv<'a, S: Scalar>(
    leaves: &'a BTreeMap<String, Var<S>>,
    name: &str,
) -> Result<&'a Var<S>, TensorError> {
    leaves
        .get(name)
        .ok_or_else(|| TensorError::invalid("appearance", format!("missing parameter {name}")))
}

fn conv_layer<S: Scalar>(
    leaves: &BTreeMap<String, Var<S>>,
    name: &str,
    x: &Var<S>,
) -> Result<Var<S>, TensorError> {
    x.conv2d(lv(leaves, &format!("{name}.weight"))?)?
        .add(lv(leaves, &format!("{name}.bias"))?)
}

/// E(image): three 3×3 convs (ReLU after the first two) and adaptive
/// average pooling to the configured grid. Accepts any H, W ≥ pool.
pub fn encode_appearance<S: Scalar>(
    leaves: &BTreeMap<String, Var<S>>,
    prefix: &str,
    cfg: &AppearanceConfig,
    image: &Var<S>,
) -> Result<Var<S>, TensorError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(TensorError::shapes("encode_appearance", &[&shape]));
    }
    if shape[1] < cfg.pool || shape[2] < cfg.pool {
        return Err(TensorError::invalid(
            "encode_appearance",
            format!("image {}×{} smaller than the {}×{} pool", shape[1], shape[2], cfg.pool, cfg.pool),
        ));
    }
    let h = conv_layer(leaves, &format!("{prefix}.conv1"), image)?.relu()?;
    let h = conv_layer(leaves, &format!("{prefix}.conv2"), &h)?.relu()?;
    let h = conv_layer(leaves, &format!("{prefix}.conv3"), &h)?;
    h.adaptive_avg_pool(cfg.pool, cfg.pool)
}

fn phi_stack<S: Scalar>(
    leaves: &BTreeMap<String, Var<S>>,
    phi: &str,
    x: &Var<S>,
) -> Result<Var<S>, TensorError> {
    let h = conv_layer(leaves, &format!("transform.{phi}.conv1"), x)?.relu()?;
    conv_layer(leaves, &format!("transform.{phi}.conv2"), &h)
}

/// T(F^cr): the C×C product Cov(φ2(F^cr))·Cov(φ3(F^a)) applied to every
/// spatial position of φ1(F^cr). Covariances are over spatial positions,
/// mean-centered, divisor HW−1.
pub fn learned_transform<S: Scalar>(
    leaves: &BTreeMap<String, Var<S>>,
    cfg: &AppearanceConfig,
    cross: &Var<S>,
    app: &Var<S>,
) -> Result<Var<S>, TensorError> {
    let cs = cross.shape();
    let as_ = app.shape();
    if cs.len() != 3 || as_.len() != 3 || cs[0] != cfg.channels || as_[0] != cfg.channels {
        return Err(TensorError::shapes("learned_transform", &[&cs, &as_]));
    }
    let cov_cr = phi_stack(leaves, "phi2", cross)?.spatial_covariance()?;
    let cov_a = phi_stack(leaves, "phi3", app)?.spatial_covariance()?;
    let t = cov_cr.matmul(&cov_a)?; // (C, C)
    let moved = phi_stack(leaves, "phi1", cross)?;
    let flat = moved.reshape(&[cs[0], cs[1] * cs[2]])?;
    t.matmul(&flat)?.reshape(&cs)
}

/// D(grid): three 3×3 convs (ReLU, ReLU, sigmoid), resolution-preserving;
/// output strictly inside (0, 1).
pub fn decode<S: Scalar>(
    leaves: &BTreeMap<String, Var<S>>,
    grid: &Var<S>,
) -> Result<Var<S>, TensorError> {
    let h = conv_layer(leaves, "decoder.conv1", grid)?.relu()?;
    let h = conv_layer(leaves, "decoder.conv2", &h)?.relu()?;
    conv_layer(leaves, "decoder.conv3", &h)?.sigmoid()
}

/// The appearance alignment loss and the decoded patch it is computed from.
#[derive(Debug, Clone)]
pub struct AppearanceLossOutput<S: Scalar> {
    pub loss: Var<S>,
    /// I_n = D(T(F^cr)), reused by the occlusion loss.
    pub decoded: Var<S>,
}

/// Alignment objective for an already-injected feature grid:
/// ‖E[D(injected)] − F^a‖² + β·‖E₅[D(injected)] − E₅[D(anchor)]‖², with E₅
/// the content encoder and gradients flowing through every branch (both
/// encoder applications included). `anchor` is the un-injected grid whose
/// decode pins the content.
pub fn alignment_loss<S: Scalar>(
    leaves: &BTreeMap<String, Var<S>>,
    cfg: &AppearanceConfig,
    injected: &Var<S>,
    anchor: &Var<S>,
    f_a: &Var<S>,
    beta: f64,
) -> Result<AppearanceLossOutput<S>, TensorError> {
    if beta < 0.0 {
        return Err(TensorError::invalid("appearance_loss", format!("beta must be ≥ 0, got {beta}")));
    }
    let decoded = decode(leaves, injected)?;
    let term1 = encode_appearance(leaves, APP_ENC, cfg, &decoded)?.sub(f_a)?.sq_l2_norm()?;
    let loss = if beta == 0.0 {
        term1
    } else {
        let term2 = encode_appearance(leaves, CONTENT_ENC, cfg, &decoded)?
            .sub(&encode_appearance(leaves, CONTENT_ENC, cfg, &decode(leaves, anchor)?)?)?
            .sq_l2_norm()?;
        term1.add(&term2.scalar_mul(beta)?)?
    };
    Ok(AppearanceLossOutput { loss, decoded })
}

/// ‖E[D(T(F^cr))] − F^a‖² + β·‖E₅[D(T(F^cr))] − E₅[D(F^cr)]‖², where
/// F^a = E(I_ref).
pub fn appearance_loss<S: Scalar>(
    tape: &Tape<S>,
    leaves: &BTreeMap<String, Var<S>>,
    cfg: &AppearanceConfig,
    cross: &Var<S>,
    ref_image: &Var<S>,
    beta: f64,
) -> Result<AppearanceLossOutput<S>, TensorError> {
    let _ = tape; // all ops run on the vars' shared tape
    let f_a = encode_appearance(leaves, APP_ENC, cfg, ref_image)?;
    let transformed = learned_transform(leaves, cfg, cross, &f_a)?;
    alignment_loss(leaves, cfg, &transformed, cross, &f_a, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigh_symmetric, SymMatrix};
    use crate::tensor::{grad_check, AdamParams, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_f64_slice(shape, &data).unwrap()
    }

    fn full_toy_params(seed: u64) -> (AppearanceConfig, ParamSet<f64>) {
        let cfg = AppearanceConfig::toy();
        let mut ps = ParamSet::new();
        init_encoder_params(&mut ps, APP_ENC, &cfg, seed);
        init_encoder_params(&mut ps, CONTENT_ENC, &cfg, seed);
        init_transform_params(&mut ps, &cfg, seed);
        init_decoder_params(&mut ps, &cfg, seed);
        (cfg, ps)
    }

    /// Move zero-initialized biases off zero. With zero biases, any conv
    /// position whose entire relu receptive field is inactive sits *exactly*
    /// on the next kink, where finite differences are undefined; gradient
    /// checks must probe a generic point instead.
    fn jitter_biases(ps: &mut ParamSet<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paths: Vec<String> =
            ps.paths().filter(|p| p.ends_with(".bias")).map(String::from).collect();
        for p in paths {
            for v in ps.get_mut(&p).unwrap().data_mut() {
                *v = rng.gen_range(0.05..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
    }

    #[test]
    fn pooled_shape_is_fixed_for_any_input_size() {
        let cfg = AppearanceConfig { channels: 5, enc_width: 4, dec_width: 4, pool: 8 };
        let mut ps = ParamSet::<f64>::new();
        init_encoder_params(&mut ps, APP_ENC, &cfg, 0);
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w) in [(64, 64), (96, 80)] {
            let img = tape.constant(rand_tensor(&[3, h, w], &mut rng));
            let e = encode_appearance(&leaves, APP_ENC, &cfg, &img).unwrap();
            assert_eq!(e.shape(), vec![5, 8, 8]);
        }
        let small = tape.constant(rand_tensor(&[3, 4, 64], &mut rng));
        assert!(encode_appearance(&leaves, APP_ENC, &cfg, &small).is_err());
    }

    #[test]
    fn constant_inputs_agree_away_from_borders() {
        // convolutions of a constant are constant except within 3 px of the
        // zero-padded border; central pooled cells therefore match across
        // input sizes
        let cfg = AppearanceConfig { channels: 4, enc_width: 4, dec_width: 4, pool: 8 };
        let mut ps = ParamSet::<f64>::new();
        init_encoder_params(&mut ps, APP_ENC, &cfg, 3);
        let tape = Tape::<f64>::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut embeds = Vec::new();
        for (h, w) in [(32, 32), (48, 40)] {
            let mut img = Tensor::zeros(&[3, h, w]);
            for (i, v) in img.data_mut().iter_mut().enumerate() {
                *v = match i / (h * w) {
                    0 => 0.3,
                    1 => 0.7,
                    _ => 0.5,
                };
            }
            embeds.push(encode_appearance(&leaves, APP_ENC, &cfg, &tape.constant(img)).unwrap().value());
        }
        for ch in 0..4 {
            for r in 2..6 {
                for c in 2..6 {
                    let a = embeds[0].data()[(ch * 8 + r) * 8 + c];
                    let b = embeds[1].data()[(ch * 8 + r) * 8 + c];
                    assert!((a - b).abs() < 1e-12, "cell ({ch},{r},{c}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let cfg = AppearanceConfig::toy();
        let mut ps = ParamSet::<f64>::new();
        init_encoder_params(&mut ps, APP_ENC, &cfg, 5);
        jitter_biases(&mut ps, 55);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = rand_tensor(&[3, 6, 5], &mut rng);
        let rep = grad_check(
            &|tape, leaves| {
                encode_appearance(leaves, APP_ENC, &cfg, &tape.constant(img.clone()))?.sq_l2_norm()
            },
            &ps,
            1e-4,
            11,
        )
        .unwrap();
        assert!(rep.passed(), "max err {}", rep.max_error());
    }

    #[test]
    fn constant_phi2_output_zeroes_the_transform() {
        let (cfg, mut ps) = full_toy_params(7);
        // zero the second conv of φ2: its output becomes the bias, which is
        // spatially constant, so Cov(φ2(F^cr)) = 0 exactly. The bias is a
        // short-mantissa value so the spatial mean is bit-exact too.
        let w = ps.get_mut("transform.phi2.conv2.weight").unwrap();
        let shape = w.shape().to_vec();
        *w = Tensor::zeros(&shape);
        ps.get_mut("transform.phi2.conv2.bias").unwrap().data_mut()[0] = 0.375;
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cross = tape.constant(rand_tensor(&[cfg.channels, 6, 6], &mut rng));
        let app = tape.constant(rand_tensor(&[cfg.channels, 4, 4], &mut rng));
        let out = learned_transform(&leaves, &cfg, &cross, &app).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_transform_is_a_variance_product() {
        let cfg = AppearanceConfig { channels: 1, enc_width: 2, dec_width: 2, pool: 2 };
        let mut ps = ParamSet::<f64>::new();
        init_transform_params(&mut ps, &cfg, 9);
        let tape = Tape::<f64>::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cross = tape.constant(rand_tensor(&[1, 5, 4], &mut rng));
        let app = tape.constant(rand_tensor(&[1, 3, 6], &mut rng));
        let got = learned_transform(&leaves, &cfg, &cross, &app).unwrap().value();

        let var_of = |x: &Tensor<f64>| {
            let n = x.numel() as f64;
            let mean = x.data().iter().sum::<f64>() / n;
            x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        };
        let p2 = phi_stack(&leaves, "phi2", &cross).unwrap().value();
        let p3 = phi_stack(&leaves, "phi3", &app).unwrap().value();
        let p1 = phi_stack(&leaves, "phi1", &cross).unwrap().value();
        let scale = var_of(&p2) * var_of(&p3);
        for (g, m) in got.data().iter().zip(p1.data()) {
            assert!((g - scale * m).abs() < 1e-12, "{g} vs {}", scale * m);
        }
    }

    #[test]
    fn transform_covariances_are_symmetric_psd() {
        let (cfg, ps) = full_toy_params(12);
        let tape = Tape::<f64>::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cross = tape.constant(rand_tensor(&[cfg.channels, 6, 6], &mut rng));
        let app = tape.constant(rand_tensor(&[cfg.channels, 5, 5], &mut rng));
        for (phi, x) in [("phi2", &cross), ("phi3", &app)] {
            let cov = phi_stack(&leaves, phi, x).unwrap().spatial_covariance().unwrap().value();
            let c = cov.shape()[0];
            let sym = SymMatrix::from_rows(c, cov.data().to_vec()).expect("symmetric");
            let eig = eigh_symmetric(&sym).unwrap();
            let trace: f64 = (0..c).map(|i| cov.data()[i * c + i]).sum();
            assert!(
                *eig.eigenvalues.last().unwrap() >= -1e-9 * trace.max(1.0),
                "{phi} covariance not PSD: {:?}",
                eig.eigenvalues
            );
        }
    }

    #[test]
    fn transform_gradients_pass_finite_differences() {
        let cfg = AppearanceConfig::toy();
        let mut ps = ParamSet::<f64>::new();
        init_transform_params(&mut ps, &cfg, 14);
        jitter_biases(&mut ps, 56);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cross = rand_tensor(&[cfg.channels, 4, 4], &mut rng);
        let app = rand_tensor(&[cfg.channels, 3, 3], &mut rng);
        // also differentiate through the grids themselves
        ps.insert("cross", cross);
        ps.insert("app", app);
        let rep = grad_check(
            &|_, leaves| {
                learned_transform(leaves, &cfg, &leaves["cross"], &leaves["app"])?.sq_l2_norm()
            },
            &ps,
            1e-4,
            16,
        )
        .unwrap();
        assert!(rep.passed(), "max err {}", rep.max_error());
    }

    #[test]
    fn zeroed_final_decoder_conv_gives_half_grey() {
        let (cfg, mut ps) = full_toy_params(17);
        let w = ps.get_mut("decoder.conv3.weight").unwrap();
        let shape = w.shape().to_vec();
        *w = Tensor::zeros(&shape);
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let grid = tape.constant(rand_tensor(&[cfg.channels, 5, 5], &mut rng));
        let out = decode(&leaves, &grid).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decode_stays_strictly_inside_unit_interval() {
        let (cfg, ps) = full_toy_params(19);
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let grid = tape.constant(rand_tensor(&[cfg.channels, 7, 6], &mut rng));
        let out = decode(&leaves, &grid).unwrap().value();
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn decode_is_translation_equivariant_in_the_interior() {
        let (cfg, ps) = full_toy_params(21);
        let tape = Tape::<f64>::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let base = rand_tensor(&[cfg.channels, 12, 12], &mut rng);
        // shift down-right by one pixel
        let mut shifted = Tensor::zeros(&[cfg.channels, 12, 12]);
        for ch in 0..cfg.channels {
            for r in 0..11 {
                for c in 0..11 {
                    shifted.data_mut()[(ch * 12 + r + 1) * 12 + c + 1] =
                        base.data()[(ch * 12 + r) * 12 + c];
                }
            }
        }
        let a = decode(&leaves, &tape.constant(base)).unwrap().value();
        let b = decode(&leaves, &tape.constant(shifted)).unwrap().value();
        // receptive field is 7×7: compare pixels ≥ 4 px from every border
        for ch in 0..3 {
            for r in 4..7 {
                for c in 4..7 {
                    let va = a.data()[(ch * 12 + r) * 12 + c];
                    let vb = b.data()[(ch * 12 + r + 1) * 12 + c + 1];
                    assert_eq!(va, vb, "pixel ({ch},{r},{c})");
                }
            }
        }
    }

    #[test]
    fn loss_is_zero_when_embeddings_cannot_differ() {
        let (cfg, mut ps) = full_toy_params(23);
        // zero the appearance encoder's last conv: E(x) ≡ 0 for every x,
        // so the first term vanishes identically; β = 0 removes the second
        for p in ["app_enc.conv3.weight", "app_enc.conv3.bias"] {
            let t = ps.get_mut(p).unwrap();
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(&shape);
        }
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let cross = tape.constant(rand_tensor(&[cfg.channels, 4, 4], &mut rng));
        let refimg = tape.constant(rand_tensor(&[3, 8, 8], &mut rng));
        let out = appearance_loss(&tape, &leaves, &cfg, &cross, &refimg, 0.0).unwrap();
        assert_eq!(out.loss.value().item(), 0.0);
        assert_eq!(out.decoded.shape(), vec![3, 4, 4]);
    }

    #[test]
    fn loss_is_nonnegative() {
        let (cfg, ps) = full_toy_params(25);
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for trial in 0..3 {
            let cross = tape.constant(rand_tensor(&[cfg.channels, 4, 4], &mut rng));
            let refimg = tape.constant(rand_tensor(&[3, 9, 7], &mut rng));
            let out = appearance_loss(&tape, &leaves, &cfg, &cross, &refimg, 1e-5).unwrap();
            assert!(out.loss.value().item() >= 0.0, "trial {trial}");
        }
    }

    #[test]
    fn full_loss_gradients_pass_finite_differences() {
        let (cfg, mut ps) = full_toy_params(27);
        jitter_biases(&mut ps, 57);
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        ps.insert("cross", rand_tensor(&[cfg.channels, 4, 4], &mut rng));
        let refimg = rand_tensor(&[3, 8, 8], &mut rng);
        let rep = grad_check(
            &|tape, leaves| {
                let out = appearance_loss(
                    tape,
                    leaves,
                    &cfg,
                    &leaves["cross"],
                    &tape.constant(refimg.clone()),
                    0.5,
                )?;
                Ok(out.loss)
            },
            &ps,
            1e-4,
            29,
        )
        .unwrap();
        assert!(rep.passed(), "failures: {:?}", rep.failures());
    }

    #[test]
    fn single_batch_overfit_decreases_loss_tenfold() {
        let (cfg, mut ps) = full_toy_params(30);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cross = rand_tensor(&[cfg.channels, 6, 6], &mut rng);
        let refimg = rand_tensor(&[3, 8, 8], &mut rng);
        let adam = AdamParams::new(3e-3);
        let mut first = None;
        for step in 0..200 {
            let tape = Tape::new();
            let leaves = ps.leaves(&tape, |_| true);
            let out = appearance_loss(
                &tape,
                &leaves,
                &cfg,
                &tape.constant(cross.clone()),
                &tape.constant(refimg.clone()),
                1e-5,
            )
            .unwrap();
            let loss = tape.backward(&out.loss).unwrap().item();
            if step == 0 {
                first = Some(loss);
            }
            let grads: BTreeMap<String, Tensor<f64>> = leaves
                .iter()
                .filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g)))
                .collect();
            ps.adam_step(&grads, adam).unwrap();
        }
        // measure final loss
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let final_loss = appearance_loss(
            &tape,
            &leaves,
            &cfg,
            &tape.constant(cross),
            &tape.constant(refimg),
            1e-5,
        )
        .unwrap()
        .loss
        .value()
        .item();
        let first = first.unwrap();
        assert!(
            final_loss < 0.1 * first,
            "no overfit: step0 {first}, step200 {final_loss}"
        );
    }
}
