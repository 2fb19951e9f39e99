//! Transient-object handling: a lightweight segmentation network producing a
//! per-pixel visibility map M (1 = transient), grid sampling of that map at
//! ray pixel coordinates, and the occlusion loss that gates the photometric
//! residual by (1−M).
//!
//! The map is trained without mask supervision: transient pixels are exactly
//! the ones the static model cannot explain, so declaring them transient
//! lowers the gated residual, while the area regularizer keeps the network
//! from declaring everything transient.

use std::collections::BTreeMap;

use crate::tensor::{ParamSet, Scalar, Tape, TensorError, Var};

/// Parameter prefix of the segmentation network.
pub const SEGMENTER: &str = "segmenter";

/// Register the segmentation convs (3→16→16→16→1, all 3×3) under `segmenter.`.
pub fn init_segmenter_params<S: Scalar>(params: &mut ParamSet<S>, master_seed: u64) {
    let widths = [(16usize, 3usize), (16, 16), (16, 16), (1, 16)];
    for (i, (c_out, c_in)) in widths.iter().enumerate() {
        let name = format!("{SEGMENTER}.conv{}", i + 1);
        params.init_he_uniform(&format!("{name}.weight"), &[*c_out, *c_in, 3, 3], c_in * 9, master_seed);
        params.init_zeros(&format!("{name}.bias"), &[*c_out, 1, 1]);
    }
}

fn conv_layer<S: Scalar>(
    leaves: &BTreeMap<String, Var<S>>,
    name: &str,
    x: &Var<S>,
) -> Result<Var<S>, TensorError> {
    let w = leaves
        .get(&format!("{name}.weight"))
        .ok_or_else(|| TensorError::invalid("segmenter", format!("missing parameter {name}.weight")))?;
    let b = leaves
        .get(&format!("{name}.bias"))
        .ok_or_else(|| TensorError::invalid("segmenter", format!("missing parameter {name}.bias")))?;
    x.conv2d(w)?.add(b)
}

/// S(image): full-resolution visibility map (1, H, W), sigmoid-bounded.
pub fn segment_transient<S: Scalar>(
    leaves: &BTreeMap<String, Var<S>>,
    image: &Var<S>,
) -> Result<Var<S>, TensorError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(TensorError::shapes("segment_transient", &[&shape]));
    }
    let h = conv_layer(leaves, "segmenter.conv1", image)?.relu()?;
    let h = conv_layer(leaves, "segmenter.conv2", &h)?.relu()?;
    let h = conv_layer(leaves, "segmenter.conv3", &h)?.relu()?;
    conv_layer(leaves, "segmenter.conv4", &h)?.sigmoid()
}

/// GS(map): bilinear samples of the map at continuous (row, col) pixel
/// coordinates → (1, P). Integer coordinates return exact map values.
pub fn grid_sample_map<S: Scalar>(
    map: &Var<S>,
    pixels: &[(f64, f64)],
) -> Result<Var<S>, TensorError> {
    if pixels.is_empty() {
        return Err(TensorError::invalid("grid_sample_map", "empty pixel list"));
    }
    let rows: Vec<f64> = pixels.iter().map(|p| p.0).collect();
    let cols: Vec<f64> = pixels.iter().map(|p| p.1).collect();
    map.bilinear_sample(&rows, &cols)
}

/// L_t = ‖(1−M) ⊙ (I_n − I_a)²‖₁ + mask_reg·mean(M).
///
/// `map_samples` is (1, p, p), the rendered/reference patches (3, p, p);
/// the squared-residual term is sum-reduced, the regularizer is a mean, so
/// their balance shifts with patch size (documented with the default).
pub fn transient_loss<S: Scalar>(
    tape: &Tape<S>,
    map_samples: &Var<S>,
    rendered: &Var<S>,
    reference: &Var<S>,
    mask_reg: f64,
) -> Result<Var<S>, TensorError> {
    let ms = map_samples.shape();
    let rs = rendered.shape();
    let fs = reference.shape();
    if rs != fs || ms.len() != 3 || rs.len() != 3 || ms[0] != 1 || rs[0] != 3 || ms[1..] != rs[1..] {
        return Err(TensorError::shapes("transient_loss", &[&ms, &rs, &fs]));
    }
    if mask_reg < 0.0 {
        return Err(TensorError::invalid("transient_loss", format!("mask_reg must be ≥ 0, got {mask_reg}")));
    }
    let mv = map_samples.value();
    if mv.data().iter().any(|v| v.to_f64() < 0.0 || v.to_f64() > 1.0) {
        return Err(TensorError::invalid("transient_loss", "map values outside [0, 1]"));
    }
    let ones = tape.constant(crate::tensor::Tensor::full(&ms, S::ONE));
    let gate = ones.sub(map_samples)?; // (1, p, p), broadcast over channels
    let resid = rendered.sub(reference)?;
    let data_term = resid.mul(&resid)?.mul(&gate)?.l1_norm()?;
    if mask_reg == 0.0 {
        return Ok(data_term);
    }
    data_term.add(&map_samples.mean(&[])?.scalar_mul(mask_reg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        Tensor::from_f64_slice(shape, &data).unwrap()
    }

    #[test]
    fn map_shape_and_range_for_any_size() {
        let mut ps = ParamSet::<f64>::new();
        init_segmenter_params(&mut ps, 1);
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(8, 8), (17, 9), (32, 24)] {
            let img = tape.constant(rand_tensor(&[3, h, w], 0.0, 1.0, &mut rng));
            let m = segment_transient(&leaves, &img).unwrap();
            assert_eq!(m.shape(), vec![1, h, w]);
            assert!(m.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zeroed_final_layer_gives_half_map() {
        let mut ps = ParamSet::<f64>::new();
        init_segmenter_params(&mut ps, 3);
        let w = ps.get_mut("segmenter.conv4.weight").unwrap();
        let shape = w.shape().to_vec();
        *w = Tensor::zeros(&shape);
        let tape = Tape::new();
        let leaves = ps.leaves(&tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = tape.constant(rand_tensor(&[3, 9, 11], 0.0, 1.0, &mut rng));
        let m = segment_transient(&leaves, &img).unwrap();
        assert!(m.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn segmenter_gradients_pass_finite_differences() {
        let mut ps = ParamSet::<f64>::new();
        init_segmenter_params(&mut ps, 5);
        // move biases off zero: exact-zero relu pre-activations are
        // structural with zero biases and break finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let paths: Vec<String> =
            ps.paths().filter(|p| p.ends_with(".bias")).map(String::from).collect();
        for p in paths {
            for v in ps.get_mut(&p).unwrap().data_mut() {
                *v = rng.gen_range(0.05..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
        let img = rand_tensor(&[3, 6, 6], 0.0, 1.0, &mut rng);
        let rep = grad_check(
            &|tape, leaves| {
                segment_transient(leaves, &tape.constant(img.clone()))?.sq_l2_norm()
            },
            &ps,
            1e-4,
            7,
        )
        .unwrap();
        assert!(rep.passed(), "failures: {:?}", rep.failures());
    }

    #[test]
    fn grid_sampling_identities() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // constant map: every sample is the constant
        let half = tape.constant(Tensor::full(&[1, 5, 7], 0.5));
        let s = grid_sample_map(&half, &[(0.3, 4.9), (2.0, 3.0), (4.0, 6.0)]).unwrap();
        assert!(s.value().data().iter().all(|&v| v == 0.5));

        // integer coordinates extract exact pixel values
        let map = tape.constant(rand_tensor(&[1, 6, 4], 0.0, 1.0, &mut rng));
        let coords: Vec<(f64, f64)> = (0..6).flat_map(|r| (0..4).map(move |c| (r as f64, c as f64))).collect();
        let s = grid_sample_map(&map, &coords).unwrap();
        assert_eq!(s.value().data(), map.value().data());

        // halfway between 0 and 1 → 0.5
        let mut step = Tensor::zeros(&[1, 1, 2]);
        step.data_mut()[1] = 1.0;
        let s = grid_sample_map(&tape.constant(step), &[(0.0, 0.5)]).unwrap();
        assert_eq!(s.value().data(), &[0.5]);

        // out-of-range coordinates clamp to the edge
        let s = grid_sample_map(&map, &[(-3.0, 0.0), (99.0, 99.0)]).unwrap();
        assert_eq!(s.value().data()[0], map.value().data()[0]);
        assert_eq!(s.value().data()[1], map.value().data()[23]);

        assert!(grid_sample_map(&map, &[]).is_err());
    }

    #[test]
    fn degenerate_all_transient_map_zeroes_the_data_term() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = tape.constant(Tensor::full(&[1, 4, 4], 1.0));
        let a = tape.constant(rand_tensor(&[3, 4, 4], 0.0, 1.0, &mut rng));
        let b = tape.constant(rand_tensor(&[3, 4, 4], 0.0, 1.0, &mut rng));
        let loss = transient_loss(&tape, &m, &a, &b, 0.0).unwrap();
        assert_eq!(loss.value().item(), 0.0);
    }

    #[test]
    fn zero_map_reduces_to_summed_squared_residual() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = tape.constant(Tensor::zeros(&[1, 5, 5]));
        let a = tape.constant(rand_tensor(&[3, 5, 5], 0.0, 1.0, &mut rng));
        let b = tape.constant(rand_tensor(&[3, 5, 5], 0.0, 1.0, &mut rng));
        let loss = transient_loss(&tape, &m, &a, &b, 0.0).unwrap().value().item();
        let expect: f64 = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn matches_brute_force_evaluation() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let p = rng.gen_range(2..6usize);
            let m = rand_tensor(&[1, p, p], 0.0, 1.0, &mut rng);
            let a = rand_tensor(&[3, p, p], 0.0, 1.0, &mut rng);
            let b = rand_tensor(&[3, p, p], 0.0, 1.0, &mut rng);
            let mask_reg = rng.gen_range(0.0..0.2);
            let loss = transient_loss(
                &tape,
                &tape.constant(m.clone()),
                &tape.constant(a.clone()),
                &tape.constant(b.clone()),
                mask_reg,
            )
            .unwrap()
            .value()
            .item();
            let mut expect = 0.0;
            for ch in 0..3 {
                for i in 0..p * p {
                    let r = a.data()[ch * p * p + i] - b.data()[ch * p * p + i];
                    expect += (1.0 - m.data()[i]) * r * r;
                }
            }
            expect += mask_reg * m.data().iter().sum::<f64>() / (p * p) as f64;
            assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        }
    }

    #[test]
    fn zero_loss_iff_residual_vanishes_where_visible() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = 4;
        // M = 1 on the top row, < 1 elsewhere
        let mut m = Tensor::full(&[1, p, p], 0.3);
        for c in 0..p {
            m.data_mut()[c] = 1.0;
        }
        let a = rand_tensor(&[3, p, p], 0.0, 1.0, &mut rng);
        // equal wherever visible, different under the mask
        let mut b = a.clone();
        for ch in 0..3 {
            for c in 0..p {
                b.data_mut()[ch * p * p + c] += 0.25;
            }
        }
        let loss = transient_loss(&tape, &tape.constant(m.clone()), &tape.constant(a.clone()), &tape.constant(b.clone()), 0.0)
            .unwrap()
            .value()
            .item();
        assert_eq!(loss, 0.0);

        // flipping one visible pixel makes the loss strictly positive
        let mut b2 = b.clone();
        b2.data_mut()[2 * p * p + p + 1] += 0.1;
        let loss2 = transient_loss(&tape, &tape.constant(m), &tape.constant(a), &tape.constant(b2), 0.0)
            .unwrap()
            .value()
            .item();
        assert!(loss2 > 0.0);
    }

    #[test]
    fn all_ones_map_is_not_stationary_under_regularization() {
        // wherever the channel-summed residual² is below mask_reg/p², the
        // loss gradient w.r.t. the map entry is strictly positive, pushing M
        // down — including at M ≡ 1 itself
        let p = 4;
        let mask_reg = 0.05;
        for level in [1.0, 0.9] {
            let tape = Tape::<f64>::new();
            let m = tape.leaf(Tensor::full(&[1, p, p], level), true);
            let a = tape.constant(Tensor::full(&[3, p, p], 0.5));
            let b = tape.constant(Tensor::full(&[3, p, p], 0.51)); // Σ resid² = 3e-4 < 0.05/16
            let loss = transient_loss(&tape, &m, &a, &b, mask_reg).unwrap();
            tape.backward(&loss).unwrap();
            let g = m.grad().unwrap();
            assert!(
                g.data().iter().all(|&v| v > 0.0),
                "M = {level}: gradient not strictly positive: {:?}",
                &g.data()[..4]
            );
        }
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // keep the map strictly inside (0,1) so perturbations stay valid
        ps.insert("map", rand_tensor(&[1, 4, 4], 0.1, 0.9, &mut rng));
        ps.insert("rendered", rand_tensor(&[3, 4, 4], 0.0, 1.0, &mut rng));
        ps.insert("reference", rand_tensor(&[3, 4, 4], 0.0, 1.0, &mut rng));
        let rep = grad_check(
            &|tape, leaves| {
                transient_loss(tape, &leaves["map"], &leaves["rendered"], &leaves["reference"], 0.05)
            },
            &ps,
            1e-4,
            14,
        )
        .unwrap();
        assert!(rep.passed(), "failures: {:?}", rep.failures());
    }

    #[test]
    fn shape_and_range_preconditions_are_enforced() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::full(&[1, 4, 4], 0.5));
        let a = tape.constant(Tensor::full(&[3, 4, 4], 0.5));
        let b5 = tape.constant(Tensor::full(&[3, 5, 5], 0.5));
        assert!(transient_loss(&tape, &m, &a, &b5, 0.0).is_err());
        let bad = tape.constant(Tensor::full(&[1, 4, 4], 1.5));
        assert!(transient_loss(&tape, &bad, &a, &a, 0.0).is_err());
        assert!(transient_loss(&tape, &m, &a, &a, -0.1).is_err());
    }
}
