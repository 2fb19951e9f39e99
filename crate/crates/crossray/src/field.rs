//! Neural radiance field machinery: positional encoding, the shared MLP,
//! stratified ray sampling, transmittance-weighted volume rendering for
//! arbitrary payloads, and cross-ray feature grids over pixel patches.
//!
//! Points are batched channels-first: an MLP weight (out, in) multiplies
//! (in, N) columns. Ray patches use *sample-major* point order (flat index
//! = sample·m + ray) so per-point outputs reshape directly to (·, n, m).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{Ray, Vec3};
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, TensorError, Var};

/// Field architecture. The defaults are the trained configuration; tests use
/// [`FieldConfig::toy`] so finite-difference checks stay fast.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldConfig {
    /// Trunk depth (number of hidden layers).
    pub depth: usize,
    /// Trunk width.
    pub width: usize,
    /// 0-based trunk layer whose input is [h_prev, γ(x)] (the skip).
    pub skip_index: usize,
    /// Positional-encoding levels for positions.
    pub pos_levels: usize,
    /// Positional-encoding levels for directions.
    pub dir_levels: usize,
    /// Feature channels C.
    pub channels: usize,
    /// Hidden width of the direction-conditioned feature head.
    pub feat_hidden: usize,
    /// Positions are divided by this before encoding, mapping the scene
    /// into roughly [−1, 1]³ so the lowest frequency stays coarse.
    pub pos_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            depth: 8,
            width: 256,
            skip_index: 4,
            pos_levels: 10,
            dir_levels: 4,
            channels: 16,
            feat_hidden: 128,
            pos_scale: 8.0,
        }
    }
}

impl FieldConfig {
    /// Small variant for gradient checks and fast tests.
    pub fn toy() -> Self {
        FieldConfig {
            depth: 2,
            width: 8,
            skip_index: 1,
            pos_levels: 2,
            dir_levels: 1,
            channels: 3,
            feat_hidden: 6,
            pos_scale: 8.0,
        }
    }

    pub fn pos_dim(&self) -> usize {
        6 * self.pos_levels
    }

    pub fn dir_dim(&self) -> usize {
        6 * self.dir_levels
    }

    fn trunk_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.pos_dim()
        } else if layer == self.skip_index {
            self.width + self.pos_dim()
        } else {
            self.width
        }
    }
}

// ------------------------------------------------------------ positional

/// sin/cos frequency ladder: per level j (ascending), the blocks
/// sin(2ʲ·π·v) then cos(2ʲ·π·v); output length 2·L·k.
pub fn positional_encoding(v: &[f64], levels: usize) -> Vec<f64> {
    assert!(levels >= 1, "need at least one encoding level");
    let mut out = Vec::with_capacity(2 * levels * v.len());
    for j in 0..levels {
        let f = (1u64 << j) as f64 * std::f64::consts::PI;
        out.extend(v.iter().map(|&x| (f * x).sin()));
        out.extend(v.iter().map(|&x| (f * x).cos()));
    }
    out
}

// -------------------------------------------------------------- sampling

/// Per-ray sample positions and spacings.
#[derive(Debug, Clone)]
pub struct RaySampleSet {
    /// n strictly ascending depths in [t_n, t_f].
    pub t_values: Vec<f64>,
    /// δ_l = t_{l+1} − t_l; the last delta is the bin width (t_f − t_n)/n.
    pub deltas: Vec<f64>,
}

/// Stratified depths: n equal bins, midpoints when `jitter_seed` is absent,
/// one uniform draw per bin when seeded.
pub fn sample_ray_points(
    ray: &Ray,
    n: usize,
    t_near: f64,
    t_far: f64,
    jitter_seed: Option<u64>,
) -> Result<RaySampleSet, TensorError> {
    if n < 2 || !(t_far > t_near) {
        return Err(TensorError::invalid(
            "sample_ray_points",
            format!("need n ≥ 2 and t_far > t_near, got n={n}, [{t_near}, {t_far}]"),
        ));
    }
    if (ray.dir.norm() - 1.0).abs() > 1e-9 {
        return Err(TensorError::invalid(
            "sample_ray_points",
            format!("ray direction not unit: ‖d‖ = {}", ray.dir.norm()),
        ));
    }
    let dt = (t_far - t_near) / n as f64;
    let t_values: Vec<f64> = match jitter_seed {
        None => (0..n).map(|i| t_near + (i as f64 + 0.5) * dt).collect(),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|i| t_near + (i as f64 + rng.gen_range(0.0..1.0)) * dt)
                .collect()
        }
    };
    let mut deltas: Vec<f64> = t_values.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(dt);
    Ok(RaySampleSet { t_values, deltas })
}

/// Deterministic per-ray jitter stream (splitmix64 of seed + index).
pub fn per_ray_seed(seed: u64, ray_index: u64) -> u64 {
    let mut z = seed.wrapping_add(ray_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ------------------------------------------------------------------- mlp

/// Register all field parameters ("field.…") with He-uniform weights and
/// zero biases.
pub fn init_field_params<S: Scalar>(params: &mut ParamSet<S>, cfg: &FieldConfig, master_seed: u64) {
    let mut linear = |name: String, out: usize, inp: usize| {
        params.init_he_uniform(&format!("{name}.weight"), &[out, inp], inp, master_seed);
        params.init_zeros(&format!("{name}.bias"), &[out, 1]);
    };
    for i in 0..cfg.depth {
        linear(format!("field.trunk.{i}"), cfg.width, cfg.trunk_in(i));
    }
    linear("field.density".into(), 1, cfg.width);
    linear("field.feat1".into(), cfg.feat_hidden, cfg.width + cfg.dir_dim());
    linear("field.feat2".into(), cfg.channels, cfg.feat_hidden);
}

fn lv<'a, S: Scalar>(
    leaves: &'a BTreeMap<String, Var<S>>,
    name: &str,
) -> Result<&'a Var<S>, TensorError> {
    leaves
        .get(name)
        .ok_or_else(|| TensorError::invalid("field_forward", format!("missing parameter {name}")))
}

fn linear_layer<S: Scalar>(
    leaves: &BTreeMap<String, Var<S>>,
    name: &str,
    x: &Var<S>,
) -> Result<Var<S>, TensorError> {
    lv(leaves, &format!("{name}.weight"))?
        .matmul(x)?
        .add(lv(leaves, &format!("{name}.bias"))?)
}

/// Per-point field outputs for a batch of N points.
#[derive(Debug, Clone)]
pub struct FieldOutput<S: Scalar> {
    /// (C, N) un-activated feature vectors.
    pub features: Var<S>,
    /// (1, N) softplus-activated densities.
    pub density: Var<S>,
}

/// Query the MLP at N points with matching view directions.
pub fn field_forward<S: Scalar>(
    tape: &Tape<S>,
    leaves: &BTreeMap<String, Var<S>>,
    cfg: &FieldConfig,
    positions: &[Vec3],
    dirs: &[Vec3],
) -> Result<FieldOutput<S>, TensorError> {
    if positions.is_empty() || positions.len() != dirs.len() {
        return Err(TensorError::invalid(
            "field_forward",
            format!("{} positions vs {} dirs", positions.len(), dirs.len()),
        ));
    }
    let n = positions.len();
    let encode = |vs: &[Vec3], levels: usize, scale: f64| -> Tensor<S> {
        // per-point encodings laid out as columns of a (2·L·3, N) matrix
        let dim = 6 * levels;
        let mut data = vec![0.0f64; dim * vs.len()];
        for (col, v) in vs.iter().enumerate() {
            let scaled = [v.x() / scale, v.y() / scale, v.z() / scale];
            for (row, e) in positional_encoding(&scaled, levels).into_iter().enumerate() {
                data[row * vs.len() + col] = e;
            }
        }
        Tensor::from_f64_slice(&[dim, vs.len()], &data).expect("encoding shape")
    };
    let gx = tape.constant(encode(positions, cfg.pos_levels, cfg.pos_scale));
    let gd = tape.constant(encode(dirs, cfg.dir_levels, 1.0));

    let mut h = gx.clone();
    for i in 0..cfg.depth {
        if i == cfg.skip_index && i != 0 {
            h = tape.concat(&[&h, &gx], 0)?;
        }
        h = linear_layer(leaves, &format!("field.trunk.{i}"), &h)?.relu()?;
    }
    let density = linear_layer(leaves, "field.density", &h)?.softplus()?;
    let feat_in = tape.concat(&[&h, &gd], 0)?;
    let hidden = linear_layer(leaves, "field.feat1", &feat_in)?.relu()?;
    let features = linear_layer(leaves, "field.feat2", &hidden)?;
    debug_assert_eq!(features.shape(), vec![cfg.channels, n]);
    Ok(FieldOutput { features, density })
}

/// Single-point convenience wrapper around [`field_forward`].
pub fn field_query<S: Scalar>(
    tape: &Tape<S>,
    leaves: &BTreeMap<String, Var<S>>,
    cfg: &FieldConfig,
    x: Vec3,
    d: Vec3,
) -> Result<FieldOutput<S>, TensorError> {
    field_forward(tape, leaves, cfg, &[x], &[d])
}

// --------------------------------------------------------- volume render

/// Transmittance-weighted accumulation over each ray.
#[derive(Debug, Clone)]
pub struct VolumeRendered<S: Scalar> {
    /// (C, m) accumulated payload per ray.
    pub rendered: Var<S>,
    /// (n, m) weights w_i = φ_i·α_i.
    pub weights: Var<S>,
    /// (m) Σ_i w_i.
    pub opacity: Var<S>,
    /// (m) Σ_i w_i·t_i, a diagnostic expected depth.
    pub depth: Var<S>,
}

/// Differentiable volume rendering of a (C, n, m) payload against (n, m)
/// densities and constant per-sample spacings:
/// w_i = exp(−Σ_{l<i} σ_lδ_l)·(1 − exp(−σ_iδ_i)), output Σ_i w_i·payload_i.
pub fn volume_render<S: Scalar>(
    tape: &Tape<S>,
    payload: &Var<S>,
    density: &Var<S>,
    deltas: &Tensor<S>,
    t_values: &Tensor<S>,
) -> Result<VolumeRendered<S>, TensorError> {
    let pshape = payload.shape();
    let dshape = density.shape();
    if pshape.len() != 3 || dshape != pshape[1..] || deltas.shape() != dshape || t_values.shape() != dshape {
        return Err(TensorError::shapes(
            "volume_render",
            &[&pshape, &dshape, deltas.shape(), t_values.shape()],
        ));
    }
    let (n, _m) = (dshape[0], dshape[1]);
    if density.value().data().iter().any(|&s| s.to_f64() < 0.0) {
        return Err(TensorError::invalid("volume_render", "negative density"));
    }

    let sd = density.mul(&tape.constant(deltas.clone()))?; // σ_i δ_i
    let alpha = tape
        .constant(Tensor::full(&dshape, S::ONE))
        .sub(&sd.scalar_mul(-1.0)?.exp()?)?;
    // exclusive prefix sums over samples: left-multiply by the constant
    // strictly-lower-triangular ones matrix
    let mut lower = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for l in 0..i {
            lower.data_mut()[i * n + l] = S::ONE;
        }
    }
    let phi = tape.constant(lower).matmul(&sd)?.scalar_mul(-1.0)?.exp()?;
    let weights = phi.mul(&alpha)?; // (n, m)
    let rendered = payload.mul(&weights)?.sum(&[1])?; // (C, m)
    let opacity = weights.sum(&[0])?; // (m)
    let depth = weights.mul(&tape.constant(t_values.clone()))?.sum(&[0])?;
    Ok(VolumeRendered { rendered, weights, opacity, depth })
}

/// Brute-force reference for the accumulation formula, evaluating every
/// term independently: φ_i = exp(−Σ_{l<i}σ_lδ_l), α_i = 1 − exp(−σ_iδ_i),
/// result = Σ_i φ_i·α_i·payload_i. Returns (accumulated, opacity).
pub fn volume_render_reference(
    payloads: &[Vec<f64>],
    sigmas: &[f64],
    deltas: &[f64],
) -> (Vec<f64>, f64) {
    assert!(!payloads.is_empty());
    assert_eq!(payloads.len(), sigmas.len());
    assert_eq!(payloads.len(), deltas.len());
    let c = payloads[0].len();
    let mut out = vec![0.0; c];
    let mut opacity = 0.0;
    for i in 0..sigmas.len() {
        let phi = (-(0..i).map(|l| sigmas[l] * deltas[l]).sum::<f64>()).exp();
        let alpha = 1.0 - (-sigmas[i] * deltas[i]).exp();
        let w = phi * alpha;
        opacity += w;
        for ch in 0..c {
            out[ch] += w * payloads[i][ch];
        }
    }
    (out, opacity)
}

// ------------------------------------------------------------- cross-ray

/// Per-point field evaluations over a p×p ray patch, before accumulation.
#[derive(Debug, Clone)]
pub struct RayPointField<S: Scalar> {
    /// (C, n, m) per-point features, sample-major.
    pub features: Var<S>,
    /// (n, m) densities.
    pub density: Var<S>,
    /// (n, m) spacings (constant).
    pub deltas: Tensor<S>,
    /// (n, m) sample depths (constant).
    pub t_values: Tensor<S>,
    /// (row, col) of the patch's first ray's pixel.
    pub patch_origin: (usize, usize),
}

/// Evaluate the field at n stratified samples of every ray in the patch.
/// With `jitter_seed`, each ray gets its own deterministic stratified draw.
#[allow(clippy::too_many_arguments)]
pub fn field_points<S: Scalar>(
    tape: &Tape<S>,
    leaves: &BTreeMap<String, Var<S>>,
    cfg: &FieldConfig,
    rays: &[Ray],
    n: usize,
    t_near: f64,
    t_far: f64,
    jitter_seed: Option<u64>,
) -> Result<RayPointField<S>, TensorError> {
    let m = rays.len();
    if m == 0 {
        return Err(TensorError::invalid("field_points", "empty ray patch"));
    }
    let samples: Vec<RaySampleSet> = rays
        .iter()
        .enumerate()
        .map(|(r, ray)| {
            sample_ray_points(ray, n, t_near, t_far, jitter_seed.map(|s| per_ray_seed(s, r as u64)))
        })
        .collect::<Result<_, _>>()?;

    // sample-major point order: flat index = s·m + r
    let mut positions = Vec::with_capacity(n * m);
    let mut dirs = Vec::with_capacity(n * m);
    let mut deltas = Tensor::zeros(&[n, m]);
    let mut t_values = Tensor::zeros(&[n, m]);
    for s in 0..n {
        for (r, ray) in rays.iter().enumerate() {
            let t = samples[r].t_values[s];
            positions.push(ray.origin.add(ray.dir.scale(t)));
            dirs.push(ray.dir);
            deltas.data_mut()[s * m + r] = S::from_f64(samples[r].deltas[s]);
            t_values.data_mut()[s * m + r] = S::from_f64(t);
        }
    }
    let out = field_forward(tape, leaves, cfg, &positions, &dirs)?;
    Ok(RayPointField {
        features: out.features.reshape(&[cfg.channels, n, m])?,
        density: out.density.reshape(&[n, m])?,
        deltas,
        t_values,
        patch_origin: rays[0].pixel,
    })
}

/// Cross-ray feature grid plus rendering diagnostics for a ray patch.
#[derive(Debug, Clone)]
pub struct CrossRayGrid<S: Scalar> {
    /// (C, p, p) volume-rendered feature grid in row-major pixel order.
    pub grid: Var<S>,
    /// (n, m) rendering weights.
    pub weights: Var<S>,
    /// (m) per-ray opacity.
    pub opacity: Var<S>,
    /// (m) per-ray expected depth.
    pub depth: Var<S>,
    pub patch_origin: (usize, usize),
}

/// Volume-render per-ray features into the C×p×p cross-ray grid. `rays`
/// must be a full p×p patch in row-major pixel order.
#[allow(clippy::too_many_arguments)]
pub fn cross_ray_feature<S: Scalar>(
    tape: &Tape<S>,
    leaves: &BTreeMap<String, Var<S>>,
    cfg: &FieldConfig,
    rays: &[Ray],
    n: usize,
    t_near: f64,
    t_far: f64,
    jitter_seed: Option<u64>,
) -> Result<CrossRayGrid<S>, TensorError> {
    let m = rays.len();
    let p = (m as f64).sqrt().round() as usize;
    if p * p != m {
        return Err(TensorError::invalid("cross_ray_feature", format!("{m} rays is not a square patch")));
    }
    let pts = field_points(tape, leaves, cfg, rays, n, t_near, t_far, jitter_seed)?;
    let vr = volume_render(tape, &pts.features, &pts.density, &pts.deltas, &pts.t_values)?;
    Ok(CrossRayGrid {
        grid: vr.rendered.reshape(&[cfg.channels, p, p])?,
        weights: vr.weights,
        opacity: vr.opacity,
        depth: vr.depth,
        patch_origin: pts.patch_origin,
    })
}
