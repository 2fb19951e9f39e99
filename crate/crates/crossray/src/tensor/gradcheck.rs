//! Central-difference verification of tape gradients.
//!
//! `grad_check` runs a closure twice per probed coordinate (x ± h) and
//! compares the finite-difference slope against the tape gradient. Always
//! run at f64; the probes subsample large parameters deterministically.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::fnv1a;
use super::{ParamSet, Tape, Tensor, TensorError, Var};

const MAX_COORDS: usize = 256;

/// Per-parameter maximum relative gradient error.
#[derive(Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub per_param: BTreeMap<String, f64>,
    /// Coordinates whose finite differences were self-inconsistent (a relu
    /// or |·| kink inside the probe interval) and were therefore not judged.
    pub skipped: BTreeMap<String, usize>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }

    /// Parameters whose error exceeds the tolerance (a reported failure,
    /// not a panic).
    pub fn failures(&self) -> Vec<(&str, f64)> {
        self.per_param
            .iter()
            .filter(|(_, &e)| e > self.tolerance)
            .map(|(k, &e)| (k.as_str(), e))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn total_skipped(&self) -> usize {
        self.skipped.values().sum()
    }
}

/// Checks d loss / d params for `f` against central differences with
/// h = 1e-6·max(1, |x|), probing ≤ 256 seeded coordinates per parameter.
///
/// A coordinate that disagrees with the tape is re-probed at h/2 first: if
/// the two finite differences also disagree with each other, the function is
/// not differentiable inside the probe interval (e.g. a relu pre-activation
/// crossing zero) and the coordinate is skipped instead of failed. Genuine
/// gradient bugs produce self-consistent finite differences and still fail.
pub fn grad_check<F>(
    f: &F,
    params: &ParamSet<f64>,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape<f64>, &BTreeMap<String, Var<f64>>) -> Result<Var<f64>, TensorError>,
{
    // Analytic pass.
    let tape = Tape::new();
    let leaves = params.leaves(&tape, |_| true);
    let loss = f(&tape, &leaves)?;
    tape.backward(&loss)?;
    let analytic: BTreeMap<String, Tensor<f64>> = leaves
        .iter()
        .map(|(path, var)| {
            let g = var.grad().unwrap_or_else(|| Tensor::zeros(&var.shape()));
            (path.clone(), g)
        })
        .collect();

    // Finite differences on a scratch copy.
    let mut scratch = params.clone();
    let mut per_param = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    let paths: Vec<String> = params.paths().map(|p| p.to_string()).collect();
    for path in paths {
        let n = scratch.get(&path).expect("path from iteration").numel();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&path));
            rand::seq::index::sample(&mut rng, n, MAX_COORDS).into_vec()
        };
        let rel_err = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        let mut worst = 0.0f64;
        for &i in &coords {
            let x0 = scratch.get(&path).expect("path").data()[i];
            let h = 1e-6 * x0.abs().max(1.0);
            let fd = central(f, &mut scratch, &path, i, x0, h)?;
            let ad = analytic[&path].data()[i];
            let rel = rel_err(ad, fd);
            if rel > tolerance {
                let fd_half = central(f, &mut scratch, &path, i, x0, h / 2.0)?;
                if rel_err(fd, fd_half) > 0.5 * tolerance {
                    *skipped.entry(path.clone()).or_insert(0) += 1;
                    continue;
                }
                worst = worst.max(rel.min(rel_err(ad, fd_half)));
            } else {
                worst = worst.max(rel);
            }
        }
        per_param.insert(path, worst);
    }
    Ok(GradCheckReport { tolerance, per_param, skipped })
}

fn central<F>(
    f: &F,
    scratch: &mut ParamSet<f64>,
    path: &str,
    i: usize,
    x0: f64,
    h: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&Tape<f64>, &BTreeMap<String, Var<f64>>) -> Result<Var<f64>, TensorError>,
{
    scratch.get_mut(path).expect("path").data_mut()[i] = x0 + h;
    let fp = eval(f, scratch)?;
    scratch.get_mut(path).expect("path").data_mut()[i] = x0 - h;
    let fm = eval(f, scratch)?;
    scratch.get_mut(path).expect("path").data_mut()[i] = x0;
    Ok((fp - fm) / (2.0 * h))
}

fn eval<F>(f: &F, params: &ParamSet<f64>) -> Result<f64, TensorError>
where
    F: Fn(&Tape<f64>, &BTreeMap<String, Var<f64>>) -> Result<Var<f64>, TensorError>,
{
    let tape = Tape::new();
    let leaves = params.leaves(&tape, |_| false);
    Ok(f(&tape, &leaves)?.value().item())
}

/// One gradient check per differentiable op kind, on small random inputs.
/// Shared by the CLI gradient checker and the acceptance suite; inputs dodge
/// the relu/|·|/interpolation kinks where the derivative is undefined.
pub fn op_kind_checks(seed: u64, tolerance: f64) -> Result<Vec<(String, GradCheckReport)>, TensorError> {
    type CheckFn = Box<dyn Fn(&Tape<f64>, &BTreeMap<String, Var<f64>>) -> Result<Var<f64>, TensorError>>;
    fn params_of(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])], dodge: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::<f64>::new();
        for (name, shape) in specs {
            let data: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| {
                    let v: f64 = rng.gen_range(-2.0..2.0);
                    if v.abs() < dodge {
                        v + dodge + 0.2
                    } else {
                        v
                    }
                })
                .collect();
            ps.insert(name, Tensor::from_f64_slice(shape, &data).expect("shape"));
        }
        ps
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (
        rng.gen_range(2..6usize),
        rng.gen_range(2..6usize),
        rng.gen_range(2..6usize),
    );

    let mut cases: Vec<(String, ParamSet<f64>, CheckFn)> = Vec::new();
    cases.push((
        "matmul".into(),
        params_of(&mut rng, &[("a", &[m, k]), ("b", &[k, n])], 0.0),
        Box::new(|_, l| l["a"].matmul(&l["b"])?.sum(&[])),
    ));
    cases.push((
        "conv2d".into(),
        params_of(&mut rng, &[("x", &[2, 5, 5]), ("w", &[3, 2, 3, 3])], 0.0),
        Box::new(|_, l| l["x"].conv2d(&l["w"])?.sum(&[])),
    ));
    cases.push((
        "add".into(),
        params_of(&mut rng, &[("a", &[3, 4]), ("b", &[4])], 0.0),
        Box::new(|_, l| l["a"].add(&l["b"])?.sq_l2_norm()),
    ));
    cases.push((
        "sub".into(),
        params_of(&mut rng, &[("a", &[3, 4]), ("b", &[3, 4])], 0.0),
        Box::new(|_, l| l["a"].sub(&l["b"])?.sq_l2_norm()),
    ));
    cases.push((
        "elementwise-mul".into(),
        params_of(&mut rng, &[("a", &[2, 3, 4]), ("b", &[3, 4])], 0.0),
        Box::new(|_, l| l["a"].mul(&l["b"])?.sum(&[])),
    ));
    cases.push((
        "scalar-mul".into(),
        params_of(&mut rng, &[("x", &[5])], 0.0),
        Box::new(|_, l| l["x"].scalar_mul(-1.7)?.sq_l2_norm()),
    ));
    cases.push((
        "relu".into(),
        params_of(&mut rng, &[("x", &[4, 4])], 0.05),
        Box::new(|_, l| l["x"].relu()?.sum(&[])),
    ));
    cases.push((
        "softplus".into(),
        params_of(&mut rng, &[("x", &[4, 4])], 0.0),
        Box::new(|_, l| l["x"].softplus()?.sq_l2_norm()),
    ));
    cases.push((
        "sigmoid".into(),
        params_of(&mut rng, &[("x", &[4, 4])], 0.0),
        Box::new(|_, l| l["x"].sigmoid()?.sq_l2_norm()),
    ));
    cases.push((
        "sin".into(),
        params_of(&mut rng, &[("x", &[6])], 0.0),
        Box::new(|_, l| l["x"].sin()?.sum(&[])),
    ));
    cases.push((
        "cos".into(),
        params_of(&mut rng, &[("x", &[6])], 0.0),
        Box::new(|_, l| l["x"].cos()?.sum(&[])),
    ));
    cases.push((
        "exp".into(),
        params_of(&mut rng, &[("x", &[6])], 0.0),
        Box::new(|_, l| l["x"].exp()?.sum(&[])),
    ));
    cases.push((
        "mean".into(),
        params_of(&mut rng, &[("x", &[3, 4, 2])], 0.0),
        Box::new(|_, l| l["x"].mean(&[1])?.sq_l2_norm()),
    ));
    cases.push((
        "sum".into(),
        params_of(&mut rng, &[("x", &[3, 4, 2])], 0.0),
        Box::new(|_, l| l["x"].sum(&[0, 2])?.sq_l2_norm()),
    ));
    cases.push((
        "reshape".into(),
        params_of(&mut rng, &[("x", &[2, 6])], 0.0),
        Box::new(|_, l| l["x"].reshape(&[3, 4])?.spatial_covariance()?.sum(&[])),
    ));
    cases.push((
        "concat".into(),
        params_of(&mut rng, &[("a", &[2, 3]), ("b", &[2, 1]), ("c", &[2, 2])], 0.0),
        Box::new(|t, l| t.concat(&[&l["a"], &l["b"], &l["c"]], 1)?.sq_l2_norm()),
    ));
    cases.push((
        "adaptive-average-pool".into(),
        params_of(&mut rng, &[("x", &[2, 7, 5])], 0.0),
        Box::new(|_, l| l["x"].adaptive_avg_pool(3, 2)?.sq_l2_norm()),
    ));
    cases.push((
        "spatial-covariance".into(),
        params_of(&mut rng, &[("x", &[3, 4, 5])], 0.0),
        Box::new(|_, l| l["x"].spatial_covariance()?.sq_l2_norm()),
    ));
    cases.push((
        "l1-norm".into(),
        params_of(&mut rng, &[("x", &[4, 3])], 0.05),
        Box::new(|_, l| l["x"].l1_norm()),
    ));
    cases.push((
        "squared-l2-norm".into(),
        params_of(&mut rng, &[("x", &[4, 3])], 0.0),
        Box::new(|_, l| l["x"].sq_l2_norm()),
    ));
    // Sample at strictly fractional offsets: the interpolant is piecewise
    // linear in the coordinates but linear in the map everywhere.
    let rows: Vec<f64> = (0..6).map(|_| rng.gen_range(0..4) as f64 + rng.gen_range(0.1..0.9)).collect();
    let cols: Vec<f64> = (0..6).map(|_| rng.gen_range(0..5) as f64 + rng.gen_range(0.1..0.9)).collect();
    cases.push((
        "bilinear-sample".into(),
        params_of(&mut rng, &[("map", &[2, 5, 6])], 0.0),
        Box::new(move |_, l| l["map"].bilinear_sample(&rows, &cols)?.sq_l2_norm()),
    ));

    let seed2 = seed.wrapping_mul(0x9e3779b97f4a7c15);
    cases
        .into_iter()
        .map(|(name, ps, f)| grad_check(&f, &ps, tolerance, seed2).map(|r| (name, r)))
        .collect()
}
