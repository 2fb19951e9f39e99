//! Symmetric eigendecomposition, PSD square roots, and the closed-form
//! optimal covariance-matching transform with its optimality oracle.
//!
//! Everything here is plain `f64` off the autodiff tape: these routines
//! verify the theory behind the learned transform and back the
//! `verify-transform` subcommand. Matrices are tiny (C ≤ 64), so the
//! solvers favour clarity over blocking: cyclic Jacobi for eigenpairs,
//! naive triple-loop products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const SYMMETRY_RTOL: f64 = 1e-10;
const PSD_RTOL: f64 = 1e-9;
const JACOBI_RTOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;
const INVERSE_RTOL: f64 = 1e-10;
const CONSTRAINT_RTOL: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {0:.3e} (relative)")]
    NotSymmetric(f64),
    #[error("covariance is not PSD: min eigenvalue {min:.3e}, trace {trace:.3e}")]
    NotPsd { min: f64, trace: f64 },
    #[error("Jacobi did not converge after {MAX_SWEEPS} sweeps: off-diagonal residual {residual:.3e}")]
    NonConvergence { residual: f64 },
    #[error("matrix near-singular: min eigenvalue {min:.3e}, need > {needs:.3e}")]
    NearSingular { min: f64, needs: f64 },
    #[error("P is ill-conditioned: condition number {0:.3e} (limit {MAX_CONDITION:.0e})")]
    IllConditioned(f64),
    #[error("{what}: dimension mismatch ({a} vs {b})")]
    DimMismatch { what: &'static str, a: usize, b: usize },
    #[error("transform failed its distribution self-check: relative residual {0:.3e}")]
    SelfCheck(f64),
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------- matrices

/// Dense square matrix, row-major. Used for P, transforms, eigenvector sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMat {
    dim: usize,
    data: Vec<f64>,
}

impl SquareMat {
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != dim * dim {
            return Err(LinalgError::DimMismatch { what: "from_rows", a: dim * dim, b: data.len() });
        }
        Ok(SquareMat { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        SquareMat { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn transpose(&self) -> SquareMat {
        let mut out = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.data[j * self.dim + i] = self.data[i * self.dim + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &SquareMat) -> SquareMat {
        assert_eq!(self.dim, other.dim, "matmul dim mismatch");
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.data[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += aik * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim, "apply dim mismatch");
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.at(i, j) * v[j]).sum())
            .collect()
    }

    pub fn sub(&self, other: &SquareMat) -> SquareMat {
        assert_eq!(self.dim, other.dim, "sub dim mismatch");
        SquareMat {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> SquareMat {
        SquareMat { dim: self.dim, data: self.data.iter().map(|a| a * s).collect() }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.at(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// 2-norm condition number via eigenvalues of AᵀA; ∞ when singular.
    pub fn condition_number(&self) -> f64 {
        let ata = self.transpose().matmul(self);
        let sym = SymMatrix::force(ata);
        let eig = match eigh_symmetric(&sym) {
            Ok(e) => e,
            Err(_) => return f64::INFINITY,
        };
        let max = eig.eigenvalues[0].max(0.0);
        let min = *eig.eigenvalues.last().expect("nonempty");
        if min <= 0.0 {
            f64::INFINITY
        } else {
            (max / min).sqrt()
        }
    }

}

/// Symmetric matrix: validated on construction, then stored exactly
/// symmetric ((A+Aᵀ)/2).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(SquareMat);

impl SymMatrix {
    /// Accepts matrices symmetric within 1e-10 relative (Frobenius scale)
    /// and symmetrizes them exactly.
    pub fn new(m: SquareMat) -> Result<Self, LinalgError> {
        let norm = m.frobenius().max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for i in 0..m.dim {
            for j in (i + 1)..m.dim {
                worst = worst.max((m.at(i, j) - m.at(j, i)).abs());
            }
        }
        if worst / norm > SYMMETRY_RTOL {
            return Err(LinalgError::NotSymmetric(worst / norm));
        }
        Ok(Self::force(m))
    }

    /// Symmetrize unconditionally; for products that are symmetric by
    /// algebra but carry float asymmetry.
    pub fn force(m: SquareMat) -> Self {
        let mut s = m.clone();
        for i in 0..m.dim {
            for j in 0..m.dim {
                s.data[i * m.dim + j] = 0.5 * (m.at(i, j) + m.at(j, i));
            }
        }
        SymMatrix(s)
    }

    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        Self::new(SquareMat::from_rows(dim, data)?)
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(SquareMat::identity(dim))
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = SquareMat::zeros(entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m.set(i, i, v);
        }
        SymMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.dim
    }

    pub fn as_mat(&self) -> &SquareMat {
        &self.0
    }

    pub fn into_mat(self) -> SquareMat {
        self.0
    }
}

/// Mean + covariance of a Gaussian feature distribution. The covariance is
/// checked PSD (eigenvalues ≥ −1e-9·trace) at construction.
#[derive(Debug, Clone)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub covariance: SymMatrix,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, covariance: SymMatrix) -> Result<Self, LinalgError> {
        if mean.len() != covariance.dim() {
            return Err(LinalgError::DimMismatch {
                what: "gaussian",
                a: mean.len(),
                b: covariance.dim(),
            });
        }
        let eig = eigh_symmetric(&covariance)?;
        let min = *eig.eigenvalues.last().expect("nonempty");
        let trace = covariance.as_mat().trace();
        if min < -PSD_RTOL * trace.abs().max(1.0) {
            return Err(LinalgError::NotPsd { min, trace });
        }
        Ok(GaussianSpec { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

// ------------------------------------------------------------------- eigh

/// Eigenvalues descending; eigenvectors as columns of an orthonormal matrix.
#[derive(Debug, Clone)]
pub struct Eigh {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: SquareMat,
}

/// Cyclic Jacobi eigensolver. Sweeps until the off-diagonal Frobenius norm
/// drops below 1e-12·‖A‖_F, at most 100 sweeps.
pub fn eigh_symmetric(a: &SymMatrix) -> Result<Eigh, LinalgError> {
    let n = a.dim();
    let mut m = a.as_mat().clone();
    let mut v = SquareMat::identity(n);
    let norm = m.frobenius();

    let off = |m: &SquareMat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.at(i, j) * m.at(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off(&m) <= JACOBI_RTOL * norm;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                // symmetric Schur rotation zeroing (p,q)
                let tau = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                let (app, aqq) = (m.at(p, p), m.at(q, q));
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let (arp, arq) = (m.at(r, p), m.at(r, q));
                    m.set(r, p, c * arp - s * arq);
                    m.set(p, r, c * arp - s * arq);
                    m.set(r, q, s * arp + c * arq);
                    m.set(q, r, s * arp + c * arq);
                }
                for r in 0..n {
                    let (vrp, vrq) = (v.at(r, p), v.at(r, q));
                    v.set(r, p, c * vrp - s * vrq);
                    v.set(r, q, s * vrp + c * vrq);
                }
            }
        }
        converged = off(&m) <= JACOBI_RTOL * norm;
    }
    if !converged {
        return Err(LinalgError::NonConvergence { residual: off(&m) });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.at(j, j).partial_cmp(&m.at(i, i)).expect("finite eigenvalues"));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m.at(i, i)).collect();
    let mut vecs = SquareMat::zeros(n);
    for (newj, &oldj) in order.iter().enumerate() {
        for r in 0..n {
            vecs.set(r, newj, v.at(r, oldj));
        }
    }
    Ok(Eigh { eigenvalues, eigenvectors: vecs })
}

/// V·diag(f(λ))·Vᵀ, exactly symmetrized.
fn spectral_map(eig: &Eigh, f: impl Fn(f64) -> f64) -> SymMatrix {
    let n = eig.eigenvalues.len();
    let v = &eig.eigenvectors;
    let mut scaled = SquareMat::zeros(n); // diag(f(λ))·Vᵀ
    for i in 0..n {
        let fi = f(eig.eigenvalues[i]);
        for j in 0..n {
            scaled.set(i, j, fi * v.at(j, i));
        }
    }
    SymMatrix::force(v.matmul(&scaled))
}

/// PSD square root (negative eigenvalues clamped to 0); with `inverse`, the
/// inverse square root, refused when min eigenvalue ≤ 1e-10·trace.
pub fn sqrtm_psd(a: &SymMatrix, inverse: bool) -> Result<SymMatrix, LinalgError> {
    let eig = eigh_symmetric(a)?;
    if inverse {
        let min = *eig.eigenvalues.last().expect("nonempty");
        let needs = INVERSE_RTOL * a.as_mat().trace();
        if min <= needs || min <= 0.0 {
            return Err(LinalgError::NearSingular { min, needs });
        }
        Ok(spectral_map(&eig, |l| 1.0 / l.max(0.0).sqrt()))
    } else {
        Ok(spectral_map(&eig, |l| l.max(0.0).sqrt()))
    }
}

// -------------------------------------------------- transform + optimality

/// Residual of the distribution constraint T·Σ_cr·Tᵀ = Σ_a, relative to
/// ‖Σ_a‖_F.
pub fn constraint_residual(t: &SquareMat, cr: &GaussianSpec, a: &GaussianSpec) -> f64 {
    let lhs = t.matmul(cr.covariance.as_mat()).matmul(&t.transpose());
    lhs.sub(a.covariance.as_mat()).frobenius() / a.covariance.as_mat().frobenius().max(f64::MIN_POSITIVE)
}

/// The unique transform that matches the feature distribution
/// (T·Σ_cr·Tᵀ = Σ_a) while minimizing the alignment objective:
///
///   T* = Σ_a Pᵀ Σ_cr^{1/2} G^{-1/2} Σ_cr^{-1/2},
///   G  = Σ_cr^{1/2} P Σ_a Pᵀ Σ_cr^{1/2}.
///
/// On the feasible set the only T-dependent objective term is −2β·tr(PTΣ_cr),
/// maximized at orthogonal Q* = Mᵀ(MMᵀ)^{-1/2} for M = Σ_cr^{1/2}PΣ_a^{1/2};
/// substituting T = Σ_a^{1/2}QΣ_cr^{-1/2} gives the expression above. The
/// result is self-checked against the constraint before being returned.
pub fn closed_form_transform(
    cr: &GaussianSpec,
    a: &GaussianSpec,
    p: &SquareMat,
) -> Result<SquareMat, LinalgError> {
    let c = cr.dim();
    if a.dim() != c || p.dim() != c {
        return Err(LinalgError::DimMismatch { what: "transform", a: c, b: a.dim().max(p.dim()) });
    }
    let cond = p.condition_number();
    if !(cond < MAX_CONDITION) {
        return Err(LinalgError::IllConditioned(cond));
    }
    let cr_half = sqrtm_psd(&cr.covariance, false)?;
    let cr_half_inv = sqrtm_psd(&cr.covariance, true)?;
    let g = SymMatrix::force(
        cr_half
            .as_mat()
            .matmul(p)
            .matmul(a.covariance.as_mat())
            .matmul(&p.transpose())
            .matmul(cr_half.as_mat()),
    );
    let g_inv_half = sqrtm_psd(&g, true)?;
    let t = a
        .covariance
        .as_mat()
        .matmul(&p.transpose())
        .matmul(cr_half.as_mat())
        .matmul(g_inv_half.as_mat())
        .matmul(cr_half_inv.as_mat());

    let residual = constraint_residual(&t, cr, a);
    if residual > CONSTRAINT_RTOL {
        return Err(LinalgError::SelfCheck(residual));
    }
    Ok(t)
}

/// Exact Gaussian expectation of the alignment objective (no sampling):
///
///   [tr(TΣ_crTᵀ) + tr(Σ_a)]
///   + β·[tr(PTΣ_crTᵀPᵀ) + tr(Σ_cr) − 2·tr(PTΣ_cr) + ‖Pμ_a − μ_cr‖²]
pub fn transform_objective(
    t: &SquareMat,
    cr: &GaussianSpec,
    a: &GaussianSpec,
    p: &SquareMat,
    beta: f64,
) -> Result<f64, LinalgError> {
    let c = cr.dim();
    if a.dim() != c || p.dim() != c || t.dim() != c {
        return Err(LinalgError::DimMismatch { what: "objective", a: c, b: t.dim() });
    }
    let scr = cr.covariance.as_mat();
    let t_scr_tt = t.matmul(scr).matmul(&t.transpose());
    let first = t_scr_tt.trace() + a.covariance.as_mat().trace();

    let pt = p.matmul(t);
    let second_quad = pt.matmul(scr).matmul(&pt.transpose()).trace();
    let cross = pt.matmul(scr).trace();
    let mean_diff: f64 = p
        .apply(&a.mean)
        .iter()
        .zip(&cr.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(first + beta * (second_quad + scr.trace() - 2.0 * cross + mean_diff))
}

/// A random member of the feasible set {T : TΣ_crTᵀ = Σ_a}, i.e.
/// Σ_a^{1/2}·Q·Σ_cr^{−1/2} with Q Haar-uniform (QR of a Gaussian matrix,
/// R's diagonal sign-fixed positive).
pub fn sample_feasible_transform(
    cr: &GaussianSpec,
    a: &GaussianSpec,
    seed: u64,
) -> Result<SquareMat, LinalgError> {
    let c = cr.dim();
    if a.dim() != c {
        return Err(LinalgError::DimMismatch { what: "feasible", a: c, b: a.dim() });
    }
    let a_half = sqrtm_psd(&a.covariance, false)?;
    let cr_half_inv = sqrtm_psd(&cr.covariance, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_orthogonal(c, &mut rng);
    Ok(a_half.as_mat().matmul(&q).matmul(cr_half_inv.as_mat()))
}

// ------------------------------------------------------- random instances

/// One standard normal draw (Box–Muller).
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Haar-uniform orthogonal matrix: QR of a Gaussian matrix via modified
/// Gram–Schmidt, columns sign-fixed so diag(R) > 0.
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> SquareMat {
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| gauss(rng)).collect())
        .collect();
    for j in 0..dim {
        for i in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
            let prev = cols[i].clone();
            for (cj, pi) in cols[j].iter_mut().zip(&prev) {
                *cj -= dot * pi;
            }
        }
        let norm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate Gaussian column");
        // dividing by the residual norm gives R_jj = norm > 0, i.e. the
        // sign-fixed convention that makes Q Haar-uniform
        for x in cols[j].iter_mut() {
            *x /= norm;
        }
    }
    let mut q = SquareMat::zeros(dim);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            q.set(i, j, x);
        }
    }
    q
}

/// Random PSD matrix with eigenvalues log-uniform in [1, cond], so the
/// condition number is at most `cond`.
pub fn random_psd(dim: usize, cond: f64, rng: &mut ChaCha8Rng) -> SymMatrix {
    assert!(cond >= 1.0);
    let v = random_orthogonal(dim, rng);
    let mut lambda: Vec<f64> = (0..dim)
        .map(|_| (rng.gen_range(0.0..1.0f64) * cond.ln()).exp())
        .collect();
    // pin the extremes so the spread is representative
    lambda[0] = cond;
    if dim > 1 {
        lambda[dim - 1] = 1.0;
    }
    let mut scaled = SquareMat::zeros(dim); // diag(λ)Vᵀ
    for i in 0..dim {
        for j in 0..dim {
            scaled.set(i, j, lambda[i] * v.at(j, i));
        }
    }
    SymMatrix::force(v.matmul(&scaled))
}

/// Random invertible, well-conditioned matrix: U·diag(s)·Vᵀ with singular
/// values log-uniform in [1, 10].
pub fn random_invertible(dim: usize, rng: &mut ChaCha8Rng) -> SquareMat {
    let u = random_orthogonal(dim, rng);
    let v = random_orthogonal(dim, rng);
    let mut sv = SquareMat::zeros(dim);
    for i in 0..dim {
        sv.set(i, i, (rng.gen_range(0.0..1.0f64) * 10.0f64.ln()).exp());
    }
    u.matmul(&sv).matmul(&v.transpose())
}

/// Random Gaussian spec with PSD covariance (condition ≤ `cond`) and a
/// mean drawn N(0, 1) per coordinate.
pub fn random_gaussian_spec(dim: usize, cond: f64, rng: &mut ChaCha8Rng) -> GaussianSpec {
    let covariance = random_psd(dim, cond, rng);
    let mean = (0..dim).map(|_| gauss(rng)).collect();
    GaussianSpec::new(mean, covariance).expect("random PSD covariance")
}

/// Outcome of one randomized optimality check of the closed-form transform.
#[derive(Debug, Clone)]
pub struct OptimalityTrial {
    pub dim: usize,
    pub beta: f64,
    /// Objective value of the closed-form transform.
    pub objective_closed_form: f64,
    /// Best objective among the random feasible transforms.
    pub min_objective_sampled: f64,
    /// Relative Frobenius residual of T·Σ_cr·Tᵀ = Σ_a for the closed form.
    pub constraint_residual: f64,
}

/// Draws a random instance (covariances of condition ≤ 100, random
/// invertible P), solves it in closed form, and pits the solution against
/// `samples` random members of the feasible set.
pub fn run_optimality_trial(
    dim: usize,
    beta: f64,
    samples: usize,
    seed: u64,
) -> Result<OptimalityTrial, LinalgError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cr = random_gaussian_spec(dim, 100.0, &mut rng);
    let a = random_gaussian_spec(dim, 100.0, &mut rng);
    let p = random_invertible(dim, &mut rng);
    let t = closed_form_transform(&cr, &a, &p)?;
    let objective_closed_form = transform_objective(&t, &cr, &a, &p, beta)?;
    let residual = constraint_residual(&t, &cr, &a);
    let mut min_objective_sampled = f64::INFINITY;
    for k in 0..samples {
        let tq = sample_feasible_transform(&cr, &a, seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        min_objective_sampled = min_objective_sampled.min(transform_objective(&tq, &cr, &a, &p, beta)?);
    }
    Ok(OptimalityTrial { dim, beta, objective_closed_form, min_objective_sampled, constraint_residual: residual })
}
