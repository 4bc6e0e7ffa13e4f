//! Fock-space state reconstruction from field moments and the usual
//! nonclassicality diagnostics.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::measurement::MomentSet;
use crate::optimize::{bfgs, BfgsOptions};

type C = Complex64;

/// Truncation used for reconstruction: vacuum, one and two photons.
pub const FOCK_DIM: usize = 3;

/// Working dimension for displacement operators in the Wigner function.
const WIGNER_DIM: usize = 32;

/// Largest |α| for which the displaced-parity evaluation is trusted.
pub const WIGNER_SAFE_RADIUS: f64 = 2.0;

const TOL: f64 = 1e-10;

/// Density matrix in the Fock basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: DMatrix<C>,
}

impl DensityMatrix {
    /// Checks Hermiticity, unit trace and positivity to 1e-10.
    pub fn new(m: DMatrix<C>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(invalid("rho", "must be a non-empty square matrix"));
        }
        if (&m - m.adjoint()).iter().any(|z| z.norm() > TOL) {
            return Err(invalid("rho", "not Hermitian"));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > TOL || tr.im.abs() > TOL {
            return Err(invalid("rho", format!("trace {tr} != 1")));
        }
        let m = (&m + m.adjoint()) * C::new(0.5, 0.0);
        let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
        if min_eig < -TOL {
            return Err(invalid("rho", format!("negative eigenvalue {min_eig:e}")));
        }
        Ok(Self { m })
    }

    pub fn fock(n: usize, dim: usize) -> Self {
        assert!(n < dim);
        let mut m = DMatrix::zeros(dim, dim);
        m[(n, n)] = C::new(1.0, 0.0);
        Self { m }
    }

    /// Pure state from (unnormalized) Fock amplitudes.
    pub fn pure(amplitudes: &[C]) -> Result<Self> {
        let v = nalgebra::DVector::from_column_slice(amplitudes);
        let norm = v.norm();
        if !(norm > 0.0) {
            return Err(invalid("amplitudes", "zero vector"));
        }
        let v = v / C::new(norm, 0.0);
        Ok(Self { m: &v * v.adjoint() })
    }

    pub fn diagonal(populations: &[f64]) -> Result<Self> {
        let d = populations.len();
        let mut m = DMatrix::zeros(d, d);
        for (i, p) in populations.iter().enumerate() {
            m[(i, i)] = C::new(*p, 0.0);
        }
        Self::new(m)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C> {
        &self.m
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.m[(i, i)].re).collect()
    }

    pub fn purity(&self) -> f64 {
        (&self.m * &self.m).trace().re
    }

    /// Embed into a larger Fock space.
    pub fn padded(&self, dim: usize) -> Self {
        assert!(dim >= self.dim());
        let mut m = DMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (self.dim(), self.dim())).copy_from(&self.m);
        Self { m }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        SymmetricEigen::new(self.m.clone()).eigenvalues.iter().copied().collect()
    }
}

fn annihilation(dim: usize) -> DMatrix<C> {
    let mut a = DMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = C::new((n as f64).sqrt(), 0.0);
    }
    a
}

fn hermitian_sqrt(m: &DMatrix<C>) -> DMatrix<C> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| C::new(x.max(0.0).sqrt(), 0.0)));
    &eig.eigenvectors * d * eig.eigenvectors.adjoint()
}

/// Uhlmann fidelity `(Tr sqrt(sqrt(ρ)·σ·sqrt(ρ)))²`.
pub fn fidelity(a: &DensityMatrix, b: &DensityMatrix) -> f64 {
    let d = a.dim().max(b.dim());
    let (a, b) = (a.padded(d), b.padded(d));
    let s = hermitian_sqrt(&a.m);
    let inner = &s * &b.m * &s;
    let inner = (&inner + inner.adjoint()) * C::new(0.5, 0.0);
    let eig = SymmetricEigen::new(inner).eigenvalues;
    eig.iter().map(|x| x.max(0.0).sqrt()).sum::<f64>().powi(2).min(1.0)
}

/// Exact `⟨(a†)^n a^k⟩` for `n + k ≤ max_order`.
pub fn moments_from_rho(rho: &DensityMatrix, max_order: usize) -> MomentSet {
    let order = max_order.min(4);
    let dim = rho.dim() + order;
    let r = rho.padded(dim);
    let a = annihilation(dim);
    let ad = a.adjoint();
    let mut pa = vec![DMatrix::<C>::identity(dim, dim)];
    let mut pad = vec![DMatrix::<C>::identity(dim, dim)];
    for p in 1..=order {
        pa.push(&pa[p - 1] * &a);
        pad.push(&pad[p - 1] * &ad);
    }
    let mut m = [[C::new(0.0, 0.0); 5]; 5];
    for n in 0..=order {
        for k in 0..=order - n {
            m[n][k] = (&r.m * &pad[n] * &pa[k]).trace();
        }
    }
    MomentSet::exact(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    /// Number of starting points; the first is the maximally mixed state.
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Gradient-norm threshold on the weight-normalized objective.
    pub grad_tol: f64,
    /// Smallest error bar used as a weight.
    pub sigma_floor: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            restarts: 6,
            seed: 1,
            max_iter: 5000,
            grad_tol: 1e-9,
            sigma_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    pub rho: DensityMatrix,
    /// Weighted squared residual at the optimum.
    pub chi2: f64,
    pub converged: bool,
    /// Index of the winning start.
    pub best_restart: usize,
    pub flags: Vec<String>,
}

/// Position of the lower-triangular entries of `T` in the parameter vector:
/// diagonals are real, off-diagonals complex.
const TRI: [(usize, usize); 6] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];

fn t_from_params(x: &[f64]) -> DMatrix<C> {
    let mut t = DMatrix::zeros(FOCK_DIM, FOCK_DIM);
    let mut p = 0;
    for &(i, j) in &TRI {
        if i == j {
            t[(i, j)] = C::new(x[p], 0.0);
            p += 1;
        } else {
            t[(i, j)] = C::new(x[p], x[p + 1]);
            p += 2;
        }
    }
    t
}

const N_PARAMS: usize = 9;

struct Likelihood {
    ops: Vec<DMatrix<C>>,
    targets: Vec<C>,
    weights: Vec<f64>,
}

impl Likelihood {
    fn new(moments: &MomentSet, floor: f64) -> Self {
        let a = annihilation(FOCK_DIM);
        let ad = a.adjoint();
        let pow = |m: &DMatrix<C>, p: usize| (0..p).fold(DMatrix::identity(FOCK_DIM, FOCK_DIM), |acc, _| acc * m);
        let (mut ops, mut targets, mut raw_w) = (Vec::new(), Vec::new(), Vec::new());
        for n in 0..=2 {
            for k in 0..=2 {
                if n + k == 0 {
                    continue;
                }
                ops.push(pow(&ad, n) * pow(&a, k));
                targets.push(moments.m[n][k]);
                let s = moments.sigma[n][k].max(floor);
                raw_w.push(1.0 / (s * s));
            }
        }
        let total: f64 = raw_w.iter().sum();
        Self {
            ops,
            targets,
            weights: raw_w.iter().map(|w| w / total).collect(),
        }
    }

    /// Normalized χ² and its gradient with respect to the parameters.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let t = t_from_params(x);
        let tt = t.adjoint() * &t;
        let norm = tt.trace().re;
        if !(norm > 0.0) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return f64::INFINITY;
        }
        let rho = &tt / C::new(norm, 0.0);
        let mut chi = 0.0;
        let mut g = DMatrix::<C>::zeros(FOCK_DIM, FOCK_DIM);
        for ((op, target), w) in self.ops.iter().zip(&self.targets).zip(&self.weights) {
            let r = (&rho * op).trace() - target;
            chi += w * r.norm_sqr();
            g += op * (r.conj() * (2.0 * w));
        }
        // dχ² = Re Tr(dρ·G); pushing through ρ = T†T/t gives 2·(T·H)/t with
        // H = G − Tr(ρG)·1.
        let shift = (&rho * &g).trace();
        let h = g - DMatrix::<C>::identity(FOCK_DIM, FOCK_DIM) * shift;
        let th = &t * h * C::new(2.0 / norm, 0.0);
        let mut p = 0;
        for &(i, j) in &TRI {
            if i == j {
                grad[p] = th[(i, j)].re;
                p += 1;
            } else {
                grad[p] = th[(i, j)].re;
                grad[p + 1] = th[(i, j)].im;
                p += 2;
            }
        }
        chi
    }

    fn chi2_unnormalized(&self, moments: &MomentSet, floor: f64, rho: &DMatrix<C>) -> f64 {
        let mut chi = 0.0;
        let mut idx = 0;
        for n in 0..=2 {
            for k in 0..=2 {
                if n + k == 0 {
                    continue;
                }
                let r = (rho * &self.ops[idx]).trace() - self.targets[idx];
                let s = moments.sigma[n][k].max(floor);
                chi += r.norm_sqr() / (s * s);
                idx += 1;
            }
        }
        chi
    }
}

/// Maximum-likelihood density matrix (dimension 3) under Gaussian errors on
/// the moments `m[n][k]`, `n, k ≤ 2`. Physical by construction.
pub fn mle_density_matrix(moments: &MomentSet) -> Result<MleResult> {
    mle_density_matrix_with(moments, &MleOptions::default())
}

pub fn mle_density_matrix_with(moments: &MomentSet, opts: &MleOptions) -> Result<MleResult> {
    if opts.restarts == 0 {
        return Err(invalid("restarts", "must be >= 1"));
    }
    for n in 0..=2 {
        for k in 0..=2 {
            if !(moments.m[n][k].norm().is_finite() && moments.sigma[n][k].is_finite()) {
                return Err(invalid("moments", "moments and error bars must be finite"));
            }
        }
    }
    let like = Likelihood::new(moments, opts.sigma_floor);
    let starts: Vec<Vec<f64>> = (0..opts.restarts)
        .map(|r| {
            if r == 0 {
                let mut x = vec![0.0; N_PARAMS];
                x[0] = 1.0;
                x[3] = 1.0;
                x[8] = 1.0;
                x
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(r as u64);
                (0..N_PARAMS).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
        })
        .collect();
    let bopts = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
    };
    let runs: Vec<_> = starts
        .par_iter()
        .map(|x0| bfgs(|x, g| like.eval(x, g), x0, bopts))
        .collect();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.value < runs[best].value {
            best = i;
        }
    }
    let run = &runs[best];
    let t = t_from_params(&run.x);
    let tt = t.adjoint() * &t;
    let mut rho = &tt / C::new(tt.trace().re, 0.0);
    rho = (&rho + rho.adjoint()) * C::new(0.5, 0.0);
    let chi2 = like.chi2_unnormalized(moments, opts.sigma_floor, &rho);
    let mut flags = Vec::new();
    if !run.converged {
        flags.push(format!(
            "MLE gradient norm {:.2e} above tolerance after {} iterations",
            run.grad_norm, run.iterations
        ));
    }
    Ok(MleResult {
        rho: DensityMatrix::new(rho)?,
        chi2,
        converged: run.converged,
        best_restart: best,
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G2 {
    pub value: f64,
    pub sigma: f64,
}

/// `g²(0) = ⟨(a†)²a²⟩/⟨a†a⟩²` with first-order error propagation.
pub fn g2_zero(moments: &MomentSet) -> Result<G2> {
    let n1 = moments.m[1][1].re;
    let n2 = moments.m[2][2].re;
    if !(n1 > 0.0) {
        return Err(Error::Undefined(format!("g2(0) needs a positive photon number, got {n1}")));
    }
    let s1 = moments.sigma[1][1];
    let s2 = moments.sigma[2][2];
    let d2 = 1.0 / (n1 * n1);
    let d1 = -2.0 * n2 / (n1 * n1 * n1);
    let var = (d2 * s2).powi(2) + (d1 * s1).powi(2) + 2.0 * d1 * d2 * moments.cov_11_22;
    Ok(G2 {
        value: n2 / (n1 * n1),
        sigma: var.max(0.0).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WignerValue {
    pub value: f64,
    /// Set when |α| lies outside the region where truncation is trusted.
    pub truncation_warning: bool,
}

fn displacement(alpha: C, dim: usize) -> DMatrix<C> {
    let a = annihilation(dim);
    let gen = a.adjoint() * alpha - &a * alpha.conj();
    gen.exp()
}

fn wigner_with(rho_big: &DMatrix<C>, alpha: C) -> Result<WignerValue> {
    let dim = rho_big.nrows();
    let d = displacement(alpha, dim);
    // W(α) = (2/π)·Tr[D†(α) ρ D(α) Π]
    let shifted = d.adjoint() * rho_big * &d;
    let mut tr = C::new(0.0, 0.0);
    for n in 0..dim {
        let parity = if n % 2 == 0 { 1.0 } else { -1.0 };
        tr += shifted[(n, n)] * parity;
    }
    if tr.im.abs() > 1e-9 {
        return Err(Error::Undefined(format!("Wigner value has imaginary part {:e}", tr.im)));
    }
    Ok(WignerValue {
        value: 2.0 / PI * tr.re,
        truncation_warning: alpha.norm() > WIGNER_SAFE_RADIUS,
    })
}

/// Wigner function by displaced parity.
pub fn wigner(rho: &DensityMatrix, alpha: C) -> Result<WignerValue> {
    if rho.dim() > WIGNER_DIM / 2 {
        return Err(invalid("rho", "dimension too large for the Wigner workspace"));
    }
    wigner_with(&rho.padded(WIGNER_DIM).m, alpha)
}

/// Wigner function on a square grid `[-extent, extent]²` with `n` points per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerGrid {
    pub axis: Vec<f64>,
    /// `values[i][j]` at `α = axis[i] + i·axis[j]`.
    pub values: Vec<Vec<f64>>,
    pub truncation_warning: bool,
}

impl WignerGrid {
    pub fn min(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["re_alpha", "im_alpha", "w"])?;
        for (i, x) in self.axis.iter().enumerate() {
            for (j, y) in self.axis.iter().enumerate() {
                wtr.write_record([format!("{x:e}"), format!("{y:e}"), format!("{:e}", self.values[i][j])])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn wigner_grid(rho: &DensityMatrix, extent: f64, n: usize) -> Result<WignerGrid> {
    if n < 2 || !(extent > 0.0) {
        return Err(invalid("grid", "need n >= 2 and extent > 0"));
    }
    let big = rho.padded(WIGNER_DIM).m;
    let axis: Vec<f64> = (0..n).map(|i| -extent + 2.0 * extent * i as f64 / (n - 1) as f64).collect();
    let values: Vec<Vec<f64>> = axis
        .par_iter()
        .map(|&x| {
            axis.iter()
                .map(|&y| wigner_with(&big, C::new(x, y)).map(|w| w.value))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(WignerGrid {
        axis,
        values,
        truncation_warning: extent * std::f64::consts::SQRT_2 > WIGNER_SAFE_RADIUS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_rho(seed: u64) -> DensityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..N_PARAMS).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = t_from_params(&x);
        let tt = t.adjoint() * &t;
        DensityMatrix::new(&tt / C::new(tt.trace().re, 0.0)).unwrap()
    }

    #[test]
    fn fock_and_plus_moments() {
        let m = moments_from_rho(&DensityMatrix::fock(1, 3), 4);
        assert_relative_eq!(m.m[1][1].re, 1.0, epsilon = 1e-14);
        assert!(m.m[0][1].norm() < 1e-14);
        assert!(m.m[2][2].norm() < 1e-14);

        let plus = DensityMatrix::pure(&[C::new(1.0, 0.0), C::new(1.0, 0.0)]).unwrap();
        let m = moments_from_rho(&plus, 4);
        assert_relative_eq!(m.m[0][1].re, 0.5, epsilon = 1e-14);
        assert_relative_eq!(m.m[1][1].re, 0.5, epsilon = 1e-14);
    }

    /// Element-by-element sums over Fock indices, without matrix products.
    fn brute_moment(rho: &DensityMatrix, n: usize, k: usize) -> C {
        let d = rho.dim();
        let fact = |x: usize| (1..=x).map(|v| v as f64).product::<f64>();
        let mut acc = C::new(0.0, 0.0);
        // ⟨(a†)^n a^k⟩ = Σ_j ρ_{j,i}·sqrt(j!/(j−k)!)·sqrt(i!/(j−k)!), i = j − k + n
        for j in k..d {
            let i = j - k + n;
            if i >= d {
                continue;
            }
            let c = (fact(j) / fact(j - k)).sqrt() * (fact(i) / fact(j - k)).sqrt();
            acc += rho.matrix()[(j, i)] * c;
        }
        acc
    }

    #[test]
    fn moments_match_brute_force() {
        for seed in 0..10 {
            let rho = random_rho(seed);
            let m = moments_from_rho(&rho, 4);
            for n in 0..=4 {
                for k in 0..=4 - n {
                    assert!((m.m[n][k] - brute_moment(&rho, n, k)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let target = moments_from_rho(&random_rho(3), 4);
        let mut noisy = target.clone();
        noisy.m[0][1] += C::new(0.01, -0.02);
        noisy.m[1][0] = noisy.m[0][1].conj();
        for n in 0..5 {
            for k in 0..5 {
                noisy.sigma[n][k] = 0.01 * (1 + n + k) as f64;
            }
        }
        let like = Likelihood::new(&noisy, 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..N_PARAMS).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g = vec![0.0; N_PARAMS];
        like.eval(&x, &mut g);
        let mut scratch = vec![0.0; N_PARAMS];
        for p in 0..N_PARAMS {
            let h = 1e-6;
            let mut up = x.clone();
            up[p] += h;
            let mut dn = x.clone();
            dn[p] -= h;
            let fd = (like.eval(&up, &mut scratch) - like.eval(&dn, &mut scratch)) / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-6 * (1.0 + g[p].abs()), "param {p}: {fd} vs {}", g[p]);
        }
    }

    #[test]
    fn mle_recovers_fock_one() {
        let m = moments_from_rho(&DensityMatrix::fock(1, 3), 4);
        let res = mle_density_matrix(&m).unwrap();
        assert!(fidelity(&res.rho, &DensityMatrix::fock(1, 3)) >= 0.999);
    }

    #[test]
    fn mle_recovers_vacuum() {
        let m = moments_from_rho(&DensityMatrix::fock(0, 3), 4);
        let res = mle_density_matrix(&m).unwrap();
        assert!(fidelity(&res.rho, &DensityMatrix::fock(0, 3)) >= 0.999);
    }

    #[test]
    fn mle_from_pulse_moments() {
        let mut m = MomentSet::exact([[C::new(0.0, 0.0); 5]; 5]);
        m.m[0][0] = C::new(1.0, 0.0);
        m.m[1][1] = C::new(0.618, 0.0);
        m.m[0][1] = C::new(0.036, 0.0);
        m.m[1][0] = C::new(0.036, 0.0);
        for n in 0..5 {
            for k in 0..5 {
                m.sigma[n][k] = 0.003;
            }
        }
        let res = mle_density_matrix(&m).unwrap();
        let p = res.rho.populations();
        assert!((p[1] - 0.618).abs() < 0.01 && (p[0] - 0.382).abs() < 0.01 && p[2] < 0.01, "{p:?}");
    }

    #[test]
    fn mle_round_trip_random_states() {
        for seed in 10..16 {
            let rho = random_rho(seed);
            let res = mle_density_matrix(&moments_from_rho(&rho, 4)).unwrap();
            let f = fidelity(&res.rho, &rho);
            assert!(f >= 0.999, "seed {seed}: fidelity {f}, flags {:?}", res.flags);
        }
    }

    #[test]
    fn g2_of_reference_states() {
        let single = moments_from_rho(&DensityMatrix::fock(1, 3), 4);
        assert!(g2_zero(&single).unwrap().value.abs() < 1e-14);

        let alpha = C::new(0.6, 0.3);
        let mut m = [[C::new(0.0, 0.0); 5]; 5];
        for n in 0..5 {
            for k in 0..5 - n {
                m[n][k] = alpha.conj().powu(n as u32) * alpha.powu(k as u32);
            }
        }
        assert_relative_eq!(g2_zero(&MomentSet::exact(m)).unwrap().value, 1.0, epsilon = 1e-12);

        let vac = moments_from_rho(&DensityMatrix::fock(0, 3), 4);
        assert!(matches!(g2_zero(&vac), Err(Error::Undefined(_))));
    }

    #[test]
    fn g2_error_propagation() {
        let mut m = MomentSet::exact([[C::new(0.0, 0.0); 5]; 5]);
        m.m[1][1] = C::new(0.5, 0.0);
        m.m[2][2] = C::new(0.1, 0.0);
        m.sigma[1][1] = 0.01;
        m.sigma[2][2] = 0.02;
        let g = g2_zero(&m).unwrap();
        let expect = ((0.02 / 0.25f64).powi(2) + (2.0 * 0.1 * 0.01 / 0.125f64).powi(2)).sqrt();
        assert_relative_eq!(g.sigma, expect, max_relative = 1e-12);
    }

    #[test]
    fn wigner_at_origin() {
        let w0 = wigner(&DensityMatrix::fock(0, 3), C::new(0.0, 0.0)).unwrap();
        assert!((w0.value - 2.0 / PI).abs() < 1e-12);
        let w1 = wigner(&DensityMatrix::fock(1, 3), C::new(0.0, 0.0)).unwrap();
        assert!((w1.value + 2.0 / PI).abs() < 1e-9);
        assert!(!w1.truncation_warning);
        assert!(wigner(&DensityMatrix::fock(1, 3), C::new(2.5, 0.0)).unwrap().truncation_warning);
    }

    #[test]
    fn wigner_of_fock_one_closed_form() {
        let rho = DensityMatrix::fock(1, 3);
        for a in [C::new(0.3, 0.1), C::new(-0.8, 0.5), C::new(1.2, -1.1)] {
            let x = a.norm_sqr();
            let exact = 2.0 / PI * (4.0 * x - 1.0) * (-2.0 * x).exp();
            assert!((wigner(&rho, a).unwrap().value - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn wigner_peaks_at_coherent_amplitude() {
        // |β⟩ truncated to three levels is close enough for β = 0.3
        let b = C::new(0.3, 0.0);
        let amps = [C::new(1.0, 0.0), b, b * b / 2f64.sqrt()];
        let rho = DensityMatrix::pure(&amps).unwrap();
        let at = wigner(&rho, b).unwrap().value;
        let opposite = wigner(&rho, -b).unwrap().value;
        assert!(at > opposite);
        assert!((at - 2.0 / PI).abs() < 0.01);
    }

    #[test]
    fn wigner_integrates_to_one() {
        let rates = crate::device::RateSet::table1();
        for st in [
            DensityMatrix::fock(0, 3),
            crate::measurement::filtered_mode_state(0.95, C::new(0.0, -0.05), &rates).unwrap(),
            crate::measurement::filtered_mode_state(0.5, C::new(0.0, -0.49), &rates).unwrap(),
        ] {
            let n = 81;
            let grid = wigner_grid(&st, 2.0, n).unwrap();
            let h = grid.axis[1] - grid.axis[0];
            let mut total = 0.0;
            for (i, x) in grid.axis.iter().enumerate() {
                for (j, y) in grid.axis.iter().enumerate() {
                    if x * x + y * y <= 4.0 {
                        total += grid.values[i][j] * h * h;
                    }
                }
            }
            assert!((total - 1.0).abs() < 0.02, "{total}");
        }
    }

    #[test]
    fn fidelity_properties() {
        let a = random_rho(1);
        let b = random_rho(2);
        assert_relative_eq!(fidelity(&a, &a), 1.0, epsilon = 1e-9);
        let f = fidelity(&a, &b);
        assert!((0.0..=1.0).contains(&f));
        assert_relative_eq!(f, fidelity(&b, &a), epsilon = 1e-9);
        assert!(fidelity(&DensityMatrix::fock(0, 3), &DensityMatrix::fock(1, 3)) < 1e-12);
    }

    #[test]
    fn invalid_density_rejected() {
        let mut m = DMatrix::<C>::zeros(2, 2);
        m[(0, 0)] = C::new(1.2, 0.0);
        m[(1, 1)] = C::new(-0.2, 0.0);
        assert!(DensityMatrix::new(m).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mle_output_is_physical(seed in 0u64..1000, noise in 0.0f64..0.2) {
            let mut m = moments_from_rho(&random_rho(seed), 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for n in 0..3 {
                for k in n..3 {
                    if n + k == 0 { continue; }
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let f: f64 = StandardNormal.sample(&mut rng);
                    m.m[n][k] += C::new(e * noise, if n == k { 0.0 } else { f * noise });
                    m.m[k][n] = m.m[n][k].conj();
                    m.sigma[n][k] = noise.max(0.01);
                    m.sigma[k][n] = noise.max(0.01);
                }
            }
            let res = mle_density_matrix_with(&m, &MleOptions { restarts: 5, max_iter: 800, ..Default::default() }).unwrap();
            prop_assert!(res.rho.eigenvalues().iter().all(|&e| e >= -1e-10));
            prop_assert!((res.rho.matrix().trace().re - 1.0).abs() < 1e-10);
        }

        #[test]
        fn wigner_is_bounded(seed in 0u64..1000, re in -2.0f64..2.0, im in -2.0f64..2.0) {
            let w = wigner(&random_rho(seed), C::new(re, im)).unwrap().value;
            prop_assert!(w.abs() <= 2.0 / PI + 1e-9);
        }
    }
}
