//! Small dense optimizers shared by the calibration and fitting code:
//! Nelder–Mead for derivative-free searches, Levenberg–Marquardt for least
//! squares and BFGS for smooth likelihoods.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub max_iter: usize,
    /// Stop once the simplex value spread drops below `rel_tol·|f_best| + abs_tol`.
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-10,
            abs_tol: 1e-24,
        }
    }
}

/// Nelder–Mead with the standard coefficients (1, 2, 1/2, 1/2).
///
/// `steps` sets the initial simplex edge along each coordinate.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], opts: SimplexOptions) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(steps.len(), n);
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += steps[i];
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        // order best .. worst
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        values = idx.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        if spread <= opts.rel_tol * values[0].abs() + opts.abs_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };

        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-0.5);
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = f(&xc);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink toward the best vertex
        let best = simplex[0].clone();
        for i in 1..=n {
            for (x, b) in simplex[i].iter_mut().zip(&best) {
                *x = b + 0.5 * (*x - b);
            }
            values[i] = f(&simplex[i]);
        }
    }
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    SimplexResult {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative step tolerance in scaled parameter units.
    pub step_tol: f64,
    pub initial_lambda: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            step_tol: 1e-10,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// `s²·(JᵀJ)⁻¹` with `s² = SSR/(m − n)`; `None` if JᵀJ is singular.
    pub covariance: Option<DMatrix<f64>>,
    pub ssr: f64,
    pub dof: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl LmResult {
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect())
    }

    pub fn residual_norm(&self) -> f64 {
        self.ssr.sqrt()
    }
}

fn jacobian<F>(f: &mut F, p: &[f64], scales: &[f64], m: usize) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = p.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut q = p.to_vec();
    for j in 0..n {
        let h = 1e-6 * (p[j].abs() + scales[j]);
        q[j] = p[j] + h;
        let up = f(&q);
        q[j] = p[j] - h;
        let down = f(&q);
        q[j] = p[j];
        for i in 0..m {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    jac
}

fn ssr(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Levenberg–Marquardt with Marquardt diagonal damping and central-difference
/// Jacobians. `scales` gives a typical magnitude for every parameter; it sets
/// both the finite-difference step and the step-size test.
pub fn levenberg_marquardt<F>(mut residuals: F, p0: &[f64], scales: &[f64], opts: LmOptions) -> LmResult
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = p0.len();
    assert_eq!(scales.len(), n);
    let mut p = p0.to_vec();
    let mut r = residuals(&p);
    let m = r.len();
    let mut cost = ssr(&r);
    let mut lambda = opts.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;
    let mut jac = jacobian(&mut residuals, &p, scales, m);

    while iterations < opts.max_iter {
        iterations += 1;
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(delta) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(x, d)| x + d).collect();
            let rt = residuals(&trial);
            let ct = ssr(&rt);
            let step = delta
                .iter()
                .zip(p.iter().zip(scales))
                .map(|(d, (x, s))| (d / (x.abs() + s)).powi(2))
                .sum::<f64>()
                .sqrt();
            if ct.is_finite() && ct <= cost {
                let rel_drop = (cost - ct) / cost.max(1e-300);
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                small_step = step < opts.step_tol || rel_drop < 1e-16;
                break;
            }
            if step < opts.step_tol {
                small_step = true;
                break;
            }
            lambda *= 10.0;
        }
        if accepted {
            jac = jacobian(&mut residuals, &p, scales, m);
        }
        if small_step || !accepted {
            converged = small_step || cost == 0.0;
            break;
        }
    }

    let dof = m.saturating_sub(n);
    let jtj = jac.transpose() * &jac;
    let covariance = if dof > 0 {
        let s2 = cost / dof as f64;
        jtj.try_inverse().map(|inv| inv * s2).filter(|c| c.iter().all(|v| v.is_finite()))
    } else {
        None
    };
    LmResult {
        params: p,
        covariance,
        ssr: cost,
        dof,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            grad_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Quasi-Newton minimization with an Armijo backtracking line search.
/// `fg` returns the objective and writes the gradient into its second argument.
pub fn bfgs<F>(mut fg: F, x0: &[f64], opts: BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut g = DVector::zeros(n);
    let mut fx = fg(x.as_slice(), g.as_mut_slice());
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    let mut gnew = DVector::zeros(n);
    let mut stalled = 0;

    while iterations < opts.max_iter {
        if g.norm() < opts.grad_tol {
            break;
        }
        iterations += 1;
        let mut dir = -(&h * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let mut alpha = 1.0;
        let mut fnew;
        let mut xnew;
        loop {
            xnew = &x + &dir * alpha;
            fnew = fg(xnew.as_slice(), gnew.as_mut_slice());
            if fnew.is_finite() && fnew <= fx + 1e-4 * alpha * slope {
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-20 {
                break;
            }
        }
        if !(fnew <= fx) {
            // no descent possible at machine precision
            if h != DMatrix::identity(n, n) {
                h = DMatrix::identity(n, n);
                continue;
            }
            break;
        }
        let s = &xnew - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if fx - fnew <= 1e-16 * fx.abs().max(1e-300) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        x = xnew;
        fx = fnew;
        g.copy_from(&gnew);
        if stalled > 20 {
            break;
        }
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
    }
    let grad_norm = g.norm();
    BfgsResult {
        x: x.iter().copied().collect(),
        value: fx,
        grad_norm,
        iterations,
        converged: grad_norm < opts.grad_tol,
    }
}
