//! Small unconstrained quasi-Newton minimizer used by the likelihood fits.
//!
//! Constraints are handled by the callers through smooth reparameterizations,
//! so plain BFGS with numerical gradients is enough here.

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the max-norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Stop when the objective improves by less than this (relative).
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-6,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], out: &mut [f64]) {
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out[i] = (up - down) / (2.0 * h);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` from `x0` with BFGS, central-difference gradients and an
/// Armijo backtracking line search. Non-finite objective values are treated
/// as +infinity, which the line search backs away from.
pub fn bfgs<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Minimum {
    let k = x0.len();
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut x = x0.to_vec();
    let mut fx = eval(&x);
    if !fx.is_finite() {
        return Minimum {
            x,
            f: fx,
            iterations: 0,
            converged: false,
        };
    }
    let mut g = vec![0.0; k];
    gradient(&mut eval, &x, &mut g);
    // Inverse Hessian approximation, row-major.
    let mut hinv = vec![0.0; k * k];
    for i in 0..k {
        hinv[i * k + i] = 1.0;
    }
    let mut dir = vec![0.0; k];
    let mut x_new = vec![0.0; k];
    let mut g_new = vec![0.0; k];
    for iter in 0..opts.max_iter {
        if g.iter().all(|v| v.abs() < opts.grad_tol) {
            return Minimum {
                x,
                f: fx,
                iterations: iter,
                converged: true,
            };
        }
        for i in 0..k {
            dir[i] = -(0..k).map(|j| hinv[i * k + j] * g[j]).sum::<f64>();
        }
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // Not a descent direction: reset to steepest descent.
            hinv.iter_mut().enumerate().for_each(|(i, v)| *v = if i % (k + 1) == 0 { 1.0 } else { 0.0 });
            for i in 0..k {
                dir[i] = -g[i];
            }
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut f_new = f64::INFINITY;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..k {
                x_new[i] = x[i] + step * dir[i];
            }
            f_new = eval(&x_new);
            if f_new <= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Minimum {
                x,
                f: fx,
                iterations: iter,
                // A failed line search at a stationary point is convergence in
                // all but name; flag it only when the gradient is still large.
                converged: g.iter().all(|v| v.abs() < opts.grad_tol.sqrt()),
            };
        }
        gradient(&mut eval, &x_new, &mut g_new);
        let s: Vec<f64> = (0..k).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..k).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            let hy: Vec<f64> = (0..k).map(|i| (0..k).map(|j| hinv[i * k + j] * y[j]).sum()).collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..k {
                for j in 0..k {
                    hinv[i * k + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
        let improvement = fx - f_new;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if improvement.abs() <= opts.f_tol * fx.abs().max(1.0) {
            return Minimum {
                x,
                f: fx,
                iterations: iter + 1,
                converged: true,
            };
        }
    }
    Minimum {
        x,
        f: fx,
        iterations: opts.max_iter,
        converged: false,
    }
}

/// Map unconstrained `theta` onto the open simplex `{p_i > 0, sum p_i < 1}`:
/// `p_i = exp(theta_i) / (1 + sum_j exp(theta_j))`.
pub fn to_simplex(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().fold(0.0_f64, |acc, t| acc.max(*t));
    let denom = (-m).exp() + theta.iter().map(|t| (t - m).exp()).sum::<f64>();
    theta.iter().map(|t| (t - m).exp() / denom).collect()
}

/// Inverse of [`to_simplex`]; entries must be positive with sum below 1.
pub fn from_simplex(p: &[f64]) -> Vec<f64> {
    let slack = 1.0 - p.iter().sum::<f64>();
    p.iter().map(|v| (v / slack).ln()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = bfgs(f, &[-1.2, 1.0], &BfgsOptions { max_iter: 500, ..Default::default() });
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m);
    }

    #[test]
    fn minimizes_quadratic() {
        let f = |x: &[f64]| 3.0 * (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2) + x[0] * x[1];
        let m = bfgs(f, &[0.0, 0.0], &BfgsOptions::default());
        // Stationary point of the quadratic: 6(x-2) + y = 0, 2(y+1) + x = 0.
        let (x, y) = (26.0 / 11.0, -24.0 / 11.0);
        assert!((m.x[0] - x).abs() < 1e-5 && (m.x[1] - y).abs() < 1e-5);
        assert!(m.converged);
    }

    #[test]
    fn simplex_round_trip() {
        let p = [0.05, 0.9, 0.02];
        let back = to_simplex(&from_simplex(&p));
        for (a, b) in p.iter().zip(&back) {
            assert!((a - b).abs() < 1e-15);
        }
        let q = to_simplex(&[800.0, 3.0]);
        assert!(q.iter().all(|v| v.is_finite()) && q.iter().sum::<f64>() <= 1.0);
    }
}
