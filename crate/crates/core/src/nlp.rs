//! Box-constrained optimizers shared by the estimator and the planner.
//!
//! `solve_nls` is Levenberg-Marquardt with projection onto the box;
//! `solve_box_min` is projected gradient with Barzilai-Borwein step lengths
//! and Armijo backtracking. Both keep every iterate feasible and only accept
//! steps that do not increase the objective.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 100,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-12,
            initial_damping: 1e-3,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters >= 1
            && self.gradient_tolerance > 0.0
            && self.step_tolerance > 0.0
            && self.initial_damping > 0.0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad solver options {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxIters,
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Norm of the projected gradient `x - P(x - g)` at `x`.
    pub gradient_norm: f64,
    /// Objective at the start and after every accepted step.
    pub history: Vec<f64>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn check_box(x0: &[f64], lower: &[f64], upper: &[f64]) -> Result<()> {
    if lower.len() != x0.len() || upper.len() != x0.len() {
        return Err(Error::Dimension(format!(
            "x0 has {} entries, bounds {} and {}",
            x0.len(),
            lower.len(),
            upper.len()
        )));
    }
    for i in 0..x0.len() {
        if !(lower[i] <= x0[i] && x0[i] <= upper[i]) {
            return Err(Error::InvalidArgument(format!(
                "x0[{i}] = {} outside [{}, {}]",
                x0[i], lower[i], upper[i]
            )));
        }
    }
    Ok(())
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(lo, hi);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| {
            let d = xi - (xi - gi).clamp(lo, hi);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Minimize `0.5 |r(x)|^2` over the box `[lower, upper]`.
pub fn solve_nls<R, J>(
    mut residual: R,
    mut jacobian: J,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &SolverOptions,
) -> Result<SolveReport>
where
    R: FnMut(&[f64]) -> Result<DVector<f64>>,
    J: FnMut(&[f64]) -> Result<DMatrix<f64>>,
{
    opts.validate()?;
    check_box(x0, lower, upper)?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = residual(&x)?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residual at the initial point".into()));
    }
    let mut f = 0.5 * r.norm_squared();
    let mut mu = opts.initial_damping;
    let mut jac = jacobian(&x)?;
    if jac.nrows() != r.len() || jac.ncols() != n {
        return Err(Error::Dimension(format!(
            "jacobian {}x{}, residual {}, x {}",
            jac.nrows(),
            jac.ncols(),
            r.len(),
            n
        )));
    }
    let mut g = jac.transpose() * &r;
    let mut gnorm = projected_gradient_norm(&x, g.as_slice(), lower, upper);
    let mut iterations = 0;
    let mut termination = Termination::MaxIters;
    let mut history = vec![f];

    while iterations < opts.max_iters {
        if gnorm <= opts.gradient_tolerance {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let mut accepted = false;
        while mu < 1e16 {
            // damping scaled by the diagonal keeps the step size units-aware
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                mu *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            project(&mut trial, lower, upper);
            let r_new = residual(&trial)?;
            let f_new = 0.5 * r_new.norm_squared();
            if f_new.is_finite() && f_new <= f {
                let moved = trial
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
                x = trial;
                r = r_new;
                f = f_new;
                history.push(f);
                mu = (mu / 10.0).max(1e-15);
                accepted = moved > opts.step_tolerance * scale;
                break;
            }
            mu *= 10.0;
        }
        jac = jacobian(&x)?;
        g = jac.transpose() * &r;
        gnorm = projected_gradient_norm(&x, g.as_slice(), lower, upper);
        if !accepted {
            termination = if gnorm <= opts.gradient_tolerance {
                Termination::Converged
            } else {
                Termination::Stalled
            };
            break;
        }
    }
    if termination == Termination::MaxIters && gnorm <= opts.gradient_tolerance {
        termination = Termination::Converged;
    }
    Ok(SolveReport {
        x,
        objective: f,
        iterations,
        termination,
        gradient_norm: gnorm,
        history,
    })
}

/// Minimize a smooth `cost` over the box, given its `gradient`.
pub fn solve_box_min<C, G>(
    mut cost: C,
    mut gradient: G,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &SolverOptions,
) -> Result<SolveReport>
where
    C: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    solve_box_min_fg(
        |x, want_grad| {
            let f = cost(x)?;
            let g = if want_grad { Some(gradient(x)?) } else { None };
            Ok((f, g))
        },
        x0,
        lower,
        upper,
        opts,
    )
}

/// As [`solve_box_min`] with one callback returning the cost and, when
/// asked, the gradient. Useful when both come out of the same pass.
pub fn solve_box_min_fg<F>(mut fg: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &SolverOptions) -> Result<SolveReport>
where
    F: FnMut(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    opts.validate()?;
    check_box(x0, lower, upper)?;
    let mut x = x0.to_vec();
    let (mut f, g) = fg(&x, true)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("cost at the initial point".into()));
    }
    let mut g = g.ok_or_else(|| Error::InvalidArgument("gradient callback returned nothing".into()))?;
    if g.len() != x.len() {
        return Err(Error::Dimension(format!("gradient {} for {} variables", g.len(), x.len())));
    }
    let mut gnorm = projected_gradient_norm(&x, &g, lower, upper);
    let mut alpha = {
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            1.0 / n
        } else {
            1.0
        }
    };
    let mut iterations = 0;
    let mut termination = Termination::MaxIters;
    let mut history = vec![f];

    while iterations < opts.max_iters {
        if gnorm <= opts.gradient_tolerance {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        let mut step = alpha;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            project(&mut trial, lower, upper);
            let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
            let (f_new, _) = fg(&trial, false)?;
            if f_new.is_finite() && f_new <= f + opts.armijo * decrease {
                accepted = Some((trial, f_new));
                break;
            }
            step *= opts.backtrack;
        }
        let Some((trial, f_new)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        let (_, g_new) = fg(&trial, true)?;
        let g_new = g_new.ok_or_else(|| Error::InvalidArgument("gradient callback returned nothing".into()))?;
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = trial;
        f = f_new;
        history.push(f);
        g = g_new;
        gnorm = projected_gradient_norm(&x, &g, lower, upper);
        if ss.sqrt() <= opts.step_tolerance * scale {
            termination = if gnorm <= opts.gradient_tolerance {
                Termination::Converged
            } else {
                Termination::Stalled
            };
            break;
        }
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { (step * 2.0).min(1e10) };
    }
    if termination == Termination::MaxIters && gnorm <= opts.gradient_tolerance {
        termination = Termination::Converged;
    }
    Ok(SolveReport {
        x,
        objective: f,
        iterations,
        termination,
        gradient_norm: gnorm,
        history,
    })
}

/// Central-difference gradient with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("difference step {h}")));
    }
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// Central-difference Jacobian of a vector function.
pub fn finite_diff_jacobian<F>(mut f: F, x: &[f64], h: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<DVector<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("difference step {h}")));
    }
    let m = f(x)?.len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        jac.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}
