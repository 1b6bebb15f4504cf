//! Receding-horizon planner.
//!
//! The team's turn rates over the horizon are chosen jointly to minimize
//!
//! ```text
//! J = Ts * sum_k sum_i [ C1n_i(k) + W_i(k) * C2n_i(k) ]
//! ```
//!
//! where `C1` is the squared distance to the goal, `C2 = (eta - lambda_i)^2`
//! when the vehicle's algebraic connectivity `lambda_i` is below `eta` (else
//! 0), `W_i` switches the connectivity term on while `3 sigma_p >= sigma_c`,
//! and `C1n`, `C2n` are the normalized terms.
//!
//! Controls are piecewise constant over blocks of `block_steps` plant steps.
//! Vehicles that already arrived are frozen: speed 0, turn rate pinned to 0,
//! no cost terms, but they stay in the measurement graph.
//!
//! The gradient is computed by an adjoint pass: `d lambda_2 / d w_e` comes
//! from the Fiedler vector (`(v_a - v_b)^2`), the adjacency slope maps it to
//! edge lengths, and the Euler rollout is differentiated backwards. The
//! adaptive weight is piecewise constant and contributes no gradient. Where
//! eigenvalues cross or edges enter/leave the sensor range the objective is
//! only piecewise smooth; the solver treats those kinks as plateaus.

use std::f64::consts::PI;

use crate::covariance::{avg_geometry, dead_reckoning, sigma_p_bearing};
use crate::kinematics::step;
use crate::nlp::{finite_diff_grad, solve_box_min_fg, SolveReport, SolverOptions, Termination};
use crate::rpmg::{build_rpmg_from_positions, lambda2, lambda2_with_vector, vehicle_laplacian, AdjacencyParams};
use crate::world::{ControlInput, GradientMode, Normalization, Scenario, SigmaSource, VehicleState, WeightMode};
use crate::{Error, Result};

/// Squared distance to the destination.
pub fn c1_cost(position: [f64; 2], destination: [f64; 2]) -> f64 {
    let (dx, dy) = (position[0] - destination[0], position[1] - destination[1]);
    dx * dx + dy * dy
}

/// `(eta - lambda)^2` below the connectivity target, 0 at or above it.
pub fn c2_cost(lambda: f64, eta: f64) -> f64 {
    if lambda >= eta {
        0.0
    } else {
        (eta - lambda) * (eta - lambda)
    }
}

/// `w` while the 3-sigma position bound reaches `sigma_c`, else 0.
pub fn adaptive_weight(sigma_p: f64, sigma_c: f64, w: f64) -> f64 {
    if 3.0 * sigma_p >= sigma_c {
        w
    } else {
        0.0
    }
}

/// Min-max scaling to `[0, 1]`; a constant series maps to zeros.
pub fn normalize_series(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("series".into()));
    }
    let (lo, hi) = min_max(values);
    let span = hi - lo;
    Ok(values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect())
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// `sum_k a_k * normalized(c)_k` and its gradient with respect to `c`.
fn weighted_minmax(c: &[f64], a: &[f64]) -> (f64, Vec<f64>) {
    let n = c.len();
    let (mut imin, mut imax) = (0, 0);
    for k in 1..n {
        if c[k] < c[imin] {
            imin = k;
        }
        if c[k] > c[imax] {
            imax = k;
        }
    }
    let span = c[imax] - c[imin];
    if span <= 0.0 {
        return (0.0, vec![0.0; n]);
    }
    let sum_a: f64 = a.iter().sum();
    let s: f64 = c.iter().zip(a).map(|(ck, ak)| ak * (ck - c[imin])).sum();
    let mut g: Vec<f64> = a.iter().map(|ak| ak / span).collect();
    g[imin] += -sum_a / span + s / (span * span);
    g[imax] -= s / (span * span);
    (s / span, g)
}

/// Planner constants, fixed for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct NmpcParams {
    pub speed: f64,
    pub ts: f64,
    pub horizon_steps: usize,
    pub block_steps: usize,
    pub omega_bounds: (f64, f64),
    pub eta: f64,
    pub w: f64,
    pub sigma_c: f64,
    pub adjacency: AdjacencyParams,
    pub normalization: Normalization,
    pub weight_mode: WeightMode,
    pub sigma_source: SigmaSource,
    pub gradient: GradientMode,
    /// `q_x + q_y`, the per-step dead-reckoning growth of `sigma_p^2`.
    pub process_trace: f64,
    pub seed_plans: bool,
    pub solver: SolverOptions,
}

impl NmpcParams {
    pub fn from_scenario(s: &Scenario) -> Self {
        NmpcParams {
            speed: s.speed_mps,
            ts: s.step_s,
            horizon_steps: s.horizon_steps(),
            block_steps: s.planner.control_block_steps.max(1),
            omega_bounds: s.omega_bounds(),
            eta: s.eta,
            w: s.connectivity_weight,
            sigma_c: s.sigma_c_m,
            adjacency: AdjacencyParams {
                kappa: s.kappa,
                rho: s.rho_m,
                rs: s.sensor_range_m,
            },
            normalization: s.planner.normalization,
            weight_mode: s.planner.weight_mode,
            sigma_source: s.planner.sigma_source,
            gradient: s.planner.gradient,
            process_trace: s.process_variance[0] + s.process_variance[1],
            seed_plans: s.planner.seed_plans,
            solver: SolverOptions {
                max_iters: s.planner.max_iters.max(1),
                gradient_tolerance: s.planner.gradient_tolerance,
                ..SolverOptions::default()
            },
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.horizon_steps.div_ceil(self.block_steps)
    }
}

/// One planning instant: current estimates and team status.
#[derive(Debug, Clone, PartialEq)]
pub struct NmpcProblem {
    pub params: NmpcParams,
    pub states: Vec<VehicleState>,
    pub goals: Vec<[f64; 2]>,
    /// Vehicles still travelling; the rest are frozen.
    pub active: Vec<bool>,
    /// Current `sigma_p` of each vehicle (from the estimator).
    pub sigma_p: Vec<f64>,
    pub landmarks: Vec<[f64; 2]>,
    pub cooperation: bool,
}

/// Cost terms of one vehicle at one predicted step.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct StepCost {
    pub c1: f64,
    pub c2: f64,
    pub lambda: f64,
    pub sigma_p: f64,
    pub weight: f64,
    pub c1_norm: f64,
    pub c2_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostBreakdown {
    /// `steps[k][i]` for predicted steps `k = 1..=H`; frozen vehicles hold
    /// zeros except for `lambda` and `sigma_p`.
    pub steps: Vec<Vec<StepCost>>,
    pub total: f64,
}

struct Evaluation {
    cost: f64,
    gradient: Option<Vec<f64>>,
    breakdown: Option<CostBreakdown>,
}

impl NmpcProblem {
    pub fn n_vehicles(&self) -> usize {
        self.states.len()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vehicles() * self.params.n_blocks()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_vehicles();
        if n == 0 {
            return Err(Error::Empty("no vehicles to plan for".into()));
        }
        if self.goals.len() != n || self.active.len() != n || self.sigma_p.len() != n {
            return Err(Error::Dimension(format!(
                "{n} vehicles, {} goals, {} flags, {} sigmas",
                self.goals.len(),
                self.active.len(),
                self.sigma_p.len()
            )));
        }
        if self.params.horizon_steps == 0 {
            return Err(Error::InvalidArgument("horizon must be at least one step".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let nb = self.params.n_blocks();
        let (lo, hi) = self.params.omega_bounds;
        let mut lower = Vec::with_capacity(self.n_vars());
        let mut upper = Vec::with_capacity(self.n_vars());
        for &a in &self.active {
            let (l, u) = if a { (lo, hi) } else { (0.0, 0.0) };
            lower.extend(std::iter::repeat(l).take(nb));
            upper.extend(std::iter::repeat(u).take(nb));
        }
        (lower, upper)
    }

    fn speed(&self, i: usize) -> f64 {
        if self.active[i] {
            self.params.speed
        } else {
            0.0
        }
    }

    /// Bounds on the squared goal distance over the horizon, from the current
    /// distance and the distance coverable in the horizon.
    fn reachable_range(&self, i: usize) -> (f64, f64) {
        let d = c1_cost(self.states[i].position(), self.goals[i]).sqrt();
        let reach = self.speed(i) * self.params.ts * self.params.horizon_steps as f64;
        ((d - reach).max(0.0).powi(2), (d + reach).powi(2))
    }

    fn evaluate(&self, u: &[f64], want_grad: bool, want_breakdown: bool) -> Result<Evaluation> {
        let p = &self.params;
        let n = self.n_vehicles();
        let nb = p.n_blocks();
        let h = p.horizon_steps;
        if u.len() != n * nb {
            return Err(Error::Dimension(format!("{} controls, expected {}", u.len(), n * nb)));
        }

        // rollout: traj[k][i], k = 0..=H
        let mut traj = Vec::with_capacity(h + 1);
        traj.push(self.states.clone());
        for k in 0..h {
            let b = k / p.block_steps;
            let next: Vec<VehicleState> = (0..n)
                .map(|i| step(&traj[k][i], ControlInput::new(u[i * nb + b]), self.speed(i), p.ts))
                .collect();
            traj.push(next);
        }

        let mut c1 = vec![vec![0.0; h]; n];
        let mut c2 = vec![vec![0.0; h]; n];
        let mut lam = vec![vec![0.0; h]; n];
        let mut sig = vec![vec![0.0; h]; n];
        let mut wts = vec![vec![0.0; h]; n];
        // d lambda_i(k) / d position_j(k), sparse per (k, i)
        let mut dlam: Vec<Vec<Vec<(usize, [f64; 2])>>> = vec![vec![Vec::new(); n]; if want_grad { h } else { 0 }];
        let mut sigma_prev = self.sigma_p.clone();
        let frozen_w: Vec<f64> = self.sigma_p.iter().map(|&s| adaptive_weight(s, p.sigma_c, p.w)).collect();

        for k in 0..h {
            let states = &traj[k + 1];
            let positions: Vec<[f64; 2]> = states.iter().map(VehicleState::position).collect();
            let g = build_rpmg_from_positions(&positions, &self.landmarks, p.adjacency.rs, self.cooperation);
            for i in 0..n {
                let grown = dead_reckoning(sigma_prev[i], if self.active[i] { p.process_trace } else { 0.0 });
                let s = match p.sigma_source {
                    SigmaSource::Estimator => {
                        if g.reaches_landmark(i) {
                            sigma_prev[i]
                        } else {
                            grown
                        }
                    }
                    SigmaSource::ClosedForm => match avg_geometry(&g, i) {
                        Ok(geo) => sigma_p_bearing(geo.rg, states[i].psi, geo.theta_g),
                        Err(_) => grown,
                    },
                };
                sigma_prev[i] = s;
                sig[i][k] = s;
                wts[i][k] = match p.weight_mode {
                    WeightMode::Predictive => adaptive_weight(s, p.sigma_c, p.w),
                    WeightMode::Frozen => frozen_w[i],
                };
                if self.active[i] {
                    c1[i][k] = c1_cost(positions[i], self.goals[i]);
                }

                // with fixed scaling C2 only enters through the weight
                let minmax = p.normalization == Normalization::HorizonMinMax;
                let counted = self.active[i] && (minmax || wts[i][k] > 0.0);
                if !(counted || want_breakdown) {
                    continue;
                }
                let lap = vehicle_laplacian(&g, i, &p.adjacency)?;
                let l = if want_grad && counted {
                    let (l, v) = lambda2_with_vector(&lap.matrix)?;
                    if l < p.eta {
                        for &(r, c, e) in &lap.edges {
                            let dl_dw = (v[r] - v[c]).powi(2);
                            let edge = &g.edges()[e];
                            let dw_dd = p.adjacency.weight_slope(edge.distance);
                            let (na, nb_) = (lap.nodes[r], lap.nodes[c]);
                            let pa = g.nodes()[na].position;
                            let pb = g.nodes()[nb_].position;
                            let scale = dl_dw * dw_dd / edge.distance;
                            let dir = [(pa[0] - pb[0]) * scale, (pa[1] - pb[1]) * scale];
                            if na < n {
                                dlam[k][i].push((na, dir));
                            }
                            if nb_ < n {
                                dlam[k][i].push((nb_, [-dir[0], -dir[1]]));
                            }
                        }
                    }
                    l
                } else {
                    lambda2(&lap.matrix)?
                };
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("lambda of v{i} at predicted step {}", k + 1)));
                }
                lam[i][k] = l;
                if self.active[i] {
                    c2[i][k] = c2_cost(l, p.eta);
                }
            }
        }

        // normalized terms and dJ/dc
        let mut cost = 0.0;
        let mut dj_dc1 = vec![vec![0.0; h]; n];
        let mut dj_dc2 = vec![vec![0.0; h]; n];
        let mut n1 = vec![vec![0.0; h]; n];
        let mut n2 = vec![vec![0.0; h]; n];
        for i in (0..n).filter(|&i| self.active[i]) {
            match p.normalization {
                Normalization::ReachableRange => {
                    let (lo, hi) = self.reachable_range(i);
                    let span = hi - lo;
                    let eta2 = p.eta * p.eta;
                    for k in 0..h {
                        if span > 0.0 {
                            n1[i][k] = (c1[i][k] - lo) / span;
                            dj_dc1[i][k] = p.ts / span;
                        }
                        n2[i][k] = c2[i][k] / eta2;
                        dj_dc2[i][k] = p.ts * wts[i][k] / eta2;
                        cost += p.ts * (n1[i][k] + wts[i][k] * n2[i][k]);
                    }
                }
                Normalization::HorizonMinMax => {
                    let ones = vec![1.0; h];
                    let (v1, g1) = weighted_minmax(&c1[i], &ones);
                    let (v2, g2) = weighted_minmax(&c2[i], &wts[i]);
                    cost += p.ts * (v1 + v2);
                    n1[i] = normalize_series(&c1[i])?;
                    n2[i] = normalize_series(&c2[i])?;
                    for k in 0..h {
                        dj_dc1[i][k] = p.ts * g1[k];
                        dj_dc2[i][k] = p.ts * g2[k];
                    }
                }
            }
        }
        if !cost.is_finite() {
            return Err(Error::NonFinite("planner objective".into()));
        }

        let gradient = if want_grad {
            // dJ/d position_j(k)
            let mut gpos = vec![vec![[0.0f64; 2]; n]; h];
            for i in (0..n).filter(|&i| self.active[i]) {
                for k in 0..h {
                    let pos = traj[k + 1][i].position();
                    let goal = self.goals[i];
                    gpos[k][i][0] += dj_dc1[i][k] * 2.0 * (pos[0] - goal[0]);
                    gpos[k][i][1] += dj_dc1[i][k] * 2.0 * (pos[1] - goal[1]);
                    if lam[i][k] < p.eta && dj_dc2[i][k] != 0.0 {
                        let dc2 = -2.0 * (p.eta - lam[i][k]) * dj_dc2[i][k];
                        for &(j, d) in &dlam[k][i] {
                            gpos[k][j][0] += dc2 * d[0];
                            gpos[k][j][1] += dc2 * d[1];
                        }
                    }
                }
            }
            // adjoint through the Euler steps
            let mut grad = vec![0.0; n * nb];
            for j in 0..n {
                let v = self.speed(j);
                let (mut ax, mut ay, mut apsi) = (0.0, 0.0, 0.0);
                for k in (1..=h).rev() {
                    ax += gpos[k - 1][j][0];
                    ay += gpos[k - 1][j][1];
                    grad[j * nb + (k - 1) / p.block_steps] += p.ts * apsi;
                    let (s, c) = traj[k - 1][j].psi.sin_cos();
                    apsi += p.ts * v * (-ax * s + ay * c);
                }
            }
            Some(grad)
        } else {
            None
        };

        let breakdown = want_breakdown.then(|| CostBreakdown {
            steps: (0..h)
                .map(|k| {
                    (0..n)
                        .map(|i| StepCost {
                            c1: c1[i][k],
                            c2: c2[i][k],
                            lambda: lam[i][k],
                            sigma_p: sig[i][k],
                            weight: if self.active[i] { wts[i][k] } else { 0.0 },
                            c1_norm: n1[i][k],
                            c2_norm: n2[i][k],
                        })
                        .collect()
                })
                .collect(),
            total: cost,
        });
        Ok(Evaluation { cost, gradient, breakdown })
    }

    /// Cost and breakdown of a flat control vector (`u[i * n_blocks + b]`).
    pub fn objective(&self, u: &[f64]) -> Result<(f64, CostBreakdown)> {
        self.validate()?;
        let e = self.evaluate(u, false, true)?;
        Ok((e.cost, e.breakdown.expect("breakdown requested")))
    }

    pub fn cost(&self, u: &[f64]) -> Result<f64> {
        Ok(self.evaluate(u, false, false)?.cost)
    }

    /// Analytic gradient of [`NmpcProblem::cost`].
    pub fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(u, true, false)?.gradient.expect("gradient requested"))
    }

    /// Central-difference gradient, step `1e-6`.
    pub fn gradient_fd(&self, u: &[f64]) -> Result<Vec<f64>> {
        finite_diff_grad(|x| self.cost(x), u, 1e-6)
    }
}

/// Output of one planning step.
#[derive(Debug, Clone)]
pub struct NmpcOutput {
    /// First control of every vehicle.
    pub controls: Vec<ControlInput>,
    /// Full optimized plan (`u[i * n_blocks + b]`).
    pub plan: Vec<f64>,
    pub breakdown: CostBreakdown,
    pub report: SolveReport,
    /// The solver failed and the warm start was returned instead.
    pub degraded: bool,
}

/// Per-vehicle block patterns tried by [`best_seed`]: straight, and a
/// half-turn at either rate limit followed by straight flight.
fn seed_patterns(params: &NmpcParams) -> Vec<Vec<f64>> {
    let nb = params.n_blocks();
    let (lo, hi) = params.omega_bounds;
    let block_s = params.block_steps as f64 * params.ts;
    let turn = |rate: f64| {
        let blocks = if rate == 0.0 {
            0
        } else {
            ((PI / rate.abs()) / block_s).round() as usize
        };
        (0..nb).map(|b| if b < blocks { rate } else { 0.0 }).collect()
    };
    vec![vec![0.0; nb], turn(hi), turn(lo)]
}

/// Cheapest of the warm start, each pattern applied to the whole team, and
/// each pattern applied to one vehicle at a time on top of the incumbent.
fn best_seed(problem: &NmpcProblem, warm: Vec<f64>) -> Result<Vec<f64>> {
    let nb = problem.params.n_blocks();
    let patterns = seed_patterns(&problem.params);
    let mut best_cost = problem.cost(&warm)?;
    let mut best = warm;
    for pat in &patterns {
        let x: Vec<f64> = (0..problem.n_vehicles())
            .flat_map(|i| if problem.active[i] { pat.clone() } else { vec![0.0; nb] })
            .collect();
        let c = problem.cost(&x)?;
        if c < best_cost {
            best_cost = c;
            best = x;
        }
    }
    for i in (0..problem.n_vehicles()).filter(|&i| problem.active[i]) {
        for pat in &patterns {
            let mut x = best.clone();
            x[i * nb..(i + 1) * nb].copy_from_slice(pat);
            let c = problem.cost(&x)?;
            if c < best_cost {
                best_cost = c;
                best = x;
            }
        }
    }
    Ok(best)
}

/// Solve one planning problem from `warm_start` (clamped into the bounds).
pub fn nmpc_step(problem: &NmpcProblem, warm_start: &[f64]) -> Result<NmpcOutput> {
    problem.validate()?;
    let (lower, upper) = problem.bounds();
    let nb = problem.params.n_blocks();
    let x0: Vec<f64> = if warm_start.len() == problem.n_vars() {
        warm_start.iter().zip(lower.iter().zip(&upper)).map(|(v, (l, u))| v.clamp(*l, *u)).collect()
    } else {
        vec![0.0; problem.n_vars()]
    };
    let x0 = if problem.params.seed_plans {
        best_seed(problem, x0)?
    } else {
        x0
    };
    let fd = problem.params.gradient == GradientMode::FiniteDifference;
    let solved = solve_box_min_fg(
        |x, want_grad| {
            if want_grad && fd {
                Ok((problem.cost(x)?, Some(problem.gradient_fd(x)?)))
            } else {
                let e = problem.evaluate(x, want_grad, false)?;
                Ok((e.cost, e.gradient))
            }
        },
        &x0,
        &lower,
        &upper,
        &problem.params.solver,
    );
    let (report, degraded) = match solved {
        Ok(r) => (r, false),
        Err(_) => {
            let cost = problem.cost(&x0).unwrap_or(f64::NAN);
            (
                SolveReport {
                    x: x0.clone(),
                    objective: cost,
                    iterations: 0,
                    termination: Termination::Stalled,
                    gradient_norm: f64::NAN,
                    history: vec![cost],
                },
                true,
            )
        }
    };
    let (_, breakdown) = problem.objective(&report.x).unwrap_or_default();
    let controls = (0..problem.n_vehicles())
        .map(|i| ControlInput::new(report.x[i * nb]))
        .collect();
    Ok(NmpcOutput {
        controls,
        plan: report.x.clone(),
        breakdown,
        report,
        degraded,
    })
}

/// Receding-horizon planner state across steps (warm start bookkeeping).
#[derive(Debug, Clone)]
pub struct Planner {
    pub params: NmpcParams,
    plan: Vec<f64>,
    steps_into_block: usize,
}

impl Planner {
    pub fn new(params: NmpcParams) -> Self {
        Planner {
            params,
            plan: Vec::new(),
            steps_into_block: 0,
        }
    }

    /// Plan from the current estimates; the previous plan, shifted by one
    /// block once a block's worth of steps has elapsed, is the warm start.
    pub fn plan(
        &mut self,
        states: &[VehicleState],
        goals: &[[f64; 2]],
        active: &[bool],
        sigma_p: &[f64],
        landmarks: &[[f64; 2]],
        cooperation: bool,
    ) -> Result<NmpcOutput> {
        let problem = NmpcProblem {
            params: self.params.clone(),
            states: states.to_vec(),
            goals: goals.to_vec(),
            active: active.to_vec(),
            sigma_p: sigma_p.to_vec(),
            landmarks: landmarks.to_vec(),
            cooperation,
        };
        let out = nmpc_step(&problem, &self.plan)?;
        self.plan = out.plan.clone();
        self.steps_into_block += 1;
        if self.steps_into_block >= self.params.block_steps {
            self.steps_into_block = 0;
            let nb = self.params.n_blocks();
            for row in self.plan.chunks_mut(nb) {
                row.rotate_left(1);
                if nb > 1 {
                    row[nb - 1] = row[nb - 2];
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn params(h: usize) -> NmpcParams {
        let mut s = Scenario::with_defaults();
        s.horizon_s = h as f64 * s.step_s;
        let mut p = NmpcParams::from_scenario(&s);
        p.solver.max_iters = 100;
        p
    }

    fn single(state: VehicleState, goal: [f64; 2], p: NmpcParams) -> NmpcProblem {
        NmpcProblem {
            params: p,
            states: vec![state],
            goals: vec![goal],
            active: vec![true],
            sigma_p: vec![0.0],
            landmarks: vec![],
            cooperation: true,
        }
    }

    #[test]
    fn cost_term_examples() {
        assert_eq!(c1_cost([1.0, 1.0], [1.0, 1.0]), 0.0);
        assert_eq!(c1_cost([0.0, 0.0], [3.0, 4.0]), 25.0);
        assert_eq!(c1_cost([7.0, 2.0], [10.0, 6.0]), 25.0);
        assert_eq!(c2_cost(2.0, 2.0), 0.0);
        assert_eq!(c2_cost(0.0, 2.0), 4.0);
        assert_eq!(c2_cost(3.0, 2.0), 0.0);
        assert_eq!(adaptive_weight(1.0, 3.0, 7.0), 7.0);
        assert_eq!(adaptive_weight(0.0, 3.0, 7.0), 0.0);
        assert_eq!(adaptive_weight(3.0, 3.0, 7.0), 7.0);
        assert_eq!(adaptive_weight(0.999, 3.0, 7.0), 0.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_series(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_series(&[3.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(normalize_series(&[]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_in_unit_interval(v in proptest::collection::vec(-1e3f64..1e3, 1..30)) {
            prop_assert!(normalize_series(&v).unwrap().iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn weighted_minmax_gradient(c in proptest::collection::vec(-5.0f64..5.0, 3..8), a in proptest::collection::vec(0.0f64..2.0, 8)) {
            let a = &a[..c.len()];
            let (_, g) = weighted_minmax(&c, a);
            let fd = finite_diff_grad(|x| Ok(weighted_minmax(x, a).0), &c, 1e-7).unwrap();
            for (x, y) in g.iter().zip(&fd) {
                prop_assert!((x - y).abs() < 1e-5, "{:?} vs {:?}", g, fd);
            }
        }
    }

    #[test]
    fn horizon_minmax_is_degenerate_when_orbiting() {
        // min-max scaling discards the magnitude of progress: circling far
        // from the goal scores about as well as driving straight at it, and
        // approaching scores the same as retreating
        let p = params(20);
        let r = p.speed / p.omega_bounds.1;
        let costs = |norm| {
            let mut q = p.clone();
            q.normalization = norm;
            let orbit = single(VehicleState::new(60.0 + r, 0.0, FRAC_PI_2), [0.0, 0.0], q.clone());
            let approach = single(VehicleState::new(60.0, 0.0, PI), [0.0, 0.0], q.clone());
            let retreat = single(VehicleState::new(60.0, 0.0, 0.0), [0.0, 0.0], q);
            let circling = vec![p.omega_bounds.1; orbit.n_vars()];
            let straight = vec![0.0; orbit.n_vars()];
            (
                orbit.cost(&circling).unwrap(),
                approach.cost(&straight).unwrap(),
                retreat.cost(&straight).unwrap(),
            )
        };
        let (jo, ja, jr) = costs(Normalization::HorizonMinMax);
        assert!(jo < 1.5 * ja, "orbit {jo} approach {ja}");
        assert!((ja - jr).abs() < 0.2 * ja.max(jr), "{ja} vs {jr}");

        let (jo, ja, jr) = costs(Normalization::ReachableRange);
        assert!(jo > 1.3 * ja, "orbit {jo} approach {ja}");
        assert!(jr > 2.0 * ja, "{ja} vs {jr}");
    }

    #[test]
    fn all_arrived_and_connected_costs_zero() {
        let p = params(10);
        let prob = NmpcProblem {
            params: p,
            states: vec![VehicleState::new(10.0, 10.0, 0.0), VehicleState::new(10.5, 10.0, 0.0)],
            goals: vec![[10.0, 10.0], [10.5, 10.0]],
            active: vec![false, false],
            sigma_p: vec![0.1, 0.1],
            landmarks: vec![[10.0, 10.5]],
            cooperation: true,
        };
        let (j, b) = prob.objective(&vec![0.0; prob.n_vars()]).unwrap();
        assert_eq!(j, 0.0);
        assert!(b.steps.iter().flatten().all(|s| s.c2 == 0.0));
        let out = nmpc_step(&prob, &[]).unwrap();
        assert!(out.controls.iter().all(|c| c.omega == 0.0));
    }

    #[test]
    fn turns_toward_goal() {
        // heading north with the goal due east: turn clockwise
        let p = params(30);
        let prob = single(VehicleState::new(0.0, 0.0, FRAC_PI_2), [80.0, 0.0], p);
        let out = nmpc_step(&prob, &[]).unwrap();
        assert!(out.controls[0].omega < 0.0, "{:?}", out.controls);
        // with the goal due west, counter-clockwise
        let prob = single(VehicleState::new(0.0, 0.0, FRAC_PI_2), [-80.0, 0.0], params(30));
        assert!(nmpc_step(&prob, &[]).unwrap().controls[0].omega > 0.0);
    }

    #[test]
    fn staying_in_range_is_cheaper_when_poorly_localized() {
        let p = params(40);
        let mut prob = single(VehicleState::new(0.0, 0.0, 0.0), [100.0, 0.0], p.clone());
        prob.landmarks = vec![[0.0, 10.0]];
        prob.sigma_p = vec![2.0];
        let nb = p.n_blocks();
        // circle near the landmark vs run straight out of range
        let circle = vec![p.omega_bounds.1; nb];
        let straight = vec![0.0; nb];
        let (jc, bc) = prob.objective(&circle).unwrap();
        let (js, _) = prob.objective(&straight).unwrap();
        assert!(jc < js, "circle {jc} straight {js}");
        assert!(bc.steps.iter().all(|s| s[0].weight == p.w));
    }

    fn random_team(seed: &[f64]) -> NmpcProblem {
        let mut p = params(30);
        p.adjacency.rs = 40.0;
        NmpcProblem {
            params: p,
            states: vec![
                VehicleState::new(0.0, 0.0, seed[0]),
                VehicleState::new(12.0, 5.0, seed[1]),
                VehicleState::new(5.0, -15.0, seed[2]),
            ],
            goals: vec![[100.0, 0.0], [90.0, 30.0], [80.0, -40.0]],
            active: vec![true, true, true],
            sigma_p: vec![2.0, 0.2, 2.0],
            landmarks: vec![[20.0, 20.0], [-10.0, -20.0]],
            cooperation: true,
        }
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        for norm in [Normalization::ReachableRange, Normalization::HorizonMinMax] {
            for t in 0..20 {
                let f = t as f64;
                let mut prob = random_team(&[0.3 * f, 1.0 - 0.2 * f, -0.5 + 0.1 * f]);
                prob.params.normalization = norm;
                let u: Vec<f64> = (0..prob.n_vars()).map(|k| ((k as f64 * 0.7 + f).sin()) * 1.2).collect();
                let a = prob.gradient(&u).unwrap();
                let fd = prob.gradient_fd(&u).unwrap();
                let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
                for (x, y) in a.iter().zip(&fd) {
                    assert!((x - y).abs() <= 1e-4 * scale, "{norm:?} draw {t}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn planner_output_within_bounds_and_deterministic() {
        let prob = random_team(&[0.1, 2.0, -1.0]);
        let a = nmpc_step(&prob, &[]).unwrap();
        let b = nmpc_step(&prob, &[]).unwrap();
        assert_eq!(a.plan, b.plan);
        let (lo, hi) = prob.params.omega_bounds;
        assert!(a.plan.iter().all(|w| (lo..=hi).contains(w)));
        assert!(a.report.objective <= prob.cost(&vec![0.0; prob.n_vars()]).unwrap());
    }

    #[test]
    fn connected_steps_have_zero_c2() {
        let mut prob = random_team(&[0.0, 0.0, 0.0]);
        prob.states = vec![
            VehicleState::new(0.0, 0.0, 0.0),
            VehicleState::new(1.0, 0.0, 0.0),
            VehicleState::new(0.0, 1.0, 0.0),
        ];
        prob.landmarks = vec![[0.5, 0.5]];
        let (_, b) = prob.objective(&vec![0.0; prob.n_vars()]).unwrap();
        assert!(b.steps.iter().flatten().any(|s| s.lambda >= prob.params.eta));
        for s in b.steps.iter().flatten() {
            if s.lambda >= prob.params.eta {
                assert_eq!(s.c2, 0.0);
                assert_eq!(s.c2_norm, 0.0);
            }
        }
    }
}
