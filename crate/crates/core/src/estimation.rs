//! State estimation: a moving-horizon estimator (MHE) with arrival cost, an
//! EKF baseline, and the stability bound recursion.
//!
//! Both estimators work on a [`SystemModel`], so the same transition,
//! measurement model and noise settings drive either one. [`BearingModel`]
//! is the team model used in the closed loop: stacked unicycle states
//! `(x_0, y_0, psi_0, x_1, ...)` and relative bearings.
//!
//! The MHE is single shooting: the only decision variable is the first
//! state of the window; later states are forced through the transition with
//! the buffered controls. Each solve minimizes
//!
//! ```text
//! |X_tau - prior|^2_{P^-1} + sum_k sum_rows (h(X_k) - z_k)^2 / gamma
//! ```
//!
//! with Levenberg-Marquardt and analytic Jacobians chained through the
//! transition Jacobians.
//!
//! When the window slides, the arrival matrix advances through
//! [`arrival_cost_update`] linearized at the last solution's first state, and
//! the new prior is the estimate made for the new first step back when it was
//! the newest step. The smoothed value would already contain measurements
//! that are still in the window, so they would count twice.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::kinematics::{step, wrap_angle};
use crate::nlp::{solve_nls, SolveReport, SolverOptions};
use crate::sensing::{bearing, bearing_gradient_local, MeasurementSet};
use crate::world::{ControlInput, Landmark, NodeId, VehicleState};
use crate::{Error, Result};

/// Linearized measurement block: wrapped innovations `z - h(x)`, their
/// Jacobian `H = dh/dx`, and per-row noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub innovation: DVector<f64>,
    pub h: DMatrix<f64>,
    pub variances: DVector<f64>,
}

impl Linearization {
    pub fn empty(dim: usize) -> Self {
        Linearization {
            innovation: DVector::zeros(0),
            h: DMatrix::zeros(0, dim),
            variances: DVector::zeros(0),
        }
    }

    pub fn rows(&self) -> usize {
        self.innovation.len()
    }
}

pub trait SystemModel {
    type Control: Clone + std::fmt::Debug;
    type Obs: Clone + std::fmt::Debug;

    fn dim(&self) -> usize;
    fn transition(&self, x: &DVector<f64>, u: &Self::Control) -> DVector<f64>;
    fn transition_jacobian(&self, x: &DVector<f64>, u: &Self::Control) -> DMatrix<f64>;
    fn linearize(&self, x: &DVector<f64>, z: &Self::Obs) -> Result<Linearization>;
    fn process_noise(&self) -> DMatrix<f64>;

    /// `a - b`, with any angular components wrapped.
    fn difference(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        a - b
    }

    /// Canonical representative of a state (e.g. headings wrapped).
    fn normalize(&self, x: DVector<f64>) -> DVector<f64> {
        x
    }
}

/// Controls for one step of the whole team.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamControls {
    pub omega: Vec<f64>,
    /// Per-vehicle speed; 0 for a stopped vehicle.
    pub speed: Vec<f64>,
}

impl TeamControls {
    pub fn new(omega: Vec<f64>, speed: Vec<f64>) -> Self {
        TeamControls { omega, speed }
    }

    pub fn uniform(controls: &[ControlInput], speed: f64) -> Self {
        TeamControls {
            omega: controls.iter().map(|c| c.omega).collect(),
            speed: vec![speed; controls.len()],
        }
    }
}

/// Stacked unicycle team observed through relative bearings.
#[derive(Debug, Clone, PartialEq)]
pub struct BearingModel {
    pub n_vehicles: usize,
    pub landmarks: Vec<Landmark>,
    pub ts: f64,
    /// Per-vehicle `(x, y, psi)` process variances.
    pub process_variance: [f64; 3],
    pub omega_bounds: (f64, f64),
}

pub fn stack_states(states: &[VehicleState]) -> DVector<f64> {
    DVector::from_iterator(states.len() * 3, states.iter().flat_map(|s| [s.x, s.y, s.psi]))
}

pub fn unstack_states(x: &DVector<f64>) -> Vec<VehicleState> {
    x.as_slice()
        .chunks_exact(3)
        .map(|c| VehicleState { x: c[0], y: c[1], psi: c[2] })
        .collect()
}

impl SystemModel for BearingModel {
    type Control = TeamControls;
    type Obs = MeasurementSet;

    fn dim(&self) -> usize {
        3 * self.n_vehicles
    }

    fn transition(&self, x: &DVector<f64>, u: &TeamControls) -> DVector<f64> {
        let states = unstack_states(x);
        let next: Vec<VehicleState> = states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let w = ControlInput::clamped(u.omega[i], self.omega_bounds);
                step(s, w, u.speed[i], self.ts)
            })
            .collect();
        stack_states(&next)
    }

    fn transition_jacobian(&self, x: &DVector<f64>, u: &TeamControls) -> DMatrix<f64> {
        let mut f = DMatrix::identity(self.dim(), self.dim());
        for i in 0..self.n_vehicles {
            let (s, c) = x[3 * i + 2].sin_cos();
            let v = u.speed[i];
            f[(3 * i, 3 * i + 2)] = -self.ts * v * s;
            f[(3 * i + 1, 3 * i + 2)] = self.ts * v * c;
        }
        f
    }

    fn linearize(&self, x: &DVector<f64>, z: &MeasurementSet) -> Result<Linearization> {
        let states = unstack_states(x);
        let mut innov = Vec::with_capacity(z.len());
        let mut vars = Vec::with_capacity(z.len());
        let mut rows: Vec<(usize, [f64; 3], Option<(usize, [f64; 2])>)> = Vec::with_capacity(z.len());
        for m in &z.items {
            let NodeId::Vehicle(i) = m.observer else {
                return Err(Error::InvalidArgument(format!("observer {} is not a vehicle", m.observer)));
            };
            let obs = states.get(i).ok_or_else(|| Error::UnknownNode(m.observer.to_string()))?;
            let (target_pos, target_vehicle) = match m.target {
                NodeId::Vehicle(j) => (
                    states.get(j).ok_or_else(|| Error::UnknownNode(m.target.to_string()))?.position(),
                    Some(j),
                ),
                NodeId::Landmark(j) => (
                    self.landmarks
                        .get(j)
                        .ok_or_else(|| Error::UnknownNode(m.target.to_string()))?
                        .position(),
                    None,
                ),
            };
            // a coincident estimate carries no usable bearing
            let Ok(predicted) = bearing(obs, target_pos) else { continue };
            let g = bearing_gradient_local(obs, target_pos)?;
            innov.push(wrap_angle(m.value - predicted));
            vars.push(m.variance);
            rows.push((i, g.observer, target_vehicle.map(|j| (j, g.target))));
        }
        let mut h = DMatrix::zeros(rows.len(), self.dim());
        for (r, (i, go, gt)) in rows.into_iter().enumerate() {
            for k in 0..3 {
                h[(r, 3 * i + k)] = go[k];
            }
            if let Some((j, gt)) = gt {
                h[(r, 3 * j)] += gt[0];
                h[(r, 3 * j + 1)] += gt[1];
            }
        }
        Ok(Linearization {
            innovation: DVector::from_vec(innov),
            h,
            variances: DVector::from_vec(vars),
        })
    }

    fn process_noise(&self) -> DMatrix<f64> {
        let diag = DVector::from_iterator(self.dim(), (0..self.dim()).map(|k| self.process_variance[k % 3]));
        DMatrix::from_diagonal(&diag)
    }

    fn difference(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = a - b;
        for i in 0..self.n_vehicles {
            d[3 * i + 2] = wrap_angle(d[3 * i + 2]);
        }
        d
    }

    fn normalize(&self, mut x: DVector<f64>) -> DVector<f64> {
        for i in 0..self.n_vehicles {
            x[3 * i + 2] = wrap_angle(x[3 * i + 2]);
        }
        x
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `Q + F (P - P H^T (H P H^T + Gamma)^-1 H P) F^T`, symmetrized.
pub fn arrival_cost_update(
    p: &DMatrix<f64>,
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    if !p.is_square() || f.shape() != (n, n) || q.shape() != (n, n) || h.ncols() != n || gamma.shape() != (h.nrows(), h.nrows()) {
        return Err(Error::Dimension(format!(
            "P {:?}, F {:?}, H {:?}, Q {:?}, Gamma {:?}",
            p.shape(),
            f.shape(),
            h.shape(),
            q.shape(),
            gamma.shape()
        )));
    }
    let inner = if h.nrows() == 0 {
        p.clone()
    } else {
        let s = h * p * h.transpose() + gamma;
        let s_inv = s
            .cholesky()
            .ok_or_else(|| Error::Singular("innovation covariance H P H^T + Gamma".into()))?
            .inverse();
        let ph = p * h.transpose();
        p - &ph * s_inv * ph.transpose()
    };
    Ok(symmetrize(&(q + f * inner * f.transpose())))
}

/// One buffered step of the estimation window.
#[derive(Debug, Clone)]
struct WindowStep<M: SystemModel> {
    /// Control that moved the state from the previous step to this one
    /// (`None` for the first step of the window).
    control: Option<M::Control>,
    obs: M::Obs,
}

/// Sliding window of the last `N_E + 1` steps plus the arrival cost.
#[derive(Debug, Clone)]
pub struct MheWindow<M: SystemModel> {
    pub model: M,
    pub horizon: usize,
    steps: VecDeque<WindowStep<M>>,
    prior: DVector<f64>,
    arrival: DMatrix<f64>,
    /// From the last solve: the smoothed first state and the measurement
    /// linearization there, used to advance the arrival cost on eviction.
    pending: Option<Pending>,
    /// Estimate of each buffered step made when it was the newest one.
    filtered: VecDeque<Option<DVector<f64>>>,
    advanced: usize,
}

#[derive(Debug, Clone)]
struct Pending {
    x_tau: DVector<f64>,
    h: DMatrix<f64>,
    gamma: DMatrix<f64>,
}

/// Result of one MHE solve.
#[derive(Debug, Clone)]
pub struct MheEstimate {
    /// Smoothed states from the first to the last step of the window.
    pub trajectory: Vec<DVector<f64>>,
    /// Approximate covariance of the last state.
    pub covariance: DMatrix<f64>,
    pub cost: f64,
    pub report: SolveReport,
    /// True when the solver stopped without meeting its tolerance.
    pub degraded: bool,
}

impl MheEstimate {
    pub fn current(&self) -> &DVector<f64> {
        self.trajectory.last().expect("window is never empty after a solve")
    }
}

impl<M: SystemModel> MheWindow<M> {
    pub fn new(model: M, horizon: usize, prior: DVector<f64>, arrival: DMatrix<f64>) -> Result<Self> {
        let n = model.dim();
        if prior.len() != n || arrival.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "prior {} and arrival {:?} for a {n}-state model",
                prior.len(),
                arrival.shape()
            )));
        }
        check_spd(&arrival, "arrival matrix")?;
        Ok(MheWindow {
            model,
            horizon,
            steps: VecDeque::new(),
            prior,
            arrival: symmetrize(&arrival),
            pending: None,
            filtered: VecDeque::new(),
            advanced: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn prior(&self) -> &DVector<f64> {
        &self.prior
    }

    pub fn arrival(&self) -> &DMatrix<f64> {
        &self.arrival
    }

    /// How many times the window start has moved forward.
    pub fn times_advanced(&self) -> usize {
        self.advanced
    }

    /// Append one step. `control` moved the team from the previous step to
    /// this one and is ignored for the very first push.
    pub fn push(&mut self, control: Option<M::Control>, obs: M::Obs) -> Result<()> {
        let control = if self.steps.is_empty() { None } else { control };
        if !self.steps.is_empty() && control.is_none() {
            return Err(Error::InvalidArgument("a control is needed after the first step".into()));
        }
        self.steps.push_back(WindowStep { control, obs });
        self.filtered.push_back(None);
        while self.steps.len() > self.horizon + 1 {
            self.evict()?;
        }
        Ok(())
    }

    fn evict(&mut self) -> Result<()> {
        self.steps.pop_front();
        self.filtered.pop_front();
        let next = self.steps.front_mut().expect("eviction leaves at least one step");
        let u = next.control.take().expect("non-first steps carry a control");
        let pending = self.pending.take().unwrap_or_else(|| Pending {
            x_tau: self.prior.clone(),
            h: DMatrix::zeros(0, self.model.dim()),
            gamma: DMatrix::zeros(0, 0),
        });
        let f = self.model.transition_jacobian(&pending.x_tau, &u);
        let p_next = arrival_cost_update(&self.arrival, &f, &pending.h, &self.model.process_noise(), &pending.gamma)?;
        let x_tau = pending.x_tau;
        self.prior = match self.filtered.front().cloned().flatten() {
            Some(x) => x,
            None => self.model.normalize(self.model.transition(&x_tau, &u)),
        };
        self.arrival = p_next;
        self.advanced += 1;
        Ok(())
    }

    fn controls(&self) -> Vec<&M::Control> {
        self.steps.iter().skip(1).map(|s| s.control.as_ref().expect("non-first steps carry a control")).collect()
    }

    /// States of the window rolled out from `x_tau`.
    pub fn rollout(&self, x_tau: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.steps.len());
        out.push(x_tau.clone());
        for u in self.controls() {
            let next = self.model.transition(out.last().unwrap(), u);
            out.push(next);
        }
        out
    }

    fn prior_factor(&self) -> Result<DMatrix<f64>> {
        // |d|^2_{P^-1} = |L^-1 d|^2 with P = L L^T
        let chol = self
            .arrival
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("arrival matrix is not positive definite".into()))?;
        chol.l()
            .try_inverse()
            .ok_or_else(|| Error::Singular("arrival factor".into()))
    }

    fn residual_at(&self, x_tau: &DVector<f64>, l_inv: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.model.dim();
        let traj = self.rollout(x_tau);
        let controls = self.controls();
        let mut res: Vec<f64> = (l_inv * self.model.difference(x_tau, &self.prior)).iter().copied().collect();
        let mut jac_rows: Vec<DMatrix<f64>> = vec![l_inv.clone()];
        let mut phi = DMatrix::identity(n, n);
        for (k, (x_k, step)) in traj.iter().zip(&self.steps).enumerate() {
            if k > 0 {
                phi = self.model.transition_jacobian(&traj[k - 1], controls[k - 1]) * phi;
            }
            let lin = self.model.linearize(x_k, &step.obs)?;
            if lin.rows() == 0 {
                continue;
            }
            let mut block = &lin.h * &phi;
            for r in 0..lin.rows() {
                let sd = lin.variances[r].sqrt();
                if !(sd > 0.0) {
                    return Err(Error::InvalidArgument(format!("measurement variance {}", lin.variances[r])));
                }
                res.push(-lin.innovation[r] / sd);
                block.row_mut(r).scale_mut(1.0 / sd);
            }
            jac_rows.push(block);
        }
        let rows: usize = jac_rows.iter().map(|b| b.nrows()).sum();
        let mut jac = DMatrix::zeros(rows, n);
        let mut r0 = 0;
        for b in jac_rows {
            jac.view_mut((r0, 0), (b.nrows(), n)).copy_from(&b);
            r0 += b.nrows();
        }
        Ok((DVector::from_vec(res), jac))
    }

    /// Stacked whitened residuals (arrival term first, then every
    /// measurement in window order) and their analytic Jacobian.
    pub fn residuals(&self, x_tau: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let l_inv = self.prior_factor()?;
        self.residual_at(x_tau, &l_inv)
    }

    /// Window cost at a candidate first state.
    pub fn cost(&self, x_tau: &DVector<f64>) -> Result<f64> {
        let l_inv = self.prior_factor()?;
        Ok(self.residual_at(x_tau, &l_inv)?.0.norm_squared())
    }

    /// Gradient of [`MheWindow::cost`] from the analytic Jacobian.
    pub fn cost_gradient(&self, x_tau: &DVector<f64>) -> Result<DVector<f64>> {
        let l_inv = self.prior_factor()?;
        let (r, j) = self.residual_at(x_tau, &l_inv)?;
        Ok(j.transpose() * r * 2.0)
    }

    /// Solve the window. The starting guess is the last solution's first
    /// state when the window has not moved since, else the prior.
    pub fn estimate(&mut self, opts: &SolverOptions) -> Result<MheEstimate> {
        if self.steps.is_empty() {
            return Err(Error::Empty("estimation window".into()));
        }
        let n = self.model.dim();
        let l_inv = self.prior_factor()?;
        let x0 = self.pending.as_ref().map(|p| p.x_tau.clone()).unwrap_or_else(|| self.prior.clone());
        let this = &*self;
        let report = solve_nls(
            |x| Ok(this.residual_at(&DVector::from_column_slice(x), &l_inv)?.0),
            |x| Ok(this.residual_at(&DVector::from_column_slice(x), &l_inv)?.1),
            x0.as_slice(),
            &vec![f64::NEG_INFINITY; n],
            &vec![f64::INFINITY; n],
            opts,
        )?;
        let x_tau = self.model.normalize(DVector::from_column_slice(&report.x));
        let (_, jac) = self.residual_at(&x_tau, &l_inv)?;
        let trajectory: Vec<DVector<f64>> = self.rollout(&x_tau).into_iter().map(|x| self.model.normalize(x)).collect();

        // covariance of the first state from the Gauss-Newton Hessian,
        // carried to the last state with process noise
        let info = jac.transpose() * &jac;
        let mut cov = info
            .cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| self.arrival.clone());
        let controls = self.controls();
        let q = self.model.process_noise();
        for (k, u) in controls.iter().enumerate() {
            let f = self.model.transition_jacobian(&trajectory[k], u);
            cov = symmetrize(&(&f * cov * f.transpose() + &q));
        }

        // the arrival cost advances at the solution when the window moves on
        let lin = self.model.linearize(&x_tau, &self.steps[0].obs)?;
        self.pending = Some(Pending {
            gamma: DMatrix::from_diagonal(&lin.variances),
            h: lin.h,
            x_tau,
        });

        if let Some(slot) = self.filtered.back_mut() {
            *slot = trajectory.last().cloned();
        }
        let degraded = !report.converged();
        Ok(MheEstimate {
            trajectory,
            covariance: symmetrize(&cov),
            cost: report.objective * 2.0,
            degraded,
            report,
        })
    }
}

fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what} is {:?}", m.shape())));
    }
    if (m - m.transpose()).abs().max() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::Singular(format!("{what} is not positive definite")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

/// Predict with `control` (skipped when `None`), then update with `obs`.
pub fn ekf_step<M: SystemModel>(model: &M, state: &EkfState, control: Option<&M::Control>, obs: &M::Obs) -> Result<EkfState> {
    let (x, p) = match control {
        Some(u) => {
            let f = model.transition_jacobian(&state.x, u);
            let x = model.normalize(model.transition(&state.x, u));
            (x, symmetrize(&(&f * &state.p * f.transpose() + model.process_noise())))
        }
        None => (state.x.clone(), state.p.clone()),
    };
    let lin = model.linearize(&x, obs)?;
    if lin.rows() == 0 {
        return Ok(EkfState { x, p });
    }
    let gamma = DMatrix::from_diagonal(&lin.variances);
    let s = &lin.h * &p * lin.h.transpose() + &gamma;
    let s_inv = s
        .cholesky()
        .ok_or_else(|| Error::Singular("innovation covariance".into()))?
        .inverse();
    let k = &p * lin.h.transpose() * s_inv;
    let x = model.normalize(&x + &k * &lin.innovation);
    let i_kh = DMatrix::identity(p.nrows(), p.nrows()) - &k * &lin.h;
    let p = &i_kh * &p * i_kh.transpose() + &k * gamma * k.transpose();
    Ok(EkfState { x, p: symmetrize(&p) })
}

/// Constants of the estimation-error bound recursion
/// `zeta' = a zeta + beta` with `a = c1 kf p / (p + c2 delta)` and
/// `beta = c3 r_mu / (p + c2 delta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub kf: f64,
    pub p: f64,
    pub delta: f64,
    pub r_mu: f64,
}

impl StabilityParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.c1, self.c2, self.c3, self.kf, self.p, self.r_mu];
        // r_mu = 0 (noise-free) is allowed, as is delta = 0
        if positive[..5].iter().all(|v| *v > 0.0) && self.r_mu >= 0.0 && self.delta >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("stability parameters {self:?}")))
        }
    }

    pub fn contraction(&self) -> f64 {
        self.c1 * self.kf * self.p / (self.p + self.c2 * self.delta)
    }

    pub fn offset(&self) -> f64 {
        self.c3 * self.r_mu / (self.p + self.c2 * self.delta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZetaBound {
    /// `zeta_0 ..= zeta_n`.
    pub values: Vec<f64>,
    pub a: f64,
    pub beta: f64,
    /// `beta / (1 - a)` when `a < 1`.
    pub fixed_point: Option<f64>,
}

impl ZetaBound {
    pub fn converges(&self) -> bool {
        self.fixed_point.is_some()
    }
}

pub fn zeta_bound(params: &StabilityParams, zeta0: f64, n_steps: usize) -> Result<ZetaBound> {
    params.validate()?;
    if !(zeta0 >= 0.0) {
        return Err(Error::InvalidArgument(format!("zeta0 = {zeta0}")));
    }
    let (a, beta) = (params.contraction(), params.offset());
    Ok(zeta_sequence(a, beta, zeta0, n_steps))
}

/// The recursion for given `a` and `beta` directly.
pub fn zeta_sequence(a: f64, beta: f64, zeta0: f64, n_steps: usize) -> ZetaBound {
    let mut values = Vec::with_capacity(n_steps + 1);
    values.push(zeta0);
    for _ in 0..n_steps {
        let z = *values.last().unwrap();
        values.push(a * z + beta);
    }
    ZetaBound {
        values,
        a,
        beta,
        fixed_point: (a < 1.0).then(|| beta / (1.0 - a)),
    }
}

/// Which estimator a closed loop runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mhe,
    Ekf,
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mhe" => Ok(EstimatorKind::Mhe),
            "ekf" => Ok(EstimatorKind::Ekf),
            other => Err(Error::InvalidArgument(format!("unknown estimator {other:?}"))),
        }
    }
}

/// The team estimator used by the closed loop.
#[derive(Debug, Clone)]
pub enum TeamEstimator {
    Mhe {
        window: MheWindow<BearingModel>,
        opts: SolverOptions,
        last: Option<(DVector<f64>, DMatrix<f64>)>,
        degraded_solves: usize,
    },
    Ekf {
        model: BearingModel,
        state: EkfState,
        started: bool,
    },
}

impl TeamEstimator {
    pub fn new(kind: EstimatorKind, model: BearingModel, horizon: usize, prior: DVector<f64>, p0: DMatrix<f64>) -> Result<Self> {
        Ok(match kind {
            EstimatorKind::Mhe => TeamEstimator::Mhe {
                window: MheWindow::new(model, horizon, prior, p0)?,
                opts: SolverOptions {
                    max_iters: 30,
                    gradient_tolerance: 1e-8,
                    ..SolverOptions::default()
                },
                last: None,
                degraded_solves: 0,
            },
            EstimatorKind::Ekf => {
                check_spd(&p0, "initial covariance")?;
                TeamEstimator::Ekf {
                    model,
                    state: EkfState { x: prior, p: p0 },
                    started: false,
                }
            }
        })
    }

    /// Fold in the control applied since the last update (ignored on the
    /// first call) and the newest measurements; returns the current
    /// estimate and its covariance.
    pub fn update(&mut self, control: &TeamControls, obs: MeasurementSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match self {
            TeamEstimator::Mhe { window, opts, last, degraded_solves } => {
                window.push(Some(control.clone()), obs)?;
                let est = window.estimate(opts)?;
                if est.degraded {
                    *degraded_solves += 1;
                }
                let out = (est.current().clone(), est.covariance.clone());
                *last = Some(out.clone());
                Ok(out)
            }
            TeamEstimator::Ekf { model, state, started } => {
                let u = if *started { Some(control) } else { None };
                *state = ekf_step(model, state, u, &obs)?;
                *started = true;
                Ok((state.x.clone(), state.p.clone()))
            }
        }
    }

    pub fn degraded_solves(&self) -> usize {
        match self {
            TeamEstimator::Mhe { degraded_solves, .. } => *degraded_solves,
            TeamEstimator::Ekf { .. } => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::finite_diff_grad;
    use crate::sensing::sense_all;
    use crate::world::RngStream;
    use proptest::prelude::*;

    fn mat(n: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, v)
    }

    #[test]
    fn arrival_scalar_examples() {
        let one = mat(1, &[1.0]);
        let none = DMatrix::zeros(0, 1);
        let p = arrival_cost_update(&one, &one, &none, &mat(1, &[0.5]), &DMatrix::zeros(0, 0)).unwrap();
        assert!((p[(0, 0)] - 1.5).abs() < 1e-15);
        let p = arrival_cost_update(&one, &one, &one, &mat(1, &[0.0]), &one).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(arrival_cost_update(&one, &mat(2, &[1.0, 0.0, 0.0, 1.0]), &one, &one, &one).is_err());
        let singular = arrival_cost_update(&one, &one, &one, &one, &mat(1, &[-1.0]));
        assert!(matches!(singular, Err(Error::Singular(_))));
    }

    fn spd(seed: &[f64], n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_iterator(n, n, seed.iter().copied().cycle().take(n * n));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    proptest! {
        #[test]
        fn arrival_update_is_below_prediction(
            ps in proptest::collection::vec(-1.0f64..1.0, 9),
            fs in proptest::collection::vec(-1.5f64..1.5, 9),
            hs in proptest::collection::vec(-2.0f64..2.0, 6),
            q in 0.0f64..0.5,
            g in 0.01f64..2.0,
        ) {
            let p = spd(&ps, 3);
            let f = DMatrix::from_row_slice(3, 3, &fs);
            let h = DMatrix::from_row_slice(2, 3, &hs);
            let qm = DMatrix::identity(3, 3) * q;
            let gm = DMatrix::identity(2, 2) * g;
            let upd = arrival_cost_update(&p, &f, &h, &qm, &gm).unwrap();
            let pred = &f * &p * f.transpose() + &qm;
            let diff = symmetrize(&(pred - &upd));
            let min_eig = diff.symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-9, "min eigenvalue {}", min_eig);
            prop_assert!((&upd - upd.transpose()).abs().max() <= 1e-9);
        }
    }

    /// Linear-Gaussian toy: x' = A x + B u, z = C x.
    #[derive(Debug, Clone)]
    struct Linear {
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: f64,
    }

    impl SystemModel for Linear {
        type Control = DVector<f64>;
        type Obs = DVector<f64>;

        fn dim(&self) -> usize {
            self.a.nrows()
        }

        fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            &self.a * x + u
        }

        fn transition_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
            self.a.clone()
        }

        fn linearize(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<Linearization> {
            Ok(Linearization {
                innovation: z - &self.c * x,
                h: self.c.clone(),
                variances: DVector::from_element(z.len(), self.r),
            })
        }

        fn process_noise(&self) -> DMatrix<f64> {
            self.q.clone()
        }
    }

    fn toy() -> Linear {
        Linear {
            a: mat(2, &[1.0, 0.1, 0.0, 1.0]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            q: DMatrix::identity(2, 2) * 0.01,
            r: 0.04,
        }
    }

    fn tight() -> SolverOptions {
        SolverOptions {
            max_iters: 200,
            gradient_tolerance: 1e-12,
            step_tolerance: 1e-15,
            ..SolverOptions::default()
        }
    }

    #[test]
    fn zero_horizon_mhe_matches_ekf_on_linear_model() {
        let model = toy();
        let x0 = DVector::from_vec(vec![0.3, -0.2]);
        let p0 = mat(2, &[0.5, 0.1, 0.1, 0.3]);
        let mut window = MheWindow::new(model.clone(), 0, x0.clone(), p0.clone()).unwrap();
        let mut ekf = EkfState { x: x0, p: p0 };
        let zs = [0.1, 0.35, 0.2, 0.5, 0.45, 0.8];
        let u = DVector::from_vec(vec![0.01, 0.02]);
        for (k, &z) in zs.iter().enumerate() {
            let obs = DVector::from_vec(vec![z]);
            let control = (k > 0).then(|| u.clone());
            window.push(control.clone(), obs.clone()).unwrap();
            let est = window.estimate(&tight()).unwrap();
            ekf = ekf_step(&model, &ekf, control.as_ref(), &obs).unwrap();
            let err = (est.current() - &ekf.x).abs().max();
            assert!(err <= 1e-8, "step {k}: {err:e}");
            let perr = (&est.covariance - &ekf.p).abs().max();
            assert!(perr <= 1e-8, "step {k}: covariance {perr:e}");
        }
    }

    #[test]
    fn window_bookkeeping() {
        let model = toy();
        let horizon = 3;
        let mut w = MheWindow::new(model, horizon, DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        w.push(None, DVector::from_vec(vec![0.0])).unwrap();
        assert_eq!(w.len(), 1);
        let u = DVector::from_vec(vec![0.0, 0.1]);
        let mut newest = Vec::new();
        for k in 1..horizon + 1 {
            w.push(Some(u.clone()), DVector::from_vec(vec![0.1 * k as f64])).unwrap();
            let est = w.estimate(&tight()).unwrap();
            newest.push(est.current().clone());
        }
        assert_eq!(w.len(), horizon + 1);
        assert_eq!(w.times_advanced(), 0);
        w.push(Some(u.clone()), DVector::from_vec(vec![0.9])).unwrap();
        assert_eq!(w.len(), horizon + 1);
        assert_eq!(w.times_advanced(), 1);
        // the new first step's prior is the estimate made when it was newest
        assert!((w.prior() - &newest[0]).abs().max() < 1e-12);

        // without a stored estimate the prior is propagated instead
        let mut w = MheWindow::new(toy(), 1, DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        w.push(None, DVector::from_vec(vec![0.0])).unwrap();
        w.push(Some(u.clone()), DVector::from_vec(vec![0.0])).unwrap();
        w.push(Some(u.clone()), DVector::from_vec(vec![0.0])).unwrap();
        let expected = w.model.transition(&DVector::from_vec(vec![1.0, 0.0]), &u);
        assert!((w.prior() - expected).abs().max() < 1e-12);
        assert!(w.push(None, DVector::from_vec(vec![0.0])).is_err());
    }

    #[test]
    fn empty_window_is_an_error() {
        let mut w = MheWindow::new(toy(), 2, DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(w.estimate(&tight()), Err(Error::Empty(_))));
        assert!(MheWindow::new(toy(), 2, DVector::zeros(3), DMatrix::identity(2, 2)).is_err());
        assert!(MheWindow::new(toy(), 2, DVector::zeros(2), -DMatrix::identity(2, 2)).is_err());
    }

    fn ring_model(landmarks: Vec<Landmark>) -> BearingModel {
        BearingModel {
            n_vehicles: 1,
            landmarks,
            ts: 0.1,
            process_variance: [1e-4; 3],
            omega_bounds: (-1.5, 1.5),
        }
    }

    #[test]
    fn zero_noise_truth_prior_is_exact() {
        let lms = vec![Landmark { id: 0, x: 20.0, y: 0.0 }, Landmark { id: 1, x: 0.0, y: 20.0 }];
        let model = ring_model(lms.clone());
        let mut truth = VehicleState::new(0.0, 0.0, 0.3);
        let mut rng = RngStream::new(1);
        let mut w = MheWindow::new(model.clone(), 5, stack_states(&[truth]), DMatrix::identity(3, 3) * 0.01).unwrap();
        let u = TeamControls::new(vec![0.2], vec![5.0]);
        for k in 0..8 {
            if k > 0 {
                truth = step(&truth, ControlInput::new(0.2), 5.0, 0.1);
            }
            // exact bearings, weighted as if gamma were 0.01
            let mut z = sense_all(&[truth], &lms, 50.0, 0.0, k, &mut rng).unwrap();
            z.items.iter_mut().for_each(|m| m.variance = 0.01);
            w.push(Some(u.clone()), z).unwrap();
            let est = w.estimate(&tight()).unwrap();
            assert!(est.cost <= 1e-12, "cost {}", est.cost);
            assert!((est.current() - stack_states(&[truth])).abs().max() < 1e-9);
        }
    }

    #[test]
    fn no_measurements_returns_propagated_prior() {
        let model = ring_model(vec![]);
        let prior = stack_states(&[VehicleState::new(3.0, -1.0, 0.5)]);
        let mut w = MheWindow::new(model.clone(), 4, prior.clone(), DMatrix::identity(3, 3)).unwrap();
        let u = TeamControls::new(vec![0.1], vec![5.0]);
        w.push(None, MeasurementSet::new(0)).unwrap();
        w.push(Some(u.clone()), MeasurementSet::new(1)).unwrap();
        let est = w.estimate(&tight()).unwrap();
        let expect = model.transition(&prior, &u);
        assert!((est.current() - expect).abs().max() < 1e-12);
    }

    #[test]
    fn solution_is_stationary_and_not_worse_than_prior() {
        let lms = vec![
            Landmark { id: 0, x: 20.0, y: 0.0 },
            Landmark { id: 1, x: 0.0, y: 20.0 },
            Landmark { id: 2, x: -15.0, y: -10.0 },
        ];
        let model = ring_model(lms.clone());
        let mut truth = VehicleState::new(0.0, 0.0, 0.3);
        let mut rng = RngStream::new(7);
        let prior = stack_states(&[VehicleState::new(1.0, -0.8, 0.35)]);
        let mut w = MheWindow::new(model, 6, prior.clone(), DMatrix::identity(3, 3)).unwrap();
        let u = TeamControls::new(vec![0.3], vec![5.0]);
        for k in 0..5 {
            if k > 0 {
                truth = step(&truth, ControlInput::new(0.3), 5.0, 0.1);
            }
            let z = sense_all(&[truth], &lms, 50.0, 0.01, k, &mut rng).unwrap();
            w.push(Some(u.clone()), z).unwrap();
        }
        let cost_prior = w.cost(&prior).unwrap();
        let est = w.estimate(&tight()).unwrap();
        let x = &est.trajectory[0];
        assert!(est.cost <= cost_prior);
        let g = w.cost_gradient(x).unwrap();
        assert!(g.norm() <= 1e-6, "gradient {}", g.norm());
        let probe = x + DVector::from_vec(vec![0.05, -0.03, 0.01]);
        let analytic = w.cost_gradient(&probe).unwrap();
        let fd = finite_diff_grad(|v| w.cost(&DVector::from_column_slice(v)), probe.as_slice(), 1e-6).unwrap();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn ekf_predict_only_and_fixed_point() {
        let lms = vec![Landmark { id: 0, x: 20.0, y: 0.0 }, Landmark { id: 1, x: 0.0, y: 20.0 }];
        let model = ring_model(lms.clone());
        let s = VehicleState::new(0.0, 0.0, 0.0);
        let st = EkfState { x: stack_states(&[s]), p: DMatrix::identity(3, 3) * 0.1 };
        let u = TeamControls::new(vec![0.0], vec![0.0]);
        let next = ekf_step(&model, &st, Some(&u), &MeasurementSet::new(1)).unwrap();
        assert!((&next.p - (&st.p + model.process_noise())).abs().max() < 1e-15);

        let mut rng = RngStream::new(3);
        let z = sense_all(&[s], &lms, 50.0, 0.0, 0, &mut rng).unwrap();
        let upd = ekf_step(&model, &st, None, &z).unwrap();
        assert!((&upd.x - &st.x).abs().max() < 1e-15);
        assert!(upd.p.trace() < st.p.trace());
        assert!((&upd.p - upd.p.transpose()).abs().max() <= 1e-12);
    }

    #[test]
    fn zeta_examples() {
        let seq = zeta_sequence(0.5, 1.0, 0.0, 100);
        assert_eq!(seq.fixed_point, Some(2.0));
        assert!((seq.values[100] - 2.0).abs() <= 1e-9);
        let params = StabilityParams { c1: 1.0, c2: 1.0, c3: 1.0, kf: 0.9, p: 1.0, delta: 0.5, r_mu: 0.0 };
        let z = zeta_bound(&params, 3.0, 60).unwrap();
        assert!(z.a < 1.0);
        assert!(z.values[60] < 3.0 * z.a.powi(59));
        assert!(z.values.windows(2).all(|w| w[1] < w[0]));
        let grow = StabilityParams { kf: 5.0, ..params };
        let z = zeta_bound(&grow, 1.0, 10).unwrap();
        assert!(!z.converges());
        assert!(zeta_bound(&StabilityParams { c1: 0.0, ..params }, 1.0, 3).is_err());
        assert!(zeta_bound(&params, -1.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn zeta_limit_matches_fixed_point(a in 0.0f64..0.95, beta in 0.0f64..5.0, z0 in 0.0f64..10.0) {
            let seq = zeta_sequence(a, beta, z0, 2000);
            let fp = seq.fixed_point.unwrap();
            prop_assert!((seq.values[2000] - fp).abs() <= 1e-9 * (1.0 + fp));
        }
    }

    #[test]
    fn estimator_kind_parses() {
        assert_eq!("mhe".parse::<EstimatorKind>().unwrap(), EstimatorKind::Mhe);
        assert_eq!("ekf".parse::<EstimatorKind>().unwrap(), EstimatorKind::Ekf);
        assert!("ukf".parse::<EstimatorKind>().is_err());
    }
}
