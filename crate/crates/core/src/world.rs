//! Domain types shared by every other module: poses, controls, landmarks,
//! the scenario configuration document and the seeded random streams.
//!
//! # Scenario documents
//!
//! A scenario is one TOML file. Every tunable carries its unit in the key
//! name (`speed_mps`, `sensor_range_m`, ...). Omitted tunables take the
//! defaults listed on [`Scenario::default`]. The `version` key is mandatory
//! and must equal [`SCENARIO_VERSION`].
//!
//! # Random streams
//!
//! [`RngStream`] is ChaCha8 (`rand_chacha` 0.3) keyed by a 32-byte SHA-256
//! digest. The root key is `SHA256(seed as u64 little-endian)`; a child
//! stream for label `L` is keyed by `SHA256(parent_key || utf8(L))`.
//! Gaussian draws use `rand_distr` 0.4 `StandardNormal` (ziggurat) scaled by
//! the standard deviation. Adding a new consumer label never changes the
//! draws seen by existing labels.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::kinematics::wrap_angle;
use crate::{Error, Result};

pub const SCENARIO_VERSION: u32 = 1;

/// Planar pose of one vehicle. `psi` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn set_heading(&mut self, psi: f64) {
        self.psi = wrap_angle(psi);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    /// Turn rate [rad/s].
    pub omega: f64,
}

impl ControlInput {
    pub fn new(omega: f64) -> Self {
        Self { omega }
    }

    pub fn clamped(omega: f64, bounds: (f64, f64)) -> Self {
        Self {
            omega: omega.clamp(bounds.0, bounds.1),
        }
    }
}

/// Graph node identity. Vehicles order before landmarks, then by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Vehicle(usize),
    Landmark(usize),
}

impl NodeId {
    pub fn is_vehicle(&self) -> bool {
        matches!(self, NodeId::Vehicle(_))
    }

    pub fn is_landmark(&self) -> bool {
        matches!(self, NodeId::Landmark(_))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Vehicle(i) => write!(f, "v{i}"),
            NodeId::Landmark(j) => write!(f, "l{j}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landmark {
    pub id: u32,
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
}

impl Landmark {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub x_m: f64,
    pub y_m: f64,
    #[serde(default)]
    pub psi_rad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Point {
    pub x_m: f64,
    pub y_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub start: Pose,
    pub goal: Point,
}

impl VehicleSpec {
    pub fn start_state(&self) -> VehicleState {
        VehicleState::new(self.start.x_m, self.start.y_m, self.start.psi_rad)
    }

    pub fn goal_position(&self) -> [f64; 2] {
        [self.goal.x_m, self.goal.y_m]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arena {
    pub min_x_m: f64,
    pub max_x_m: f64,
    pub min_y_m: f64,
    pub max_y_m: f64,
}

impl Default for Arena {
    fn default() -> Self {
        Self {
            min_x_m: 0.0,
            max_x_m: 200.0,
            min_y_m: 0.0,
            max_y_m: 200.0,
        }
    }
}

impl Arena {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x_m && x <= self.max_x_m && y >= self.min_y_m && y <= self.max_y_m
    }

    pub fn diagonal(&self) -> f64 {
        (self.max_x_m - self.min_x_m).hypot(self.max_y_m - self.min_y_m)
    }
}

/// How the goal and connectivity series are scaled before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Fixed per-solve bounds: the goal cost is scaled by the range of squared
    /// distances reachable within the horizon and the connectivity cost by
    /// `eta^2`.
    ReachableRange,
    /// Min-max over the candidate series itself; a constant series maps to 0.
    HorizonMinMax,
}

/// Whether the adaptive weight is re-evaluated along the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Predictive,
    Frozen,
}

/// Where the planner's `sigma_p` for the adaptive weight comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSource {
    /// The estimator's current position covariance, grown by process noise
    /// along the prediction while the vehicle has no edges.
    Estimator,
    /// The closed-form bearing expression on the predicted geometry.
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Adjoint,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSettings {
    /// Plant steps per piecewise-constant control block.
    pub control_block_steps: usize,
    pub normalization: Normalization,
    pub weight_mode: WeightMode,
    pub sigma_source: SigmaSource,
    pub gradient: GradientMode,
    pub max_iters: usize,
    pub gradient_tolerance: f64,
    /// Path enumeration cap for the path-sum covariance (0 selects `n_v + 1`).
    pub max_hops: usize,
    /// Score a few fixed turn patterns before each solve and start from the
    /// best. Lets a vehicle find landmarks beyond the flat region where no
    /// predicted step has any connectivity.
    pub seed_plans: bool,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            control_block_steps: 5,
            normalization: Normalization::ReachableRange,
            weight_mode: WeightMode::Predictive,
            sigma_source: SigmaSource::Estimator,
            gradient: GradientMode::Adjoint,
            max_iters: 25,
            gradient_tolerance: 1e-6,
            max_hops: 0,
            seed_plans: true,
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    /// Master seed; TOML integers are signed, so keep it below 2^63.
    pub seed: u64,
    pub speed_mps: f64,
    pub step_s: f64,
    pub sensor_range_m: f64,
    pub eta: f64,
    pub kappa: f64,
    pub rho_m: f64,
    pub connectivity_weight: f64,
    pub sigma_c_m: f64,
    pub bearing_variance_rad2: f64,
    /// Per-vehicle process variance for (x [m^2], y [m^2], psi [rad^2]).
    pub process_variance: [f64; 3],
    pub horizon_s: f64,
    pub mhe_horizon_steps: usize,
    pub omega_min_radps: f64,
    pub omega_max_radps: f64,
    /// Arrival radius. Keep it above the minimum turn radius
    /// `speed_mps / omega_max_radps`, or a vehicle that overshoots can orbit
    /// its goal without ever entering it.
    pub goal_radius_m: f64,
    pub max_steps: usize,
    /// 1-sigma perturbation of the initial position estimate [m].
    pub initial_position_sigma_m: f64,
    /// 1-sigma perturbation of the initial heading estimate [rad].
    pub initial_heading_sigma_rad: f64,
    /// Extra landmarks drawn uniformly in the arena from the placement stream.
    pub random_landmarks: usize,
    pub arena: Arena,
    pub planner: PlannerSettings,
    pub vehicles: Vec<VehicleSpec>,
    pub landmarks: Vec<Landmark>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            version: 0,
            seed: 0,
            speed_mps: 5.0,
            step_s: 0.1,
            sensor_range_m: 50.0,
            eta: 2.0,
            kappa: 5.0,
            rho_m: 0.5,
            connectivity_weight: 10_000.0,
            sigma_c_m: 3.0,
            bearing_variance_rad2: 0.01,
            process_variance: [1e-4, 1e-4, 1e-4],
            horizon_s: 25.0,
            mhe_horizon_steps: 20,
            omega_min_radps: -FRAC_PI_2,
            omega_max_radps: FRAC_PI_2,
            goal_radius_m: 5.0,
            max_steps: 2000,
            initial_position_sigma_m: 1.0,
            initial_heading_sigma_rad: 0.05,
            random_landmarks: 0,
            arena: Arena::default(),
            planner: PlannerSettings::default(),
            vehicles: Vec::new(),
            landmarks: Vec::new(),
        }
    }
}

impl Scenario {
    /// Defaults with the version tag set; handy for building scenarios in code.
    pub fn with_defaults() -> Self {
        Self {
            version: SCENARIO_VERSION,
            ..Self::default()
        }
    }

    pub fn n_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    pub fn omega_bounds(&self) -> (f64, f64) {
        (self.omega_min_radps, self.omega_max_radps)
    }

    /// Prediction steps `round(horizon_s / step_s)`, at least 1.
    pub fn horizon_steps(&self) -> usize {
        ((self.horizon_s / self.step_s).round() as usize).max(1)
    }

    pub fn max_hops(&self) -> usize {
        if self.planner.max_hops == 0 {
            self.vehicles.len() + 1
        } else {
            self.planner.max_hops
        }
    }

    pub fn start_states(&self) -> Vec<VehicleState> {
        self.vehicles.iter().map(VehicleSpec::start_state).collect()
    }

    pub fn goals(&self) -> Vec<[f64; 2]> {
        self.vehicles.iter().map(VehicleSpec::goal_position).collect()
    }

    /// Explicit landmarks followed by `random_landmarks` draws from the
    /// `"placement"` child stream of the scenario seed.
    pub fn resolve_landmarks(&self) -> Vec<Landmark> {
        let mut out = self.landmarks.clone();
        if self.random_landmarks > 0 {
            let mut rng = RngStream::new(self.seed).child("placement");
            let mut next_id = out.iter().map(|l| l.id + 1).max().unwrap_or(0);
            for _ in 0..self.random_landmarks {
                let x = rng.uniform(self.arena.min_x_m, self.arena.max_x_m);
                let y = rng.uniform(self.arena.min_y_m, self.arena.max_y_m);
                out.push(Landmark { id: next_id, x, y });
                next_id += 1;
            }
        }
        out
    }

    /// Every violated invariant, each prefixed with its field path.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        need(
            self.version == SCENARIO_VERSION,
            &format!("version: required and must equal {SCENARIO_VERSION}"),
        );
        need(self.speed_mps.is_finite() && self.speed_mps >= 0.0, "speed_mps: must be finite and >= 0");
        need(self.step_s.is_finite() && self.step_s > 0.0, "step_s: must be > 0");
        need(self.rho_m.is_finite() && self.rho_m >= 0.0, "rho_m: must be >= 0");
        need(
            self.sensor_range_m.is_finite() && self.sensor_range_m > self.rho_m,
            "sensor_range_m: Rs must exceed rho (rho_m)",
        );
        need(self.eta.is_finite() && self.eta >= 2.0, "eta: must be >= 2");
        need(self.kappa.is_finite() && self.kappa > 0.0, "kappa: must be > 0");
        need(
            self.connectivity_weight.is_finite() && self.connectivity_weight >= 0.0,
            "connectivity_weight: must be >= 0",
        );
        need(self.sigma_c_m.is_finite() && self.sigma_c_m > 0.0, "sigma_c_m: must be > 0");
        need(
            self.bearing_variance_rad2.is_finite() && self.bearing_variance_rad2 > 0.0,
            "bearing_variance_rad2: must be > 0",
        );
        need(
            self.process_variance.iter().all(|q| q.is_finite() && *q >= 0.0),
            "process_variance: entries must be finite and >= 0",
        );
        need(
            self.horizon_s.is_finite() && self.horizon_s >= self.step_s,
            "horizon_s: must be >= step_s",
        );
        need(self.mhe_horizon_steps >= 1, "mhe_horizon_steps: must be >= 1");
        need(
            self.omega_min_radps.is_finite()
                && self.omega_max_radps.is_finite()
                && self.omega_min_radps <= 0.0
                && self.omega_max_radps >= 0.0,
            "omega_min_radps/omega_max_radps: bounds must bracket 0",
        );
        need(self.goal_radius_m.is_finite() && self.goal_radius_m >= 0.0, "goal_radius_m: must be >= 0");
        need(self.max_steps >= 1, "max_steps: must be >= 1");
        need(
            self.initial_position_sigma_m.is_finite() && self.initial_position_sigma_m >= 0.0,
            "initial_position_sigma_m: must be >= 0",
        );
        need(
            self.initial_heading_sigma_rad.is_finite() && self.initial_heading_sigma_rad >= 0.0,
            "initial_heading_sigma_rad: must be >= 0",
        );
        need(
            self.arena.min_x_m < self.arena.max_x_m && self.arena.min_y_m < self.arena.max_y_m,
            "arena: min must be below max on both axes",
        );
        need(self.planner.control_block_steps >= 1, "planner.control_block_steps: must be >= 1");
        need(self.planner.max_iters >= 1, "planner.max_iters: must be >= 1");
        need(
            self.planner.gradient_tolerance > 0.0,
            "planner.gradient_tolerance: must be > 0",
        );
        need(!self.vehicles.is_empty(), "vehicles: at least one vehicle required");

        for (i, v) in self.vehicles.iter().enumerate() {
            let s = v.start;
            if ![s.x_m, s.y_m, s.psi_rad, v.goal.x_m, v.goal.y_m]
                .iter()
                .all(|c| c.is_finite())
            {
                errs.push(format!("vehicles[{i}]: coordinates must be finite"));
                continue;
            }
            if !self.arena.contains(s.x_m, s.y_m) {
                errs.push(format!("vehicles[{i}].start: outside arena"));
            }
            if !self.arena.contains(v.goal.x_m, v.goal.y_m) {
                errs.push(format!("vehicles[{i}].goal: outside arena"));
            }
        }
        let mut ids = BTreeSet::new();
        for (j, l) in self.landmarks.iter().enumerate() {
            if !(l.x.is_finite() && l.y.is_finite()) {
                errs.push(format!("landmarks[{j}]: coordinates must be finite"));
            }
            if !ids.insert(l.id) {
                errs.push(format!("landmarks[{j}].id: duplicate id {}", l.id));
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Parse and validate a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Seeded, forkable random stream. See the module docs for the derivation rule.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: [u8; 32],
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(Sha256::digest(seed.to_le_bytes()).into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        Self {
            key,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Independent stream for one consumer. Depends only on this stream's key
    /// and the label, never on how many draws were already taken.
    pub fn child(&self, label: &str) -> RngStream {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(label.as_bytes());
        Self::from_key(h.finalize().into())
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }
}

/// One draw from `N(mean, variance)`. Zero variance returns `mean` exactly.
pub fn gaussian(rng: &mut RngStream, mean: f64, variance: f64) -> Result<f64> {
    if !(variance >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance must be >= 0, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(mean);
    }
    Ok(mean + variance.sqrt() * rng.standard_normal())
}
