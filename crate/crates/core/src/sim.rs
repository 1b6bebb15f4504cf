//! Closed loop, Monte-Carlo driver, run metrics and trace export.
//!
//! Each plant step `m` runs, in order: sense from the true poses, fold the
//! previous controls and the new measurements into the estimator, mark
//! vehicles whose estimate is inside the goal radius as arrived, plan from
//! the estimates, and advance the plant. The planner never sees true poses.
//!
//! Random streams (children of the scenario seed): `"placement"` for extra
//! landmarks, `"init"` for the initial estimate error, `"sensing"` for
//! measurement noise and `"process"` for plant noise. Runs that share a seed
//! share all four, so estimator comparisons are paired.
//!
//! # Exported files
//!
//! CSV schema version 1 (`SCHEMA_VERSION`). JSON output holds the same
//! records as arrays of objects with the same field names.
//!
//! | file | columns |
//! |------|---------|
//! | `true_trajectory` | `step, time_s, vehicle, x_m, y_m, psi_rad` |
//! | `estimated_trajectory` | `step, time_s, vehicle, x_m, y_m, psi_rad` |
//! | `measurements` | `step, observer, target, kind, value, variance` |
//! | `planner` | `step, vehicle, omega_radps, objective, iterations, termination, degraded, c1, c2, lambda, sigma_p_m, weight` |
//! | `metrics` | `vehicle, path_length_m, mse_m2, arrival_step` |
//! | `timing` | `step, planner_wall_s` |
//!
//! `manifest.json` records the seed, the scenario and result digests, the
//! run flags and machine metadata. Everything except `timing` and the
//! manifest's machine block is bit-identical across repeated runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::sigma_from_matrix;
use crate::estimation::{stack_states, unstack_states, BearingModel, EstimatorKind, TeamControls, TeamEstimator};
use crate::kinematics::{step, wrap_angle};
use crate::nlp::Termination;
use crate::nmpc::{NmpcParams, Planner, StepCost};
use crate::rpmg::{build_rpmg_with, lambda2, vehicle_laplacian, AdjacencyParams};
use crate::sensing::{sense_all_with, Measurement, MeasurementSet};
use crate::world::{gaussian, ControlInput, Landmark, RngStream, Scenario, VehicleState};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Noise handling of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Measurement, process and initial-estimate noise as configured.
    Nominal,
    /// Exact measurements, no plant noise, estimate initialized at truth.
    /// The estimator still weights measurements by the configured variance.
    Noiseless,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub estimator: EstimatorKind,
    pub cooperation: bool,
    /// Overrides the scenario's `max_steps`.
    pub max_steps: Option<usize>,
    pub noise: NoiseMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            estimator: EstimatorKind::Mhe,
            cooperation: true,
            max_steps: None,
            noise: NoiseMode::Nominal,
        }
    }
}

/// One planner invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRecord {
    pub step: usize,
    pub omega: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub degraded: bool,
    /// Cost terms of every vehicle at the first predicted step.
    pub predicted: Vec<StepCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub vehicle: usize,
    pub path_length_m: f64,
    pub mse_m2: f64,
    pub arrival_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub vehicles: Vec<VehicleMetrics>,
    pub total_path_length_m: f64,
    /// Mean of the per-vehicle MSEs.
    pub mse_m2: f64,
    /// Time of the last arrival; `None` unless every vehicle arrived.
    pub last_arrival_s: Option<f64>,
    pub mean_planner_time_s: f64,
}

impl RunMetrics {
    pub fn all_arrived(&self) -> bool {
        self.vehicles.iter().all(|v| v.arrival_step.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub scenario_digest: String,
    pub config: RunConfig,
    pub landmarks: Vec<Landmark>,
    /// `true_states[m][i]`, one entry per loop iteration.
    pub true_states: Vec<Vec<VehicleState>>,
    pub estimated_states: Vec<Vec<VehicleState>>,
    pub measurements: Vec<MeasurementSet>,
    pub planner: Vec<PlannerRecord>,
    /// Algebraic connectivity of each vehicle's true neighborhood, per step.
    pub lambda: Vec<Vec<f64>>,
    pub metrics: RunMetrics,
    /// Wall time of each planner call [s].
    pub planner_wall_s: Vec<f64>,
    pub estimator_degraded_solves: usize,
    /// Why the run stopped early, if it did (estimator divergence).
    pub aborted: Option<String>,
}

impl RunResult {
    /// Plant steps taken.
    pub fn steps(&self) -> usize {
        self.true_states.len().saturating_sub(1)
    }

    /// Hex SHA-256 over everything except wall times.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Stable<'a> {
            seed: u64,
            scenario_digest: &'a str,
            config: &'a RunConfig,
            landmarks: &'a [Landmark],
            true_states: &'a [Vec<VehicleState>],
            estimated_states: &'a [Vec<VehicleState>],
            measurements: &'a [MeasurementSet],
            planner: &'a [PlannerRecord],
            vehicles: &'a [VehicleMetrics],
            aborted: &'a Option<String>,
        }
        let stable = Stable {
            seed: self.seed,
            scenario_digest: &self.scenario_digest,
            config: &self.config,
            landmarks: &self.landmarks,
            true_states: &self.true_states,
            estimated_states: &self.estimated_states,
            measurements: &self.measurements,
            planner: &self.planner,
            vehicles: &self.metrics.vehicles,
            aborted: &self.aborted,
        };
        let bytes = serde_json::to_vec(&stable).unwrap_or_default();
        hex::encode(Sha256::digest(bytes))
    }
}

/// Sum of step displacements.
pub fn path_length(states: &[VehicleState]) -> f64 {
    states
        .windows(2)
        .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
        .sum()
}

/// Mean squared position error over paired samples.
pub fn position_mse(truth: &[VehicleState], estimate: &[VehicleState]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension(format!("{} true vs {} estimated samples", truth.len(), estimate.len())));
    }
    if truth.is_empty() {
        return Err(Error::Empty("trajectory".into()));
    }
    let sum: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(t, e)| (t.x - e.x).powi(2) + (t.y - e.y).powi(2))
        .sum();
    Ok(sum / truth.len() as f64)
}

/// Metrics from stacked trajectories (`[step][vehicle]`).
pub fn compute_metrics(
    truth: &[Vec<VehicleState>],
    estimate: &[Vec<VehicleState>],
    arrival: &[Option<usize>],
    ts: f64,
    planner_wall_s: &[f64],
) -> Result<RunMetrics> {
    let n = arrival.len();
    if truth.iter().chain(estimate).any(|row| row.len() != n) {
        return Err(Error::Dimension(format!("rows must hold {n} vehicles")));
    }
    let column = |rows: &[Vec<VehicleState>], i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
    let mut vehicles = Vec::with_capacity(n);
    for (i, &arrival_step) in arrival.iter().enumerate() {
        let t = column(truth, i);
        vehicles.push(VehicleMetrics {
            vehicle: i,
            path_length_m: path_length(&t),
            mse_m2: position_mse(&t, &column(estimate, i))?,
            arrival_step,
        });
    }
    let last_arrival_s = arrival
        .iter()
        .try_fold(0usize, |acc, a| a.map(|s| acc.max(s)))
        .map(|s| s as f64 * ts);
    Ok(RunMetrics {
        total_path_length_m: vehicles.iter().map(|v| v.path_length_m).sum(),
        mse_m2: if n > 0 { vehicles.iter().map(|v| v.mse_m2).sum::<f64>() / n as f64 } else { 0.0 },
        vehicles,
        last_arrival_s,
        mean_planner_time_s: if planner_wall_s.is_empty() {
            0.0
        } else {
            planner_wall_s.iter().sum::<f64>() / planner_wall_s.len() as f64
        },
    })
}

/// Algebraic connectivity of every vehicle's neighborhood.
pub fn team_lambda(
    states: &[VehicleState],
    landmarks: &[Landmark],
    params: &AdjacencyParams,
    cooperation: bool,
) -> Result<Vec<f64>> {
    let g = build_rpmg_with(states, landmarks, params.rs, cooperation);
    (0..states.len())
        .map(|i| lambda2(&vehicle_laplacian(&g, i, params)?.matrix))
        .collect()
}

/// Run one closed loop. Estimator divergence ends the run early with
/// `aborted` set; it is not an error.
pub fn run_closed_loop(scenario: &Scenario, config: &RunConfig) -> Result<RunResult> {
    scenario.validate()?;
    let n = scenario.n_vehicles();
    let ts = scenario.step_s;
    let max_steps = config.max_steps.unwrap_or(scenario.max_steps);
    let landmarks = scenario.resolve_landmarks();
    let marks: Vec<[f64; 2]> = landmarks.iter().map(Landmark::position).collect();
    let goals = scenario.goals();
    let noisy = config.noise == NoiseMode::Nominal;
    let gamma = scenario.bearing_variance_rad2;
    let q = scenario.process_variance;
    let diagonal = scenario.arena.diagonal();

    let root = RngStream::new(scenario.seed);
    let mut init_rng = root.child("init");
    let mut sense_rng = root.child("sensing");
    let mut process_rng = root.child("process");

    let mut truth = scenario.start_states();
    let (sp, sh) = (scenario.initial_position_sigma_m, scenario.initial_heading_sigma_rad);
    let mut prior_states = truth.clone();
    if noisy {
        for s in &mut prior_states {
            s.x = gaussian(&mut init_rng, s.x, sp * sp)?;
            s.y = gaussian(&mut init_rng, s.y, sp * sp)?;
            s.psi = wrap_angle(gaussian(&mut init_rng, s.psi, sh * sh)?);
        }
    }
    // a zero initial spread would make the arrival weight singular
    let p0 = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        3 * n,
        (0..n).flat_map(|_| [(sp * sp).max(1e-6), (sp * sp).max(1e-6), (sh * sh).max(1e-8)]),
    ));
    let model = BearingModel {
        n_vehicles: n,
        landmarks: landmarks.clone(),
        ts,
        process_variance: q,
        omega_bounds: scenario.omega_bounds(),
    };
    let mut estimator = TeamEstimator::new(
        config.estimator,
        model,
        scenario.mhe_horizon_steps,
        stack_states(&prior_states),
        p0,
    )?;
    let params = NmpcParams::from_scenario(scenario);
    let adjacency = params.adjacency;
    let speed = params.speed;
    let mut planner = Planner::new(params);

    let mut active = vec![true; n];
    let mut arrival = vec![None; n];
    let mut applied = TeamControls::new(vec![0.0; n], vec![speed; n]);
    let mut out_truth = Vec::new();
    let mut out_est = Vec::new();
    let mut out_meas = Vec::new();
    let mut out_plan = Vec::new();
    let mut out_lambda = Vec::new();
    let mut wall = Vec::new();
    let mut aborted = None;

    for m in 0..=max_steps {
        let mut z = sense_all_with(&truth, &landmarks, scenario.sensor_range_m, if noisy { gamma } else { 0.0 }, m, config.cooperation, &mut sense_rng)?;
        for item in &mut z.items {
            item.variance = gamma;
        }
        let (x_hat, p_hat) = estimator.update(&applied, z.clone())?;
        let est = unstack_states(&x_hat);
        out_truth.push(truth.clone());
        out_est.push(est.clone());
        out_meas.push(z);
        out_lambda.push(team_lambda(&truth, &landmarks, &adjacency, config.cooperation)?);

        let worst = truth
            .iter()
            .zip(&est)
            .map(|(t, e)| (t.x - e.x).hypot(t.y - e.y))
            .fold(0.0, f64::max);
        if !(worst <= diagonal) {
            aborted = Some(format!("estimator diverged at step {m}: position error {worst:.3} m"));
            break;
        }

        for i in 0..n {
            if active[i] && (est[i].x - goals[i][0]).hypot(est[i].y - goals[i][1]) <= scenario.goal_radius_m {
                active[i] = false;
                arrival[i] = Some(m);
            }
        }
        if m == max_steps || active.iter().all(|a| !a) {
            break;
        }

        let sigma: Vec<f64> = (0..n).map(|i| sigma_from_matrix(&p_hat, 3 * i)).collect();
        let started = Instant::now();
        let plan = planner.plan(&est, &goals, &active, &sigma, &marks, config.cooperation)?;
        wall.push(started.elapsed().as_secs_f64());

        let speeds: Vec<f64> = active.iter().map(|&a| if a { speed } else { 0.0 }).collect();
        let omega: Vec<f64> = plan.controls.iter().map(|c| c.omega).collect();
        out_plan.push(PlannerRecord {
            step: m,
            omega: omega.clone(),
            objective: plan.report.objective,
            iterations: plan.report.iterations,
            termination: plan.report.termination,
            degraded: plan.degraded,
            predicted: plan.breakdown.steps.first().cloned().unwrap_or_default(),
        });

        for i in 0..n {
            let mut next = step(&truth[i], ControlInput::new(omega[i]), speeds[i], ts);
            let w = [
                gaussian(&mut process_rng, 0.0, if noisy { q[0] } else { 0.0 })?,
                gaussian(&mut process_rng, 0.0, if noisy { q[1] } else { 0.0 })?,
                gaussian(&mut process_rng, 0.0, if noisy { q[2] } else { 0.0 })?,
            ];
            if active[i] {
                next.x += w[0];
                next.y += w[1];
                next.psi = wrap_angle(next.psi + w[2]);
            }
            truth[i] = next;
        }
        applied = TeamControls::new(omega, speeds);
    }

    let metrics = compute_metrics(&out_truth, &out_est, &arrival, ts, &wall)?;
    Ok(RunResult {
        seed: scenario.seed,
        scenario_digest: scenario.digest(),
        config: *config,
        landmarks,
        true_states: out_truth,
        estimated_states: out_est,
        measurements: out_meas,
        planner: out_plan,
        lambda: out_lambda,
        metrics,
        planner_wall_s: wall,
        estimator_degraded_solves: estimator.degraded_solves(),
        aborted,
    })
}

/// Set a scenario field by dotted TOML key (`horizon_s`, `planner.max_iters`).
pub fn apply_override(scenario: &Scenario, key: &str, value: f64) -> Result<Scenario> {
    let mut doc = toml::Value::try_from(scenario).map_err(|e| Error::Serialize(e.to_string()))?;
    let mut slot = &mut doc;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario key {key:?}")))?;
    }
    *slot = match slot {
        toml::Value::Integer(_) if value.fract() == 0.0 && value >= 0.0 => toml::Value::Integer(value as i64),
        toml::Value::Integer(_) => {
            return Err(Error::InvalidArgument(format!("{key} takes a non-negative integer, got {value}")))
        }
        toml::Value::Float(_) => toml::Value::Float(value),
        _ => return Err(Error::InvalidArgument(format!("{key} is not a numeric scenario key"))),
    };
    let out: Scenario = doc.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

/// One swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<f64>,
}

impl std::str::FromStr for GridAxis {
    type Err = Error;

    /// `KEY=V1,V2,...`
    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("grid axis {s:?} is not KEY=V1,V2,...")))?;
        let values = vals
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("grid value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if key.trim().is_empty() || values.is_empty() {
            return Err(Error::InvalidArgument(format!("grid axis {s:?}")));
        }
        Ok(GridAxis {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Median and interquartile range (linear-interpolated quartiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub iqr: f64,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn spread(values: &[f64]) -> Option<Spread> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Spread {
        median: quantile(&v, 0.5),
        iqr: quantile(&v, 0.75) - quantile(&v, 0.25),
    })
}

/// Outcome of one seeded run inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub digest: Option<String>,
    pub metrics: Option<RunMetrics>,
    /// Error text or abort reason.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointSummary {
    pub assignments: Vec<(String, f64)>,
    pub runs: Vec<SeedOutcome>,
    pub failures: usize,
    pub mse_m2: Option<Spread>,
    pub total_path_length_m: Option<Spread>,
    /// Over runs where every vehicle arrived.
    pub last_arrival_s: Option<Spread>,
    pub planner_time_s: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub config: RunConfig,
    pub points: Vec<GridPointSummary>,
}

/// Every combination of the axis values, first axis slowest.
pub fn grid_points(grid: &[GridAxis]) -> Vec<Vec<(String, f64)>> {
    grid.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push((axis.key.clone(), v));
                    p
                })
            })
            .collect()
    })
}

/// `n` consecutive seeds starting at `master`.
pub fn seed_list(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| master.wrapping_add(k)).collect()
}

/// Independent runs for every grid point and seed. Per-run failures are
/// recorded, not returned. `jobs = 0` uses every core.
pub fn run_monte_carlo(
    base: &Scenario,
    seeds: &[u64],
    grid: &[GridAxis],
    config: &RunConfig,
    jobs: usize,
) -> Result<MonteCarloSummary> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list".into()));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(Error::InvalidArgument(format!("duplicate seed {dup}")));
    }
    let points = grid_points(grid);
    let mut scenarios = Vec::with_capacity(points.len());
    for point in &points {
        let mut s = base.clone();
        for (key, v) in point {
            s = apply_override(&s, key, *v)?;
        }
        scenarios.push(s);
    }
    let tasks: Vec<(usize, u64)> = (0..points.len()).flat_map(|p| seeds.iter().map(move |&s| (p, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(p, seed)| {
                let mut s = scenarios[p].clone();
                s.seed = seed;
                match run_closed_loop(&s, config) {
                    Ok(r) => SeedOutcome {
                        seed,
                        digest: Some(r.digest()),
                        failure: r.aborted.clone(),
                        metrics: Some(r.metrics),
                    },
                    Err(e) => SeedOutcome {
                        seed,
                        digest: None,
                        metrics: None,
                        failure: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });

    let summaries = points
        .into_iter()
        .zip(outcomes.chunks(seeds.len()))
        .map(|(assignments, runs)| {
            let done: Vec<&RunMetrics> = runs
                .iter()
                .filter(|r| r.failure.is_none())
                .filter_map(|r| r.metrics.as_ref())
                .collect();
            let pick = |f: &dyn Fn(&RunMetrics) -> Option<f64>| spread(&done.iter().filter_map(|m| f(m)).collect::<Vec<_>>());
            GridPointSummary {
                assignments,
                failures: runs.len() - done.len(),
                mse_m2: pick(&|m| Some(m.mse_m2)),
                total_path_length_m: pick(&|m| Some(m.total_path_length_m)),
                last_arrival_s: pick(&|m| m.last_arrival_s),
                planner_time_s: pick(&|m| Some(m.mean_planner_time_s)),
                runs: runs.to_vec(),
            }
        })
        .collect();
    Ok(MonteCarloSummary {
        config: *config,
        points: summaries,
    })
}

/// Write a sweep summary as pretty JSON.
pub fn write_summary(summary: &MonteCarloSummary, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Serialize(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub time_s: f64,
    pub vehicle: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub psi_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub step: usize,
    pub observer: String,
    pub target: String,
    pub kind: String,
    pub value: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRow {
    pub step: usize,
    pub vehicle: usize,
    pub omega_radps: f64,
    pub objective: f64,
    pub iterations: usize,
    pub termination: String,
    pub degraded: bool,
    pub c1: f64,
    pub c2: f64,
    pub lambda: f64,
    pub sigma_p_m: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub step: usize,
    pub planner_wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl MachineInfo {
    pub fn current() -> Self {
        MachineInfo {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub scenario_digest: String,
    pub result_digest: String,
    pub config: RunConfig,
    pub steps: usize,
    pub aborted: Option<String>,
    pub machine: MachineInfo,
    pub files: Vec<String>,
}

pub fn trajectory_rows(states: &[Vec<VehicleState>], ts: f64) -> Vec<TrajectoryRow> {
    states
        .iter()
        .enumerate()
        .flat_map(|(m, row)| {
            row.iter().enumerate().map(move |(i, s)| TrajectoryRow {
                step: m,
                time_s: m as f64 * ts,
                vehicle: i,
                x_m: s.x,
                y_m: s.y,
                psi_rad: s.psi,
            })
        })
        .collect()
}

fn measurement_rows(sets: &[MeasurementSet]) -> Vec<MeasurementRow> {
    sets.iter()
        .flat_map(|set| set.items.iter())
        .map(|m: &Measurement| MeasurementRow {
            step: m.time_step,
            observer: m.observer.to_string(),
            target: m.target.to_string(),
            kind: format!("{:?}", m.kind).to_lowercase(),
            value: m.value,
            variance: m.variance,
        })
        .collect()
}

fn planner_rows(records: &[PlannerRecord]) -> Vec<PlannerRow> {
    records
        .iter()
        .flat_map(|r| {
            r.omega.iter().enumerate().map(move |(i, &w)| {
                let c = r.predicted.get(i).copied().unwrap_or_default();
                PlannerRow {
                    step: r.step,
                    vehicle: i,
                    omega_radps: w,
                    objective: r.objective,
                    iterations: r.iterations,
                    termination: serde_json::to_value(r.termination)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default(),
                    degraded: r.degraded,
                    c1: c.c1,
                    c2: c.c2,
                    lambda: c.lambda,
                    sigma_p_m: c.sigma_p,
                    weight: c.weight,
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsRow {
    vehicle: usize,
    path_length_m: f64,
    mse_m2: f64,
    arrival_step: Option<usize>,
}

fn write_table<T: Serialize>(dir: &Path, stem: &str, rows: &[T], format: ExportFormat) -> Result<String> {
    let name = match format {
        ExportFormat::Csv => format!("{stem}.csv"),
        ExportFormat::Json => format!("{stem}.json"),
    };
    let path = dir.join(&name);
    match format {
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
            for row in rows {
                w.serialize(row).map_err(|e| csv_error(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        ExportFormat::Json => {
            let text = serde_json::to_string_pretty(rows).map_err(|e| Error::Serialize(e.to_string()))?;
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(name)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serialize(format!("{}: {other:?}", path.display())),
    }
}

/// Write all trace tables and the manifest into `dir` (created if needed).
/// Returns the written paths.
pub fn export_traces(result: &RunResult, ts: f64, dir: &Path, format: ExportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics: Vec<MetricsRow> = result
        .metrics
        .vehicles
        .iter()
        .map(|v| MetricsRow {
            vehicle: v.vehicle,
            path_length_m: v.path_length_m,
            mse_m2: v.mse_m2,
            arrival_step: v.arrival_step,
        })
        .collect();
    let timing: Vec<TimingRow> = result
        .planner
        .iter()
        .zip(&result.planner_wall_s)
        .map(|(r, &t)| TimingRow {
            step: r.step,
            planner_wall_s: t,
        })
        .collect();
    let files = vec![
        write_table(dir, "true_trajectory", &trajectory_rows(&result.true_states, ts), format)?,
        write_table(dir, "estimated_trajectory", &trajectory_rows(&result.estimated_states, ts), format)?,
        write_table(dir, "measurements", &measurement_rows(&result.measurements), format)?,
        write_table(dir, "planner", &planner_rows(&result.planner), format)?,
        write_table(dir, "metrics", &metrics, format)?,
        write_table(dir, "timing", &timing, format)?,
    ];
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed: result.seed,
        scenario_digest: result.scenario_digest.clone(),
        result_digest: result.digest(),
        config: result.config,
        steps: result.steps(),
        aborted: result.aborted.clone(),
        machine: MachineInfo::current(),
        files: files.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serialize(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let mut paths: Vec<PathBuf> = files.iter().map(|f| dir.join(f)).collect();
    paths.push(manifest_path);
    Ok(paths)
}

/// Read a trajectory table written by [`export_traces`] back into
/// `[step][vehicle]` form.
pub fn read_trajectory(path: &Path) -> Result<Vec<Vec<VehicleState>>> {
    let rows: Vec<TrajectoryRow> = if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
    } else {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| csv_error(path, e))?
    };
    let mut out: Vec<Vec<VehicleState>> = Vec::new();
    for row in rows {
        if row.step == out.len() {
            out.push(Vec::new());
        }
        let slot = out
            .get_mut(row.step)
            .filter(|r| r.len() == row.vehicle)
            .ok_or_else(|| Error::Parse(format!("{}: rows out of order at step {}", path.display(), row.step)))?;
        slot.push(VehicleState {
            x: row.x_m,
            y: row.y_m,
            psi: row.psi_rad,
        });
    }
    Ok(out)
}
