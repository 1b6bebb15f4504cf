//! Closed-form localization uncertainty.
//!
//! Each measurement edge carries an information weight `epsilon` (the
//! squared positional gradient of its measurement: `1/R^2` for a bearing,
//! 1 for a range). A vehicle's covariance due to a landmark is the sum of
//! `1/epsilon` along the connecting path; multiple paths and multiple
//! landmarks add up. The observability Gramian `(O^T O)^-1` is the numerical
//! reference for this rule on small abstract configurations.

use nalgebra::DMatrix;

use crate::kinematics::wrap_angle;
use crate::rpmg::{enumerate_paths, Path, Rpmg};
use crate::sensing::{los_angle, MeasurementKind};
use crate::world::NodeId;
use crate::{Error, Result};

/// |sin| floor for the csc^2 terms of the closed forms.
pub const SIN_FLOOR: f64 = 1e-3;
/// Floor on the inner denominator of the bearing closed form.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeInformation {
    pub edge: (NodeId, NodeId),
    pub epsilon: f64,
}

pub fn edge_information(edge: (NodeId, NodeId), distance: f64, kind: MeasurementKind) -> Result<EdgeInformation> {
    if !(distance > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "edge {}-{} has length {distance}",
            edge.0, edge.1
        )));
    }
    let epsilon = match kind {
        MeasurementKind::Bearing => 1.0 / (distance * distance),
        MeasurementKind::Range => 1.0,
    };
    Ok(EdgeInformation { edge, epsilon })
}

/// Information weight of every edge of the graph, indexed like `rpmg.edges()`.
pub fn graph_information(rpmg: &Rpmg, kind: MeasurementKind) -> Result<Vec<EdgeInformation>> {
    rpmg.edges()
        .iter()
        .map(|e| {
            let pair = (rpmg.nodes()[e.a].id, rpmg.nodes()[e.b].id);
            edge_information(pair, e.distance, kind)
        })
        .collect()
}

/// Sum of `1/epsilon` over the edges of one path.
pub fn path_covariance(path: &Path, infos: &[EdgeInformation]) -> Result<f64> {
    if path.edges.is_empty() {
        return Err(Error::Empty("path".into()));
    }
    path.edges
        .iter()
        .map(|&e| {
            infos
                .get(e)
                .map(|info| 1.0 / info.epsilon)
                .ok_or_else(|| Error::InvalidArgument(format!("no information for edge {e}")))
        })
        .sum()
}

/// Covariance of one vehicle, with the per-landmark breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleCovariance {
    /// `None` when no landmark is reachable (unlocalized).
    pub p: Option<f64>,
    /// `(landmark index, p_ij)` for each reachable landmark.
    pub contributions: Vec<(usize, f64)>,
}

impl VehicleCovariance {
    pub fn is_localized(&self) -> bool {
        self.p.is_some()
    }
}

pub fn vehicle_covariance(
    rpmg: &Rpmg,
    vehicle: usize,
    max_hops: usize,
    kind: MeasurementKind,
) -> Result<VehicleCovariance> {
    let infos = graph_information(rpmg, kind)?;
    vehicle_covariance_with(rpmg, vehicle, max_hops, &infos)
}

pub fn vehicle_covariance_with(
    rpmg: &Rpmg,
    vehicle: usize,
    max_hops: usize,
    infos: &[EdgeInformation],
) -> Result<VehicleCovariance> {
    let mut contributions = Vec::new();
    for j in 0..rpmg.n_landmarks() {
        let paths = enumerate_paths(rpmg, NodeId::Vehicle(vehicle), NodeId::Landmark(j), max_hops)?;
        if paths.is_empty() {
            continue;
        }
        let mut p_ij = 0.0;
        for path in &paths {
            p_ij += path_covariance(path, infos)?;
        }
        contributions.push((j, p_ij));
    }
    let p = if contributions.is_empty() {
        None
    } else {
        Some(contributions.iter().map(|c| c.1).sum())
    };
    Ok(VehicleCovariance { p, contributions })
}

/// `sqrt(2/3 + Rg^2 csc^2(psi - theta_g))`.
pub fn sigma_p_range(rg: f64, psi: f64, theta_g: f64) -> f64 {
    let s = floored_sin(wrap_angle(psi - theta_g));
    (2.0 / 3.0 + rg * rg / (s * s)).sqrt()
}

/// Square root of
/// `4.5 Rg^2 (1 + Rg^2 / (2 + Rg^2 + 2 cos 2D)) + (Rg^2 + Rg^4) csc^2 D`
/// with `D = psi - theta_g`.
pub fn sigma_p_bearing(rg: f64, psi: f64, theta_g: f64) -> f64 {
    let d = wrap_angle(psi - theta_g);
    let r2 = rg * rg;
    let s = floored_sin(d);
    let denom = (2.0 + r2 + 2.0 * (2.0 * d).cos()).max(DENOM_FLOOR);
    (4.5 * r2 * (1.0 + r2 / denom) + (r2 + r2 * r2) / (s * s)).sqrt()
}

fn floored_sin(d: f64) -> f64 {
    d.sin().abs().max(SIN_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometrySummary {
    pub rg: f64,
    pub theta_g: f64,
}

/// Mean distance and circular-mean LOS angle over a vehicle's incident edges.
pub fn avg_geometry(rpmg: &Rpmg, vehicle: usize) -> Result<GeometrySummary> {
    if vehicle >= rpmg.n_vehicles() {
        return Err(Error::UnknownNode(format!("v{vehicle}")));
    }
    let own = rpmg.nodes()[vehicle].position;
    let incident = rpmg.incident_edges(vehicle);
    if incident.is_empty() {
        return Err(Error::Empty(format!("v{vehicle} has no edges")));
    }
    let (mut sum_r, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for &e in incident {
        let other = rpmg.nodes()[rpmg.other(e, vehicle)].position;
        let theta = los_angle(own, other);
        sum_r += rpmg.edges()[e].distance;
        sx += theta.cos();
        sy += theta.sin();
    }
    Ok(GeometrySummary {
        rg: sum_r / incident.len() as f64,
        theta_g: wrap_angle(sy.atan2(sx)),
    })
}

/// Row of an abstract observability matrix with one scalar state per vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleEdge {
    /// Landmark measurement: `o` in the vehicle's column.
    Landmark { vehicle: usize, o: f64 },
    /// Vehicle-vehicle measurement: `o` in `a`'s column, `-o` in `b`'s.
    Vehicles { a: usize, b: usize, o: f64 },
}

pub fn observability_matrix(n_vehicles: usize, edges: &[OracleEdge]) -> Result<DMatrix<f64>> {
    let mut o = DMatrix::zeros(edges.len(), n_vehicles);
    for (r, e) in edges.iter().enumerate() {
        match *e {
            OracleEdge::Landmark { vehicle, o: w } => {
                check_col(vehicle, n_vehicles)?;
                o[(r, vehicle)] = w;
            }
            OracleEdge::Vehicles { a, b, o: w } => {
                check_col(a, n_vehicles)?;
                check_col(b, n_vehicles)?;
                o[(r, a)] = w;
                o[(r, b)] = -w;
            }
        }
    }
    Ok(o)
}

fn check_col(i: usize, n: usize) -> Result<()> {
    if i < n {
        Ok(())
    } else {
        Err(Error::UnknownNode(format!("v{i}")))
    }
}

/// `(O^T O)^-1` with unit measurement noise.
pub fn gramian_oracle(n_vehicles: usize, edges: &[OracleEdge]) -> Result<DMatrix<f64>> {
    let o = observability_matrix(n_vehicles, edges)?;
    let g = o.transpose() * &o;
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("observability Gramian is rank deficient".into()))?;
    // guard against a numerically singular but technically positive factor
    let diag_min = chol.l().diagonal().min();
    if diag_min <= 1e-12 * g.diagonal().max().max(1.0).sqrt() {
        return Err(Error::Singular("observability Gramian is rank deficient".into()));
    }
    Ok(chol.inverse())
}

/// One of the small vehicle/landmark configurations used to check the
/// path-sum rule against the Gramian.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub name: &'static str,
    pub n_vehicles: usize,
    pub n_landmarks: usize,
    /// `(vehicle or landmark, vehicle, o)` triples.
    pub edges: Vec<(NodeId, NodeId, f64)>,
}

impl OracleConfig {
    pub fn oracle_edges(&self) -> Vec<OracleEdge> {
        self.edges
            .iter()
            .map(|&(p, q, o)| match (p, q) {
                (NodeId::Landmark(_), NodeId::Vehicle(v)) | (NodeId::Vehicle(v), NodeId::Landmark(_)) => {
                    OracleEdge::Landmark { vehicle: v, o }
                }
                (NodeId::Vehicle(a), NodeId::Vehicle(b)) => OracleEdge::Vehicles { a, b, o },
                _ => unreachable!("landmark-landmark edges are rejected by the constructors"),
            })
            .collect()
    }

    /// The configuration as a bearing graph: an edge of length `1/o` has
    /// information `o^2`.
    pub fn graph(&self) -> Result<Rpmg> {
        let edges: Vec<(NodeId, NodeId, f64)> = self.edges.iter().map(|&(p, q, o)| (p, q, 1.0 / o)).collect();
        Rpmg::from_edges(self.n_vehicles, self.n_landmarks, &edges)
    }

    pub fn gramian(&self) -> Result<DMatrix<f64>> {
        gramian_oracle(self.n_vehicles, &self.oracle_edges())
    }

    /// Path-sum covariance of every vehicle.
    pub fn path_sums(&self) -> Result<Vec<f64>> {
        let g = self.graph()?;
        (0..self.n_vehicles)
            .map(|i| {
                vehicle_covariance(&g, i, self.n_vehicles + 1, MeasurementKind::Bearing)?
                    .p
                    .ok_or_else(|| Error::InvalidArgument(format!("v{i} reaches no landmark in {}", self.name)))
            })
            .collect()
    }
}

/// Chain a-1-2: landmark a sees vehicle 1, which sees vehicle 2.
pub fn config_p2a(oa1: f64, o12: f64) -> OracleConfig {
    OracleConfig {
        name: "a-1-2",
        n_vehicles: 2,
        n_landmarks: 1,
        edges: vec![
            (NodeId::Landmark(0), NodeId::Vehicle(0), oa1),
            (NodeId::Vehicle(0), NodeId::Vehicle(1), o12),
        ],
    }
}

/// Chain 1-2-b: vehicle 1 reaches landmark b through vehicle 2.
pub fn config_p2b(ob2: f64, o12: f64) -> OracleConfig {
    OracleConfig {
        name: "1-2-b",
        n_vehicles: 2,
        n_landmarks: 1,
        edges: vec![
            (NodeId::Landmark(0), NodeId::Vehicle(1), ob2),
            (NodeId::Vehicle(0), NodeId::Vehicle(1), o12),
        ],
    }
}

/// Chain 3-a-1-2: vehicles 1 and 3 both see landmark a; 2 sees only 1.
pub fn config_p3a(oa1: f64, o12: f64, oa3: f64) -> OracleConfig {
    OracleConfig {
        name: "3-a-1-2",
        n_vehicles: 3,
        n_landmarks: 1,
        edges: vec![
            (NodeId::Landmark(0), NodeId::Vehicle(0), oa1),
            (NodeId::Vehicle(0), NodeId::Vehicle(1), o12),
            (NodeId::Landmark(0), NodeId::Vehicle(2), oa3),
        ],
    }
}

/// Chain 1-2-b-3: vehicles 2 and 3 both see landmark b; 1 sees only 2.
pub fn config_p3b(ob2: f64, o12: f64, ob3: f64) -> OracleConfig {
    OracleConfig {
        name: "1-2-b-3",
        n_vehicles: 3,
        n_landmarks: 1,
        edges: vec![
            (NodeId::Landmark(0), NodeId::Vehicle(1), ob2),
            (NodeId::Vehicle(0), NodeId::Vehicle(1), o12),
            (NodeId::Landmark(0), NodeId::Vehicle(2), ob3),
        ],
    }
}

/// Result of perturbing the 3-a-1-2 covariance and checking whether it is
/// still the inverse of the true Gramian.
#[derive(Debug, Clone, PartialEq)]
pub struct ContradictionReport {
    /// `||P G - I||_F` with the `1/oa1^2` term dropped from vehicle 2's entry.
    pub dropped_residual: f64,
    /// Same, with an extra `1/oa3^2` term added to vehicle 2's entry.
    pub added_residual: f64,
    /// Inverse of the covariance with the dropped term, when it exists.
    pub dropped_gramian: Option<DMatrix<f64>>,
}

pub fn contradiction_check(oa1: f64, o12: f64, oa3: f64) -> Result<ContradictionReport> {
    let cfg = config_p3a(oa1, o12, oa3);
    let p = cfg.gramian()?;
    let g = observability_matrix(3, &cfg.oracle_edges())?;
    let g = g.transpose() * g;
    let residual = |m: &DMatrix<f64>| (m * &g - DMatrix::identity(3, 3)).norm();

    let mut dropped = p.clone();
    dropped[(1, 1)] -= 1.0 / (oa1 * oa1);
    let mut added = p;
    added[(1, 1)] += 1.0 / (oa3 * oa3);
    Ok(ContradictionReport {
        dropped_residual: residual(&dropped),
        added_residual: residual(&added),
        dropped_gramian: invert_if_regular(dropped),
    })
}

fn invert_if_regular(m: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sv = m.clone().svd(false, false).singular_values;
    if sv.min() <= 1e-10 * sv.max() {
        None
    } else {
        m.try_inverse()
    }
}

/// Per-vehicle covariance snapshot for the whole team.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePrediction {
    pub vehicles: Vec<VehicleCovariance>,
    /// Closed-form bearing sigma from the average geometry; `None` when the
    /// vehicle has no edges.
    pub sigma_p: Vec<Option<f64>>,
}

pub fn predict_covariance(rpmg: &Rpmg, headings: &[f64], max_hops: usize) -> Result<CovariancePrediction> {
    if headings.len() != rpmg.n_vehicles() {
        return Err(Error::Dimension(format!(
            "{} headings for {} vehicles",
            headings.len(),
            rpmg.n_vehicles()
        )));
    }
    let infos = graph_information(rpmg, MeasurementKind::Bearing)?;
    let mut vehicles = Vec::with_capacity(headings.len());
    let mut sigma_p = Vec::with_capacity(headings.len());
    for (i, &psi) in headings.iter().enumerate() {
        vehicles.push(vehicle_covariance_with(rpmg, i, max_hops, &infos)?);
        sigma_p.push(
            avg_geometry(rpmg, i)
                .ok()
                .map(|g| sigma_p_bearing(g.rg, psi, g.theta_g)),
        );
    }
    Ok(CovariancePrediction { vehicles, sigma_p })
}

/// `sigma_p = sqrt(var_x + var_y)` of a 2x2 (or larger) position block.
pub fn sigma_from_matrix(p: &DMatrix<f64>, x_index: usize) -> f64 {
    (p[(x_index, x_index)] + p[(x_index + 1, x_index + 1)]).max(0.0).sqrt()
}

/// Dead-reckoning growth of `sigma_p` for one step of process noise.
pub fn dead_reckoning(sigma_p: f64, process_trace: f64) -> f64 {
    (sigma_p * sigma_p + process_trace).sqrt()
}
