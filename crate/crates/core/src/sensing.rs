//! Relative bearing and range measurement models.
//!
//! A bearing is the line-of-sight (LOS) angle to the target minus the
//! observer heading, wrapped to `(-pi, pi]`. Only range gates visibility.

use serde::{Deserialize, Serialize};

use crate::kinematics::wrap_angle;
use crate::world::{gaussian, Landmark, NodeId, RngStream, VehicleState};
use crate::{Error, Result};

/// Absolute LOS angle from `from` to `to` (full-quadrant arctangent).
pub fn los_angle(from: [f64; 2], to: [f64; 2]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

pub fn range(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn bearing(observer: &VehicleState, target: [f64; 2]) -> Result<f64> {
    if observer.x == target[0] && observer.y == target[1] {
        return Err(Error::InvalidArgument(
            "bearing undefined for coincident positions".into(),
        ));
    }
    Ok(wrap_angle(los_angle(observer.position(), target) - observer.psi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementKind {
    Bearing,
    Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Always a vehicle.
    pub observer: NodeId,
    pub target: NodeId,
    pub kind: MeasurementKind,
    /// rad for bearings, m for ranges.
    pub value: f64,
    /// rad^2 or m^2.
    pub variance: f64,
    pub time_step: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub time_step: usize,
    pub items: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn new(time_step: usize) -> Self {
        Self {
            time_step,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Drop measurements whose target is a vehicle.
    pub fn without_vehicle_targets(&self) -> MeasurementSet {
        MeasurementSet {
            time_step: self.time_step,
            items: self
                .items
                .iter()
                .filter(|m| !m.target.is_vehicle())
                .copied()
                .collect(),
        }
    }
}

/// Position of a node given the stacked vehicle states and the landmark list.
pub fn node_position(
    node: NodeId,
    states: &[VehicleState],
    landmarks: &[Landmark],
) -> Result<[f64; 2]> {
    match node {
        NodeId::Vehicle(i) => states
            .get(i)
            .map(VehicleState::position)
            .ok_or_else(|| Error::UnknownNode(node.to_string())),
        NodeId::Landmark(j) => landmarks
            .get(j)
            .map(Landmark::position)
            .ok_or_else(|| Error::UnknownNode(node.to_string())),
    }
}

/// Noisy bearings from every vehicle to every other node within `rs`.
///
/// Observers are visited in index order and, per observer, targets in
/// [`NodeId`] order (vehicles, then landmarks), so the rng consumption is
/// reproducible.
pub fn sense_all(
    states: &[VehicleState],
    landmarks: &[Landmark],
    rs: f64,
    gamma: f64,
    time_step: usize,
    rng: &mut RngStream,
) -> Result<MeasurementSet> {
    sense_all_with(states, landmarks, rs, gamma, time_step, true, rng)
}

/// As [`sense_all`]; `vehicle_targets = false` senses landmarks only.
pub fn sense_all_with(
    states: &[VehicleState],
    landmarks: &[Landmark],
    rs: f64,
    gamma: f64,
    time_step: usize,
    vehicle_targets: bool,
    rng: &mut RngStream,
) -> Result<MeasurementSet> {
    if !(rs > 0.0) {
        return Err(Error::InvalidArgument(format!("sensor range {rs}")));
    }
    let mut set = MeasurementSet::new(time_step);
    for (i, obs) in states.iter().enumerate() {
        let vehicles = states
            .iter()
            .enumerate()
            .filter(|(j, _)| vehicle_targets && *j != i)
            .map(|(j, s)| (NodeId::Vehicle(j), s.position()));
        let marks = landmarks
            .iter()
            .enumerate()
            .map(|(j, l)| (NodeId::Landmark(j), l.position()));
        for (target, pos) in vehicles.chain(marks) {
            let d = range(obs.position(), pos);
            if d > rs || d == 0.0 {
                continue;
            }
            let truth = bearing(obs, pos)?;
            let value = wrap_angle(truth + gaussian(rng, 0.0, gamma)?);
            set.items.push(Measurement {
                observer: NodeId::Vehicle(i),
                target,
                kind: MeasurementKind::Bearing,
                value,
                variance: gamma,
                time_step,
            });
        }
    }
    Ok(set)
}

/// Partial derivatives of one bearing, split by block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BearingGradient {
    /// d/d(x_i, y_i, psi_i) of the observer.
    pub observer: [f64; 3],
    /// d/d(x_j, y_j) of the target; heading does not enter.
    pub target: [f64; 2],
}

/// Local gradient of the bearing from `observer` to `target`:
/// `(sin t / R, -cos t / R, -1)` on the observer and the negated positional
/// part on the target, with `t` the LOS angle and `R` the distance.
pub fn bearing_gradient_local(observer: &VehicleState, target: [f64; 2]) -> Result<BearingGradient> {
    let r = range(observer.position(), target);
    if r == 0.0 {
        return Err(Error::InvalidArgument(
            "bearing gradient undefined for coincident positions".into(),
        ));
    }
    let (s, c) = los_angle(observer.position(), target).sin_cos();
    Ok(BearingGradient {
        observer: [s / r, -c / r, -1.0],
        target: [-s / r, c / r],
    })
}

/// Gradient row of a bearing over the stacked state `(x_0, y_0, psi_0, x_1, ...)`.
/// Landmark targets contribute nothing to the row.
pub fn bearing_gradient(
    states: &[VehicleState],
    observer: usize,
    target: NodeId,
    target_pos: [f64; 2],
) -> Result<Vec<f64>> {
    let obs = states
        .get(observer)
        .ok_or_else(|| Error::UnknownNode(format!("v{observer}")))?;
    let g = bearing_gradient_local(obs, target_pos)?;
    let mut row = vec![0.0; 3 * states.len()];
    row[3 * observer..3 * observer + 3].copy_from_slice(&g.observer);
    if let NodeId::Vehicle(j) = target {
        if j >= states.len() {
            return Err(Error::UnknownNode(target.to_string()));
        }
        row[3 * j] += g.target[0];
        row[3 * j + 1] += g.target[1];
    }
    Ok(row)
}

/// Gradient of `range(a, b)` with respect to `a`; the `b` gradient is its negation.
pub fn range_gradient(a: [f64; 2], b: [f64; 2]) -> Result<[f64; 2]> {
    let r = range(a, b);
    if r == 0.0 {
        return Err(Error::InvalidArgument("range gradient at zero distance".into()));
    }
    Ok([(a[0] - b[0]) / r, (a[1] - b[1]) / r])
}
