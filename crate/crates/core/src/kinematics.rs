//! Constant-speed unicycle model, forward-Euler discretized.
//!
//! The same step function drives the simulated plant, the estimators'
//! prediction model and the planner's rollout.

use std::f64::consts::{PI, TAU};

use crate::world::{ControlInput, VehicleState};
use crate::{Error, Result};

/// Wrap an angle into `(-pi, pi]`. Non-finite input is returned unchanged;
/// use [`try_wrap_angle`] when that must be an error.
pub fn wrap_angle(theta: f64) -> f64 {
    if !theta.is_finite() {
        return theta;
    }
    let mut r = theta % TAU;
    if r <= -PI {
        r += TAU;
    } else if r > PI {
        r -= TAU;
    }
    r
}

pub fn try_wrap_angle(theta: f64) -> Result<f64> {
    if theta.is_finite() {
        Ok(wrap_angle(theta))
    } else {
        Err(Error::NonFinite(format!("angle {theta}")))
    }
}

/// One Euler step: position advances along the current heading, then the
/// heading turns by `ts * omega`.
pub fn step(state: &VehicleState, u: ControlInput, speed: f64, ts: f64) -> VehicleState {
    let (s, c) = state.psi.sin_cos();
    VehicleState {
        x: state.x + ts * speed * c,
        y: state.y + ts * speed * s,
        psi: wrap_angle(state.psi + ts * u.omega),
    }
}

/// Stacked trajectory, one `Vec<VehicleState>` (all vehicles) per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<VehicleState>>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &[VehicleState] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// The states of one vehicle over time.
    pub fn vehicle(&self, i: usize) -> Vec<VehicleState> {
        self.states.iter().map(|s| s[i]).collect()
    }
}

/// Roll all vehicles forward through `controls` (one entry per step, one
/// control per vehicle) at a common speed.
pub fn propagate(
    initial: &[VehicleState],
    controls: &[Vec<ControlInput>],
    speed: f64,
    ts: f64,
) -> Result<Trajectory> {
    let speeds = vec![speed; initial.len()];
    propagate_with_speeds(initial, controls, &speeds, ts)
}

/// As [`propagate`], with a per-vehicle speed (0 for stopped vehicles).
pub fn propagate_with_speeds(
    initial: &[VehicleState],
    controls: &[Vec<ControlInput>],
    speeds: &[f64],
    ts: f64,
) -> Result<Trajectory> {
    if controls.is_empty() {
        return Err(Error::Empty("control sequence".into()));
    }
    if speeds.len() != initial.len() {
        return Err(Error::Dimension(format!(
            "{} speeds for {} vehicles",
            speeds.len(),
            initial.len()
        )));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(initial.to_vec());
    for (k, u) in controls.iter().enumerate() {
        if u.len() != initial.len() {
            return Err(Error::Dimension(format!(
                "step {k}: {} controls for {} vehicles",
                u.len(),
                initial.len()
            )));
        }
        let prev = &states[k];
        let next = prev
            .iter()
            .zip(u)
            .zip(speeds)
            .map(|((s, &c), &v)| step(s, c, v, ts))
            .collect();
        states.push(next);
    }
    Ok(Trajectory { states, dt: ts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn wrap_boundaries() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(7.5 * PI), -0.5 * PI, epsilon = 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!(try_wrap_angle(f64::NAN).is_err());
        assert!(try_wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn straight_steps() {
        let s = step(&VehicleState::new(0.0, 0.0, 0.0), ControlInput::new(0.0), 5.0, 0.1);
        assert_abs_diff_eq!(s.x, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.y, 0.0, epsilon = 1e-15);
        assert_eq!(s.psi, 0.0);

        let s = step(&VehicleState::new(0.0, 0.0, FRAC_PI_2), ControlInput::new(0.0), 5.0, 0.1);
        assert_abs_diff_eq!(s.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.y, 0.5, epsilon = 1e-15);
        assert_eq!(s.psi, FRAC_PI_2);
    }

    #[test]
    fn euler_tracks_analytic_arc() {
        let (v, w, ts) = (5.0, FRAC_PI_2, 0.1);
        let controls = vec![vec![ControlInput::new(w)]; 40];
        let traj = propagate(&[VehicleState::new(0.0, 0.0, 0.0)], &controls, v, ts).unwrap();
        let end = traj.last()[0];
        let t = 4.0;
        let (ax, ay) = (v / w * (w * t).sin(), v / w * (1.0 - (w * t).cos()));
        let err = (end.x - ax).hypot(end.y - ay);
        assert!(err <= 0.5, "euler error {err}");
    }

    #[test]
    fn propagate_base_and_errors() {
        let init = [VehicleState::new(1.0, 2.0, 0.3)];
        let u = ControlInput::new(0.2);
        let traj = propagate(&init, &[vec![u]], 5.0, 0.1).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj.states[0][0], init[0]);
        assert_eq!(traj.states[1][0], step(&init[0], u, 5.0, 0.1));
        assert!(matches!(propagate(&init, &[], 5.0, 0.1), Err(Error::Empty(_))));
        assert!(matches!(
            propagate(&init, &[vec![u, u]], 5.0, 0.1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn stacked_blocks_decouple() {
        let init = [
            VehicleState::new(0.0, 0.0, 0.1),
            VehicleState::new(10.0, -3.0, 2.0),
            VehicleState::new(-4.0, 8.0, -2.5),
        ];
        let controls: Vec<Vec<ControlInput>> = (0..25)
            .map(|k| {
                (0..3)
                    .map(|i| ControlInput::new(((k * 7 + i * 3) % 11) as f64 / 10.0 - 0.5))
                    .collect()
            })
            .collect();
        let joint = propagate(&init, &controls, 5.0, 0.1).unwrap();
        for i in 0..3 {
            let own: Vec<Vec<ControlInput>> = controls.iter().map(|u| vec![u[i]]).collect();
            let solo = propagate(&init[i..=i], &own, 5.0, 0.1).unwrap();
            assert_eq!(joint.vehicle(i), solo.vehicle(0));
        }
    }

    fn rotate(s: &VehicleState, a: f64) -> VehicleState {
        let (sa, ca) = a.sin_cos();
        VehicleState::new(ca * s.x - sa * s.y, sa * s.x + ca * s.y, s.psi + a)
    }

    proptest! {
        #[test]
        fn wrap_is_congruent_and_in_range(theta in -1e4f64..1e4) {
            let w = wrap_angle(theta);
            prop_assert!(w > -PI && w <= PI);
            let k = ((theta - w) / TAU).round();
            prop_assert!((theta - w - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn straight_step_length_exact(x in -100.0f64..100.0, y in -100.0f64..100.0, psi in -3.2f64..3.2) {
            let s0 = VehicleState::new(x, y, psi);
            let s1 = step(&s0, ControlInput::new(0.0), 5.0, 0.1);
            prop_assert!(((s1.x - s0.x).hypot(s1.y - s0.y) - 0.5).abs() < 1e-12);
        }

        #[test]
        fn rotational_equivariance(
            x in -50.0f64..50.0, y in -50.0f64..50.0, psi in -3.1f64..3.1,
            w in -1.5f64..1.5, a in -3.1f64..3.1,
        ) {
            let s = VehicleState::new(x, y, psi);
            let u = ControlInput::new(w);
            let direct = step(&s, u, 5.0, 0.1);
            let via = rotate(&step(&rotate(&s, a), u, 5.0, 0.1), -a);
            prop_assert!((direct.x - via.x).abs() < 1e-12);
            prop_assert!((direct.y - via.y).abs() < 1e-12);
            prop_assert!(wrap_angle(direct.psi - via.psi).abs() < 1e-12);
        }

        #[test]
        fn propagation_composes(k1 in 1usize..15, k2 in 1usize..15, seed in 0u64..1000) {
            let init = [VehicleState::new(0.0, 0.0, 0.2), VehicleState::new(5.0, 5.0, -1.0)];
            let controls: Vec<Vec<ControlInput>> = (0..k1 + k2)
                .map(|k| (0..2).map(|i| ControlInput::new(((seed as usize + k * 5 + i) % 7) as f64 * 0.4 - 1.2)).collect())
                .collect();
            let whole = propagate(&init, &controls, 5.0, 0.1).unwrap();
            let first = propagate(&init, &controls[..k1], 5.0, 0.1).unwrap();
            let second = propagate(first.last(), &controls[k1..], 5.0, 0.1).unwrap();
            prop_assert_eq!(whole.last(), second.last());
            prop_assert!(whole.states.iter().flatten().all(|s| s.x.is_finite() && s.y.is_finite() && s.psi.is_finite()));
        }
    }
}
