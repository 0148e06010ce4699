//! Single rotational degree of freedom of the lid, driven by the virtual
//! torque that tactile contact transmits and resisted by Coulomb torsional
//! friction plus viscous damping.
//!
//! Sign convention: the lid angle grows in the direction a fingertip sweeping
//! with positive `(v × p)_z` drives it, i.e. clockwise when seen from `+z`.
//! The contact frames therefore rotate by `-angle` about the lid axis.

use nalgebra::{Rotation3, Unit, Vector3};

use crate::contact_geometry::{ContactReport, Point, NUM_FINGERS};

#[derive(Debug, Clone, PartialEq)]
pub struct LidState {
    /// Cumulative (unwrapped) angle in radians.
    pub angle: f64,
    pub rate: f64,
    pub axis: Unit<Vector3<f64>>,
    pub center: Point,
    /// Dimensionless friction multiplier drawn per episode.
    pub friction: f64,
    /// Torque scale that turns `friction` into a breakaway torque (N·m).
    pub torque_scale: f64,
    pub damping: f64,
    pub inertia: f64,
}

impl LidState {
    pub fn at_rest(friction: f64, torque_scale: f64, damping: f64, inertia: f64) -> Self {
        Self {
            angle: 0.0,
            rate: 0.0,
            axis: Vector3::z_axis(),
            center: Point::zeros(),
            friction,
            torque_scale,
            damping,
            inertia,
        }
    }

    /// Coulomb breakaway torque.
    pub fn friction_threshold(&self) -> f64 {
        self.friction * self.torque_scale
    }

    /// Rotation that carries rim points from the zero pose to the current one.
    pub fn frame_rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&self.axis, -self.angle)
    }
}

/// Torque about the lid axis generated by contacting fingertips:
/// `kappa * Σ_i G_i * ((v_i × (tip_i − center)) · axis)`.
pub fn virtual_torque(
    report: &ContactReport,
    tips: &[Point; NUM_FINGERS],
    velocities: &[Vector3<f64>; NUM_FINGERS],
    lid: &LidState,
    kappa: f64,
) -> f64 {
    let mut total = 0.0;
    for i in 0..NUM_FINGERS {
        let g = report.grasp_quality[i];
        if g == 0.0 {
            continue;
        }
        let arm = tips[i] - lid.center;
        total += g * velocities[i].cross(&arm).dot(&lid.axis);
    }
    kappa * total
}

/// Advances the lid by one step with stick-slip friction.
///
/// A resting lid breaks away only when `|torque|` exceeds the friction
/// threshold. The viscous term is integrated implicitly, which keeps the
/// update stable for damping/inertia ratios far beyond `1/dt`. A rate that
/// would cross zero is clamped to rest, so friction never reverses the lid.
pub fn step_lid(lid: &LidState, torque: f64, dt: f64) -> LidState {
    let threshold = lid.friction_threshold();
    let mut next = lid.clone();
    if lid.rate == 0.0 && torque.abs() <= threshold {
        return next;
    }
    let direction = if lid.rate != 0.0 { lid.rate.signum() } else { torque.signum() };
    let impulse = dt * (torque - threshold * direction) / lid.inertia;
    let rate = (lid.rate + impulse) / (1.0 + dt * lid.damping / lid.inertia);
    next.rate = if lid.rate != 0.0 && rate * lid.rate < 0.0 { 0.0 } else { rate };
    next.angle = lid.angle + dt * next.rate;
    next
}

/// Coupling gain such that five fingers at grasp quality `k/2`, sweeping
/// tangentially at `nominal_speed` on radius `rim_radius`, produce `margin`
/// times the largest breakaway torque `max_friction * torque_scale`.
pub fn calibrate_coupling(
    sensors_per_finger: usize,
    nominal_speed: f64,
    rim_radius: f64,
    max_friction: f64,
    torque_scale: f64,
    margin: f64,
) -> f64 {
    let grasp = NUM_FINGERS as f64 * sensors_per_finger as f64 / 2.0;
    margin * max_friction * torque_scale / (grasp * nominal_speed * rim_radius)
}
