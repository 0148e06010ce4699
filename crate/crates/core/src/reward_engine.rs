//! Contact-aware reward terms, auxiliary penalties and their weighted
//! composition, with selectable reward sets for ablations.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::contact_geometry::{ContactReport, Point, NUM_FINGERS};
use crate::error::{Error, Result};
use crate::hand_model::JointVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub cpr: f64,
    pub crr: f64,
    pub rr: f64,
    pub angle: f64,
    pub action: f64,
    pub work: f64,
    pub gaiting: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            cpr: 8.0,
            crr: 2.0,
            rr: 850.0,
            angle: 20.0,
            action: 0.001,
            work: 1.0,
            gaiting: 8.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("cpr", self.cpr),
            ("crr", self.crr),
            ("rr", self.rr),
            ("angle", self.angle),
            ("action", self.action),
            ("work", self.work),
            ("gaiting", self.gaiting),
        ];
        for (name, w) in named {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::config(format!("reward weight {name} must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSet {
    Tac2motion,
    Baseline,
    CprRr,
    CrrRr,
}

impl RewardSet {
    pub const ALL: [RewardSet; 4] = [
        RewardSet::Tac2motion,
        RewardSet::Baseline,
        RewardSet::CprRr,
        RewardSet::CrrRr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardSet::Tac2motion => "tac2motion",
            RewardSet::Baseline => "baseline",
            RewardSet::CprRr => "cpr_rr",
            RewardSet::CrrRr => "crr_rr",
        }
    }
}

impl fmt::Display for RewardSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RewardSet::ALL
            .into_iter()
            .find(|set| set.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown reward set {s:?} (expected tac2motion, baseline, cpr_rr or crr_rr)"
                ))
            })
    }
}

/// Which reading of the work penalty to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkForm {
    /// `-Σ_i |τ_i Δq_i|`
    #[default]
    PerJoint,
    /// `-|Σ_i τ_i Δq_i|`
    InnerProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub cpr: f64,
    pub crr: f64,
    pub rr: f64,
    pub angle: f64,
    pub action: f64,
    pub work: f64,
    pub gaiting: f64,
    /// Distance shaping of the baseline stand-in (negative mean tip distance).
    pub distance: f64,
    /// Raw lid increment, used by the baseline's rotation term.
    pub lid_delta: f64,
    pub composed: f64,
    pub total: f64,
}

pub fn contact_pressure_reward(report: &ContactReport) -> f64 {
    report.grasp_quality.iter().sum()
}

pub fn contact_release_reward(released: &[bool; NUM_FINGERS]) -> f64 {
    released.iter().filter(|&&r| r).count() as f64
}

pub fn rotation_reward(grasp: &[f64; NUM_FINGERS], lid_delta: f64) -> f64 {
    grasp.iter().sum::<f64>() * lid_delta
}

/// `-acos(<z_lid, z_ref>)` with the inner product clamped into [-1, 1].
pub fn angle_penalty(z_lid: &Vector3<f64>, z_ref: &Vector3<f64>) -> Result<f64> {
    let (a, b) = (z_lid.norm(), z_ref.norm());
    if a == 0.0 || b == 0.0 {
        return Err(Error::config("angle penalty needs non-zero axes"));
    }
    let cos = (z_lid.dot(z_ref) / (a * b)).clamp(-1.0, 1.0);
    Ok(-cos.acos())
}

pub fn action_penalty(action: &JointVector) -> f64 {
    -action.norm_squared()
}

pub fn work_penalty(tau: &JointVector, dq: &JointVector, form: WorkForm) -> f64 {
    match form {
        WorkForm::PerJoint => -tau.iter().zip(dq.iter()).map(|(t, d)| (t * d).abs()).sum::<f64>(),
        WorkForm::InnerProduct => -tau.dot(dq).abs(),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ_i sign(w_i^z) G_i` with `w_i = v_i × (tip_i − center)`.
pub fn gaiting_penalty(
    grasp: &[f64; NUM_FINGERS],
    velocities: &[Vector3<f64>; NUM_FINGERS],
    tips: &[Point; NUM_FINGERS],
    lid_center: &Point,
) -> f64 {
    (0..NUM_FINGERS)
        .map(|i| sign(velocities[i].cross(&(tips[i] - lid_center)).z) * grasp[i])
        .sum()
}

/// Negative mean distance between fingertips and the closest rim frame.
pub fn distance_shaping(tip_distances: &[f64; NUM_FINGERS]) -> f64 {
    -tip_distances.iter().sum::<f64>() / NUM_FINGERS as f64
}

/// Weighted reward for the chosen set; fills `composed` and `total` on the
/// breakdown and returns `total`. Penalties are active in every set.
pub fn compose(breakdown: &mut RewardBreakdown, weights: &RewardWeights, set: RewardSet) -> f64 {
    let b = *breakdown;
    let composed = match set {
        RewardSet::Tac2motion => weights.cpr * b.cpr + weights.crr * b.crr + weights.rr * b.rr,
        RewardSet::CprRr => weights.cpr * b.cpr + weights.rr * b.rr,
        RewardSet::CrrRr => weights.crr * b.crr + weights.rr * b.rr,
        RewardSet::Baseline => b.distance + weights.rr * b.lid_delta,
    };
    let total = composed
        + weights.angle * b.angle
        + weights.action * b.action
        + weights.work * b.work
        + weights.gaiting * b.gaiting;
    breakdown.composed = composed;
    breakdown.total = total;
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn cpr_sums_grasp_quality() {
        let mut report = ContactReport::empty(9);
        assert_eq!(contact_pressure_reward(&report), 0.0);
        report.grasp_quality = [1.5, 0.0, 2.0, 0.0, 0.5];
        assert_eq!(contact_pressure_reward(&report), 4.0);
    }

    #[test]
    fn crr_counts_releases() {
        assert_eq!(contact_release_reward(&[false; 5]), 0.0);
        assert_eq!(contact_release_reward(&[true, false, true, false, false]), 2.0);
    }

    #[test]
    fn rotation_reward_cases() {
        let g = [1.0, 0.5, 0.0, 1.5, 0.0];
        assert_eq!(rotation_reward(&g, 0.0), 0.0);
        assert_relative_eq!(rotation_reward(&g, 0.01), 0.03, epsilon = 1e-15);
        assert_eq!(rotation_reward(&g, -0.01), -rotation_reward(&g, 0.01));
    }

    #[test]
    fn angle_penalty_cases() {
        let z = Vector3::z();
        assert_eq!(angle_penalty(&z, &z).unwrap(), 0.0);
        assert_relative_eq!(angle_penalty(&Vector3::x(), &z).unwrap(), -PI / 2.0, epsilon = 1e-15);
        assert_relative_eq!(angle_penalty(&-z, &z).unwrap(), -PI, epsilon = 1e-15);
        assert!(angle_penalty(&Vector3::zeros(), &z).is_err());
        // nearly parallel vectors whose normalized dot rounds above 1
        let tilted = Vector3::new(1e-9, 0.0, 1.0);
        assert!(angle_penalty(&tilted, &tilted).unwrap().is_finite());
    }

    #[test]
    fn action_penalty_cases() {
        assert_eq!(action_penalty(&JointVector::zeros()), 0.0);
        let mut a = JointVector::zeros();
        a[0] = 1.0;
        assert_eq!(action_penalty(&a), -1.0);
    }

    #[test]
    fn work_penalty_cases() {
        let mut tau = JointVector::zeros();
        let mut dq = JointVector::zeros();
        tau[0] = 1.0;
        tau[1] = 1.0;
        assert_eq!(work_penalty(&tau, &dq, WorkForm::PerJoint), 0.0);
        dq[0] = 0.1;
        dq[1] = -0.1;
        assert_relative_eq!(work_penalty(&tau, &dq, WorkForm::PerJoint), -0.2, epsilon = 1e-15);
        assert_eq!(work_penalty(&tau, &dq, WorkForm::InnerProduct), 0.0);
        assert_eq!(work_penalty(&-tau, &dq, WorkForm::PerJoint), work_penalty(&tau, &dq, WorkForm::PerJoint));
    }

    #[test]
    fn gaiting_penalty_cases() {
        let tips = [Point::new(0.04, 0.0, 0.0); 5];
        let g = [1.0, 0.0, 0.0, 0.0, 0.0];
        let still = [Vector3::zeros(); 5];
        assert_eq!(gaiting_penalty(&g, &still, &tips, &Point::zeros()), 0.0);
        let mut v = [Vector3::zeros(); 5];
        v[0] = Vector3::new(0.0, -0.1, 0.0); // (v × p)_z = 0.004 > 0
        assert_eq!(gaiting_penalty(&g, &v, &tips, &Point::zeros()), 1.0);
        let neg = v.map(|x| -x);
        assert_eq!(gaiting_penalty(&g, &neg, &tips, &Point::zeros()), -1.0);
    }

    fn unit_breakdown() -> RewardBreakdown {
        RewardBreakdown {
            cpr: 1.0,
            crr: 1.0,
            rr: 1.0,
            angle: -1.0,
            action: -1.0,
            work: -1.0,
            gaiting: 1.0,
            distance: -1.0,
            lid_delta: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_components_compose_to_zero() {
        for set in RewardSet::ALL {
            let mut b = RewardBreakdown::default();
            assert_eq!(compose(&mut b, &RewardWeights::default(), set), 0.0);
        }
    }

    #[test]
    fn unit_components_with_default_weights() {
        let w = RewardWeights::default();
        let mut b = unit_breakdown();
        let full = compose(&mut b, &w, RewardSet::Tac2motion);
        assert_relative_eq!(full, 846.999, epsilon = 1e-9);
        let mut b = unit_breakdown();
        assert_relative_eq!(compose(&mut b, &w, RewardSet::CprRr), full - 2.0, epsilon = 1e-9);
        let mut b = unit_breakdown();
        assert_relative_eq!(compose(&mut b, &w, RewardSet::CrrRr), full - 8.0, epsilon = 1e-9);
    }

    #[test]
    fn reward_set_names_round_trip() {
        for set in RewardSet::ALL {
            assert_eq!(set.as_str().parse::<RewardSet>().unwrap(), set);
        }
        assert!(matches!("nope".parse::<RewardSet>(), Err(Error::Config(_))));
    }

    #[test]
    fn weights_must_be_positive() {
        let mut w = RewardWeights::default();
        assert!(w.validate().is_ok());
        w.work = 0.0;
        assert!(w.validate().is_err());
    }
}
