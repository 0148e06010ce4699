//! Tactile contact sensing against the contact-guide frames on the lid rim.
//!
//! The lid carries `m` point-like contact frames (the centres of the guide
//! boxes on its rim). Every fingertip carries `k` tactile sensor points. A
//! sensor is "in contact" when its distance to the closest frame is within the
//! contact threshold `epsilon`; that distance is used as the penetration
//! reading. Per finger, readings are scaled by the row maximum so that the
//! strongest reading is exactly 1, and their sum is the finger's grasp quality.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FINGERS: usize = 5;

/// Slack allowed between a frame point and the rim circle.
pub const RIM_TOLERANCE: f64 = 0.005;

pub type Point = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LidShape {
    Cylinder,
    Square,
    Hexagon,
}

impl LidShape {
    pub const ALL: [LidShape; 3] = [LidShape::Cylinder, LidShape::Square, LidShape::Hexagon];

    /// Number of polygon faces, `None` for the round lid.
    pub fn sides(self) -> Option<usize> {
        match self {
            LidShape::Cylinder => None,
            LidShape::Square => Some(4),
            LidShape::Hexagon => Some(6),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LidShape::Cylinder => "cylinder",
            LidShape::Square => "square",
            LidShape::Hexagon => "hexagon",
        }
    }
}

impl fmt::Display for LidShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LidShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cylinder" => Ok(LidShape::Cylinder),
            "square" => Ok(LidShape::Square),
            "hexagon" => Ok(LidShape::Hexagon),
            other => Err(Error::config(format!(
                "unknown lid shape {other:?} (expected cylinder, square or hexagon)"
            ))),
        }
    }
}

/// Contact-guide reference points on the lid rim, in the lid-centred frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactFrameSet {
    points: Vec<Point>,
    shape: LidShape,
    rim_radius: f64,
}

impl ContactFrameSet {
    pub fn new(points: Vec<Point>, shape: LidShape, rim_radius: f64) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::config(format!(
                "a lid needs at least 3 contact frames, got {}",
                points.len()
            )));
        }
        if !(rim_radius > 0.0) {
            return Err(Error::config(format!("rim radius must be positive, got {rim_radius}")));
        }
        for p in &points {
            let radial = (p.x * p.x + p.y * p.y).sqrt();
            if radial > rim_radius + RIM_TOLERANCE {
                return Err(Error::config(format!(
                    "contact frame at radius {radial} lies outside rim radius {rim_radius}"
                )));
            }
        }
        Ok(Self {
            points,
            shape,
            rim_radius,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn shape(&self) -> LidShape {
        self.shape
    }

    pub fn rim_radius(&self) -> f64 {
        self.rim_radius
    }

    /// Rigidly rotates every frame about the lid centre.
    pub fn rotated(&self, rotation: &Rotation3<f64>) -> ContactFrameSet {
        ContactFrameSet {
            points: self.points.iter().map(|p| rotation * p).collect(),
            shape: self.shape,
            rim_radius: self.rim_radius,
        }
    }
}

/// Generates `m` contact frames on the rim of a lid.
///
/// Round lids get an evenly spaced ring at `rim_radius`. Polygonal lids use
/// `rim_radius` as the circumradius and place frames at equal perimeter
/// spacing starting from the midpoint of the face that crosses the +x axis,
/// so `m = sides` yields the face midpoints and `m = 2 * sides` adds the
/// corners.
pub fn make_lid_frames(shape: LidShape, rim_radius: f64, m: usize) -> Result<ContactFrameSet> {
    if m < 3 {
        return Err(Error::config(format!("a lid needs at least 3 contact frames, got {m}")));
    }
    let points = match shape.sides() {
        None => (0..m)
            .map(|j| {
                let angle = 2.0 * PI * j as f64 / m as f64;
                Point::new(rim_radius * angle.cos(), rim_radius * angle.sin(), 0.0)
            })
            .collect(),
        Some(n) => {
            let vertex = |j: usize| {
                let angle = (2 * (j % n) + 1) as f64 * PI / n as f64;
                Point::new(rim_radius * angle.cos(), rim_radius * angle.sin(), 0.0)
            };
            let side = 2.0 * rim_radius * (PI / n as f64).sin();
            let perimeter = side * n as f64;
            (0..m)
                .map(|j| {
                    // arc length measured from vertex n-1, which opens face 0
                    let s = perimeter * j as f64 / m as f64 + 0.5 * side;
                    let face = ((s / side).floor() as usize).min(n);
                    let t = s / side - face as f64;
                    let start = vertex(face + n - 1);
                    let end = vertex(face);
                    start + (end - start) * t
                })
                .collect()
        }
    };
    ContactFrameSet::new(points, shape, rim_radius)
}

/// Tactile sensor points of all five fingertips, world frame, finger-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileArray {
    per_finger: usize,
    points: Vec<Point>,
}

impl TactileArray {
    pub fn new(fingers: Vec<Vec<Point>>) -> Result<Self> {
        if fingers.len() != NUM_FINGERS {
            return Err(Error::Input(format!(
                "tactile array needs {NUM_FINGERS} fingers, got {}",
                fingers.len()
            )));
        }
        let per_finger = fingers[0].len();
        if per_finger == 0 || fingers.iter().any(|f| f.len() != per_finger) {
            return Err(Error::Input(
                "every finger must carry the same non-zero number of sensors".into(),
            ));
        }
        Ok(Self {
            per_finger,
            points: fingers.into_iter().flatten().collect(),
        })
    }

    pub fn sensors_per_finger(&self) -> usize {
        self.per_finger
    }

    pub fn finger(&self, i: usize) -> &[Point] {
        &self.points[i * self.per_finger..(i + 1) * self.per_finger]
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn rotated(&self, rotation: &Rotation3<f64>) -> TactileArray {
        TactileArray {
            per_finger: self.per_finger,
            points: self.points.iter().map(|p| rotation * p).collect(),
        }
    }
}

/// Per-step tactile reading for the whole hand.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactReport {
    per_finger: usize,
    /// Distance of every sensor to its closest frame, finger-major 5×k.
    pub raw_distances: Vec<f64>,
    /// Thresholded penetrations; scaled into [0, 1] once graded.
    pub penetrations: Vec<f64>,
    pub grasp_quality: [f64; NUM_FINGERS],
    pub contact_now: [bool; NUM_FINGERS],
    pub released: [bool; NUM_FINGERS],
    pub graded: bool,
}

impl ContactReport {
    pub fn sensors_per_finger(&self) -> usize {
        self.per_finger
    }

    pub fn row(&self, finger: usize) -> &[f64] {
        &self.penetrations[finger * self.per_finger..(finger + 1) * self.per_finger]
    }

    pub fn raw_row(&self, finger: usize) -> &[f64] {
        &self.raw_distances[finger * self.per_finger..(finger + 1) * self.per_finger]
    }

    pub fn max_distance(&self) -> f64 {
        self.raw_distances.iter().copied().fold(0.0, f64::max)
    }

    /// A report in which every sensor is farther than any threshold.
    pub fn empty(per_finger: usize) -> Self {
        Self {
            per_finger,
            raw_distances: vec![f64::INFINITY; NUM_FINGERS * per_finger],
            penetrations: vec![0.0; NUM_FINGERS * per_finger],
            grasp_quality: [0.0; NUM_FINGERS],
            contact_now: [false; NUM_FINGERS],
            released: [false; NUM_FINGERS],
            graded: true,
        }
    }

    /// Builds a report directly from a 5×k distance matrix (finger-major).
    pub fn from_distances(per_finger: usize, raw_distances: Vec<f64>, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if per_finger == 0 || raw_distances.len() != NUM_FINGERS * per_finger {
            return Err(Error::Input(format!(
                "expected {} distances, got {}",
                NUM_FINGERS * per_finger,
                raw_distances.len()
            )));
        }
        let penetrations: Vec<f64> = raw_distances
            .iter()
            .map(|&d| if d <= epsilon { d } else { 0.0 })
            .collect();
        let mut contact_now = [false; NUM_FINGERS];
        for (i, flag) in contact_now.iter_mut().enumerate() {
            *flag = penetrations[i * per_finger..(i + 1) * per_finger]
                .iter()
                .any(|&c| c > 0.0);
        }
        Ok(Self {
            per_finger,
            raw_distances,
            penetrations,
            grasp_quality: [0.0; NUM_FINGERS],
            contact_now,
            released: [false; NUM_FINGERS],
            graded: false,
        })
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("contact threshold must be positive, got {epsilon}")))
    }
}

#[inline]
fn squared_distance(a: &Point, b: &Point) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn nearest_distance_to(query: &Point, points: &[Point]) -> f64 {
    points
        .iter()
        .map(|p| squared_distance(query, p))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Euclidean distance from `query` to the closest contact frame.
pub fn nearest_distance(query: &Point, frames: &ContactFrameSet) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::config("nearest distance queried against an empty frame set"));
    }
    Ok(nearest_distance_to(query, frames.points()))
}

/// Raw distances and thresholded penetrations for every sensor.
pub fn compute_penetrations(
    array: &TactileArray,
    frames: &ContactFrameSet,
    epsilon: f64,
) -> Result<ContactReport> {
    if frames.is_empty() {
        return Err(Error::config("penetrations requested against an empty frame set"));
    }
    let raw = array
        .points()
        .iter()
        .map(|s| nearest_distance_to(s, frames.points()))
        .collect();
    ContactReport::from_distances(array.sensors_per_finger(), raw, epsilon)
}

/// Scales each finger's penetrations by that finger's maximum and fills the
/// grasp quality. Rows without contact stay at zero.
pub fn normalize_and_grade(mut report: ContactReport) -> ContactReport {
    let k = report.per_finger;
    for i in 0..NUM_FINGERS {
        let row = &mut report.penetrations[i * k..(i + 1) * k];
        let row_max = row.iter().copied().fold(0.0, f64::max);
        let mut grasp = 0.0;
        if row_max > 0.0 {
            for c in row.iter_mut() {
                *c /= row_max;
                grasp += *c;
            }
        }
        report.grasp_quality[i] = grasp;
        report.contact_now[i] = row_max > 0.0;
    }
    report.graded = true;
    report
}

/// How the per-finger release flag is derived from consecutive reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseRule {
    /// Contact at the previous step and none at the current step.
    #[default]
    Transition,
    /// Contact at the previous step, regardless of the current step.
    PreviousContact,
}

/// Per-finger release flags between consecutive steps. The first step of an
/// episode (`previous == None`) never releases.
pub fn release_transitions(
    previous: Option<&ContactReport>,
    current: &ContactReport,
    rule: ReleaseRule,
) -> [bool; NUM_FINGERS] {
    let mut released = [false; NUM_FINGERS];
    if let Some(prev) = previous {
        for i in 0..NUM_FINGERS {
            released[i] = match rule {
                ReleaseRule::Transition => prev.contact_now[i] && !current.contact_now[i],
                ReleaseRule::PreviousContact => prev.contact_now[i],
            };
        }
    }
    released
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ring(points: &[(f64, f64, f64)]) -> ContactFrameSet {
        ContactFrameSet {
            points: points.iter().map(|&(x, y, z)| Point::new(x, y, z)).collect(),
            shape: LidShape::Cylinder,
            rim_radius: 10.0,
        }
    }

    fn random_point(rng: &mut impl Rng, scale: f64) -> Point {
        Point::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    #[test]
    fn distance_to_coincident_point_is_zero() {
        let frames = make_lid_frames(LidShape::Cylinder, 0.04, 8).unwrap();
        let q = frames.points()[3];
        assert_eq!(nearest_distance(&q, &frames).unwrap(), 0.0);
    }

    #[test]
    fn distance_picks_the_nearest_frame() {
        let frames = ring(&[(0.0, 0.0, 0.0), (0.0, 3.0, 0.0), (5.0, 5.0, 5.0)]);
        let d = nearest_distance(&Point::new(0.0, 0.0, 1.0), &frames).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn empty_frame_set_is_a_configuration_error() {
        let frames = ContactFrameSet {
            points: vec![],
            shape: LidShape::Cylinder,
            rim_radius: 0.04,
        };
        assert!(matches!(
            nearest_distance(&Point::zeros(), &frames),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn too_few_frames_rejected() {
        assert!(matches!(make_lid_frames(LidShape::Cylinder, 0.04, 2), Err(Error::Config(_))));
    }

    #[test]
    fn cylinder_ring_is_evenly_spaced() {
        let frames = make_lid_frames(LidShape::Cylinder, 0.04, 8).unwrap();
        assert_eq!(frames.len(), 8);
        for (j, p) in frames.points().iter().enumerate() {
            assert_relative_eq!(p.norm(), 0.04, epsilon = 1e-15);
            let expected = (j as f64 * 45.0).to_radians();
            let mut angle = p.y.atan2(p.x);
            if angle < -1e-12 {
                angle += 2.0 * PI;
            }
            assert_relative_eq!(angle, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn polygon_frames_sit_on_face_midpoints() {
        for (shape, n) in [(LidShape::Square, 4usize), (LidShape::Hexagon, 6)] {
            let frames = make_lid_frames(shape, 0.04, n).unwrap();
            let apothem = 0.04 * (PI / n as f64).cos();
            for (j, p) in frames.points().iter().enumerate() {
                let expected_angle = 2.0 * PI * j as f64 / n as f64;
                assert_relative_eq!(p.x, apothem * expected_angle.cos(), epsilon = 1e-12);
                assert_relative_eq!(p.y, apothem * expected_angle.sin(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn doubling_polygon_frames_adds_corners() {
        let frames = make_lid_frames(LidShape::Square, 0.04, 8).unwrap();
        for (j, p) in frames.points().iter().enumerate() {
            let r = p.norm();
            if j % 2 == 0 {
                assert_relative_eq!(r, 0.04 * (PI / 4.0).cos(), epsilon = 1e-12);
            } else {
                assert_relative_eq!(r, 0.04, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn no_contact_gives_zero_penetrations() {
        let report = ContactReport::from_distances(2, vec![0.01; 10], 0.005).unwrap();
        assert!(report.penetrations.iter().all(|&c| c == 0.0));
        assert!(report.contact_now.iter().all(|&c| !c));
    }

    #[test]
    fn single_sensor_within_threshold() {
        let mut raw = vec![0.02; 10];
        raw[3] = 0.004;
        let report = ContactReport::from_distances(2, raw, 0.005).unwrap();
        for (idx, &c) in report.penetrations.iter().enumerate() {
            if idx == 3 {
                assert_eq!(c, 0.004);
            } else {
                assert_eq!(c, 0.0);
            }
        }
        assert_eq!(report.contact_now, [false, true, false, false, false]);
    }

    #[test]
    fn nonpositive_threshold_rejected() {
        assert!(ContactReport::from_distances(1, vec![0.0; 5], 0.0).is_err());
    }

    #[test]
    fn normalization_divides_by_row_max() {
        let mut raw = vec![1.0; 10];
        raw[0] = 0.002;
        raw[1] = 0.004;
        let graded = normalize_and_grade(ContactReport::from_distances(2, raw, 0.005).unwrap());
        assert_eq!(graded.row(0), &[0.5, 1.0]);
        assert_eq!(graded.grasp_quality[0], 1.5);
        assert_eq!(graded.grasp_quality[1], 0.0);
        assert!(graded.graded);
    }

    #[test]
    fn release_requires_a_transition() {
        let on = ContactReport::from_distances(1, vec![0.001; 5], 0.005).unwrap();
        let off = ContactReport::from_distances(1, vec![0.1; 5], 0.005).unwrap();
        let rule = ReleaseRule::Transition;
        assert_eq!(release_transitions(Some(&on), &off, rule), [true; 5]);
        assert_eq!(release_transitions(Some(&off), &off, rule), [false; 5]);
        assert_eq!(release_transitions(Some(&on), &on, rule), [false; 5]);
        assert_eq!(release_transitions(None, &off, rule), [false; 5]);
        // the literal reading only looks at the previous step
        assert_eq!(release_transitions(Some(&on), &on, ReleaseRule::PreviousContact), [true; 5]);
    }

    #[test]
    fn scripted_two_step_trace() {
        // finger 0: on -> on -> off ; finger 1: off -> on -> on ; finger 2: on -> off -> on
        let make = |flags: [bool; 5]| {
            let raw = flags.iter().map(|&f| if f { 0.002 } else { 0.05 }).collect();
            ContactReport::from_distances(1, raw, 0.005).unwrap()
        };
        let steps = [
            make([true, false, true, false, false]),
            make([true, true, false, false, false]),
            make([false, true, true, false, false]),
        ];
        let r1 = release_transitions(Some(&steps[0]), &steps[1], ReleaseRule::Transition);
        let r2 = release_transitions(Some(&steps[1]), &steps[2], ReleaseRule::Transition);
        assert_eq!(r1, [false, false, true, false, false]);
        assert_eq!(r2, [true, false, false, false, false]);
    }

    #[test]
    fn random_reports_match_rowwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let k = rng.random_range(1..12);
            let raw: Vec<f64> = (0..5 * k).map(|_| rng.random_range(0.0..0.01)).collect();
            let graded =
                normalize_and_grade(ContactReport::from_distances(k, raw.clone(), 0.005).unwrap());
            for i in 0..5 {
                let row: Vec<f64> = raw[i * k..(i + 1) * k]
                    .iter()
                    .map(|&d| if d <= 0.005 { d } else { 0.0 })
                    .collect();
                let m = row.iter().cloned().fold(0.0_f64, f64::max);
                let g: f64 = if m > 0.0 { row.iter().map(|c| c / m).sum() } else { 0.0 };
                assert_relative_eq!(graded.grasp_quality[i], g, max_relative = 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn thresholding_and_bounds_hold(
            raw in proptest::collection::vec(0.0f64..0.02, 5 * 9),
            eps in 0.001f64..0.01,
        ) {
            let report = ContactReport::from_distances(9, raw.clone(), eps).unwrap();
            for (&c, &d) in report.penetrations.iter().zip(&raw) {
                prop_assert!(c * (d - eps) <= 0.0);
                prop_assert!(c >= 0.0 && c <= eps);
                if d > eps {
                    prop_assert_eq!(c, 0.0);
                }
            }
            let graded = normalize_and_grade(report);
            for i in 0..5 {
                let row = graded.row(i);
                let m = row.iter().cloned().fold(0.0_f64, f64::max);
                prop_assert!(m == 0.0 || m == 1.0);
                prop_assert!(row.iter().all(|&c| (0.0..=1.0).contains(&c)));
                prop_assert!(graded.grasp_quality[i] >= 0.0 && graded.grasp_quality[i] <= 9.0);
                prop_assert_eq!(graded.contact_now[i], row.iter().any(|&c| c > 0.0));
            }
        }

        #[test]
        fn distances_are_invariant_under_lid_rotation(
            angle in -10.0f64..10.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = make_lid_frames(LidShape::Hexagon, 0.04, 12).unwrap();
            let fingers = (0..5)
                .map(|_| (0..9).map(|_| random_point(&mut rng, 0.06)).collect())
                .collect();
            let array = TactileArray::new(fingers).unwrap();
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
            let a = compute_penetrations(&array, &frames, 0.005).unwrap();
            let b = compute_penetrations(&array.rotated(&rot), &frames.rotated(&rot), 0.005).unwrap();
            for (x, y) in a.raw_distances.iter().zip(&b.raw_distances) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn penetrations_match_piecewise_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = make_lid_frames(LidShape::Cylinder, 0.04, 8).unwrap();
        for _ in 0..100 {
            let fingers: Vec<Vec<Point>> = (0..5)
                .map(|_| {
                    (0..9)
                        .map(|_| {
                            let f = frames.points()[rng.random_range(0..8)];
                            f + random_point(&mut rng, 0.006)
                        })
                        .collect()
                })
                .collect();
            let array = TactileArray::new(fingers.clone()).unwrap();
            let report = compute_penetrations(&array, &frames, 0.005).unwrap();
            for (i, finger) in fingers.iter().enumerate() {
                for (j, s) in finger.iter().enumerate() {
                    let d = frames
                        .points()
                        .iter()
                        .map(|f| (s - f).norm())
                        .fold(f64::INFINITY, f64::min);
                    let expected = if d <= 0.005 { d } else { 0.0 };
                    assert_relative_eq!(report.row(i)[j], expected, max_relative = 1e-14);
                }
            }
        }
    }
}
