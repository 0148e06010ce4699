//! Rotation Score (mean lid increment per step), Rotation Time (seconds per
//! completed revolution), Success Rate (one revolution within a per-shape time
//! limit), and their aggregation into comparison tables.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contact_geometry::LidShape;
use crate::error::{Error, Result};

pub const REVOLUTION: f64 = std::f64::consts::TAU;
/// Slack on time-limit comparisons, far below one control step.
const TIME_EPS: f64 = 1e-9;

/// Mean per-step lid increment.
pub fn rotation_score(deltas: &[f64]) -> Result<f64> {
    if deltas.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "rotation score needs at least 2 steps, got {}",
            deltas.len()
        )));
    }
    Ok(deltas.iter().sum::<f64>() / deltas.len() as f64)
}

/// Times (seconds from episode start) at which the cumulative rotation first
/// reaches each multiple of 2π, interpolated linearly within the crossing step.
pub fn revolution_crossings(deltas: &[f64], dt: f64) -> Vec<f64> {
    let mut crossings = Vec::new();
    let mut total = 0.0;
    let mut target = REVOLUTION;
    for (i, &d) in deltas.iter().enumerate() {
        let next = total + d;
        while next >= target {
            let fraction = if d > 0.0 { (target - total) / d } else { 1.0 };
            crossings.push((i as f64 + fraction) * dt);
            target += REVOLUTION;
        }
        total = next;
    }
    crossings
}

/// Mean duration of completed revolutions; `None` if none completed.
pub fn rotation_time(deltas: &[f64], dt: f64) -> Option<f64> {
    let crossings = revolution_crossings(deltas, dt);
    let last = *crossings.last()?;
    Some(last / crossings.len() as f64)
}

/// Per-shape time limit for the first revolution, in seconds.
pub fn time_limit(shape: LidShape) -> f64 {
    match shape {
        LidShape::Cylinder => 2.5,
        LidShape::Square => 5.0,
        LidShape::Hexagon => 3.5,
    }
}

/// Whether the first revolution completes within `limit` seconds.
pub fn success_within(deltas: &[f64], dt: f64, limit: f64) -> bool {
    revolution_crossings(deltas, dt)
        .first()
        .is_some_and(|&t| t <= limit + TIME_EPS)
}

/// Success against the time limit of the named shape.
pub fn success(deltas: &[f64], shape_tag: &str, dt: f64) -> Result<bool> {
    let shape = LidShape::from_str(shape_tag)?;
    Ok(success_within(deltas, dt, time_limit(shape)))
}

/// One evaluated episode, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub method: String,
    pub shape: String,
    pub episode: usize,
    pub friction: f64,
    pub steps: usize,
    pub total_reward: f64,
    pub rs: f64,
    pub rt: Option<f64>,
    pub success: bool,
}

impl EpisodeMetrics {
    pub fn compute(
        method: &str,
        shape: LidShape,
        episode: usize,
        friction: f64,
        total_reward: f64,
        deltas: &[f64],
        dt: f64,
    ) -> Result<Self> {
        Ok(Self {
            method: method.to_owned(),
            shape: shape.as_str().to_owned(),
            episode,
            friction,
            steps: deltas.len(),
            total_reward,
            rs: rotation_score(deltas)?,
            rt: rotation_time(deltas, dt),
            success: success_within(deltas, dt, time_limit(shape)),
        })
    }
}

/// Aggregate over one (method, shape) cell. Standard deviations are population
/// deviations across episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub shape: String,
    pub episodes: usize,
    pub rs_mean: f64,
    pub rs_std: f64,
    /// `None` when no episode completed a revolution.
    pub rt_mean: Option<f64>,
    pub rt_std: Option<f64>,
    /// Episodes excluded from the RT statistics.
    pub rt_undefined: usize,
    pub sr: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn from_episodes(method: &str, shape: &str, episodes: &[&EpisodeMetrics]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::UndefinedMetric(format!("no episodes for {method}/{shape}")));
        }
        let rs: Vec<f64> = episodes.iter().map(|e| e.rs).collect();
        let rt: Vec<f64> = episodes.iter().filter_map(|e| e.rt).collect();
        let (rs_mean, rs_std) = mean_std(&rs);
        let (rt_mean, rt_std) = if rt.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&rt);
            (Some(m), Some(s))
        };
        let successes = episodes.iter().filter(|e| e.success).count();
        Ok(Self {
            method: method.to_owned(),
            shape: shape.to_owned(),
            episodes: episodes.len(),
            rs_mean,
            rs_std,
            rt_mean,
            rt_std,
            rt_undefined: episodes.len() - rt.len(),
            sr: successes as f64 / episodes.len() as f64,
        })
    }
}

/// Groups episodes by (method, shape) in order of first appearance.
pub fn aggregate(episodes: &[EpisodeMetrics]) -> Result<Vec<MetricReport>> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for e in episodes {
        let key = (e.method.as_str(), e.shape.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, shape)| {
            let cell: Vec<&EpisodeMetrics> =
                episodes.iter().filter(|e| e.method == method && e.shape == shape).collect();
            MetricReport::from_episodes(method, shape, &cell)
        })
        .collect()
}

pub fn write_episode_csv(path: &Path, episodes: &[EpisodeMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for e in episodes {
        w.serialize(e).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_episode_csv(path: &Path) -> Result<Vec<EpisodeMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_report_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in reports {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn pm(mean: Option<f64>, std: Option<f64>, digits: usize) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.digits$} ± {s:.digits$}"),
        _ => "—".to_owned(),
    }
}

/// Aligned plain-text table: one row per (method, shape) cell plus an
/// averaged row per method when it spans several shapes.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut rows: Vec<[String; 5]> = vec![[
        "Method".into(),
        "Shape".into(),
        "RS [rad/step]".into(),
        "RT [s]".into(),
        "SR".into(),
    ]];
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for method in methods {
        let cells: Vec<&MetricReport> = reports.iter().filter(|r| r.method == method).collect();
        for r in &cells {
            let mut rt = pm(r.rt_mean, r.rt_std, 2);
            if r.rt_undefined > 0 {
                let _ = write!(rt, " ({} undef.)", r.rt_undefined);
            }
            rows.push([
                r.method.clone(),
                r.shape.clone(),
                pm(Some(r.rs_mean), Some(r.rs_std), 4),
                rt,
                format!("{:.2}", r.sr),
            ]);
        }
        if cells.len() > 1 {
            let n = cells.len() as f64;
            let rs = cells.iter().map(|r| r.rs_mean).sum::<f64>() / n;
            let rs_sd = cells.iter().map(|r| r.rs_std).sum::<f64>() / n;
            let rts: Vec<&MetricReport> = cells.iter().copied().filter(|r| r.rt_mean.is_some()).collect();
            let rt = if rts.is_empty() {
                "—".to_owned()
            } else {
                let k = rts.len() as f64;
                pm(
                    Some(rts.iter().filter_map(|r| r.rt_mean).sum::<f64>() / k),
                    Some(rts.iter().filter_map(|r| r.rt_std).sum::<f64>() / k),
                    2,
                )
            };
            let sr = cells.iter().map(|r| r.sr).sum::<f64>() / n;
            rows.push([
                method.to_owned(),
                "average".into(),
                pm(Some(rs), Some(rs_sd), 4),
                rt,
                format!("{sr:.2}"),
            ]);
        }
    }
    let widths: Vec<usize> = (0..5)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DT: f64 = 0.0166;

    #[test]
    fn constant_rate_score() {
        assert!((rotation_score(&[0.01; 50]).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(rotation_score(&[0.0; 50]).unwrap(), 0.0);
    }

    #[test]
    fn sawtooth_scores_zero() {
        let trace: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
        assert_eq!(rotation_score(&trace).unwrap(), 0.0);
    }

    #[test]
    fn short_trace_is_undefined() {
        assert!(matches!(rotation_score(&[0.1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(rotation_score(&[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn hundred_step_revolution() {
        let rt = rotation_time(&[0.0628; 300], DT).unwrap();
        let steps = REVOLUTION / 0.0628;
        assert!((rt - steps * DT).abs() < 1e-12);
        assert!((rt - 1.66).abs() < 0.01);
    }

    #[test]
    fn no_revolution_is_undefined() {
        assert_eq!(rotation_time(&[0.01; 100], DT), None);
    }

    #[test]
    fn two_revolutions_at_different_speeds() {
        // 100 steps at 2π/100 then 2π/50 per step: revolutions of 1.0 s and 0.5 s
        let mut trace = vec![REVOLUTION / 100.0; 100];
        trace.extend(vec![REVOLUTION / 50.0; 55]);
        let rt = rotation_time(&trace, 0.01).unwrap();
        assert!((rt - 0.75).abs() < 1e-9, "{rt}");
    }

    #[test]
    fn partial_final_revolution_is_ignored() {
        let mut trace = vec![REVOLUTION / 100.0; 100];
        trace.extend(vec![REVOLUTION / 400.0; 100]);
        assert!((rotation_time(&trace, 0.01).unwrap() - 1.0).abs() < 1e-9);
    }

    fn completes_at_step(n: usize) -> Vec<f64> {
        // cumulative rotation reaches 2π exactly at the end of step n
        vec![REVOLUTION / n as f64; n + 20]
    }

    #[test]
    fn shape_time_limits() {
        let dt = 0.01;
        assert!(success(&completes_at_step(240), "cylinder", dt).unwrap());
        assert!(!success(&completes_at_step(510), "square", dt).unwrap());
        assert!(!success(&[0.001; 100], "hexagon", dt).unwrap());
        assert!(matches!(success(&[0.1; 10], "octagon", dt), Err(Error::Config(_))));
    }

    #[test]
    fn limits_are_sharp_to_one_step() {
        for shape in LidShape::ALL {
            let limit_steps = (time_limit(shape) / DT).round() as usize;
            let before = completes_at_step(limit_steps - 1);
            let after = completes_at_step(limit_steps + 1);
            assert!(success_within(&before, DT, (limit_steps as f64) * DT));
            assert!(!success_within(&after, DT, (limit_steps as f64) * DT));
        }
    }

    #[test]
    fn identical_episodes_have_zero_spread() {
        let e = EpisodeMetrics::compute("m", LidShape::Cylinder, 0, 1.0, 3.0, &[0.05; 300], DT).unwrap();
        let eps = vec![e.clone(), e.clone(), e];
        let r = &aggregate(&eps).unwrap()[0];
        assert_eq!(r.rs_std, 0.0);
        assert_eq!(r.rt_std, Some(0.0));
        assert_eq!(r.episodes, 3);
    }

    #[test]
    fn success_rate_is_a_fraction() {
        let ok = EpisodeMetrics::compute("m", LidShape::Cylinder, 0, 1.0, 0.0, &[0.1; 200], DT).unwrap();
        let bad = EpisodeMetrics::compute("m", LidShape::Cylinder, 1, 1.0, 0.0, &[0.0; 200], DT).unwrap();
        let mut eps = vec![ok; 74];
        eps.extend(vec![bad; 26]);
        let r = &aggregate(&eps).unwrap()[0];
        assert_eq!(r.sr, 0.74);
        assert_eq!(r.rt_undefined, 26);
        assert!(format_table(&[r.clone()]).contains("0.74"));
    }

    #[test]
    fn csv_round_trip_and_reaggregation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.csv");
        let eps: Vec<EpisodeMetrics> = (0..6)
            .map(|i| {
                let rate = 0.01 + 0.013 * i as f64;
                let shape = if i % 2 == 0 { LidShape::Cylinder } else { LidShape::Square };
                EpisodeMetrics::compute("t", shape, i, 0.9 + 0.1 * i as f64, -1.5, &vec![rate; 400], DT).unwrap()
            })
            .collect();
        write_episode_csv(&path, &eps).unwrap();
        let back = read_episode_csv(&path).unwrap();
        assert_eq!(back, eps);
        assert_eq!(aggregate(&back).unwrap(), aggregate(&eps).unwrap());
    }

    #[test]
    fn table_has_one_row_per_cell_and_averages() {
        let mut eps = Vec::new();
        for (m, rate) in [("a", 0.02), ("b", 0.03)] {
            for shape in [LidShape::Cylinder, LidShape::Hexagon] {
                eps.push(EpisodeMetrics::compute(m, shape, 0, 1.2, 0.0, &[rate; 400], DT).unwrap());
            }
        }
        let table = format_table(&aggregate(&eps).unwrap());
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2 + 4 + 2);
        assert!(lines[2].contains("±"));
        assert_eq!(table.matches("average").count(), 2);
    }

    proptest! {
        #[test]
        fn constant_rate_consistency(rate in 0.005f64..0.5, dt in 0.001f64..0.05) {
            let steps = (3.0 * REVOLUTION / rate).ceil() as usize + 2;
            let trace = vec![rate; steps];
            let rs = rotation_score(&trace).unwrap();
            let rt = rotation_time(&trace, dt).unwrap();
            prop_assert!((rt * rs - REVOLUTION * dt).abs() < 1e-9);
        }

        #[test]
        fn loosening_limits_never_lowers_success(
            rates in proptest::collection::vec(-0.02f64..0.08, 50..400),
            limit in 0.5f64..5.0,
            extra in 0.0f64..3.0,
        ) {
            let tight = success_within(&rates, DT, limit);
            let loose = success_within(&rates, DT, limit + extra);
            prop_assert!(!tight || loose);
        }
    }
}
