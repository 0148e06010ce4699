//! Line-delimited episode trace files: a versioned header line followed by
//! one JSON record per step.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::environment::{EpisodeTrace, TraceRecord};
use crate::error::{Error, Result};

pub const TRACE_SCHEMA: &str = "lidtwist-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub method: String,
    pub shape: String,
    pub episode: usize,
    pub friction: f64,
    pub dt: f64,
}

impl TraceHeader {
    pub fn new(method: &str, shape: &str, episode: usize, friction: f64, dt: f64) -> Self {
        Self {
            schema: TRACE_SCHEMA.to_owned(),
            version: TRACE_VERSION,
            method: method.to_owned(),
            shape: shape.to_owned(),
            episode,
            friction,
            dt,
        }
    }
}

pub fn write_trace(path: &Path, header: &TraceHeader, trace: &EpisodeTrace) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |value: String| writeln!(w, "{value}").map_err(|e| Error::io(path, e));
    line(serde_json::to_string(header).expect("header serialises"))?;
    for record in &trace.records {
        line(serde_json::to_string(record).expect("record serialises"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<(TraceHeader, EpisodeTrace)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty trace file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: TraceHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.schema != TRACE_SCHEMA || header.version != TRACE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported trace schema {} v{}", header.schema, header.version),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("record {i}: {e}")))?;
        records.push(record);
    }
    let friction = header.friction;
    Ok((header, EpisodeTrace { friction, records }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_engine::RewardBreakdown;

    fn record(step: usize) -> TraceRecord {
        TraceRecord {
            step,
            lid_angle: 0.1 * step as f64,
            lid_delta: 0.1,
            reward: RewardBreakdown::default(),
            contact: [true, false, true, false, true],
            released: [false; 5],
            grasp: [0.5, 0.0, 1.25, 0.0, 0.1],
            action: vec![0.25; 22],
            max_distance: 0.03,
            done: step == 2,
            cause: None,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let trace = EpisodeTrace {
            friction: 1.1,
            records: (0..3).map(record).collect(),
        };
        let header = TraceHeader::new("scripted", "cylinder", 4, 1.1, 0.0166);
        write_trace(&path, &header, &trace).unwrap();
        let (h, t) = read_trace(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(t, trace);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
    }

    #[test]
    fn rejects_other_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut header = TraceHeader::new("m", "cylinder", 0, 1.0, 0.01);
        header.version = 99;
        write_trace(&path, &header, &EpisodeTrace::default()).unwrap();
        assert!(matches!(read_trace(&path), Err(Error::Format { .. })));
    }
}
