//! Trajectory ingestion and lane-change scenario extraction.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance when checking that a track is sampled at a fixed period.
const PERIOD_TOL: f64 = 1e-6;

/// One row of the canonical trajectory CSV:
/// `vehicle_id,t,x,y,vx,vy,lane_id` in SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub vehicle_id: u64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub lane_id: i64,
}

/// One paired time step inside a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSample {
    pub t: f64,
    pub x_rel: f64,
    pub y_rel: f64,
    pub vx_rel: f64,
    pub a_lkv_x: f64,
    pub a_lcv_x: f64,
    pub a_lcv_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionScenario {
    pub lcv_id: u64,
    pub lkv_id: u64,
    pub t_start: f64,
    pub t_end: f64,
    pub samples: Vec<ScenarioSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionParams {
    /// Seconds kept before the lane-boundary crossing.
    pub window_before: f64,
    /// Seconds kept after the crossing.
    pub window_after: f64,
    /// Half-width of the window in which speed changes are measured.
    pub interaction_window: f64,
    /// Minimum speed change (max - min) of either vehicle to count as interactive.
    pub speed_change_threshold: f64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            window_before: 6.0,
            window_after: 4.0,
            interaction_window: 4.0,
            speed_change_threshold: 1.0,
        }
    }
}

/// Read the canonical CSV. Rows must be sorted by `(vehicle_id, t)` with each
/// vehicle sampled at a fixed period.
pub fn read_trajectories<R: Read>(reader: R) -> Result<Vec<TrajectoryRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for row in rdr.deserialize::<TrajectoryRecord>() {
        match row {
            Ok(rec) => {
                records.push(rec);
                lines.push(records.len() as u64 + 1);
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(Error::Ingest {
                    line,
                    reason: e.to_string(),
                });
            }
        }
    }
    validate_records(&records, |i| lines[i])?;
    Ok(records)
}

pub fn write_trajectories<W: Write>(writer: W, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["vehicle_id", "t", "x", "y", "vx", "vy", "lane_id"])?;
    for r in records {
        w.write_record([
            r.vehicle_id.to_string(),
            format!("{:.3}", r.t),
            format!("{:.3}", r.x),
            format!("{:.3}", r.y),
            format!("{:.3}", r.vx),
            format!("{:.3}", r.vy),
            r.lane_id.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn validate_records(records: &[TrajectoryRecord], line_of: impl Fn(usize) -> u64) -> Result<()> {
    let mut period: Option<(u64, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        let finite = [r.t, r.x, r.y, r.vx, r.vy].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Ingest {
                line: line_of(i),
                reason: "non-finite value".into(),
            });
        }
        if i == 0 {
            continue;
        }
        let prev = &records[i - 1];
        if r.vehicle_id < prev.vehicle_id {
            return Err(Error::Ingest {
                line: line_of(i),
                reason: format!(
                    "records not sorted by vehicle_id ({} after {})",
                    r.vehicle_id, prev.vehicle_id
                ),
            });
        }
        if r.vehicle_id != prev.vehicle_id {
            period = None;
            continue;
        }
        let dt = r.t - prev.t;
        if dt <= 0.0 {
            return Err(Error::Ingest {
                line: line_of(i),
                reason: format!(
                    "time not strictly increasing for vehicle {} ({} after {})",
                    r.vehicle_id, r.t, prev.t
                ),
            });
        }
        match period {
            None => period = Some((r.vehicle_id, dt)),
            Some((_, p)) if (dt - p).abs() > PERIOD_TOL.max(p * 1e-6) => {
                return Err(Error::Ingest {
                    line: line_of(i),
                    reason: format!(
                        "irregular sample period for vehicle {} ({dt} vs {p})",
                        r.vehicle_id
                    ),
                });
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Maps a raw export (for example NGSIM) onto the canonical record layout.
///
/// ```toml
/// vehicle_id = "Vehicle_ID"
/// t = "Global_Time"      # ms in NGSIM
/// x = "Local_Y"          # longitudinal, feet
/// y = "Local_X"          # lateral, feet
/// vx = "v_Vel"           # feet per second
/// lane_id = "Lane_ID"
/// time_scale = 0.001     # -> seconds
/// length_scale = 0.3048  # -> metres (also applied to velocities)
/// ```
///
/// When `vy` is absent it is derived by central differences of `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub vehicle_id: String,
    pub t: String,
    pub x: String,
    pub y: String,
    pub vx: String,
    #[serde(default)]
    pub vy: Option<String>,
    pub lane_id: String,
    #[serde(default = "one")]
    pub time_scale: f64,
    #[serde(default = "one")]
    pub length_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ColumnMapping {
    pub fn ngsim() -> Self {
        Self {
            vehicle_id: "Vehicle_ID".into(),
            t: "Global_Time".into(),
            x: "Local_Y".into(),
            y: "Local_X".into(),
            vx: "v_Vel".into(),
            vy: None,
            lane_id: "Lane_ID".into(),
            time_scale: 0.001,
            length_scale: 0.3048,
        }
    }
}

/// Read a raw export through a [`ColumnMapping`]. Rows may come in any order;
/// they are sorted by `(vehicle_id, t)` and exact duplicates are dropped.
pub fn read_trajectories_mapped<R: Read>(reader: R, map: &ColumnMapping) -> Result<Vec<TrajectoryRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingest {
            line: 1,
            reason: format!("missing column `{name}`"),
        })
    };
    let cols = [
        col(&map.vehicle_id)?,
        col(&map.t)?,
        col(&map.x)?,
        col(&map.y)?,
        col(&map.vx)?,
        col(&map.lane_id)?,
    ];
    let vy_col = map.vy.as_deref().map(col).transpose()?;

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<&str> {
            row.get(i).ok_or_else(|| Error::Ingest {
                line,
                reason: format!("missing field {i}"),
            })
        };
        let num = |i: usize| -> Result<f64> {
            field(i)?.parse::<f64>().map_err(|e| Error::Ingest {
                line,
                reason: format!("column {}: {e}", headers.get(i).unwrap_or("?")),
            })
        };
        let int = |i: usize| -> Result<i64> {
            let raw = field(i)?;
            raw.parse::<i64>()
                .or_else(|_| raw.parse::<f64>().map(|v| v as i64))
                .map_err(|e| Error::Ingest {
                    line,
                    reason: format!("column {}: {e}", headers.get(i).unwrap_or("?")),
                })
        };
        records.push(TrajectoryRecord {
            vehicle_id: int(cols[0])? as u64,
            t: num(cols[1])? * map.time_scale,
            x: num(cols[2])? * map.length_scale,
            y: num(cols[3])? * map.length_scale,
            vx: num(cols[4])? * map.length_scale,
            vy: match vy_col {
                Some(c) => num(c)? * map.length_scale,
                None => f64::NAN,
            },
            lane_id: int(cols[5])?,
        });
    }
    records.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id).then(a.t.total_cmp(&b.t)));
    records.dedup_by(|a, b| a.vehicle_id == b.vehicle_id && a.t == b.t);

    if vy_col.is_none() {
        derive_lateral_velocity(&mut records);
    }
    validate_records(&records, |i| i as u64 + 2)?;
    Ok(records)
}

fn derive_lateral_velocity(records: &mut [TrajectoryRecord]) {
    let mut start = 0;
    while start < records.len() {
        let id = records[start].vehicle_id;
        let end = start + records[start..].iter().take_while(|r| r.vehicle_id == id).count();
        let track = &mut records[start..end];
        let n = track.len();
        for i in 0..n {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
            track[i].vy = if hi > lo {
                (track[hi].y - track[lo].y) / (track[hi].t - track[lo].t)
            } else {
                0.0
            };
        }
        start = end;
    }
}

struct Track<'a> {
    rows: &'a [TrajectoryRecord],
    t0: f64,
    period: f64,
}

impl<'a> Track<'a> {
    fn new(rows: &'a [TrajectoryRecord]) -> Self {
        let period = if rows.len() > 1 { rows[1].t - rows[0].t } else { f64::INFINITY };
        Self {
            rows,
            t0: rows[0].t,
            period,
        }
    }

    fn t_end(&self) -> f64 {
        self.rows[self.rows.len() - 1].t
    }

    /// Row at time `t`, if the track has a sample there.
    fn at(&self, t: f64) -> Option<&TrajectoryRecord> {
        if !self.period.is_finite() {
            let row = &self.rows[0];
            return ((row.t - t).abs() < PERIOD_TOL).then_some(row);
        }
        let k = ((t - self.t0) / self.period).round();
        if k < 0.0 {
            return None;
        }
        let row = self.rows.get(k as usize)?;
        ((row.t - t).abs() < PERIOD_TOL.max(self.period * 1e-3)).then_some(row)
    }

    /// Central-difference acceleration `(ax, ay)` at `t`.
    fn accel(&self, t: f64) -> Option<(f64, f64)> {
        let prev = self.at(t - self.period)?;
        let next = self.at(t + self.period)?;
        let h = next.t - prev.t;
        Some(((next.vx - prev.vx) / h, (next.vy - prev.vy) / h))
    }
}

/// Pair each lane change with the nearest vehicle already travelling in the
/// target lane at the crossing time, and keep the pairs in which either
/// vehicle changes speed by at least the configured threshold near the
/// crossing.
pub fn extract_interaction_scenarios(
    records: &[TrajectoryRecord],
    params: &ExtractionParams,
) -> Result<Vec<InteractionScenario>> {
    validate_records(records, |i| i as u64 + 2)?;

    let mut tracks: BTreeMap<u64, Track> = BTreeMap::new();
    let mut start = 0;
    while start < records.len() {
        let id = records[start].vehicle_id;
        let end = start + records[start..].iter().take_while(|r| r.vehicle_id == id).count();
        tracks.insert(id, Track::new(&records[start..end]));
        start = end;
    }

    let mut scenarios = Vec::new();
    for (&lcv_id, lcv) in &tracks {
        for k in 1..lcv.rows.len() {
            let (before, after) = (&lcv.rows[k - 1], &lcv.rows[k]);
            if before.lane_id == after.lane_id {
                continue;
            }
            let t_cross = after.t;
            let target_lane = after.lane_id;
            let lo = (t_cross - params.window_before).max(lcv.t0);
            let hi = (t_cross + params.window_after).min(lcv.t_end());

            // Exactly one lane change for the LCV inside the window.
            let changes = lcv
                .rows
                .windows(2)
                .filter(|w| w[1].t >= lo && w[1].t <= hi && w[0].lane_id != w[1].lane_id)
                .count();
            if changes != 1 {
                continue;
            }

            let Some((lkv_id, lkv)) = nearest_lane_keeper(&tracks, lcv_id, after, target_lane, lo, hi)
            else {
                continue;
            };
            let lo = lo.max(lkv.t0);
            let hi = hi.min(lkv.t_end());

            if !is_interactive(lcv, lkv, t_cross, params) {
                continue;
            }

            let mut samples = Vec::new();
            let n_steps = ((hi - lo) / lcv.period).round() as usize;
            for step in 0..=n_steps {
                let t = lo + step as f64 * lcv.period;
                let (Some(c), Some(l)) = (lcv.at(t), lkv.at(t)) else {
                    continue;
                };
                let (Some((a_lcv_x, a_lcv_y)), Some((a_lkv_x, _))) = (lcv.accel(t), lkv.accel(t)) else {
                    continue;
                };
                samples.push(ScenarioSample {
                    t: c.t,
                    x_rel: c.x - l.x,
                    y_rel: c.y - l.y,
                    vx_rel: c.vx - l.vx,
                    a_lkv_x,
                    a_lcv_x,
                    a_lcv_y,
                });
            }
            if samples.is_empty() {
                continue;
            }
            scenarios.push(InteractionScenario {
                lcv_id,
                lkv_id,
                t_start: samples[0].t,
                t_end: samples[samples.len() - 1].t,
                samples,
            });
        }
    }
    Ok(scenarios)
}

fn nearest_lane_keeper<'t, 'a>(
    tracks: &'t BTreeMap<u64, Track<'a>>,
    lcv_id: u64,
    at_cross: &TrajectoryRecord,
    lane: i64,
    lo: f64,
    hi: f64,
) -> Option<(u64, &'t Track<'a>)> {
    let mut best: Option<(f64, u64, &Track)> = None;
    for (&id, track) in tracks {
        if id == lcv_id {
            continue;
        }
        let Some(row) = track.at(at_cross.t) else {
            continue;
        };
        if row.lane_id != lane || row.vx * at_cross.vx < 0.0 {
            continue;
        }
        let keeps_lane = track
            .rows
            .iter()
            .filter(|r| r.t >= lo && r.t <= hi)
            .all(|r| r.lane_id == lane);
        if !keeps_lane {
            continue;
        }
        let d = (row.x - at_cross.x).abs();
        if best.is_none_or(|(bd, _, _)| d < bd) {
            best = Some((d, id, track));
        }
    }
    best.map(|(_, id, t)| (id, t))
}

fn is_interactive(lcv: &Track, lkv: &Track, t_cross: f64, params: &ExtractionParams) -> bool {
    let spread = |track: &Track| -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in track.rows {
            if (r.t - t_cross).abs() <= params.interaction_window + PERIOD_TOL {
                lo = lo.min(r.vx);
                hi = hi.max(r.vx);
            }
        }
        hi - lo
    };
    spread(lcv) >= params.speed_change_threshold || spread(lkv) >= params.speed_change_threshold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_of(rows: &[&str]) -> String {
        let mut s = String::from("vehicle_id,t,x,y,vx,vy,lane_id\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn rejects_non_monotone_time_with_line() {
        let csv = csv_of(&["1,0.0,0,0,10,0,1", "1,0.1,1,0,10,0,1", "1,0.1,2,0,10,0,1"]);
        match read_trajectories(csv.as_bytes()) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_field() {
        let csv = csv_of(&["1,0.0,0,0,10,0,1", "1,0.1,1,0,10,0"]);
        match read_trajectories(csv.as_bytes()) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_irregular_period() {
        let csv = csv_of(&["1,0.0,0,0,10,0,1", "1,0.1,1,0,10,0,1", "1,0.3,3,0,10,0,1"]);
        assert!(matches!(read_trajectories(csv.as_bytes()), Err(Error::Ingest { line: 4, .. })));
    }

    #[test]
    fn no_lane_changes_no_scenarios() {
        let mut rows = Vec::new();
        for v in 1..=2u64 {
            for k in 0..50 {
                rows.push(TrajectoryRecord {
                    vehicle_id: v,
                    t: k as f64 * 0.1,
                    x: k as f64 + v as f64 * 10.0,
                    y: 0.0,
                    vx: 10.0,
                    vy: 0.0,
                    lane_id: v as i64,
                });
            }
        }
        let out = extract_interaction_scenarios(&rows, &ExtractionParams::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn mapped_reader_derives_vy_and_sorts() {
        let raw = "Vehicle_ID,Frame_ID,Global_Time,Local_X,Local_Y,v_Vel,Lane_ID\n\
                   7,2,100,10,30,33,2\n\
                   7,1,0,0,0,33,2\n\
                   7,3,200,20,60,33,3\n";
        let recs = read_trajectories_mapped(raw.as_bytes(), &ColumnMapping::ngsim()).unwrap();
        assert_eq!(recs.len(), 3);
        assert!((recs[1].t - 0.1).abs() < 1e-12);
        assert!((recs[1].y - 3.048).abs() < 1e-12);
        assert!((recs[1].vy - 30.48).abs() < 1e-9);
        assert_eq!(recs[2].lane_id, 3);
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![TrajectoryRecord {
            vehicle_id: 3,
            t: 0.5,
            x: 1.25,
            y: -3.5,
            vx: 11.0,
            vy: 0.125,
            lane_id: 2,
        }];
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &recs).unwrap();
        assert_eq!(read_trajectories(buf.as_slice()).unwrap(), recs);
    }
}
