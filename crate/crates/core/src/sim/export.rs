use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{SimTrace, StepRecord};
use crate::error::{Error, Result};
use crate::interaction::VehicleState;

/// Header of the trace CSV, in order.
pub const TRACE_COLUMNS: [&str; 13] = [
    "t", "lkv_x", "lkv_y", "lkv_vx", "lkv_vy", "lcv_x", "lcv_y", "lcv_vx", "lcv_vy", "a_lkv_x", "a_lcv_x",
    "a_lcv_y", "collision",
];

#[derive(Serialize, Deserialize)]
struct Row {
    t: f64,
    lkv_x: f64,
    lkv_y: f64,
    lkv_vx: f64,
    lkv_vy: f64,
    lcv_x: f64,
    lcv_y: f64,
    lcv_vx: f64,
    lcv_vy: f64,
    a_lkv_x: f64,
    a_lcv_x: f64,
    a_lcv_y: f64,
    collision: u8,
}

/// One row per step plus a final row with the end state and zero commands.
pub fn write_trace_csv<W: Write>(w: W, trace: &SimTrace) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let row = |t: f64, lkv: &VehicleState, lcv: &VehicleState, a: (f64, f64, f64), c: bool| Row {
        t,
        lkv_x: lkv.x,
        lkv_y: lkv.y,
        lkv_vx: lkv.vx,
        lkv_vy: lkv.vy,
        lcv_x: lcv.x,
        lcv_y: lcv.y,
        lcv_vx: lcv.vx,
        lcv_vy: lcv.vy,
        a_lkv_x: a.0,
        a_lcv_x: a.1,
        a_lcv_y: a.2,
        collision: c as u8,
    };
    for r in &trace.records {
        out.serialize(row(r.t, &r.lkv, &r.lcv, (r.a_lkv_x, r.a_lcv_x, r.a_lcv_y), r.collision))?;
    }
    let t_end = trace.records.last().map_or(0.0, |r| r.t + trace.dt_sim);
    out.serialize(row(t_end, &trace.final_lkv, &trace.final_lcv, (0.0, 0.0, 0.0), trace.collision))?;
    out.flush()?;
    Ok(())
}

/// Step records of a trace CSV, final row included.
pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(TRACE_COLUMNS.iter().copied()) {
        return Err(Error::Ingest {
            line: 1,
            reason: format!("expected header {}", TRACE_COLUMNS.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: Row = row?;
        out.push(StepRecord {
            t: r.t,
            lkv: VehicleState::new(r.lkv_x, r.lkv_y, r.lkv_vx, r.lkv_vy),
            lcv: VehicleState::new(r.lcv_x, r.lcv_y, r.lcv_vx, r.lcv_vy),
            a_lkv_x: r.a_lkv_x,
            a_lcv_x: r.a_lcv_x,
            a_lcv_y: r.a_lcv_y,
            obs_lkv: Default::default(),
            obs_lcv: Default::default(),
            collision: r.collision != 0,
        });
    }
    Ok(out)
}
