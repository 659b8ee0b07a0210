//! Output writers. Everything that feeds the reproducibility checks is
//! emitted in a deterministic order with fixed formatting; wall-clock
//! timings stay out of those files and go to the human-readable table
//! instead.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use afi_core::field::ScalarField;
use afi_core::{Vec3, WorkspaceGrid};
use serde::Serialize;

use crate::episode::EpisodeRecord;

/// Binary field dump: origin as three little-endian f64, voxel size as
/// f64, resolution as u32, then resolution^3 f32 values in x-fastest
/// order.
pub fn write_field_binary(field: &ScalarField, path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let grid = field.grid();
    let o = grid.origin();
    for v in [o.x, o.y, o.z, grid.voxel_size()] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(grid.resolution() as u32).to_le_bytes())?;
    for &v in field.values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()
}

pub fn read_field_binary(path: &Path) -> std::io::Result<(WorkspaceGrid, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut f64buf = [0u8; 8];
    let mut read_f64 = |r: &mut BufReader<File>| -> std::io::Result<f64> {
        r.read_exact(&mut f64buf)?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let ox = read_f64(&mut r)?;
    let oy = read_f64(&mut r)?;
    let oz = read_f64(&mut r)?;
    let voxel = read_f64(&mut r)?;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let resolution = u32::from_le_bytes(u32buf) as usize;
    let grid = WorkspaceGrid::new(Vec3::new(ox, oy, oz), voxel, resolution)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{e:?}")))?;
    let mut values = Vec::with_capacity(grid.len());
    let mut f32buf = [0u8; 4];
    for _ in 0..grid.len() {
        r.read_exact(&mut f32buf)?;
        values.push(f32::from_le_bytes(f32buf));
    }
    Ok((grid, values))
}

/// One z-slice as CSV rows "ix,iy,value".
pub fn write_slice_csv(field: &ScalarField, k: usize, path: &Path) -> std::io::Result<()> {
    let grid = field.grid();
    assert!(k < grid.resolution(), "slice index out of range");
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ix,iy,value")?;
    for iy in 0..grid.resolution() {
        for ix in 0..grid.resolution() {
            let v = field.values()[grid.flat(ix, iy, k)];
            writeln!(w, "{ix},{iy},{v:.9}")?;
        }
    }
    w.flush()
}

/// Per-step cost trace of one episode as CSV, for plotting.
pub fn write_cost_trace_csv(record: &EpisodeRecord, path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,t,stage,cost,x,y,z")?;
    for s in &record.step_log {
        writeln!(
            w,
            "{},{:.4},{},{:.6},{:.6},{:.6},{:.6}",
            s.step, s.t, s.stage, s.cost, s.eef.x, s.eef.y, s.eef.z
        )?;
    }
    w.flush()
}

/// Append-style JSONL writer: one serialized record per line.
pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn read_episode_jsonl(path: &Path) -> std::io::Result<Vec<EpisodeRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(rec);
    }
    Ok(out)
}

/// One suite cell after folding its episodes.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellResult {
    pub task: String,
    pub mode: String,
    pub condition: String,
    pub successes: u64,
    pub trials: u64,
}

/// Deterministic CSV: fixed header, rows sorted by (task, mode, condition),
/// fixed-precision rate. No timings, no timestamps.
pub fn suite_csv(cells: &[CellResult]) -> String {
    let mut rows = cells.to_vec();
    rows.sort();
    let mut out = String::from("task,mode,condition,successes,trials,rate\n");
    for c in &rows {
        let rate = if c.trials == 0 { 0.0 } else { c.successes as f64 / c.trials as f64 };
        out.push_str(&format!(
            "{},{},{},{},{},{:.4}\n",
            c.task, c.mode, c.condition, c.successes, c.trials, rate
        ));
    }
    out
}

/// Fold per-episode records into cells keyed by (task, mode, condition).
/// The fold is order-insensitive: records are grouped and counted, never
/// accumulated in arrival order.
pub fn fold_records(records: &[EpisodeRecord]) -> Vec<CellResult> {
    let mut cells: Vec<CellResult> = Vec::new();
    for r in records {
        let found = cells.iter_mut().find(|c| {
            c.task == r.task && c.mode == r.mode && c.condition == r.condition
        });
        let cell = match found {
            Some(c) => c,
            None => {
                cells.push(CellResult {
                    task: r.task.clone(),
                    mode: r.mode.clone(),
                    condition: r.condition.clone(),
                    successes: 0,
                    trials: 0,
                });
                cells.last_mut().unwrap()
            }
        };
        cell.trials += 1;
        cell.successes += u64::from(r.success);
    }
    cells.sort();
    cells
}

pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Human-readable summary: the cell table plus wall-clock timing
/// percentiles for rebuilds and intervention phases.
pub fn suite_table(cells: &[CellResult], records: &[EpisodeRecord]) -> String {
    let mut rows = cells.to_vec();
    rows.sort();
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:<16} {:<18} {:>9} {:>7} {:>7}\n",
        "task", "mode", "condition", "successes", "trials", "rate"
    ));
    for c in &rows {
        let rate = if c.trials == 0 { 0.0 } else { c.successes as f64 / c.trials as f64 };
        out.push_str(&format!(
            "{:<14} {:<16} {:<18} {:>9} {:>7} {:>7.4}\n",
            c.task, c.mode, c.condition, c.successes, c.trials, rate
        ));
    }

    let mut rebuilds: Vec<u64> = records.iter().flat_map(|r| r.rebuild_us.iter().copied()).collect();
    let mut rollback: Vec<u64> = Vec::new();
    let mut travel: Vec<u64> = Vec::new();
    let mut scoring: Vec<u64> = Vec::new();
    for r in records {
        for i in &r.interventions {
            rollback.push(i.rollback_us);
            travel.push(i.travel_us);
            scoring.push(i.scoring_us);
        }
    }
    out.push('\n');
    out.push_str("wall-clock timings (us)      p50      p90      p99        n\n");
    for (label, series) in [
        ("field rebuild", &mut rebuilds),
        ("intervention rollback", &mut rollback),
        ("intervention travel", &mut travel),
        ("intervention scoring", &mut scoring),
    ] {
        series.sort_unstable();
        out.push_str(&format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8}\n",
            label,
            percentile(series, 0.5),
            percentile(series, 0.9),
            percentile(series, 0.99),
            series.len()
        ));
    }
    out
}
