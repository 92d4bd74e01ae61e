//! `shot_id,t,x1,...,xK,y` CSV files, one row per time step, rows grouped by
//! shot and time-ordered within a shot.

use super::ShotRecord;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

fn parse_cell(cell: &str, line: usize, column: &str) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("column {column}: {cell:?} is not a number"),
    })
}

fn check_header(header: &csv::StringRecord) -> Result<usize> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let bad = || Error::Parse {
        line: 1,
        message: format!("expected header shot_id,t,x1,...,xK,y; got {}", cols.join(",")),
    };
    if cols.len() < 4 || cols[0] != "shot_id" || cols[1] != "t" || cols[cols.len() - 1] != "y" {
        return Err(bad());
    }
    let channels = cols.len() - 3;
    for (k, name) in cols[2..2 + channels].iter().enumerate() {
        if *name != format!("x{}", k + 1) {
            return Err(bad());
        }
    }
    Ok(channels)
}

/// Missing cells load as NaN; [`super::preprocess`] drops those shots.
pub fn load_shots_csv(path: &Path) -> Result<Vec<ShotRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse { line: 1, message: format!("{other:?}") },
        })?;
    let header = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    let channels = check_header(&header)?;
    let width = channels + 3;

    let mut shots = Vec::new();
    let mut current: Option<(i64, Vec<f64>, Vec<f64>)> = None;
    let mut last_t = f64::NEG_INFINITY;
    let mut seen: std::collections::HashSet<i64> = std::collections::HashSet::new();

    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != width {
            return Err(Error::Parse { line, message: format!("expected {width} fields, found {}", row.len()) });
        }
        let shot_id: i64 = row[0].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("shot_id {:?} is not an integer", &row[0]),
        })?;
        let t = parse_cell(&row[1], line, "t")?;
        let mut values = Vec::with_capacity(channels);
        for k in 0..channels {
            values.push(parse_cell(&row[2 + k], line, &format!("x{}", k + 1))?);
        }
        let y = parse_cell(&row[width - 1], line, "y")?;

        let same_shot = matches!(current, Some((id, ..)) if id == shot_id);
        if !same_shot {
            if let Some((id, inputs, target)) = current.take() {
                shots.push(ShotRecord::from_time_major(id, channels, inputs, target)?);
            }
            if !seen.insert(shot_id) {
                return Err(Error::Parse { line, message: format!("rows for shot {shot_id} are not contiguous") });
            }
            current = Some((shot_id, Vec::new(), Vec::new()));
            last_t = f64::NEG_INFINITY;
        }
        if !(t > last_t) {
            return Err(Error::Parse { line, message: format!("time {t} does not increase within shot {shot_id}") });
        }
        last_t = t;
        let (_, inputs, target) = current.as_mut().unwrap();
        inputs.extend(values);
        target.push(y);
    }
    if let Some((id, inputs, target)) = current {
        shots.push(ShotRecord::from_time_major(id, channels, inputs, target)?);
    }
    Ok(shots)
}

/// Writes shots in the loader's schema. `t` is the step index; values use
/// shortest round-trip formatting so a reload is exact.
pub fn write_shots_csv(path: &Path, shots: &[ShotRecord], channels: usize) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = String::from("shot_id,t");
    for k in 1..=channels {
        header.push_str(&format!(",x{k}"));
    }
    header.push_str(",y\n");
    out.write_all(header.as_bytes())?;
    let mut line = String::new();
    for shot in shots {
        if shot.channels() != channels {
            return Err(Error::Argument(format!("shot {} has {} channels, expected {channels}", shot.shot_id, shot.channels())));
        }
        for t in 0..shot.len() {
            line.clear();
            line.push_str(&format!("{},{t}", shot.shot_id));
            for c in 0..channels {
                line.push_str(&format!(",{}", shot.input(t, c)));
            }
            line.push_str(&format!(",{}\n", shot.target()[t]));
            out.write_all(line.as_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}
