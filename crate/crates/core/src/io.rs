//! CSV formats for traces, paths and reports.
//!
//! Floats are written in scientific notation with 17 significant digits, so
//! every value reads back bit-identically.

use std::io::{Read, Write};

use thiserror::Error;

use crate::harness::Cell;
use crate::measure::{Atom, AtomicMeasure, FluidPath};
use crate::simulator::{Event, EventKind, SeriesPoint, Snapshot};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
}

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

pub const MEASURE_HEADER: [&str; 3] = ["time", "location", "mass"];
pub const EVENTS_HEADER: [&str; 4] = ["time", "kind", "job_id", "requirement"];
pub const SERIES_HEADER: [&str; 3] = ["time", "z", "workload"];
pub const WORKLOAD_HEADER: [&str; 2] = ["time", "workload"];
pub const REPORT_HEADER: [&str; 6] = [
    "r",
    "replication",
    "checkpoint",
    "bl_distance",
    "workload_abs_err",
    "z_abs_err",
];

fn writer<W: Write>(out: W, header: &[&str]) -> Result<csv::Writer<W>, IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

/// Rows `time,location,mass` for each `(time, measure)`.
pub fn write_measures<'a, W: Write>(
    out: W,
    measures: impl IntoIterator<Item = (f64, &'a AtomicMeasure)>,
) -> Result<(), IoError> {
    let mut w = writer(out, &MEASURE_HEADER)?;
    for (t, m) in measures {
        let t = fmt_f64(t);
        for a in m.atoms() {
            w.write_record([t.as_str(), &fmt_f64(a.location), &fmt_f64(a.mass)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_path<W: Write>(out: W, path: &FluidPath) -> Result<(), IoError> {
    write_measures(out, path.times().zip(path.measures()))
}

pub fn write_snapshots<W: Write>(out: W, snapshots: &[Snapshot]) -> Result<(), IoError> {
    write_measures(out, snapshots.iter().map(|s| (s.time, &s.measure)))
}

pub fn write_events<W: Write>(out: W, events: &[Event]) -> Result<(), IoError> {
    let mut w = writer(out, &EVENTS_HEADER)?;
    for e in events {
        w.write_record([
            fmt_f64(e.time),
            e.kind.as_str().to_string(),
            e.job_id.to_string(),
            fmt_f64(e.requirement),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_series<W: Write>(out: W, series: &[SeriesPoint]) -> Result<(), IoError> {
    let mut w = writer(out, &SERIES_HEADER)?;
    for p in series {
        w.write_record([fmt_f64(p.time), p.jobs.to_string(), fmt_f64(p.workload)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_workload<W: Write>(out: W, series: &[(f64, f64)]) -> Result<(), IoError> {
    let mut w = writer(out, &WORKLOAD_HEADER)?;
    for &(t, x) in series {
        w.write_record([fmt_f64(t), fmt_f64(x)])?;
    }
    w.flush()?;
    Ok(())
}

/// Failed cells are written with `NaN` values.
pub fn write_report<W: Write>(out: W, cells: &[Cell]) -> Result<(), IoError> {
    let mut w = writer(out, &REPORT_HEADER)?;
    for c in cells {
        w.write_record([
            c.r.to_string(),
            c.replication.to_string(),
            fmt_f64(c.checkpoint),
            fmt_f64(c.bl_distance),
            fmt_f64(c.workload_abs_err),
            fmt_f64(c.z_abs_err),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn reader<R: Read>(input: R, expected: &[&[&str]]) -> Result<(csv::Reader<R>, usize), IoError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let which = expected
        .iter()
        .position(|h| h.iter().copied().eq(header.iter().map(String::as_str)))
        .ok_or_else(|| IoError::Parse {
            line: 1,
            message: format!("unexpected header {}", header.join(",")),
        })?;
    Ok((r, which))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T, IoError> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(i).ok_or_else(|| IoError::Parse {
        line,
        message: format!("missing column {}", i + 1),
    })?;
    raw.parse().map_err(|_| IoError::Parse {
        line,
        message: format!("cannot parse {raw:?}"),
    })
}

/// Reads `time,location,mass` or `location,mass` rows, grouped by time in file
/// order. Rows without a time column form a single group with time `None`.
pub fn read_measures<R: Read>(input: R) -> Result<Vec<(Option<f64>, AtomicMeasure)>, IoError> {
    let (mut r, which) = reader(input, &[&MEASURE_HEADER, &["location", "mass"]])?;
    let timed = which == 0;
    let mut groups: Vec<(Option<f64>, Vec<Atom>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let (t, off) = if timed {
            (Some(field::<f64>(&rec, 0)?), 1)
        } else {
            (None, 0)
        };
        let atom = Atom::new(field(&rec, off)?, field(&rec, off + 1)?);
        match groups.last_mut() {
            Some((gt, atoms)) if *gt == t || (t.is_none()) => atoms.push(atom),
            _ => groups.push((t, vec![atom])),
        }
        if !(atom.location >= 0.0
            && atom.location.is_finite()
            && atom.mass >= 0.0
            && atom.mass.is_finite())
        {
            return Err(IoError::Parse {
                line,
                message: format!("invalid atom ({}, {})", atom.location, atom.mass),
            });
        }
    }
    groups
        .into_iter()
        .map(|(t, atoms)| {
            AtomicMeasure::new(atoms)
                .map(|m| (t, m))
                .map_err(|e| IoError::Parse {
                    line: 0,
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Reads a path written by [`write_path`]; the grid step is inferred.
pub fn read_path<R: Read>(input: R) -> Result<FluidPath, IoError> {
    let groups = read_measures(input)?;
    let times: Vec<f64> = groups.iter().map(|(t, _)| t.unwrap_or(0.0)).collect();
    if groups.is_empty() {
        return Err(IoError::Parse {
            line: 0,
            message: "empty path".into(),
        });
    }
    let step = if times.len() > 1 {
        times[1] - times[0]
    } else {
        1.0
    };
    Ok(FluidPath::new(
        times[0],
        step,
        groups.into_iter().map(|(_, m)| m).collect(),
    ))
}

pub fn read_events<R: Read>(input: R) -> Result<Vec<Event>, IoError> {
    let (mut r, _) = reader(input, &[&EVENTS_HEADER])?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let kind = match rec.get(1) {
                Some("arrival") => EventKind::Arrival,
                Some("departure") => EventKind::Departure,
                other => {
                    return Err(IoError::Parse {
                        line: rec.position().map_or(0, |p| p.line()),
                        message: format!("unknown event kind {other:?}"),
                    })
                }
            };
            Ok(Event {
                time: field(&rec, 0)?,
                kind,
                job_id: field(&rec, 2)?,
                requirement: field(&rec, 3)?,
            })
        })
        .collect()
}

pub fn read_series<R: Read>(input: R) -> Result<Vec<SeriesPoint>, IoError> {
    let (mut r, _) = reader(input, &[&SERIES_HEADER])?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(SeriesPoint {
                time: field(&rec, 0)?,
                jobs: field(&rec, 1)?,
                workload: field(&rec, 2)?,
            })
        })
        .collect()
}

pub fn read_workload<R: Read>(input: R) -> Result<Vec<(f64, f64)>, IoError> {
    let (mut r, _) = reader(input, &[&WORKLOAD_HEADER])?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok((field(&rec, 0)?, field(&rec, 1)?))
        })
        .collect()
}

/// Cells without error text; `NaN` values mark failed cells.
pub fn read_report<R: Read>(input: R) -> Result<Vec<Cell>, IoError> {
    let (mut r, _) = reader(input, &[&REPORT_HEADER])?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(Cell {
                r: field(&rec, 0)?,
                replication: field(&rec, 1)?,
                checkpoint: field(&rec, 2)?,
                bl_distance: field(&rec, 3)?,
                workload_abs_err: field(&rec, 4)?,
                z_abs_err: field(&rec, 5)?,
                error: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [
            0.1,
            1.0 / 3.0,
            2.0f64.sqrt() * 1e-300,
            6.02214076e23,
            0.0,
            -1.5,
        ] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn measures_round_trip() {
        let a = AtomicMeasure::from_pairs(&[(0.1, 1.0 / 3.0), (2.5, 0.7)]).unwrap();
        let b = AtomicMeasure::dirac(1.0 / 7.0, 2.0).unwrap();
        let mut buf = Vec::new();
        write_measures(&mut buf, [(0.0, &a), (0.5, &b)]).unwrap();
        let back = read_measures(buf.as_slice()).unwrap();
        assert_eq!(back, vec![(Some(0.0), a.clone()), (Some(0.5), b)]);

        let untimed = read_measures("location,mass\n0.1,0.5\n2,1\n".as_bytes()).unwrap();
        assert_eq!(untimed.len(), 1);
        assert_eq!(untimed[0].0, None);
        assert_eq!(untimed[0].1.total_mass(), 1.5);
    }

    #[test]
    fn path_round_trip() {
        let m = AtomicMeasure::from_pairs(&[(0.3, 0.25)]).unwrap();
        let path = FluidPath::constant(0.0, 0.1, 3, &m);
        let mut buf = Vec::new();
        write_path(&mut buf, &path).unwrap();
        let back = read_path(buf.as_slice()).unwrap();
        assert_eq!(back.measures(), path.measures());
        assert_eq!(back.len(), 4);
    }

    #[test]
    fn events_and_series_round_trip() {
        let events = vec![
            Event {
                time: 0.25,
                kind: EventKind::Arrival,
                job_id: 3,
                requirement: 1.0 / 3.0,
            },
            Event {
                time: 1.75,
                kind: EventKind::Departure,
                job_id: 0,
                requirement: 2.0,
            },
        ];
        let mut buf = Vec::new();
        write_events(&mut buf, &events).unwrap();
        assert_eq!(read_events(buf.as_slice()).unwrap(), events);

        let series = vec![SeriesPoint {
            time: 0.1,
            jobs: 4,
            workload: 0.3,
        }];
        let mut buf = Vec::new();
        write_series(&mut buf, &series).unwrap();
        assert_eq!(read_series(buf.as_slice()).unwrap(), series);
    }

    #[test]
    fn bad_input_reports_line() {
        let err = read_workload("time,workload\n0,1\n0.1,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 3, .. }), "{err}");
        assert!(read_workload("t,w\n".as_bytes()).is_err());
        assert!(read_measures("location,mass\n-1,1\n".as_bytes()).is_err());
    }
}
