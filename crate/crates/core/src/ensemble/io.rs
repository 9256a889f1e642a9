//! CSV files for trajectories and moment traces.
//!
//! Trajectory: `t,x1_1..x{N}_{d},v1_1..v{N}_{d},u1_1..u{N}_{d}`, one row per
//! grid node, control cells empty on the last row.
//! Moments: `t,vbar_1..vbar_d,sigma2`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{ControlField, EnsembleState, MomentTrace, Trajectory};
use crate::{Error, Result};

fn agent_headers(prefix: &str, n: usize, d: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).flat_map(move |i| (1..=d).map(move |k| format!("{prefix}{i}_{k}")))
}

fn push_matrix(row: &mut Vec<String>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for k in 0..m.ncols() {
            row.push(m[(i, k)].to_string());
        }
    }
}

fn parse(cell: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("bad number {cell:?}: {e}")))
}

pub fn write_trajectory_csv(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let path = path.as_ref();
    let first = traj
        .states
        .first()
        .ok_or_else(|| Error::InvalidInput("empty trajectory".into()))?;
    let (n, d) = first.positions.shape();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(agent_headers("x", n, d))
        .chain(agent_headers("v", n, d))
        .chain(agent_headers("u", n, d))
        .collect();
    w.write_record(&header)?;
    for (h, s) in traj.states.iter().enumerate() {
        let mut row = Vec::with_capacity(header.len());
        row.push(s.time.to_string());
        push_matrix(&mut row, &s.positions);
        push_matrix(&mut row, &s.velocities);
        match traj.controls.get(h) {
            Some(u) => push_matrix(&mut row, &u.values),
            None => row.extend(std::iter::repeat(String::new()).take(n * d)),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a trajectory CSV. The accumulated cost is not stored in the file
/// and comes back as zero.
pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let per_block = (headers.len() - 1) / 3;
    if headers.len() != 1 + 3 * per_block || per_block == 0 {
        return Err(Error::Parse("trajectory header has wrong column count".into()));
    }
    // Recover (N, d) from the last position column name `x{N}_{d}`.
    let last_x = &headers[per_block];
    let (n, d) = last_x
        .trim_start_matches('x')
        .split_once('_')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| Error::Parse(format!("bad header column {last_x:?}")))?;
    if n * d != per_block {
        return Err(Error::Parse("header dimensions inconsistent".into()));
    }
    let mut traj = Trajectory::default();
    for rec in r.records() {
        let rec = rec?;
        let t = parse(&rec[0])?;
        let block = |offset: usize| -> Result<DMatrix<f64>> {
            let vals = (0..per_block)
                .map(|c| parse(&rec[offset + c]))
                .collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_row_slice(n, d, &vals))
        };
        let positions = block(1)?;
        let velocities = block(1 + per_block)?;
        traj.states.push(EnsembleState {
            positions,
            velocities,
            time: t,
        });
        if !rec[1 + 2 * per_block].trim().is_empty() {
            traj.controls.push(ControlField::new(block(1 + 2 * per_block)?));
        }
    }
    Ok(traj)
}

pub fn write_moments_csv(path: impl AsRef<Path>, moments: &MomentTrace) -> Result<()> {
    let path = path.as_ref();
    let d = moments.mean_velocity.first().map_or(0, |v| v.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=d).map(|k| format!("vbar_{k}")))
        .chain(std::iter::once("sigma2".to_string()))
        .collect();
    w.write_record(&header)?;
    for i in 0..moments.len() {
        let mut row = vec![moments.times[i].to_string()];
        row.extend(moments.mean_velocity[i].iter().map(|v| v.to_string()));
        row.push(moments.variance[i].to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_moments_csv(path: impl AsRef<Path>) -> Result<MomentTrace> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let d = r.headers()?.len().saturating_sub(2);
    let mut m = MomentTrace::default();
    for rec in r.records() {
        let rec = rec?;
        m.times.push(parse(&rec[0])?);
        let vbar = (0..d).map(|k| parse(&rec[1 + k])).collect::<Result<Vec<_>>>()?;
        m.mean_velocity.push(DVector::from_vec(vbar));
        m.variance.push(parse(&rec[1 + d])?);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    #[test]
    fn trajectory_and_moments_round_trip_exactly() {
        let s0 = EnsembleState::from_rows(
            &[[0.1, 0.7], [0.33, 0.2], [0.9, 0.45]],
            &[[0.3, -0.1], [1.0 / 3.0, 0.2], [-0.7, 0.05]],
        )
        .unwrap();
        let p = SimParams::new(0.1, 0.05, 0.01);
        let (traj, moments) = simulate(&s0, |s| Ok(ControlField::new(-0.3 * &s.velocities)), &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tp = dir.path().join("traj.csv");
        let mp = dir.path().join("moments.csv");
        write_trajectory_csv(&tp, &traj).unwrap();
        write_moments_csv(&mp, &moments).unwrap();

        let back = read_trajectory_csv(&tp).unwrap();
        assert_eq!(back.states, traj.states);
        assert_eq!(back.controls, traj.controls);
        assert_eq!(read_moments_csv(&mp).unwrap(), moments);

        let text = std::fs::read_to_string(&tp).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("t,x1_1,x1_2,x2_1"));
        assert!(header.ends_with("u3_1,u3_2"));
        assert!(text.lines().last().unwrap().ends_with(",,,,,"));
        let mtext = std::fs::read_to_string(&mp).unwrap();
        assert_eq!(mtext.lines().next().unwrap(), "t,vbar_1,vbar_2,sigma2");
    }
}
