//! Report and bounds files.

use std::path::Path;

use serde::Serialize;

use crate::mdpc::BoundRow;
use crate::{Error, Result};

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `t,lower,upper,sigma2`.
pub fn write_bounds_csv(path: impl AsRef<Path>, rows: &[BoundRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    w.write_record(["t", "lower", "upper", "sigma2"])?;
    for r in rows {
        w.write_record([r.t, r.lower, r.upper, r.sigma2].map(|x| x.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bounds_csv(path: impl AsRef<Path>) -> Result<Vec<BoundRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| Error::Parse(format!("{c:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 4 {
            return Err(Error::Parse("bounds row must have 4 columns".into()));
        }
        out.push(BoundRow {
            t: v[0],
            lower: v[1],
            upper: v[2],
            sigma2: v[3],
        });
    }
    Ok(out)
}

/// Column-per-series CSV with a leading time column.
pub fn write_series_csv(path: impl AsRef<Path>, times: &[f64], series: &[(String, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    if series.iter().any(|(_, s)| s.len() != times.len()) {
        return Err(Error::DimensionMismatch("series lengths differ from the time grid".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let header: Vec<&str> = std::iter::once("t").chain(series.iter().map(|(n, _)| n.as_str())).collect();
    w.write_record(&header)?;
    for (i, t) in times.iter().enumerate() {
        let row: Vec<String> = std::iter::once(t.to_string())
            .chain(series.iter().map(|(_, s)| s[i].to_string()))
            .collect();
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_round_trip() {
        let rows = vec![
            BoundRow { t: 0.0, lower: 0.5, upper: 0.5, sigma2: 0.5 },
            BoundRow { t: 0.01, lower: 1.0 / 3.0, upper: 0.7000000000000001, sigma2: 0.41 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_bounds_csv(&p, &rows).unwrap();
        assert_eq!(read_bounds_csv(&p).unwrap(), rows);
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("t,lower,upper,sigma2\n"));
    }

    #[test]
    fn series_lengths_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let bad = vec![("a".to_string(), vec![1.0])];
        assert!(write_series_csv(&p, &[0.0, 1.0], &bad).is_err());
        let good = vec![("a".to_string(), vec![1.0, 2.0]), ("b".to_string(), vec![3.0, 4.0])];
        write_series_csv(&p, &[0.0, 1.0], &good).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "t,a,b\n0,1,3\n1,2,4\n");
    }
}
