//! Small CSV tables with a fixed header row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::LandmarkSet;

pub fn write_table(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rows of the table, header checked and stripped.
pub fn read_table(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().unwrap_or("");
    if first.trim() != header {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            msg: format!("expected header '{header}', found '{first}'"),
        });
    }
    let ncols = header.split(',').count();
    lines
        .map(|l| {
            let cells: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
            if cells.len() != ncols {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    msg: format!("row '{l}' has {} columns, expected {ncols}", cells.len()),
                });
            }
            Ok(cells)
        })
        .collect()
}

pub fn parse_cell<U: std::str::FromStr>(path: &Path, cell: &str) -> Result<U> {
    cell.parse().map_err(|_| Error::Csv {
        path: path.to_path_buf(),
        msg: format!("cannot parse '{cell}'"),
    })
}

pub const LANDMARK_HEADER: &str = "id,x_mm,y_mm,z_mm";

pub fn write_landmarks(lm: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let rows = lm.iter().map(|(id, p)| {
        let mut s = String::new();
        write!(s, "{id},{:?},{:?},{:?}", p[0], p[1], p[2]).unwrap();
        s
    });
    write_table(path.as_ref(), LANDMARK_HEADER, rows)
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let rows = read_table(path, LANDMARK_HEADER)?;
    let mut ids = Vec::with_capacity(rows.len());
    let mut points = Vec::with_capacity(rows.len());
    for r in rows {
        ids.push(parse_cell(path, &r[0])?);
        points.push([
            parse_cell(path, &r[1])?,
            parse_cell(path, &r[2])?,
            parse_cell(path, &r[3])?,
        ]);
    }
    LandmarkSet::new(ids, points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmarks_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.csv");
        let lm = LandmarkSet::new(vec![3, 1], vec![[0.1, 2.0 / 3.0, 1e-17], [4.0, 5.5, 6.25]]).unwrap();
        write_landmarks(&lm, &p).unwrap();
        assert_eq!(read_landmarks(&p).unwrap(), lm);
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.csv");
        fs::write(&p, "id,x,y,z\n1,0,0,0\n").unwrap();
        assert!(matches!(read_landmarks(&p), Err(Error::Csv { .. })));
    }
}
