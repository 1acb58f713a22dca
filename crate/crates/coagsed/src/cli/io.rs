//! CSV and JSON outputs. Every file starts with a JSON header: CSV files carry
//! it on a leading `# ` line, JSON files under the `header` key.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use crate::grid_fields::{Field2D, Grid2D};
use crate::{Error, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::Snapshot(format!("{}: {e}", path.display()))
}

/// Formats with 17 significant digits.
pub fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv<R, I>(path: &Path, header: &Value, columns: &[&str], rows: I) -> Result<()>
where
    R: IntoIterator<Item = String>,
    I: IntoIterator<Item = R>,
{
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(out, "# {header}").map_err(io_err(path))?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(columns).map_err(csv_err(path))?;
        for row in rows {
            w.write_record(row).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, header: &Value, report: &T) -> Result<()> {
    let doc = json!({ "header": header, "report": report });
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn grid_header(g: &Grid2D) -> Value {
    json!({
        "y_min": g.y_min(),
        "y_max": g.y_max(),
        "ny": g.ny(),
        "v_min": g.v[0],
        "q": g.q,
        "nv": g.nv(),
    })
}

/// Writes a field as rows `(a, v, value)` with `a` the spatial node.
pub fn write_field(path: &Path, header: &Value, field: &Field2D, columns: [&str; 3]) -> Result<()> {
    let g = &field.grid;
    let rows = (0..g.ny()).flat_map(|i| (0..g.nv()).map(move |j| vec![fmt(g.y[i]), fmt(g.v[j]), fmt(field.at(i, j))]));
    write_csv(path, header, &columns, rows)
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub header: Value,
    pub columns: [String; 3],
    pub field: Field2D,
}

impl Snapshot {
    pub fn number(&self, key: &str) -> Result<f64> {
        self.header
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Snapshot(format!("header lacks numeric {key:?}")))
    }
}

fn header_usize(g: &Value, key: &str) -> Result<usize> {
    g.get(key)
        .and_then(Value::as_u64)
        .map(|x| x as usize)
        .ok_or_else(|| Error::Snapshot(format!("grid header lacks integer {key:?}")))
}

fn header_f64(g: &Value, key: &str) -> Result<f64> {
    g.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::Snapshot(format!("grid header lacks number {key:?}")))
}

/// Reads a field written by [`write_field`], rebuilding the grid from the
/// header and checking that every row sits on it.
pub fn read_field(path: &Path) -> Result<Snapshot> {
    let mut reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io_err(path))?;
    let text = first
        .strip_prefix("# ")
        .ok_or_else(|| Error::Snapshot("missing JSON header line".into()))?;
    let header: Value =
        serde_json::from_str(text.trim_end()).map_err(|e| Error::Snapshot(format!("bad header: {e}")))?;
    let t = header
        .get("t")
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::Snapshot("header lacks time \"t\"".into()))?;
    let gh = header.get("grid").ok_or_else(|| Error::Snapshot("header lacks \"grid\"".into()))?;
    let grid = Grid2D::new(
        header_f64(gh, "y_min")?,
        header_f64(gh, "y_max")?,
        header_usize(gh, "ny")?,
        header_f64(gh, "v_min")?,
        header_usize(gh, "q")?,
        header_usize(gh, "nv")?,
    )
    .map_err(|e| Error::Snapshot(format!("grid header: {e}")))?;
    let mut csv_reader = csv::Reader::from_reader(reader);
    let cols = csv_reader.headers().map_err(csv_err(path))?.clone();
    if cols.len() != 3 {
        return Err(Error::Snapshot(format!("expected 3 columns, got {}", cols.len())));
    }
    let columns = [cols[0].to_string(), cols[1].to_string(), cols[2].to_string()];
    let (ny, nv) = (grid.ny(), grid.nv());
    let mut values = Vec::with_capacity(ny * nv);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
    for (n, rec) in csv_reader.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Snapshot(format!("row {}: column {} is not a number", n + 1, k + 1)))
        };
        let (y, v, h) = (parse(0)?, parse(1)?, parse(2)?);
        if n >= ny * nv {
            return Err(Error::Snapshot(format!("more than {} rows", ny * nv)));
        }
        let (i, j) = (n / nv, n % nv);
        if !close(y, grid.y[i]) || !close(v, grid.v[j]) {
            return Err(Error::Snapshot(format!("row {}: node ({y}, {v}) is off the header grid", n + 1)));
        }
        values.push(h);
    }
    if values.len() != ny * nv {
        return Err(Error::Snapshot(format!("expected {} rows, got {}", ny * nv, values.len())));
    }
    Ok(Snapshot {
        header,
        columns,
        field: Field2D {
            grid: Arc::new(grid),
            values,
            t,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Arc::new(Grid2D::new(-1.0, 1.0, 5, 0.25, 2, 6).unwrap());
        let mut f = Field2D::zeros(g.clone(), 0.3);
        for (k, x) in f.values.iter_mut().enumerate() {
            *x = (k as f64).sqrt() / 7.0;
        }
        let path = dir.path().join("f.csv");
        let header = json!({"t": f.t, "grid": grid_header(&g)});
        write_field(&path, &header, &f, ["y", "v", "H"]).unwrap();
        let s = read_field(&path).unwrap();
        assert_eq!(s.columns[2], "H");
        assert_eq!(s.field.values, f.values);
        assert_eq!(s.field.t, 0.3);
    }

    #[test]
    fn malformed_snapshots_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "y,v,H\n0,1,2\n").unwrap();
        assert!(matches!(read_field(&path), Err(Error::Snapshot(_))));
        let g = Grid2D::new(-1.0, 1.0, 2, 1.0, 1, 2).unwrap();
        let header = json!({"t": 0.0, "grid": grid_header(&g)});
        std::fs::write(&path, format!("# {header}\ny,v,H\n-1,1,0\n-1,2,0\n1,1,0\n")).unwrap();
        assert!(matches!(read_field(&path), Err(Error::Snapshot(_))));
        std::fs::write(&path, format!("# {header}\ny,v,H\n-1,1,0\n-1,2,0\n1,1,0\n0.5,2,0\n")).unwrap();
        assert!(matches!(read_field(&path), Err(Error::Snapshot(_))));
        std::fs::write(&path, format!("# {header}\ny,v,H\n-1,1,0\n-1,2,x\n1,1,0\n1,2,0\n")).unwrap();
        assert!(matches!(read_field(&path), Err(Error::Snapshot(_))));
    }
}
