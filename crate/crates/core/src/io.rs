//! CSV and JSON interchange.
//!
//! CSV floats use the shortest representation that parses back to the same
//! value; JSON floats are written with 17 significant digits.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gp::Dataset;

/// `x1,...,xd` column names.
pub fn x_headers(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("x{i}")).collect()
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut header = x_headers(data.dim());
    header.push("y".into());
    let rows = data
        .inputs()
        .iter()
        .zip(data.responses())
        .map(|(x, y)| {
            let mut r: Vec<String> = x.iter().map(|v| fmt_csv(*v)).collect();
            r.push(fmt_csv(*y));
            r
        });
    write_csv(path, &header, rows)
}

/// Reads a dataset whose last column is the response.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let (header, rows) = read_numeric_csv(path)?;
    if header.len() < 2 || header.last().map(String::as_str) != Some("y") {
        return Err(Error::InvalidInput(format!(
            "{}: expected header x1,...,xd,y",
            path.display()
        )));
    }
    let d = header.len() - 1;
    let mut out = Dataset::empty(d)?;
    for r in rows {
        out.push(r[..d].to_vec(), r[d])?;
    }
    Ok(out)
}

/// Reads a `x1,...,xd` point file.
pub fn read_points_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    Ok(read_numeric_csv(path)?.1)
}

pub fn write_points_csv(path: &Path, points: &[Vec<f64>]) -> Result<()> {
    let dim = points.first().map_or(0, Vec::len);
    write_csv(
        path,
        &x_headers(dim),
        points.iter().map(|p| p.iter().map(|v| fmt_csv(*v)).collect()),
    )
}

fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!("{}: row {}: bad number {s:?}", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(Error::DimensionMismatch {
                expected: header.len(),
                found: row.len(),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Shortest round-trip text for a float; non-finite values as `nan`/`inf`.
pub fn fmt_csv(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Serializes `value` with sorted object keys and 17-significant-digit floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    // Going through `Value` sorts keys (serde_json's map is a BTreeMap).
    let v = serde_json::to_value(value)?;
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedDigits::default());
    v.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("json output is utf-8"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = to_json_string(value)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

/// Pretty formatter that prints every f64 as `d.dddddddddddddddde±x`.
#[derive(Default)]
struct FixedDigits {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for FixedDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object_value(w)
    }
}
