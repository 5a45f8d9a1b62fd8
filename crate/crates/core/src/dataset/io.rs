//! Readers and writers for the on-disk formats.
//!
//! Floats are written with Rust's shortest round-trip formatting so a value
//! read back is bit-identical to the one written.

use chrono::NaiveDate;
use log::warn;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::encounter::ObservationRecord;
use super::spatial::{project_equirectangular, Point, SplitAssignment};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

const FEATURE_MAGIC: &[u8; 8] = b"PECLFEAT";
const FEATURE_VERSION: u32 = 1;

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case(name))
        .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
}

fn parse_f64(field: &str, line: u64, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(line, format!("{what}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{what}: non-finite value `{field}`")));
    }
    Ok(v)
}

/// Records parsed from observations.csv, plus any rows that failed to parse.
#[derive(Debug, Clone, Default)]
pub struct ObservationTable {
    pub records: Vec<ObservationRecord>,
    pub errors: Vec<(u64, String)>,
}

/// Reads `location_id,visit_date,species_id,count`.
///
/// Bad rows are collected with their line numbers. Unless `lenient`, any
/// bad row fails the read with the first error.
pub fn read_observations<R: Read>(
    reader: R,
    species_count: Option<usize>,
    lenient: bool,
) -> Result<ObservationTable> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = [
        header_index(&headers, "location_id")?,
        header_index(&headers, "visit_date")?,
        header_index(&headers, "species_id")?,
        header_index(&headers, "count")?,
    ];
    let mut table = ObservationTable::default();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                table.errors.push((line, e.to_string()));
                continue;
            }
        };
        let line = line_of(&row);
        match parse_observation(&row, cols, species_count) {
            Ok(r) => table.records.push(r),
            Err(msg) => table.errors.push((line, msg)),
        }
    }
    if let Some((line, message)) = table.errors.first() {
        if !lenient {
            return Err(parse_err(*line, message.clone()));
        }
        for (line, message) in &table.errors {
            warn!("observations line {line}: {message} (skipped)");
        }
    }
    if table.records.is_empty() {
        return Err(Error::EmptyInput("observations".into()));
    }
    Ok(table)
}

fn parse_observation(
    row: &csv::StringRecord,
    cols: [usize; 4],
    species_count: Option<usize>,
) -> std::result::Result<ObservationRecord, String> {
    let field = |i: usize, name: &str| row.get(cols[i]).ok_or_else(|| format!("missing {name}"));
    let location_id = field(0, "location_id")?;
    if location_id.is_empty() {
        return Err("empty location_id".into());
    }
    let date = field(1, "visit_date")?;
    let visit_date =
        NaiveDate::parse_from_str(date, "%Y-%m-%d").map_err(|e| format!("visit_date `{date}`: {e}"))?;
    let sp = field(2, "species_id")?;
    let species_id: usize = sp
        .parse()
        .map_err(|_| format!("species_id `{sp}` is not a non-negative integer"))?;
    if let Some(s) = species_count {
        if species_id >= s {
            return Err(format!("species_id {species_id} out of range for {s} species"));
        }
    }
    let c = field(3, "count")?;
    let count: u32 = c
        .parse()
        .map_err(|_| format!("count `{c}` is not a non-negative integer"))?;
    Ok(ObservationRecord {
        location_id: location_id.to_string(),
        visit_date,
        species_id,
        count,
    })
}

/// Reads `location_id,lon,lat` (projected about the mean position) or
/// `location_id,x_m,y_m` (already planar), chosen by header.
pub fn read_locations<R: Read>(reader: R) -> Result<Vec<(String, Point)>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let id = header_index(&headers, "location_id")?;
    let geographic = headers.iter().any(|h| h.eq_ignore_ascii_case("lon"));
    let (a, b) = if geographic {
        (header_index(&headers, "lon")?, header_index(&headers, "lat")?)
    } else {
        (header_index(&headers, "x_m")?, header_index(&headers, "y_m")?)
    };
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        let get = |i: usize| row.get(i).ok_or_else(|| parse_err(line, "short row"));
        ids.push(get(id)?.to_string());
        coords.push((
            parse_f64(get(a)?, line, "coordinate")?,
            parse_f64(get(b)?, line, "coordinate")?,
        ));
    }
    let points = if geographic {
        if let Some(bad) = coords
            .iter()
            .position(|&(lon, lat)| lat.abs() > 90.0 || lon.abs() > 180.0)
        {
            return Err(parse_err(bad as u64 + 2, "lon/lat out of range"));
        }
        project_equirectangular(&coords)
    } else {
        coords.into_iter().map(|(x, y)| Point::new(x, y)).collect()
    };
    Ok(ids.into_iter().zip(points).collect())
}

pub fn write_locations<W: Write>(out: W, locations: &[(String, Point)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["location_id", "x_m", "y_m"])?;
    for (id, p) in locations {
        w.write_record([id.clone(), p.x.to_string(), p.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of per-location values with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(ids: Vec<String>, columns: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::LengthMismatch {
                expected: ids.len(),
                actual: rows.len(),
            });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != columns.len()) {
            return Err(Error::LengthMismatch {
                expected: columns.len(),
                actual: bad.len(),
            });
        }
        Ok(Self { ids, columns, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String], what: &str) -> Result<Vec<Vec<f64>>> {
        let index = self.index();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.rows[i].clone())
                    .ok_or_else(|| Error::MissingLocation(id.clone(), what.to_string()))
            })
            .collect()
    }

    pub fn matrix(&self) -> Result<Matrix> {
        if self.rows.is_empty() {
            return Ok(Matrix::zeros(0, self.columns.len()));
        }
        Matrix::from_rows(&self.rows)
    }
}

fn read_table<R: Read>(reader: R, what: &str) -> Result<Table> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    if !headers
        .get(0)
        .is_some_and(|h| h.eq_ignore_ascii_case("location_id"))
    {
        return Err(parse_err(1, format!("{what}: first column must be location_id")));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        if row.len() != columns.len() + 1 {
            return Err(parse_err(
                line,
                format!(
                    "{what}: expected {} fields, found {}",
                    columns.len() + 1,
                    row.len()
                ),
            ));
        }
        ids.push(row[0].to_string());
        rows.push(
            row.iter()
                .skip(1)
                .map(|v| parse_f64(v, line, what))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Table::new(ids, columns, rows)
}

fn write_table<W: Write>(out: W, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("location_id").chain(table.columns.iter().map(String::as_str)))?;
    for (id, row) in table.ids.iter().zip(&table.rows) {
        w.write_record(std::iter::once(id.clone()).chain(row.iter().map(f64::to_string)))?;
    }
    w.flush()?;
    Ok(())
}

/// labels.csv: `location_id` then one probability column per species.
pub fn read_labels<R: Read>(reader: R) -> Result<Table> {
    let table = read_table(reader, "labels")?;
    for (i, row) in table.rows.iter().enumerate() {
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(parse_err(i as u64 + 2, format!("label {v} outside [0, 1]")));
        }
    }
    Ok(table)
}

pub fn write_labels<W: Write>(out: W, table: &Table) -> Result<()> {
    write_table(out, table)
}

/// Default species column names.
pub fn species_names(count: usize) -> Vec<String> {
    (0..count).map(|s| format!("species_{s}")).collect()
}

pub fn read_features_csv<R: Read>(reader: R) -> Result<Table> {
    read_table(reader, "features")
}

pub fn write_features_csv<W: Write>(out: W, table: &Table) -> Result<()> {
    write_table(out, table)
}

/// Binary layout: magic `PECLFEAT`, u32 version, u64 rows, u32 dims, then per
/// row a u32 id length, the UTF-8 id and `dims` little-endian f64 values.
pub fn write_features_bin<W: Write>(mut out: W, table: &Table) -> Result<()> {
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes())?;
    out.write_all(&(table.len() as u64).to_le_bytes())?;
    out.write_all(&(table.columns.len() as u32).to_le_bytes())?;
    for (id, row) in table.ids.iter().zip(&table.rows) {
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_features_bin<R: Read>(mut input: R) -> Result<Table> {
    let bad = |m: &str| parse_err(0, format!("features.bin: {m}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FEATURE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    input.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    input.read_exact(&mut u32buf)?;
    let d = u32::from_le_bytes(u32buf) as usize;
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    let mut rows = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        input.read_exact(&mut u32buf)?;
        let mut id = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        input.read_exact(&mut id)?;
        ids.push(String::from_utf8(id).map_err(|_| bad("id is not UTF-8"))?);
        let mut row = Vec::with_capacity(d);
        for _ in 0..d {
            input.read_exact(&mut u64buf)?;
            row.push(f64::from_le_bytes(u64buf));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature value"));
        }
        rows.push(row);
    }
    let columns = (0..d).map(|j| format!("f{j}")).collect();
    Table::new(ids, columns, rows)
}

/// Reads features from `.bin` or CSV, by extension.
pub fn read_features(path: &Path) -> Result<Table> {
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "bin") {
        read_features_bin(file)
    } else {
        read_features_csv(file)
    }
}

pub fn feature_names(dim: usize) -> Vec<String> {
    (0..dim).map(|j| format!("f{j}")).collect()
}

pub fn write_splits<W: Write>(mut out: W, splits: &SplitAssignment) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, splits)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_splits<R: Read>(reader: R) -> Result<SplitAssignment> {
    Ok(serde_json::from_reader(reader)?)
}

/// Opens `path` for buffered reading.
pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

/// Creates `path` (and its parent directory) for buffered writing.
pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}
