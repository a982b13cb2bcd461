use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::record::{Dataset, Layout, Segment, UserRecord};
use crate::error::{Error, Result};

/// Infers the column layout from a header row, requiring canonical column order.
pub fn layout_from_header(header: &[&str]) -> std::result::Result<Layout, String> {
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let layout = Layout {
        n_dense: count("dense_"),
        n_categorical: count("cat_"),
        n_sequence: count("seq_"),
    };
    let expected = layout.header();
    if expected.len() != header.len() || expected.iter().zip(header).any(|(a, b)| a != b) {
        return Err(format!(
            "header does not match expected columns `{}`",
            expected.join(",")
        ));
    }
    Ok(layout)
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(dataset, file).map_err(|e| match e {
        Error::Serde(msg) => Error::Serde(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_csv_to<W: Write>(dataset: &Dataset, sink: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink);
    let to_err = |e: csv::Error| Error::Serde(e.to_string());
    writer.write_record(dataset.layout.header()).map_err(to_err)?;
    let mut row: Vec<String> = Vec::with_capacity(dataset.layout.num_columns());
    for rec in &dataset.records {
        row.clear();
        row.push(rec.user_id.to_string());
        row.push(rec.day.to_string());
        row.extend(rec.dense.iter().map(f64::to_string));
        row.extend(rec.categorical.iter().map(u32::to_string));
        row.extend(
            rec.sequences
                .iter()
                .map(|seq| seq.iter().map(u32::to_string).collect::<Vec<_>>().join("|")),
        );
        row.push(rec.ltv.to_string());
        row.push(u8::from(rec.purchased).to_string());
        row.push(u8::from(rec.whale).to_string());
        row.push(rec.gwptr.to_string());
        row.push(rec.segment.map(|s| s.code().to_string()).unwrap_or_default());
        writer.write_record(&row).map_err(to_err)?;
    }
    writer.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

/// Reads a dataset; when `expected` is given the header must match it.
pub fn read_csv(path: &Path, expected: Option<Layout>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file, path, expected)
}

pub fn read_csv_from<R: Read>(source: R, path: &Path, expected: Option<Layout>) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let layout = layout_from_header(&names).map_err(|m| parse_err(1, m))?;
    if let Some(want) = expected {
        if want != layout {
            return Err(Error::SchemaMismatch(format!(
                "{}: file has {:?}, expected {:?}",
                path.display(),
                layout,
                want
            )));
        }
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != layout.num_columns() {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", layout.num_columns(), row.len()),
            ));
        }
        let rec = parse_row(&row, &layout, &header).map_err(|m| parse_err(line, m))?;
        rec.check_intrinsic().map_err(|e| parse_err(line, e.to_string()))?;
        records.push(rec);
    }
    Ok(Dataset::new(layout, records))
}

fn parse_row(
    row: &csv::StringRecord,
    layout: &Layout,
    header: &csv::StringRecord,
) -> std::result::Result<UserRecord, String> {
    let field = |i: usize| -> (&str, &str) { (&header[i], row[i].trim()) };
    let num = |i: usize| -> std::result::Result<f64, String> {
        let (name, raw) = field(i);
        let v: f64 = raw
            .parse()
            .map_err(|_| format!("column `{name}`: cannot parse `{raw}` as a number"))?;
        if !v.is_finite() {
            return Err(format!("column `{name}`: non-finite value `{raw}`"));
        }
        Ok(v)
    };
    let int = |i: usize| -> std::result::Result<u64, String> {
        let (name, raw) = field(i);
        raw.parse()
            .map_err(|_| format!("column `{name}`: cannot parse `{raw}` as an integer"))
    };
    let flag = |i: usize| -> std::result::Result<bool, String> {
        match field(i) {
            (_, "0") => Ok(false),
            (_, "1") => Ok(true),
            (name, raw) => Err(format!("column `{name}`: expected 0 or 1, got `{raw}`")),
        }
    };

    let mut col = 0;
    let user_id = int(col)?;
    col += 1;
    let day = u32::try_from(int(col)?).map_err(|_| "column `day` out of range".to_string())?;
    col += 1;
    let mut dense = Vec::with_capacity(layout.n_dense);
    for _ in 0..layout.n_dense {
        dense.push(num(col)?);
        col += 1;
    }
    let mut categorical = Vec::with_capacity(layout.n_categorical);
    for _ in 0..layout.n_categorical {
        let v = int(col)?;
        categorical.push(u32::try_from(v).map_err(|_| format!("column `{}` out of range", &header[col]))?);
        col += 1;
    }
    let mut sequences = Vec::with_capacity(layout.n_sequence);
    for _ in 0..layout.n_sequence {
        let (name, raw) = field(col);
        let seq = if raw.is_empty() {
            Vec::new()
        } else {
            raw.split('|')
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| format!("column `{name}`: bad token `{t}`"))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?
        };
        sequences.push(seq);
        col += 1;
    }
    let ltv = num(col)?;
    let purchased = flag(col + 1)?;
    let whale = flag(col + 2)?;
    let gwptr = num(col + 3)?;
    let segment = match field(col + 4) {
        (_, "") => None,
        (name, raw) => Some(
            raw.parse::<u8>()
                .ok()
                .and_then(Segment::from_code)
                .ok_or_else(|| format!("column `{name}`: unknown segment `{raw}`"))?,
        ),
    };
    Ok(UserRecord {
        user_id,
        day,
        dense,
        categorical,
        sequences,
        ltv,
        purchased,
        whale,
        gwptr,
        segment,
    })
}
