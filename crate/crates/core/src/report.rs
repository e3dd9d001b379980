//! Writers for flat record lists: CSV with a header row, pretty-printed
//! JSON arrays, and aligned text tables.

use std::io::Write;

use clap::ValueEnum;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

fn io_error(e: impl std::fmt::Display) -> Error {
    Error::Domain(format!("writing report: {e}"))
}

fn csv_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in records {
        writer.serialize(r).map_err(io_error)?;
    }
    writer.into_inner().map_err(io_error)
}

/// Writes `records` in `format`. Field order of `T` fixes the column order.
pub fn write_records<T: Serialize, W: Write>(
    records: &[T],
    format: Format,
    mut out: W,
) -> Result<()> {
    match format {
        Format::Csv => out.write_all(&csv_bytes(records)?).map_err(io_error),
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, records).map_err(io_error)?;
            writeln!(out).map_err(io_error)
        }
        Format::Table => {
            let bytes = csv_bytes(records)?;
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_reader(bytes.as_slice());
            let rows = reader
                .records()
                .map(|r| r.map(|r| r.iter().map(str::to_owned).collect::<Vec<_>>()))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(io_error)?;
            write_aligned(&rows, out)
        }
    }
}

/// First column left-aligned, the rest right-aligned, two spaces apart.
pub fn write_aligned<W: Write>(rows: &[Vec<String>], mut out: W) -> Result<()> {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    for row in rows {
        let line = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect::<Vec<_>>()
            .join("  ");
        writeln!(out, "{}", line.trim_end()).map_err(io_error)?;
    }
    Ok(())
}
