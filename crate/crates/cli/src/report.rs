//! CSV and JSON output.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use anyhow::Context;
use clap::ValueEnum;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Serialize `rows` to `w`. CSV columns follow the struct field order.
pub fn write_rows<T: Serialize>(rows: &[T], format: Format, w: impl Write) -> anyhow::Result<()> {
    match format {
        Format::Csv => {
            let mut csv = csv::Writer::from_writer(w);
            for r in rows {
                csv.serialize(r)?;
            }
            csv.flush()?;
        }
        Format::Json => {
            let mut w = w;
            serde_json::to_writer_pretty(&mut w, rows)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Write to `out`, or stdout when `None`.
pub fn emit<T: Serialize>(rows: &[T], format: Format, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_rows(rows, format, io::BufWriter::new(f))
        }
        None => write_rows(rows, format, io::stdout().lock()),
    }
}
