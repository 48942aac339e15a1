//! Versioned JSON containers and small CSV helpers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    format: &'a str,
    version: u32,
    model: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn<T> {
    format: String,
    version: u32,
    model: T,
}

/// Serializes `value` inside a `{format, version, model}` envelope.
pub fn to_json<T: Serialize>(format: &str, value: &T) -> Result<String> {
    Ok(serde_json::to_string(&EnvelopeOut {
        format,
        version: FORMAT_VERSION,
        model: value,
    })?)
}

pub fn from_json<T: DeserializeOwned>(format: &str, text: &str) -> Result<T> {
    let env: EnvelopeIn<T> = serde_json::from_str(text)?;
    check_envelope(format, &env.format, env.version)?;
    Ok(env.model)
}

fn check_envelope(expected: &str, found: &str, version: u32) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!("expected `{expected}`, found `{found}`")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, format: &str, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &EnvelopeOut {
            format,
            version: FORMAT_VERSION,
            model: value,
        },
    )?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>, format: &str) -> Result<T> {
    let env: EnvelopeIn<T> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    check_envelope(format, &env.format, env.version)?;
    Ok(env.model)
}

/// Writes a header row followed by numeric rows.
pub fn write_matrix_csv<W: std::io::Write>(out: W, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headed numeric CSV back into rows.
pub fn read_matrix_csv<R: std::io::Read>(input: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("`{s}` is not a number: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub(crate) fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|k| format!("{prefix}{k}")).collect()
}
