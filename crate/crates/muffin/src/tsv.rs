//! Tab-separated interaction logs: `user \t item \t timestamp`, an optional
//! fourth rating column (ignored), and an optional header line.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use muffin_core::data::{Interaction, InteractionLog};

use crate::error::{bail, Error, Result};

pub fn read_log(path: &Path) -> Result<InteractionLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_log(file).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_log(input: impl Read) -> Result<InteractionLog> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .quoting(false)
        .from_reader(input);
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        if row.len() == 1 && row[0].trim().is_empty() {
            continue;
        }
        if row.len() < 3 || row.len() > 4 {
            bail!(Data, "line {}: expected 3 or 4 tab-separated fields, found {}", i + 1, row.len());
        }
        let ts = row[2].trim();
        let timestamp = match ts.parse::<i64>() {
            Ok(t) => t,
            // a header is only recognized on the first line
            Err(_) if i == 0 => continue,
            Err(_) => bail!(Data, "line {}: timestamp {ts:?} is not an integer", i + 1),
        };
        records.push(Interaction { user: row[0].trim().to_string(), item: row[1].trim().to_string(), timestamp });
    }
    Ok(InteractionLog::new(records))
}

pub fn write_log(path: &Path, log: &InteractionLog) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "user\titem\ttimestamp")?;
        for r in &log.records {
            writeln!(w, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
