//! Dataset files: one JSON case per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::Case;
use crate::{Error, Result};

pub fn write_cases(path: &Path, cases: &[Case]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for case in cases {
        let line = serde_json::to_string(case).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cases(path: &Path) -> Result<Vec<Case>> {
    let r = BufReader::new(File::open(path)?);
    let mut cases = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: Case = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?;
        cases.push(case);
    }
    Ok(cases)
}
