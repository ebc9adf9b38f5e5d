use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub wav: PathBuf,
    /// Seconds.
    pub duration: f64,
}

/// Reads newline-delimited JSON entries. Relative WAV paths are resolved
/// against the manifest's directory; blank lines are skipped.
pub fn read_dataset_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: DatasetEntry = serde_json::from_str(&line)
            .map_err(|err| Error::InvalidArgument(format!("{}:{}: {err}", path.display(), n + 1)))?;
        if e.wav.is_relative() {
            e.wav = base.join(&e.wav);
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

pub fn write_dataset_manifest(path: impl AsRef<Path>, entries: &[DatasetEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
