//! Append-only JSON Lines logs.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Appends one JSON value per line, flushing after every line so a crash
/// loses at most the line being written.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(JsonlWriter {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every line of a JSONL file. A malformed final line (an interrupted
/// write) is skipped with a warning; malformed lines elsewhere are errors.
pub fn read_all<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) if Some(i) == last => {
                log::warn!("{}: skipping truncated final line: {e}", path.display());
            }
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

/// Like [`read_all`] but a missing file reads as empty.
pub fn read_all_or_empty<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    if path.as_ref().exists() {
        read_all(path)
    } else {
        Ok(Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back_with_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        {
            let mut w = JsonlWriter::append(&p).unwrap();
            w.write(&1u32).unwrap();
            w.write(&2u32).unwrap();
        }
        {
            let mut w = JsonlWriter::append(&p).unwrap();
            w.write(&3u32).unwrap();
        }
        let mut raw = std::fs::read_to_string(&p).unwrap();
        raw.push_str("{\"torn");
        std::fs::write(&p, raw).unwrap();
        let back: Vec<u32> = read_all(&p).unwrap();
        assert_eq!(back, vec![1, 2, 3]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        std::fs::write(&p, "1\nnope\n3\n").unwrap();
        assert!(read_all::<u32>(&p).is_err());
    }
}
