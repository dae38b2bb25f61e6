//! Line-oriented JSON helpers shared by every file-based stage.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parses every non-blank line of `path` as `T`.
///
/// Errors carry the 1-based line number of the first malformed record.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(read_numbered_records(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Like [`read_records`], keeping each record's 1-based line number.
pub fn read_numbered_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_numbered(BufReader::new(file), &path.display().to_string())
}

pub fn parse_records<T: DeserializeOwned, R: BufRead>(reader: R, source: &str) -> Result<Vec<T>> {
    Ok(parse_numbered(reader, source)?.into_iter().map(|(_, r)| r).collect())
}

fn parse_numbered<T: DeserializeOwned, R: BufRead>(reader: R, source: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

pub fn write_records<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a single pretty-printed JSON document followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(serde::Deserialize, Debug, PartialEq)]
    struct Rec {
        a: u32,
    }

    #[test]
    fn blank_lines_skipped_and_errors_report_line() {
        let text = "{\"a\":1}\n\n{\"a\":2}\n{oops}\n";
        let err = parse_records::<Rec, _>(text.as_bytes(), "mem").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let ok: Vec<Rec> = parse_records("{\"a\":1}\n\n{\"a\":2, \"extra\": true}\n".as_bytes(), "mem").unwrap();
        assert_eq!(ok, vec![Rec { a: 1 }, Rec { a: 2 }]);
    }
}
