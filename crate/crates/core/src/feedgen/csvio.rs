use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeedError;
use crate::model::{parse_raw_record, RawTuple};

/// Writes a header row and one line per tuple, `\n` terminated.
pub fn write_csv_to<W: Write>(mut w: W, tuples: &[RawTuple]) -> std::io::Result<()> {
    writeln!(w, "{}", RawTuple::header().to_csv_line())?;
    for t in tuples {
        w.write_all(t.to_csv_line().as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_csv(tuples: &[RawTuple], path: &Path) -> Result<(), FeedError> {
    let file = File::create(path).map_err(|source| FeedError::io(path, source))?;
    write_csv_to(BufWriter::new(file), tuples).map_err(|source| FeedError::io(path, source))
}

/// Splits CSV text into record lines, skipping an optional header row.
/// Line numbers are 1-based positions in the input.
pub fn record_lines(text: &str) -> Vec<(usize, &str)> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    let mut lines: Vec<(usize, &str)> = body.split('\n').enumerate().map(|(i, l)| (i + 1, l)).collect();
    let has_header = lines.first().and_then(|(_, l)| parse_raw_record(l).ok()).is_some_and(|t| t.is_header());
    if has_header {
        lines.remove(0);
    }
    lines
}

pub fn read_csv_from<R: Read>(mut r: R) -> Result<Vec<RawTuple>, FeedError> {
    let mut text = String::new();
    r.read_to_string(&mut text).map_err(|source| FeedError::io(Path::new("<reader>"), source))?;
    record_lines(&text)
        .into_iter()
        .map(|(n, line)| parse_raw_record(line).map_err(|e| FeedError::Malformed(e.at_line(n))))
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<RawTuple>, FeedError> {
    let file = File::open(path).map_err(|source| FeedError::io(path, source))?;
    read_csv_from(BufReader::new(file))
}

/// Raw record lines of a feed file, without parsing, for verbatim replay.
pub fn read_record_lines(path: &Path) -> Result<Vec<String>, FeedError> {
    let file = File::open(path).map_err(|source| FeedError::io(path, source))?;
    let mut text = String::new();
    BufReader::new(file).read_to_string(&mut text).map_err(|source| FeedError::io(path, source))?;
    Ok(record_lines(&text).into_iter().map(|(_, l)| l.to_string()).collect())
}
