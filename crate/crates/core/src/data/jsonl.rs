use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{InstanceSource, TrainingInstance};
use crate::error::{Error, Result};

/// Parses and validates one JSON object.
pub fn parse_line(line: &str) -> Result<TrainingInstance, String> {
    let inst: TrainingInstance = serde_json::from_str(line).map_err(|e| e.to_string())?;
    inst.validate()?;
    Ok(inst)
}

/// Line-by-line reader yielding `(line_number, parsed)`; blank lines are
/// skipped. Line numbers are 1-based.
pub struct JsonlStream<R> {
    reader: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> JsonlStream<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            line_no: 0,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for JsonlStream<R> {
    type Item = std::io::Result<(usize, Result<TrainingInstance, String>)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e)),
            }
            self.line_no += 1;
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            return Some(Ok((self.line_no, parse_line(line))));
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct JsonlLoad {
    pub instances: Vec<TrainingInstance>,
    /// `(line_number, reason)` for every skipped line.
    pub skipped: Vec<(usize, String)>,
}

/// Loads a whole file. Malformed lines are skipped as long as they make up
/// at most `tolerance` (a fraction) of the non-blank lines.
pub fn load_jsonl(path: &Path, tolerance: f64) -> Result<JsonlLoad> {
    let file = File::open(path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?;
    let mut out = JsonlLoad::default();
    for item in JsonlStream::new(BufReader::new(file)) {
        let (line, parsed) = item?;
        match parsed {
            Ok(inst) => out.instances.push(inst),
            Err(reason) => out.skipped.push((line, reason)),
        }
    }
    let total = out.instances.len() + out.skipped.len();
    if out.skipped.len() as f64 > tolerance * total as f64 {
        let (line, reason) = out.skipped[0].clone();
        return Err(Error::Ingest {
            line,
            message: format!(
                "{reason} ({} of {total} lines malformed, tolerance {tolerance})",
                out.skipped.len()
            ),
        });
    }
    Ok(out)
}

/// Writes instances one JSON object per line, LF terminated.
pub fn write_jsonl<S: InstanceSource + ?Sized, W: Write>(source: &S, mut out: W) -> Result<()> {
    for i in 0..source.len() {
        serde_json::to_writer(&mut out, source.instance(i).as_ref())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
