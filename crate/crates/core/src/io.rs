//! Sample file reading and writing.
//!
//! The native format is a header line `q=<q> p=<p>`, optional `#` comment
//! lines (the first carries provenance), then one space-separated row per
//! sample. Headerless CSV with `q` integer columns is also accepted; `p` is
//! then inferred as `max + 1` unless supplied.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dist::SampleSet;
use crate::error::{Error, Result};
use crate::state::StateSpace;

pub fn write_samples<W: Write>(samples: &SampleSet, mut w: W) -> Result<()> {
    writeln!(w, "q={} p={}", samples.q(), samples.p())?;
    if !samples.provenance.is_empty() {
        for line in samples.provenance.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    let mut line = String::with_capacity(samples.q() * 4);
    for row in samples.rows() {
        line.clear();
        for (k, s) in row.iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{s}");
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn save_samples(samples: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_samples(samples, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads either the native format or headerless CSV.
/// `p_hint` overrides the inferred alphabet size for CSV input.
pub fn read_samples<R: Read>(r: R, p_hint: Option<usize>) -> Result<SampleSet> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let mut header: Option<(usize, usize)> = None;
    let mut provenance = Vec::new();
    let mut pending: Option<(usize, String)> = None;

    for (no, line) in lines.by_ref() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with("q=") {
            header = Some(parse_header(trimmed, no + 1)?);
        } else {
            pending = Some((no, line));
        }
        break;
    }

    let mut data = Vec::new();
    let mut width: Option<usize> = header.map(|(q, _)| q);
    let mut max_symbol = 0u8;
    let mut push_row = |no: usize, text: &str| -> Result<()> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Ok(());
        }
        if let Some(note) = trimmed.strip_prefix('#') {
            provenance.push(note.trim().to_string());
            return Ok(());
        }
        let before = data.len();
        for tok in trimmed.split(|c: char| c == ',' || c.is_whitespace()) {
            if tok.is_empty() {
                continue;
            }
            let v: u8 = tok.parse().map_err(|_| Error::Parse {
                line: no + 1,
                msg: format!("bad symbol {tok:?}"),
            })?;
            max_symbol = max_symbol.max(v);
            data.push(v);
        }
        let n = data.len() - before;
        match width {
            Some(w) if w != n => Err(Error::Parse {
                line: no + 1,
                msg: format!("row has {n} symbols, expected {w}"),
            }),
            Some(_) => Ok(()),
            None => {
                width = Some(n);
                Ok(())
            }
        }
    };

    if let Some((no, text)) = pending.take() {
        push_row(no, &text)?;
    }
    for (no, line) in lines {
        push_row(no, &line?)?;
    }

    let (q, p) = match header {
        Some((q, p)) => (q, p),
        None => {
            let q = width.ok_or(Error::Empty("sample file"))?;
            (q, p_hint.unwrap_or(max_symbol as usize + 1).max(2))
        }
    };
    let space = StateSpace::new(q, p)?;
    SampleSet::from_flat(space, data, provenance.join("\n"))
}

pub fn load_samples(path: impl AsRef<Path>, p_hint: Option<usize>) -> Result<SampleSet> {
    read_samples(File::open(path)?, p_hint)
}

fn parse_header(line: &str, no: usize) -> Result<(usize, usize)> {
    let mut q = None;
    let mut p = None;
    for tok in line.split_whitespace() {
        let (key, value) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: no,
            msg: format!("bad header token {tok:?}"),
        })?;
        let value: usize = value.parse().map_err(|_| Error::Parse {
            line: no,
            msg: format!("bad header value {value:?}"),
        })?;
        match key {
            "q" => q = Some(value),
            "p" => p = Some(value),
            _ => {
                return Err(Error::Parse {
                    line: no,
                    msg: format!("unknown header key {key:?}"),
                })
            }
        }
    }
    match (q, p) {
        (Some(q), Some(p)) => Ok((q, p)),
        _ => Err(Error::Parse {
            line: no,
            msg: "header needs both q and p".into(),
        }),
    }
}
