//! Line-oriented utterance records.
//!
//! One utterance per line, tab-separated `key=value` fields in this order:
//!
//! ```text
//! id=<id>\ttext=<text>\tst=<ids>\tat=<codebook rows>[\tspeaker=<n>]
//! ```
//!
//! `st` holds the raw semantic frames as space-separated decimal ids. `at`
//! holds K codebook rows separated by `;`, each a space-separated list of T
//! ids, so K is one more than the number of `;`. Text is whitespace
//! normalised and cannot contain tabs or newlines. Blank lines and lines
//! starting with `#` are skipped.

use std::io::{BufRead, Write};

use crate::corpus::SyntheticUtterance;
use crate::error::{Error, Result};
use crate::text::normalize_text;
use crate::vocab::AcousticGrid;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub text: String,
    pub st: Vec<u32>,
    pub at: AcousticGrid,
    pub speaker: Option<u32>,
}

impl From<&SyntheticUtterance> for UtteranceRecord {
    fn from(u: &SyntheticUtterance) -> Self {
        Self {
            id: u.id.clone(),
            text: u.text.clone(),
            st: u.st_raw.clone(),
            at: u.at.clone(),
            speaker: Some(u.speaker),
        }
    }
}

fn join_ids(ids: impl Iterator<Item = u32>) -> String {
    ids.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn format_record(r: &UtteranceRecord) -> Result<String> {
    if r.id.is_empty() || r.id.contains(['\t', '\n', '\r']) {
        return Err(Error::Record {
            line: 0,
            reason: format!("invalid id {:?}", r.id),
        });
    }
    let text = normalize_text(&r.text);
    let at = (0..r.at.codebooks())
        .map(|k| join_ids(r.at.column(k).into_iter()))
        .collect::<Vec<_>>()
        .join(";");
    let mut line = format!(
        "id={}\ttext={}\tst={}\tat={}",
        r.id,
        text,
        join_ids(r.st.iter().copied()),
        at
    );
    if let Some(s) = r.speaker {
        line.push_str(&format!("\tspeaker={s}"));
    }
    Ok(line)
}

fn parse_ids(field: &str, line: usize, what: &str) -> Result<Vec<u32>> {
    field
        .split_whitespace()
        .map(|v| {
            v.parse::<u32>().map_err(|_| Error::Record {
                line,
                reason: format!("bad {what} id {v:?}"),
            })
        })
        .collect()
}

pub fn parse_record(raw: &str, line: usize) -> Result<UtteranceRecord> {
    let err = |reason: String| Error::Record { line, reason };
    let fields: Vec<&str> = raw.split('\t').collect();
    let keys = ["id", "text", "st", "at", "speaker"];
    if fields.len() < 4 || fields.len() > 5 {
        return Err(err(format!("expected 4 or 5 fields, found {}", fields.len())));
    }
    let mut values = Vec::with_capacity(fields.len());
    for (f, key) in fields.iter().zip(keys) {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| err(format!("field {key} has no '='")))?;
        if k != key {
            return Err(err(format!("expected field {key}, found {k:?}")));
        }
        values.push(v);
    }
    if values[0].is_empty() {
        return Err(err("empty id".into()));
    }
    let st = parse_ids(values[2], line, "semantic")?;
    let columns = values[3]
        .split(';')
        .map(|c| parse_ids(c, line, "acoustic"))
        .collect::<Result<Vec<_>>>()?;
    let frames = columns[0].len();
    if let Some(bad) = columns.iter().position(|c| c.len() != frames) {
        return Err(err(format!(
            "codebook {bad} has {} frames, codebook 0 has {frames}",
            columns[bad].len()
        )));
    }
    let rows: Vec<Vec<u32>> = (0..frames)
        .map(|t| columns.iter().map(|c| c[t]).collect())
        .collect();
    let at = AcousticGrid::from_rows(&rows, columns.len()).map_err(|e| err(e.to_string()))?;
    let speaker = match values.get(4) {
        Some(v) => Some(v.parse().map_err(|_| err(format!("bad speaker {v:?}")))?),
        None => None,
    };
    Ok(UtteranceRecord {
        id: values[0].to_string(),
        text: values[1].to_string(),
        st,
        at,
        speaker,
    })
}

pub fn read_records(reader: impl BufRead) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_record(trimmed, i + 1)?);
    }
    Ok(out)
}

pub fn write_records(mut writer: impl Write, records: &[UtteranceRecord]) -> Result<()> {
    for r in records {
        writeln!(writer, "{}", format_record(r)?)?;
    }
    Ok(())
}
