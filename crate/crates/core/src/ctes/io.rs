//! JSON Lines datasets.
//!
//! Line 1 is a header `{"num_marks": K, "name": "..."}`; every further line
//! is one sequence `{"events": [[t, c], ...]}`, optionally with
//! `"perm": [...]` giving, for each output position, the index of the clean
//! event it came from (0-based).

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use crate::io_util::write_atomic;
use crate::scalar::Scalar;

use super::{CtesError, Dataset, Sequence};

fn parse_err(line: usize, message: impl Into<String>) -> CtesError {
    CtesError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_header(line_no: usize, text: &str) -> Result<(usize, String), CtesError> {
    let v: Value = serde_json::from_str(text).map_err(|e| parse_err(line_no, e.to_string()))?;
    let num_marks = v
        .get("num_marks")
        .and_then(Value::as_u64)
        .ok_or_else(|| parse_err(line_no, "header needs an integer \"num_marks\""))? as usize;
    let name = v
        .get("name")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok((num_marks, name))
}

fn parse_sequence<T: Scalar>(
    line_no: usize,
    text: &str,
    num_marks: usize,
) -> Result<(Sequence<T>, Option<Vec<usize>>), CtesError> {
    let v: Value = serde_json::from_str(text).map_err(|e| parse_err(line_no, e.to_string()))?;
    let events = v
        .get("events")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(line_no, "missing \"events\" array"))?;
    let mut times = Vec::with_capacity(events.len());
    let mut marks = Vec::with_capacity(events.len());
    for (k, e) in events.iter().enumerate() {
        let pair = e
            .as_array()
            .filter(|p| p.len() == 2)
            .ok_or_else(|| parse_err(line_no, format!("event {k} is not a [t, c] pair")))?;
        let t = pair[0]
            .as_f64()
            .ok_or_else(|| parse_err(line_no, format!("event {k}: time is not a number")))?;
        let c = pair[1]
            .as_u64()
            .ok_or_else(|| parse_err(line_no, format!("event {k}: mark is not a nonnegative integer")))?
            as usize;
        if c >= num_marks {
            return Err(parse_err(
                line_no,
                format!("event {k}: unknown mark {c} (num_marks = {num_marks})"),
            ));
        }
        times.push(T::lit(t));
        marks.push(c);
    }
    let seq = Sequence::new(times, marks).map_err(|e| parse_err(line_no, e.to_string()))?;
    let perm = match v.get("perm") {
        None | Some(Value::Null) => None,
        Some(p) => {
            let arr = p
                .as_array()
                .ok_or_else(|| parse_err(line_no, "\"perm\" is not an array"))?;
            let perm: Option<Vec<usize>> = arr.iter().map(|x| x.as_u64().map(|u| u as usize)).collect();
            let perm = perm.ok_or_else(|| parse_err(line_no, "\"perm\" entries must be integers"))?;
            if perm.len() != seq.len() {
                return Err(parse_err(line_no, "\"perm\" length differs from event count"));
            }
            Some(perm)
        }
    };
    Ok((seq, perm))
}

pub fn load_jsonl_with_perms<T: Scalar>(
    path: &Path,
) -> Result<(Dataset<T>, Vec<Option<Vec<usize>>>), CtesError> {
    let text = std::fs::read_to_string(path).map_err(|source| CtesError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (header_idx, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let (num_marks, name) = parse_header(header_idx + 1, header)?;
    if num_marks == 0 {
        return Err(parse_err(header_idx + 1, "num_marks must be positive"));
    }
    let mut sequences = Vec::new();
    let mut perms = Vec::new();
    for (idx, line) in lines {
        let (s, p) = parse_sequence(idx + 1, line, num_marks)?;
        sequences.push(s);
        perms.push(p);
    }
    Ok((Dataset::new(name, num_marks, sequences)?, perms))
}

pub fn load_jsonl<T: Scalar>(path: &Path) -> Result<Dataset<T>, CtesError> {
    Ok(load_jsonl_with_perms(path)?.0)
}

fn render<T: Scalar>(ds: &Dataset<T>, perms: Option<&[Vec<usize>]>) -> String {
    let mut out = String::new();
    let header = json!({"num_marks": ds.num_marks, "name": ds.name});
    writeln!(out, "{header}").unwrap();
    for (k, s) in ds.sequences.iter().enumerate() {
        let events: Vec<Value> = s.events().map(|e| json!([e.t.as_f64(), e.c])).collect();
        let line = match perms {
            Some(p) => json!({"events": events, "perm": p[k]}),
            None => json!({"events": events}),
        };
        writeln!(out, "{line}").unwrap();
    }
    out
}

fn write(path: &Path, text: String) -> Result<(), CtesError> {
    write_atomic(path, text.as_bytes()).map_err(|source| CtesError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn save_jsonl<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<(), CtesError> {
    write(path, render(ds, None))
}

pub fn save_jsonl_with_perms<T: Scalar>(
    ds: &Dataset<T>,
    perms: &[Vec<usize>],
    path: &Path,
) -> Result<(), CtesError> {
    if perms.len() != ds.len() {
        return Err(CtesError::LengthMismatch {
            what: "permutations",
            left: ds.len(),
            right: perms.len(),
        });
    }
    write(path, render(ds, Some(perms)))
}
