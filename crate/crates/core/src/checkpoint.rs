//! Plain-text snapshots of trained parameters.
//!
//! ```text
//! deep-bsde-params v1
//! dims <n> <m> <d>
//! hidden <h>
//! count <len>
//! <value>
//! ...
//! ```
//!
//! Values are in flat [`NetParams`] order, one per line, written with the
//! shortest representation that parses back to the same `f64`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Dims;
use crate::net::{NetParams, NetShape};

pub const MAGIC: &str = "deep-bsde-params v1";

/// Largest accepted `n`, `m` or `d`.
pub const MAX_DIM: usize = 4096;
/// Largest accepted parameter count.
pub const MAX_PARAMS: usize = 1 << 25;

pub fn encode(params: &NetParams) -> String {
    let shape = params.shape();
    let Dims { n, m, d } = shape.dims;
    let mut out = String::with_capacity(64 + 24 * params.len());
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "dims {n} {m} {d}");
    let _ = writeln!(out, "hidden {}", shape.hidden);
    let _ = writeln!(out, "count {}", params.len());
    for v in params.as_slice() {
        let _ = writeln!(out, "{v:e}");
    }
    out
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Snapshot {
        line,
        msg: msg.into(),
    }
}

fn header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    key: &str,
    fields: usize,
) -> Result<Vec<usize>> {
    let (no, line) = lines
        .next()
        .ok_or_else(|| bad(0, format!("missing `{key}` line")))?;
    let mut parts = line.split_ascii_whitespace();
    if parts.next() != Some(key) {
        return Err(bad(no, format!("expected `{key}`")));
    }
    let values = parts
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| bad(no, format!("`{p}` is not a count")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != fields {
        return Err(bad(no, format!("`{key}` takes {fields} field(s)")));
    }
    Ok(values)
}

/// Parses a snapshot. Never panics; rejects oversized shapes before allocating.
pub fn decode(text: &str) -> Result<NetParams> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        Some((no, _)) => return Err(bad(no, format!("expected `{MAGIC}`"))),
        None => return Err(bad(0, "empty snapshot")),
    }
    let dims = header(&mut lines, "dims", 3)?;
    let (n, m, d) = (dims[0], dims[1], dims[2]);
    if [n, m, d].iter().any(|&v| v == 0 || v > MAX_DIM) {
        return Err(bad(2, format!("dimensions must lie in 1..={MAX_DIM}")));
    }
    let dims = Dims::new(n, m, d)?;
    let shape = NetShape::for_dims(dims);
    let hidden = header(&mut lines, "hidden", 1)?[0];
    if hidden != shape.hidden {
        return Err(bad(3, format!("hidden width {hidden}, expected {}", shape.hidden)));
    }
    let expected = shape.num_params();
    if expected > MAX_PARAMS {
        return Err(bad(2, format!("{expected} parameters exceed the limit {MAX_PARAMS}")));
    }
    let count = header(&mut lines, "count", 1)?[0];
    if count != expected {
        return Err(bad(4, format!("count {count}, shape needs {expected}")));
    }

    let mut data = Vec::with_capacity(count);
    for (no, line) in lines {
        if data.len() == count {
            return Err(bad(no, "trailing data"));
        }
        let v: f64 = line
            .parse()
            .map_err(|_| bad(no, format!("`{line}` is not a number")))?;
        if !v.is_finite() {
            return Err(bad(no, "non-finite parameter"));
        }
        data.push(v);
    }
    if data.len() != count {
        return Err(bad(0, format!("{} values, expected {count}", data.len())));
    }
    NetParams::from_flat(shape, data)
}

pub fn save(params: &NetParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&text)
}
