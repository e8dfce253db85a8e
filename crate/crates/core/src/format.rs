//! Shared pieces of the on-disk containers: a line-oriented text header
//! terminated by `end\n`, followed by raw little-endian `f64` values.

use crate::error::{DreError, Result};

pub(crate) struct Header<'a> {
    pub lines: Vec<(usize, Vec<&'a str>)>,
    /// Byte offset of the first payload byte.
    pub body_offset: usize,
}

pub(crate) fn parse_header<'a>(bytes: &'a [u8], magic: &str, version: u32) -> Result<Header<'a>> {
    let mut lines = Vec::new();
    let mut pos = 0;
    let mut line_no = 0;
    loop {
        line_no += 1;
        let rest = &bytes[pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| DreError::Parse {
            location: format!("line {line_no} (byte {pos})"),
            message: "header ends before `end` line".into(),
        })?;
        let text = std::str::from_utf8(&rest[..nl]).map_err(|_| DreError::Parse {
            location: format!("line {line_no} (byte {pos})"),
            message: "header line is not UTF-8".into(),
        })?;
        pos += nl + 1;
        if line_no == 1 {
            if text != magic {
                return Err(DreError::Parse {
                    location: "line 1 (byte 0)".into(),
                    message: format!("expected magic `{magic}`, found `{text}`"),
                });
            }
            continue;
        }
        if line_no == 2 {
            let parts: Vec<&str> = text.split_whitespace().collect();
            match parts.as_slice() {
                ["version", v] if *v == version.to_string() => continue,
                ["version", v] => return Err(DreError::Version { found: v.to_string(), expected: version }),
                _ => {
                    return Err(DreError::Parse {
                        location: format!("line 2 (byte {})", pos - nl - 1),
                        message: "expected `version <n>`".into(),
                    })
                }
            }
        }
        if text == "end" {
            break;
        }
        lines.push((line_no, text.split_whitespace().collect()));
    }
    Ok(Header { lines, body_offset: pos })
}

pub(crate) fn parse_err(line: usize, message: impl Into<String>) -> DreError {
    DreError::Parse { location: format!("line {line}"), message: message.into() }
}

pub(crate) fn parse_usize(line: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| parse_err(line, format!("expected a non-negative integer, found `{s}`")))
}

pub(crate) fn parse_usizes(line: usize, parts: &[&str]) -> Result<Vec<usize>> {
    parts.iter().map(|s| parse_usize(line, s)).collect()
}

pub(crate) fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads `count` doubles at `*offset`, advancing it.
pub(crate) fn read_f64s(bytes: &[u8], offset: &mut usize, count: usize, what: &str) -> Result<Vec<f64>> {
    let need = count * 8;
    if bytes.len() < *offset + need {
        return Err(DreError::Parse {
            location: format!("byte {}", *offset),
            message: format!(
                "truncated payload while reading {what}: need {need} bytes, {} available",
                bytes.len().saturating_sub(*offset)
            ),
        });
    }
    let vals = bytes[*offset..*offset + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    *offset += need;
    Ok(vals)
}

pub(crate) fn expect_eof(bytes: &[u8], offset: usize) -> Result<()> {
    if offset != bytes.len() {
        return Err(DreError::Parse {
            location: format!("byte {offset}"),
            message: format!("{} trailing bytes after payload", bytes.len() - offset),
        });
    }
    Ok(())
}
