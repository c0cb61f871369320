//! Preprocessed dataset cache.
//!
//! Line-delimited JSON. The first line is the header
//! `{"format":"convqa-examples","version":1}`; every following non-empty
//! line is one serialized [`QAExample`].

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::squad::{load_squad, QAExample};
use crate::error::{Error, Result};

pub const CACHE_FORMAT: &str = "convqa-examples";
pub const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn write_cache(mut w: impl Write, examples: &[QAExample]) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &Header {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
        },
    )?;
    w.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_cache(text: &str, source_name: &str) -> Result<Vec<QAExample>> {
    let mut lines = text.lines().enumerate();
    let header: Header = lines
        .next()
        .and_then(|(_, l)| serde_json::from_str(l).ok())
        .ok_or_else(|| Error::parse(source_name, Some(1), "missing cache header"))?;
    if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
        return Err(Error::parse(
            source_name,
            Some(1),
            format!("unsupported cache {} v{}", header.format, header.version),
        ));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample =
            serde_json::from_str(line).map_err(|e| Error::parse(source_name, Some(i + 1), e.to_string()))?;
        validate(&ex).map_err(|m| Error::parse(source_name, Some(i + 1), m))?;
        out.push(ex);
    }
    Ok(out)
}

fn validate(ex: &QAExample) -> std::result::Result<(), String> {
    if ex.context_offsets.len() != ex.context_tokens.len() {
        return Err(format!("{}: offsets do not match tokens", ex.id));
    }
    if let Some(g) = ex.gold {
        if g.start > g.end || g.end >= ex.context_tokens.len() {
            return Err(format!("{}: gold span {}..={} out of range", ex.id, g.start, g.end));
        }
    }
    let n = ex.context.chars().count();
    if ex.context_offsets.iter().any(|&(s, e)| s >= e || e > n) {
        return Err(format!("{}: token offsets outside context", ex.id));
    }
    Ok(())
}

/// True when `text` starts with a cache header line.
pub fn is_cache(text: &str) -> bool {
    text.lines()
        .next()
        .and_then(|l| serde_json::from_str::<Header>(l).ok())
        .is_some_and(|h| h.format == CACHE_FORMAT)
}

/// Loads either a cache file or SQuAD JSON, deciding by content.
pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<QAExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    if is_cache(&text) {
        parse_cache(&text, &path.display().to_string())
    } else {
        load_squad(path).map(|(exs, _)| exs)
    }
}
