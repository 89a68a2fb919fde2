//! `captions.jsonl`: one `{"id", "t1", "t2"}` object per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub id: String,
    pub t1: String,
    pub t2: String,
}

pub type CaptionMap = BTreeMap<String, CaptionPair>;

pub fn load_captions(path: &Path) -> Result<CaptionMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_captions(BufReader::new(file), path)
}

/// Parses caption lines; `origin` is only used in error messages.
pub fn parse_captions(reader: impl BufRead, origin: &Path) -> Result<CaptionMap> {
    let mut out = CaptionMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let err = |message: String| Error::Captions {
            path: origin.to_path_buf(),
            line: lineno,
            message,
        };
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| err("expected a JSON object".into()))?;
        let field = |key: &str| -> Result<String> {
            let v = obj
                .get(key)
                .ok_or_else(|| err(format!("missing key \"{key}\"")))?;
            let s = v
                .as_str()
                .ok_or_else(|| err(format!("key \"{key}\" must be a string")))?;
            if s.is_empty() {
                return Err(err(format!("key \"{key}\" is empty")));
            }
            Ok(s.to_string())
        };
        let pair = CaptionPair {
            id: field("id")?,
            t1: field("t1")?,
            t2: field("t2")?,
        };
        if out.contains_key(&pair.id) {
            return Err(err(format!("duplicate id \"{}\"", pair.id)));
        }
        out.insert(pair.id.clone(), pair);
    }
    Ok(out)
}

/// Writes pairs in the given order, LF-terminated.
pub fn write_captions<'a>(path: &Path, pairs: impl IntoIterator<Item = &'a CaptionPair>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).expect("caption pair serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
