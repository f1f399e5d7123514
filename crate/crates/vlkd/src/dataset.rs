//! JSON-lines datasets: one conversation per line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use vlkd_core::data::{Conversation, Split};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    schema_version: u32,
    split: Split,
    index: usize,
    conversation: Conversation,
}

pub fn file_name(split: Split) -> &'static str {
    match split {
        Split::Pretrain => "pretrain.jsonl",
        Split::Train => "train.jsonl",
        Split::Eval => "eval.jsonl",
    }
}

pub fn write(path: &Path, split: Split, data: &[Conversation]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (index, conv) in data.iter().enumerate() {
        let rec = Record {
            schema_version: SCHEMA_VERSION,
            split,
            index,
            conversation: conv.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::format(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads every record, checking the schema version, the split and the
/// record order.
pub fn read(path: &Path, split: Split) -> Result<Vec<Conversation>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("line {}: schema version {} (expected {SCHEMA_VERSION})", n + 1, rec.schema_version),
            ));
        }
        if rec.split != split || rec.index != out.len() {
            return Err(Error::format(path, format!("line {}: record out of place", n + 1)));
        }
        rec.conversation.validate()?;
        out.push(rec.conversation);
    }
    Ok(out)
}
