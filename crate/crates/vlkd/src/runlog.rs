//! RunLog files: one JSON record per line, in the order events happened.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use vlkd_core::train::{EpochRecord, RunLog, StepRecord};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Step(StepRecord),
    Epoch(EpochRecord),
    Checkpoint { path: String },
}

fn lines(log: &RunLog) -> Vec<Line> {
    let mut out = Vec::with_capacity(log.steps.len() + log.epochs.len() + 1);
    let mut epochs = log.epochs.iter().peekable();
    for s in &log.steps {
        while let Some(e) = epochs.next_if(|e| e.step <= s.step) {
            out.push(Line::Epoch(e.clone()));
        }
        out.push(Line::Step(s.clone()));
    }
    out.extend(epochs.cloned().map(Line::Epoch));
    if let Some(p) = &log.checkpoint {
        out.push(Line::Checkpoint { path: p.clone() });
    }
    out
}

pub fn to_string(log: &RunLog) -> String {
    let mut s = String::new();
    for l in lines(log) {
        s.push_str(&serde_json::to_string(&l).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn parse(text: &str, path: &Path) -> Result<RunLog> {
    let mut log = RunLog::default();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: Line = serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        match rec {
            Line::Step(s) => {
                if log.steps.last().is_some_and(|p| p.step >= s.step) {
                    return Err(Error::format(path, format!("line {}: step ids not increasing", n + 1)));
                }
                log.steps.push(s);
            }
            Line::Epoch(e) => log.epochs.push(e),
            Line::Checkpoint { path } => log.checkpoint = Some(path),
        }
    }
    Ok(log)
}

pub fn write(path: &Path, log: &RunLog) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_string(log).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<RunLog> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for l in BufReader::new(f).lines() {
        text.push_str(&l.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse(&text, path)
}
