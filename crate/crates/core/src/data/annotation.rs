use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MrtError, Result};

/// One query-moment pair. Times are in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub video_id: String,
    #[serde(rename = "duration")]
    pub duration_sec: f64,
    #[serde(rename = "start")]
    pub start_sec: f64,
    #[serde(rename = "end")]
    pub end_sec: f64,
    pub query: Vec<String>,
}

impl Annotation {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.duration_sec > 0.0 && self.duration_sec.is_finite()) {
            return Err(format!("duration {} must be positive", self.duration_sec));
        }
        if !(0.0 <= self.start_sec && self.start_sec <= self.end_sec && self.end_sec <= self.duration_sec) {
            return Err(format!(
                "need 0 <= start <= end <= duration, got start={} end={} duration={}",
                self.start_sec, self.end_sec, self.duration_sec
            ));
        }
        if self.query.is_empty() {
            return Err("query is empty".into());
        }
        Ok(())
    }
}

/// Reads JSON-lines annotations. Blank lines are skipped.
pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| MrtError::io(path, e))?;
    parse_annotations(&text, path)
}

pub(crate) fn parse_annotations(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(line).map_err(|e| MrtError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        ann.validate().map_err(|msg| MrtError::Validation {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut text = String::new();
    for a in annotations {
        text.push_str(&serde_json::to_string(a)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| MrtError::io(path, e))
}
