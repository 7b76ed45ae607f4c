//! Model files and semantic ID tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QuantizerModel, SemanticId};
use crate::error::{Error, Result};

pub const MODEL_VERSION: &str = "nuq-model/1";

impl QuantizerModel {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// One row of a semantic ID table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidRow {
    pub item_id: String,
    #[serde(flatten)]
    pub sid: SemanticId,
}

fn check_rows(rows: &[SidRow]) -> Result<(usize, bool)> {
    let Some(first) = rows.first() else {
        return Ok((0, false));
    };
    let levels = first.sid.levels();
    let suffix = first.sid.dedup_suffix.is_some();
    for r in rows {
        if r.sid.levels() != levels {
            return Err(Error::LevelMismatch(levels, r.sid.levels()));
        }
        if r.sid.dedup_suffix.is_some() != suffix {
            return Err(Error::Parse(
                "dedup suffix present on some rows only".into(),
            ));
        }
    }
    Ok((levels, suffix))
}

/// `item_id,c1,…,cK[,suffix]` with a header row.
pub fn sids_to_csv(rows: &[SidRow]) -> Result<String> {
    let (levels, suffix) = check_rows(rows)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["item_id".to_string()];
    header.extend((1..=levels).map(|k| format!("c{k}")));
    if suffix {
        header.push("suffix".into());
    }
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.item_id.clone()];
        rec.extend(r.sid.codes.iter().map(u32::to_string));
        if let Some(s) = r.sid.dedup_suffix {
            rec.push(s.to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn sids_from_csv(text: &str) -> Result<Vec<SidRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("item_id") {
        return Err(Error::Parse(
            "sid table must start with an item_id column".into(),
        ));
    }
    let suffix = header.iter().next_back() == Some("suffix");
    let levels = header.len() - 1 - usize::from(suffix);
    let parse = |s: &str, line: u64| {
        s.trim()
            .parse::<u32>()
            .map_err(|e| Error::Parse(format!("line {line}: bad code {s:?}: {e}")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let codes = (1..=levels)
            .map(|k| parse(&rec[k], line))
            .collect::<Result<Vec<_>>>()?;
        let dedup_suffix = if suffix {
            Some(parse(&rec[levels + 1], line)?)
        } else {
            None
        };
        rows.push(SidRow {
            item_id: rec[0].to_string(),
            sid: SemanticId {
                codes,
                dedup_suffix,
            },
        });
    }
    Ok(rows)
}

/// One JSON object per line: `{"item_id":…,"codes":[…],"dedup_suffix":…}`.
pub fn sids_to_jsonl(rows: &[SidRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn sids_from_jsonl(text: &str) -> Result<Vec<SidRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "ndjson")
    )
}

/// Writes JSON lines for `.jsonl`/`.ndjson` paths and CSV otherwise.
pub fn write_sids(path: &Path, rows: &[SidRow]) -> Result<()> {
    let text = if is_jsonl(path) {
        sids_to_jsonl(rows)?
    } else {
        sids_to_csv(rows)?
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_sids(path: &Path) -> Result<Vec<SidRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = if is_jsonl(path) {
        sids_from_jsonl(&text)?
    } else {
        sids_from_csv(&text)?
    };
    check_rows(&rows)?;
    Ok(rows)
}
