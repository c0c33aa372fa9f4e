//! On-disk catalog format.
//!
//! ```text
//! <dir>/interactions.csv        user_id,item_id
//! <dir>/item_attributes.jsonl   {"item": 0, "attrs": [3, 7]}
//! <dir>/profiles.jsonl          {"user": 0, "role": "train", "pref_attrs": [1, 4]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Catalog, UserProfile};
use crate::error::{Error, Result};

pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const ITEM_ATTRS_FILE: &str = "item_attributes.jsonl";
pub const PROFILES_FILE: &str = "profiles.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    item: usize,
    attrs: Vec<usize>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_interactions(path: &Path) -> Result<Vec<(usize, usize)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["user_id", "item_id"] {
        return Err(parse_err(path, 1, "expected header \"user_id,item_id\""));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| -> Result<usize> {
            record[i]
                .parse::<usize>()
                .map_err(|_| parse_err(path, line, format!("not a non-negative integer: {:?}", &record[i])))
        };
        out.push((field(0)?, field(1)?));
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `interactions.csv` and `item_attributes.jsonl` from `dir`.
///
/// User and attribute counts are one past the largest id seen; item ids must
/// be exactly `0..n` in the attribute file.
pub fn load_catalog(dir: &Path) -> Result<Catalog> {
    let inter_path = dir.join(INTERACTIONS_FILE);
    let attr_path = dir.join(ITEM_ATTRS_FILE);
    let interactions = read_interactions(&inter_path)?;
    if interactions.is_empty() {
        return Err(Error::Validation(format!("{} has no interactions", inter_path.display())));
    }
    let records: Vec<ItemRecord> = read_jsonl(&attr_path)?;
    let mut item_attrs: Vec<Option<Vec<usize>>> = vec![None; records.len()];
    for r in records {
        let slot = item_attrs.get_mut(r.item).ok_or_else(|| {
            Error::Validation(format!("item ids in {} are not dense: saw {}", attr_path.display(), r.item))
        })?;
        if slot.is_some() {
            return Err(Error::Validation(format!("item {} listed twice", r.item)));
        }
        *slot = Some(r.attrs);
    }
    let item_attrs: Vec<Vec<usize>> = item_attrs.into_iter().map(Option::unwrap).collect();
    let n_users = interactions.iter().map(|p| p.0).max().map_or(0, |m| m + 1);
    let n_attrs = item_attrs.iter().flatten().copied().max().map_or(0, |m| m + 1);
    Catalog::new(n_users, n_attrs, item_attrs, interactions)
}

pub fn save_catalog(catalog: &Catalog, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let inter_path = dir.join(INTERACTIONS_FILE);
    let mut w = csv::Writer::from_path(&inter_path).map_err(|e| csv_io(&inter_path, e))?;
    w.write_record(["user_id", "item_id"]).map_err(|e| csv_io(&inter_path, e))?;
    for &(u, v) in catalog.interactions() {
        w.serialize((u, v)).map_err(|e| csv_io(&inter_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&inter_path, e))?;
    write_jsonl(
        &dir.join(ITEM_ATTRS_FILE),
        catalog.all_item_attrs().iter().enumerate().map(|(item, attrs)| ItemRecord {
            item,
            attrs: attrs.clone(),
        }),
    )
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(PathBuf::from(path), std::io::Error::other(e.to_string()))
}

pub fn save_profiles(profiles: &[UserProfile], path: &Path) -> Result<()> {
    write_jsonl(path, profiles)
}

pub fn load_profiles(path: &Path) -> Result<Vec<UserProfile>> {
    let profiles: Vec<UserProfile> = read_jsonl(path)?;
    for p in &profiles {
        if p.pref_attrs.is_empty() {
            return Err(Error::Validation(format!("user {} has an empty preference set", p.user)));
        }
    }
    Ok(profiles)
}
