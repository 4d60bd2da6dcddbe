//! JSON persistence for scenes and query sets.
//!
//! Scene file:
//! `{"bounds": [w, h], "seed": u64, "instances": [{"id", "class", "points": [[x, y, z, r, g, b], ...]}]}`
//! with classes in kebab case (`traffic-sign`, `trash-bin`, ...).
//!
//! Query file:
//! `{"train": [query], "val": [query]}` where each query is
//! `{"id", "target": [x, y], "hints": [{"text", "instance_id"}], "gt_instance_ids", "positive_cell_ids"}`.
//! Hint word groups are recovered by parsing `text` on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{QuerySample, Scene};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub train: Vec<QuerySample>,
    pub val: Vec<QuerySample>,
}

/// Writes `bytes` next to `path` and renames over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_json(path, scene)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    read_json(path)
}

pub fn save_queries(path: &Path, queries: &QuerySet) -> Result<()> {
    write_json(path, queries)
}

pub fn load_queries(path: &Path) -> Result<QuerySet> {
    read_json(path)
}
