//! Versioned JSON files for worlds, sessions and maps.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::MultiSessionMap;
use crate::synthworld::{SessionRecord, World, SESSION_SCHEMA, WORLD_SCHEMA};

pub const MAP_SCHEMA: &str = "msslam.map/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: malformed document: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: expected schema {expected}, found {found}")]
    Schema {
        path: String,
        expected: &'static str,
        found: String,
    },
}

#[derive(Serialize)]
struct MapOut<'a> {
    schema: &'static str,
    #[serde(flatten)]
    map: &'a MultiSessionMap,
}

#[derive(Deserialize)]
struct MapIn {
    schema: String,
    #[serde(flatten)]
    map: MultiSessionMap,
}

#[derive(Deserialize)]
struct SchemaOnly {
    schema: String,
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse<T: DeserializeOwned>(path: &Path, text: &str, expected: &'static str) -> Result<T, IoError> {
    let json = |source| IoError::Json {
        path: path.display().to_string(),
        source,
    };
    let head: SchemaOnly = serde_json::from_str(text).map_err(json)?;
    if head.schema != expected {
        return Err(IoError::Schema {
            path: path.display().to_string(),
            expected,
            found: head.schema,
        });
    }
    serde_json::from_str(text).map_err(json)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("in-memory documents serialize")
}

pub fn map_to_string(map: &MultiSessionMap) -> String {
    to_json(&MapOut { schema: MAP_SCHEMA, map })
}

/// SHA-256 of the canonical map document, hex encoded.
pub fn map_hash(map: &MultiSessionMap) -> String {
    Sha256::digest(map_to_string(map).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parses a map document held in memory.
pub fn map_from_str(text: &str) -> Result<MultiSessionMap, IoError> {
    let m: MapIn = parse(Path::new("<memory>"), text, MAP_SCHEMA)?;
    Ok(m.map)
}

pub fn world_from_str(text: &str) -> Result<World, IoError> {
    parse(Path::new("<memory>"), text, WORLD_SCHEMA)
}

pub fn session_from_str(text: &str) -> Result<SessionRecord, IoError> {
    parse(Path::new("<memory>"), text, SESSION_SCHEMA)
}

pub fn to_string<T: Serialize>(value: &T) -> String {
    to_json(value)
}

pub fn save_map(path: &Path, map: &MultiSessionMap) -> Result<(), IoError> {
    write(path, &map_to_string(map))
}

pub fn load_map(path: &Path) -> Result<MultiSessionMap, IoError> {
    let m: MapIn = parse(path, &read(path)?, MAP_SCHEMA)?;
    debug_assert_eq!(m.schema, MAP_SCHEMA);
    Ok(m.map)
}

pub fn save_world(path: &Path, world: &World) -> Result<(), IoError> {
    write(path, &to_json(world))
}

pub fn load_world(path: &Path) -> Result<World, IoError> {
    parse(path, &read(path)?, WORLD_SCHEMA)
}

pub fn save_session(path: &Path, session: &SessionRecord) -> Result<(), IoError> {
    write(path, &to_json(session))
}

pub fn load_session(path: &Path) -> Result<SessionRecord, IoError> {
    parse(path, &read(path)?, SESSION_SCHEMA)
}
