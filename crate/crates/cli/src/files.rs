//! Cube-file discovery and pairing conventions.
//!
//! Datasets live in flat directories of `.cube` files. Paired samples use a
//! shared stem with role suffixes: `<id>.rgb.cube` / `<id>.hsi.cube`;
//! predictions are written as `<id>.pred.cube`. Listings are sorted by file
//! name so every directory scan is deterministic.

use std::fs;
use std::path::{Path, PathBuf};

use mcga_core::data::{HsiCube, Sample};
use mcga_core::io::read_cube;

use crate::CliError;

/// All `.cube` files in `dir` as `(stem, path)`, sorted by stem. The stem is
/// the file name with the final `.cube` removed (role suffixes stay).
pub fn cube_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("cannot list {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Runtime(format!("listing {}: {e}", dir.display())))?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(".cube") {
            files.push((stem.to_string(), path));
        }
    }
    files.sort();
    Ok(files)
}

/// Load every `<id>.hsi.cube` in `dir`, sorted by id.
pub fn load_hsi_cubes(dir: &Path) -> Result<Vec<(String, HsiCube)>, CliError> {
    let mut out = Vec::new();
    for (stem, path) in cube_files(dir)? {
        if let Some(id) = stem.strip_suffix(".hsi") {
            out.push((id.to_string(), read_cube(&path)?));
        }
    }
    if out.is_empty() {
        return Err(CliError::Runtime(format!(
            "no *.hsi.cube files found in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Load every id with both `<id>.rgb.cube` and `<id>.hsi.cube`, sorted.
/// An id with only one half of the pair is an error: silently dropping data
/// would make training sets depend on stray files.
pub fn load_pairs(dir: &Path) -> Result<Vec<Sample>, CliError> {
    let files = cube_files(dir)?;
    let mut rgb = std::collections::BTreeMap::new();
    let mut hsi = std::collections::BTreeMap::new();
    for (stem, path) in files {
        if let Some(id) = stem.strip_suffix(".rgb") {
            rgb.insert(id.to_string(), path);
        } else if let Some(id) = stem.strip_suffix(".hsi") {
            hsi.insert(id.to_string(), path);
        }
    }
    for id in rgb.keys() {
        if !hsi.contains_key(id) {
            return Err(CliError::Runtime(format!(
                "{}: '{id}.rgb.cube' has no matching '{id}.hsi.cube'",
                dir.display()
            )));
        }
    }
    let mut pairs = Vec::with_capacity(hsi.len());
    for (id, hsi_path) in &hsi {
        let Some(rgb_path) = rgb.get(id) else {
            return Err(CliError::Runtime(format!(
                "{}: '{id}.hsi.cube' has no matching '{id}.rgb.cube'",
                dir.display()
            )));
        };
        pairs.push(Sample {
            id: id.clone(),
            rgb: read_cube(rgb_path)?,
            hsi: read_cube(hsi_path)?,
        });
    }
    if pairs.is_empty() {
        return Err(CliError::Runtime(format!(
            "no rgb/hsi cube pairs found in {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

/// Evaluation id of a cube file stem: a trailing `.pred` (prediction dirs) or
/// `.hsi` (ground-truth dirs) role tag is dropped; other stems, including
/// `<id>.rgb`, stand for themselves.
pub fn eval_id(stem: &str) -> &str {
    stem.strip_suffix(".pred")
        .or_else(|| stem.strip_suffix(".hsi"))
        .unwrap_or(stem)
}

/// Map a directory to `eval id -> path`, rejecting ids that resolve twice.
pub fn eval_index(dir: &Path) -> Result<std::collections::BTreeMap<String, PathBuf>, CliError> {
    let mut map = std::collections::BTreeMap::new();
    for (stem, path) in cube_files(dir)? {
        let id = eval_id(&stem).to_string();
        if let Some(previous) = map.insert(id.clone(), path.clone()) {
            return Err(CliError::Runtime(format!(
                "{}: id '{id}' is claimed by both {} and {}",
                dir.display(),
                previous.display(),
                path.display()
            )));
        }
    }
    if map.is_empty() {
        return Err(CliError::Runtime(format!(
            "no .cube files found in {}",
            dir.display()
        )));
    }
    Ok(map)
}

/// Create `dir` (and parents) if needed.
pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}
