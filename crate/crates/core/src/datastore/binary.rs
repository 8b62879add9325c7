//! Little-endian float32 payloads and their per-directory descriptor files.

use std::fs;
use std::path::{Path, PathBuf};

use super::csv::{write_file, Table, TableWriter};
use super::{DatastoreError, DepthImage, FeatureArray, FeatureSet};

pub const DTYPE: &str = "float32";

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(path: &Path, bytes: &[u8]) -> Result<Vec<f32>, DatastoreError> {
    if bytes.len() % 4 != 0 {
        return Err(DatastoreError::BinaryShapeMismatch {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of float32 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, DatastoreError> {
    fs::read(path).map_err(|e| DatastoreError::io(path, e))
}

pub fn read_array(path: &Path, cols: usize) -> Result<FeatureArray, DatastoreError> {
    let values = decode_f32(path, &read_bytes(path)?)?;
    if cols == 0 || values.len() % cols != 0 {
        return Err(DatastoreError::BinaryShapeMismatch {
            path: path.to_path_buf(),
            reason: format!("{} values do not form rows of {cols}", values.len()),
        });
    }
    FeatureArray::new(values.len() / cols, cols, values)
}

/// Recursively lists files under `dir` whose name ends with `suffix`, as
/// `/`-separated paths relative to `dir`, sorted.
pub fn list_files(dir: &Path, suffix: &str) -> Result<Vec<String>, DatastoreError> {
    fn walk(base: &Path, dir: &Path, suffix: &str, out: &mut Vec<String>) -> Result<(), DatastoreError> {
        let entries = fs::read_dir(dir).map_err(|e| DatastoreError::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| DatastoreError::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(base, &path, suffix, out)?;
            } else if let Some(name) = path.to_str() {
                if name.ends_with(suffix) {
                    let rel = path.strip_prefix(base).expect("walk stays under base");
                    let parts: Vec<String> = rel
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy().into_owned())
                        .collect();
                    out.push(parts.join("/"));
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.is_dir() {
        walk(dir, dir, suffix, &mut out)?;
    }
    out.sort();
    Ok(out)
}

pub fn join_rel(base: &Path, rel: &str) -> PathBuf {
    rel.split('/').fold(base.to_path_buf(), |p, part| p.join(part))
}

/// Writes `<dir>/<kind>.txt` (name, dtype, dsize) and one payload per image.
pub fn save_feature_set(
    dir: &Path,
    kind: &str,
    name: &str,
    extension: &str,
    set: &FeatureSet,
) -> Result<(), DatastoreError> {
    let mut w = TableWriter::new(kind);
    w.row([name, DTYPE, &set.dsize.to_string()]);
    w.write_to(&dir.join(format!("{kind}.txt")))?;
    for (image, arr) in &set.arrays {
        let path = join_rel(dir, &format!("{image}{extension}"));
        write_file(&path, &encode_f32(arr.data()))?;
    }
    Ok(())
}

/// Loads every feature type found under `parent` (one subdirectory each).
pub fn load_feature_sets(
    parent: &Path,
    kind: &str,
    extension: &str,
) -> Result<Vec<(String, FeatureSet)>, DatastoreError> {
    let mut out = Vec::new();
    if !parent.is_dir() {
        return Ok(out);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(parent)
        .map_err(|e| DatastoreError::io(parent, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let desc_path = dir.join(format!("{kind}.txt"));
        let table = Table::read(&desc_path)?
            .ok_or_else(|| DatastoreError::MissingFile(desc_path.clone()))?;
        let row = table
            .rows()
            .next()
            .ok_or_else(|| DatastoreError::MalformedCsv {
                file: desc_path.clone(),
                line: 1,
                reason: "missing descriptor row".into(),
            })?;
        row.expect_len(&[3])?;
        let name = row.str(0)?.to_string();
        if row.str(1)? != DTYPE {
            return Err(row.error(format!("unsupported dtype `{}`", row.str(1)?)));
        }
        let dsize: usize = row.parse(2)?;
        if dsize == 0 {
            return Err(row.error("dsize must be positive"));
        }
        let dir_name = dir.file_name().map(|s| s.to_string_lossy().into_owned());
        if dir_name.as_deref() != Some(name.as_str()) {
            return Err(row.error(format!("type `{name}` does not match its directory")));
        }
        let mut set = FeatureSet::new(dsize);
        for rel in list_files(&dir, extension)? {
            let image = rel[..rel.len() - extension.len()].to_string();
            let arr = read_array(&join_rel(&dir, &rel), dsize)?;
            set.arrays.insert(image, arr);
        }
        out.push((name, set));
    }
    Ok(out)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn save_depth_map(path: &Path, depth: &DepthImage) -> Result<(), DatastoreError> {
    if depth.data.len() != depth.width as usize * depth.height as usize {
        return Err(DatastoreError::SizeMismatch {
            path: path.to_path_buf(),
            expected: depth.width as usize * depth.height as usize,
            actual: depth.data.len(),
        });
    }
    write_file(path, &encode_f32(&depth.data))?;
    let mut w = TableWriter::new("depth");
    w.row([depth.width.to_string(), depth.height.to_string()]);
    w.write_to(&meta_path(path))
}

/// Reads a float32 depth payload and its `.meta` sidecar (`width, height`).
pub fn load_depth_map(path: &Path) -> Result<DepthImage, DatastoreError> {
    let meta = meta_path(path);
    let table = Table::read(&meta)?.ok_or_else(|| DatastoreError::MissingFile(meta.clone()))?;
    let row = table.rows().next().ok_or_else(|| DatastoreError::MalformedCsv {
        file: meta.clone(),
        line: 1,
        reason: "missing size row".into(),
    })?;
    row.expect_len(&[2])?;
    let width: u32 = row.parse(0)?;
    let height: u32 = row.parse(1)?;
    let data = decode_f32(path, &read_bytes(path)?)?;
    let expected = width as usize * height as usize;
    if data.len() != expected {
        return Err(DatastoreError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: data.len(),
        });
    }
    if let Some(index) = data.iter().position(|d| *d < 0.0 || d.is_nan()) {
        return Err(DatastoreError::NegativeDepth { path: path.to_path_buf(), index });
    }
    Ok(DepthImage { width, height, data })
}
