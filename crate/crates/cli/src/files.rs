//! On-disk formats: `PCSEG v1` point clouds, pool directories, and atomic
//! writes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use coseg_core::geometry::PointCloud;

use crate::error::CliError;

pub const POINT_CLOUD_EXT: &str = "pcseg";

/// Header line `PCSEG v1 <N>`, then one `x y z r g b label` line per point.
pub fn point_cloud_to_text(cloud: &PointCloud) -> String {
    let mut out = format!("PCSEG v1 {}\n", cloud.len());
    for ((p, c), l) in cloud
        .positions()
        .iter()
        .zip(cloud.colors())
        .zip(cloud.labels())
    {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            p[0], p[1], p[2], c[0], c[1], c[2], l
        );
    }
    out
}

pub fn point_cloud_from_text(text: &str) -> Result<PointCloud, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let count: usize = match header.split_whitespace().collect::<Vec<_>>()[..] {
        ["PCSEG", "v1", n] => n
            .parse()
            .map_err(|e| format!("bad point count `{n}`: {e}"))?,
        _ => return Err(format!("bad header `{header}`")),
    };
    let mut positions = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        if i >= count {
            if line.trim().is_empty() {
                continue;
            }
            return Err(format!("more than {count} point lines"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(format!(
                "point {i}: expected 7 fields, got {}",
                fields.len()
            ));
        }
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[..6]) {
            *slot = f
                .parse()
                .map_err(|e| format!("point {i}: bad number `{f}`: {e}"))?;
        }
        positions.push([v[0], v[1], v[2]]);
        colors.push([v[3], v[4], v[5]]);
        labels.push(
            fields[6]
                .parse()
                .map_err(|e| format!("point {i}: bad label: {e}"))?,
        );
    }
    if positions.len() != count {
        return Err(format!(
            "header promises {count} points, found {}",
            positions.len()
        ));
    }
    PointCloud::new(positions, colors, labels).map_err(|e| e.to_string())
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud, CliError> {
    point_cloud_from_text(&read_text(path)?).map_err(|m| CliError::format(path, m))
}

/// Writes via a temporary file in the target directory and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
    tmp.write_all(contents.as_bytes())
        .map_err(|e| CliError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Point-cloud files of a pool directory, sorted by file name.
pub fn pool_files(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some(POINT_CLOUD_EXT) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(CliError::format(dir, "no .pcseg files in pool directory"));
    }
    Ok(names)
}

/// Loads every cloud of a pool directory with its file name.
pub fn load_pool(dir: &Path) -> Result<(Vec<String>, Vec<PointCloud>), CliError> {
    let names = pool_files(dir)?;
    let clouds = names
        .iter()
        .map(|n| read_point_cloud(&dir.join(n)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((names, clouds))
}
