use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, PointCloud, Split};
use crate::error::{Error, Result};

/// Reads whitespace-separated `x y z` lines. Blank lines and `#` comments
/// are skipped; the cloud is returned as read, without normalization.
pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(
                i + 1,
                format!("expected 3 values, found {}", fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (slot, field) in p.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| parse_err(i + 1, format!("'{field}': {e}")))?;
            if !slot.is_finite() {
                return Err(parse_err(i + 1, format!("non-finite value '{field}'")));
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Data(format!("{}: no points", path.display())));
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let cloud = PointCloud::new(points)?;
    Ok(match name {
        Some(n) => cloud.with_name(n),
        None => cloud,
    })
}

pub fn save_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    save_xyz_points(cloud.points(), path)
}

/// Writes points with shortest round-trip formatting, so reading the file
/// back reproduces every coordinate exactly.
pub fn save_xyz_points(points: &[[f64; 3]], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(points.len() * 64);
    for p in points {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    write_file(path.as_ref(), out.as_bytes())
}

const GRAY: [u8; 3] = [128, 128, 128];
const RED: [u8; 3] = [255, 0, 0];

/// ASCII PLY 1.0 with per-vertex color: cloud points gray, keypoints red
/// and appended after the cloud.
pub fn save_ply(
    cloud: &PointCloud,
    keypoints: Option<&[[f64; 3]]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let keypoints = keypoints.unwrap_or(&[]);
    let total = cloud.len() + keypoints.len();
    let mut out = String::with_capacity(256 + total * 48);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {total}");
    for prop in [
        "float x",
        "float y",
        "float z",
        "uchar red",
        "uchar green",
        "uchar blue",
    ] {
        let _ = writeln!(out, "property {prop}");
    }
    out.push_str("end_header\n");
    let rows = cloud
        .points()
        .iter()
        .map(|p| (p, GRAY))
        .chain(keypoints.iter().map(|p| (p, RED)));
    for (p, [r, g, b]) in rows {
        let _ = writeln!(
            out,
            "{} {} {} {r} {g} {b}",
            p[0] as f32, p[1] as f32, p[2] as f32
        );
    }
    write_file(path.as_ref(), out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Dataset manifest: class table plus one entry per cloud file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub n_points: usize,
    pub clouds: Vec<ManifestEntry>,
}

/// Writes every cloud as `<split>/<name>.xyz` under `dir` plus
/// `dir/manifest.json`; returns the manifest path.
pub fn save_dataset(dir: impl AsRef<Path>, train: &Dataset, test: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if train.class_names() != test.class_names() {
        return Err(Error::Data("train and test class tables differ".into()));
    }
    let n_points = train
        .n_points()
        .or(test.n_points())
        .ok_or_else(|| Error::Data("cannot save an empty dataset".into()))?;
    if test.n_points().is_some_and(|n| n != n_points) {
        return Err(Error::Data("train and test point counts differ".into()));
    }
    let mut entries = Vec::new();
    for ds in [train, test] {
        for (i, cloud) in ds.clouds().iter().enumerate() {
            let label = cloud.label().ok_or_else(|| {
                Error::Data(format!("cloud {i} of {} split has no label", ds.split()))
            })?;
            let stem = cloud
                .name()
                .map(str::to_string)
                .unwrap_or_else(|| format!("cloud_{i:05}"));
            let rel = PathBuf::from(ds.split().to_string()).join(format!("{stem}.xyz"));
            save_xyz(cloud, dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                label,
                split: ds.split(),
            });
        }
    }
    let manifest = Manifest {
        classes: train.class_names().to_vec(),
        n_points,
        clouds: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&path, json.as_bytes())?;
    Ok(path)
}

/// Loads both splits named by a manifest. Clouds are normalized on load.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Manifest, Dataset, Dataset)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in &manifest.clouds {
        if entry.label >= manifest.classes.len() {
            return Err(Error::LabelOutOfRange {
                label: entry.label,
                classes: manifest.classes.len(),
            });
        }
        let cloud = load_xyz(base.join(&entry.path))?;
        if cloud.len() != manifest.n_points {
            return Err(Error::PointCount {
                context: entry.path.display().to_string(),
                expected: manifest.n_points,
                found: cloud.len(),
            });
        }
        let cloud = cloud.normalize()?.with_label(entry.label);
        match entry.split {
            Split::Train => train.push(cloud),
            Split::Test => test.push(cloud),
        }
    }
    let train = Dataset::new(train, manifest.classes.clone(), Split::Train)?;
    let test = Dataset::new(test, manifest.classes.clone(), Split::Test)?;
    Ok((manifest, train, test))
}
