//! Point clouds, file formats, and the synthetic shape dataset.

mod io;
mod mesh;
mod synth;

pub(crate) use io::write_file as io_write_file;
pub use io::{
    load_manifest, load_xyz, save_dataset, save_ply, save_xyz, save_xyz_points, Manifest,
    ManifestEntry,
};
pub use mesh::{load_off, TriangleMesh};
pub use synth::{make_dataset, synth_generate, synth_generate_raw, Shape, ShapeClass};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A set of 3-D points with optional class label and name.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    label: Option<usize>,
    name: Option<String>,
}

/// The affine map applied by [`PointCloud::normalize`]:
/// `normalized = (original - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale + self.center[0],
            p[1] * self.scale + self.center[1],
            p[2] * self.scale + self.center[2],
        ]
    }
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(Self {
            points,
            label: None,
            name: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.points)
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Per-axis `(min, max)`.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Centers on the centroid and scales into the unit ball.
    pub fn normalize(&self) -> Result<PointCloud> {
        self.normalize_with_transform().map(|(c, _)| c)
    }

    pub fn normalize_with_transform(&self) -> Result<(PointCloud, Normalization)> {
        if self.points.is_empty() {
            return Err(Error::EmptyInput("normalize"));
        }
        let center = self.centroid();
        let centered: Vec<[f64; 3]> = self
            .points
            .iter()
            .map(|p| [p[0] - center[0], p[1] - center[1], p[2] - center[2]])
            .collect();
        let scale = centered
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        if !(scale > 0.0) {
            return Err(Error::Data("cannot normalize a zero-extent cloud".into()));
        }
        let points = centered
            .into_iter()
            .map(|p| [p[0] / scale, p[1] / scale, p[2] / scale])
            .collect();
        Ok((
            PointCloud {
                points,
                label: self.label,
                name: self.name.clone(),
            },
            Normalization { center, scale },
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labelled clouds sharing one point count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    clouds: Vec<PointCloud>,
    class_names: Vec<String>,
    split: Split,
}

impl Dataset {
    pub fn new(clouds: Vec<PointCloud>, class_names: Vec<String>, split: Split) -> Result<Self> {
        if let Some(first) = clouds.first() {
            let n = first.len();
            if let Some(bad) = clouds.iter().find(|c| c.len() != n) {
                return Err(Error::PointCount {
                    context: format!("{split} split"),
                    expected: n,
                    found: bad.len(),
                });
            }
        }
        for c in &clouds {
            if let Some(l) = c.label() {
                if l >= class_names.len() {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        classes: class_names.len(),
                    });
                }
            }
        }
        Ok(Self {
            clouds,
            class_names,
            split,
        })
    }

    pub fn clouds(&self) -> &[PointCloud] {
        &self.clouds
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Shared point count, `None` for an empty dataset.
    pub fn n_points(&self) -> Option<usize> {
        self.clouds.first().map(PointCloud::len)
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.clouds.iter().map(PointCloud::label).collect()
    }
}
