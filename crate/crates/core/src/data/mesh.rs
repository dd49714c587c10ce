//! OFF triangle meshes (the ModelNet file format) and area-weighted
//! surface sampling to a fixed point count.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

/// Parses an OFF file. Polygonal faces are fan-triangulated.
pub fn load_off(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_off(&text).map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })
}

fn parse_off(text: &str) -> std::result::Result<TriangleMesh, (usize, String)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (line, header) = lines.next().ok_or((1, "empty file".to_string()))?;
    // Some ModelNet files glue the counts onto the header: "OFF490 518 0".
    let counts = header
        .strip_prefix("OFF")
        .ok_or((line, "missing OFF header".to_string()))?
        .trim();
    let (line, counts) = if counts.is_empty() {
        lines.next().ok_or((line, "missing counts".to_string()))?
    } else {
        (line, counts)
    };
    let nums: Vec<usize> = counts
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| (line, format!("bad count '{s}'"))))
        .collect::<std::result::Result<_, _>>()?;
    let [n_vertices, n_faces, ..] = nums[..] else {
        return Err((line, "expected vertex and face counts".to_string()));
    };

    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (line, l) = lines
            .next()
            .ok_or((0, "truncated vertex list".to_string()))?;
        let v: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|s| {
                s.parse()
                    .map_err(|_| (line, format!("bad coordinate '{s}'")))
            })
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != 3 {
            return Err((line, "vertex needs 3 coordinates".to_string()));
        }
        vertices.push([v[0], v[1], v[2]]);
    }

    let mut triangles = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (line, l) = lines.next().ok_or((0, "truncated face list".to_string()))?;
        let f: Vec<usize> = l
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| (line, format!("bad index '{s}'"))))
            .collect::<std::result::Result<_, _>>()?;
        let Some((&n, rest)) = f.split_first() else {
            return Err((line, "empty face".to_string()));
        };
        if n < 3 || rest.len() < n {
            return Err((line, format!("face declares {n} vertices")));
        }
        let idx = &rest[..n];
        if let Some(bad) = idx.iter().find(|&&i| i >= n_vertices) {
            return Err((line, format!("vertex index {bad} out of range")));
        }
        for k in 1..n - 1 {
            triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
    })
}

impl TriangleMesh {
    fn area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.area(t)).sum()
    }

    /// `n` points drawn uniformly over the surface (triangle chosen by area,
    /// then a uniform barycentric point).
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<PointCloud> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in &self.triangles {
            total += self.area(t);
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::Data("mesh has zero surface area".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.random_range(0.0..total);
            let ti = cumulative
                .partition_point(|&c| c <= u)
                .min(self.triangles.len() - 1);
            let [a, b, c] = self.triangles[ti].map(|i| self.vertices[i]);
            let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = a[k] + r1 * (b[k] - a[k]) + r2 * (c[k] - a[k]);
            }
            points.push(p);
        }
        PointCloud::new(points)
    }
}
