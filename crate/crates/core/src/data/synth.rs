//! Parametric shape families with uniform surface sampling.
//!
//! Each generated instance draws its own shape parameters (extents, radii)
//! from a fixed range, so a class is a family of shapes rather than one
//! template. All shapes are centered on the origin and centrally
//! symmetric; samples are emitted in antipodal pairs `(p, -p)`, which keeps
//! the sample centroid at the origin for even point counts.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Dataset, PointCloud, Split};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Box,
    Cylinder,
    Torus,
    TwoSpheres,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Sphere,
        ShapeClass::Box,
        ShapeClass::Cylinder,
        ShapeClass::Torus,
        ShapeClass::TwoSpheres,
    ];

    /// Position in [`ShapeClass::ALL`].
    pub fn index(self) -> usize {
        ShapeClass::ALL
            .iter()
            .position(|c| *c == self)
            .expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Torus => "torus",
            ShapeClass::TwoSpheres => "two-spheres",
        }
    }

    /// Draws one member of the family.
    pub fn sample_instance(self, rng: &mut ChaCha8Rng) -> Shape {
        match self {
            ShapeClass::Sphere => Shape::Sphere { radius: 1.0 },
            ShapeClass::Box => Shape::Box {
                half_extents: [
                    rng.random_range(0.5..1.0),
                    rng.random_range(0.5..1.0),
                    rng.random_range(0.5..1.0),
                ],
            },
            ShapeClass::Cylinder => Shape::Cylinder {
                radius: rng.random_range(0.3..0.6),
                half_height: rng.random_range(0.6..1.0),
            },
            ShapeClass::Torus => Shape::Torus {
                major: 1.0,
                minor: rng.random_range(0.2..0.45),
            },
            ShapeClass::TwoSpheres => {
                let radius = rng.random_range(0.35..0.5);
                Shape::TwoSpheres {
                    radius,
                    offset: radius + rng.random_range(0.1..0.4),
                }
            }
        }
    }
}

impl std::fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape class '{s}'")))
    }
}

/// A concrete parametric surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: [f64; 3],
    },
    /// Closed cylinder along z, caps included.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Ring around the z axis.
    Torus {
        major: f64,
        minor: f64,
    },
    /// Two equal spheres centered at `(±offset, 0, 0)`.
    TwoSpheres {
        radius: f64,
        offset: f64,
    },
}

fn unit_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

impl Shape {
    fn sample_point(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match *self {
            Shape::Sphere { radius } => unit_direction(rng).map(|v| v * radius),
            Shape::Box {
                half_extents: [a, b, c],
            } => {
                // Face pair chosen in proportion to its area.
                let areas = [b * c, a * c, a * b];
                let total: f64 = areas.iter().sum();
                let mut u = rng.random_range(0.0..total);
                let mut axis = 2;
                for (i, area) in areas.iter().enumerate() {
                    if u < *area {
                        axis = i;
                        break;
                    }
                    u -= area;
                }
                let ext = [a, b, c];
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis {
                        if rng.random_bool(0.5) {
                            ext[k]
                        } else {
                            -ext[k]
                        }
                    } else {
                        rng.random_range(-ext[k]..=ext[k])
                    };
                }
                p
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let caps = 2.0 * PI * radius * radius;
                if rng.random_range(0.0..side + caps) < side {
                    let t = rng.random_range(0.0..2.0 * PI);
                    [
                        radius * t.cos(),
                        radius * t.sin(),
                        rng.random_range(-half_height..=half_height),
                    ]
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let t = rng.random_range(0.0..2.0 * PI);
                    let z = if rng.random_bool(0.5) {
                        half_height
                    } else {
                        -half_height
                    };
                    [r * t.cos(), r * t.sin(), z]
                }
            }
            Shape::Torus { major, minor } => {
                // Area element is proportional to (major + minor cos v).
                let v = loop {
                    let v = rng.random_range(0.0..2.0 * PI);
                    let accept = (major + minor * v.cos()) / (major + minor);
                    if rng.random::<f64>() < accept {
                        break v;
                    }
                };
                let u = rng.random_range(0.0..2.0 * PI);
                let ring = major + minor * v.cos();
                [ring * u.cos(), ring * u.sin(), minor * v.sin()]
            }
            Shape::TwoSpheres { radius, offset } => {
                let d = unit_direction(rng);
                let cx = if rng.random_bool(0.5) {
                    offset
                } else {
                    -offset
                };
                [cx + radius * d[0], radius * d[1], radius * d[2]]
            }
        }
    }

    /// `n` surface samples in antipodal pairs.
    pub fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(n);
        while out.len() + 1 < n {
            let p = self.sample_point(rng);
            out.push(p);
            out.push(p.map(|v| -v));
        }
        if out.len() < n {
            out.push(self.sample_point(rng));
        }
        out
    }

    /// Whether `p` lies on the surface within `tol`.
    pub fn on_surface(&self, p: [f64; 3], tol: f64) -> bool {
        let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        match *self {
            Shape::Sphere { radius } => (norm(p) - radius).abs() <= tol,
            Shape::Box { half_extents } => {
                let inside = (0..3).all(|k| p[k].abs() <= half_extents[k] + tol);
                let on_face = (0..3).any(|k| (p[k].abs() - half_extents[k]).abs() <= tol);
                inside && on_face
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let side = (r - radius).abs() <= tol && p[2].abs() <= half_height + tol;
                let cap = (p[2].abs() - half_height).abs() <= tol && r <= radius + tol;
                side || cap
            }
            Shape::Torus { major, minor } => {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                (((r - major).powi(2) + p[2] * p[2]).sqrt() - minor).abs() <= tol
            }
            Shape::TwoSpheres { radius, offset } => {
                (norm([p[0] - offset, p[1], p[2]]) - radius).abs() <= tol
                    || (norm([p[0] + offset, p[1], p[2]]) - radius).abs() <= tol
            }
        }
    }
}

/// Unnormalized sample of one shape instance, with the instance itself.
pub fn synth_generate_raw(
    class: ShapeClass,
    n_points: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<(Shape, PointCloud)> {
    if n_points < 8 {
        return Err(Error::Config(format!(
            "synthetic clouds need at least 8 points, got {n_points}"
        )));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Config(format!(
            "noise sigma must be finite and >= 0, got {noise_sigma}"
        )));
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let shape = class.sample_instance(&mut rng);
    let mut points = shape.sample_surface(n_points, &mut rng);
    if noise_sigma > 0.0 {
        let jitter = Normal::new(0.0, noise_sigma).expect("validated sigma");
        for p in &mut points {
            for v in p.iter_mut() {
                *v += jitter.sample(&mut rng);
            }
        }
    }
    Ok((shape, PointCloud::new(points)?))
}

/// Normalized synthetic cloud of the given class, labelled by class order in
/// [`ShapeClass::ALL`] unless relabelled by the caller.
pub fn synth_generate(
    class: ShapeClass,
    n_points: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<PointCloud> {
    let (_, cloud) = synth_generate_raw(class, n_points, seed, noise_sigma)?;
    Ok(cloud
        .normalize()?
        .with_label(class.index())
        .with_name(class.name()))
}

/// Balanced train/test splits; labels index into `classes`. Every cloud has
/// its own seed derived from `(seed, split, index)`.
pub fn make_dataset(
    classes: &[ShapeClass],
    per_class_train: usize,
    per_class_test: usize,
    n_points: usize,
    seed: u64,
    noise: f64,
) -> Result<(Dataset, Dataset)> {
    if classes.len() < 2 {
        return Err(Error::Config("a dataset needs at least 2 classes".into()));
    }
    for (i, c) in classes.iter().enumerate() {
        if classes[..i].contains(c) {
            return Err(Error::Config(format!("duplicate class '{c}'")));
        }
    }
    let names: Vec<String> = classes.iter().map(|c| c.name().to_string()).collect();
    let build = |split: Split, per_class: usize, stream: Stream| -> Result<Dataset> {
        let mut clouds = Vec::with_capacity(per_class * classes.len());
        for (label, class) in classes.iter().enumerate() {
            for i in 0..per_class {
                let index = (label * per_class + i) as u64;
                let cloud_seed = rand::RngCore::next_u64(&mut stream_rng(seed, stream, index));
                let cloud = synth_generate(*class, n_points, cloud_seed, noise)?
                    .with_label(label)
                    .with_name(format!("{}_{:04}", class.name(), i));
                clouds.push(cloud);
            }
        }
        Dataset::new(clouds, names.clone(), split)
    };
    Ok((
        build(Split::Train, per_class_train, Stream::SynthTrain)?,
        build(Split::Test, per_class_test, Stream::SynthTest)?,
    ))
}
