//! Hard keypoint selection: score-ordered NMS over the encoder's
//! distributions, plus farthest-point and random baselines.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sq_dist, Tensor};
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_NMS_RADIUS: f64 = 0.1;

/// Selected points of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct HardKeypoints {
    /// Distinct indices into the cloud.
    pub indices: Vec<usize>,
    /// `points[i] == cloud[indices[i]]`.
    pub points: Vec<[f64; 3]>,
    /// Score of each selected point (FPS and random report zeros).
    pub scores: Vec<f64>,
    /// Number of leading picks made by NMS proper; the rest came from the
    /// fallback policy.
    pub pre_fallback: usize,
    /// Suppression radius in force for the first `pre_fallback` picks.
    pub radius: f64,
}

impl HardKeypoints {
    fn from_indices(
        cloud: &PointCloud,
        indices: Vec<usize>,
        scores: Vec<f64>,
        pre_fallback: usize,
        radius: f64,
    ) -> Self {
        let points = indices.iter().map(|&i| cloud.points()[i]).collect();
        Self {
            indices,
            points,
            scores,
            pre_fallback,
            radius,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Fill remaining slots with the best suppressed points.
    #[default]
    TopUp,
    /// Halve the radius and rerun until `k` points survive.
    ShrinkRadius,
}

impl std::str::FromStr for Fallback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top-up" => Ok(Fallback::TopUp),
            "shrink-radius" => Ok(Fallback::ShrinkRadius),
            other => Err(Error::Config(format!(
                "unknown NMS fallback '{other}' (expected top-up or shrink-radius)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    /// Points closer than this to a selected point are suppressed. Zero
    /// disables suppression.
    pub radius: f64,
    pub fallback: Fallback,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            radius: DEFAULT_NMS_RADIUS,
            fallback: Fallback::TopUp,
        }
    }
}

/// Per-point score: the largest probability any keypoint distribution puts
/// on the point (column max of `D [k,N]`).
pub fn point_scores(distributions: &Tensor) -> Result<Vec<f64>> {
    let (k, n) = distributions.dims2("point_scores")?;
    if k == 0 {
        return Err(Error::EmptyInput("point_scores"));
    }
    let mut scores = distributions.row(0).to_vec();
    for i in 1..k {
        for (s, &v) in scores.iter_mut().zip(distributions.row(i)) {
            *s = s.max(v);
        }
    }
    debug_assert_eq!(scores.len(), n);
    Ok(scores)
}

fn check_k(cloud: &PointCloud, k: usize) -> Result<()> {
    if k > cloud.len() {
        return Err(Error::Config(format!(
            "requested {k} keypoints from a cloud of {} points",
            cloud.len()
        )));
    }
    Ok(())
}

/// Indices sorted by descending score, ties by ascending index.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn greedy_nms(points: &[[f64; 3]], order: &[usize], k: usize, radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    let mut selected: Vec<usize> = Vec::with_capacity(k);
    for &i in order {
        if selected.len() == k {
            break;
        }
        let suppressed = radius > 0.0
            && selected
                .iter()
                .any(|&s| sq_dist(&points[s], &points[i]) < r2);
        if !suppressed {
            selected.push(i);
        }
    }
    selected
}

/// Greedy non-maximum suppression: take the best unsuppressed point, then
/// suppress everything within `radius` of it; repeat until `k` points are
/// chosen, using the fallback policy if candidates run out.
pub fn nms_select(
    cloud: &PointCloud,
    scores: &[f64],
    k: usize,
    nms: &NmsConfig,
) -> Result<HardKeypoints> {
    check_k(cloud, k)?;
    if scores.len() != cloud.len() {
        return Err(Error::shape("nms_select", &[cloud.len()], &[scores.len()]));
    }
    if !(nms.radius >= 0.0) || !nms.radius.is_finite() {
        return Err(Error::Config(format!(
            "NMS radius must be finite and >= 0, got {}",
            nms.radius
        )));
    }
    let order = score_order(scores);
    let points = cloud.points();

    let (mut selected, radius) = match nms.fallback {
        Fallback::TopUp => (greedy_nms(points, &order, k, nms.radius), nms.radius),
        Fallback::ShrinkRadius => {
            let mut radius = nms.radius;
            let mut selected = greedy_nms(points, &order, k, radius);
            // Coincident points suppress each other at any positive radius,
            // so give up after the radius has shrunk to nothing.
            for _ in 0..64 {
                if selected.len() == k || radius == 0.0 {
                    break;
                }
                radius *= 0.5;
                selected = greedy_nms(points, &order, k, radius);
            }
            (selected, radius)
        }
    };
    let pre_fallback = selected.len();
    if selected.len() < k {
        for &i in &order {
            if selected.len() == k {
                break;
            }
            if !selected.contains(&i) {
                selected.push(i);
            }
        }
    }
    let picked_scores = selected.iter().map(|&i| scores[i]).collect();
    Ok(HardKeypoints::from_indices(
        cloud,
        selected,
        picked_scores,
        pre_fallback,
        radius,
    ))
}

/// Farthest point sampling from `start`: each step adds the point farthest
/// from everything selected so far (ties to the lowest index).
pub fn fps_select(cloud: &PointCloud, k: usize, start: usize) -> Result<HardKeypoints> {
    check_k(cloud, k)?;
    let points = cloud.points();
    if k == 0 {
        return Ok(HardKeypoints::from_indices(cloud, vec![], vec![], 0, 0.0));
    }
    if start >= points.len() {
        return Err(Error::Config(format!(
            "FPS start index {start} out of range"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; points.len()];
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &points[current]));
            if !taken[i] && best.is_none_or(|(_, d)| nearest[i] > d) {
                best = Some((i, nearest[i]));
            }
        }
        current = best.expect("k <= N leaves a candidate").0;
    }
    let n = selected.len();
    Ok(HardKeypoints::from_indices(
        cloud,
        selected,
        vec![0.0; n],
        n,
        0.0,
    ))
}

/// FPS with the start index drawn from the seed.
pub fn fps_select_seeded(cloud: &PointCloud, k: usize, seed: u64) -> Result<HardKeypoints> {
    if cloud.is_empty() {
        return fps_select(cloud, k, 0);
    }
    let start = rand::Rng::random_range(&mut stream_rng(seed, Stream::FpsStart, 0), 0..cloud.len());
    fps_select(cloud, k, start)
}

/// `k` distinct indices drawn uniformly without replacement.
pub fn random_select(cloud: &PointCloud, k: usize, seed: u64) -> Result<HardKeypoints> {
    check_k(cloud, k)?;
    let mut rng = stream_rng(seed, Stream::RandomSelect, 0);
    let indices = sample(&mut rng, cloud.len(), k).into_vec();
    Ok(HardKeypoints::from_indices(
        cloud,
        indices,
        vec![0.0; k],
        k,
        0.0,
    ))
}
