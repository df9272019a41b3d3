use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pose::Pose;
use crate::error::{Error, Result};

/// Unordered list of 3-d points in meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud has non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Parameters of [`extract_submap`].
#[derive(Clone, Debug)]
pub struct SubmapOptions {
    /// Half side of the yaw-aligned crop box, meters.
    pub half_extent: f64,
    pub remove_ground: bool,
    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
    /// Minimum `|n . z|` for a fitted plane to count as ground.
    pub min_vertical_alignment: f64,
    pub seed: u64,
}

impl Default for SubmapOptions {
    fn default() -> Self {
        Self {
            half_extent: 25.0,
            remove_ground: true,
            ransac_iterations: 100,
            ransac_threshold: 0.3,
            min_vertical_alignment: 0.9,
            seed: 0,
        }
    }
}

/// Crops `map` to a box around `center` and expresses the result in the
/// center's local frame (origin at the pose, x along the heading).
pub fn extract_submap(map: &PointCloud, center: &Pose, opts: &SubmapOptions) -> Result<PointCloud> {
    if map.is_empty() {
        return Err(Error::Empty("map point cloud"));
    }
    let (s, c) = (-center.yaw).sin_cos();
    let h = opts.half_extent;
    let local: Vec<[f64; 3]> = map
        .points
        .iter()
        .filter_map(|p| {
            let (dx, dy, dz) = (p[0] - center.x, p[1] - center.y, p[2] - center.z);
            let q = [c * dx - s * dy, s * dx + c * dy, dz];
            (q[0].abs() <= h && q[1].abs() <= h && q[2].abs() <= h).then_some(q)
        })
        .collect();
    let mut out = PointCloud { points: local };
    if opts.remove_ground {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        out = remove_ground_plane(&out, opts, &mut rng);
    }
    if out.is_empty() {
        return Err(Error::EmptySubmap);
    }
    Ok(out)
}

/// RANSAC fit of the dominant near-horizontal plane; its inliers are
/// dropped. Clouds with no acceptable plane are returned unchanged.
pub fn remove_ground_plane<R: Rng>(
    cloud: &PointCloud,
    opts: &SubmapOptions,
    rng: &mut R,
) -> PointCloud {
    let pts = &cloud.points;
    if pts.len() < 3 {
        return cloud.clone();
    }
    let mut best: Option<([f64; 3], f64, usize)> = None;
    for _ in 0..opts.ransac_iterations {
        let i = rng.random_range(0..pts.len());
        let j = rng.random_range(0..pts.len());
        let k = rng.random_range(0..pts.len());
        let Some((n, d)) = plane_through(&pts[i], &pts[j], &pts[k]) else {
            continue;
        };
        if n[2].abs() <= opts.min_vertical_alignment {
            continue;
        }
        let count = pts
            .iter()
            .filter(|p| (dot(&n, p) + d).abs() <= opts.ransac_threshold)
            .count();
        if best.is_none_or(|(_, _, c)| count > c) {
            best = Some((n, d, count));
        }
    }
    match best {
        Some((n, d, _)) => PointCloud {
            points: pts
                .iter()
                .filter(|p| (dot(&n, p) + d).abs() > opts.ransac_threshold)
                .copied()
                .collect(),
        },
        None => cloud.clone(),
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Unit normal `n` and offset `d` with `n . p + d = 0`.
fn plane_through(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> Option<([f64; 3], f64)> {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let len = dot(&n, &n).sqrt();
    if len < 1e-9 {
        return None;
    }
    let n = [n[0] / len, n[1] / len, n[2] / len];
    Some((n, -dot(&n, a)))
}
