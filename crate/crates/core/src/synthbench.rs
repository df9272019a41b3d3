//! Seeded synthetic worlds with paired image / point-cloud observations.
//!
//! Places sit on a closed loop 30 m apart. Each place owns an 8-d latent
//! vector; its image is a procedural sinusoid texture and its sub-map a set
//! of Gaussian blobs around landmarks, both deterministic functions of the
//! latent. Runs revisit every place with independent pose jitter and noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::datamodel::io::{write_regions, write_run};
use crate::datamodel::{Image, PointCloud, Pose, Region, Run, Sample, Split};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 8;
pub const MIN_PLACES: usize = 8;
pub const PLACE_SPACING_M: f64 = 30.0;
pub const IMAGE_WIDTH: usize = 64;
pub const IMAGE_HEIGHT: usize = 48;
pub const LANDMARKS: usize = 12;
pub const CLOUD_POINTS: usize = 256;
pub const REGIONS_FILE: &str = "regions.csv";

const SINUSOIDS: usize = 4;
/// Seed of the fixed latent projections, shared by every world.
const LANDMARK_SEED: u64 = 0x1a4d_u64;

#[derive(Clone, Debug, PartialEq)]
pub struct Place {
    pub id: u32,
    /// Map-frame position on the loop.
    pub x: f64,
    pub y: f64,
    /// Direction of travel.
    pub heading: f64,
    pub latent: [f64; LATENT_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub places: Vec<Place>,
    /// Pixel noise standard deviation before condition multipliers.
    pub pixel_noise: f64,
    /// Planar pose noise per run, meters.
    pub pose_noise: f64,
    /// Heading noise per run, radians.
    pub yaw_noise: f64,
    /// Spread of points around each landmark, meters.
    pub point_sigma: f64,
}

/// Pose perturbation of one observation relative to its place.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

/// Acquisition condition of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub condition: String,
    /// Scales the pixel noise.
    pub noise_multiplier: f64,
}

impl RunSpec {
    pub fn new(condition: impl Into<String>, noise_multiplier: f64) -> Self {
        Self {
            condition: condition.into(),
            noise_multiplier,
        }
    }

    /// Cycles through overcast, sun, rain and night.
    pub fn defaults(n_runs: usize) -> Vec<RunSpec> {
        const CYCLE: [(&str, f64); 4] = [
            ("overcast", 1.0),
            ("sun", 1.0),
            ("rain", 1.5),
            ("night", 2.0),
        ];
        (0..n_runs)
            .map(|i| {
                let (c, m) = CYCLE[i % CYCLE.len()];
                RunSpec::new(c, m)
            })
            .collect()
    }
}

pub fn generate_world(seed: u64, n_places: usize) -> Result<SyntheticWorld> {
    if n_places < MIN_PLACES {
        return Err(Error::invalid(format!(
            "a synthetic world needs at least {MIN_PLACES} places, got {n_places}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = PLACE_SPACING_M * n_places as f64 / (2.0 * PI);
    let places = (0..n_places)
        .map(|p| {
            let theta = 2.0 * PI * p as f64 / n_places as f64;
            let mut latent = [0.0; LATENT_DIM];
            for z in &mut latent {
                *z = StandardNormal.sample(&mut rng);
            }
            Place {
                id: p as u32,
                x: radius * theta.cos(),
                y: radius * theta.sin(),
                heading: crate::datamodel::normalize_angle(theta + PI / 2.0),
                latent,
            }
        })
        .collect();
    Ok(SyntheticWorld {
        seed,
        places,
        pixel_noise: 0.02,
        pose_noise: 1.0,
        yaw_noise: 2f64.to_radians(),
        point_sigma: 0.5,
    })
}

impl SyntheticWorld {
    pub fn len(&self) -> usize {
        self.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.places.is_empty()
    }

    pub fn loop_radius(&self) -> f64 {
        PLACE_SPACING_M * self.len() as f64 / (2.0 * PI)
    }

    pub fn place(&self, p: usize) -> Result<&Place> {
        self.places.get(p).ok_or_else(|| {
            Error::invalid(format!("place {p} out of range (world has {})", self.len()))
        })
    }
}

/// Coefficients of one affine map `base + scale * (w . z)`.
struct Affine {
    base: f64,
    scale: f64,
    w: [f64; LATENT_DIM],
}

impl Affine {
    /// Random direction with unit variance for `w . z`.
    fn draw<R: Rng + ?Sized>(base: f64, scale: f64, rng: &mut R) -> Self {
        let mut w = [0.0; LATENT_DIM];
        for v in &mut w {
            *v = StandardNormal.sample(rng);
            *v /= (LATENT_DIM as f64).sqrt();
        }
        Self { base, scale, w }
    }

    fn eval(&self, z: &[f64; LATENT_DIM]) -> f64 {
        self.base + self.scale * self.w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Four unit-variance latent projections per landmark, shared by both
/// modalities: landmark `l` and sinusoid `l` (channel `l / 4`) read the
/// same numbers, so the two observations agree on what varies.
struct LatentMap {
    proj: Vec<[Affine; 4]>,
}

impl LatentMap {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LANDMARK_SEED);
        let proj = (0..LANDMARKS)
            .map(|_| std::array::from_fn(|_| Affine::draw(0.0, 1.0, &mut rng)))
            .collect();
        Self { proj }
    }

    fn t(&self, z: &[f64; LATENT_DIM], l: usize) -> [f64; 4] {
        std::array::from_fn(|k| self.proj[l][k].eval(z))
    }
}

fn normal_cdf(t: f64) -> f64 {
    0.5 * (1.0 + libm::erf(t / std::f64::consts::SQRT_2))
}

// landmark l stays inside cell l of a 4 x 3 grid over the box
const GRID_COLS: usize = 4;
const CELL_W: f64 = 50.0 / GRID_COLS as f64;
const CELL_H: f64 = 50.0 / (LANDMARKS / GRID_COLS) as f64;

// base spatial frequencies of the four sinusoids of each channel
const BASE_FX: [f64; SINUSOIDS] = [1.0, 2.0, 3.0, 5.0];
const BASE_FY: [f64; SINUSOIDS] = [2.0, 1.0, 3.0, 1.5];

/// Renders the place texture. With `noise_sigma == 0` the rng is unused.
pub fn render_image<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    place: usize,
    jitter: Jitter,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Image> {
    let z = &world.place(place)?.latent;
    let map = LatentMap::new();
    let (w, h) = (IMAGE_WIDTH, IMAGE_HEIGHT);
    let mut px = vec![0.5; w * h * 3];
    for c in 0..3 {
        for j in 0..SINUSOIDS {
            let [t0, t1, t2, t3] = map.t(z, c * SINUSOIDS + j);
            let amp = 0.2 + 0.08 * t0;
            let fx = BASE_FX[j] + 0.6 * t1;
            let fy = BASE_FY[j] + 0.6 * t2;
            let phase =
                PI * t3 + 0.25 * jitter.dx + 0.15 * jitter.dy * (j + 1) as f64 + 2.0 * jitter.dyaw;
            for y in 0..h {
                for x in 0..w {
                    let t =
                        2.0 * PI * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                    px[(y * w + x) * 3 + c] += amp * t.sin();
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut px {
            *v += noise.sample(rng);
        }
    }
    Image::from_clamped(w, h, px)
}

/// Landmark centers of a place: uniform in the +-25 m box, heights 0-8 m.
///
/// Each coordinate is the standard normal CDF of a fixed unit-variance
/// projection of the latent, so it is uniform over worlds yet varies
/// smoothly with the latent. Landmark `l` keeps to its own cell of a 4 x 3
/// grid, so the union is still uniform over the box.
pub fn landmarks(world: &SyntheticWorld, place: usize) -> Result<Vec<[f64; 3]>> {
    let z = &world.place(place)?.latent;
    let map = LatentMap::new();
    Ok((0..LANDMARKS)
        .map(|l| {
            let t = map.t(z, l);
            let (col, row) = ((l % GRID_COLS) as f64, (l / GRID_COLS) as f64);
            [
                -25.0 + CELL_W * (col + normal_cdf(t[0])),
                -25.0 + CELL_H * (row + normal_cdf(t[1])),
                8.0 * normal_cdf(t[2]),
            ]
        })
        .collect())
}

/// Samples the sub-map of `place` seen from a jittered pose.
pub fn sample_cloud<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    place: usize,
    jitter: Jitter,
    rng: &mut R,
) -> Result<PointCloud> {
    let centers = landmarks(world, place)?;
    let spread = Normal::new(0.0, world.point_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let clip = 3.0 * world.point_sigma;
    let (s, c) = (-jitter.dyaw).sin_cos();
    let points = (0..CLOUD_POINTS)
        .map(|i| {
            let l = centers[i % LANDMARKS];
            let mut p = [0.0; 3];
            for (k, v) in p.iter_mut().enumerate() {
                *v = l[k] + spread.sample(rng).clamp(-clip, clip);
            }
            // the sensor sits at (dx, dy, dyaw) in the canonical place frame
            let (x, y) = (p[0] - jitter.dx, p[1] - jitter.dy);
            [
                (c * x - s * y).clamp(-25.0, 25.0),
                (s * x + c * y).clamp(-25.0, 25.0),
                p[2].min(10.0),
            ]
        })
        .collect();
    PointCloud::new(points)
}

/// One run per spec, each visiting every place in loop order.
pub fn generate_runs(world: &SyntheticWorld, specs: &[RunSpec]) -> Result<Vec<Run>> {
    if specs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 runs, got {}",
            specs.len()
        )));
    }
    let pos = Normal::new(0.0, world.pose_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let yaw = Normal::new(0.0, world.yaw_noise).map_err(|e| Error::invalid(e.to_string()))?;
    specs
        .iter()
        .enumerate()
        .map(|(r, spec)| {
            if !(spec.noise_multiplier >= 0.0) {
                return Err(Error::invalid(format!(
                    "noise multiplier of run {r} must be >= 0"
                )));
            }
            let run_id = format!("run_{r:02}");
            let mut rng = ChaCha8Rng::seed_from_u64(
                world.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(r as u64 + 1)),
            );
            let samples = world
                .places
                .iter()
                .enumerate()
                .map(|(p, place)| {
                    let jitter = Jitter {
                        dx: pos.sample(&mut rng),
                        dy: pos.sample(&mut rng),
                        dyaw: yaw.sample(&mut rng),
                    };
                    let image = render_image(
                        world,
                        p,
                        jitter,
                        world.pixel_noise * spec.noise_multiplier,
                        &mut rng,
                    )?;
                    let cloud = sample_cloud(world, p, jitter, &mut rng)?;
                    // jitter is expressed in the place frame (x along heading)
                    let (s, c) = place.heading.sin_cos();
                    let pose = Pose::new(
                        place.x + c * jitter.dx - s * jitter.dy,
                        place.y + s * jitter.dx + c * jitter.dy,
                        0.0,
                        place.heading + jitter.dyaw,
                        0.0,
                        0.0,
                        (r as u64 + 1) * 1_000_000_000 + p as u64 * 1_000_000,
                    );
                    Ok(Sample {
                        sample_id: p as u64,
                        run_id: run_id.clone(),
                        pose,
                        image: Some(Arc::new(image)),
                        submap: Some(Arc::new(cloud)),
                        place_label: Some(place.id),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Run::new(run_id, spec.condition.clone(), samples))
        })
        .collect()
}

/// Default evaluation regions: one training rectangle over the whole loop
/// and four validation squares centered on places at 45, 135, 225 and
/// 315 degrees.
///
/// The training rectangle covers the validation places too: both media are
/// tied to a place only through its latent, and the landmark layout is a
/// hash of it, so the cross-modal map cannot be learned for places never
/// seen in training.
pub fn default_regions(world: &SyntheticWorld) -> Vec<Region> {
    let r = world.loop_radius();
    let n = world.len();
    let half = (0.12 * r).max(5.0);
    let mut regions = vec![Region {
        region_id: "loop".into(),
        x_min: -r - PLACE_SPACING_M,
        x_max: r + PLACE_SPACING_M,
        y_min: -r - PLACE_SPACING_M,
        y_max: r + PLACE_SPACING_M,
        split: Split::Train,
    }];
    for k in 0..4 {
        let p = &world.places[(n * (2 * k + 1)) / 8];
        regions.push(Region {
            region_id: format!("val_{k}"),
            x_min: p.x - half,
            x_max: p.x + half,
            y_min: p.y - half,
            y_max: p.y + half,
            split: Split::Validation,
        });
    }
    regions
}

/// Writes `runs/<run_id>/` directories and the region file under `out`.
pub fn write_world(out: &Path, runs: &[Run], regions: &[Region]) -> Result<()> {
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    for run in runs {
        write_run(&runs_dir.join(&run.run_id), run)?;
    }
    write_regions(&out.join(REGIONS_FILE), regions)
}
