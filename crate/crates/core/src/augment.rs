//! Training-time augmentation of image / point-cloud pairs.
//!
//! Mirroring is decided once per pair and applied to both media before any
//! other perturbation; the image then gets color jitter and a small affine
//! warp, the cloud a small rigid-body transform.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, PointCloud, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Brightness factor drawn from `1 +- brightness`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift in cycles, drawn from `+- hue`.
    pub hue: f64,
    pub rotation_deg: f64,
    /// Maximum image shift as a fraction of the size on each axis.
    pub translate_frac: f64,
    /// Maximum cloud translation per axis, meters.
    pub cloud_translation: f64,
    pub cloud_yaw_deg: f64,
    pub cloud_tilt_deg: f64,
    pub mirror_probability: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            rotation_deg: 5.0,
            translate_frac: 0.10,
            cloud_translation: 1.5,
            cloud_yaw_deg: 10.0,
            cloud_tilt_deg: 2.0,
            mirror_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No perturbation at all.
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            rotation_deg: 0.0,
            translate_frac: 0.0,
            cloud_translation: 0.0,
            cloud_yaw_deg: 0.0,
            cloud_tilt_deg: 0.0,
            mirror_probability: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
            ("rotation_deg", self.rotation_deg),
            ("translate_frac", self.translate_frac),
            ("cloud_translation", self.cloud_translation),
            ("cloud_yaw_deg", self.cloud_yaw_deg),
            ("cloud_tilt_deg", self.cloud_tilt_deg),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "augment.{name} must be >= 0, got {v}"
                )));
            }
        }
        if self.rotation_deg > 45.0 || self.translate_frac > 0.5 {
            return Err(Error::invalid("augment warp ranges exceed 45 deg / 0.5"));
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(Error::invalid(format!(
                "augment.mirror_probability must be in [0, 1], got {}",
                self.mirror_probability
            )));
        }
        Ok(())
    }
}

/// Every random quantity used by one [`augment_pair`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Single decision shared by image and cloud.
    pub mirror: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub rotation_deg: f64,
    pub shift: (f64, f64),
    pub translation: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        rng.random_range(-r..=r)
    }
}

/// Draws one set of augmentation parameters.
pub fn sample_draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> AugmentDraw {
    let mirror = cfg.mirror_probability > 0.0 && rng.random::<f64>() < cfg.mirror_probability;
    AugmentDraw {
        mirror,
        brightness: 1.0 + symmetric(rng, cfg.brightness),
        contrast: 1.0 + symmetric(rng, cfg.contrast),
        saturation: 1.0 + symmetric(rng, cfg.saturation),
        hue: symmetric(rng, cfg.hue),
        rotation_deg: symmetric(rng, cfg.rotation_deg),
        shift: (
            symmetric(rng, cfg.translate_frac),
            symmetric(rng, cfg.translate_frac),
        ),
        translation: [
            symmetric(rng, cfg.cloud_translation),
            symmetric(rng, cfg.cloud_translation),
            symmetric(rng, cfg.cloud_translation),
        ],
        yaw: symmetric(rng, cfg.cloud_yaw_deg).to_radians(),
        pitch: symmetric(rng, cfg.cloud_tilt_deg).to_radians(),
        roll: symmetric(rng, cfg.cloud_tilt_deg).to_radians(),
    }
}

fn map_pixels(img: &Image, f: impl Fn(&[f64]) -> [f64; 3]) -> Image {
    let mut out = Vec::with_capacity(img.pixels().len());
    for px in img.pixels().chunks(3) {
        out.extend(f(px));
    }
    Image::from_clamped(img.width(), img.height(), out).expect("same size")
}

fn luma(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

pub fn adjust_brightness(img: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    map_pixels(img, |p| [p[0] * factor, p[1] * factor, p[2] * factor])
}

/// Blends every pixel toward the mean gray level.
pub fn adjust_contrast(img: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let n = (img.width() * img.height()) as f64;
    let mean = img.pixels().chunks(3).map(luma).sum::<f64>() / n;
    map_pixels(img, |p| {
        [
            mean + (p[0] - mean) * factor,
            mean + (p[1] - mean) * factor,
            mean + (p[2] - mean) * factor,
        ]
    })
}

pub fn adjust_saturation(img: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    map_pixels(img, |p| {
        let g = luma(p);
        [
            g + (p[0] - g) * factor,
            g + (p[1] - g) * factor,
            g + (p[2] - g) * factor,
        ]
    })
}

/// Rotates hue by `shift` cycles.
pub fn adjust_hue(img: &Image, shift: f64) -> Image {
    if shift == 0.0 {
        return img.clone();
    }
    map_pixels(img, |p| {
        let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
        hsv_to_rgb((h + shift).rem_euclid(1.0), s, v)
    })
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Random color jitter: brightness, contrast, saturation, hue, in that order.
pub fn jitter_image<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let b = 1.0 + symmetric(rng, cfg.brightness);
    let c = 1.0 + symmetric(rng, cfg.contrast);
    let s = 1.0 + symmetric(rng, cfg.saturation);
    let h = symmetric(rng, cfg.hue);
    apply_jitter(img, b, c, s, h)
}

fn apply_jitter(img: &Image, b: f64, c: f64, s: f64, h: f64) -> Image {
    let out = adjust_brightness(img, b);
    let out = adjust_contrast(&out, c);
    let out = adjust_saturation(&out, s);
    adjust_hue(&out, h)
}

/// Rotation about the image center followed by a shift given as a fraction
/// of the image size. Bilinear sampling; pixels mapped from outside the
/// source are black.
pub fn warp_image(img: &Image, rotation_deg: f64, shift: (f64, f64)) -> Result<Image> {
    if rotation_deg.abs() > 45.0 || shift.0.abs() > 0.5 || shift.1.abs() > 0.5 {
        return Err(Error::invalid(format!(
            "warp parameters out of range: rotation {rotation_deg}, shift {shift:?}"
        )));
    }
    if rotation_deg == 0.0 && shift == (0.0, 0.0) {
        return Ok(img.clone());
    }
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (shift.0 * w as f64, shift.1 * h as f64);
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let mut out = Image::black(w, h);
    for y in 0..h {
        for x in 0..w {
            // Inverse map: undo the shift, then the rotation.
            let (dx, dy) = (x as f64 - tx - cx, y as f64 - ty - cy);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ch in 0..3 {
                let v = if fx == 0.0 && fy == 0.0 {
                    img.get(x0, y0, ch)
                } else {
                    (1.0 - fx) * (1.0 - fy) * img.get(x0, y0, ch)
                        + fx * (1.0 - fy) * img.get(x1, y0, ch)
                        + (1.0 - fx) * fy * img.get(x0, y1, ch)
                        + fx * fy * img.get(x1, y1, ch)
                };
                out.set(x, y, ch, v);
            }
        }
    }
    Ok(out)
}

/// `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_matrix(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

/// `p' = R(yaw, pitch, roll) p + t` for every point.
pub fn transform_cloud(
    pc: &PointCloud,
    t: [f64; 3],
    yaw: f64,
    pitch: f64,
    roll: f64,
) -> PointCloud {
    if t == [0.0; 3] && yaw == 0.0 && pitch == 0.0 && roll == 0.0 {
        return pc.clone();
    }
    let r = rotation_matrix(yaw, pitch, roll);
    PointCloud {
        points: pc
            .points
            .iter()
            .map(|p| {
                let mut q = [0.0; 3];
                for i in 0..3 {
                    q[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
                }
                q
            })
            .collect(),
    }
}

/// Inverse of [`transform_cloud`] with the same arguments.
pub fn inverse_transform_cloud(
    pc: &PointCloud,
    t: [f64; 3],
    yaw: f64,
    pitch: f64,
    roll: f64,
) -> PointCloud {
    let r = rotation_matrix(yaw, pitch, roll);
    PointCloud {
        points: pc
            .points
            .iter()
            .map(|p| {
                let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
                let mut q = [0.0; 3];
                for i in 0..3 {
                    q[i] = r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2];
                }
                q
            })
            .collect(),
    }
}

pub fn mirror_image(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in 0..h {
        for x in (0..w).rev() {
            let i = (y * w + x) * 3;
            out.extend_from_slice(&img.pixels()[i..i + 3]);
        }
    }
    Image::new(w, h, out).expect("same size")
}

/// Reflection across the vehicle's longitudinal plane (`y -> -y`).
pub fn mirror_cloud(pc: &PointCloud) -> PointCloud {
    PointCloud {
        points: pc.points.iter().map(|p| [p[0], -p[1], p[2]]).collect(),
    }
}

/// Left-right image flip together with the matching cloud reflection.
pub fn mirror_pair(img: &Image, pc: &PointCloud) -> (Image, PointCloud) {
    (mirror_image(img), mirror_cloud(pc))
}

/// Output of [`augment_pair`], with the draw that produced it.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub image: Image,
    pub cloud: PointCloud,
    pub draw: AugmentDraw,
}

/// Full augmentation of one sample's image and cloud.
pub fn augment_pair<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedPair> {
    augment_media(sample.image()?, sample.submap()?, cfg, rng)
}

pub fn augment_media<R: Rng + ?Sized>(
    image: &Image,
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedPair> {
    let draw = sample_draw(cfg, rng);
    let (img, pc) = if draw.mirror {
        mirror_pair(image, cloud)
    } else {
        (image.clone(), cloud.clone())
    };
    let img = apply_jitter(
        &img,
        draw.brightness,
        draw.contrast,
        draw.saturation,
        draw.hue,
    );
    let img = warp_image(&img, draw.rotation_deg, draw.shift)?;
    let pc = transform_cloud(&pc, draw.translation, draw.yaw, draw.pitch, draw.roll);
    Ok(AugmentedPair {
        image: img,
        cloud: pc,
        draw,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn test_image(w: usize, h: usize) -> Image {
        let px = (0..w * h * 3)
            .map(|i| ((i * 37) % 101) as f64 / 100.0)
            .collect();
        Image::new(w, h, px).unwrap()
    }

    fn test_cloud() -> PointCloud {
        PointCloud::new(vec![[5.0, 2.0, 0.0], [-3.0, -0.0, 1.5], [0.1, 7.0, -2.0]]).unwrap()
    }

    #[test]
    fn zero_jitter_is_identity() {
        let img = test_image(8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            jitter_image(&img, &AugmentConfig::identity(), &mut rng),
            img
        );
    }

    #[test]
    fn brightness_clamps() {
        let img = Image::new(1, 1, vec![0.9, 0.5, 0.0]).unwrap();
        let out = adjust_brightness(&img, 1.2);
        assert_eq!(out.pixels()[0], 1.0);
        assert!((out.pixels()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn jitter_is_seed_deterministic() {
        let img = test_image(8, 6);
        let cfg = AugmentConfig::default();
        let a = jitter_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = jitter_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_ne!(a, img);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hue_roundtrip_through_hsv() {
        for &(r, g, b) in &[
            (0.2, 0.5, 0.9),
            (1.0, 0.0, 0.0),
            (0.3, 0.3, 0.3),
            (0.7, 0.1, 0.4),
        ] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let back = hsv_to_rgb(h, s, v);
            for (x, y) in back.iter().zip([r, g, b]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_identity_and_shift() {
        let img = test_image(320, 24);
        assert_eq!(warp_image(&img, 0.0, (0.0, 0.0)).unwrap(), img);
        let shifted = warp_image(&img, 0.0, (0.10, 0.0)).unwrap();
        for y in 0..24 {
            for x in 0..32 {
                assert_eq!(shifted.get(x, y, 0), 0.0);
            }
            for x in 32..320 {
                for c in 0..3 {
                    assert_eq!(shifted.get(x, y, c), img.get(x - 32, y, c));
                }
            }
        }
        assert!(warp_image(&img, 50.0, (0.0, 0.0)).is_err());
        assert!(warp_image(&img, 0.0, (0.6, 0.0)).is_err());
    }

    #[test]
    fn rotation_fixes_center_pixel() {
        let mut img = Image::black(31, 21);
        for c in 0..3 {
            img.set(15, 10, c, 1.0);
        }
        let out = warp_image(&img, 5.0, (0.0, 0.0)).unwrap();
        assert!((out.get(15, 10, 0) - 1.0).abs() < 1e-12);
        let brightest = out.pixels().iter().cloned().fold(0.0, f64::max);
        assert_eq!(brightest, out.get(15, 10, 0));
    }

    #[test]
    fn cloud_transforms() {
        let pc = test_cloud();
        assert_eq!(transform_cloud(&pc, [0.0; 3], 0.0, 0.0, 0.0), pc);
        let one = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
        let r = transform_cloud(&one, [0.0; 3], 90f64.to_radians(), 0.0, 0.0);
        let p = r.points[0];
        assert!(p[0].abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ];
            let (y, p, ro) = (
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            let back = inverse_transform_cloud(&transform_cloud(&pc, t, y, p, ro), t, y, p, ro);
            for (a, b) in back.points.iter().zip(&pc.points) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let r = rotation_matrix(0.3, -0.2, 0.7);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mirror_examples() {
        let img = test_image(5, 3);
        let pc = test_cloud();
        let (mi, mc) = mirror_pair(&img, &pc);
        assert_eq!(mc.points[0], [5.0, -2.0, 0.0]);
        for y in 0..3 {
            for x in 0..5 {
                for c in 0..3 {
                    assert_eq!(mi.get(x, y, c), img.get(4 - x, y, c));
                }
            }
        }
        let (i2, c2) = mirror_pair(&mi, &mc);
        assert_eq!(i2, img);
        assert_eq!(c2, pc);
    }

    #[test]
    fn augment_pair_extremes() {
        let img = test_image(16, 12);
        let pc = test_cloud();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_media(&img, &pc, &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.cloud, pc);
        assert!(!out.draw.mirror);

        let cfg = AugmentConfig {
            mirror_probability: 1.0,
            ..AugmentConfig::identity()
        };
        let out = augment_media(&img, &pc, &cfg, &mut rng).unwrap();
        let (mi, mc) = mirror_pair(&img, &pc);
        assert_eq!(out.image, mi);
        assert_eq!(out.cloud, mc);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            mirror_probability: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            cloud_translation: -1.0,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
