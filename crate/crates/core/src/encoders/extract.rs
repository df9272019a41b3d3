use std::rc::Rc;

use rand::Rng;

use super::config::EncoderConfig;
use crate::datamodel::{Image, PointCloud};
use crate::diffcore::{Graph, Tensor, Var, GATHER_ZERO};
use crate::error::{Error, Result};

/// im2col index map for one convolution over an `h x w x c` input stored
/// as `[h * w, c]`. Output rows are output cells, columns `(ky, kx, ci)`.
pub(crate) fn im2col_index(
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Vec<u32>, usize, usize) {
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut idx = Vec::with_capacity(oh * ow * kernel * kernel * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                    for ci in 0..c {
                        idx.push(if inside {
                            ((iy as usize * w + ix as usize) * c + ci) as u32
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    (idx, oh, ow)
}

/// Brings an image to the extractor input size.
pub(crate) fn prepare_image(img: &Image, cfg: &EncoderConfig) -> Result<Image> {
    if img.width() == cfg.input_width && img.height() == cfg.input_height {
        return Ok(img.clone());
    }
    if img.width() == Image::WORKING_WIDTH && img.height() == Image::WORKING_HEIGHT {
        return img.downscale(cfg.input_width, cfg.input_height);
    }
    Err(Error::invalid(format!(
        "image is {}x{}; expected {}x{} or the {}x{} working size",
        img.width(),
        img.height(),
        cfg.input_width,
        cfg.input_height,
        Image::WORKING_WIDTH,
        Image::WORKING_HEIGHT
    )))
}

/// Strided conv stack with ReLU; returns `[cells, dim]`.
pub fn image_features(
    g: &mut Graph,
    prefix: &str,
    img: &Image,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let img = prepare_image(img, cfg)?;
    let (mut h, mut w, mut c) = (img.height(), img.width(), 3usize);
    let mut x = g.input(Tensor::matrix(h * w, c, img.pixels().to_vec())?);
    for (i, spec) in cfg.conv.iter().enumerate() {
        let (idx, oh, ow) = im2col_index(h, w, c, spec.kernel, spec.stride, spec.padding);
        let cols = spec.kernel * spec.kernel * c;
        let patches = g.gather(x, Rc::new(idx), vec![oh * ow, cols])?;
        let wt = g.param(&format!("{prefix}conv{i}.w"))?;
        let b = g.param(&format!("{prefix}conv{i}.b"))?;
        let y = g.matmul(patches, wt)?;
        let y = g.add_row(y, b)?;
        x = g.relu(y);
        (h, w, c) = (oh, ow, spec.out_channels);
    }
    Ok(x)
}

/// Picks exactly `n` point indices: a random subset when the cloud is large
/// enough, otherwise every point plus draws with replacement.
pub fn sample_point_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    if len >= n {
        for i in 0..n {
            let j = rng.random_range(i..len);
            all.swap(i, j);
        }
        all.truncate(n);
        all
    } else {
        for i in (1..len).rev() {
            let j = rng.random_range(0..=i);
            all.swap(i, j);
        }
        while all.len() < n {
            all.push(rng.random_range(0..len));
        }
        all
    }
}

/// Shared per-point MLP over the selected points; returns `[n, dim]`.
pub fn cloud_features_at(
    g: &mut Graph,
    prefix: &str,
    pc: &PointCloud,
    indices: &[usize],
    cfg: &EncoderConfig,
) -> Result<Var> {
    if pc.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    let inv = 1.0 / cfg.point_scale;
    let mut data = Vec::with_capacity(indices.len() * 3);
    for &i in indices {
        let p = pc.points[i];
        data.extend_from_slice(&[p[0] * inv, p[1] * inv, p[2] * inv]);
    }
    let mut x = g.input(Tensor::matrix(indices.len(), 3, data)?);
    for i in 0..=cfg.point_mlp.len() {
        let wt = g.param(&format!("{prefix}pt{i}.w"))?;
        let b = g.param(&format!("{prefix}pt{i}.b"))?;
        let y = g.matmul(x, wt)?;
        let y = g.add_row(y, b)?;
        x = g.relu(y);
    }
    Ok(x)
}

pub fn cloud_features<R: Rng + ?Sized>(
    g: &mut Graph,
    prefix: &str,
    pc: &PointCloud,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<Var> {
    if pc.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    let idx = sample_point_indices(pc.len(), cfg.n_pts, rng);
    cloud_features_at(g, prefix, pc, &idx, cfg)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn im2col_matches_direct_indexing() {
        let (idx, oh, ow) = im2col_index(4, 5, 2, 3, 2, 1);
        assert_eq!((oh, ow), (2, 3));
        // cell (0, 0), kernel (0, 0) lies in the padding
        assert_eq!(idx[0], GATHER_ZERO);
        // cell (1, 2), kernel (1, 1), channel 1 -> input (2, 4, 1)
        let row = 2 + 3;
        let col = (1 * 3 + 1) * 2 + 1;
        assert_eq!(idx[row * 18 + col], ((2 * 5 + 4) * 2 + 1) as u32);
    }

    #[test]
    fn index_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = sample_point_indices(1000, 256, &mut rng);
        assert_eq!(sub.len(), 256);
        let mut s = sub.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 256);

        let up = sample_point_indices(10, 256, &mut rng);
        assert_eq!(up.len(), 256);
        for i in 0..10 {
            assert!(up.contains(&i));
        }
        assert_eq!(sample_point_indices(1, 256, &mut rng), vec![0; 256]);

        let mut exact = sample_point_indices(256, 256, &mut rng);
        exact.sort();
        assert_eq!(exact, (0..256).collect::<Vec<_>>());
    }
}
