//! Resizing, augmentation and normalization statistics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// How to bring a smaller image up to the target size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResizeMethod {
    /// Zero border, pixel values untouched.
    #[default]
    Pad,
    Nearest,
}

impl FromStr for ResizeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pad" => Ok(ResizeMethod::Pad),
            "nearest" => Ok(ResizeMethod::Nearest),
            other => Err(Error::invalid("resize", format!("unknown method `{other}` (expected pad or nearest)"))),
        }
    }
}

impl fmt::Display for ResizeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResizeMethod::Pad => "pad",
            ResizeMethod::Nearest => "nearest",
        })
    }
}

/// Resizes `N×C×H×W` data (shape given) to `N×C×target×target`.
pub fn resize<T: Copy + Default>(data: &[T], shape: [usize; 4], target: usize, method: ResizeMethod) -> Result<Vec<T>> {
    let [n, c, h, w] = shape;
    if data.len() != n * c * h * w {
        return Err(Error::invalid("resize", format!("{} values for shape {shape:?}", data.len())));
    }
    if target == 0 {
        return Err(Error::invalid("resize", "target size must be positive"));
    }
    if h == target && w == target {
        return Ok(data.to_vec());
    }
    let mut dst = vec![T::default(); n * c * target * target];
    match method {
        ResizeMethod::Pad => {
            if h > target || w > target || (target - h) % 2 != 0 || (target - w) % 2 != 0 {
                return Err(Error::invalid(
                    "resize",
                    format!("cannot pad {h}×{w} evenly to {target}×{target}"),
                ));
            }
            let (py, px) = ((target - h) / 2, (target - w) / 2);
            for plane in 0..n * c {
                for y in 0..h {
                    let s = plane * h * w + y * w;
                    let d = plane * target * target + (y + py) * target + px;
                    dst[d..d + w].copy_from_slice(&data[s..s + w]);
                }
            }
        }
        ResizeMethod::Nearest => {
            for plane in 0..n * c {
                for y in 0..target {
                    let sy = y * h / target;
                    for x in 0..target {
                        let sx = x * w / target;
                        dst[plane * target * target + y * target + x] = data[plane * h * w + sy * w + sx];
                    }
                }
            }
        }
    }
    Ok(dst)
}

/// Random crop from a zero-padded image plus horizontal flip, per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub crop_padding: usize,
    pub flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            crop_padding: 4,
            flip: true,
        }
    }
}

/// Mirrors a `C×H×W` image of width `w` left to right in place.
pub fn hflip(img: &mut [f64], w: usize) {
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Crops `C×H×W` at offset `(dy, dx)` from the image zero-padded by `pad`.
pub fn crop_padded(img: &[f64], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

impl Augment {
    /// Applies the augmentation to every sample of an `N×C×H×W` batch.
    pub fn apply(&self, batch: &mut Tensor, rng: &mut Rng) {
        let &[n, c, h, w] = batch.shape() else { return };
        let per = c * h * w;
        for i in 0..n {
            let img = &mut batch.data_mut()[i * per..(i + 1) * per];
            if self.crop_padding > 0 {
                let span = 2 * self.crop_padding + 1;
                let (dy, dx) = (rng.below(span), rng.below(span));
                let cropped = crop_padded(img, c, h, w, self.crop_padding, dy, dx);
                img.copy_from_slice(&cropped);
            }
            if self.flip && rng.bernoulli(0.5) {
                hflip(img, w);
            }
        }
    }
}

/// Per-channel mean and (population) standard deviation of `N×C×H×W` byte
/// images scaled by 1/255.
pub fn channel_stats(pixels: &[u8], channels: usize, plane: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if channels == 0 || plane == 0 || pixels.is_empty() || pixels.len() % (channels * plane) != 0 {
        return Err(Error::invalid("channel_stats", "empty or ragged image buffer"));
    }
    let count = (pixels.len() / channels) as f64;
    let mut sum = vec![0u64; channels];
    let mut sq = vec![0u64; channels];
    for (i, p) in pixels.chunks(plane).enumerate() {
        for &v in p {
            sum[i % channels] += v as u64;
            sq[i % channels] += (v as u64) * (v as u64);
        }
    }
    let mean: Vec<f64> = sum.iter().map(|&s| s as f64 / count / 255.0).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(&q, m)| ((q as f64 / count / (255.0 * 255.0)) - m * m).max(0.0).sqrt().max(1e-12))
        .collect();
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_28_to_32() {
        let x: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 251) as u8 + 1).collect();
        let shape = [2, 1, 28, 28];
        for m in [ResizeMethod::Pad, ResizeMethod::Nearest] {
            assert_eq!(resize(&x, shape, 32, m).unwrap().len(), 2 * 32 * 32);
        }
        let y = resize(&x, shape, 32, ResizeMethod::Pad).unwrap();
        assert_eq!(y[2 * 32 + 2], x[0]);
        assert_eq!(y[0], 0);
        let near = resize(&x, shape, 32, ResizeMethod::Nearest).unwrap();
        assert_eq!((near[0], near[31]), (x[0], x[27]));
        assert!(resize(&x, shape, 0, ResizeMethod::Nearest).is_err());
        assert!(resize(&x, shape, 31, ResizeMethod::Pad).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let orig: Vec<f64> = (0..2 * 3 * 4).map(f64::from).collect();
        let mut img = orig.clone();
        hflip(&mut img, 4);
        assert_ne!(img, orig);
        assert_eq!(&img[..4], &[3.0, 2.0, 1.0, 0.0]);
        hflip(&mut img, 4);
        assert_eq!(img, orig);
    }

    #[test]
    fn centered_crop_recovers_image() {
        let img: Vec<f64> = (0..3 * 5 * 5).map(|i| i as f64 / 100.0).collect();
        assert_eq!(crop_padded(&img, 3, 5, 5, 4, 4, 4), img);
        let shifted = crop_padded(&img, 3, 5, 5, 4, 5, 4);
        assert_eq!(shifted[0], img[5]);
        assert!(shifted[(0 * 5 + 4) * 5..(0 * 5 + 5) * 5].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_stats_of_known_images() {
        // Two 1×2 images with two channels; channel 1 is constant.
        let x = [0u8, 255, 51, 51, 255, 0, 51, 51];
        let (m, s) = channel_stats(&x, 2, 2).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15 && (m[1] - 0.2).abs() < 1e-15);
        assert!((s[0] - 0.5).abs() < 1e-12 && s[1] < 1e-6);
    }
}
