use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::tensor::Tensor;

fn hwc(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[h, w, c] => Ok((h, w, c)),
        other => Err(Error::InvalidArgument(format!(
            "augmentation expects an [height, width, channels] image, got {other:?}"
        ))),
    }
}

/// The `h x w` window whose top-left corner is `origin = (row, col)`.
pub fn crop(img: &Tensor, h: usize, w: usize, origin: (usize, usize)) -> Result<Tensor> {
    let (ih, iw, c) = hwc(img)?;
    let (y0, x0) = origin;
    if h == 0 || w == 0 || y0 + h > ih || x0 + w > iw {
        return Err(Error::InvalidArgument(format!(
            "crop {h}x{w} at {origin:?} exceeds {ih}x{iw} image"
        )));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let start = (y * iw + x0) * c;
        out.extend_from_slice(&img.data()[start..start + w * c]);
    }
    Tensor::new(&[h, w, c], out)
}

/// Mirrors the columns (left-right).
pub fn flip_h(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(img)?;
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let start = (y * w + x) * c;
            out.extend_from_slice(&img.data()[start..start + c]);
        }
    }
    Tensor::new(img.shape(), out)
}

/// Mirrors the rows (top-bottom).
pub fn flip_v(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(img)?;
    let mut out = Vec::with_capacity(img.len());
    for y in (0..h).rev() {
        out.extend_from_slice(&img.data()[y * w * c..(y + 1) * w * c]);
    }
    Tensor::new(img.shape(), out)
}

/// Adds `N(0, σ²)` noise to every pixel, then clamps to `[0, 1]`.
pub fn add_noise(img: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma {sigma}: {e}")))?;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Principal components of the pixel colors of a training set.
#[derive(Debug, Clone)]
pub struct FancyPca {
    channels: usize,
    values: Vec<f64>,
    /// Eigenvectors as columns, row-major `[c, c]`.
    vectors: Vec<f64>,
}

impl FancyPca {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let c = *train.image_shape().last().expect("rank-4 images");
        let px = train.images().data();
        let n = (px.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for p in px.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; c * c];
        for p in px.chunks_exact(c) {
            for i in 0..c {
                for j in 0..c {
                    cov[i * c + j] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
                }
            }
        }
        let (values, vectors) = symmetric_eigen(&cov, c, 1e-10);
        Ok(FancyPca {
            channels: c,
            values,
            vectors,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.values
    }

    /// Per-channel shift `Σ_i α_i λ_i p_i` for the given draws `α`.
    pub fn shift(&self, alphas: &[f64]) -> Vec<f64> {
        let c = self.channels;
        (0..c)
            .map(|ch| (0..c).map(|i| alphas[i] * self.values[i] * self.vectors[ch * c + i]).sum())
            .collect()
    }

    /// Adds one random color shift with `α_i ~ N(0, σ²)` to every pixel.
    pub fn apply(&self, img: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
        let (_, _, c) = hwc(img)?;
        if c != self.channels {
            return Err(Error::shape("fancy_pca", img.shape(), &[self.channels]));
        }
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::InvalidArgument(format!("fancy PCA sigma {sigma}: {e}")))?;
        let alphas: Vec<f64> = (0..c).map(|_| normal.sample(rng)).collect();
        let delta = self.shift(&alphas);
        let mut out = img.clone();
        for p in out.data_mut().chunks_exact_mut(c) {
            for (v, d) in p.iter_mut().zip(&delta) {
                *v += d;
            }
        }
        Ok(out)
    }
}

/// An augmentation applied to every training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    /// Horizontal flip with probability 1/2.
    FlipH,
    /// Vertical flip with probability 1/2.
    FlipV,
    Noise(f64),
    FancyPca(f64),
    /// Random `h x w` crop. It changes the image size, so it is only
    /// usable as a standalone transform, not inside training.
    Crop(usize, usize),
}

impl AugmentOp {
    pub fn changes_shape(self) -> bool {
        matches!(self, AugmentOp::Crop(..))
    }
}

impl FromStr for AugmentOp {
    type Err = String;

    /// `flip_h`, `flip_v`, `noise:σ`, `fancy_pca[:σ]` or `crop:HxW`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let sigma = |default: Option<f64>| -> Result<f64, String> {
            match (arg, default) {
                (Some(a), _) => a
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v >= 0.0 && v.is_finite())
                    .ok_or_else(|| format!("bad sigma '{a}' in '{s}'")),
                (None, Some(d)) => Ok(d),
                (None, None) => Err(format!("'{name}' needs a sigma, e.g. {name}:0.1")),
            }
        };
        match name {
            "flip_h" if arg.is_none() => Ok(AugmentOp::FlipH),
            "flip_v" if arg.is_none() => Ok(AugmentOp::FlipV),
            "noise" => Ok(AugmentOp::Noise(sigma(None)?)),
            "fancy_pca" => Ok(AugmentOp::FancyPca(sigma(Some(0.1))?)),
            "crop" => {
                let dims = arg.and_then(|a| a.split_once('x')).ok_or_else(|| format!("'{s}': expected crop:HxW"))?;
                let h = dims.0.parse().map_err(|_| format!("bad crop height in '{s}'"))?;
                let w = dims.1.parse().map_err(|_| format!("bad crop width in '{s}'"))?;
                Ok(AugmentOp::Crop(h, w))
            }
            _ => Err(format!("unknown augmentation '{s}'")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::new(&[h, w, c], (0..h * w * c).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(5, 4, 3);
        assert_eq!(flip_h(&flip_h(&img).unwrap()).unwrap(), img);
        assert_eq!(flip_v(&flip_v(&img).unwrap()).unwrap(), img);
        let f = flip_h(&img).unwrap();
        // Pixel (0, 0) moves to (0, 3) with its channels intact.
        assert_eq!(&f.data()[9..12], &img.data()[0..3]);
        let v = flip_v(&img).unwrap();
        assert_eq!(&v.data()[..12], &img.data()[48..60]);
    }

    #[test]
    fn crop_keeps_the_top_left_window() {
        let img = ramp(28, 28, 1);
        let c = crop(&img, 10, 10, (0, 0)).unwrap();
        assert_eq!(c.shape(), &[10, 10, 1]);
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(c.data()[y * 10 + x], img.data()[y * 28 + x]);
            }
        }
        assert_eq!(crop(&img, 3, 2, (25, 26)).unwrap().data()[0], img.data()[25 * 28 + 26]);
        assert!(crop(&img, 10, 10, (20, 0)).is_err());
    }

    #[test]
    fn noise_has_the_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let img = Tensor::full(&[100, 1000, 1], 0.5);
        let out = add_noise(&img, 0.1, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let diffs: Vec<f64> = out
            .data()
            .iter()
            .filter(|&&v| v > 0.0 && v < 1.0)
            .map(|v| v - 0.5)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.1).abs() < 0.005, "sd {sd}");
    }

    #[test]
    fn fancy_pca_on_grayscale_scales_along_the_single_component() {
        let images = Tensor::new(&[2, 2, 2, 1], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let ds = Dataset::from_classes(images, &[0, 1], 10, Split::Train).unwrap();
        let pca = FancyPca::fit(&ds).unwrap();
        assert!((pca.eigenvalues()[0] - 0.25).abs() < 1e-12);
        assert!((pca.shift(&[2.0])[0].abs() - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let img = ramp(2, 2, 1);
        let out = pca.apply(&img, 0.1, &mut rng).unwrap();
        let d0 = out.data()[0] - img.data()[0];
        assert!(out.data().iter().zip(img.data()).all(|(o, i)| ((o - i) - d0).abs() < 1e-12));
    }

    #[test]
    fn fancy_pca_shift_follows_principal_colors() {
        // Colors vary only along (1, 1, 0)/sqrt(2).
        let px: Vec<f64> = (0..8).flat_map(|i| {
            let t = i as f64 / 7.0;
            [t, t, 0.3]
        }).collect();
        let ds = Dataset::from_classes(Tensor::new(&[2, 2, 2, 3], px).unwrap(), &[0, 0], 10, Split::Train).unwrap();
        let pca = FancyPca::fit(&ds).unwrap();
        let s = pca.shift(&[1.0, 5.0, 5.0]);
        assert!((s[0] - s[1]).abs() < 1e-9);
        assert!(s[2].abs() < 1e-9);
    }

    #[test]
    fn parse_ops() {
        assert_eq!("flip_h".parse::<AugmentOp>().unwrap(), AugmentOp::FlipH);
        assert_eq!("noise:0.05".parse::<AugmentOp>().unwrap(), AugmentOp::Noise(0.05));
        assert_eq!("fancy_pca".parse::<AugmentOp>().unwrap(), AugmentOp::FancyPca(0.1));
        assert_eq!("crop:24x24".parse::<AugmentOp>().unwrap(), AugmentOp::Crop(24, 24));
        assert!("noise".parse::<AugmentOp>().is_err());
        assert!("rotate".parse::<AugmentOp>().is_err());
    }
}
