use std::str::FromStr;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{gemm, symmetric_eigen, Layout};
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-8;
const WHITEN_EPSILON: f64 = 1e-5;
const JACOBI_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessKind {
    /// Subtract the per-pixel training mean.
    MeanImage,
    /// Per-pixel mean removal and division by the per-pixel std.
    ZScore,
    /// Project centered data on covariance eigenvectors, scale each
    /// component by `1/sqrt(λ + 1e-5)`.
    PcaWhiten,
}

impl FromStr for PreprocessKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean_image" => Ok(PreprocessKind::MeanImage),
            "zscore" => Ok(PreprocessKind::ZScore),
            "pca_whiten" => Ok(PreprocessKind::PcaWhiten),
            other => Err(format!("unknown preprocessing '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
struct Fitted {
    mean: Vec<f64>,
    /// Per-pixel divisor for z-score.
    std: Vec<f64>,
    /// Whitening matrix `[d, d]`, row-major: column `j` is eigenvector `j`
    /// divided by `sqrt(λ_j + ε)`.
    whiten: Vec<f64>,
}

/// Preprocessing whose statistics come from the training split only.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    kind: PreprocessKind,
    fitted: Option<Fitted>,
}

impl Preprocessor {
    pub fn new(kind: PreprocessKind) -> Self {
        Preprocessor { kind, fitted: None }
    }

    pub fn kind(&self) -> PreprocessKind {
        self.kind
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    /// Fitted per-pixel mean.
    pub fn mean(&self) -> Option<&[f64]> {
        self.fitted.as_ref().map(|f| f.mean.as_slice())
    }

    pub fn fit(&mut self, train: &Dataset) -> Result<()> {
        if train.split() != Split::Train {
            return Err(Error::State("preprocessing must be fitted on the training split".into()));
        }
        let x = train.images();
        let n = x.batch();
        let d = x.len() / n;
        let mut mean = vec![0.0; d];
        for row in x.data().chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut std = Vec::new();
        let mut whiten = Vec::new();
        match self.kind {
            PreprocessKind::MeanImage => {}
            PreprocessKind::ZScore => {
                std = vec![0.0; d];
                for row in x.data().chunks_exact(d) {
                    for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                std.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt().max(STD_FLOOR));
            }
            PreprocessKind::PcaWhiten => {
                let cov = covariance(x.data(), &mean, n, d);
                let (values, vectors) = symmetric_eigen(&cov, d, JACOBI_TOL);
                whiten = vectors;
                for r in 0..d {
                    for (j, lambda) in values.iter().enumerate() {
                        whiten[r * d + j] /= (lambda.max(0.0) + WHITEN_EPSILON).sqrt();
                    }
                }
            }
        }
        self.fitted = Some(Fitted { mean, std, whiten });
        Ok(())
    }

    /// Transforms images `[N, ...]` with the fitted statistics.
    pub fn transform(&self, images: &Tensor) -> Result<Tensor> {
        let f = self
            .fitted
            .as_ref()
            .ok_or_else(|| Error::State("preprocessing applied before fitting on train".into()))?;
        let d = f.mean.len();
        if images.len() / images.batch() != d {
            return Err(Error::shape("preprocess", images.shape(), &[d]));
        }
        let mut centered = images.clone();
        for row in centered.data_mut().chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(&f.mean) {
                *v -= m;
            }
        }
        match self.kind {
            PreprocessKind::MeanImage => Ok(centered),
            PreprocessKind::ZScore => {
                for row in centered.data_mut().chunks_exact_mut(d) {
                    for (v, s) in row.iter_mut().zip(&f.std) {
                        *v /= s;
                    }
                }
                Ok(centered)
            }
            PreprocessKind::PcaWhiten => {
                let flat = centered.into_reshaped(&[images.batch(), d])?;
                let w = Tensor::new(&[d, d], f.whiten.clone())?;
                flat.matmul(&w)?.into_reshaped(images.shape())
            }
        }
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        Ok(dataset.with_images(self.transform(dataset.images())?))
    }
}

/// Population covariance of the rows of `x` (`n x d`).
fn covariance(x: &[f64], mean: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut centered = x.to_vec();
    for row in centered.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(mean) {
            *v -= m;
        }
    }
    let mut cov = vec![0.0; d * d];
    gemm(d, n, d, &centered, Layout::transposed(d), &centered, Layout::row_major(d), 0.0, &mut cov);
    cov.iter_mut().for_each(|v| *v /= n as f64);
    cov
}
