//! Desk-scale evaluation: Fréchet distance between Gaussian feature
//! statistics with a pluggable extractor, plus temporal and seam
//! consistency proxies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::PixelVideo;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("feature dims differ: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("width {width} not divisible by {views} views")]
    WidthViews { width: usize, views: usize },
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Fits mean and unbiased (n-1) covariance to d-dimensional samples.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats, MetricsError> {
    let n = features.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let d = features[0].len();
    assert!(d >= 1, "features must be non-empty vectors");
    for f in features {
        if f.len() != d {
            return Err(MetricsError::DimMismatch { a: d, b: f.len() });
        }
    }
    let mut mean = DVector::zeros(d);
    for f in features {
        for (i, x) in f.iter().enumerate() {
            mean[i] += x;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let centered = DVector::from_iterator(d, f.iter().enumerate().map(|(i, x)| x - mean[i]));
        cov += &centered * centered.transpose();
    }
    cov /= (n - 1) as f64;
    // Covariance is symmetric by construction; enforce it exactly so
    // the eigen route stays stable.
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, count: n })
}

/// Symmetric positive-semidefinite square root via eigendecomposition;
/// small negative eigenvalues are clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = eig.eigenvalues.len();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..d {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..d {
            scaled[(i, j)] *= s;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussians:
/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the cross
/// term evaluated through the symmetric route
/// Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}).
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    if a.mean.len() != b.mean.len() {
        return Err(MetricsError::DimMismatch {
            a: a.mean.len(),
            b: b.mean.len(),
        });
    }
    let dmu = &a.mean - &b.mean;
    let mean_term = dmu.dot(&dmu);
    let a_half = psd_sqrt(&a.cov);
    let inner = &a_half * &b.cov * &a_half;
    let cross = psd_sqrt(&inner);
    let cov_term = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    // The covariance part is non-negative in exact arithmetic; floor the
    // numeric residue.
    Ok(mean_term + cov_term.max(0.0))
}

/// Mean squared difference between consecutive frames, averaged over
/// views and frame pairs.
pub fn temporal_consistency(video: &PixelVideo) -> Result<f64, MetricsError> {
    let [views, frames, height, width, ch] = video.dims();
    if frames < 2 {
        return Err(MetricsError::TooFewFrames(frames));
    }
    let per_frame = (height * width * ch) as f64;
    let mut total = 0.0;
    for v in 0..views {
        for t in 0..frames - 1 {
            let a = video.frame(v, t);
            let b = video.frame(v, t + 1);
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            total += sq / per_frame;
        }
    }
    Ok(total / (views * (frames - 1)) as f64)
}

/// Mean squared horizontal gradient across the V-1 view boundaries of a
/// width-concatenated frame, minus the mean interior horizontal
/// gradient, floored at 0. A single view has no seams and scores 0.
pub fn seam_discontinuity(frame: &Tensor, views: usize) -> Result<f64, MetricsError> {
    let d = frame.dims();
    assert!(d.len() == 3, "expected a (H, W, C) frame");
    let (h, w, c) = (d[0], d[1], d[2]);
    if w % views != 0 {
        return Err(MetricsError::WidthViews { width: w, views });
    }
    if views == 1 {
        return Ok(0.0);
    }
    let wv = w / views;
    let data = frame.data();
    let mut boundary = (0.0, 0usize);
    let mut interior = (0.0, 0usize);
    for y in 0..h {
        for x in 1..w {
            for ci in 0..c {
                let i = (y * w + x) * c + ci;
                let g = data[i] - data[i - c];
                let acc = if x % wv == 0 { &mut boundary } else { &mut interior };
                acc.0 += g * g;
                acc.1 += 1;
            }
        }
    }
    let bm = boundary.0 / boundary.1.max(1) as f64;
    let im = interior.0 / interior.1.max(1) as f64;
    Ok((bm - im).max(0.0))
}

/// Maps a per-view frame to a feature vector.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    /// frame: (H, W, 3) pixel tensor.
    fn features(&self, frame: &Tensor) -> Vec<f64>;
}

/// Default extractor: grayscale average-pooled onto a grid x grid array
/// (d = grid^2). Deterministic and dependency-free.
pub struct PooledGray {
    pub grid: usize,
}

impl Default for PooledGray {
    fn default() -> Self {
        PooledGray { grid: 4 }
    }
}

impl FeatureExtractor for PooledGray {
    fn dim(&self) -> usize {
        self.grid * self.grid
    }

    fn features(&self, frame: &Tensor) -> Vec<f64> {
        let d = frame.dims();
        let (h, w, c) = (d[0], d[1], d[2]);
        let g = self.grid;
        let data = frame.data();
        let mut out = vec![0.0; g * g];
        for gy in 0..g {
            let y0 = gy * h / g;
            let y1 = ((gy + 1) * h / g).max(y0 + 1).min(h);
            for gx in 0..g {
                let x0 = gx * w / g;
                let x1 = ((gx + 1) * w / g).max(x0 + 1).min(w);
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let base = (y * w + x) * c;
                        let mut px = 0.0;
                        for ci in 0..c {
                            px += data[base + ci];
                        }
                        sum += px / c as f64;
                    }
                }
                out[gy * g + gx] = sum / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        out
    }
}

/// One feature vector per (view, frame) image.
pub fn video_features(video: &PixelVideo, extractor: &dyn FeatureExtractor) -> Vec<Vec<f64>> {
    let [views, frames, height, width, ch] = video.dims();
    let mut out = Vec::with_capacity(views * frames);
    for v in 0..views {
        for t in 0..frames {
            let frame = Tensor::from_vec(&[height, width, ch], video.frame(v, t).to_vec())
                .expect("frame slab has matching volume");
            out.push(extractor.features(&frame));
        }
    }
    out
}

/// The JSON metrics report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fd: f64,
    pub temporal_consistency: f64,
    pub seam: f64,
    pub n_samples: usize,
}

/// Full report: Fréchet distance of generated vs reference features,
/// temporal consistency of the generated video, and the mean seam
/// score over its panoramic frames.
pub fn evaluate(
    generated: &PixelVideo,
    reference: &PixelVideo,
    extractor: &dyn FeatureExtractor,
) -> Result<MetricsReport, MetricsError> {
    let gen_feats = video_features(generated, extractor);
    let ref_feats = video_features(reference, extractor);
    let ga = fit_gaussian(&gen_feats)?;
    let gb = fit_gaussian(&ref_feats)?;
    let fd = frechet_distance(&ga, &gb)?;
    let temporal = temporal_consistency(generated)?;
    let [views, frames, ..] = generated.dims();
    let mut seam = 0.0;
    for t in 0..frames {
        seam += seam_discontinuity(&generated.panorama_frame(t), views)?;
    }
    seam /= frames as f64;
    Ok(MetricsReport {
        fd,
        temporal_consistency: temporal,
        seam,
        n_samples: gen_feats.len(),
    })
}
