//! Noise schedules, forward diffusion, the first-frame appearance noise
//! prior, and the deterministic DDIM sampling loop.

use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::{ShapeError, Tensor};

/// Floor on the schedule's alpha so DDIM inversion stays well-conditioned
/// at the final training step.
pub const ALPHA_MIN: f64 = 1e-6;

/// Alpha values below this make the DDIM x0 estimate meaningless.
pub const ALPHA_NUMERIC_FLOOR: f64 = 1e-12;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_SAMPLE_STEPS: usize = 25;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("schedule alpha underflow at step {t}: {alpha:e} < {floor:e}")]
    AlphaUnderflow { t: usize, alpha: f64, floor: f64 },
    #[error("denoiser returned shape {got:?}, expected {expected:?}")]
    DenoiserShape {
        expected: LatentShape,
        got: LatentShape,
    },
}

/// Variance-preserving schedule: alpha strictly decreasing from ~1,
/// sigma strictly increasing from 0, alpha^2 + sigma^2 = 1 at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine-style schedule over `steps` training steps, with alpha
    /// clamped at [`ALPHA_MIN`] so the terminal step keeps a usable
    /// signal coefficient.
    pub fn cosine(steps: usize) -> Self {
        assert!(steps >= 1, "schedule needs at least one step");
        let mut alpha = Vec::with_capacity(steps);
        for t in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                t as f64 / (steps - 1) as f64
            };
            alpha.push((std::f64::consts::FRAC_PI_2 * frac).cos().max(ALPHA_MIN));
        }
        let sigma = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        let s = NoiseSchedule { alpha, sigma };
        s.assert_invariants();
        s
    }

    /// Wraps externally supplied tables, enforcing the same invariants.
    pub fn from_tables(alpha: Vec<f64>, sigma: Vec<f64>) -> Self {
        assert_eq!(alpha.len(), sigma.len());
        let s = NoiseSchedule { alpha, sigma };
        s.assert_invariants();
        s
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn assert_invariants(&self) {
        assert!(!self.alpha.is_empty());
        assert!((self.alpha[0] - 1.0).abs() < 1e-6, "alpha[0] must be ~1");
        assert!(self.sigma[0].abs() < 1e-6, "sigma[0] must be ~0");
        for t in 0..self.steps() {
            let (a, s) = (self.alpha[t], self.sigma[t]);
            // sigma may round to exactly 1.0 when alpha is at the
            // numeric floor.
            assert!(a > 0.0 && a <= 1.0 && s >= 0.0 && s <= 1.0);
            let sum = a * a + s * s;
            assert!(
                (sum - 1.0).abs() < 1e-9,
                "alpha^2+sigma^2 = {sum} at step {t}"
            );
            if t > 0 {
                assert!(a < self.alpha[t - 1], "alpha not strictly decreasing");
                assert!(s > self.sigma[t - 1], "sigma not strictly increasing");
            }
        }
    }
}

/// Shape of a panoramic video latent: V views concatenated along width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentShape {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    /// Total width W*V across all views.
    pub pano_width: usize,
    pub channels: usize,
}

impl LatentShape {
    pub fn view_width(&self) -> usize {
        self.pano_width / self.views
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.pano_width * self.channels
    }

    fn validate(&self) {
        assert!(self.views >= 1 && self.frames >= 1);
        assert!(self.height >= 1 && self.channels >= 1);
        assert!(
            self.pano_width % self.views == 0,
            "panoramic width {} not divisible by views {}",
            self.pano_width,
            self.views
        );
    }
}

/// Joint multi-view video latent, stored row-major as (T, H, W*V, C) so a
/// frame's multi-view slab is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    shape: LatentShape,
    pub data: Tensor,
}

impl LatentVideo {
    pub fn zeros(shape: LatentShape) -> Self {
        shape.validate();
        let data = Tensor::zeros(&[
            shape.frames,
            shape.height,
            shape.pano_width,
            shape.channels,
        ]);
        LatentVideo { shape, data }
    }

    pub fn from_tensor(shape: LatentShape, data: Tensor) -> Result<Self, ShapeError> {
        shape.validate();
        let want = [
            shape.frames,
            shape.height,
            shape.pano_width,
            shape.channels,
        ];
        if data.dims() != want {
            return Err(ShapeError::Mismatch {
                expected: want.to_vec(),
                got: data.dims().to_vec(),
            });
        }
        Ok(LatentVideo { shape, data })
    }

    /// Standard-normal latent drawn from substreams keyed by (frame, view),
    /// so each view block's noise is independent of how many other frames
    /// or views exist.
    pub fn seeded_noise(shape: LatentShape, rng: &SeededRng, label: &str) -> Self {
        shape.validate();
        let mut out = LatentVideo::zeros(shape);
        let w = shape.view_width();
        for t in 0..shape.frames {
            for v in 0..shape.views {
                let block = rng.normal_tensor(
                    &format!("{label}/f{t}/v{v}"),
                    &[shape.height, w, shape.channels],
                );
                let src = block.data();
                for y in 0..shape.height {
                    for x in 0..w {
                        for c in 0..shape.channels {
                            let si = (y * w + x) * shape.channels + c;
                            let di = out.index(t, y, v * w + x, c);
                            out.data.data_mut()[di] = src[si];
                        }
                    }
                }
            }
        }
        out
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.shape.height + y) * self.shape.pano_width + x) * self.shape.channels + c
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    /// One frame's contiguous multi-view slab, laid out (H, W*V, C).
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.shape.frame_len();
        &self.data.data()[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.shape.frame_len();
        &mut self.data.data_mut()[t * n..(t + 1) * n]
    }

    /// Copies one frame out as a (H, W*V, C) tensor.
    pub fn frame_tensor(&self, t: usize) -> Tensor {
        Tensor::from_vec(
            &[self.shape.height, self.shape.pano_width, self.shape.channels],
            self.frame(t).to_vec(),
        )
        .unwrap()
    }
}

fn check_same_shape(a: &LatentVideo, b: &LatentVideo) -> Result<(), DiffusionError> {
    if a.shape != b.shape {
        let as_dims = |s: &LatentShape| vec![s.views, s.frames, s.height, s.pano_width, s.channels];
        return Err(ShapeError::Mismatch {
            expected: as_dims(&a.shape),
            got: as_dims(&b.shape),
        }
        .into());
    }
    Ok(())
}

/// Eq: x_t = alpha_t * x + sigma_t * eps, elementwise.
pub fn forward_diffuse(
    x: &LatentVideo,
    t: usize,
    sched: &NoiseSchedule,
    eps: &LatentVideo,
) -> Result<LatentVideo, DiffusionError> {
    assert!(t < sched.steps(), "t out of schedule range");
    check_same_shape(x, eps)?;
    let (a, s) = (sched.alpha[t], sched.sigma[t]);
    let mut out = x.clone();
    for (o, e) in out.data.data_mut().iter_mut().zip(eps.data.data()) {
        *o = a * *o + s * e;
    }
    Ok(out)
}

/// Mixes the first frame's multi-view latent into each listed noise slab:
/// out[i] = lambda * z1 + eps_frames[i]. Callers pass the noises of the
/// frames being denoised (the conditioned first frame stays pure).
pub fn apply_noise_prior(
    z1: &Tensor,
    eps_frames: &[Tensor],
    lambda: f64,
) -> Result<Vec<Tensor>, ShapeError> {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let mut out = Vec::with_capacity(eps_frames.len());
    for eps in eps_frames {
        if eps.dims() != z1.dims() {
            return Err(ShapeError::Mismatch {
                expected: z1.dims().to_vec(),
                got: eps.dims().to_vec(),
            });
        }
        let mut mixed = eps.clone();
        mixed.add_scaled_inplace(z1, lambda)?;
        out.push(mixed);
    }
    Ok(out)
}

/// One deterministic DDIM update from step t to t_prev (eta = 0):
/// x0_hat = (x_t - sigma_t * eps_hat) / alpha_t, then re-noise to t_prev.
pub fn ddim_step(
    x_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentVideo, DiffusionError> {
    assert!(t >= t_prev, "DDIM runs descending step pairs");
    assert!(t < sched.steps());
    check_same_shape(x_t, eps_hat)?;
    if t == t_prev {
        return Ok(x_t.clone());
    }
    let a_t = sched.alpha[t];
    if a_t < ALPHA_NUMERIC_FLOOR {
        return Err(DiffusionError::AlphaUnderflow {
            t,
            alpha: a_t,
            floor: ALPHA_NUMERIC_FLOOR,
        });
    }
    let s_t = sched.sigma[t];
    let (a_p, s_p) = (sched.alpha[t_prev], sched.sigma[t_prev]);
    let mut out = x_t.clone();
    for (o, e) in out.data.data_mut().iter_mut().zip(eps_hat.data.data()) {
        let x0 = (*o - s_t * e) / a_t;
        *o = a_p * x0 + s_p * e;
    }
    Ok(out)
}

/// Uniformly spaced descending step grid over [0, steps-1], endpoints
/// included.
pub fn sample_step_grid(steps: usize, num_steps: usize) -> Vec<usize> {
    assert!(num_steps >= 1 && num_steps <= steps);
    let n = num_steps.max(2);
    let last = (steps - 1) as f64;
    let mut grid: Vec<usize> = (0..n)
        .map(|k| ((n - 1 - k) as f64 * last / (n - 1) as f64).round() as usize)
        .collect();
    grid.dedup();
    grid
}

/// Deterministic DDIM sampling loop. The denoiser callable maps
/// (x_t, t) to a noise estimate; `prior` mixes lambda times the supplied
/// first-frame latent into the initial noise of frames after the first.
pub fn sample<F>(
    mut denoiser: F,
    sched: &NoiseSchedule,
    num_steps: usize,
    shape: LatentShape,
    rng: &SeededRng,
    prior: Option<(&Tensor, f64)>,
) -> Result<LatentVideo, DiffusionError>
where
    F: FnMut(&LatentVideo, usize) -> LatentVideo,
{
    assert!(num_steps <= sched.steps(), "more sample steps than schedule");
    let mut x = LatentVideo::seeded_noise(shape, rng, "sample/init");
    if let Some((z1, lambda)) = prior {
        let want = [shape.height, shape.pano_width, shape.channels];
        if z1.dims() != want {
            return Err(ShapeError::Mismatch {
                expected: want.to_vec(),
                got: z1.dims().to_vec(),
            }
            .into());
        }
        for t in 1..shape.frames {
            let frame = x.frame_mut(t);
            for (o, z) in frame.iter_mut().zip(z1.data()) {
                *o += lambda * z;
            }
        }
    }
    let grid = sample_step_grid(sched.steps(), num_steps);
    for pair in grid.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps_hat = denoiser(&x, t);
        if eps_hat.shape != shape {
            return Err(DiffusionError::DenoiserShape {
                expected: shape,
                got: eps_hat.shape,
            });
        }
        x = ddim_step(&x, &eps_hat, t, t_prev, sched)?;
    }
    Ok(x)
}
