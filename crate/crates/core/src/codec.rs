//! Exact invertible latent codec: the stand-in for a learned pixel
//! autoencoder.
//!
//! Encoding rearranges f x f RGB pixel patches into f*f*3 channels per
//! latent position, applies a fixed signed channel permutation (an
//! orthogonal mixing that is bit-exact to invert), and keeps the first
//! C channels as the diffusion latent. The remaining channels are the
//! complement: carrying them alongside makes decode(encode(x)) == x at
//! the bit level, while generated latents decode against a zero
//! complement.

use thiserror::Error;

use crate::diffusion::{LatentShape, LatentVideo};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const PIXEL_CHANNELS: usize = 3;
pub const DEFAULT_FACTOR: usize = 8;
pub const DEFAULT_LATENT_CHANNELS: usize = 4;
const CODEC_SEED: u64 = 0x636f_6465_6300;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("{what} {got} not divisible by codec factor {factor}")]
    NotDivisible {
        what: &'static str,
        got: usize,
        factor: usize,
    },
    #[error("latent has {got} channels, codec expects {expected}")]
    LatentChannels { expected: usize, got: usize },
}

/// Per-view per-frame RGB pixel tensors, stored (V, T, H, W, 3) f64.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl PixelVideo {
    pub fn zeros(views: usize, frames: usize, height: usize, width: usize) -> Self {
        assert!(views >= 1 && frames >= 1 && height >= 1 && width >= 1);
        PixelVideo {
            views,
            frames,
            height,
            width,
            data: vec![0.0; views * frames * height * width * PIXEL_CHANNELS],
        }
    }

    pub fn random(rng: &SeededRng, label: &str, views: usize, frames: usize, height: usize, width: usize) -> Self {
        let t = rng.normal_tensor(label, &[views, frames, height, width, PIXEL_CHANNELS]);
        PixelVideo {
            views,
            frames,
            height,
            width,
            data: t.into_data(),
        }
    }

    pub fn dims(&self) -> [usize; 5] {
        [
            self.views,
            self.frames,
            self.height,
            self.width,
            PIXEL_CHANNELS,
        ]
    }

    #[inline]
    pub fn index(&self, v: usize, t: usize, y: usize, x: usize, c: usize) -> usize {
        (((v * self.frames + t) * self.height + y) * self.width + x) * PIXEL_CHANNELS + c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// One view's frame as a contiguous (H, W, 3) slice.
    pub fn frame(&self, v: usize, t: usize) -> &[f64] {
        let n = self.height * self.width * PIXEL_CHANNELS;
        let start = (v * self.frames + t) * n;
        &self.data[start..start + n]
    }

    pub fn frame_mut(&mut self, v: usize, t: usize) -> &mut [f64] {
        let n = self.height * self.width * PIXEL_CHANNELS;
        let start = (v * self.frames + t) * n;
        &mut self.data[start..start + n]
    }

    /// Width-concatenated panorama of one frame, (H, W*V, 3).
    pub fn panorama_frame(&self, t: usize) -> Tensor {
        let mut out = Tensor::zeros(&[self.height, self.width * self.views, PIXEL_CHANNELS]);
        let os = out.data_mut();
        for v in 0..self.views {
            for y in 0..self.height {
                for x in 0..self.width {
                    for c in 0..PIXEL_CHANNELS {
                        os[(y * self.width * self.views + v * self.width + x) * PIXEL_CHANNELS
                            + c] = self.data[self.index(v, t, y, x, c)];
                    }
                }
            }
        }
        out
    }
}

/// Latent plus the complement channels an exact reconstruction needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVideo {
    pub latent: LatentVideo,
    /// (T, H_lat, W_lat_pano, patch_channels - C), zero for generated
    /// latents.
    pub complement: Tensor,
}

/// Deterministic invertible pixel <-> latent transform.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    pub factor: usize,
    pub latent_channels: usize,
    /// Channel permutation: mixed[i] = sign[i] * patch[perm[i]].
    perm: Vec<usize>,
    sign: Vec<f64>,
}

impl Default for LatentCodec {
    fn default() -> Self {
        LatentCodec::new(DEFAULT_FACTOR, DEFAULT_LATENT_CHANNELS)
    }
}

impl LatentCodec {
    pub fn new(factor: usize, latent_channels: usize) -> Self {
        let pc = factor * factor * PIXEL_CHANNELS;
        assert!(factor >= 1);
        assert!(
            latent_channels >= 1 && latent_channels <= pc,
            "latent channels must fit in {pc} patch channels"
        );
        let rng = SeededRng::new(CODEC_SEED);
        let mut perm: Vec<usize> = (0..pc).collect();
        // Fisher-Yates driven by the fixed codec stream.
        for i in (1..pc).rev() {
            let j = rng.uniform_usize(&format!("codec/perm/{factor}/{i}"), i + 1);
            perm.swap(i, j);
        }
        let sign = (0..pc)
            .map(|i| {
                if rng.uniform_usize(&format!("codec/sign/{factor}/{i}"), 2) == 0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        LatentCodec {
            factor,
            latent_channels,
            perm,
            sign,
        }
    }

    pub fn patch_channels(&self) -> usize {
        self.factor * self.factor * PIXEL_CHANNELS
    }

    fn check_dims(&self, height: usize, width: usize) -> Result<(), CodecError> {
        if height % self.factor != 0 {
            return Err(CodecError::NotDivisible {
                what: "height",
                got: height,
                factor: self.factor,
            });
        }
        if width % self.factor != 0 {
            return Err(CodecError::NotDivisible {
                what: "width",
                got: width,
                factor: self.factor,
            });
        }
        Ok(())
    }

    /// Pixels -> panoramic latent (+ complement). Views concatenate
    /// along latent width in view order.
    pub fn encode_frames(&self, images: &PixelVideo) -> Result<EncodedVideo, CodecError> {
        self.check_dims(images.height, images.width)?;
        let f = self.factor;
        let (hl, wl) = (images.height / f, images.width / f);
        let pc = self.patch_channels();
        let cl = self.latent_channels;
        let shape = LatentShape {
            views: images.views,
            frames: images.frames,
            height: hl,
            pano_width: wl * images.views,
            channels: cl,
        };
        let mut latent = LatentVideo::zeros(shape);
        let mut complement = Tensor::zeros(&[images.frames, hl, wl * images.views, pc - cl]);
        let comp_dims = complement.dims().to_vec();
        let mut patch = vec![0.0f64; pc];
        for v in 0..images.views {
            for t in 0..images.frames {
                for py in 0..hl {
                    for px in 0..wl {
                        for dy in 0..f {
                            for dx in 0..f {
                                for c in 0..PIXEL_CHANNELS {
                                    patch[(dy * f + dx) * PIXEL_CHANNELS + c] = images.data
                                        [images.index(v, t, py * f + dy, px * f + dx, c)];
                                }
                            }
                        }
                        let lx = v * wl + px;
                        for i in 0..pc {
                            let mixed = self.sign[i] * patch[self.perm[i]];
                            if i < cl {
                                let idx = latent.index(t, py, lx, i);
                                latent.data.data_mut()[idx] = mixed;
                            } else {
                                let idx = ((t * hl + py) * comp_dims[2] + lx) * (pc - cl)
                                    + (i - cl);
                                complement.data_mut()[idx] = mixed;
                            }
                        }
                    }
                }
            }
        }
        Ok(EncodedVideo { latent, complement })
    }

    /// Exact inverse of [`Self::encode_frames`].
    pub fn decode_frames(&self, enc: &EncodedVideo) -> PixelVideo {
        let shape = enc.latent.shape();
        let cl = self.latent_channels;
        assert_eq!(shape.channels, cl, "latent channel mismatch");
        let pc = self.patch_channels();
        let comp_dims = enc.complement.dims();
        assert_eq!(
            comp_dims,
            [shape.frames, shape.height, shape.pano_width, pc - cl],
            "complement shape mismatch"
        );
        self.decode_impl(&enc.latent, Some(&enc.complement))
    }

    /// Decodes a bare latent against a zero complement (the generation
    /// path, where no complement exists).
    pub fn decode_latent(&self, latent: &LatentVideo) -> Result<PixelVideo, CodecError> {
        let shape = latent.shape();
        if shape.channels != self.latent_channels {
            return Err(CodecError::LatentChannels {
                expected: self.latent_channels,
                got: shape.channels,
            });
        }
        Ok(self.decode_impl(latent, None))
    }

    fn decode_impl(&self, latent: &LatentVideo, complement: Option<&Tensor>) -> PixelVideo {
        let shape = latent.shape();
        let f = self.factor;
        let pc = self.patch_channels();
        let cl = self.latent_channels;
        let wl = shape.view_width();
        let mut out = PixelVideo::zeros(shape.views, shape.frames, shape.height * f, wl * f);
        let mut patch = vec![0.0f64; pc];
        for v in 0..shape.views {
            for t in 0..shape.frames {
                for py in 0..shape.height {
                    for px in 0..wl {
                        let lx = v * wl + px;
                        for i in 0..pc {
                            let mixed = if i < cl {
                                latent.data.data()[latent.index(t, py, lx, i)]
                            } else if let Some(comp) = complement {
                                comp.data()[((t * shape.height + py) * shape.pano_width + lx)
                                    * (pc - cl)
                                    + (i - cl)]
                            } else {
                                0.0
                            };
                            // sign is +/-1, so multiplying again is the
                            // exact inverse.
                            patch[self.perm[i]] = self.sign[i] * mixed;
                        }
                        for dy in 0..f {
                            for dx in 0..f {
                                for c in 0..PIXEL_CHANNELS {
                                    let idx =
                                        out.index(v, t, py * f + dy, px * f + dx, c);
                                    out.data[idx] = patch[(dy * f + dx) * PIXEL_CHANNELS + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}
