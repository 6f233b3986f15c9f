//! Two-stage train/infer orchestration: scene -> control tensors ->
//! latents -> decoded frames, plus the super-resolution stage.
//!
//! Stage 1 trains/samples multi-view single frames (image mode,
//! cross-frame attention bypassed). Stage 2 trains/samples the full
//! video conditioned on the stage-1 first-frame latent, which is
//! concatenated at frame 1 (zero padding after) and mixed into the
//! initialization noise of later frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, LatentCodec, PixelVideo, DEFAULT_FACTOR, DEFAULT_LATENT_CHANNELS};
use crate::denoiser::{
    build_input, loss_gradient, predict_noise, sgd_step, CheckpointError, DenoiserConfig,
    DenoiserError, DenoiserWeights, Mode, TrainBatch,
};
use crate::diffusion::{self, DiffusionError, LatentShape, LatentVideo, NoiseSchedule};
use crate::layout::{self, ControlTensor, LayoutError, Palette, BOX_CH, CHANNELS, POSE_CH, ROAD_CH};
use crate::rng::SeededRng;
use crate::scene::{text_attribute_embedding, SceneError, SceneFrame, SceneSequence};
use crate::tensor::Tensor;

/// Spatial super-resolution factor of the resize/plugin stage.
pub const SR_FACTOR: usize = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("sr mode 'plugin' selected but no plugin was provided")]
    PluginMissing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrMode {
    None,
    Resize,
    Plugin,
}

fn d_view_width() -> usize {
    512
}
fn d_view_height() -> usize {
    256
}
fn d_frames() -> usize {
    8
}
fn d_views() -> usize {
    6
}
fn d_steps() -> usize {
    25
}
fn d_lambda_train() -> f64 {
    0.05
}
fn d_lambda_infer() -> f64 {
    0.07
}
fn d_schedule_steps() -> usize {
    1000
}
fn d_sr() -> SrMode {
    SrMode::Resize
}
fn d_train_steps() -> usize {
    200
}
fn d_learning_rate() -> f64 {
    0.002
}
fn d_d_max() -> f64 {
    60.0
}

/// Run parameters; the JSON config file mirrors these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Per-view output resolution (width x height).
    #[serde(default = "d_view_width")]
    pub view_width: usize,
    #[serde(default = "d_view_height")]
    pub view_height: usize,
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_views")]
    pub views: usize,
    /// Number of deterministic sampling steps.
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lambda_train")]
    pub lambda_train: f64,
    #[serde(default = "d_lambda_infer")]
    pub lambda_infer: f64,
    #[serde(default)]
    pub seed: u64,
    /// Length of the training noise schedule.
    #[serde(default = "d_schedule_steps")]
    pub schedule_steps: usize,
    #[serde(default = "d_sr")]
    pub sr: SrMode,
    #[serde(default = "d_train_steps")]
    pub train_steps: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    /// Depth range of the layout rasterizer, meters.
    #[serde(default = "d_d_max")]
    pub d_max: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |msg: String| Err(PipelineError::Config(msg));
        let f = DEFAULT_FACTOR;
        if self.view_width % (2 * f) != 0 || self.view_height % (2 * f) != 0 {
            return err(format!(
                "view resolution {}x{} must divide by {} (codec factor {f} times the down level)",
                self.view_width,
                self.view_height,
                2 * f
            ));
        }
        if self.view_width < 2 * f || self.view_height < 2 * f {
            return err("view resolution too small".into());
        }
        if self.frames < 1 || self.views < 1 {
            return err("frames and views must be at least 1".into());
        }
        if self.lambda_train < 0.0 || self.lambda_infer < 0.0 {
            return err("lambda must be non-negative".into());
        }
        if self.schedule_steps < 2 {
            return err("schedule needs at least 2 steps".into());
        }
        if self.steps < 1 || self.steps > self.schedule_steps {
            return err(format!(
                "sampling steps {} must lie in 1..={}",
                self.steps, self.schedule_steps
            ));
        }
        if self.train_steps < 1 {
            return err("train_steps must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.d_max.is_finite() || self.d_max <= 0.0 {
            return err("learning_rate must be >= 0 and d_max positive".into());
        }
        Ok(())
    }

    /// Latent geometry induced by the codec factor.
    pub fn latent_shape(&self, frames: usize) -> LatentShape {
        LatentShape {
            views: self.views,
            frames,
            height: self.view_height / DEFAULT_FACTOR,
            pano_width: self.views * self.view_width / DEFAULT_FACTOR,
            channels: DEFAULT_LATENT_CHANNELS,
        }
    }
}

/// Parses a config JSON string with path-qualified error messages.
pub fn parse_config(text: &str) -> Result<RunConfig, PipelineError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| PipelineError::Config(format!("{} at {}", e.inner(), e.path())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// The network layout used by both stages at desk scale.
pub fn default_denoiser_config() -> DenoiserConfig {
    DenoiserConfig::tiny()
}

// ---------------------------------------------------------------------
// Dataset assembly.
// ---------------------------------------------------------------------

/// One prepared scene window: rendered control, synthetic ground-truth
/// frames, their exact latents, and the text embedding.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub control: ControlTensor,
    pub frames: PixelVideo,
    pub latents: LatentVideo,
    pub text: Tensor,
}

/// Deterministic ground-truth frames composited from the layout
/// channels, so image content correlates with the conditioning.
pub fn ground_truth_frames(control: &ControlTensor) -> PixelVideo {
    let [views, frames, height, width, _] = control.dims();
    let mut video = PixelVideo::zeros(views, frames, height, width);
    for v in 0..views {
        for t in 0..frames {
            let slab = control.slice(v, t);
            let out = video.frame_mut(v, t);
            for p in 0..height * width {
                let px = &slab[p * CHANNELS..(p + 1) * CHANNELS];
                for c in 0..3 {
                    let boxes = px[BOX_CH + c] as f64;
                    let roads = px[ROAD_CH + c] as f64;
                    let pose = px[POSE_CH + c] as f64 / 255.0;
                    out[p * 3 + c] = (0.2 * pose + 0.5 * roads + 0.7 * boxes).min(1.0);
                }
            }
        }
    }
    video
}

fn control_activation(control: &ControlTensor, frame_lo: usize, frame_hi: usize) -> Tensor {
    let [views, _, height, width, _] = control.dims();
    let t_out = frame_hi - frame_lo;
    let mut act = Tensor::zeros(&[t_out, height, views * width, CHANNELS]);
    let dst = act.data_mut();
    for (ti, t) in (frame_lo..frame_hi).enumerate() {
        for v in 0..views {
            let slab = control.slice(v, t);
            for y in 0..height {
                for x in 0..width {
                    let s = (y * width + x) * CHANNELS;
                    let d = ((ti * height + y) * views * width + v * width + x) * CHANNELS;
                    for c in 0..CHANNELS {
                        let raw = slab[s + c] as f64;
                        // Pose pseudo-color is stored in [0, 255]; the
                        // network sees every channel on a [0, 1] scale.
                        dst[d + c] = if c >= POSE_CH { raw / 255.0 } else { raw };
                    }
                }
            }
        }
    }
    act
}

/// Renders control, composites ground truth, and encodes latents for
/// the first `config.frames` frames of a scene.
pub fn prepare_example(
    scene: &SceneSequence,
    config: &RunConfig,
    codec: &LatentCodec,
    net: &DenoiserConfig,
) -> Result<TrainExample, PipelineError> {
    if scene.view_count() != config.views {
        return Err(PipelineError::Dataset(format!(
            "scene has {} views, config expects {}",
            scene.view_count(),
            config.views
        )));
    }
    if scene.frame_count() < config.frames {
        return Err(PipelineError::Dataset(format!(
            "scene has {} frames, config expects at least {}",
            scene.frame_count(),
            config.frames
        )));
    }
    let window = SceneSequence {
        frames: scene.frames[..config.frames].to_vec(),
        attributes: scene.attributes.clone(),
    };
    let control = layout::render_sequence(
        &window,
        config.view_width,
        config.view_height,
        config.d_max,
        &Palette::default(),
    )?;
    let frames = ground_truth_frames(&control);
    let latents = codec.encode_frames(&frames)?.latent;
    let text = Tensor::from_vec(
        &[net.text_dim],
        text_attribute_embedding(&scene.attributes, net.text_dim),
    )
    .expect("embedding length matches dim");
    Ok(TrainExample {
        control,
        frames,
        latents,
        text,
    })
}

// ---------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------

fn latent_single_frame(latents: &LatentVideo, t: usize) -> LatentVideo {
    let s = latents.shape();
    let shape = LatentShape { frames: 1, ..s };
    let mut out = LatentVideo::zeros(shape);
    out.data.data_mut().copy_from_slice(latents.frame(t));
    out
}

fn train_loop(
    weights: &mut DenoiserWeights,
    batches: &[TrainBatch],
    config: &RunConfig,
    mode: Mode,
    rng: &SeededRng,
) -> Result<Vec<f64>, PipelineError> {
    let sched = NoiseSchedule::cosine(config.schedule_steps);
    let lambda = match mode {
        Mode::Video => config.lambda_train,
        Mode::Image => 0.0,
    };
    let mut history = Vec::with_capacity(config.train_steps);
    for step in 0..config.train_steps {
        let idx = step % batches.len();
        let batch = &batches[idx];
        // The timestep/noise draw is keyed by batch, not by step, so each
        // batch denotes one fixed training tuple; revisiting it descends
        // the same objective and a single batch can be overfit.
        let tuple_rng = rng.child(&format!("tuple/{idx}"));
        let (loss, grads) = loss_gradient(weights, batch, &sched, lambda, &tuple_rng, mode)?;
        sgd_step(weights, &grads, config.learning_rate)?;
        history.push(loss);
    }
    Ok(history)
}

/// Stage-1 training: image-mode loop over per-frame multi-view samples.
pub fn train_stage1(
    scenes: &[SceneSequence],
    config: &RunConfig,
) -> Result<(DenoiserWeights, Vec<f64>), PipelineError> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(PipelineError::Dataset("empty dataset".into()));
    }
    let net = default_denoiser_config();
    let codec = LatentCodec::new(DEFAULT_FACTOR, DEFAULT_LATENT_CHANNELS);
    let mut batches = Vec::new();
    for scene in scenes {
        let ex = prepare_example(scene, config, &codec, &net)?;
        for t in 0..config.frames {
            batches.push(TrainBatch {
                x: latent_single_frame(&ex.latents, t),
                control: Some(control_activation(&ex.control, t, t + 1)),
                text: ex.text.clone(),
                z1: None,
            });
        }
    }
    let rng = SeededRng::new(config.seed).child("stage1");
    let mut weights = DenoiserWeights::init(&net, &rng.child("init"));
    let history = train_loop(&mut weights, &batches, config, Mode::Image, &rng)?;
    Ok((weights, history))
}

/// Stage-2 training: video mode with the ground-truth first-frame
/// latent as condition and the noise prior at lambda_train.
pub fn train_stage2(
    scenes: &[SceneSequence],
    config: &RunConfig,
) -> Result<(DenoiserWeights, Vec<f64>), PipelineError> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(PipelineError::Dataset("empty dataset".into()));
    }
    if config.frames < 2 {
        return Err(PipelineError::Dataset(
            "stage 2 needs at least 2 frames per scene".into(),
        ));
    }
    let net = default_denoiser_config();
    let codec = LatentCodec::new(DEFAULT_FACTOR, DEFAULT_LATENT_CHANNELS);
    let mut batches = Vec::new();
    for scene in scenes {
        if scene.frame_count() < 2 {
            return Err(PipelineError::Dataset(format!(
                "stage 2 needs T >= 2, scene has {} frame(s)",
                scene.frame_count()
            )));
        }
        let ex = prepare_example(scene, config, &codec, &net)?;
        batches.push(TrainBatch {
            z1: Some(ex.latents.frame_tensor(0)),
            x: ex.latents,
            control: Some(control_activation(&ex.control, 0, config.frames)),
            text: ex.text,
        });
    }
    let rng = SeededRng::new(config.seed).child("stage2");
    let mut weights = DenoiserWeights::init(&net, &rng.child("init"));
    let history = train_loop(&mut weights, &batches, config, Mode::Video, &rng)?;
    Ok((weights, history))
}

// ---------------------------------------------------------------------
// Inference.
// ---------------------------------------------------------------------

/// External upscaler honoring the 2x super-resolution contract.
pub trait SrPlugin {
    fn upscale(&self, video: &PixelVideo) -> PixelVideo;
}

/// Bilinear 2x upsampling; destination pixel (2y, 2x) lands exactly on
/// source pixel (y, x).
pub fn bilinear_upsample2(video: &PixelVideo) -> PixelVideo {
    let [views, frames, height, width, ch] = video.dims();
    let (oh, ow) = (SR_FACTOR * height, SR_FACTOR * width);
    let mut out = PixelVideo::zeros(views, frames, oh, ow);
    for v in 0..views {
        for t in 0..frames {
            let src = video.frame(v, t);
            let dst = out.frame_mut(v, t);
            for y in 0..oh {
                let sy = y as f64 / SR_FACTOR as f64;
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(height - 1);
                let fy = sy - y0 as f64;
                for x in 0..ow {
                    let sx = x as f64 / SR_FACTOR as f64;
                    let x0 = sx.floor() as usize;
                    let x1 = (x0 + 1).min(width - 1);
                    let fx = sx - x0 as f64;
                    for c in 0..ch {
                        let p00 = src[(y0 * width + x0) * ch + c];
                        let p01 = src[(y0 * width + x1) * ch + c];
                        let p10 = src[(y1 * width + x0) * ch + c];
                        let p11 = src[(y1 * width + x1) * ch + c];
                        let top = p00 + fx * (p01 - p00);
                        let bot = p10 + fx * (p11 - p10);
                        dst[(y * ow + x) * ch + c] = top + fy * (bot - top);
                    }
                }
            }
        }
    }
    out
}

/// Applies the selected super-resolution stage.
pub fn super_resolve(
    video: &PixelVideo,
    mode: SrMode,
    plugin: Option<&dyn SrPlugin>,
) -> Result<PixelVideo, PipelineError> {
    match mode {
        SrMode::None => Ok(video.clone()),
        SrMode::Resize => Ok(bilinear_upsample2(video)),
        SrMode::Plugin => {
            let plugin = plugin.ok_or(PipelineError::PluginMissing)?;
            let out = plugin.upscale(video);
            let [v, t, h, w, _] = video.dims();
            assert_eq!(
                out.dims(),
                [v, t, SR_FACTOR * h, SR_FACTOR * w, 3],
                "plugin violated the 2x contract"
            );
            Ok(out)
        }
    }
}

/// Log line data surfaced by the CLI for every generation run.
#[derive(Debug, Clone, Serialize)]
pub struct RunLog {
    pub lambda_infer: f64,
    pub steps: usize,
    pub seed: u64,
}

pub struct GenerateOutput {
    pub video: PixelVideo,
    pub latents: LatentVideo,
    pub log: RunLog,
}

fn check_weights(net: &DenoiserConfig, w: &DenoiserWeights, which: &str) -> Result<(), PipelineError> {
    if w.config != *net {
        return Err(PipelineError::Config(format!(
            "{which} checkpoint config does not match the run's network layout"
        )));
    }
    Ok(())
}

/// Two-stage generation: stage 1 samples the multi-view first frame
/// from the frame-1 control; stage 2 samples the full video conditioned
/// on that latent with the inference noise prior. The condition latent
/// stays fixed across sampling steps (it is never re-noised).
pub fn generate(
    scene: &SceneSequence,
    weights1: &DenoiserWeights,
    weights2: &DenoiserWeights,
    config: &RunConfig,
    plugin: Option<&dyn SrPlugin>,
) -> Result<GenerateOutput, PipelineError> {
    config.validate()?;
    let net = weights1.config.clone();
    check_weights(&net, weights2, "stage-2")?;
    if net.latent_channels != DEFAULT_LATENT_CHANNELS || net.control_channels != CHANNELS {
        return Err(PipelineError::Config(
            "checkpoint network is incompatible with the codec/layout channel counts".into(),
        ));
    }
    if config.sr == SrMode::Plugin && plugin.is_none() {
        return Err(PipelineError::PluginMissing);
    }
    let codec = LatentCodec::new(DEFAULT_FACTOR, DEFAULT_LATENT_CHANNELS);
    let ex = prepare_example(scene, config, &codec, &net)?;
    let sched = NoiseSchedule::cosine(config.schedule_steps);
    let rng = SeededRng::new(config.seed);
    let views = config.views;

    // Stage 1: multi-view first frame, image mode, frame-1 control.
    let shape1 = config.latent_shape(1);
    let ctrl1 = control_activation(&ex.control, 0, 1);
    let stage1 = diffusion::sample(
        |x_t, t| {
            let x_in = build_input(x_t, None, net.cond_channels);
            let pred = predict_noise(weights1, &x_in, views, t, &ex.text, Some(&ctrl1), Mode::Image)
                .expect("stage-1 shapes validated before sampling");
            LatentVideo::from_tensor(shape1, pred).expect("denoiser preserves latent dims")
        },
        &sched,
        config.steps,
        shape1,
        &rng.child("stage1"),
        None,
    )?;
    let z1 = stage1.frame_tensor(0);

    // Stage 2: full video, conditioned on z1, inference prior.
    let shape2 = config.latent_shape(config.frames);
    let ctrl_full = control_activation(&ex.control, 0, config.frames);
    let latents = diffusion::sample(
        |x_t, t| {
            let x_in = build_input(x_t, Some(&z1), net.cond_channels);
            let pred = predict_noise(
                weights2,
                &x_in,
                views,
                t,
                &ex.text,
                Some(&ctrl_full),
                Mode::Video,
            )
            .expect("stage-2 shapes validated before sampling");
            LatentVideo::from_tensor(shape2, pred).expect("denoiser preserves latent dims")
        },
        &sched,
        config.steps,
        shape2,
        &rng.child("stage2"),
        Some((&z1, config.lambda_infer)),
    )?;

    let decoded = codec.decode_latent(&latents)?;
    let video = match config.sr {
        SrMode::None => decoded,
        mode => super_resolve(&decoded, mode, plugin)?,
    };
    Ok(GenerateOutput {
        video,
        latents,
        log: RunLog {
            lambda_infer: config.lambda_infer,
            steps: config.steps,
            seed: config.seed,
        },
    })
}

// ---------------------------------------------------------------------
// Synthetic scenes (fixtures and property tests).
// ---------------------------------------------------------------------

/// Small valid scene: cameras on a yaw ring, one moving box, one road
/// polyline, deterministic in (views, frames).
pub fn synthetic_scene(views: usize, frames: usize) -> SceneSequence {
    use crate::scene::{CameraCalib, LaneType, ObjectBox3D, RoadPolyline};
    use nalgebra::{Matrix4, Vector3};
    assert!(views >= 1 && frames >= 1);
    let mut scene_frames = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut cameras = Vec::with_capacity(views);
        for v in 0..views {
            let yaw = 2.0 * std::f64::consts::PI * v as f64 / views as f64;
            let (s, c) = yaw.sin_cos();
            // Camera axes: x right, y down, z forward; forward points
            // along the ring direction, mounted 1.6 m above ground.
            let extrinsic = Matrix4::new(
                c, 0.0, -s, 0.0, //
                -s, 0.0, -c, 0.0, //
                0.0, -1.0, 0.0, 1.6, //
                0.0, 0.0, 0.0, 1.0,
            );
            let intrinsic = Matrix4::new(
                64.0, 0.0, 32.0, 0.0, //
                0.0, 64.0, 24.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            );
            cameras.push(CameraCalib {
                intrinsic,
                extrinsic,
            });
        }
        let boxes = vec![ObjectBox3D {
            center: Vector3::new(0.4 * t as f64 - 1.0, 8.0 + 0.6 * t as f64, 0.8),
            size: Vector3::new(4.2, 1.9, 1.6),
            yaw: 0.3,
            category_id: 1,
            track_id: 7,
        }];
        let roads = vec![RoadPolyline {
            points: vec![[-6.0, 2.0], [0.0, 10.0], [5.0, 18.0]],
            lane_type: LaneType::Divider,
        }];
        scene_frames.push(SceneFrame {
            cameras,
            boxes,
            roads,
        });
    }
    SceneSequence {
        frames: scene_frames,
        attributes: vec!["daytime".into(), "clear".into()],
    }
}
