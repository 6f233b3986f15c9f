//! The trainable noise-prediction network and its analytic gradients.
//!
//! Architecture: a two-level encoder-decoder over panoramic video
//! activations (T, H, W_pano, C). Each level holds residual blocks of
//! six sub-blocks: conv (+ time/text shift), group norm, intra-view
//! attention, cross-view attention, cross-frame attention, feed-forward.
//! A control branch (trainable copy of the encoder fed by the layout
//! tensor through a small adapter) injects residuals into the decoder
//! through zero-initialized 1x1 projections, so an untrained branch is
//! exactly neutral. All backward passes are written by hand and checked
//! against central finite differences.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    cross_frame_attention, cross_frame_attention_backward, cross_view_attention,
    cross_view_attention_backward, intra_view_attention, intra_view_attention_backward, AttnError,
    TokenGrid, ViewAdjacency,
};
use crate::diffusion::{LatentVideo, NoiseSchedule};
use crate::nn;
use crate::pnc1;
use crate::rng::SeededRng;
use crate::tensor::{ShapeError, Tensor};

pub const GROUPS: usize = 4;

/// Init-time damping for the last weight of every residual branch. Each
/// block chains six residual additions; without damping the activations
/// grow multiplicatively with depth and the initial loss is enormous.
const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Per-frame generation: cross-frame attention sub-blocks are
    /// bypassed entirely.
    Image,
    /// Full video generation.
    Video,
}

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error("video-mode training requires a first-frame latent")]
    MissingFirstFrame,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    /// Attention token width; projections map channels to this width.
    pub attn_width: usize,
    pub heads: usize,
    pub latent_channels: usize,
    /// Width of the concatenated condition block (first-frame latent).
    pub cond_channels: usize,
    pub control_channels: usize,
    pub text_dim: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    /// Desk-scale default: latent 8 x (16 V) x T x 4 with 16 base
    /// channels and two levels.
    pub fn tiny() -> Self {
        DenoiserConfig {
            base_channels: 16,
            levels: 2,
            blocks_per_level: 1,
            attn_width: 16,
            heads: 2,
            latent_channels: 4,
            cond_channels: 4,
            control_channels: 19,
            text_dim: 8,
            time_dim: 16,
        }
    }

    pub fn validate(&self) {
        assert!(self.base_channels > 0 && self.blocks_per_level > 0);
        assert!(self.attn_width > 0 && self.heads > 0);
        assert!(self.latent_channels > 0 && self.cond_channels > 0);
        assert!(self.control_channels > 0 && self.text_dim > 0);
        assert!(self.time_dim >= 2 && self.time_dim % 2 == 0);
        assert!(self.attn_width % self.heads == 0, "heads must divide width");
        assert!(
            self.base_channels % GROUPS == 0,
            "base channels must divide into {GROUPS} norm groups"
        );
        assert!(self.levels == 2, "this architecture is fixed at two levels");
    }

    fn input_channels(&self) -> usize {
        self.latent_channels + self.cond_channels
    }
}

enum Init {
    Normal(f64),
    Zero,
    Const(f64),
    CopyOf(String),
}

struct ParamSpec {
    name: String,
    dims: Vec<usize>,
    init: Init,
}

fn conv_spec(name: &str, cout: usize, cin: usize, k: usize, scale: f64) -> Vec<ParamSpec> {
    vec![
        ParamSpec {
            name: format!("{name}.w"),
            dims: vec![cout, cin, k, k],
            init: Init::Normal(scale / ((cin * k * k) as f64).sqrt()),
        },
        ParamSpec {
            name: format!("{name}.b"),
            dims: vec![cout],
            init: Init::Zero,
        },
    ]
}

fn linear_spec(name: &str, dout: usize, din: usize, bias: bool, scale: f64) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec {
        name: format!("{name}.w"),
        dims: vec![dout, din],
        init: Init::Normal(scale / (din as f64).sqrt()),
    }];
    if bias {
        v.push(ParamSpec {
            name: format!("{name}.b"),
            dims: vec![dout],
            init: Init::Zero,
        });
    }
    v
}

fn attn_spec(prefix: &str, ch: usize, a: usize, out_bias: bool) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for p in ["q", "k", "v"] {
        v.extend(linear_spec(&format!("{prefix}.w{p}"), a, ch, false, 1.0));
        v.push(ParamSpec {
            name: format!("{prefix}.b{p}"),
            dims: vec![a],
            init: Init::Zero,
        });
    }
    // Damped output projection: the attention result enters a residual sum.
    v.extend(linear_spec(
        &format!("{prefix}.wo"),
        ch,
        a,
        false,
        RESIDUAL_INIT_SCALE,
    ));
    if out_bias {
        v.push(ParamSpec {
            name: format!("{prefix}.bo"),
            dims: vec![ch],
            init: Init::Zero,
        });
    }
    v
}

fn block_specs(prefix: &str, ch: usize, cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    let a = cfg.attn_width;
    let mut v = Vec::new();
    v.extend(conv_spec(
        &format!("{prefix}.conv"),
        ch,
        ch,
        3,
        RESIDUAL_INIT_SCALE,
    ));
    v.extend(linear_spec(&format!("{prefix}.emb"), ch, cfg.time_dim, true, 1.0));
    v.push(ParamSpec {
        name: format!("{prefix}.gn.gamma"),
        dims: vec![ch],
        init: Init::Const(RESIDUAL_INIT_SCALE),
    });
    v.push(ParamSpec {
        name: format!("{prefix}.gn.beta"),
        dims: vec![ch],
        init: Init::Zero,
    });
    v.extend(attn_spec(&format!("{prefix}.intra"), ch, a, true));
    v.extend(attn_spec(&format!("{prefix}.xview"), ch, a, true));
    // Cross-frame output projection carries no bias so the sub-block is
    // exactly the identity on single-frame inputs.
    v.extend(attn_spec(&format!("{prefix}.xframe"), ch, a, false));
    v.extend(linear_spec(&format!("{prefix}.ff1"), 2 * ch, ch, true, 1.0));
    v.extend(linear_spec(
        &format!("{prefix}.ff2"),
        ch,
        2 * ch,
        true,
        RESIDUAL_INIT_SCALE,
    ));
    v
}

fn param_specs(cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    let b = cfg.base_channels;
    let b2 = 2 * b;
    let mut v = Vec::new();
    v.extend(conv_spec("stem", b, cfg.input_channels(), 3, 1.0));
    for i in 0..cfg.blocks_per_level {
        v.extend(block_specs(&format!("enc0.blk{i}"), b, cfg));
    }
    v.extend(conv_spec("down0", b2, b, 3, 1.0));
    for i in 0..cfg.blocks_per_level {
        v.extend(block_specs(&format!("enc1.blk{i}"), b2, cfg));
    }
    for i in 0..cfg.blocks_per_level {
        v.extend(block_specs(&format!("dec1.blk{i}"), b2, cfg));
    }
    v.extend(conv_spec("up1", b, b2, 3, 1.0));
    for i in 0..cfg.blocks_per_level {
        v.extend(block_specs(&format!("dec0.blk{i}"), b, cfg));
    }
    v.extend(conv_spec("head", cfg.latent_channels, b, 3, 1.0));
    v.extend(linear_spec("text", cfg.time_dim, cfg.text_dim, true, 1.0));

    // Control branch: adapter + copies of the encoder + zero-initialized
    // output projections.
    v.extend(conv_spec("ctrl.adapter", b, cfg.control_channels, 3, 1.0));
    for name in ["stem.w", "stem.b", "down0.w", "down0.b"] {
        let src = name.to_string();
        let spec = v.iter().find(|s| s.name == src).expect("source exists");
        v.push(ParamSpec {
            name: format!("ctrl.{src}"),
            dims: spec.dims.clone(),
            init: Init::CopyOf(src.clone()),
        });
    }
    for level in ["enc0", "enc1"] {
        for i in 0..cfg.blocks_per_level {
            let ch = if level == "enc0" { b } else { b2 };
            for spec in block_specs(&format!("{level}.blk{i}"), ch, cfg) {
                v.push(ParamSpec {
                    name: format!("ctrl.{}", spec.name),
                    dims: spec.dims,
                    init: Init::CopyOf(spec.name.clone()),
                });
            }
        }
    }
    for (name, ch) in [("ctrl.zero0", b), ("ctrl.zero1", b2)] {
        v.push(ParamSpec {
            name: format!("{name}.w"),
            dims: vec![ch, ch, 1, 1],
            init: Init::Zero,
        });
        v.push(ParamSpec {
            name: format!("{name}.b"),
            dims: vec![ch],
            init: Init::Zero,
        });
    }
    v
}

/// Named parameter set; stage-1 (image) and stage-2 (video) training
/// produce separate instances of this type.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl DenoiserWeights {
    /// Random initialization; control-branch encoder weights copy the
    /// backbone and the zero projections start at exact zero.
    pub fn init(config: &DenoiserConfig, rng: &SeededRng) -> Self {
        config.validate();
        let specs = param_specs(config);
        let mut params = BTreeMap::new();
        for spec in &specs {
            let t = match &spec.init {
                Init::Normal(std) => rng
                    .normal_tensor(&format!("init/{}", spec.name), &spec.dims)
                    .scale(*std),
                Init::Zero => Tensor::zeros(&spec.dims),
                Init::Const(c) => Tensor::full(&spec.dims, *c),
                Init::CopyOf(_) => continue,
            };
            params.insert(spec.name.clone(), t);
        }
        for spec in &specs {
            if let Init::CopyOf(src) = &spec.init {
                let t = params.get(src).expect("copy source initialized").clone();
                params.insert(spec.name.clone(), t);
            }
        }
        DenoiserWeights {
            config: config.clone(),
            params,
        }
    }

    /// All-zero parameters (the network predicts exactly zero).
    pub fn zeros(config: &DenoiserConfig) -> Self {
        config.validate();
        let params = param_specs(config)
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.dims)))
            .collect();
        DenoiserWeights {
            config: config.clone(),
            params,
        }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Zero-valued gradient accumulator with matching names and shapes.
    pub fn zero_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims())))
            .collect()
    }
}

/// w <- w - lr * g for every named parameter.
pub fn sgd_step(
    weights: &mut DenoiserWeights,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<(), DenoiserError> {
    assert!(lr >= 0.0, "learning rate must be non-negative");
    for (name, g) in grads {
        let w = weights
            .params
            .get_mut(name)
            .ok_or_else(|| DenoiserError::UnknownParam(name.clone()))?;
        w.same_shape(g)?;
        w.add_scaled_inplace(g, -lr)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum AttnKind {
    Intra,
    CrossView,
    CrossFrame,
}

fn grid_from_act(h: &Tensor, views: usize) -> TokenGrid {
    let d = h.dims();
    let (t, height, wp, ch) = (d[0], d[1], d[2], d[3]);
    let wv = wp / views;
    let mut g = TokenGrid::zeros(t, views, height * wv, ch);
    let hs = h.data();
    for ti in 0..t {
        for y in 0..height {
            for v in 0..views {
                for x in 0..wv {
                    let src = ((ti * height + y) * wp + v * wv + x) * ch;
                    g.token_mut(ti, v, y * wv + x)
                        .copy_from_slice(&hs[src..src + ch]);
                }
            }
        }
    }
    g
}

fn act_from_grid(g: &TokenGrid, height: usize) -> Tensor {
    let wv = g.s / height;
    let wp = g.v * wv;
    let mut h = Tensor::zeros(&[g.t, height, wp, g.c]);
    let hs = h.data_mut();
    for ti in 0..g.t {
        for y in 0..height {
            for v in 0..g.v {
                for x in 0..wv {
                    let dst = ((ti * height + y) * wp + v * wv + x) * g.c;
                    hs[dst..dst + g.c].copy_from_slice(g.token(ti, v, y * wv + x));
                }
            }
        }
    }
    h
}

fn grid_tensor(g: &TokenGrid) -> Tensor {
    Tensor::from_vec(&[g.n_tokens(), g.c], g.data().to_vec()).unwrap()
}

fn tensor_grid(t: &Tensor, like: &TokenGrid, c: usize) -> TokenGrid {
    TokenGrid::from_vec(like.t, like.v, like.s, c, t.data().to_vec())
}

fn mh_forward(
    kind: AttnKind,
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    heads: usize,
    adj: &ViewAdjacency,
) -> Result<TokenGrid, AttnError> {
    let run = |q: &TokenGrid, k: &TokenGrid, v: &TokenGrid| match kind {
        AttnKind::Intra => intra_view_attention(q, k, v),
        AttnKind::CrossView => cross_view_attention(q, k, v, adj),
        AttnKind::CrossFrame => cross_frame_attention(q, k, v),
    };
    if heads == 1 {
        return run(q, k, v);
    }
    let hw = q.c / heads;
    let mut out = TokenGrid::zeros(q.t, q.v, q.s, q.c);
    for h in 0..heads {
        let o = run(
            &q.slice_channels(h * hw, hw),
            &k.slice_channels(h * hw, hw),
            &v.slice_channels(h * hw, hw),
        )?;
        out.write_channels(h * hw, &o);
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn mh_backward(
    kind: AttnKind,
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    d_out: &TokenGrid,
    heads: usize,
    adj: &ViewAdjacency,
) -> Result<(TokenGrid, TokenGrid, TokenGrid), AttnError> {
    let run = |q: &TokenGrid, k: &TokenGrid, v: &TokenGrid, d: &TokenGrid| match kind {
        AttnKind::Intra => intra_view_attention_backward(q, k, v, d),
        AttnKind::CrossView => cross_view_attention_backward(q, k, v, adj, d),
        AttnKind::CrossFrame => cross_frame_attention_backward(q, k, v, d),
    };
    if heads == 1 {
        return run(q, k, v, d_out);
    }
    let hw = q.c / heads;
    let mut dq = TokenGrid::zeros(q.t, q.v, q.s, q.c);
    let mut dk = dq.clone();
    let mut dv = dq.clone();
    for h in 0..heads {
        let (gq, gk, gv) = run(
            &q.slice_channels(h * hw, hw),
            &k.slice_channels(h * hw, hw),
            &v.slice_channels(h * hw, hw),
            &d_out.slice_channels(h * hw, hw),
        )?;
        dq.write_channels(h * hw, &gq);
        dk.write_channels(h * hw, &gk);
        dv.write_channels(h * hw, &gv);
    }
    Ok((dq, dk, dv))
}

fn attn_projections(
    w: &DenoiserWeights,
    pfx: &str,
    tokens: &Tensor,
    like: &TokenGrid,
) -> (TokenGrid, TokenGrid, TokenGrid) {
    let a = w.config.attn_width;
    let q = nn::linear_forward(tokens, w.get(&format!("{pfx}.wq.w")), w.get(&format!("{pfx}.bq")));
    let k = nn::linear_forward(tokens, w.get(&format!("{pfx}.wk.w")), w.get(&format!("{pfx}.bk")));
    let v = nn::linear_forward(tokens, w.get(&format!("{pfx}.wv.w")), w.get(&format!("{pfx}.bv")));
    (
        tensor_grid(&q, like, a),
        tensor_grid(&k, like, a),
        tensor_grid(&v, like, a),
    )
}

/// One residual attention sub-block: h + proj_out(attention(...)).
/// Cross-frame uses h + proj_out(attention(...) - value_tokens), which
/// vanishes exactly on single-frame inputs.
fn attn_subblock_forward(
    w: &DenoiserWeights,
    pfx: &str,
    kind: AttnKind,
    h: &Tensor,
    views: usize,
) -> Result<Tensor, DenoiserError> {
    let heads = w.config.heads;
    let adj = ViewAdjacency::cyclic(views);
    let grid = grid_from_act(h, views);
    let tokens = grid_tensor(&grid);
    let (q, k, v) = attn_projections(w, pfx, &tokens, &grid);
    let attn = mh_forward(kind, &q, &k, &v, heads, &adj)?;
    let pre = if kind == AttnKind::CrossFrame {
        let mut p = attn.clone();
        for (a, b) in p.data_mut().iter_mut().zip(v.data()) {
            *a -= b;
        }
        p
    } else {
        attn
    };
    let pre_t = grid_tensor(&pre);
    let wo = w.get(&format!("{pfx}.wo.w"));
    let out = if kind == AttnKind::CrossFrame {
        nn::linear_forward(&pre_t, wo, &Tensor::zeros(&[wo.dims()[0]]))
    } else {
        nn::linear_forward(&pre_t, wo, w.get(&format!("{pfx}.bo")))
    };
    let d = h.dims();
    let inc = act_from_grid(&tensor_grid(&out, &grid, d[3]), d[1]);
    Ok(h.add_scaled(&inc, 1.0)?)
}

fn attn_subblock_backward(
    w: &DenoiserWeights,
    pfx: &str,
    kind: AttnKind,
    h: &Tensor,
    views: usize,
    d_next: &Tensor,
    grads: &mut BTreeMap<String, Tensor>,
) -> Result<Tensor, DenoiserError> {
    let heads = w.config.heads;
    let a = w.config.attn_width;
    let adj = ViewAdjacency::cyclic(views);
    let d = h.dims();
    let grid = grid_from_act(h, views);
    let tokens = grid_tensor(&grid);
    let (q, k, v) = attn_projections(w, pfx, &tokens, &grid);
    let attn = mh_forward(kind, &q, &k, &v, heads, &adj)?;
    let pre = if kind == AttnKind::CrossFrame {
        let mut p = attn.clone();
        for (x, y) in p.data_mut().iter_mut().zip(v.data()) {
            *x -= y;
        }
        p
    } else {
        attn
    };

    // d_next flows both through the residual and the projection path.
    let d_out_grid = grid_from_act(d_next, views);
    let d_out_t = grid_tensor(&d_out_grid);
    let wo = w.get(&format!("{pfx}.wo.w"));
    let (d_pre_t, dwo, dbo) = nn::linear_backward(&grid_tensor(&pre), wo, &d_out_t);
    add_grad(grads, &format!("{pfx}.wo.w"), &dwo);
    if kind != AttnKind::CrossFrame {
        add_grad(grads, &format!("{pfx}.bo"), &dbo);
    }
    let d_pre = tensor_grid(&d_pre_t, &grid, a);
    let (dq, dk, mut dv) = mh_backward(kind, &q, &k, &v, &d_pre, heads, &adj)?;
    if kind == AttnKind::CrossFrame {
        // pre = attn - v: the subtraction feeds v a direct -d_pre term.
        for (x, y) in dv.data_mut().iter_mut().zip(d_pre.data()) {
            *x -= y;
        }
    }
    let mut d_tokens = Tensor::zeros(tokens.dims());
    for (p, dg) in [("q", dq), ("k", dk), ("v", dv)] {
        let (d_tok, dw, db) = nn::linear_backward(
            &tokens,
            w.get(&format!("{pfx}.w{p}.w")),
            &grid_tensor(&dg),
        );
        add_grad(grads, &format!("{pfx}.w{p}.w"), &dw);
        add_grad(grads, &format!("{pfx}.b{p}"), &db);
        d_tokens.add_scaled_inplace(&d_tok, 1.0)?;
    }
    let d_h_attn = act_from_grid(&tensor_grid(&d_tokens, &grid, d[3]), d[1]);
    Ok(d_next.add_scaled(&d_h_attn, 1.0)?)
}

fn add_grad(grads: &mut BTreeMap<String, Tensor>, name: &str, g: &Tensor) {
    grads
        .get_mut(name)
        .unwrap_or_else(|| panic!("missing gradient slot {name}"))
        .add_scaled_inplace(g, 1.0)
        .expect("gradient shape");
}

/// Per-block cache of each residual sub-block's input.
struct BlockCache {
    h_in: Tensor,
    h_conv: Tensor,
    h_gn: Tensor,
    h_intra: Tensor,
    h_xview: Tensor,
    h_xframe: Tensor,
}

struct TapSink<'a>(Option<&'a mut Vec<(String, Tensor)>>);

impl TapSink<'_> {
    fn record(&mut self, name: &str, t: &Tensor) {
        if let Some(taps) = self.0.as_deref_mut() {
            taps.push((name.to_string(), t.clone()));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn block_forward(
    w: &DenoiserWeights,
    prefix: &str,
    h: Tensor,
    views: usize,
    emb: &Tensor,
    mode: Mode,
    taps: &mut TapSink,
    want_cache: bool,
) -> Result<(Tensor, Option<BlockCache>), DenoiserError> {
    let ch = *h.dims().last().unwrap();
    let h_in = h;

    // 1. Convolution with a broadcast time/text shift.
    let conv = nn::conv2d_forward(
        &h_in,
        views,
        w.get(&format!("{prefix}.conv.w")),
        w.get(&format!("{prefix}.conv.b")),
        1,
    );
    let shift = nn::linear_forward(
        emb,
        w.get(&format!("{prefix}.emb.w")),
        w.get(&format!("{prefix}.emb.b")),
    );
    let mut h_conv = h_in.add_scaled(&conv, 1.0)?;
    broadcast_add(&mut h_conv, shift.data());
    taps.record(&format!("{prefix}.conv"), &h_conv);

    // 2. Group normalization.
    let gn = nn::group_norm_forward(
        &h_conv,
        views,
        GROUPS.min(ch),
        w.get(&format!("{prefix}.gn.gamma")),
        w.get(&format!("{prefix}.gn.beta")),
    );
    let h_gn = h_conv.add_scaled(&gn, 1.0)?;
    taps.record(&format!("{prefix}.gn"), &h_gn);

    // 3. Intra-view attention.
    let h_intra = attn_subblock_forward(w, &format!("{prefix}.intra"), AttnKind::Intra, &h_gn, views)?;
    taps.record(&format!("{prefix}.intra"), &h_intra);

    // 4. Cross-view attention; a single view bypasses it entirely.
    let h_xview = if views > 1 {
        attn_subblock_forward(w, &format!("{prefix}.xview"), AttnKind::CrossView, &h_intra, views)?
    } else {
        h_intra.clone()
    };
    taps.record(&format!("{prefix}.xview"), &h_xview);

    // 5. Cross-frame attention; image mode bypasses it.
    let h_xframe = if mode == Mode::Video {
        attn_subblock_forward(
            w,
            &format!("{prefix}.xframe"),
            AttnKind::CrossFrame,
            &h_xview,
            views,
        )?
    } else {
        h_xview.clone()
    };
    taps.record(&format!("{prefix}.xframe"), &h_xframe);

    // 6. Feed-forward.
    let z = nn::linear_forward(
        &h_xframe,
        w.get(&format!("{prefix}.ff1.w")),
        w.get(&format!("{prefix}.ff1.b")),
    );
    let act = nn::silu_forward(&z);
    let ff = nn::linear_forward(
        &act,
        w.get(&format!("{prefix}.ff2.w")),
        w.get(&format!("{prefix}.ff2.b")),
    );
    let out = h_xframe.add_scaled(&ff, 1.0)?;
    taps.record(&format!("{prefix}.ff"), &out);

    let cache = want_cache.then(|| BlockCache {
        h_in,
        h_conv,
        h_gn,
        h_intra,
        h_xview,
        h_xframe,
    });
    Ok((out, cache))
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    w: &DenoiserWeights,
    prefix: &str,
    cache: &BlockCache,
    views: usize,
    emb: &Tensor,
    mode: Mode,
    d_out: &Tensor,
    grads: &mut BTreeMap<String, Tensor>,
    d_emb: &mut Tensor,
) -> Result<Tensor, DenoiserError> {
    let ch = *cache.h_in.dims().last().unwrap();

    // 6. Feed-forward backward.
    let z = nn::linear_forward(
        &cache.h_xframe,
        w.get(&format!("{prefix}.ff1.w")),
        w.get(&format!("{prefix}.ff1.b")),
    );
    let act = nn::silu_forward(&z);
    let (d_act, dw2, db2) = nn::linear_backward(&act, w.get(&format!("{prefix}.ff2.w")), d_out);
    add_grad(grads, &format!("{prefix}.ff2.w"), &dw2);
    add_grad(grads, &format!("{prefix}.ff2.b"), &db2);
    let d_z = nn::silu_backward(&z, &d_act);
    let (d_ff_in, dw1, db1) = nn::linear_backward(
        &cache.h_xframe,
        w.get(&format!("{prefix}.ff1.w")),
        &d_z,
    );
    add_grad(grads, &format!("{prefix}.ff1.w"), &dw1);
    add_grad(grads, &format!("{prefix}.ff1.b"), &db1);
    let d_xframe = d_out.add_scaled(&d_ff_in, 1.0)?;

    // 5. Cross-frame backward (image mode passed through).
    let d_xview = if mode == Mode::Video {
        attn_subblock_backward(
            w,
            &format!("{prefix}.xframe"),
            AttnKind::CrossFrame,
            &cache.h_xview,
            views,
            &d_xframe,
            grads,
        )?
    } else {
        d_xframe
    };

    // 4. Cross-view backward.
    let d_intra = if views > 1 {
        attn_subblock_backward(
            w,
            &format!("{prefix}.xview"),
            AttnKind::CrossView,
            &cache.h_intra,
            views,
            &d_xview,
            grads,
        )?
    } else {
        d_xview
    };

    // 3. Intra-view backward.
    let d_gn_out = attn_subblock_backward(
        w,
        &format!("{prefix}.intra"),
        AttnKind::Intra,
        &cache.h_gn,
        views,
        &d_intra,
        grads,
    )?;

    // 2. Group norm backward.
    let (d_gn_in, dgamma, dbeta) = nn::group_norm_backward(
        &cache.h_conv,
        views,
        GROUPS.min(ch),
        w.get(&format!("{prefix}.gn.gamma")),
        &d_gn_out,
    );
    add_grad(grads, &format!("{prefix}.gn.gamma"), &dgamma);
    add_grad(grads, &format!("{prefix}.gn.beta"), &dbeta);
    let d_conv_out = d_gn_out.add_scaled(&d_gn_in, 1.0)?;

    // 1. Conv + shift backward.
    let (d_conv_in, dcw, dcb) = nn::conv2d_backward(
        &cache.h_in,
        views,
        w.get(&format!("{prefix}.conv.w")),
        1,
        &d_conv_out,
    );
    add_grad(grads, &format!("{prefix}.conv.w"), &dcw);
    add_grad(grads, &format!("{prefix}.conv.b"), &dcb);
    // The broadcast shift gathers gradient over all positions.
    let mut d_shift = Tensor::zeros(&[ch]);
    for (i, g) in d_conv_out.data().iter().enumerate() {
        d_shift.data_mut()[i % ch] += g;
    }
    let (d_emb_local, dew, deb) = nn::linear_backward(
        emb,
        w.get(&format!("{prefix}.emb.w")),
        &d_shift,
    );
    add_grad(grads, &format!("{prefix}.emb.w"), &dew);
    add_grad(grads, &format!("{prefix}.emb.b"), &deb);
    d_emb.add_scaled_inplace(&d_emb_local, 1.0)?;
    Ok(d_conv_out.add_scaled(&d_conv_in, 1.0)?)
}

fn broadcast_add(h: &mut Tensor, shift: &[f64]) {
    let ch = shift.len();
    for (i, v) in h.data_mut().iter_mut().enumerate() {
        *v += shift[i % ch];
    }
}

struct ForwardCache {
    emb: Tensor,
    g_in: Tensor,
    enc0: Vec<BlockCache>,
    e0: Tensor,
    enc1: Vec<BlockCache>,
    ctrl: Option<CtrlCache>,
    dec1: Vec<BlockCache>,
    m2_up: Tensor,
    dec0: Vec<BlockCache>,
    s_out: Tensor,
}

struct CtrlCache {
    pooled: Tensor,
    enc0: Vec<BlockCache>,
    c0: Tensor,
    enc1: Vec<BlockCache>,
    c1: Tensor,
}

#[allow(clippy::too_many_arguments)]
fn forward(
    w: &DenoiserWeights,
    x_in: &Tensor,
    views: usize,
    t: usize,
    text: &Tensor,
    control: Option<&Tensor>,
    mode: Mode,
    want_cache: bool,
    taps: Option<&mut Vec<(String, Tensor)>>,
) -> Result<(Tensor, Option<ForwardCache>), DenoiserError> {
    let cfg = &w.config;
    let d = x_in.dims().to_vec();
    if d.len() != 4 || d[3] != cfg.input_channels() {
        return Err(ShapeError::Mismatch {
            expected: vec![0, 0, 0, cfg.input_channels()],
            got: d,
        }
        .into());
    }
    let (frames, height, wp) = (d[0], d[1], d[2]);
    assert!(wp % views == 0, "panoramic width must divide by views");
    let wv = wp / views;
    assert!(
        height % 2 == 0 && wv % 2 == 0,
        "latent dims must be even for the downsampling level"
    );
    if text.dims() != [cfg.text_dim] {
        return Err(ShapeError::Mismatch {
            expected: vec![cfg.text_dim],
            got: text.dims().to_vec(),
        }
        .into());
    }
    let mut taps = TapSink(taps);

    // Shared conditioning vector: sinusoidal step embedding + projected
    // text attributes.
    let emb = nn::time_embedding(t, cfg.time_dim).add_scaled(
        &nn::linear_forward(text, w.get("text.w"), w.get("text.b")),
        1.0,
    )?;

    let g_in = x_in.clone();
    let g = nn::conv2d_forward(&g_in, views, w.get("stem.w"), w.get("stem.b"), 1);
    taps.record("stem", &g);

    // Control branch first so its residuals are ready for the decoder.
    let mut r0: Option<Tensor> = None;
    let mut r1: Option<Tensor> = None;
    let mut ctrl_cache: Option<CtrlCache> = None;
    if let Some(ctrl) = control {
        let cd = ctrl.dims();
        if cd.len() != 4 || cd[3] != cfg.control_channels || cd[0] != frames {
            return Err(ShapeError::Mismatch {
                expected: vec![frames, 0, 0, cfg.control_channels],
                got: cd.to_vec(),
            }
            .into());
        }
        assert!(
            cd[1] % height == 0 && cd[2] == (cd[1] / height) * wp,
            "control resolution must be an integer multiple of the latent"
        );
        let factor = cd[1] / height;
        let pooled = nn::avg_pool2d(ctrl, views, factor);
        let hint = nn::conv2d_forward(
            &pooled,
            views,
            w.get("ctrl.adapter.w"),
            w.get("ctrl.adapter.b"),
            1,
        );
        let stem_out = nn::conv2d_forward(&g_in, views, w.get("ctrl.stem.w"), w.get("ctrl.stem.b"), 1);
        let mut c = stem_out.add_scaled(&hint, 1.0)?;
        let mut enc0_caches = Vec::new();
        for i in 0..cfg.blocks_per_level {
            let (next, cache) = block_forward(
                w,
                &format!("ctrl.enc0.blk{i}"),
                c,
                views,
                &emb,
                mode,
                &mut taps,
                want_cache,
            )?;
            c = next;
            if let Some(cache) = cache {
                enc0_caches.push(cache);
            }
        }
        let c0 = c;
        let cd_act = nn::conv2d_forward(&c0, views, w.get("ctrl.down0.w"), w.get("ctrl.down0.b"), 2);
        let mut c = cd_act;
        let mut enc1_caches = Vec::new();
        for i in 0..cfg.blocks_per_level {
            let (next, cache) = block_forward(
                w,
                &format!("ctrl.enc1.blk{i}"),
                c,
                views,
                &emb,
                mode,
                &mut taps,
                want_cache,
            )?;
            c = next;
            if let Some(cache) = cache {
                enc1_caches.push(cache);
            }
        }
        let c1 = c;
        r0 = Some(nn::conv2d_forward(&c0, views, w.get("ctrl.zero0.w"), w.get("ctrl.zero0.b"), 1));
        r1 = Some(nn::conv2d_forward(&c1, views, w.get("ctrl.zero1.w"), w.get("ctrl.zero1.b"), 1));
        if want_cache {
            ctrl_cache = Some(CtrlCache {
                pooled,
                enc0: enc0_caches,
                c0,
                enc1: enc1_caches,
                c1,
            });
        }
    }

    // Encoder.
    let mut h = g;
    let mut enc0_caches = Vec::new();
    for i in 0..cfg.blocks_per_level {
        let (next, cache) = block_forward(
            w,
            &format!("enc0.blk{i}"),
            h,
            views,
            &emb,
            mode,
            &mut taps,
            want_cache,
        )?;
        h = next;
        if let Some(cache) = cache {
            enc0_caches.push(cache);
        }
    }
    let e0 = h;
    taps.record("e0", &e0);
    let down = nn::conv2d_forward(&e0, views, w.get("down0.w"), w.get("down0.b"), 2);
    let mut h = down;
    let mut enc1_caches = Vec::new();
    for i in 0..cfg.blocks_per_level {
        let (next, cache) = block_forward(
            w,
            &format!("enc1.blk{i}"),
            h,
            views,
            &emb,
            mode,
            &mut taps,
            want_cache,
        )?;
        h = next;
        if let Some(cache) = cache {
            enc1_caches.push(cache);
        }
    }
    let e1 = h;

    // Bottleneck merge with the control residual.
    let m = match &r1 {
        Some(r) => e1.add_scaled(r, 1.0)?,
        None => e1,
    };
    taps.record("m", &m);

    // Decoder level 1.
    let mut h = m;
    let mut dec1_caches = Vec::new();
    for i in 0..cfg.blocks_per_level {
        let (next, cache) = block_forward(
            w,
            &format!("dec1.blk{i}"),
            h,
            views,
            &emb,
            mode,
            &mut taps,
            want_cache,
        )?;
        h = next;
        if let Some(cache) = cache {
            dec1_caches.push(cache);
        }
    }
    let m2 = h;
    let m2_up = nn::upsample_nearest2(&m2);
    let u = nn::conv2d_forward(&m2_up, views, w.get("up1.w"), w.get("up1.b"), 1);

    // Skip connection plus the level-0 control residual.
    let mut s0 = u.add_scaled(&e0, 1.0)?;
    if let Some(r) = &r0 {
        s0.add_scaled_inplace(r, 1.0)?;
    }
    taps.record("s0", &s0);

    let mut h = s0;
    let mut dec0_caches = Vec::new();
    for i in 0..cfg.blocks_per_level {
        let (next, cache) = block_forward(
            w,
            &format!("dec0.blk{i}"),
            h,
            views,
            &emb,
            mode,
            &mut taps,
            want_cache,
        )?;
        h = next;
        if let Some(cache) = cache {
            dec0_caches.push(cache);
        }
    }
    let s_out = h;
    let out = nn::conv2d_forward(&s_out, views, w.get("head.w"), w.get("head.b"), 1);

    let cache = want_cache.then(|| ForwardCache {
        emb,
        g_in,
        enc0: enc0_caches,
        e0,
        enc1: enc1_caches,
        ctrl: ctrl_cache,
        dec1: dec1_caches,
        m2_up,
        dec0: dec0_caches,
        s_out,
    });
    Ok((out, cache))
}

/// Noise estimate for a (possibly condition-concatenated) latent video.
/// x_in: (T, H, W_pano, latent+cond channels); control: layout activation
/// (T, Hc, Wc_pano, 19) at an integer multiple of the latent resolution.
pub fn predict_noise(
    w: &DenoiserWeights,
    x_in: &Tensor,
    views: usize,
    t: usize,
    text: &Tensor,
    control: Option<&Tensor>,
    mode: Mode,
) -> Result<Tensor, DenoiserError> {
    Ok(forward(w, x_in, views, t, text, control, mode, false, None)?.0)
}

/// As [`predict_noise`], also recording named intermediate activations.
#[allow(clippy::too_many_arguments)]
pub fn predict_noise_with_taps(
    w: &DenoiserWeights,
    x_in: &Tensor,
    views: usize,
    t: usize,
    text: &Tensor,
    control: Option<&Tensor>,
    mode: Mode,
    taps: &mut Vec<(String, Tensor)>,
) -> Result<Tensor, DenoiserError> {
    Ok(forward(w, x_in, views, t, text, control, mode, false, Some(taps))?.0)
}

// ---------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------

/// One training example: clean latents plus conditioning.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x: LatentVideo,
    /// Layout conditioning in activation form (T, Hc, Wc_pano, 19).
    pub control: Option<Tensor>,
    pub text: Tensor,
    /// Clean first-frame latent slab (H, W_pano, C); required in video
    /// mode for both the concat condition and the noise prior.
    pub z1: Option<Tensor>,
}

/// The (t, network input, regression target) tuple a training step uses.
pub struct TrainingSample {
    pub t: usize,
    pub x_in: Tensor,
    /// Mixed noise: pure Gaussian at frame 1, plus lambda times the
    /// first-frame latent on later frames (video mode).
    pub target: LatentVideo,
}

/// Concatenates condition channels onto a noised latent: the first-frame
/// latent at frame 1, zero padding at frames 2..T.
pub fn build_input(x_t: &LatentVideo, z1: Option<&Tensor>, cond_channels: usize) -> Tensor {
    let s = x_t.shape();
    let cx = s.channels + cond_channels;
    let mut out = Tensor::zeros(&[s.frames, s.height, s.pano_width, cx]);
    let os = out.data_mut();
    let xs = x_t.data.data();
    let positions = s.height * s.pano_width;
    for t in 0..s.frames {
        for p in 0..positions {
            let src = (t * positions + p) * s.channels;
            let dst = (t * positions + p) * cx;
            os[dst..dst + s.channels].copy_from_slice(&xs[src..src + s.channels]);
            if t == 0 {
                if let Some(z) = z1 {
                    let zs = z.data();
                    for c in 0..cond_channels.min(s.channels) {
                        os[dst + s.channels + c] = zs[p * s.channels + c];
                    }
                }
            }
        }
    }
    out
}

/// Draws (t, noise), applies the first-frame noise prior, diffuses the
/// clean latents, and assembles the network input.
pub fn sample_training_tuple(
    batch: &TrainBatch,
    sched: &NoiseSchedule,
    lambda: f64,
    rng: &SeededRng,
    mode: Mode,
) -> Result<TrainingSample, DenoiserError> {
    let t = rng.uniform_usize("loss/t", sched.steps());
    let mut target = LatentVideo::seeded_noise(batch.x.shape(), rng, "loss/eps");
    let z1 = match mode {
        Mode::Video => Some(batch.z1.as_ref().ok_or(DenoiserError::MissingFirstFrame)?),
        Mode::Image => None,
    };
    if let Some(z1) = z1 {
        let want = [
            batch.x.shape().height,
            batch.x.shape().pano_width,
            batch.x.shape().channels,
        ];
        if z1.dims() != want {
            return Err(ShapeError::Mismatch {
                expected: want.to_vec(),
                got: z1.dims().to_vec(),
            }
            .into());
        }
        for fi in 1..batch.x.shape().frames {
            let frame = target.frame_mut(fi);
            for (o, z) in frame.iter_mut().zip(z1.data()) {
                *o += lambda * z;
            }
        }
    }
    let x_t = crate::diffusion::forward_diffuse(&batch.x, t, sched, &target)
        .expect("clean latents and noise share a shape by construction");
    let x_in = build_input(&x_t, z1, batch.x.shape().channels);
    Ok(TrainingSample { t, x_in, target })
}

pub fn mean_squared_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Mean-squared error between the predicted and mixed target noise.
pub fn training_loss(
    w: &DenoiserWeights,
    batch: &TrainBatch,
    sched: &NoiseSchedule,
    lambda: f64,
    rng: &SeededRng,
    mode: Mode,
) -> Result<f64, DenoiserError> {
    let sample = sample_training_tuple(batch, sched, lambda, rng, mode)?;
    let views = batch.x.shape().views;
    let pred = predict_noise(
        w,
        &sample.x_in,
        views,
        sample.t,
        &batch.text,
        batch.control.as_ref(),
        mode,
    )?;
    Ok(mean_squared_error(&pred, &sample.target.data))
}

/// Analytic gradients of [`training_loss`] with the same rng draws.
pub fn loss_gradient(
    w: &DenoiserWeights,
    batch: &TrainBatch,
    sched: &NoiseSchedule,
    lambda: f64,
    rng: &SeededRng,
    mode: Mode,
) -> Result<(f64, BTreeMap<String, Tensor>), DenoiserError> {
    let sample = sample_training_tuple(batch, sched, lambda, rng, mode)?;
    let views = batch.x.shape().views;
    loss_and_gradient_for(
        w,
        &sample.x_in,
        &sample.target.data,
        views,
        sample.t,
        &batch.text,
        batch.control.as_ref(),
        mode,
    )
}

/// Loss and gradients for an explicit (input, target) pair.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradient_for(
    w: &DenoiserWeights,
    x_in: &Tensor,
    target: &Tensor,
    views: usize,
    t: usize,
    text: &Tensor,
    control: Option<&Tensor>,
    mode: Mode,
) -> Result<(f64, BTreeMap<String, Tensor>), DenoiserError> {
    let (pred, cache) = forward(w, x_in, views, t, text, control, mode, true, None)?;
    let cache = cache.expect("cache requested");
    let loss = mean_squared_error(&pred, target);

    let n = pred.len() as f64;
    let mut d_pred = pred.clone();
    d_pred.add_scaled_inplace(target, -1.0)?;
    d_pred.scale_inplace(2.0 / n);

    let mut grads = w.zero_grads();
    let cfg = &w.config;
    let mut d_emb = Tensor::zeros(&[cfg.time_dim]);

    // Head.
    let (d_s, dhw, dhb) = nn::conv2d_backward(&cache.s_out, views, w.get("head.w"), 1, &d_pred);
    add_grad(&mut grads, "head.w", &dhw);
    add_grad(&mut grads, "head.b", &dhb);

    // Decoder level 0.
    let mut d = d_s;
    for i in (0..cfg.blocks_per_level).rev() {
        d = block_backward(
            w,
            &format!("dec0.blk{i}"),
            &cache.dec0[i],
            views,
            &cache.emb,
            mode,
            &d,
            &mut grads,
            &mut d_emb,
        )?;
    }
    let d_s0 = d;
    // s0 = u + e0 (+ r0): gradient fans out to all three.
    let d_u = d_s0.clone();
    let mut d_e0_total = d_s0.clone();
    let d_r0 = cache.ctrl.as_ref().map(|_| d_s0);

    // Up conv and upsampling.
    let (d_m2up, duw, dub) = nn::conv2d_backward(&cache.m2_up, views, w.get("up1.w"), 1, &d_u);
    add_grad(&mut grads, "up1.w", &duw);
    add_grad(&mut grads, "up1.b", &dub);
    let d_m2 = nn::upsample_nearest2_backward(&d_m2up);

    // Decoder level 1.
    let mut d = d_m2;
    for i in (0..cfg.blocks_per_level).rev() {
        d = block_backward(
            w,
            &format!("dec1.blk{i}"),
            &cache.dec1[i],
            views,
            &cache.emb,
            mode,
            &d,
            &mut grads,
            &mut d_emb,
        )?;
    }
    let d_m = d;
    let d_e1 = d_m.clone();
    let d_r1 = cache.ctrl.as_ref().map(|_| d_m);

    // Encoder level 1.
    let mut d = d_e1;
    for i in (0..cfg.blocks_per_level).rev() {
        d = block_backward(
            w,
            &format!("enc1.blk{i}"),
            &cache.enc1[i],
            views,
            &cache.emb,
            mode,
            &d,
            &mut grads,
            &mut d_emb,
        )?;
    }
    let (d_e0_down, ddw, ddb) = nn::conv2d_backward(&cache.e0, views, w.get("down0.w"), 2, &d);
    add_grad(&mut grads, "down0.w", &ddw);
    add_grad(&mut grads, "down0.b", &ddb);
    d_e0_total.add_scaled_inplace(&d_e0_down, 1.0)?;

    // Encoder level 0 and stem.
    let mut d = d_e0_total;
    for i in (0..cfg.blocks_per_level).rev() {
        d = block_backward(
            w,
            &format!("enc0.blk{i}"),
            &cache.enc0[i],
            views,
            &cache.emb,
            mode,
            &d,
            &mut grads,
            &mut d_emb,
        )?;
    }
    let (_dxin, dsw, dsb) = nn::conv2d_backward(&cache.g_in, views, w.get("stem.w"), 1, &d);
    add_grad(&mut grads, "stem.w", &dsw);
    add_grad(&mut grads, "stem.b", &dsb);

    // Control branch.
    if let (Some(ctrl), Some(d_r0), Some(d_r1)) = (&cache.ctrl, d_r0, d_r1) {
        let (d_c1, dz1w, dz1b) =
            nn::conv2d_backward(&ctrl.c1, views, w.get("ctrl.zero1.w"), 1, &d_r1);
        add_grad(&mut grads, "ctrl.zero1.w", &dz1w);
        add_grad(&mut grads, "ctrl.zero1.b", &dz1b);
        let mut d = d_c1;
        for i in (0..cfg.blocks_per_level).rev() {
            d = block_backward(
                w,
                &format!("ctrl.enc1.blk{i}"),
                &ctrl.enc1[i],
                views,
                &cache.emb,
                mode,
                &d,
                &mut grads,
                &mut d_emb,
            )?;
        }
        let (d_c0_down, dcdw, dcdb) =
            nn::conv2d_backward(&ctrl.c0, views, w.get("ctrl.down0.w"), 2, &d);
        add_grad(&mut grads, "ctrl.down0.w", &dcdw);
        add_grad(&mut grads, "ctrl.down0.b", &dcdb);
        let (d_c0_zero, dz0w, dz0b) =
            nn::conv2d_backward(&ctrl.c0, views, w.get("ctrl.zero0.w"), 1, &d_r0);
        add_grad(&mut grads, "ctrl.zero0.w", &dz0w);
        add_grad(&mut grads, "ctrl.zero0.b", &dz0b);
        let mut d = d_c0_down.add_scaled(&d_c0_zero, 1.0)?;
        for i in (0..cfg.blocks_per_level).rev() {
            d = block_backward(
                w,
                &format!("ctrl.enc0.blk{i}"),
                &ctrl.enc0[i],
                views,
                &cache.emb,
                mode,
                &d,
                &mut grads,
                &mut d_emb,
            )?;
        }
        // c0_in = ctrl stem + hint: both convs take gradients.
        let (_dxin2, dcsw, dcsb) =
            nn::conv2d_backward(&cache.g_in, views, w.get("ctrl.stem.w"), 1, &d);
        add_grad(&mut grads, "ctrl.stem.w", &dcsw);
        add_grad(&mut grads, "ctrl.stem.b", &dcsb);
        let (_dpool, daw, dab) =
            nn::conv2d_backward(&ctrl.pooled, views, w.get("ctrl.adapter.w"), 1, &d);
        add_grad(&mut grads, "ctrl.adapter.w", &daw);
        add_grad(&mut grads, "ctrl.adapter.b", &dab);
    }

    // Text conditioning path (the time half has no parameters).
    let (_dtext, dtw, dtb) = nn::linear_backward(text, w.get("text.w"), &d_emb);
    add_grad(&mut grads, "text.w", &dtw);
    add_grad(&mut grads, "text.b", &dtb);

    Ok((loss, grads))
}

// ---------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pnc1(#[from] pnc1::Pnc1Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest tensor {name}: {reason}")]
    BadTensor { name: String, reason: String },
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    dims: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DenoiserConfig,
    tensors: Vec<ManifestTensor>,
}

/// Writes manifest.json plus one PNC1 blob per parameter.
pub fn save_checkpoint(dir: &Path, w: &DenoiserWeights) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in &w.params {
        let file = format!("{name}.pnc1");
        pnc1::write_tensor(&dir.join(&file), t)?;
        tensors.push(ManifestTensor {
            name: name.clone(),
            dims: t.dims().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        config: w.config.clone(),
        tensors,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]. Values pass
/// through the f32 blob format, so they are f32-rounded.
pub fn load_checkpoint(dir: &Path) -> Result<DenoiserWeights, CheckpointError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.config.validate();
    let mut params = BTreeMap::new();
    for mt in &manifest.tensors {
        let t = pnc1::read_tensor(&dir.join(&mt.file))?;
        if t.dims() != mt.dims.as_slice() {
            return Err(CheckpointError::BadTensor {
                name: mt.name.clone(),
                reason: format!("dims {:?} do not match manifest {:?}", t.dims(), mt.dims),
            });
        }
        params.insert(mt.name.clone(), t);
    }
    // Every declared parameter must be present with the right shape.
    let expected = param_specs(&manifest.config);
    for spec in &expected {
        match params.get(&spec.name) {
            None => {
                return Err(CheckpointError::BadTensor {
                    name: spec.name.clone(),
                    reason: "missing from checkpoint".into(),
                })
            }
            Some(t) if t.dims() != spec.dims.as_slice() => {
                return Err(CheckpointError::BadTensor {
                    name: spec.name.clone(),
                    reason: format!("dims {:?}, expected {:?}", t.dims(), spec.dims),
                })
            }
            _ => {}
        }
    }
    Ok(DenoiserWeights {
        config: manifest.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::LatentShape;

    fn test_config() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            levels: 2,
            blocks_per_level: 1,
            attn_width: 8,
            heads: 2,
            latent_channels: 2,
            cond_channels: 2,
            control_channels: 19,
            text_dim: 4,
            time_dim: 8,
        }
    }

    fn test_shape() -> LatentShape {
        LatentShape {
            views: 2,
            frames: 2,
            height: 4,
            pano_width: 8,
            channels: 2,
        }
    }

    fn test_batch(rng: &SeededRng, with_control: bool) -> TrainBatch {
        let shape = test_shape();
        let x = LatentVideo::seeded_noise(shape, rng, "batch/x");
        let z1 = x.frame_tensor(0);
        let control = with_control
            .then(|| rng.normal_tensor("batch/ctrl", &[shape.frames, 8, 16, 19]).map(f64::abs));
        TrainBatch {
            x,
            control,
            text: rng.normal_tensor("batch/text", &[4]),
            z1: Some(z1),
        }
    }

    #[test]
    fn init_has_copies_and_zero_projections() {
        let cfg = test_config();
        let w = DenoiserWeights::init(&cfg, &SeededRng::new(1));
        assert_eq!(w.get("ctrl.stem.w").data(), w.get("stem.w").data());
        assert_eq!(
            w.get("ctrl.enc0.blk0.conv.w").data(),
            w.get("enc0.blk0.conv.w").data()
        );
        assert_eq!(w.get("ctrl.zero0.w").max_abs(), 0.0);
        assert_eq!(w.get("ctrl.zero1.w").max_abs(), 0.0);
        assert_eq!(w.get("ctrl.zero0.b").max_abs(), 0.0);
    }

    #[test]
    fn untrained_control_branch_is_exactly_neutral() {
        let cfg = test_config();
        let w = DenoiserWeights::init(&cfg, &SeededRng::new(2));
        let rng = SeededRng::new(3);
        let batch = test_batch(&rng, true);
        let sample = sample_training_tuple(
            &batch,
            &NoiseSchedule::cosine(100),
            0.05,
            &rng,
            Mode::Video,
        )
        .unwrap();
        let with = predict_noise(
            &w,
            &sample.x_in,
            2,
            sample.t,
            &batch.text,
            batch.control.as_ref(),
            Mode::Video,
        )
        .unwrap();
        let without = predict_noise(&w, &sample.x_in, 2, sample.t, &batch.text, None, Mode::Video)
            .unwrap();
        let bits = |t: &Tensor| -> Vec<u64> { t.data().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&with), bits(&without));
    }

    #[test]
    fn video_mode_single_frame_equals_image_mode() {
        let cfg = test_config();
        let w = DenoiserWeights::init(&cfg, &SeededRng::new(4));
        let rng = SeededRng::new(5);
        let shape = LatentShape {
            frames: 1,
            ..test_shape()
        };
        let x = LatentVideo::seeded_noise(shape, &rng, "x");
        let x_in = build_input(&x, None, cfg.cond_channels);
        let text = rng.normal_tensor("text", &[4]);
        let video = predict_noise(&w, &x_in, 2, 100, &text, None, Mode::Video).unwrap();
        let image = predict_noise(&w, &x_in, 2, 100, &text, None, Mode::Image).unwrap();
        assert_eq!(video.data(), image.data());
    }

    #[test]
    fn duplicated_view_changes_only_cross_view_features() {
        let cfg = test_config();
        let w = DenoiserWeights::init(&cfg, &SeededRng::new(6));
        let rng = SeededRng::new(7);
        let one = LatentShape {
            views: 1,
            frames: 2,
            height: 4,
            pano_width: 4,
            channels: 2,
        };
        let x1 = LatentVideo::seeded_noise(one, &rng, "x");
        // Duplicate the single view side by side.
        let two = LatentShape {
            views: 2,
            pano_width: 8,
            ..one
        };
        let mut x2 = LatentVideo::zeros(two);
        for t in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    for c in 0..2 {
                        let v = x1.data.data()[x1.index(t, y, x, c)];
                        let i0 = x2.index(t, y, x, c);
                        x2.data.data_mut()[i0] = v;
                        let i1 = x2.index(t, y, 4 + x, c);
                        x2.data.data_mut()[i1] = v;
                    }
                }
            }
        }
        let text = rng.normal_tensor("text", &[4]);
        let in1 = build_input(&x1, None, cfg.cond_channels);
        let in2 = build_input(&x2, None, cfg.cond_channels);
        let mut taps1 = Vec::new();
        let mut taps2 = Vec::new();
        predict_noise_with_taps(&w, &in1, 1, 50, &text, None, Mode::Video, &mut taps1).unwrap();
        predict_noise_with_taps(&w, &in2, 2, 50, &text, None, Mode::Video, &mut taps2).unwrap();
        let find = |taps: &Vec<(String, Tensor)>, name: &str| -> Tensor {
            taps.iter().find(|(n, _)| n == name).unwrap().1.clone()
        };
        // Pre-cross-view features per view match the single-view run.
        for tap in ["stem", "enc0.blk0.conv", "enc0.blk0.gn", "enc0.blk0.intra"] {
            let a = find(&taps1, tap);
            let b = find(&taps2, tap);
            let (d, wp1) = (a.dims().to_vec(), a.dims()[2]);
            let ch = d[3];
            for t in 0..d[0] {
                for y in 0..d[1] {
                    for x in 0..wp1 {
                        for c in 0..ch {
                            let ai = ((t * d[1] + y) * wp1 + x) * ch + c;
                            for view in 0..2 {
                                let bi = ((t * d[1] + y) * 2 * wp1 + view * wp1 + x) * ch + c;
                                let diff = (a.data()[ai] - b.data()[bi]).abs();
                                assert!(diff < 1e-6, "{tap} differs by {diff}");
                            }
                        }
                    }
                }
            }
        }
        // Post-cross-view features do change.
        let a = find(&taps1, "enc0.blk0.xview");
        let b = find(&taps2, "enc0.blk0.xview");
        let mut max_diff = 0.0f64;
        let d = a.dims().to_vec();
        for t in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    for c in 0..d[3] {
                        let ai = ((t * d[1] + y) * d[2] + x) * d[3] + c;
                        let bi = ((t * d[1] + y) * 2 * d[2] + x) * d[3] + c;
                        max_diff = max_diff.max((a.data()[ai] - b.data()[bi]).abs());
                    }
                }
            }
        }
        assert!(max_diff > 1e-9, "cross-view had no effect");
    }

    #[test]
    fn zero_weights_predict_zero_and_unit_loss() {
        // Enough elements for a 2% Monte-Carlo tolerance.
        let shape = LatentShape {
            views: 1,
            frames: 4,
            height: 16,
            pano_width: 32,
            channels: 4,
        };
        let cfg = DenoiserConfig {
            latent_channels: 4,
            cond_channels: 4,
            ..test_config()
        };
        let w = DenoiserWeights::zeros(&cfg);
        let rng = SeededRng::new(8);
        let x = LatentVideo::zeros(shape);
        let batch = TrainBatch {
            z1: Some(x.frame_tensor(0)),
            x,
            control: None,
            text: Tensor::zeros(&[4]),
        };
        let loss = training_loss(&w, &batch, &NoiseSchedule::cosine(100), 0.0, &rng, Mode::Video)
            .unwrap();
        assert!((loss - 1.0).abs() < 0.02, "loss {loss}");
    }

    #[test]
    fn oracle_prediction_gives_zero_loss() {
        let rng = SeededRng::new(9);
        let batch = test_batch(&rng, false);
        let sample = sample_training_tuple(
            &batch,
            &NoiseSchedule::cosine(100),
            0.05,
            &rng,
            Mode::Video,
        )
        .unwrap();
        let loss = mean_squared_error(&sample.target.data, &sample.target.data);
        assert!(loss < 1e-10);
    }

    #[test]
    fn losses_are_non_negative_and_deterministic() {
        let cfg = test_config();
        let sched = NoiseSchedule::cosine(100);
        for trial in 0..25 {
            let rng = SeededRng::new(1000 + trial);
            let w = DenoiserWeights::init(&cfg, &rng.child("w"));
            let batch = test_batch(&rng.child("b"), trial % 2 == 0);
            let l1 = training_loss(&w, &batch, &sched, 0.05, &rng, Mode::Video).unwrap();
            let l2 = training_loss(&w, &batch, &sched, 0.05, &rng, Mode::Video).unwrap();
            assert!(l1 >= 0.0);
            assert_eq!(l1.to_bits(), l2.to_bits(), "loss not deterministic");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = test_config();
        let rng = SeededRng::new(10);
        let w = DenoiserWeights::init(&cfg, &rng.child("w"));
        let batch = test_batch(&rng.child("b"), true);
        let sched = NoiseSchedule::cosine(100);
        let (loss, grads) = loss_gradient(&w, &batch, &sched, 0.05, &rng, Mode::Video).unwrap();
        assert!(loss > 0.0);
        // One parameter from each layer family.
        let picks = [
            ("stem.w", 3),
            ("enc0.blk0.conv.w", 11),
            ("enc0.blk0.emb.w", 5),
            ("enc0.blk0.gn.gamma", 2),
            ("enc0.blk0.intra.wq.w", 7),
            ("enc0.blk0.xview.wo.w", 9),
            ("enc0.blk0.xframe.wv.w", 4),
            ("enc0.blk0.ff1.w", 15),
            ("down0.w", 21),
            ("dec1.blk0.xframe.wo.w", 3),
            ("up1.w", 17),
            ("dec0.blk0.intra.bo", 1),
            ("head.w", 6),
            ("text.w", 2),
            ("ctrl.adapter.w", 13),
            ("ctrl.zero0.w", 5),
            ("ctrl.enc0.blk0.conv.w", 19),
        ];
        let h = 1e-4;
        for (name, idx) in picks {
            let analytic = grads[name].data()[idx];
            let mut wp = w.clone();
            wp.params.get_mut(name).unwrap().data_mut()[idx] += h;
            let lp = training_loss(&wp, &batch, &sched, 0.05, &rng, Mode::Video).unwrap();
            let mut wm = w.clone();
            wm.params.get_mut(name).unwrap().data_mut()[idx] -= h;
            let lm = training_loss(&wm, &batch, &sched, 0.05, &rng, Mode::Video).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-6);
            assert!(
                rel < 1e-3,
                "{name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
            );
        }
    }

    #[test]
    fn control_zero_projection_gets_gradient() {
        let cfg = test_config();
        let rng = SeededRng::new(11);
        let w = DenoiserWeights::init(&cfg, &rng.child("w"));
        let batch = test_batch(&rng.child("b"), true);
        let sched = NoiseSchedule::cosine(100);
        let (_, grads) = loss_gradient(&w, &batch, &sched, 0.05, &rng, Mode::Video).unwrap();
        assert!(grads["ctrl.zero0.w"].max_abs() > 0.0);
        assert!(grads["ctrl.zero1.w"].max_abs() > 0.0);
    }

    #[test]
    fn zero_everything_gives_zero_gradients() {
        let cfg = test_config();
        let w = DenoiserWeights::zeros(&cfg);
        let x_in = Tensor::zeros(&[2, 4, 8, 4]);
        let target = Tensor::zeros(&[2, 4, 8, 2]);
        let text = Tensor::zeros(&[4]);
        let (loss, grads) =
            loss_and_gradient_for(&w, &x_in, &target, 2, 0, &text, None, Mode::Video).unwrap();
        assert_eq!(loss, 0.0);
        for (name, g) in &grads {
            assert_eq!(g.max_abs(), 0.0, "{name} has nonzero gradient");
        }
    }

    #[test]
    fn sgd_step_noop_cases() {
        let cfg = test_config();
        let rng = SeededRng::new(12);
        let w0 = DenoiserWeights::init(&cfg, &rng);
        let batch = test_batch(&rng, false);
        let sched = NoiseSchedule::cosine(100);
        let (_, grads) = loss_gradient(&w0, &batch, &sched, 0.05, &rng, Mode::Video).unwrap();
        let mut w = w0.clone();
        sgd_step(&mut w, &grads, 0.0).unwrap();
        assert_eq!(w, w0);
        let mut w = w0.clone();
        sgd_step(&mut w, &w0.zero_grads(), 0.5).unwrap();
        assert_eq!(w, w0);
    }

    #[test]
    fn overfit_single_batch_halves_loss() {
        let cfg = test_config();
        let rng = SeededRng::new(13);
        let mut w = DenoiserWeights::init(&cfg, &rng.child("w"));
        let batch = test_batch(&rng.child("b"), false);
        let sched = NoiseSchedule::cosine(100);
        let initial = training_loss(&w, &batch, &sched, 0.05, &rng, Mode::Video).unwrap();
        let mut last = initial;
        for _ in 0..200 {
            let (loss, grads) = loss_gradient(&w, &batch, &sched, 0.05, &rng, Mode::Video).unwrap();
            last = loss;
            sgd_step(&mut w, &grads, 0.005).unwrap();
        }
        assert!(
            last <= 0.5 * initial,
            "loss went {initial} -> {last}, expected at least a halving"
        );
    }

    #[test]
    fn stage2_input_padding_is_zero_after_frame_one() {
        let rng = SeededRng::new(14);
        let batch = test_batch(&rng, false);
        let sample = sample_training_tuple(
            &batch,
            &NoiseSchedule::cosine(100),
            0.05,
            &rng,
            Mode::Video,
        )
        .unwrap();
        let s = batch.x.shape();
        let cx = s.channels + 2;
        let positions = s.height * s.pano_width;
        // Frame 1 carries the condition; frames 2..T carry zeros.
        let mut frame0_nonzero = false;
        for t in 0..s.frames {
            for p in 0..positions {
                for c in s.channels..cx {
                    let v = sample.x_in.data()[(t * positions + p) * cx + c];
                    if t == 0 {
                        frame0_nonzero |= v != 0.0;
                    } else {
                        assert_eq!(v, 0.0, "padding leak at frame {t}");
                    }
                }
            }
        }
        assert!(frame0_nonzero, "first-frame condition missing");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = test_config();
        let w = DenoiserWeights::init(&cfg, &SeededRng::new(15));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &w).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.config, w.config);
        assert_eq!(loaded.params.len(), w.params.len());
        for (name, t) in &w.params {
            let lt = &loaded.params[name];
            assert_eq!(lt.dims(), t.dims());
            // Values survive the f32 blob within rounding.
            assert!(t.max_abs_diff(lt).unwrap() < 1e-6, "{name} drifted");
        }
        // A second save/load is exactly stable.
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(dir2.path(), &loaded).unwrap();
        let again = load_checkpoint(dir2.path()).unwrap();
        assert_eq!(again, loaded);
    }
}
