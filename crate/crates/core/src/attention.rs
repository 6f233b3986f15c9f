//! Decomposed space-view-time attention kernels and the full joint
//! attention oracle they are tested against.
//!
//! Tokens live on a (frame t, view v, spatial s) grid with channel width
//! c. The decomposed kernels restrict each query's key set: intra-view
//! (same frame and view), cross-view (same frame, adjacent views only,
//! own view excluded), cross-frame (same view and spatial index). The
//! oracle runs full softmax attention over all T*V*S tokens under an
//! explicit mask; equivalence between the two paths is the core
//! correctness check for this module.

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::{ShapeError, Tensor};
use crate::threads;

#[derive(Debug, Error)]
pub enum AttnError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("query token {query} has no allowed keys")]
    QueryNoKeys { query: usize },
    #[error("adjacency covers {got} views, grid has {expected}")]
    AdjacencyViews { expected: usize, got: usize },
}

/// Dense (T, V, S, c) token grid, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub t: usize,
    pub v: usize,
    pub s: usize,
    pub c: usize,
    data: Vec<f64>,
}

impl TokenGrid {
    pub fn zeros(t: usize, v: usize, s: usize, c: usize) -> Self {
        assert!(t >= 1 && v >= 1 && s >= 1 && c >= 1);
        TokenGrid {
            t,
            v,
            s,
            c,
            data: vec![0.0; t * v * s * c],
        }
    }

    pub fn from_vec(t: usize, v: usize, s: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), t * v * s * c);
        TokenGrid { t, v, s, c, data }
    }

    pub fn random(rng: &SeededRng, label: &str, t: usize, v: usize, s: usize, c: usize) -> Self {
        let tensor = rng.normal_tensor(label, &[t, v, s, c]);
        TokenGrid::from_vec(t, v, s, c, tensor.into_data())
    }

    pub fn n_tokens(&self) -> usize {
        self.t * self.v * self.s
    }

    /// Flat token index in (t, v, s) order, matching the oracle's layout.
    #[inline]
    pub fn flat(&self, ti: usize, vi: usize, si: usize) -> usize {
        (ti * self.v + vi) * self.s + si
    }

    #[inline]
    fn off(&self, ti: usize, vi: usize, si: usize) -> usize {
        self.flat(ti, vi, si) * self.c
    }

    pub fn token(&self, ti: usize, vi: usize, si: usize) -> &[f64] {
        let o = self.off(ti, vi, si);
        &self.data[o..o + self.c]
    }

    pub fn token_mut(&mut self, ti: usize, vi: usize, si: usize) -> &mut [f64] {
        let o = self.off(ti, vi, si);
        &mut self.data[o..o + self.c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &TokenGrid) -> Result<(), AttnError> {
        if (self.t, self.v, self.s, self.c) != (other.t, other.v, other.s, other.c) {
            return Err(ShapeError::Mismatch {
                expected: vec![self.t, self.v, self.s, self.c],
                got: vec![other.t, other.v, other.s, other.c],
            }
            .into());
        }
        Ok(())
    }

    /// Copies a contiguous channel slice out of every token (multi-head
    /// support: heads are channel slices).
    pub fn slice_channels(&self, start: usize, len: usize) -> TokenGrid {
        assert!(start + len <= self.c);
        let mut out = TokenGrid::zeros(self.t, self.v, self.s, len);
        for tok in 0..self.n_tokens() {
            let src = &self.data[tok * self.c + start..tok * self.c + start + len];
            out.data[tok * len..(tok + 1) * len].copy_from_slice(src);
        }
        out
    }

    /// Writes a channel slice back (inverse of [`Self::slice_channels`]).
    pub fn write_channels(&mut self, start: usize, src: &TokenGrid) {
        assert!(start + src.c <= self.c);
        assert_eq!(
            (self.t, self.v, self.s),
            (src.t, src.v, src.s),
            "token layout mismatch"
        );
        for tok in 0..self.n_tokens() {
            self.data[tok * self.c + start..tok * self.c + start + src.c]
                .copy_from_slice(&src.data[tok * src.c..(tok + 1) * src.c]);
        }
    }
}

/// Which views each view's cross-view queries may read keys from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewAdjacency {
    neighbors: Vec<Vec<usize>>,
}

impl ViewAdjacency {
    /// Ring topology: view v sees v-1 and v+1 modulo V. V=1 has no
    /// neighbors; V=2 deduplicates the coinciding left/right neighbor.
    pub fn cyclic(views: usize) -> Self {
        assert!(views >= 1);
        let neighbors = (0..views)
            .map(|v| {
                let mut n = vec![(v + views - 1) % views, (v + 1) % views];
                n.dedup();
                n.retain(|&u| u != v);
                n
            })
            .collect();
        ViewAdjacency { neighbors }
    }

    /// Arbitrary rig topology; self-edges are rejected.
    pub fn from_lists(neighbors: Vec<Vec<usize>>) -> Self {
        for (v, list) in neighbors.iter().enumerate() {
            for &u in list {
                assert!(u < neighbors.len(), "neighbor {u} out of range");
                assert!(u != v, "view {v} may not neighbor itself");
            }
        }
        ViewAdjacency { neighbors }
    }

    pub fn views(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }
}

/// Key-visibility predicate over flattened (t, v, s) token pairs.
#[derive(Debug, Clone)]
pub struct AttnMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(
        t: usize,
        v: usize,
        s: usize,
        pred: impl Fn((usize, usize, usize), (usize, usize, usize)) -> bool,
    ) -> Self {
        let n = t * v * s;
        let mut allowed = vec![false; n * n];
        let coords: Vec<(usize, usize, usize)> = (0..t)
            .flat_map(|ti| (0..v).flat_map(move |vi| (0..s).map(move |si| (ti, vi, si))))
            .collect();
        for (qi, &qc) in coords.iter().enumerate() {
            for (ki, &kc) in coords.iter().enumerate() {
                allowed[qi * n + ki] = pred(qc, kc);
            }
        }
        AttnMask { n, allowed }
    }

    pub fn all(t: usize, v: usize, s: usize) -> Self {
        AttnMask::from_fn(t, v, s, |_, _| true)
    }

    pub fn identity(t: usize, v: usize, s: usize) -> Self {
        AttnMask::from_fn(t, v, s, |q, k| q == k)
    }

    /// Same frame, same view: the intra-view key set.
    pub fn intra_view(t: usize, v: usize, s: usize) -> Self {
        AttnMask::from_fn(t, v, s, |q, k| q.0 == k.0 && q.1 == k.1)
    }

    /// Same frame, adjacent view: the cross-view key set.
    pub fn cross_view(t: usize, v: usize, s: usize, adj: &ViewAdjacency) -> Self {
        AttnMask::from_fn(t, v, s, |q, k| {
            q.0 == k.0 && adj.neighbors(q.1).contains(&k.1)
        })
    }

    /// Same view, same spatial index, any frame: the cross-frame key set.
    pub fn cross_frame(t: usize, v: usize, s: usize) -> Self {
        AttnMask::from_fn(t, v, s, |q, k| q.1 == k.1 && q.2 == k.2)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }
}

/// Scaled dot-product attention over contiguous rows. Writes nq output
/// rows; optionally records the (nq x nk) weight matrix.
fn attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    out: &mut [f64],
    mut weights: Option<&mut [f64]>,
) {
    debug_assert!(nk >= 1);
    let scale = 1.0 / (c as f64).sqrt();
    let mut logits = vec![0.0f64; nk];
    for qi in 0..nq {
        let qrow = &q[qi * c..(qi + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for ki in 0..nk {
            let krow = &k[ki * c..(ki + 1) * c];
            let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
            let l = dot * scale;
            logits[ki] = l;
            max = max.max(l);
        }
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        let orow = &mut out[qi * c..(qi + 1) * c];
        orow.fill(0.0);
        for ki in 0..nk {
            let w = logits[ki] / sum;
            if let Some(ws) = weights.as_deref_mut() {
                ws[qi * nk + ki] = w;
            }
            let vrow = &v[ki * c..(ki + 1) * c];
            for (o, val) in orow.iter_mut().zip(vrow) {
                *o += w * val;
            }
        }
    }
}

/// Gradient of [`attend`] for loss gradient d_out on the outputs.
/// Returns (dq, dk, dv) as flat row-major buffers.
fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d_out: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (c as f64).sqrt();
    let mut weights = vec![0.0f64; nq * nk];
    let mut fwd = vec![0.0f64; nq * c];
    attend(q, k, v, nq, nk, c, &mut fwd, Some(&mut weights));

    let mut dq = vec![0.0f64; nq * c];
    let mut dk = vec![0.0f64; nk * c];
    let mut dv = vec![0.0f64; nk * c];
    let mut d_a = vec![0.0f64; nk];
    for qi in 0..nq {
        let dorow = &d_out[qi * c..(qi + 1) * c];
        let wrow = &weights[qi * nk..(qi + 1) * nk];
        // dV += A^T dOut; dA = dOut V^T.
        let mut inner = 0.0;
        for ki in 0..nk {
            let vrow = &v[ki * c..(ki + 1) * c];
            let da: f64 = dorow.iter().zip(vrow).map(|(a, b)| a * b).sum();
            d_a[ki] = da;
            inner += wrow[ki] * da;
            let dvrow = &mut dv[ki * c..(ki + 1) * c];
            for (dvv, doo) in dvrow.iter_mut().zip(dorow) {
                *dvv += wrow[ki] * doo;
            }
        }
        // Softmax backward: dS_ij = A_ij (dA_ij - sum_k A_ik dA_ik).
        let qrow = &q[qi * c..(qi + 1) * c];
        let dqrow = &mut dq[qi * c..(qi + 1) * c];
        for ki in 0..nk {
            let ds = wrow[ki] * (d_a[ki] - inner) * scale;
            let krow = &k[ki * c..(ki + 1) * c];
            for ch in 0..c {
                dqrow[ch] += ds * krow[ch];
                dk[ki * c + ch] += ds * qrow[ch];
            }
        }
    }
    (dq, dk, dv)
}

fn check_dims(q: &TokenGrid, k: &TokenGrid, v: &TokenGrid) -> Result<(), AttnError> {
    q.same_dims(k)?;
    q.same_dims(v)?;
    Ok(())
}

/// Spatial self-attention within each (frame, view) slab.
pub fn intra_view_attention(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
) -> Result<TokenGrid, AttnError> {
    intra_view_impl(q, k, v, None)
}

/// As [`intra_view_attention`], also returning the full (N x N) weight
/// matrix in flat (t, v, s) token order.
pub fn intra_view_attention_traced(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
) -> Result<(TokenGrid, Tensor), AttnError> {
    let n = q.n_tokens();
    let mut w = Tensor::zeros(&[n, n]);
    let out = intra_view_impl(q, k, v, Some(&mut w))?;
    Ok((out, w))
}

fn intra_view_impl(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    mut trace: Option<&mut Tensor>,
) -> Result<TokenGrid, AttnError> {
    check_dims(q, k, v)?;
    let (tt, vv, ss, c) = (q.t, q.v, q.s, q.c);
    let n = q.n_tokens();
    let mut out = TokenGrid::zeros(tt, vv, ss, c);
    let slab = ss * c;
    if trace.is_none() {
        // (t, v) slabs are independent and contiguous: parallel, no
        // shared state, bit-identical to the serial path.
        threads::pool().install(|| {
            out.data
                .par_chunks_exact_mut(slab)
                .enumerate()
                .for_each(|(i, oslab)| {
                    let o = i * slab;
                    attend(
                        &q.data[o..o + slab],
                        &k.data[o..o + slab],
                        &v.data[o..o + slab],
                        ss,
                        ss,
                        c,
                        oslab,
                        None,
                    );
                });
        });
        return Ok(out);
    }
    let mut local = vec![0.0f64; ss * ss];
    for ti in 0..tt {
        for vi in 0..vv {
            let o = q.off(ti, vi, 0);
            attend(
                &q.data[o..o + slab],
                &k.data[o..o + slab],
                &v.data[o..o + slab],
                ss,
                ss,
                c,
                &mut out.data[o..o + slab],
                Some(&mut local[..]),
            );
            if let Some(w) = trace.as_deref_mut() {
                for si in 0..ss {
                    let qi = q.flat(ti, vi, si);
                    for sj in 0..ss {
                        w.data_mut()[qi * n + q.flat(ti, vi, sj)] = local[si * ss + sj];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of intra-view attention with respect to q, k, v.
pub fn intra_view_attention_backward(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    d_out: &TokenGrid,
) -> Result<(TokenGrid, TokenGrid, TokenGrid), AttnError> {
    check_dims(q, k, v)?;
    q.same_dims(d_out)?;
    let (tt, vv, ss, c) = (q.t, q.v, q.s, q.c);
    let mut dq = TokenGrid::zeros(tt, vv, ss, c);
    let mut dk = TokenGrid::zeros(tt, vv, ss, c);
    let mut dv = TokenGrid::zeros(tt, vv, ss, c);
    for ti in 0..tt {
        for vi in 0..vv {
            let o = q.off(ti, vi, 0);
            let (gq, gk, gv) = attend_backward(
                &q.data[o..o + ss * c],
                &k.data[o..o + ss * c],
                &v.data[o..o + ss * c],
                &d_out.data[o..o + ss * c],
                ss,
                ss,
                c,
            );
            dq.data[o..o + ss * c].copy_from_slice(&gq);
            dk.data[o..o + ss * c].copy_from_slice(&gk);
            dv.data[o..o + ss * c].copy_from_slice(&gv);
        }
    }
    Ok((dq, dk, dv))
}

/// Attention from each view's queries to the concatenated spatial tokens
/// of its adjacent views in the same frame. Own-view keys are excluded;
/// with a single view the query grid passes through unchanged.
pub fn cross_view_attention(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    adj: &ViewAdjacency,
) -> Result<TokenGrid, AttnError> {
    cross_view_impl(q, k, v, adj, None)
}

pub fn cross_view_attention_traced(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    adj: &ViewAdjacency,
) -> Result<(TokenGrid, Tensor), AttnError> {
    let n = q.n_tokens();
    let mut w = Tensor::zeros(&[n, n]);
    let out = cross_view_impl(q, k, v, adj, Some(&mut w))?;
    Ok((out, w))
}

fn cross_view_impl(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    adj: &ViewAdjacency,
    mut trace: Option<&mut Tensor>,
) -> Result<TokenGrid, AttnError> {
    check_dims(q, k, v)?;
    if adj.views() != q.v {
        return Err(AttnError::AdjacencyViews {
            expected: q.v,
            got: adj.views(),
        });
    }
    let (tt, vv, ss, c) = (q.t, q.v, q.s, q.c);
    if vv == 1 {
        return Ok(q.clone());
    }
    let n = q.n_tokens();
    let mut out = TokenGrid::zeros(tt, vv, ss, c);
    let slab = ss * c;
    if trace.is_none() {
        threads::pool().install(|| {
            out.data
                .par_chunks_exact_mut(slab)
                .enumerate()
                .for_each(|(i, oslab)| {
                    let (ti, vi) = (i / vv, i % vv);
                    let nbrs = adj.neighbors(vi);
                    let nk = nbrs.len() * ss;
                    let mut krows = Vec::with_capacity(nk * c);
                    let mut vrows = Vec::with_capacity(nk * c);
                    for &u in nbrs {
                        let o = k.off(ti, u, 0);
                        krows.extend_from_slice(&k.data[o..o + slab]);
                        vrows.extend_from_slice(&v.data[o..o + slab]);
                    }
                    let o = i * slab;
                    attend(&q.data[o..o + slab], &krows, &vrows, ss, nk, c, oslab, None);
                });
        });
        return Ok(out);
    }
    for ti in 0..tt {
        for vi in 0..vv {
            let nbrs = adj.neighbors(vi);
            let nk = nbrs.len() * ss;
            let mut krows = Vec::with_capacity(nk * c);
            let mut vrows = Vec::with_capacity(nk * c);
            for &u in nbrs {
                let o = k.off(ti, u, 0);
                krows.extend_from_slice(&k.data[o..o + slab]);
                vrows.extend_from_slice(&v.data[o..o + slab]);
            }
            let o = q.off(ti, vi, 0);
            let mut local = vec![0.0f64; ss * nk];
            attend(
                &q.data[o..o + slab],
                &krows,
                &vrows,
                ss,
                nk,
                c,
                &mut out.data[o..o + slab],
                Some(&mut local[..]),
            );
            if let Some(w) = trace.as_deref_mut() {
                for si in 0..ss {
                    let qi = q.flat(ti, vi, si);
                    for (ni, &u) in nbrs.iter().enumerate() {
                        for sj in 0..ss {
                            w.data_mut()[qi * n + q.flat(ti, u, sj)] =
                                local[si * nk + ni * ss + sj];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of cross-view attention. With V=1 the kernel is the
/// identity on q, so dq = d_out and dk = dv = 0.
pub fn cross_view_attention_backward(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    adj: &ViewAdjacency,
    d_out: &TokenGrid,
) -> Result<(TokenGrid, TokenGrid, TokenGrid), AttnError> {
    check_dims(q, k, v)?;
    q.same_dims(d_out)?;
    if adj.views() != q.v {
        return Err(AttnError::AdjacencyViews {
            expected: q.v,
            got: adj.views(),
        });
    }
    let (tt, vv, ss, c) = (q.t, q.v, q.s, q.c);
    let mut dq = TokenGrid::zeros(tt, vv, ss, c);
    let mut dk = TokenGrid::zeros(tt, vv, ss, c);
    let mut dv = TokenGrid::zeros(tt, vv, ss, c);
    if vv == 1 {
        dq.data.copy_from_slice(&d_out.data);
        return Ok((dq, dk, dv));
    }
    for ti in 0..tt {
        for vi in 0..vv {
            let nbrs = adj.neighbors(vi);
            let nk = nbrs.len() * ss;
            let mut krows = Vec::with_capacity(nk * c);
            let mut vrows = Vec::with_capacity(nk * c);
            for &u in nbrs {
                let o = k.off(ti, u, 0);
                krows.extend_from_slice(&k.data[o..o + ss * c]);
                vrows.extend_from_slice(&v.data[o..o + ss * c]);
            }
            let o = q.off(ti, vi, 0);
            let (gq, gk, gv) = attend_backward(
                &q.data[o..o + ss * c],
                &krows,
                &vrows,
                &d_out.data[o..o + ss * c],
                ss,
                nk,
                c,
            );
            dq.data[o..o + ss * c].copy_from_slice(&gq);
            for (ni, &u) in nbrs.iter().enumerate() {
                let uo = k.off(ti, u, 0);
                for i in 0..ss * c {
                    dk.data[uo + i] += gk[ni * ss * c + i];
                    dv.data[uo + i] += gv[ni * ss * c + i];
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Temporal attention: each (t, v, s) query attends over the same
/// (v, s) position in every frame.
pub fn cross_frame_attention(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
) -> Result<TokenGrid, AttnError> {
    cross_frame_impl(q, k, v, None)
}

pub fn cross_frame_attention_traced(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
) -> Result<(TokenGrid, Tensor), AttnError> {
    let n = q.n_tokens();
    let mut w = Tensor::zeros(&[n, n]);
    let out = cross_frame_impl(q, k, v, Some(&mut w))?;
    Ok((out, w))
}

fn cross_frame_impl(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    mut trace: Option<&mut Tensor>,
) -> Result<TokenGrid, AttnError> {
    check_dims(q, k, v)?;
    let (tt, vv, ss, c) = (q.t, q.v, q.s, q.c);
    let n = q.n_tokens();
    let mut out = TokenGrid::zeros(tt, vv, ss, c);
    let mut qrows = vec![0.0f64; tt * c];
    let mut krows = vec![0.0f64; tt * c];
    let mut vrows = vec![0.0f64; tt * c];
    let mut orows = vec![0.0f64; tt * c];
    let mut local = vec![0.0f64; tt * tt];
    for vi in 0..vv {
        for si in 0..ss {
            for ti in 0..tt {
                qrows[ti * c..(ti + 1) * c].copy_from_slice(q.token(ti, vi, si));
                krows[ti * c..(ti + 1) * c].copy_from_slice(k.token(ti, vi, si));
                vrows[ti * c..(ti + 1) * c].copy_from_slice(v.token(ti, vi, si));
            }
            attend(
                &qrows,
                &krows,
                &vrows,
                tt,
                tt,
                c,
                &mut orows,
                trace.as_deref_mut().map(|_| &mut local[..]),
            );
            for ti in 0..tt {
                out.token_mut(ti, vi, si)
                    .copy_from_slice(&orows[ti * c..(ti + 1) * c]);
            }
            if let Some(w) = trace.as_deref_mut() {
                for ti in 0..tt {
                    let qi = q.flat(ti, vi, si);
                    for tj in 0..tt {
                        w.data_mut()[qi * n + q.flat(tj, vi, si)] = local[ti * tt + tj];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of cross-frame attention.
pub fn cross_frame_attention_backward(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    d_out: &TokenGrid,
) -> Result<(TokenGrid, TokenGrid, TokenGrid), AttnError> {
    check_dims(q, k, v)?;
    q.same_dims(d_out)?;
    let (tt, vv, ss, c) = (q.t, q.v, q.s, q.c);
    let mut dq = TokenGrid::zeros(tt, vv, ss, c);
    let mut dk = TokenGrid::zeros(tt, vv, ss, c);
    let mut dv = TokenGrid::zeros(tt, vv, ss, c);
    let mut qrows = vec![0.0f64; tt * c];
    let mut krows = vec![0.0f64; tt * c];
    let mut vrows = vec![0.0f64; tt * c];
    let mut dorows = vec![0.0f64; tt * c];
    for vi in 0..vv {
        for si in 0..ss {
            for ti in 0..tt {
                qrows[ti * c..(ti + 1) * c].copy_from_slice(q.token(ti, vi, si));
                krows[ti * c..(ti + 1) * c].copy_from_slice(k.token(ti, vi, si));
                vrows[ti * c..(ti + 1) * c].copy_from_slice(v.token(ti, vi, si));
                dorows[ti * c..(ti + 1) * c].copy_from_slice(d_out.token(ti, vi, si));
            }
            let (gq, gk, gv) = attend_backward(&qrows, &krows, &vrows, &dorows, tt, tt, c);
            for ti in 0..tt {
                dq.token_mut(ti, vi, si)
                    .copy_from_slice(&gq[ti * c..(ti + 1) * c]);
                dk.token_mut(ti, vi, si)
                    .copy_from_slice(&gk[ti * c..(ti + 1) * c]);
                dv.token_mut(ti, vi, si)
                    .copy_from_slice(&gv[ti * c..(ti + 1) * c]);
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Full joint attention over all T*V*S tokens with masked logits: the
/// memory-hungry reference the decomposed kernels are checked against.
pub fn joint_attention_oracle(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    mask: &AttnMask,
) -> Result<TokenGrid, AttnError> {
    Ok(joint_oracle_impl(q, k, v, mask)?.0)
}

/// Oracle variant also returning the dense row-stochastic weight matrix.
pub fn joint_attention_oracle_traced(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    mask: &AttnMask,
) -> Result<(TokenGrid, Tensor), AttnError> {
    joint_oracle_impl(q, k, v, mask)
}

fn joint_oracle_impl(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    mask: &AttnMask,
) -> Result<(TokenGrid, Tensor), AttnError> {
    check_dims(q, k, v)?;
    let n = q.n_tokens();
    assert_eq!(mask.n(), n, "mask built for a different grid");
    let c = q.c;
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = TokenGrid::zeros(q.t, q.v, q.s, c);
    let mut weights = Tensor::zeros(&[n, n]);
    let mut logits = vec![f64::NEG_INFINITY; n];
    for qi in 0..n {
        let qrow = &q.data[qi * c..(qi + 1) * c];
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for ki in 0..n {
            if !mask.allowed(qi, ki) {
                logits[ki] = f64::NEG_INFINITY;
                continue;
            }
            any = true;
            let krow = &k.data[ki * c..(ki + 1) * c];
            let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
            logits[ki] = dot * scale;
            max = max.max(logits[ki]);
        }
        if !any {
            return Err(AttnError::QueryNoKeys { query: qi });
        }
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            if l.is_finite() {
                *l = (*l - max).exp();
                sum += *l;
            } else {
                *l = 0.0;
            }
        }
        let orow = &mut out.data[qi * c..(qi + 1) * c];
        for ki in 0..n {
            if logits[ki] == 0.0 {
                continue;
            }
            let w = logits[ki] / sum;
            weights.data_mut()[qi * n + ki] = w;
            let vrow = &v.data[ki * c..(ki + 1) * c];
            for (o, val) in orow.iter_mut().zip(vrow) {
                *o += w * val;
            }
        }
    }
    Ok((out, weights))
}
