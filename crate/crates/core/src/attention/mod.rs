//! Causal relative-temporal attention: RoPE rotations, windowed relative
//! attention over time, a streaming single-frame variant, and the per-frame
//! graph-transformer block over skeleton joints.

use std::collections::VecDeque;

use rand::Rng;

use crate::tensor::{Graph, Param, ParamSet, Value};

/// Stabilizer added to the attention denominator.
pub const DENOM_EPS: f64 = 1e-6;
/// Epsilon used by every layer norm in the attention stack.
pub const LN_EPS: f64 = 1e-5;

/// Applies the block-diagonal rotary rotation R_t to a D-vector: pair
/// (x_{2m}, x_{2m+1}) is rotated by angle t * base^(-2m/D).
pub fn rope_rotate(x: &[f64], t: i64, base: f64) -> Vec<f64> {
    let d = x.len();
    assert!(d % 2 == 0, "rope_rotate: dimension {} is odd", d);
    let mut out = vec![0.0; d];
    for m in 0..d / 2 {
        let angle = t as f64 * base.powf(-((2 * m) as f64) / d as f64);
        let (s, c) = angle.sin_cos();
        let (a, b) = (x[2 * m], x[2 * m + 1]);
        out[2 * m] = a * c - b * s;
        out[2 * m + 1] = a * s + b * c;
    }
    out
}

/// Per-pair cosines and sines for positions `t0..t0+t`, flattened [T, D/2].
fn rope_tables(t0: usize, t: usize, d: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for row in 0..t {
        for m in 0..half {
            let angle = (t0 + row) as f64 * base.powf(-((2 * m) as f64) / d as f64);
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Rotates every row of `x` ([T, D]) by its RoPE rotation for positions
/// `t0..t0+T`.
fn rope_rotate_rows(g: &Graph, x: &Value, t0: usize, base: f64) -> Value {
    let shape = x.shape();
    assert_eq!(shape.len(), 2, "rope_rotate_rows: expected [T, D], got {:?}", shape);
    let (t, d) = (shape[0], shape[1]);
    assert!(d % 2 == 0, "rope_rotate_rows: dimension {} is odd", d);
    let half = d / 2;
    let (cos, sin) = rope_tables(t0, t, d, base);
    let cos = g.constant(&[t, half, 1], &cos);
    let sin = g.constant(&[t, half, 1], &sin);
    let pairs = x.reshape(&[t, half, 2]);
    let xe = pairs.slice(2, 0, 1);
    let xo = pairs.slice(2, 1, 1);
    let re = xe.mul(&cos).sub(&xo.mul(&sin));
    let ro = xe.mul(&sin).add(&xo.mul(&cos));
    Value::concat(&[&re, &ro], 2).reshape(&[t, d])
}

/// One causal relative-temporal attention layer.
///
/// Houses the query/key/value projections (theta and rho end in elu + 1 so
/// attention weights in the denominator stay positive), the output
/// projection, the window size, and the RoPE base frequency.
#[derive(Clone)]
pub struct RelTemporalLayer {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ws: usize,
    pub rope_base: f64,
    wq: Param,
    bq: Param,
    wk: Param,
    bk: Param,
    wv: Param,
    bv: Param,
    wo: Param,
    bo: Param,
    ln_gain: Param,
    ln_bias: Param,
}

impl RelTemporalLayer {
    /// Panics if `d_model` does not split into `heads` even-sized halves.
    pub fn new(
        prefix: &str,
        d_model: usize,
        heads: usize,
        ws: usize,
        rope_base: f64,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> RelTemporalLayer {
        assert!(heads >= 1 && d_model % heads == 0, "d_model {} not divisible by {} heads", d_model, heads);
        let head_dim = d_model / heads;
        assert!(head_dim % 2 == 0, "head dimension {} is odd; RoPE pairs dimensions", head_dim);
        let std = 1.0 / (d_model as f64).sqrt();
        let mut mat = |name: &str| params.add(Param::randn(&format!("{}.{}", prefix, name), &[d_model, d_model], std, rng));
        let (wq, wk, wv, wo) = (mat("wq"), mat("wk"), mat("wv"), mat("wo"));
        let mut vec = |name: &str, fill: f64| {
            params.add(Param::new(&format!("{}.{}", prefix, name), &[d_model], vec![fill; d_model]))
        };
        let (bq, bk, bv, bo) = (vec("bq", 0.0), vec("bk", 0.0), vec("bv", 0.0), vec("bo", 0.0));
        let (ln_gain, ln_bias) = (vec("ln_gain", 1.0), vec("ln_bias", 0.0));
        RelTemporalLayer {
            d_model,
            heads,
            head_dim,
            ws,
            rope_base,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln_gain,
            ln_bias,
        }
    }

    fn project(&self, g: &Graph, x: &Value) -> (Value, Value, Value) {
        let theta = x.matmul(&g.param(&self.wq)).add(&g.param(&self.bq)).elu().add_scalar(1.0);
        let rho = x.matmul(&g.param(&self.wk)).add(&g.param(&self.bk)).elu().add_scalar(1.0);
        let v = x.matmul(&g.param(&self.wv)).add(&g.param(&self.bv));
        (theta, rho, v)
    }

    /// Full layer: pre-norm residual around the windowed attention and its
    /// output projection.
    pub fn forward(&self, g: &Graph, x: &Value) -> Value {
        let h = x
            .layer_norm(LN_EPS)
            .mul(&g.param(&self.ln_gain))
            .add(&g.param(&self.ln_bias));
        let attn = windowed_relative_attention(self, g, &h);
        let proj = attn.matmul(&g.param(&self.wo)).add(&g.param(&self.bo));
        x.add(&proj)
    }

    /// Streaming forward for one frame ([1, D]); bitwise-equal to the
    /// corresponding row of [`RelTemporalLayer::forward`] on the prefix.
    pub fn stream_forward(&self, g: &Graph, state: &mut StreamState, x: &Value) -> Value {
        let h = x
            .layer_norm(LN_EPS)
            .mul(&g.param(&self.ln_gain))
            .add(&g.param(&self.ln_bias));
        let attn = stream_attention_step(self, g, state, &h);
        let proj = attn.matmul(&g.param(&self.wo)).add(&g.param(&self.bo));
        x.add(&proj)
    }
}

/// Band mask: row j admits columns max(0, j - ws)..=j.
fn band_mask(g: &Graph, t: usize, ws: usize) -> Value {
    let mut mask = vec![0.0; t * t];
    for j in 0..t {
        let lo = j.saturating_sub(ws);
        for i in lo..=j {
            mask[j * t + i] = 1.0;
        }
    }
    g.constant(&[t, t], &mask)
}

fn assert_finite(x: &Value, what: &str) {
    assert!(
        x.values().iter().all(|v| v.is_finite()),
        "{}: non-finite input",
        what
    );
}

/// Windowed relative attention over a [T, D_model] sequence with frame
/// positions `t0..t0+T`: per frame j and head,
/// out_j = sum_{i=j-ws}^{j} (R_j theta_j)^T (R_i rho_i) v_i
///       / (sum_{i=j-ws}^{j} theta_j^T rho_i + 1e-6),
/// head outputs concatenated. The output projection is applied by
/// [`RelTemporalLayer::forward`], not here.
pub fn windowed_relative_attention_at(layer: &RelTemporalLayer, g: &Graph, features: &Value, t0: usize) -> Value {
    let shape = features.shape();
    assert_eq!(
        shape,
        vec![shape[0], layer.d_model],
        "attention: expected [T, {}], got {:?}",
        layer.d_model,
        shape
    );
    assert_finite(features, "attention");
    let t = shape[0];
    let (theta, rho, v) = layer.project(g, features);
    if layer.ws == 0 {
        // the single self term cancels exactly between numerator and
        // denominator, so the output is the value projection itself
        return v;
    }
    let mask = band_mask(g, t, layer.ws);
    let mut head_outs = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let off = h * layer.head_dim;
        let th = theta.slice(1, off, layer.head_dim);
        let rh = rho.slice(1, off, layer.head_dim);
        let vh = v.slice(1, off, layer.head_dim);
        let th_rot = rope_rotate_rows(g, &th, t0, layer.rope_base);
        let rh_rot = rope_rotate_rows(g, &rh, t0, layer.rope_base);
        let num_scores = th_rot.matmul(&rh_rot.transpose()).mul(&mask);
        let den_scores = th.matmul(&rh.transpose()).mul(&mask);
        let num = num_scores.matmul(&vh);
        let den = den_scores.sum_axis(1).reshape(&[t, 1]).add_scalar(DENOM_EPS);
        head_outs.push(num.div(&den));
    }
    let refs: Vec<&Value> = head_outs.iter().collect();
    Value::concat(&refs, 1)
}

/// [`windowed_relative_attention_at`] with positions starting at 0.
pub fn windowed_relative_attention(layer: &RelTemporalLayer, g: &Graph, features: &Value) -> Value {
    windowed_relative_attention_at(layer, g, features, 0)
}

/// Cached key/value state of one frame inside a [`StreamState`].
struct StreamEntry {
    /// Absolute frame counter; only differences ever enter the math.
    index: usize,
    rho: Vec<f64>,
    rho_rot: Vec<f64>,
    v: Vec<f64>,
}

/// Ring buffer of the last ws + 1 frames of transformed keys and values for
/// one layer of one streaming session.
pub struct StreamState {
    entries: VecDeque<StreamEntry>,
    next_index: usize,
}

impl StreamState {
    pub fn new() -> StreamState {
        StreamState {
            entries: VecDeque::new(),
            next_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of frames pushed so far.
    pub fn frames_seen(&self) -> usize {
        self.next_index
    }
}

impl Default for StreamState {
    fn default() -> StreamState {
        StreamState::new()
    }
}

/// Streaming counterpart of [`windowed_relative_attention`]: consumes one
/// [1, D_model] frame, returns its attention output, and retains at most
/// ws + 1 frames of key/value state. Outputs are bitwise-equal to the
/// corresponding offline row.
pub fn stream_attention_step(layer: &RelTemporalLayer, g: &Graph, state: &mut StreamState, frame: &Value) -> Value {
    assert_eq!(
        frame.shape(),
        vec![1, layer.d_model],
        "stream_attention_step: expected [1, {}], got {:?}",
        layer.d_model,
        frame.shape()
    );
    assert_finite(frame, "stream_attention_step");
    let j = state.next_index;
    state.next_index += 1;
    let (theta, rho, v) = layer.project(g, frame);
    // rotate head-by-head: RoPE angles depend on the per-head dimension
    let mut rho_rot = Vec::with_capacity(layer.d_model);
    for h in 0..layer.heads {
        let rh = rho.slice(1, h * layer.head_dim, layer.head_dim);
        rho_rot.extend(rope_rotate_rows(g, &rh, j, layer.rope_base).values());
    }
    state.entries.push_back(StreamEntry {
        index: j,
        rho: rho.values(),
        rho_rot,
        v: v.values(),
    });
    while state.entries.len() > layer.ws + 1 {
        state.entries.pop_front();
    }
    debug_assert!(state.entries.iter().all(|e| j - e.index <= layer.ws));
    if layer.ws == 0 {
        return v;
    }
    let w = state.entries.len();
    let d = layer.d_model;
    // window tensors in ascending frame order, matching the offline masked
    // accumulation order
    let mut rho_buf = Vec::with_capacity(w * d);
    let mut rho_rot_buf = Vec::with_capacity(w * d);
    let mut v_buf = Vec::with_capacity(w * d);
    for e in &state.entries {
        rho_buf.extend_from_slice(&e.rho);
        rho_rot_buf.extend_from_slice(&e.rho_rot);
        v_buf.extend_from_slice(&e.v);
    }
    let rho_buf = g.constant(&[w, d], &rho_buf);
    let rho_rot_buf = g.constant(&[w, d], &rho_rot_buf);
    let v_buf = g.constant(&[w, d], &v_buf);
    let mut head_outs = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let off = h * layer.head_dim;
        let th = theta.slice(1, off, layer.head_dim);
        let th_rot = rope_rotate_rows(g, &th, j, layer.rope_base);
        let rh_rot = rho_rot_buf.slice(1, off, layer.head_dim);
        let rh = rho_buf.slice(1, off, layer.head_dim);
        let vh = v_buf.slice(1, off, layer.head_dim);
        let num_scores = th_rot.matmul(&rh_rot.transpose());
        let den_scores = th.matmul(&rh.transpose());
        let num = num_scores.matmul(&vh);
        let den = den_scores.sum_axis(1).reshape(&[1, 1]).add_scalar(DENOM_EPS);
        head_outs.push(num.div(&den));
    }
    let refs: Vec<&Value> = head_outs.iter().collect();
    Value::concat(&refs, 1)
}

/// Softmax over the last axis of a rank-2 value.
fn softmax_rows(x: &Value) -> Value {
    let t = x.shape()[0];
    let m = x.max_axis(1).reshape(&[t, 1]);
    let e = x.sub(&m).exp();
    let s = e.sum_axis(1).reshape(&[t, 1]);
    e.div(&s)
}

/// Per-frame graph-transformer block over N_J joint tokens: one
/// degree-normalized first-order graph convolution and one full softmax
/// self-attention across joints, each wrapped in a pre-norm residual.
/// Joint tokens carry no positional encoding.
#[derive(Clone)]
pub struct GraphTransformerBlock {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    wg: Param,
    bg: Param,
    wq: Param,
    wk: Param,
    wv: Param,
    wo: Param,
    bo: Param,
    ln1_gain: Param,
    ln1_bias: Param,
    ln2_gain: Param,
    ln2_bias: Param,
}

impl GraphTransformerBlock {
    pub fn new(
        prefix: &str,
        d_model: usize,
        heads: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> GraphTransformerBlock {
        assert!(heads >= 1 && d_model % heads == 0, "d_model {} not divisible by {} heads", d_model, heads);
        let std = 1.0 / (d_model as f64).sqrt();
        let mut mat = |name: &str| params.add(Param::randn(&format!("{}.{}", prefix, name), &[d_model, d_model], std, rng));
        let (wg, wq, wk, wv, wo) = (mat("wg"), mat("wq"), mat("wk"), mat("wv"), mat("wo"));
        let mut vec = |name: &str, fill: f64| {
            params.add(Param::new(&format!("{}.{}", prefix, name), &[d_model], vec![fill; d_model]))
        };
        GraphTransformerBlock {
            d_model,
            heads,
            head_dim: d_model / heads,
            wg,
            bg: vec("bg", 0.0),
            wq,
            wk,
            wv,
            wo,
            bo: vec("bo", 0.0),
            ln1_gain: vec("ln1_gain", 1.0),
            ln1_bias: vec("ln1_bias", 0.0),
            ln2_gain: vec("ln2_gain", 1.0),
            ln2_bias: vec("ln2_bias", 0.0),
        }
    }

    /// `features`: [N_J, D_model]; `adjacency`: [N_J, N_J] symmetric
    /// degree-normalized skeleton adjacency with self-loops.
    pub fn forward(&self, g: &Graph, features: &Value, adjacency: &Value) -> Value {
        let n = features.shape()[0];
        assert_eq!(
            features.shape(),
            vec![n, self.d_model],
            "graph block: expected [N_J, {}], got {:?}",
            self.d_model,
            features.shape()
        );
        assert_eq!(adjacency.shape(), vec![n, n], "graph block: adjacency shape {:?}", adjacency.shape());
        // graph convolution sublayer
        let h = features
            .layer_norm(LN_EPS)
            .mul(&g.param(&self.ln1_gain))
            .add(&g.param(&self.ln1_bias));
        let gc = adjacency.matmul(&h.matmul(&g.param(&self.wg)).add(&g.param(&self.bg)));
        let x = features.add(&gc);
        // joint self-attention sublayer
        let h = x
            .layer_norm(LN_EPS)
            .mul(&g.param(&self.ln2_gain))
            .add(&g.param(&self.ln2_bias));
        let q = h.matmul(&g.param(&self.wq));
        let k = h.matmul(&g.param(&self.wk));
        let v = h.matmul(&g.param(&self.wv));
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let off = head * self.head_dim;
            let qh = q.slice(1, off, self.head_dim);
            let kh = k.slice(1, off, self.head_dim);
            let vh = v.slice(1, off, self.head_dim);
            let scores = softmax_rows(&qh.matmul(&kh.transpose()).scale(scale));
            head_outs.push(scores.matmul(&vh));
        }
        let refs: Vec<&Value> = head_outs.iter().collect();
        let attn = Value::concat(&refs, 1);
        let proj = attn.matmul(&g.param(&self.wo)).add(&g.param(&self.bo));
        x.add(&proj)
    }
}

fn elu1_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp_m1() + 1.0
    }
}

/// Direct double-loop scalar evaluation of the windowed relative attention
/// equation, independent of the tensor engine. Used as the reference oracle
/// by the unit tests, the `selftest` command, and the acceptance suite.
pub fn brute_force_attention(layer: &RelTemporalLayer, x: &[f64], t: usize) -> Vec<f64> {
    let d = layer.d_model;
    let (wq, bq) = (layer.wq.values(), layer.bq.values());
    let (wk, bk) = (layer.wk.values(), layer.bk.values());
    let (wv, bv) = (layer.wv.values(), layer.bv.values());
    let proj = |w: &[f64], b: &[f64], row: &[f64], act: bool| -> Vec<f64> {
        (0..d)
            .map(|c| {
                let s = b[c] + (0..d).map(|k| row[k] * w[k * d + c]).sum::<f64>();
                if act {
                    elu1_scalar(s)
                } else {
                    s
                }
            })
            .collect()
    };
    let rows: Vec<&[f64]> = (0..t).map(|i| &x[i * d..(i + 1) * d]).collect();
    let theta: Vec<Vec<f64>> = rows.iter().map(|r| proj(&wq, &bq, r, true)).collect();
    let rho: Vec<Vec<f64>> = rows.iter().map(|r| proj(&wk, &bk, r, true)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| proj(&wv, &bv, r, false)).collect();
    let hd = layer.head_dim;
    // explicit per-pair rotation, written out independently of rope_rotate
    let rot = |slice: &[f64], pos: usize| -> Vec<f64> {
        let mut out = vec![0.0; hd];
        for m in 0..hd / 2 {
            let ang = pos as f64 * layer.rope_base.powf(-((2 * m) as f64) / hd as f64);
            let (s, c) = (ang.sin(), ang.cos());
            out[2 * m] = c * slice[2 * m] - s * slice[2 * m + 1];
            out[2 * m + 1] = s * slice[2 * m] + c * slice[2 * m + 1];
        }
        out
    };
    let mut out = vec![0.0; t * d];
    for j in 0..t {
        for h in 0..layer.heads {
            let off = h * hd;
            let th_j = rot(&theta[j][off..off + hd], j);
            let lo = j.saturating_sub(layer.ws);
            let mut num = vec![0.0; hd];
            let mut den = 0.0;
            for i in lo..=j {
                let rh_i = rot(&rho[i][off..off + hd], i);
                let w_num: f64 = th_j.iter().zip(&rh_i).map(|(a, b)| a * b).sum();
                den += theta[j][off..off + hd]
                    .iter()
                    .zip(&rho[i][off..off + hd])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                for c in 0..hd {
                    num[c] += w_num * v[i][off + c];
                }
            }
            for c in 0..hd {
                out[j * d + off + c] = num[c] / (den + DENOM_EPS);
            }
        }
    }
    out
}
