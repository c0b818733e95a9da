//! Recurrent attention network: value encoder, location encoder, fusion
//! layer, tanh recurrent core and three heads (location, classification,
//! baseline), with exact forward semantics and backpropagation through
//! time.
//!
//! Layer shapes default to 16→128 (value), 2→128 (location),
//! 256→256 (fusion), 256-wide recurrent core, and 256→2 / 256→1 / 256→1
//! heads. All arithmetic is `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Dot product with eight independent accumulators so the loop vectorizes.
/// Summation order is fixed, so results are reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Affine layer `y = W·x + b`, `W` row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| self.bias[o] + dot(self.row(o), x))
            .collect()
    }

    /// Accumulates parameter gradients for upstream gradient `dy` at input
    /// `x` into `grad`; returns `dL/dx` when `want_dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, want_dx: bool) -> Option<Vec<f64>> {
        let mut dx = want_dx.then(|| vec![0.0; self.in_dim]);
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            axpy(g, x, &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim]);
            if let Some(dx) = dx.as_mut() {
                axpy(g, self.row(o), dx);
            }
        }
        dx
    }

    /// `dx += Wᵀ·dy`.
    pub fn add_input_grad(&self, dy: &[f64], dx: &mut [f64]) {
        for (o, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, self.row(o), dx);
            }
        }
    }

    /// Adds `Σ_s dy_s·x_sᵀ` to the weights and `Σ_s dy_s` to the bias,
    /// treating `self` as a gradient buffer.
    pub fn accumulate<X: AsRef<[f64]>, D: AsRef<[f64]>>(&mut self, xs: &[X], dys: &[D]) {
        self.accumulate_weights(xs, dys);
        for dy in dys {
            for (b, g) in self.bias.iter_mut().zip(dy.as_ref()) {
                *b += g;
            }
        }
    }

    pub fn accumulate_weights<X: AsRef<[f64]>, D: AsRef<[f64]>>(&mut self, xs: &[X], dys: &[D]) {
        debug_assert_eq!(xs.len(), dys.len());
        let in_dim = self.in_dim;
        for (o, row) in self.weight.chunks_exact_mut(in_dim).enumerate() {
            for (x, dy) in xs.iter().zip(dys) {
                let g = dy.as_ref()[o];
                if g != 0.0 {
                    axpy(g, x.as_ref(), row);
                }
            }
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let mut d = Self::zeros(in_dim, out_dim);
        d.init(rng);
        d
    }

    fn init(&mut self, rng: &mut impl rand::Rng) {
        let a = glorot_bound(self.in_dim, self.out_dim);
        for w in &mut self.weight {
            *w = rng.random_range(-a..=a);
        }
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `h_t = tanh(W_h·h_{t−1} + W_x·x_t + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCore {
    pub hidden: Dense,
    pub input: Dense,
}

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub patch: usize,
    pub value: usize,
    pub location: usize,
    pub fused: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            patch: 16,
            value: 128,
            location: 128,
            fused: 256,
            hidden: 256,
        }
    }
}

pub const LOC_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub value_encoder: Dense,
    pub loc_encoder: Dense,
    pub fusion: Dense,
    pub core: RecurrentCore,
    pub loc_head: Dense,
    pub class_head: Dense,
    pub baseline_head: Dense,
}

/// Borrowed view of one named parameter array.
pub struct ParamGroup<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamGroupMut<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

const GROUP_NAMES: [(&str, &str); 8] = [
    ("value_encoder.weight", "value_encoder.bias"),
    ("loc_encoder.weight", "loc_encoder.bias"),
    ("fusion.weight", "fusion.bias"),
    ("core.hidden.weight", "core.bias"),
    ("core.input.weight", ""),
    ("loc_head.weight", "loc_head.bias"),
    ("class_head.weight", "class_head.bias"),
    ("baseline_head.weight", "baseline_head.bias"),
];

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            value_encoder: Dense::zeros(dims.patch, dims.value),
            loc_encoder: Dense::zeros(LOC_DIM, dims.location),
            fusion: Dense::zeros(dims.value + dims.location, dims.fused),
            core: RecurrentCore {
                hidden: Dense::zeros(dims.hidden, dims.hidden),
                // Carries no bias of its own; `core.hidden.bias` is the core's b.
                input: Dense::zeros(dims.fused, dims.hidden),
            },
            loc_head: Dense::zeros(dims.hidden, LOC_DIM),
            class_head: Dense::zeros(dims.hidden, 1),
            baseline_head: Dense::zeros(dims.hidden, 1),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    fn layers(&self) -> [&Dense; 8] {
        [
            &self.value_encoder,
            &self.loc_encoder,
            &self.fusion,
            &self.core.hidden,
            &self.core.input,
            &self.loc_head,
            &self.class_head,
            &self.baseline_head,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 8] {
        [
            &mut self.value_encoder,
            &mut self.loc_encoder,
            &mut self.fusion,
            &mut self.core.hidden,
            &mut self.core.input,
            &mut self.loc_head,
            &mut self.class_head,
            &mut self.baseline_head,
        ]
    }

    /// Named parameter arrays in canonical order. The recurrent input
    /// projection has no trainable bias and contributes only its weight.
    pub fn groups(&self) -> Vec<ParamGroup<'_>> {
        let mut out = Vec::with_capacity(15);
        for ((wn, bn), layer) in GROUP_NAMES.into_iter().zip(self.layers()) {
            out.push(ParamGroup {
                name: wn,
                shape: vec![layer.out_dim, layer.in_dim],
                data: &layer.weight,
            });
            if !bn.is_empty() {
                out.push(ParamGroup {
                    name: bn,
                    shape: vec![layer.out_dim],
                    data: &layer.bias,
                });
            }
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<ParamGroupMut<'_>> {
        let mut out = Vec::with_capacity(15);
        for ((wn, bn), layer) in GROUP_NAMES.into_iter().zip(self.layers_mut()) {
            let shape_w = vec![layer.out_dim, layer.in_dim];
            let shape_b = vec![layer.out_dim];
            out.push(ParamGroupMut {
                name: wn,
                shape: shape_w,
                data: &mut layer.weight,
            });
            if !bn.is_empty() {
                out.push(ParamGroupMut {
                    name: bn,
                    shape: shape_b,
                    data: &mut layer.bias,
                });
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|g| g.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Checks every layer against `dims`.
    pub fn check_dims(&self) -> Result<()> {
        let d = self.dims;
        let expect = [
            ("value_encoder", d.patch, d.value),
            ("loc_encoder", LOC_DIM, d.location),
            ("fusion", d.value + d.location, d.fused),
            ("core.hidden", d.hidden, d.hidden),
            ("core.input", d.fused, d.hidden),
            ("loc_head", d.hidden, LOC_DIM),
            ("class_head", d.hidden, 1),
            ("baseline_head", d.hidden, 1),
        ];
        for ((name, i, o), layer) in expect.into_iter().zip(self.layers()) {
            if layer.in_dim != i
                || layer.out_dim != o
                || layer.weight.len() != i * o
                || layer.bias.len() != o
            {
                return Err(Error::Shape {
                    group: name.to_string(),
                    expected: vec![o, i],
                    found: vec![layer.out_dim, layer.in_dim],
                });
            }
        }
        Ok(())
    }

    /// `self += scale · other`, group by group.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) -> Result<()> {
        let theirs = other.groups();
        let mut mine = self.groups_mut();
        if mine.len() != theirs.len() {
            return Err(Error::param("parameter group count differs"));
        }
        for (m, t) in mine.iter_mut().zip(&theirs) {
            if m.shape != t.shape {
                return Err(Error::Shape {
                    group: m.name.to_string(),
                    expected: m.shape.clone(),
                    found: t.shape.clone(),
                });
            }
            axpy(scale, t.data, m.data);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.groups_mut() {
            g.data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Weights uniform in `[−a, a]` with `a = √(6/(fan_in+fan_out))` per
/// weight matrix; biases start at zero. Deterministic in `seed`.
pub fn init_params_with(dims: ModelDims, seed: u64) -> ModelParams {
    let mut p = ModelParams::zeros(dims);
    for (i, layer) in p.layers_mut().into_iter().enumerate() {
        let mut rng = rng_from(derive_seed(seed, &[0x494e, i as u64]));
        layer.init(&mut rng);
    }
    p
}

pub fn init_params(seed: u64) -> ModelParams {
    init_params_with(ModelDims::default(), seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub t: usize,
}

impl HiddenState {
    pub fn zero(dim: usize) -> Self {
        Self {
            h: vec![0.0; dim],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetOutputs {
    /// Normalized `[f, α]` in `[−1, 1]²`.
    pub loc_mean: [f64; 2],
    pub class_logit: f64,
    pub class_prob: f64,
    pub baseline: f64,
}

pub fn encode_value(params: &ModelParams, patch: &[f64]) -> Vec<f64> {
    params.value_encoder.forward(patch).into_iter().map(relu).collect()
}

pub fn encode_location(params: &ModelParams, loc: &[f64; 2]) -> Vec<f64> {
    params.loc_encoder.forward(loc).into_iter().map(relu).collect()
}

pub fn fuse(params: &ModelParams, v: &[f64], s: &[f64]) -> Vec<f64> {
    let mut cat = Vec::with_capacity(v.len() + s.len());
    cat.extend_from_slice(v);
    cat.extend_from_slice(s);
    params.fusion.forward(&cat).into_iter().map(relu).collect()
}

fn core_pre(params: &ModelParams, h_prev: &[f64], x: &[f64]) -> Vec<f64> {
    let mut pre = params.core.hidden.forward(h_prev);
    let wx = params.core.input.forward(x);
    for (p, w) in pre.iter_mut().zip(wx) {
        *p += w;
    }
    pre
}

pub fn rnn_step(params: &ModelParams, h_prev: &HiddenState, fused: &[f64]) -> HiddenState {
    HiddenState {
        h: core_pre(params, &h_prev.h, fused)
            .into_iter()
            .map(f64::tanh)
            .collect(),
        t: h_prev.t + 1,
    }
}

pub fn heads(params: &ModelParams, h: &HiddenState) -> NetOutputs {
    let loc = params.loc_head.forward(&h.h);
    let class_logit = params.class_head.forward(&h.h)[0];
    NetOutputs {
        loc_mean: [loc[0].tanh(), loc[1].tanh()],
        class_logit,
        class_prob: logistic(class_logit),
        baseline: params.baseline_head.forward(&h.h)[0],
    }
}

/// Activations of one step, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub patch: Vec<f64>,
    pub loc: [f64; 2],
    pub value: Vec<f64>,
    pub location: Vec<f64>,
    pub fused: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub h: Vec<f64>,
    pub out: NetOutputs,
}

/// One glimpse: encode `(patch, loc)`, advance the core, evaluate heads.
pub fn step(params: &ModelParams, h_prev: &HiddenState, patch: &[f64], loc: [f64; 2]) -> (HiddenState, StepTrace) {
    let value = encode_value(params, patch);
    let location = encode_location(params, &loc);
    let fused = fuse(params, &value, &location);
    let h = rnn_step(params, h_prev, &fused);
    let out = heads(params, &h);
    let trace = StepTrace {
        patch: patch.to_vec(),
        loc,
        value,
        location,
        fused,
        h_prev: h_prev.h.clone(),
        h: h.h.clone(),
        out,
    };
    (h, trace)
}

/// Loss derivatives with respect to one step's head outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeadGrad {
    pub d_loc_mean: [f64; 2],
    pub d_class_logit: f64,
    pub d_baseline: f64,
}

/// Backpropagation through time over an episode. `head_grads[t]` applies to
/// the outputs of `traces[t]`; parameter gradients are added into `grad`.
pub fn backprop_episode(params: &ModelParams, traces: &[StepTrace], head_grads: &[HeadGrad], grad: &mut ModelParams) {
    assert_eq!(traces.len(), head_grads.len());
    let n = traces.len();
    // Upstream gradients per step and layer; weight gradients are applied
    // afterwards in one pass per layer.
    let mut d_loc = Vec::with_capacity(n);
    let mut d_class = Vec::with_capacity(n);
    let mut d_base = Vec::with_capacity(n);
    let mut d_core = Vec::with_capacity(n);
    let mut d_fusion = Vec::with_capacity(n);
    let mut d_val = Vec::with_capacity(n);
    let mut d_locenc = Vec::with_capacity(n);
    let mut cats = Vec::with_capacity(n);
    let mut dh_next = vec![0.0; params.dims.hidden];
    for (tr, hg) in traces.iter().zip(head_grads).rev() {
        let mut dh = std::mem::take(&mut dh_next);
        let dl: Vec<f64> = (0..LOC_DIM)
            .map(|k| hg.d_loc_mean[k] * (1.0 - tr.out.loc_mean[k].powi(2)))
            .collect();
        params.loc_head.add_input_grad(&dl, &mut dh);
        params.class_head.add_input_grad(&[hg.d_class_logit], &mut dh);
        params.baseline_head.add_input_grad(&[hg.d_baseline], &mut dh);

        let d_pre: Vec<f64> = dh.iter().zip(&tr.h).map(|(d, h)| d * (1.0 - h * h)).collect();
        dh_next = vec![0.0; params.dims.hidden];
        params.core.hidden.add_input_grad(&d_pre, &mut dh_next);
        let mut d_fused = vec![0.0; params.dims.fused];
        params.core.input.add_input_grad(&d_pre, &mut d_fused);

        let d_fused_pre: Vec<f64> = d_fused
            .iter()
            .zip(&tr.fused)
            .map(|(d, f)| if *f > 0.0 { *d } else { 0.0 })
            .collect();
        let mut d_cat = vec![0.0; params.dims.value + params.dims.location];
        params.fusion.add_input_grad(&d_fused_pre, &mut d_cat);
        let (d_value, d_location) = d_cat.split_at(tr.value.len());
        let gate = |d: &[f64], a: &[f64]| -> Vec<f64> {
            d.iter().zip(a).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect()
        };
        d_val.push(gate(d_value, &tr.value));
        d_locenc.push(gate(d_location, &tr.location));
        let mut cat = Vec::with_capacity(tr.value.len() + tr.location.len());
        cat.extend_from_slice(&tr.value);
        cat.extend_from_slice(&tr.location);
        cats.push(cat);
        d_loc.push(dl);
        d_class.push(vec![hg.d_class_logit]);
        d_base.push(vec![hg.d_baseline]);
        d_core.push(d_pre);
        d_fusion.push(d_fused_pre);
    }
    // Step-major inputs in the same reversed order as the gradients above.
    let rev = |f: fn(&StepTrace) -> &[f64]| -> Vec<&[f64]> { traces.iter().rev().map(f).collect() };
    let hs = rev(|t| &t.h);
    grad.loc_head.accumulate(&hs, &d_loc);
    grad.class_head.accumulate(&hs, &d_class);
    grad.baseline_head.accumulate(&hs, &d_base);
    grad.core.hidden.accumulate(&rev(|t| &t.h_prev), &d_core);
    grad.core.input.accumulate_weights(&rev(|t| &t.fused), &d_core);
    let cat_refs: Vec<&[f64]> = cats.iter().map(Vec::as_slice).collect();
    grad.fusion.accumulate(&cat_refs, &d_fusion);
    grad.value_encoder.accumulate(&rev(|t| &t.patch), &d_val);
    grad.loc_encoder.accumulate(&rev(|t| &t.loc), &d_locenc);
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCFATTN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    /// Versioned binary container: magic, version, group count, then per
    /// group `(name, shape, row-major little-endian f64 data)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.num_params() + 1024);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let groups = self.groups();
        out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
        for g in groups {
            out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
            out.extend_from_slice(g.name.as_bytes());
            out.extend_from_slice(&(g.shape.len() as u32).to_le_bytes());
            for d in &g.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in g.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::format("checkpoint", "truncated"));
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = u32_at(take(4)?) as usize;
        let mut parsed: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32_at(take(4)?) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "group name is not UTF-8"))?;
            let ndim = u32_at(take(4)?) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let b = take(8)?;
                shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
            }
            let len: usize = shape.iter().product();
            let raw = take(len.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "shape overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            parsed.push((name, shape, data));
        }
        if !cur.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let find = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>)> {
            parsed
                .iter()
                .find(|g| g.0 == name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing group {name}")))
        };
        let dim = |name: &str, axis: usize| -> Result<usize> {
            find(name)?
                .1
                .get(axis)
                .copied()
                .ok_or_else(|| Error::format("checkpoint", format!("group {name} has too few axes")))
        };
        let dims = ModelDims {
            patch: dim("value_encoder.weight", 1)?,
            value: dim("value_encoder.weight", 0)?,
            location: dim("loc_encoder.weight", 0)?,
            fused: dim("fusion.weight", 0)?,
            hidden: dim("core.hidden.weight", 0)?,
        };
        let mut params = ModelParams::zeros(dims);
        if parsed.len() != params.groups().len() {
            return Err(Error::format("checkpoint", "unexpected group count"));
        }
        for g in params.groups_mut() {
            let (_, shape, data) = find(g.name)?;
            if *shape != g.shape {
                return Err(Error::Shape {
                    group: g.name.to_string(),
                    expected: g.shape.clone(),
                    found: shape.clone(),
                });
            }
            g.data.copy_from_slice(data);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn tiny() -> ModelDims {
        ModelDims {
            patch: 16,
            value: 6,
            location: 5,
            fused: 7,
            hidden: 6,
        }
    }

    fn randomized(dims: ModelDims, seed: u64) -> ModelParams {
        let mut p = init_params_with(dims, seed);
        let mut rng = rng_from(seed ^ 0xb1a5);
        for g in p.groups_mut() {
            if g.name.ends_with("bias") {
                g.data.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
            }
        }
        p
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite differences of `f` with respect to every entry of
    /// every group, compared with `analytic`.
    fn check_all(params: &ModelParams, analytic: &ModelParams, h: f64, tol: f64, f: impl Fn(&ModelParams) -> f64) {
        let n_groups = params.groups().len();
        for gi in 0..n_groups {
            let len = params.groups()[gi].data.len();
            for i in 0..len {
                let mut plus = params.clone();
                plus.groups_mut()[gi].data[i] += h;
                let mut minus = params.clone();
                minus.groups_mut()[gi].data[i] -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let a = analytic.groups()[gi].data[i];
                let name = params.groups()[gi].name;
                assert!(
                    rel_err(a, numeric) < tol,
                    "{name}[{i}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_encodings() {
        let p = ModelParams::zeros(ModelDims::default());
        assert!(encode_value(&p, &[0.7; 16]).iter().all(|&v| v == 0.0));
        assert!(encode_location(&p, &[0.3, -0.2]).iter().all(|&v| v == 0.0));
        let f = fuse(&p, &[0.0; 128], &[0.0; 128]);
        assert_eq!(f.len(), 256);
        assert!(f.iter().all(|&v| v == 0.0));
        let h = rnn_step(&p, &HiddenState::zero(256), &[1.0; 256]);
        assert_eq!(h.h.len(), 256);
        assert!(h.h.iter().all(|&v| v == 0.0));
        assert_eq!(h.t, 1);
        let out = heads(&p, &h);
        assert_eq!(out.loc_mean, [0.0, 0.0]);
        assert_eq!(out.class_prob, 0.5);
        assert_eq!(out.baseline, 0.0);
    }

    #[test]
    fn relu_clips_identity_layer_with_negative_bias() {
        let mut p = ModelParams::zeros(ModelDims::default());
        for i in 0..16 {
            p.value_encoder.weight[i * 16 + i] = 1.0;
        }
        p.value_encoder.bias.iter_mut().for_each(|b| *b = -1.0);
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
        let v = encode_value(&p, &x);
        for i in 0..16 {
            assert_eq!(v[i], (x[i] - 1.0).max(0.0));
        }
        assert!(v[16..].iter().all(|&z| z == 0.0));

        p.loc_encoder.weight[0] = 1.0;
        p.loc_encoder.weight[3] = 1.0;
        p.loc_encoder.bias.iter_mut().for_each(|b| *b = -1.0);
        let s = encode_location(&p, &[1.0, 1.0]);
        assert_eq!(&s[..2], &[0.0, 0.0]);
        let s = encode_location(&p, &[3.0, 2.5]);
        assert_eq!(&s[..2], &[2.0, 1.5]);
    }

    #[test]
    fn default_dims_conform() {
        let p = init_params(1);
        p.check_dims().unwrap();
        assert_eq!(p.value_encoder.out_dim, 128);
        assert_eq!(p.loc_encoder.out_dim, 128);
        assert_eq!(p.fusion.out_dim, 256);
        assert_eq!(p.core.hidden.out_dim, 256);
        let out = heads(&p, &HiddenState::zero(256));
        assert_eq!((out.loc_mean.len(), 1, 1), (2, 1, 1));
        assert_eq!(p.loc_head.out_dim, 2);
        assert_eq!(p.class_head.out_dim, 1);
        assert_eq!(p.baseline_head.out_dim, 1);
        let mut broken = p.clone();
        broken.fusion.in_dim = 100;
        assert!(broken.check_dims().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(9);
        assert_eq!(a, init_params(9));
        assert_ne!(a, init_params(10));
        for layer in a.layers() {
            let bound = glorot_bound(layer.in_dim, layer.out_dim);
            assert!(layer.weight.iter().all(|w| w.abs() <= bound));
        }
        // 128x256 fusion-shaped layer: variance of U(-a, a) is a²/3.
        let dims = ModelDims {
            value: 128,
            location: 128,
            fused: 128,
            ..ModelDims::default()
        };
        let p = init_params_with(dims, 3);
        let w = &p.fusion.weight;
        assert_eq!(w.len(), 128 * 256);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let a = glorot_bound(256, 128);
        assert!((var / (a * a / 3.0) - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let dims = tiny();
        let p = randomized(dims, 4);
        let patch = rand_vec(16, 5);
        let loc = [0.3, -0.6];
        for out_idx in 0..dims.value {
            let mut g = p.zeros_like();
            let pre = p.value_encoder.forward(&patch);
            let mut dy = vec![0.0; dims.value];
            dy[out_idx] = if pre[out_idx] > 0.0 { 1.0 } else { 0.0 };
            p.value_encoder.backward(&patch, &dy, &mut g.value_encoder, false);
            check_all(&p, &g, 1e-4, 1e-5, |q| encode_value(q, &patch)[out_idx]);
        }
        for out_idx in 0..dims.location {
            let mut g = p.zeros_like();
            let pre = p.loc_encoder.forward(&loc);
            let mut dy = vec![0.0; dims.location];
            dy[out_idx] = if pre[out_idx] > 0.0 { 1.0 } else { 0.0 };
            p.loc_encoder.backward(&loc, &dy, &mut g.loc_encoder, false);
            check_all(&p, &g, 1e-4, 1e-5, |q| encode_location(q, &loc)[out_idx]);
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let dims = tiny();
        let p = randomized(dims, 6);
        let v = rand_vec(dims.value, 7).iter().map(|x| x.abs()).collect::<Vec<_>>();
        let s = rand_vec(dims.location, 8).iter().map(|x| x.abs()).collect::<Vec<_>>();
        let cat: Vec<f64> = v.iter().chain(&s).copied().collect();
        for out_idx in 0..dims.fused {
            let mut g = p.zeros_like();
            let pre = p.fusion.forward(&cat);
            let mut dy = vec![0.0; dims.fused];
            dy[out_idx] = if pre[out_idx] > 0.0 { 1.0 } else { 0.0 };
            p.fusion.backward(&cat, &dy, &mut g.fusion, false);
            check_all(&p, &g, 1e-4, 1e-5, |q| fuse(q, &v, &s)[out_idx]);
        }
    }

    #[test]
    fn core_jacobian_wrt_previous_state() {
        let dims = tiny();
        let p = randomized(dims, 11);
        let h_prev = HiddenState {
            h: rand_vec(dims.hidden, 12).iter().map(|x| x * 0.9).collect(),
            t: 0,
        };
        let x = rand_vec(dims.fused, 13);
        let h = rnn_step(&p, &h_prev, &x);
        for out_idx in 0..dims.hidden {
            let mut d_pre = vec![0.0; dims.hidden];
            d_pre[out_idx] = 1.0 - h.h[out_idx].powi(2);
            let mut scratch = p.zeros_like();
            let row = p.core.hidden.backward(&h_prev.h, &d_pre, &mut scratch.core.hidden, true).unwrap();
            for j in 0..dims.hidden {
                let eps = 1e-4;
                let mut a = h_prev.clone();
                a.h[j] += eps;
                let mut b = h_prev.clone();
                b.h[j] -= eps;
                let numeric = (rnn_step(&p, &a, &x).h[out_idx] - rnn_step(&p, &b, &x).h[out_idx]) / (2.0 * eps);
                assert!(rel_err(row[j], numeric) < 1e-5, "dh[{out_idx}]/dh_prev[{j}]");
            }
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let dims = tiny();
        let p = randomized(dims, 21);
        let h = HiddenState {
            h: rand_vec(dims.hidden, 22),
            t: 1,
        };
        let trace_for = |q: &ModelParams| heads(q, &h);
        let out = trace_for(&p);
        let cases: [(HeadGrad, Box<dyn Fn(&NetOutputs) -> f64>); 4] = [
            (
                HeadGrad {
                    d_loc_mean: [1.0, 0.0],
                    ..Default::default()
                },
                Box::new(|o| o.loc_mean[0]),
            ),
            (
                HeadGrad {
                    d_loc_mean: [0.0, 1.0],
                    ..Default::default()
                },
                Box::new(|o| o.loc_mean[1]),
            ),
            (
                HeadGrad {
                    d_class_logit: out.class_prob * (1.0 - out.class_prob),
                    ..Default::default()
                },
                Box::new(|o| o.class_prob),
            ),
            (
                HeadGrad {
                    d_baseline: 1.0,
                    ..Default::default()
                },
                Box::new(|o| o.baseline),
            ),
        ];
        for (hg, f) in cases {
            let mut g = p.zeros_like();
            let d_loc: Vec<f64> = (0..2).map(|k| hg.d_loc_mean[k] * (1.0 - out.loc_mean[k].powi(2))).collect();
            p.loc_head.backward(&h.h, &d_loc, &mut g.loc_head, false);
            p.class_head.backward(&h.h, &[hg.d_class_logit], &mut g.class_head, false);
            p.baseline_head.backward(&h.h, &[hg.d_baseline], &mut g.baseline_head, false);
            check_all(&p, &g, 1e-4, 1e-5, |q| f(&trace_for(q)));
        }
    }

    #[test]
    fn bptt_matches_finite_differences_on_unrolled_loss() {
        let dims = tiny();
        let p = randomized(dims, 31);
        let patches: Vec<Vec<f64>> = (0..3).map(|t| rand_vec(16, 40 + t).iter().map(|x| x.abs()).collect()).collect();
        let locs = [[0.1, -0.4], [-0.7, 0.2], [0.5, 0.9]];
        let coeffs = [[0.3, -0.2, 0.5, 0.7], [-0.4, 0.6, -0.1, 0.2], [0.9, 0.1, 1.3, -0.5]];
        let loss = |q: &ModelParams| -> f64 {
            let mut h = HiddenState::zero(dims.hidden);
            let mut total = 0.0;
            for t in 0..3 {
                let (h2, tr) = step(q, &h, &patches[t], locs[t]);
                h = h2;
                let c = coeffs[t];
                total += c[0] * tr.out.loc_mean[0] + c[1] * tr.out.loc_mean[1] + c[2] * tr.out.class_logit + c[3] * tr.out.baseline;
            }
            total
        };
        let mut h = HiddenState::zero(dims.hidden);
        let mut traces = Vec::new();
        for t in 0..3 {
            let (h2, tr) = step(&p, &h, &patches[t], locs[t]);
            h = h2;
            traces.push(tr);
        }
        let hgs: Vec<HeadGrad> = coeffs
            .iter()
            .map(|c| HeadGrad {
                d_loc_mean: [c[0], c[1]],
                d_class_logit: c[2],
                d_baseline: c[3],
            })
            .collect();
        let mut g = p.zeros_like();
        backprop_episode(&p, &traces, &hgs, &mut g);
        check_all(&p, &g, 1e-5, 1e-4, loss);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let p = randomized(tiny(), 50);
        let bytes = p.to_bytes();
        let q = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        assert_eq!(q, p);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&bad), Err(Error::Format { .. })));
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(ModelParams::from_bytes(&wrong_version).is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let p = init_params(3);
        let patch = rand_vec(16, 1);
        let (h1, t1) = step(&p, &HiddenState::zero(256), &patch, [0.2, 0.3]);
        let (h2, t2) = step(&p, &HiddenState::zero(256), &patch, [0.2, 0.3]);
        assert_eq!(h1, h2);
        assert_eq!(t1.out, t2.out);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn outputs_stay_bounded(
            seed in 0u64..1000,
            scale in prop::sample::select(vec![0.1f64, 1.0, 10.0, 1e3]),
            loc in prop::array::uniform2(-1.0f64..1.0),
        ) {
            let dims = tiny();
            let p = randomized(dims, seed);
            let patch: Vec<f64> = rand_vec(16, seed + 1).iter().map(|v| v * scale).collect();
            let mut h = HiddenState::zero(dims.hidden);
            for _ in 0..4 {
                let (h2, tr) = step(&p, &h, &patch, loc);
                h = h2;
                prop_assert!(h.h.iter().all(|v| (-1.0..=1.0).contains(v)));
                prop_assert!(tr.out.loc_mean.iter().all(|v| (-1.0..=1.0).contains(v)));
                prop_assert!(tr.out.class_prob >= 0.0 && tr.out.class_prob <= 1.0);
                prop_assert!(tr.out.baseline.is_finite());
            }
        }
    }
}
