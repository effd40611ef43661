//! Parameterised layers over [`ParamStore`]. Each layer only records
//! parameter ids; values live in the store and are bound per tape.

use crate::error::Result;
use crate::numerics::{Bound, ConvSpec, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Fan-in scaled normal initialisation.
pub(crate) fn init_normal(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f32) -> Tensor {
    let std = gain / (fan_in.max(1) as f32).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.normal() * std)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), init_normal(rng, &[inp, out], inp, 1.0));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([out])));
        Linear { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([inp, out]));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([out])));
        Linear { w, b }
    }

    /// `x` is `n x inp`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        spec: ConvSpec,
        gain: f32,
    ) -> Self {
        let cin = inp / spec.groups;
        let fan_in = cin * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            init_normal(rng, &[out, cin, kernel, kernel], fan_in, gain),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros([out]));
        Conv2d { w, b: Some(b), spec }
    }

    /// Conv whose weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, inp: usize, out: usize, kernel: usize, spec: ConvSpec) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::zeros([out, inp / spec.groups, kernel, kernel]),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros([out]));
        Conv2d { w, b: Some(b), spec }
    }

    /// `channels x channels` conv that passes its input through unchanged.
    pub fn identity(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Self {
        let mut w = Tensor::zeros([channels, channels, kernel, kernel]);
        let mid = kernel / 2;
        for c in 0..channels {
            w.data_mut()[((c * channels + c) * kernel + mid) * kernel + mid] = 1.0;
        }
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros([channels]));
        Conv2d {
            w,
            b: Some(b),
            spec: ConvSpec::same(kernel),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.spec)
    }
}

/// Layer norm over the last axis with a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), Tensor::ones([dim])),
            shift: store.add(format!("{name}.b"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, Self::EPS)?;
        let y = tape.mul(y, p.var(self.gain))?;
        tape.add(y, p.var(self.shift))
    }

    /// Normalises the channel axis of an `N x C x H x W` map.
    pub fn forward_nchw(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(tape, p, y)?;
        tape.permute(y, &[0, 3, 1, 2])
    }
}

/// Scaled dot-product attention over `L x D` inputs split into `heads`
/// column groups. `mask` is `L x L` row-major, `true` = may attend.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let p = tape.softmax(scores, mask)?;
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    tape.concat(&outs, 1)
}
