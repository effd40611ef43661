//! Multi-scale residual VQ autoencoder: conv encoder, a codebook shared by
//! every scale, and a conv decoder that can host spatial-spectral attention.

use crate::error::{Error, Result};
use crate::hsidata::Cube;
use crate::metrics::ssim_tape;
use crate::nn::{multi_head_attention, Conv2d, LayerNorm, Linear};
use crate::numerics::{Bound, ConvSpec, Interp, PadMode, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Spatial downsampling factor of the encoder.
pub const STRIDE: usize = 4;

const GELU_GAIN: f32 = std::f32::consts::SQRT_2;

/// Side lengths `h_1 < ... < h_K` of the token maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSchedule(Vec<usize>);

impl ScaleSchedule {
    pub fn new(sides: Vec<usize>) -> Result<Self> {
        if sides.is_empty() || sides[0] == 0 || sides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "schedule {sides:?} must be non-empty, positive and strictly increasing"
            )));
        }
        Ok(ScaleSchedule(sides))
    }

    pub fn sides(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.0.last().unwrap()
    }

    /// Total token count `sum h_k^2`.
    pub fn tokens(&self) -> usize {
        self.0.iter().map(|h| h * h).sum()
    }

    pub fn truncated(&self, k: usize) -> Result<Self> {
        Self::new(self.0[..k.min(self.0.len())].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqConfig {
    pub bands: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub schedule: ScaleSchedule,
    pub enc_width: usize,
    pub dec_width: usize,
    pub ssa_heads: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            bands: 8,
            latent_channels: 16,
            codebook_size: 64,
            schedule: ScaleSchedule::new(vec![1, 2, 4, 8]).unwrap(),
            enc_width: 32,
            dec_width: 64,
            ssa_heads: 2,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if self.bands == 0 || self.latent_channels == 0 || self.enc_width == 0 {
            return Err(Error::Config("bands, latent_channels and enc_width must be positive".into()));
        }
        if self.dec_width < 2 || !self.dec_width.is_multiple_of(2 * self.ssa_heads.max(1)) {
            return Err(Error::Config(format!(
                "dec_width {} must be even and divisible by ssa_heads {}",
                self.dec_width, self.ssa_heads
            )));
        }
        Ok(())
    }

    /// Cube side that this configuration encodes to `h_K`.
    pub fn image_side(&self) -> usize {
        self.schedule.last() * STRIDE
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    convs: [Conv2d; 4],
    bands: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: &VqConfig) -> Self {
        let w = cfg.enc_width;
        let s3 = ConvSpec::same(3);
        Encoder {
            convs: [
                Conv2d::new(store, rng, &format!("{prefix}.c1"), cfg.bands, w, 3, s3, GELU_GAIN),
                Conv2d::new(store, rng, &format!("{prefix}.c2"), w, 2 * w, 3, s3.with_stride(2), GELU_GAIN),
                Conv2d::new(store, rng, &format!("{prefix}.c3"), 2 * w, 2 * w, 3, s3.with_stride(2), GELU_GAIN),
                Conv2d::new(store, rng, &format!("{prefix}.c4"), 2 * w, cfg.latent_channels, 1, ConvSpec::same(1), 1.0),
            ],
            bands: cfg.bands,
        }
    }

    /// `N x C x H x W` cube batch to `N x c x H/4 x W/4` latents.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.bands || !s[2].is_multiple_of(STRIDE) || !s[3].is_multiple_of(STRIDE) {
            return Err(Error::dim(
                "encode",
                format!("input {s:?} needs {} bands and sides divisible by {STRIDE}", self.bands),
            ));
        }
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, p, h)?;
            if i < 3 {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }
}

/// Index of the nearest codeword in Euclidean distance; ties go to the lowest index.
pub fn nearest_codeword(table: &[f32], c: usize, x: &[f32]) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for (m, code) in table.chunks_exact(c).enumerate() {
        let d: f64 = code.iter().zip(x).map(|(&e, &v)| (v as f64 - e as f64).powi(2)).sum();
        if d < best.1 {
            best = (m, d);
        }
    }
    best.0
}

/// Tokens of an `N x c x h x w` map, position-major within each item.
fn tokenize(map: &Tensor, table: &[f32]) -> Vec<usize> {
    let s = map.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut v = vec![0.0f32; c];
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        for p in 0..hw {
            for (ch, slot) in v.iter_mut().enumerate() {
                *slot = map.data()[(i * c + ch) * hw + p];
            }
            out.push(nearest_codeword(table, c, &v));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Quantizer {
    pub codebook: ParamId,
    refine: Vec<Conv2d>,
    schedule: ScaleSchedule,
    latent_channels: usize,
}

/// Tape handles produced by one multi-scale quantization pass.
#[derive(Clone, Debug)]
pub struct QuantTrace {
    pub tokens: Vec<Vec<usize>>,
    /// Per-scale contributions `h_k` at full latent resolution.
    pub contributions: Vec<Var>,
    /// `f_quant` after each scale.
    pub accumulated: Vec<Var>,
    pub f_quant: Var,
    pub f_res: Var,
}

/// Token maps `r_1..r_K` and the latents they reconstruct; batch-major.
#[derive(Clone, Debug)]
pub struct TokenPyramid {
    pub tokens: Vec<Vec<usize>>,
    pub contributions: Vec<Tensor>,
    pub accumulated: Vec<Tensor>,
    pub f_quant: Tensor,
    pub f_res: Tensor,
}

impl TokenPyramid {
    pub fn from_trace(tape: &Tape, t: &QuantTrace) -> Self {
        TokenPyramid {
            tokens: t.tokens.clone(),
            contributions: t.contributions.iter().map(|v| tape.value(*v).clone()).collect(),
            accumulated: t.accumulated.iter().map(|v| tape.value(*v).clone()).collect(),
            f_quant: tape.value(t.f_quant).clone(),
            f_res: tape.value(t.f_res).clone(),
        }
    }
}

impl Quantizer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: &VqConfig) -> Self {
        let (m, c) = (cfg.codebook_size, cfg.latent_channels);
        let codebook = store.add(
            format!("{prefix}.codebook"),
            Tensor::from_fn([m, c], |_| rng.normal() * 0.5),
        );
        let refine = (0..cfg.schedule.len())
            .map(|k| Conv2d::identity(store, &format!("{prefix}.refine{k}"), c, 3))
            .collect();
        Quantizer {
            codebook,
            refine,
            schedule: cfg.schedule.clone(),
            latent_channels: c,
        }
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    /// `h_k` for the given tokens of scale `k`: codeword lookup, bilinear
    /// upsampling to `h_K` and the per-scale refinement conv.
    pub fn contribution(&self, tape: &mut Tape, p: &Bound, k: usize, tokens: &[usize], n: usize) -> Result<Var> {
        let hk = self.schedule.sides()[k];
        if tokens.len() != n * hk * hk {
            return Err(Error::dim(
                "quantize_ms",
                format!("{} tokens for {n} maps of side {hk}", tokens.len()),
            ));
        }
        let big = self.schedule.last();
        let q = tape.gather_rows(p.var(self.codebook), tokens)?;
        let q = tape.reshape(q, &[n, hk, hk, self.latent_channels])?;
        let q = tape.permute(q, &[0, 3, 1, 2])?;
        let up = tape.interpolate_2d(q, big, big, Interp::Bilinear)?;
        self.refine[k].forward(tape, p, up)
    }

    /// Residual quantization over every scale of the schedule.
    pub fn quantize(&self, tape: &mut Tape, p: &Bound, f_latent: Var) -> Result<QuantTrace> {
        let s = tape.shape(f_latent).to_vec();
        let big = self.schedule.last();
        if s.len() != 4 || s[1] != self.latent_channels || s[2] != big || s[3] != big {
            return Err(Error::dim(
                "quantize_ms",
                format!("latent {s:?} does not match {} channels at side {big}", self.latent_channels),
            ));
        }
        let n = s[0];
        let mut f_res = f_latent;
        let mut f_quant: Option<Var> = None;
        let mut trace = QuantTrace {
            tokens: Vec::new(),
            contributions: Vec::new(),
            accumulated: Vec::new(),
            f_quant: f_latent,
            f_res: f_latent,
        };
        for (k, &hk) in self.schedule.sides().iter().enumerate() {
            let down = tape.interpolate_2d(f_res, hk, hk, Interp::Area)?;
            let tokens = tokenize(tape.value(down), p_value(tape, p, self.codebook));
            let h = self.contribution(tape, p, k, &tokens, n)?;
            let acc = match f_quant {
                Some(fq) => tape.add(fq, h)?,
                None => h,
            };
            f_res = tape.sub(f_res, h)?;
            f_quant = Some(acc);
            trace.tokens.push(tokens);
            trace.contributions.push(h);
            trace.accumulated.push(acc);
        }
        trace.f_quant = f_quant.unwrap();
        trace.f_res = f_res;
        Ok(trace)
    }
}

fn p_value<'a>(tape: &'a Tape, p: &Bound, id: ParamId) -> &'a [f32] {
    tape.value(p.var(id)).data()
}

/// Spatial and spectral attention fused as `Spa-A(f) + sigma * Spe-A(f)`.
#[derive(Clone, Debug)]
pub struct SsaLayer {
    spa_norm: LayerNorm,
    spa_qkv: Linear,
    spa_proj: Linear,
    spe_norm: LayerNorm,
    spe_qkv: Linear,
    spe_proj: Linear,
    pub sigma: ParamId,
}

#[derive(Clone, Debug)]
pub struct Ssa {
    pub layers: Vec<SsaLayer>,
    heads: usize,
}

impl Ssa {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, channels: &[usize], heads: usize) -> Self {
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &ch)| {
                let name = |s: &str| format!("{prefix}.{i}.{s}");
                SsaLayer {
                    spa_norm: LayerNorm::new(store, &name("spa_norm"), ch),
                    spa_qkv: Linear::new(store, rng, &name("spa_qkv"), ch, 3 * ch, true),
                    spa_proj: Linear::zeros(store, &name("spa_proj"), ch, ch, true),
                    spe_norm: LayerNorm::new(store, &name("spe_norm"), ch),
                    spe_qkv: Linear::new(store, rng, &name("spe_qkv"), ch, 3 * ch, true),
                    spe_proj: Linear::new(store, rng, &name("spe_proj"), ch, ch, true),
                    sigma: store.add(name("sigma"), Tensor::zeros([1])),
                }
            })
            .collect();
        Ssa { layers, heads }
    }

    /// Applies layer `i` to an `N x Ch x H x W` map.
    pub fn apply(&self, tape: &mut Tape, p: &Bound, i: usize, f: Var) -> Result<Var> {
        let layer = &self.layers[i];
        let s = tape.shape(f).to_vec();
        let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let mut items = Vec::with_capacity(n);
        for b in 0..n {
            let x = tape.slice(f, 0, b, 1)?;
            let x = tape.reshape(x, &[ch, h * w])?;
            let tokens = tape.transpose(x)?;

            let y = layer.spa_norm.forward(tape, p, tokens)?;
            let qkv = layer.spa_qkv.forward(tape, p, y)?;
            let q = tape.slice(qkv, 1, 0, ch)?;
            let k = tape.slice(qkv, 1, ch, ch)?;
            let v = tape.slice(qkv, 1, 2 * ch, ch)?;
            let att = multi_head_attention(tape, q, k, v, self.heads, None)?;
            let att = layer.spa_proj.forward(tape, p, att)?;
            let spa = tape.add(tokens, att)?;

            // Channel-to-channel attention estimated over all pixels.
            let y = layer.spe_norm.forward(tape, p, tokens)?;
            let qkv = layer.spe_qkv.forward(tape, p, y)?;
            let q = tape.slice(qkv, 1, 0, ch)?;
            let k = tape.slice(qkv, 1, ch, ch)?;
            let v = tape.slice(qkv, 1, 2 * ch, ch)?;
            let qt = tape.transpose(q)?;
            let scores = tape.matmul(qt, k)?;
            let scores = tape.scale(scores, 1.0 / (h * w) as f32);
            let a = tape.softmax(scores, None)?;
            let at = tape.transpose(a)?;
            let spe = tape.matmul(v, at)?;
            let spe = layer.spe_proj.forward(tape, p, spe)?;

            let weighted = tape.mul(spe, p.var(layer.sigma))?;
            let fused = tape.add(spa, weighted)?;
            let back = tape.transpose(fused)?;
            items.push(tape.reshape(back, &[1, ch, h, w])?);
        }
        if items.len() == 1 {
            return Ok(items[0]);
        }
        tape.concat(&items, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    c_in: Conv2d,
    c_mid: Conv2d,
    c_up: Conv2d,
    c_out: Conv2d,
    latent_channels: usize,
}

/// Decoder output together with every conv's pre-activation map.
pub struct DecodeTrace {
    pub out: Var,
    pub pre_activations: Vec<Var>,
}

impl Decoder {
    /// Channel widths at the two layers that host SSA.
    pub fn ssa_channels(cfg: &VqConfig) -> Vec<usize> {
        vec![cfg.dec_width, cfg.dec_width]
    }

    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: &VqConfig) -> Self {
        let w = cfg.dec_width;
        let s = ConvSpec::same(3).with_pad_mode(PadMode::Replicate);
        Decoder {
            c_in: Conv2d::new(store, rng, &format!("{prefix}.c_in"), cfg.latent_channels, w, 3, s, GELU_GAIN),
            c_mid: Conv2d::new(store, rng, &format!("{prefix}.c_mid"), w, w, 3, s, GELU_GAIN),
            c_up: Conv2d::new(store, rng, &format!("{prefix}.c_up"), w, w / 2, 3, s, GELU_GAIN),
            c_out: Conv2d::new(store, rng, &format!("{prefix}.c_out"), w / 2, cfg.bands, 3, s, 1.0),
            latent_channels: cfg.latent_channels,
        }
    }

    /// Latent `N x c x h x w` to a sigmoid-bounded `N x C x 4h x 4w` cube batch.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, ssa: Option<&Ssa>) -> Result<DecodeTrace> {
        let s = tape.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.latent_channels {
            return Err(Error::dim(
                "decode",
                format!("latent {s:?} needs {} channels", self.latent_channels),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let mut pre = Vec::with_capacity(4);

        let x = self.c_in.forward(tape, p, z)?;
        pre.push(x);
        let mut x = tape.gelu(x);
        if let Some(ssa) = ssa {
            x = ssa.apply(tape, p, 0, x)?;
        }
        let x = tape.interpolate_2d(x, 2 * h, 2 * w, Interp::Nearest)?;
        let x = self.c_mid.forward(tape, p, x)?;
        pre.push(x);
        let mut x = tape.gelu(x);
        if let Some(ssa) = ssa {
            x = ssa.apply(tape, p, 1, x)?;
        }
        let x = tape.interpolate_2d(x, 4 * h, 4 * w, Interp::Nearest)?;
        let x = self.c_up.forward(tape, p, x)?;
        pre.push(x);
        let x = tape.gelu(x);
        let x = self.c_out.forward(tape, p, x)?;
        pre.push(x);
        Ok(DecodeTrace {
            out: tape.sigmoid(x),
            pre_activations: pre,
        })
    }
}

/// Mean absolute error plus `gamma * (1 - SSIM)`.
pub fn rec_loss(tape: &mut Tape, pred: Var, target: Var, gamma: f32) -> Result<Var> {
    let l1 = tape.l1_loss(pred, target)?;
    if gamma == 0.0 {
        return Ok(l1);
    }
    let s = ssim_tape(tape, pred, target)?;
    let dssim = tape.scale(s, -1.0);
    let dssim = tape.add_scalar(dssim, 1.0);
    let dssim = tape.scale(dssim, gamma);
    tape.add(l1, dssim)
}

pub const CODEBOOK_WEIGHT: f32 = 1.0;
pub const COMMITMENT_WEIGHT: f32 = 0.25;

/// Loss terms of one autoencoder step.
pub struct VqLosses {
    pub total: Var,
    pub rec: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub recon: Var,
    pub trace: QuantTrace,
}

#[derive(Clone, Debug)]
pub struct VqVae {
    pub cfg: VqConfig,
    pub store: ParamStore,
    pub enc: Encoder,
    pub quant: Quantizer,
    pub dec: Decoder,
}

impl VqVae {
    pub fn new(cfg: VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, "enc", &cfg);
        let quant = Quantizer::new(&mut store, &mut rng, "quant", &cfg);
        let dec = Decoder::new(&mut store, &mut rng, "dec", &cfg);
        Ok(VqVae {
            cfg,
            store,
            enc,
            quant,
            dec,
        })
    }

    pub fn losses(&self, tape: &mut Tape, p: &Bound, x: Var, gamma: f32) -> Result<VqLosses> {
        let f_latent = self.enc.forward(tape, p, x)?;
        let trace = self.quant.quantize(tape, p, f_latent)?;
        let fq = trace.f_quant;
        let fl_stop = tape.detach(f_latent);
        let fq_stop = tape.detach(fq);
        let codebook = tape.mse(fq, fl_stop)?;
        let commitment = tape.mse(f_latent, fq_stop)?;
        // straight-through: value of f_quant, gradient of f_latent
        let gap = tape.sub(fq, f_latent)?;
        let gap = tape.detach(gap);
        let dec_in = tape.add(f_latent, gap)?;
        let recon = self.dec.forward(tape, p, dec_in, None)?.out;
        let rec = rec_loss(tape, recon, x, gamma)?;
        let cb = tape.scale(codebook, CODEBOOK_WEIGHT);
        let cm = tape.scale(commitment, COMMITMENT_WEIGHT);
        let total = tape.add(rec, cb)?;
        let total = tape.add(total, cm)?;
        Ok(VqLosses {
            total,
            rec,
            codebook,
            commitment,
            recon,
            trace,
        })
    }

    pub fn encode(&self, cube: &Cube) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(cube.to_nchw());
        let z = self.enc.forward(&mut tape, &p, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn quantize_ms(&self, f_latent: &Tensor) -> Result<TokenPyramid> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let z = tape.constant(f_latent.clone());
        let trace = self.quant.quantize(&mut tape, &p, z)?;
        Ok(TokenPyramid::from_trace(&tape, &trace))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Cube> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let out = self.dec.forward(&mut tape, &p, zv, None)?.out;
        Cube::from_nchw(tape.value(out))
    }

    /// Encode, quantize over all scales and decode `f_quant`.
    pub fn reconstruct(&self, cube: &Cube) -> Result<Cube> {
        let z = self.encode(cube)?;
        let pyr = self.quantize_ms(&z)?;
        self.decode(&pyr.f_quant)
    }
}

/// A decoder copy plus SSA layers, the only parameters of the last stage.
#[derive(Clone, Debug)]
pub struct SsaDecoder {
    pub store: ParamStore,
    pub dec: Decoder,
    pub ssa: Ssa,
}

impl SsaDecoder {
    /// Fresh SSA layers around a copy of the autoencoder's decoder.
    pub fn from_vqvae(vq: &VqVae, seed: u64) -> Result<Self> {
        let mut s = Self::blank(&vq.cfg, seed);
        s.store.copy_from(&vq.store, "dec.")?;
        Ok(s)
    }

    /// Same parameter layout as [`SsaDecoder::from_vqvae`], values untrained.
    pub fn blank(cfg: &VqConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut rng, "dec", cfg);
        let ssa = Ssa::new(&mut store, &mut rng, "ssa", &Decoder::ssa_channels(cfg), cfg.ssa_heads);
        SsaDecoder { store, dec, ssa }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Cube> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let out = self.dec.forward(&mut tape, &p, zv, Some(&self.ssa))?.out;
        Cube::from_nchw(tape.value(out))
    }
}
