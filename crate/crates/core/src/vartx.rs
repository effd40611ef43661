//! Scale-wise autoregressive transformer over multi-scale token pyramids,
//! conditioned on a degraded cube through prefix tokens.
//!
//! Sequence layout for schedule `h_1..h_K`:
//!
//! ```text
//! [ d | f_con' (h_K^2 tokens) | block 1 (h_1^2) | block 2 (h_2^2) | ... ]
//! ```
//!
//! Block 1 is the start vector, block `k >= 2` is `W(f_quant^(k-1))`
//! area-resampled to `h_k x h_k`. Every block also carries its level
//! embedding `l_k`. Blocks see the prefix, themselves and earlier blocks.

use std::rc::Rc;

use crate::degrade::DegradationKind;
use crate::error::{Error, Result};
use crate::msvq::{Encoder, TokenPyramid, VqConfig, VqVae};
use crate::nn::{init_normal, multi_head_attention, Conv2d, LayerNorm, Linear};
use crate::numerics::{Bound, ConvSpec, Counters, Interp, ParamId, ParamStore, Rng, RopeTable, Tape, Tensor, Var};

/// Rotary coordinate of the guidance token, outside every latent grid.
pub const GUIDANCE_POS: (f32, f32) = (-1.0, -1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct VarConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub refiner_blocks: usize,
    pub refiner_width: usize,
    pub rope_base: f32,
}

impl Default for VarConfig {
    fn default() -> Self {
        VarConfig {
            width: 128,
            depth: 4,
            heads: 4,
            refiner_blocks: 6,
            refiner_width: 32,
            rope_base: 100.0,
        }
    }
}

impl VarConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(d));
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.refiner_width == 0 {
            return bad("transformer sizes must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) || !(self.width / self.heads).is_multiple_of(4) {
            return bad(format!(
                "width {} must split into {} heads with a head size divisible by 4",
                self.width, self.heads
            ));
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }
}

/// Copy of the autoencoder encoder plus the projection `P` to transformer width.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub enc: Encoder,
    pub proj: Linear,
}

impl ConditionEncoder {
    /// `N x c x h_K x w_K` condition features `f_con`.
    pub fn features(&self, tape: &mut Tape, p: &Bound, lq: Var) -> Result<Var> {
        self.enc.forward(tape, p, lq)
    }

    /// `f_con'`: one row per latent position of a single item, `h_K w_K x D`.
    pub fn project(&self, tape: &mut Tape, p: &Bound, f_con: Var) -> Result<Var> {
        let tokens = nchw_to_tokens(tape, f_con)?;
        self.proj.forward(tape, p, tokens)
    }
}

/// `1 x c x h x w` to `hw x c`, row-major over positions.
fn nchw_to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::dim("tokens", format!("expected a single 1 x c x h x w map, got {s:?}")));
    }
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(t, &[s[2] * s[3], s[1]])
}

/// `hw x c` rows back to `1 x c x h x w`.
fn tokens_to_nchw(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = tape.shape(x)[1];
    let t = tape.reshape(x, &[1, h, w, c])?;
    tape.permute(t, &[0, 3, 1, 2])
}

/// Degradation embeddings `d_1..d_N`, the shared `d_basic` and the scales `lambda_i`.
#[derive(Clone, Debug)]
pub struct GuidanceBank {
    pub d: ParamId,
    pub basic: ParamId,
    pub lambda: ParamId,
}

impl GuidanceBank {
    fn new(store: &mut ParamStore, rng: &mut Rng, width: usize) -> Self {
        let n = DegradationKind::COUNT;
        GuidanceBank {
            d: store.add("guide.d", Tensor::from_fn([n, width], |_| rng.normal() * 0.5)),
            basic: store.add("guide.basic", Tensor::from_fn([width], |_| rng.normal() * 0.5)),
            lambda: store.add("guide.lambda", Tensor::ones([n])),
        }
    }

    /// `d = d_i + lambda_i * d_basic` as a `1 x D` token.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, kind: DegradationKind) -> Result<Var> {
        let i = kind.index() - 1;
        let di = tape.slice(p.var(self.d), 0, i, 1)?;
        let li = tape.slice(p.var(self.lambda), 0, i, 1)?;
        let mix = tape.mul(p.var(self.basic), li)?;
        tape.add(di, mix)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, depth: usize) -> Self {
        let out_proj = |store: &mut ParamStore, rng: &mut Rng, n: &str, inp: usize| {
            let w = store.add(
                format!("{name}.{n}.w"),
                init_normal(rng, &[inp, d], inp, 1.0 / (2.0 * depth as f32).sqrt()),
            );
            let b = store.add(format!("{name}.{n}.b"), Tensor::zeros([d]));
            Linear { w, b: Some(b) }
        };
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
        let qkv = Linear::new(store, rng, &format!("{name}.qkv"), d, 3 * d, true);
        let proj = out_proj(store, rng, "proj", d);
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d);
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), d, 4 * d, true);
        let fc2 = out_proj(store, rng, "fc2", 4 * d);
        Block {
            ln1,
            qkv,
            proj,
            ln2,
            fc1,
            fc2,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, heads: usize, mask: &[bool], rope: &Rc<RopeTable>) -> Result<Var> {
        let d = tape.shape(x)[1];
        let h = self.ln1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let q = tape.slice(qkv, 1, 0, d)?;
        let k = tape.slice(qkv, 1, d, d)?;
        let v = tape.slice(qkv, 1, 2 * d, d)?;
        let q = tape.rope(q, rope)?;
        let k = tape.rope(k, rope)?;
        let a = multi_head_attention(tape, q, k, v, heads, Some(mask))?;
        let a = self.proj.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Gated conv block: depthwise conv, simple gate and channel attention,
/// followed by a gated pointwise feed-forward.
#[derive(Clone, Debug)]
struct NafBlock {
    norm1: LayerNorm,
    expand: Conv2d,
    depthwise: Conv2d,
    attn: Conv2d,
    project: Conv2d,
    norm2: LayerNorm,
    ff_in: Conv2d,
    ff_out: Conv2d,
}

impl NafBlock {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, w: usize) -> Self {
        let pw = ConvSpec::same(1);
        NafBlock {
            norm1: LayerNorm::new(store, &format!("{name}.n1"), w),
            expand: Conv2d::new(store, rng, &format!("{name}.expand"), w, 2 * w, 1, pw, 1.0),
            depthwise: Conv2d::new(
                store,
                rng,
                &format!("{name}.dw"),
                2 * w,
                2 * w,
                3,
                ConvSpec::same(3).with_groups(2 * w),
                1.0,
            ),
            attn: Conv2d::new(store, rng, &format!("{name}.sca"), w, w, 1, pw, 1.0),
            project: Conv2d::new(store, rng, &format!("{name}.proj"), w, w, 1, pw, 1.0),
            norm2: LayerNorm::new(store, &format!("{name}.n2"), w),
            ff_in: Conv2d::new(store, rng, &format!("{name}.ff_in"), w, 2 * w, 1, pw, 1.0),
            ff_out: Conv2d::new(store, rng, &format!("{name}.ff_out"), w, w, 1, pw, 1.0),
        }
    }

    fn gate(tape: &mut Tape, x: Var) -> Result<Var> {
        let half = tape.shape(x)[1] / 2;
        let a = tape.slice(x, 1, 0, half)?;
        let b = tape.slice(x, 1, half, half)?;
        tape.mul(a, b)
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward_nchw(tape, p, x)?;
        let h = self.expand.forward(tape, p, h)?;
        let h = self.depthwise.forward(tape, p, h)?;
        let h = Self::gate(tape, h)?;
        let pooled = tape.mean_axes(h, &[2, 3])?;
        let weights = self.attn.forward(tape, p, pooled)?;
        let h = tape.mul(h, weights)?;
        let h = self.project.forward(tape, p, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward_nchw(tape, p, x)?;
        let h = self.ff_in.forward(tape, p, h)?;
        let h = Self::gate(tape, h)?;
        let h = self.ff_out.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Predicts the last quantization residual from the embedded scale-K tokens
/// and the transformer's last hidden states.
#[derive(Clone, Debug)]
pub struct Refiner {
    input: Conv2d,
    blocks: Vec<NafBlock>,
    output: Conv2d,
}

impl Refiner {
    fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &VarConfig, latent_channels: usize) -> Self {
        let w = cfg.refiner_width;
        let pw = ConvSpec::same(1);
        Refiner {
            input: Conv2d::new(store, rng, "refiner.in", 2 * cfg.width, w, 1, pw, 1.0),
            blocks: (0..cfg.refiner_blocks)
                .map(|i| NafBlock::new(store, rng, &format!("refiner.b{i}"), w))
                .collect(),
            output: Conv2d::zeros(store, "refiner.out", w, latent_channels, 1, pw),
        }
    }

    /// `tokens` and `z` are `h_K^2 x D`; the result is `1 x c x h_K x h_K`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: Var, z: Var, side: usize) -> Result<Var> {
        if tape.shape(tokens) != tape.shape(z) || tape.shape(z)[0] != side * side {
            return Err(Error::shapes("refine", tape.shape(tokens), tape.shape(z)));
        }
        let x = tape.concat(&[tokens, z], 1)?;
        let x = tokens_to_nchw(tape, x, side, side)?;
        let mut h = self.input.forward(tape, p, x)?;
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        self.output.forward(tape, p, h)
    }
}

/// Token selection rule applied to each scale's logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    Greedy,
    TopK { temperature: f32, k: usize, seed: u64 },
}

/// How the prefix is turned into logits at inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GuidanceMode {
    /// One forward with the degradation-aware prefix.
    Dag,
    /// Two forwards, conditional and all-zero prefix, blended with `scale`.
    Cfg { scale: f32 },
}

/// Lowest index of the maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row(row: &[f32], temperature: f32, k: usize, rng: &mut Rng) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k.clamp(1, row.len()));
    let t = temperature.max(1e-6) as f64;
    let top = row[order[0]] as f64;
    let weights: Vec<f64> = order.iter().map(|&i| ((row[i] as f64 - top) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() as f64 * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *order.last().unwrap()
}

/// Output of one scale-by-scale generation.
#[derive(Clone, Debug)]
pub struct Generated {
    pub tokens: Vec<Vec<usize>>,
    /// `f_quant` after each scale.
    pub accumulated: Vec<Tensor>,
    /// Final logits of each scale, `h_k^2 x M`.
    pub logits: Vec<Tensor>,
    /// Last hidden states at the scale-K positions of the conditional pass.
    pub z: Tensor,
    /// Tape handle of the last-scale hidden states.
    pub z_var: Var,
    pub f_quant: Var,
}

/// Teacher-forced pass over a full sequence.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// `sum h_k^2 x M`, scale-major.
    pub logits: Var,
    /// Hidden states of the scale-K positions.
    pub z: Var,
}

/// Loss weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub refiner: f32,
    pub align: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            refiner: 2.0,
            align: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarLosses {
    pub total: Var,
    pub ce: Var,
    pub refiner: Var,
    pub align: Var,
    pub logits: Var,
    /// Fraction of correct greedy tokens per scale.
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VarModel {
    pub cfg: VarConfig,
    pub vq_cfg: VqConfig,
    pub store: ParamStore,
    pub con: ConditionEncoder,
    pub guide: GuidanceBank,
    pub word: Linear,
    pub sos: ParamId,
    pub levels: ParamId,
    blocks: Vec<Block>,
    head_norm: LayerNorm,
    head: Linear,
    pub refiner: Refiner,
}

impl VarModel {
    /// Fresh model whose condition encoder copies the autoencoder's encoder.
    pub fn new(cfg: VarConfig, vq: &VqVae, seed: u64) -> Result<Self> {
        let mut m = Self::blank(cfg, vq.cfg.clone(), seed)?;
        m.store.copy_renamed(&vq.store, "enc.", "con.")?;
        Ok(m)
    }

    /// Parameter layout of [`VarModel::new`] without the encoder copy.
    pub fn blank(cfg: VarConfig, vq_cfg: VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        vq_cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let d = cfg.width;
        let c = vq_cfg.latent_channels;
        let k = vq_cfg.schedule.len();
        let enc = Encoder::new(&mut store, &mut rng, "con", &vq_cfg);
        let proj = Linear::new(&mut store, &mut rng, "con_proj", c, d, true);
        let guide = GuidanceBank::new(&mut store, &mut rng, d);
        let word = Linear::new(&mut store, &mut rng, "word", c, d, true);
        let sos = store.add("sos", Tensor::from_fn([1, d], |_| rng.normal() * 0.5));
        let levels = store.add("levels", Tensor::from_fn([k, d], |_| rng.normal() * 0.5));
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut store, &mut rng, &format!("blk{i}"), d, cfg.depth))
            .collect();
        let head_norm = LayerNorm::new(&mut store, "head_norm", d);
        let head = Linear::new(&mut store, &mut rng, "head", d, vq_cfg.codebook_size, true);
        let refiner = Refiner::new(&mut store, &mut rng, &cfg, c);
        Ok(VarModel {
            cfg,
            vq_cfg,
            store,
            con: ConditionEncoder { enc, proj },
            guide,
            word,
            sos,
            levels,
            blocks,
            head_norm,
            head,
            refiner,
        })
    }

    fn sides(&self) -> &[usize] {
        self.vq_cfg.schedule.sides()
    }

    /// Number of prefix tokens: guidance token plus one per latent position.
    pub fn prefix_len(&self) -> usize {
        1 + self.vq_cfg.schedule.last().pow(2)
    }

    /// Offset of scale `k` inside the scale part of the sequence.
    pub fn scale_offset(&self, k: usize) -> usize {
        self.sides()[..k].iter().map(|h| h * h).sum()
    }

    /// Rotary coordinates of the prefix: the guidance token, then the
    /// condition tokens on the latent grid.
    pub fn prefix_positions(&self) -> Vec<(f32, f32)> {
        let big = self.vq_cfg.schedule.last();
        let mut pos = vec![GUIDANCE_POS];
        pos.extend((0..big * big).map(|i| ((i / big) as f32, (i % big) as f32)));
        pos
    }

    /// Token-centre coordinates of scale `k` in the full-latent frame.
    pub fn scale_positions(&self, k: usize) -> Vec<(f32, f32)> {
        let big = self.vq_cfg.schedule.last() as f32;
        let h = self.sides()[k];
        let f = |i: usize| (i as f32 + 0.5) * big / h as f32 - 0.5;
        (0..h * h).map(|i| (f(i / h), f(i % h))).collect()
    }

    /// Attention mask over a prefix of `prefix` tokens and the first `scales` blocks.
    pub fn block_mask(&self, prefix: usize, scales: usize) -> Vec<bool> {
        let mut block = vec![0usize; prefix];
        for (k, &h) in self.sides()[..scales].iter().enumerate() {
            block.extend(std::iter::repeat_n(k + 1, h * h));
        }
        let l = block.len();
        let mut mask = vec![false; l * l];
        for i in 0..l {
            for j in 0..l {
                mask[i * l + j] = block[j] <= block[i] && !(block[i] == 0 && block[j] != 0);
            }
        }
        mask
    }

    /// `f_con` and `f_con'` for a single degraded item.
    pub fn build_condition(&self, tape: &mut Tape, p: &Bound, lq: Var) -> Result<(Var, Var)> {
        let f_con = self.con.features(tape, p, lq)?;
        // the prefix reaches E_con only through the alignment loss
        let stop = tape.detach(f_con);
        let tokens = self.con.project(tape, p, stop)?;
        Ok((f_con, tokens))
    }

    pub fn dag_embedding(&self, tape: &mut Tape, p: &Bound, kind: DegradationKind) -> Result<Var> {
        self.guide.embed(tape, p, kind)
    }

    /// `[d || f_con']` plus `f_con` for the alignment loss.
    pub fn prefix(&self, tape: &mut Tape, p: &Bound, lq: Var, kind: DegradationKind) -> Result<(Var, Var)> {
        let (f_con, tokens) = self.build_condition(tape, p, lq)?;
        let d = self.dag_embedding(tape, p, kind)?;
        Ok((tape.concat(&[d, tokens], 0)?, f_con))
    }

    /// All-zero prefix of the same length, the unconditional branch of CFG.
    pub fn uncond_prefix(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros([self.prefix_len(), self.cfg.width]))
    }

    /// Embedded inputs of the first `scales` blocks. `accumulated[k]` is
    /// `f_quant^(k+1)` of one item; only the first `scales - 1` are read.
    pub fn scale_inputs(&self, tape: &mut Tape, p: &Bound, accumulated: &[Tensor], scales: usize) -> Result<Var> {
        let k_total = self.sides().len();
        if scales == 0 || scales > k_total || accumulated.len() + 1 < scales {
            return Err(Error::dim(
                "scale_inputs",
                format!("{scales} scales from {} accumulated maps, schedule has {k_total}", accumulated.len()),
            ));
        }
        let mut parts = Vec::with_capacity(scales);
        for k in 0..scales {
            let level = tape.slice(p.var(self.levels), 0, k, 1)?;
            let emb = if k == 0 {
                let h = self.sides()[0];
                let rows = tape.constant(Tensor::zeros([h * h, self.cfg.width]));
                tape.add(rows, p.var(self.sos))?
            } else {
                let h = self.sides()[k];
                let prev = tape.constant(accumulated[k - 1].clone());
                let down = tape.interpolate_2d(prev, h, h, Interp::Area)?;
                let t = nchw_to_tokens(tape, down)?;
                self.word.forward(tape, p, t)?
            };
            parts.push(tape.add(emb, level)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat(&parts, 0)
    }

    /// One transformer forward over `prefix` and the first `scales` blocks.
    pub fn transformer(&self, tape: &mut Tape, p: &Bound, prefix: Var, inputs: Var, scales: usize) -> Result<Var> {
        let (np, d) = (tape.shape(prefix)[0], self.cfg.width);
        if np != self.prefix_len() || tape.shape(prefix)[1] != d {
            return Err(Error::dim(
                "transformer",
                format!("prefix {:?}, expected [{}, {d}]", tape.shape(prefix), self.prefix_len()),
            ));
        }
        let ns = self.scale_offset(scales);
        if tape.shape(inputs) != [ns, d] {
            return Err(Error::dim(
                "transformer",
                format!("inputs {:?} for {scales} scales, expected [{ns}, {d}]", tape.shape(inputs)),
            ));
        }
        let mut pos = self.prefix_positions();
        for k in 0..scales {
            pos.extend(self.scale_positions(k));
        }
        let rope = Rc::new(RopeTable::new_2d(&pos, d / self.cfg.heads, self.cfg.rope_base)?);
        let mask = self.block_mask(np, scales);
        let mut x = tape.concat(&[prefix, inputs], 0)?;
        for b in &self.blocks {
            x = b.forward(tape, p, x, self.cfg.heads, &mask, &rope)?;
        }
        tape.note_transformer_forward();
        tape.slice(x, 0, np, ns)
    }

    /// Logits head `G` on hidden rows.
    pub fn head(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        let h = self.head_norm.forward(tape, p, hidden)?;
        self.head.forward(tape, p, h)
    }

    /// Logits for every scale position given the ground-truth accumulated maps.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prefix: Var,
        accumulated: &[Tensor],
    ) -> Result<TeacherForced> {
        let k = self.sides().len();
        if accumulated.len() != k {
            return Err(Error::dim(
                "forward_teacher_forced",
                format!("pyramid has {} scales, schedule has {k}", accumulated.len()),
            ));
        }
        let inputs = self.scale_inputs(tape, p, accumulated, k)?;
        let hidden = self.transformer(tape, p, prefix, inputs, k)?;
        let logits = self.head(tape, p, hidden)?;
        let off = self.scale_offset(k - 1);
        let z = tape.slice(hidden, 0, off, self.sides()[k - 1].pow(2))?;
        Ok(TeacherForced { logits, z })
    }

    /// Scale-`k` logits and hidden rows from the prefix and `f_quant^(1..k)`.
    pub fn step_logits(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prefix: Var,
        accumulated: &[Tensor],
        k: usize,
    ) -> Result<(Var, Var)> {
        let inputs = self.scale_inputs(tape, p, accumulated, k + 1)?;
        let hidden = self.transformer(tape, p, prefix, inputs, k + 1)?;
        let rows = tape.slice(hidden, 0, self.scale_offset(k), self.sides()[k].pow(2))?;
        Ok((self.head(tape, p, rows)?, rows))
    }

    /// `(1 - s) G(T(e_un)) + s G(T(e_con))`, written so that `s = 0` and
    /// `s = 1` return one branch exactly.
    pub fn cfg_logits(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prefix_cond: Var,
        prefix_uncond: Var,
        accumulated: &[Tensor],
        k: usize,
        scale: f32,
    ) -> Result<(Var, Var)> {
        if tape.shape(prefix_cond) != tape.shape(prefix_uncond) {
            return Err(Error::shapes("cfg_logits", tape.shape(prefix_cond), tape.shape(prefix_uncond)));
        }
        let (cond, rows) = self.step_logits(tape, p, prefix_cond, accumulated, k)?;
        let (uncond, _) = self.step_logits(tape, p, prefix_uncond, accumulated, k)?;
        let a = tape.scale(uncond, 1.0 - scale);
        let b = tape.scale(cond, scale);
        Ok((tape.add(a, b)?, rows))
    }

    /// `W(codebook[tokens])`, `n x D`.
    pub fn embed_tokens(&self, tape: &mut Tape, p: &Bound, codebook: Var, tokens: &[usize]) -> Result<Var> {
        let rows = tape.gather_rows(codebook, tokens)?;
        self.word.forward(tape, p, rows)
    }

    /// Scale-by-scale generation for one item. `vp` binds this model,
    /// `qp` the autoencoder that dequantizes the chosen tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        tape: &mut Tape,
        p: &Bound,
        vq: &VqVae,
        qp: &Bound,
        prefix: Var,
        mode: GuidanceMode,
        sampler: Sampler,
    ) -> Result<Generated> {
        let sides = self.sides().to_vec();
        let mut rng = match sampler {
            Sampler::TopK { seed, .. } => Some(Rng::new(seed)),
            Sampler::Greedy => None,
        };
        let uncond = match mode {
            GuidanceMode::Cfg { .. } => Some(self.uncond_prefix(tape)),
            GuidanceMode::Dag => None,
        };
        let m = self.vq_cfg.codebook_size;
        let mut out = Generated {
            tokens: Vec::new(),
            accumulated: Vec::new(),
            logits: Vec::new(),
            z: Tensor::zeros([0]),
            z_var: prefix,
            f_quant: prefix,
        };
        let mut f_quant: Option<Var> = None;
        for k in 0..sides.len() {
            let (logits, rows) = match (mode, uncond) {
                (GuidanceMode::Cfg { scale }, Some(un)) => {
                    self.cfg_logits(tape, p, prefix, un, &out.accumulated, k, scale)?
                }
                _ => self.step_logits(tape, p, prefix, &out.accumulated, k)?,
            };
            let lv = tape.value(logits);
            let tokens: Vec<usize> = (0..sides[k] * sides[k])
                .map(|i| {
                    let row = &lv.data()[i * m..(i + 1) * m];
                    match (sampler, rng.as_mut()) {
                        (Sampler::TopK { temperature, k, .. }, Some(r)) => sample_row(row, temperature, k, r),
                        _ => argmax(row),
                    }
                })
                .collect();
            out.logits.push(lv.clone());
            let h = vq.quant.contribution(tape, qp, k, &tokens, 1)?;
            let acc = match f_quant {
                Some(fq) => tape.add(fq, h)?,
                None => h,
            };
            f_quant = Some(acc);
            out.accumulated.push(tape.value(acc).clone());
            out.tokens.push(tokens);
            out.z_var = rows;
        }
        out.z = tape.value(out.z_var).clone();
        out.f_quant = f_quant.expect("schedule is non-empty");
        Ok(out)
    }

    /// Refiner correction for the last-scale tokens and hidden rows.
    pub fn refine(&self, tape: &mut Tape, p: &Bound, codebook: Var, tokens: &[usize], z: Var) -> Result<Var> {
        let emb = self.embed_tokens(tape, p, codebook, tokens)?;
        self.refiner.forward(tape, p, emb, z, self.vq_cfg.schedule.last())
    }

    /// Joint objective for one training item.
    ///
    /// `target` is the clean pyramid from the frozen autoencoder and
    /// `f_hq` its clean latent; `codebook` is the frozen codebook.
    #[allow(clippy::too_many_arguments)]
    pub fn losses(
        &self,
        tape: &mut Tape,
        p: &Bound,
        codebook: Var,
        target: &TokenPyramid,
        f_hq: &Tensor,
        lq: Var,
        kind: DegradationKind,
        weights: LossWeights,
    ) -> Result<VarLosses> {
        let (prefix, f_con) = self.prefix(tape, p, lq, kind)?;
        let clean = tape.constant(f_hq.clone());
        let align = tape.mse(f_con, clean)?;
        let tf = self.forward_teacher_forced(tape, p, prefix, &target.accumulated)?;
        let flat: Vec<usize> = target.tokens.iter().flatten().copied().collect();
        let ce = tape.softmax_ce(tf.logits, &flat)?;
        let last = target.tokens.last().expect("schedule is non-empty");
        let corr = self.refine(tape, p, codebook, last, tf.z)?;
        let res = tape.constant(target.f_res.clone());
        let refiner = tape.l1_loss(corr, res)?;
        let r = tape.scale(refiner, weights.refiner);
        let a = tape.scale(align, weights.align);
        let total = tape.add(ce, r)?;
        let total = tape.add(total, a)?;
        let accuracy = token_accuracy(tape.value(tf.logits), &target.tokens);
        Ok(VarLosses {
            total,
            ce,
            refiner,
            align,
            logits: tf.logits,
            accuracy,
        })
    }
}

/// Per-scale fraction of rows whose greedy token matches the target.
pub fn token_accuracy(logits: &Tensor, tokens: &[Vec<usize>]) -> Vec<f64> {
    let m = logits.shape()[1];
    let mut row = 0;
    tokens
        .iter()
        .map(|scale| {
            let hits = scale
                .iter()
                .filter(|&&t| {
                    let r = row;
                    row += 1;
                    argmax(&logits.data()[r * m..(r + 1) * m]) == t
                })
                .count();
            hits as f64 / scale.len() as f64
        })
        .collect()
}

/// Work done by one full inference pass.
pub fn counters_delta(before: Counters, after: Counters) -> Counters {
    Counters {
        macs: after.macs - before.macs,
        transformer_forwards: after.transformer_forwards - before.transformer_forwards,
    }
}
