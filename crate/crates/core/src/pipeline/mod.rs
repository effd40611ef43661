//! The three training stages, end-to-end restoration and compute accounting.
//!
//! Stage 1 trains the autoencoder on clean cubes. Stage 2 freezes it and
//! trains the transformer, condition encoder, guidance bank and refiner on
//! degraded/clean pairs. Stage 3 finetunes a copy of the decoder with SSA
//! layers while everything else stays frozen.

pub mod config;

pub use config::{RunConfig, SsaLatents, Stage, TrainConfig};

use crate::checkpoint::Checkpoint;
use crate::degrade::{self, DegradationSpec};
use crate::error::{Error, Result};
use crate::hsidata::{synth_cube, Cube, SceneSpec};
use crate::msvq::{rec_loss, ScaleSchedule, SsaDecoder, VqConfig, VqVae};
use crate::numerics::{Counters, Optimizer, OptimizerConfig, Rng, Tape, Tensor, Var};
use crate::vartx::{counters_delta, GuidanceMode, LossWeights, Sampler, VarConfig, VarModel};

/// Clean training cubes. Items larger than the model side are randomly cropped.
#[derive(Clone, Debug)]
pub struct Dataset {
    cubes: Vec<Cube>,
}

impl Dataset {
    pub fn new(cubes: Vec<Cube>) -> Result<Self> {
        if cubes.is_empty() {
            return Err(Error::EmptyDataset("no training cubes".into()));
        }
        Ok(Dataset { cubes })
    }

    /// `n` synthetic scenes with seeds `seed, seed + 1, ...`.
    pub fn synthetic(n: usize, side: usize, bands: usize, seed: u64) -> Result<Self> {
        let cubes = (0..n as u64)
            .map(|i| synth_cube(&SceneSpec::with_seed(seed + i), side, side, bands))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cubes)
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn cubes(&self) -> &[Cube] {
        &self.cubes
    }

    fn check(&self, cfg: &VqConfig) -> Result<()> {
        let side = cfg.image_side();
        for (i, c) in self.cubes.iter().enumerate() {
            if c.c() != cfg.bands || c.h() < side || c.w() < side {
                return Err(Error::dim(
                    "dataset",
                    format!(
                        "cube {i} is {}x{}x{}, the model needs at least {side}x{side}x{}",
                        c.h(),
                        c.w(),
                        c.c(),
                        cfg.bands
                    ),
                ));
            }
        }
        Ok(())
    }

}

/// Draws items epoch by epoch: a fresh shuffle each pass, no repeats within one.
struct Batcher<'a> {
    data: &'a Dataset,
    side: usize,
    order: Vec<usize>,
}

impl<'a> Batcher<'a> {
    fn new(data: &'a Dataset, side: usize) -> Self {
        Batcher {
            data,
            side,
            order: Vec::new(),
        }
    }

    fn next(&mut self, rng: &mut Rng) -> Result<Cube> {
        if self.order.is_empty() {
            self.order = (0..self.data.len()).collect();
            for i in (1..self.order.len()).rev() {
                self.order.swap(i, rng.below(i + 1));
            }
        }
        let i = self.order.pop().expect("refilled above");
        random_crop(&self.data.cubes[i], self.side, rng)
    }
}

pub fn random_crop(cube: &Cube, side: usize, rng: &mut Rng) -> Result<Cube> {
    let (h, w, c) = cube.dims();
    if h == side && w == side {
        return Ok(cube.clone());
    }
    if h < side || w < side {
        return Err(Error::dim("random_crop", format!("{side}x{side} crop of a {h}x{w} cube")));
    }
    let (y0, x0) = (rng.below(h - side + 1), rng.below(w - side + 1));
    let mut data = Vec::with_capacity(side * side * c);
    for y in y0..y0 + side {
        let start = (y * w + x0) * c;
        data.extend_from_slice(&cube.data()[start..start + side * c]);
    }
    Cube::new(side, side, c, data)
}

/// Per-step training record; values are taken before each update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// Unweighted loss terms per step: `(rec, codebook, commitment)` for the
    /// autoencoder, `(ce, refiner, align)` for the transformer.
    pub components: Vec<[f64; 3]>,
    /// Transformer stage only: greedy token accuracy per scale and step.
    pub accuracy: Vec<Vec<f64>>,
}

impl TrainLog {
    /// Means over consecutive windows of `n` steps.
    pub fn smoothed(&self, n: usize) -> Vec<f64> {
        self.losses.chunks(n).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
    }
}

fn optimizer(cfg: &TrainConfig) -> Optimizer {
    Optimizer::new(match cfg.stage {
        Stage::Var => OptimizerConfig::adamw(cfg.learning_rate, cfg.weight_decay),
        _ => OptimizerConfig::adam(cfg.learning_rate),
    })
}

fn progress(cfg: &TrainConfig, step: usize, loss: f64) {
    if (step + 1).is_multiple_of(cfg.log_every) {
        log::info!("{} step {}/{}: loss {loss:.5}", cfg.stage.name(), step + 1, cfg.steps);
    }
}

/// Stage 1: reconstruction plus codebook and commitment losses on clean cubes.
pub fn train_vqvae(cfg: &RunConfig, data: &Dataset) -> Result<(VqVae, TrainLog)> {
    cfg.validate()?;
    data.check(&cfg.vq)?;
    let t = &cfg.train;
    let mut vq = VqVae::new(cfg.vq.clone(), t.seed)?;
    let mut rng = Rng::new(t.seed).fork(1);
    let mut opt = optimizer(t);
    let mut log = TrainLog::default();
    let mut batcher = Batcher::new(data, cfg.vq.image_side());
    for step in 0..t.steps {
        let batch = (0..t.batch_size)
            .map(|_| batcher.next(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let p = vq.store.bind(&mut tape);
        let x = tape.constant(Cube::stack_nchw(&batch)?);
        let l = vq.losses(&mut tape, &p, x, t.gamma)?;
        let g = tape.backward(l.total)?;
        vq.store.accumulate(&p, &g);
        opt.step(&mut vq.store)?;
        vq.store.zero_grads();
        let v = |x: Var| tape.value(x).item() as f64;
        let loss = v(l.total);
        log.losses.push(loss);
        log.components.push([v(l.rec), v(l.codebook), v(l.commitment)]);
        progress(t, step, loss);
    }
    Ok((vq, log))
}

/// The clean latent and its token pyramid under the frozen autoencoder.
fn clean_targets(vq: &VqVae, hq: &Cube) -> Result<(Tensor, crate::msvq::TokenPyramid)> {
    let f = vq.encode(hq)?;
    let pyr = vq.quantize_ms(&f)?;
    Ok((f, pyr))
}

fn sample_spec(cfg: &TrainConfig, rng: &mut Rng) -> Result<DegradationSpec> {
    let d = cfg.degradations[rng.below(cfg.degradations.len())];
    DegradationSpec::new(d, rng.next_u64())
}

/// Stage 2: teacher-forced cross-entropy plus refiner and alignment losses.
pub fn train_var(cfg: &RunConfig, vq: &VqVae, data: &Dataset) -> Result<(VarModel, TrainLog)> {
    cfg.validate()?;
    check_vq_config(&cfg.vq, &vq.cfg, "autoencoder checkpoint")?;
    data.check(&vq.cfg)?;
    let t = &cfg.train;
    let mut var = VarModel::new(cfg.var.clone(), vq, t.seed)?;
    if t.beta2 == 0.0 {
        // only the alignment loss reaches the condition encoder
        var.store.set_trainable("con.", false);
    }
    let mut rng = Rng::new(t.seed).fork(2);
    let mut opt = optimizer(t);
    let mut log = TrainLog::default();
    let mut batcher = Batcher::new(data, vq.cfg.image_side());
    let weights = LossWeights {
        refiner: t.beta1,
        align: t.beta2,
    };
    let inv = 1.0 / t.batch_size as f32;
    for step in 0..t.steps {
        let (mut loss, mut parts) = (0.0, [0.0; 3]);
        let mut acc = vec![0.0; vq.cfg.schedule.len()];
        for _ in 0..t.batch_size {
            let hq = batcher.next(&mut rng)?;
            let spec = sample_spec(t, &mut rng)?;
            let lq = degrade::apply(&spec, &hq)?;
            let (f_hq, target) = clean_targets(vq, &hq)?;
            let mut tape = Tape::new();
            let p = var.store.bind(&mut tape);
            let qp = vq.store.bind_frozen(&mut tape);
            let x = tape.constant(lq.to_nchw());
            let l = var.losses(&mut tape, &p, qp.var(vq.quant.codebook), &target, &f_hq, x, spec.kind(), weights)?;
            let scaled = tape.scale(l.total, inv);
            let g = tape.backward(scaled)?;
            var.store.accumulate(&p, &g);
            let v = |x: Var| tape.value(x).item() as f64 * inv as f64;
            loss += v(l.total);
            parts[0] += v(l.ce);
            parts[1] += v(l.refiner);
            parts[2] += v(l.align);
            for (a, b) in acc.iter_mut().zip(&l.accuracy) {
                *a += b * inv as f64;
            }
        }
        opt.step(&mut var.store)?;
        var.store.zero_grads();
        log.losses.push(loss);
        log.components.push(parts);
        log.accuracy.push(acc);
        progress(t, step, loss);
    }
    Ok((var, log))
}

/// Decoder input for one finetuning item.
fn ssa_latent(cfg: &TrainConfig, vq: &VqVae, var: &VarModel, hq: &Cube, rng: &mut Rng) -> Result<Tensor> {
    match cfg.ssa_latents {
        SsaLatents::GroundTruth => Ok(clean_targets(vq, hq)?.1.f_quant),
        SsaLatents::Generated => {
            let spec = sample_spec(cfg, rng)?;
            let lq = degrade::apply(&spec, hq)?;
            let mut tape = Tape::new();
            let gen = generate_latent(&mut tape, vq, var, &lq, &spec, &RestoreOptions::default())?;
            Ok(tape.value(gen.latent).clone())
        }
    }
}

/// Stage 3: decoder copy and SSA layers under the reconstruction loss.
pub fn finetune_ssa(cfg: &RunConfig, vq: &VqVae, var: &VarModel, data: &Dataset) -> Result<(SsaDecoder, TrainLog)> {
    cfg.validate()?;
    check_vq_config(&vq.cfg, &var.vq_cfg, "transformer checkpoint")?;
    data.check(&vq.cfg)?;
    let t = &cfg.train;
    let mut ssa = SsaDecoder::from_vqvae(vq, t.seed)?;
    let mut rng = Rng::new(t.seed).fork(3);
    let mut opt = optimizer(t);
    let mut log = TrainLog::default();
    let mut batcher = Batcher::new(data, vq.cfg.image_side());
    for step in 0..t.steps {
        let mut hqs = Vec::with_capacity(t.batch_size);
        let mut zs = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            let hq = batcher.next(&mut rng)?;
            zs.push(ssa_latent(t, vq, var, &hq, &mut rng)?);
            hqs.push(hq);
        }
        let mut tape = Tape::new();
        let p = ssa.store.bind(&mut tape);
        let z = tape.constant(stack_latents(&zs)?);
        let target = tape.constant(Cube::stack_nchw(&hqs)?);
        let out = ssa.dec.forward(&mut tape, &p, z, Some(&ssa.ssa))?.out;
        let l = rec_loss(&mut tape, out, target, t.gamma)?;
        let g = tape.backward(l)?;
        ssa.store.accumulate(&p, &g);
        opt.step(&mut ssa.store)?;
        ssa.store.zero_grads();
        let loss = tape.value(l).item() as f64;
        log.losses.push(loss);
        progress(t, step, loss);
    }
    Ok((ssa, log))
}

fn stack_latents(zs: &[Tensor]) -> Result<Tensor> {
    let s = zs[0].shape();
    let mut shape = s.to_vec();
    shape[0] = zs.len();
    Tensor::new(shape, zs.iter().flat_map(|z| z.data().iter().copied()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestoreOptions {
    pub mode: GuidanceMode,
    pub sampler: Sampler,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        RestoreOptions {
            mode: GuidanceMode::Dag,
            sampler: Sampler::Greedy,
        }
    }
}

struct GeneratedLatent {
    /// `f_quant^(K)` plus the refiner correction.
    latent: Var,
    tokens: Vec<Vec<usize>>,
}

fn generate_latent(
    tape: &mut Tape,
    vq: &VqVae,
    var: &VarModel,
    lq: &Cube,
    spec: &DegradationSpec,
    opts: &RestoreOptions,
) -> Result<GeneratedLatent> {
    let side = vq.cfg.image_side();
    if lq.dims() != (side, side, vq.cfg.bands) {
        return Err(Error::dim(
            "restore",
            format!(
                "input is {}x{}x{}, the model restores {side}x{side}x{} cubes",
                lq.h(),
                lq.w(),
                lq.c(),
                vq.cfg.bands
            ),
        ));
    }
    let p = var.store.bind_frozen(tape);
    let qp = vq.store.bind_frozen(tape);
    let x = tape.constant(lq.to_nchw());
    let (prefix, _) = var.prefix(tape, &p, x, spec.kind())?;
    let g = var.generate(tape, &p, vq, &qp, prefix, opts.mode, opts.sampler)?;
    let codebook = qp.var(vq.quant.codebook);
    let corr = var.refine(tape, &p, codebook, g.tokens.last().expect("schedule is non-empty"), g.z_var)?;
    Ok(GeneratedLatent {
        latent: tape.add(g.f_quant, corr)?,
        tokens: g.tokens,
    })
}

/// The three trained components that restoration needs.
#[derive(Clone, Debug)]
pub struct Models {
    pub vq: VqVae,
    pub var: VarModel,
    pub ssa: SsaDecoder,
}

#[derive(Clone, Debug)]
pub struct Restored {
    pub cube: Cube,
    pub tokens: Vec<Vec<usize>>,
    /// Work done by this restoration alone.
    pub counters: Counters,
}

impl Models {
    pub fn new(vq: VqVae, var: VarModel, ssa: SsaDecoder) -> Result<Self> {
        check_vq_config(&vq.cfg, &var.vq_cfg, "transformer checkpoint")?;
        Ok(Models { vq, var, ssa })
    }

    /// Scalar parameters read while restoring: transformer side, quantizer
    /// codebook and refinement convs, adapted decoder.
    pub fn restore_params(&self) -> usize {
        let quant: usize = self
            .vq
            .store
            .iter()
            .filter(|p| p.name.starts_with("quant."))
            .map(|p| p.value.numel())
            .sum();
        self.var.store.num_scalars() + quant + self.ssa.store.num_scalars()
    }

    pub fn restore(&self, lq: &Cube, spec: &DegradationSpec, opts: &RestoreOptions) -> Result<Restored> {
        let mut tape = Tape::new();
        let before = tape.counters();
        let gen = generate_latent(&mut tape, &self.vq, &self.var, lq, spec, opts)?;
        let sp = self.ssa.store.bind_frozen(&mut tape);
        let out = self.ssa.dec.forward(&mut tape, &sp, gen.latent, Some(&self.ssa.ssa))?.out;
        let cube = Cube::from_nchw(tape.value(out))?.clamped();
        Ok(Restored {
            cube,
            tokens: gen.tokens,
            counters: counters_delta(before, tape.counters()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeCost {
    pub params: usize,
    pub macs: u64,
    pub forwards: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityReport {
    pub dag: ModeCost,
    pub cfg: ModeCost,
}

impl ComplexityReport {
    pub fn mac_ratio(&self) -> f64 {
        self.dag.macs as f64 / self.cfg.macs as f64
    }
}

/// Costs of one restoration in each guidance mode at the same sequence length.
pub fn complexity_report(models: &Models, cfg_scale: f32) -> Result<ComplexityReport> {
    let side = models.vq.cfg.image_side();
    let lq = Cube::filled(side, side, models.vq.cfg.bands, 0.5)?;
    let spec = DegradationSpec::new(crate::degrade::Degradation::IidGaussianNoise { sigma: 30 }, 0)?;
    let cost = |mode| -> Result<ModeCost> {
        let r = models.restore(
            &lq,
            &spec,
            &RestoreOptions {
                mode,
                sampler: Sampler::Greedy,
            },
        )?;
        Ok(ModeCost {
            // the unconditional prefix is a constant, so both modes read the same weights
            params: models.restore_params(),
            macs: r.counters.macs,
            forwards: r.counters.transformer_forwards,
        })
    };
    Ok(ComplexityReport {
        dag: cost(GuidanceMode::Dag)?,
        cfg: cost(GuidanceMode::Cfg { scale: cfg_scale })?,
    })
}

// ---- checkpoints -----------------------------------------------------------

const STAGE_KEY: &str = "stage";

fn stage_code(stage: Stage) -> f32 {
    match stage {
        Stage::Vqvae => 1.0,
        Stage::Var => 2.0,
        Stage::SsaFinetune => 3.0,
    }
}

fn put_vq_meta(ck: &mut Checkpoint, c: &VqConfig) {
    let sched: Vec<f32> = c.schedule.sides().iter().map(|&h| h as f32).collect();
    ck.set_meta("schedule", &sched);
    for (k, v) in [
        ("bands", c.bands),
        ("latent_channels", c.latent_channels),
        ("codebook_size", c.codebook_size),
        ("enc_width", c.enc_width),
        ("dec_width", c.dec_width),
        ("ssa_heads", c.ssa_heads),
    ] {
        ck.set_meta(k, &[v as f32]);
    }
}

fn read_vq_meta(ck: &Checkpoint) -> Result<VqConfig> {
    let u = |k: &str| ck.meta_scalar(k).map(|v| v as usize);
    let sides = ck.meta_usize("schedule")?;
    let schedule = ScaleSchedule::new(sides).map_err(|e| Error::Checkpoint {
        name: "meta.schedule".into(),
        detail: e.to_string(),
    })?;
    let cfg = VqConfig {
        bands: u("bands")?,
        latent_channels: u("latent_channels")?,
        codebook_size: u("codebook_size")?,
        schedule,
        enc_width: u("enc_width")?,
        dec_width: u("dec_width")?,
        ssa_heads: u("ssa_heads")?,
    };
    cfg.validate().map_err(|e| Error::Checkpoint {
        name: "meta".into(),
        detail: e.to_string(),
    })?;
    Ok(cfg)
}

fn expect_stage(ck: &Checkpoint, stage: Stage) -> Result<()> {
    let got = ck.meta_scalar(STAGE_KEY)?;
    if got != stage_code(stage) {
        return Err(Error::Checkpoint {
            name: format!("meta.{STAGE_KEY}"),
            detail: format!("expected a {} checkpoint, found stage code {got}", stage.name()),
        });
    }
    Ok(())
}

/// Errors with the first differing field between two autoencoder configs.
pub fn check_vq_config(want: &VqConfig, got: &VqConfig, what: &str) -> Result<()> {
    let fields = [
        ("bands", want.bands, got.bands),
        ("latent_channels", want.latent_channels, got.latent_channels),
        ("codebook_size", want.codebook_size, got.codebook_size),
        ("enc_width", want.enc_width, got.enc_width),
        ("dec_width", want.dec_width, got.dec_width),
        ("ssa_heads", want.ssa_heads, got.ssa_heads),
    ];
    if want.schedule != got.schedule {
        return Err(Error::Checkpoint {
            name: "meta.schedule".into(),
            detail: format!(
                "{what} uses schedule {:?}, expected {:?}",
                got.schedule.sides(),
                want.schedule.sides()
            ),
        });
    }
    for (k, a, b) in fields {
        if a != b {
            return Err(Error::Checkpoint {
                name: format!("meta.{k}"),
                detail: format!("{what} has {k} = {b}, expected {a}"),
            });
        }
    }
    Ok(())
}

pub fn vqvae_checkpoint(vq: &VqVae) -> Checkpoint {
    let mut ck = Checkpoint::from_store(&vq.store);
    ck.set_meta(STAGE_KEY, &[stage_code(Stage::Vqvae)]);
    put_vq_meta(&mut ck, &vq.cfg);
    ck
}

pub fn vqvae_from_checkpoint(ck: &Checkpoint) -> Result<VqVae> {
    expect_stage(ck, Stage::Vqvae)?;
    let mut vq = VqVae::new(read_vq_meta(ck)?, 0)?;
    ck.load_into(&mut vq.store)?;
    Ok(vq)
}

pub fn var_checkpoint(var: &VarModel) -> Checkpoint {
    let mut ck = Checkpoint::from_store(&var.store);
    ck.set_meta(STAGE_KEY, &[stage_code(Stage::Var)]);
    put_vq_meta(&mut ck, &var.vq_cfg);
    let c = &var.cfg;
    for (k, v) in [
        ("width", c.width),
        ("depth", c.depth),
        ("heads", c.heads),
        ("refiner_blocks", c.refiner_blocks),
        ("refiner_width", c.refiner_width),
    ] {
        ck.set_meta(k, &[v as f32]);
    }
    ck.set_meta("rope_base", &[c.rope_base]);
    ck
}

pub fn var_from_checkpoint(ck: &Checkpoint) -> Result<VarModel> {
    expect_stage(ck, Stage::Var)?;
    let u = |k: &str| ck.meta_scalar(k).map(|v| v as usize);
    let cfg = VarConfig {
        width: u("width")?,
        depth: u("depth")?,
        heads: u("heads")?,
        refiner_blocks: u("refiner_blocks")?,
        refiner_width: u("refiner_width")?,
        rope_base: ck.meta_scalar("rope_base")?,
    };
    let mut var = VarModel::blank(cfg, read_vq_meta(ck)?, 0)?;
    ck.load_into(&mut var.store)?;
    Ok(var)
}

pub fn ssa_checkpoint(ssa: &SsaDecoder, vq_cfg: &VqConfig) -> Checkpoint {
    let mut ck = Checkpoint::from_store(&ssa.store);
    ck.set_meta(STAGE_KEY, &[stage_code(Stage::SsaFinetune)]);
    put_vq_meta(&mut ck, vq_cfg);
    ck
}

pub fn ssa_from_checkpoint(ck: &Checkpoint) -> Result<(SsaDecoder, VqConfig)> {
    expect_stage(ck, Stage::SsaFinetune)?;
    let cfg = read_vq_meta(ck)?;
    let mut ssa = SsaDecoder::blank(&cfg, 0);
    ck.load_into(&mut ssa.store)?;
    Ok((ssa, cfg))
}

impl Models {
    /// Loads and cross-checks the three stage checkpoints.
    pub fn from_checkpoints(vq: &Checkpoint, var: &Checkpoint, ssa: &Checkpoint) -> Result<Self> {
        let vq = vqvae_from_checkpoint(vq)?;
        let var = var_from_checkpoint(var)?;
        let (ssa, ssa_cfg) = ssa_from_checkpoint(ssa)?;
        check_vq_config(&vq.cfg, &ssa_cfg, "decoder checkpoint")?;
        Models::new(vq, var, ssa)
    }
}
