//! `key = value` run configuration shared by every training stage.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::degrade::{Degradation, DegradationKind};
use crate::error::{Error, Result};
use crate::msvq::{ScaleSchedule, VqConfig};
use crate::vartx::VarConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Vqvae,
    Var,
    SsaFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vqvae => "vqvae",
            Stage::Var => "var",
            Stage::SsaFinetune => "ssa_finetune",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqvae" => Ok(Stage::Vqvae),
            "var" => Ok(Stage::Var),
            "ssa_finetune" => Ok(Stage::SsaFinetune),
            _ => Err(Error::Config(format!("unknown stage `{s}` (vqvae, var, ssa_finetune)"))),
        }
    }
}

/// Decoder inputs used while finetuning the adapted decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsaLatents {
    /// Quantized latents of the clean cube.
    GroundTruth,
    /// Refined latents generated from a degraded copy.
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Optimizer steps; every step averages `batch_size` items.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Decoupled decay; the transformer stage uses AdamW, the others Adam.
    pub weight_decay: f32,
    pub seed: u64,
    /// Refiner loss weight.
    pub beta1: f32,
    /// Alignment loss weight.
    pub beta2: f32,
    /// SSIM weight of the reconstruction loss.
    pub gamma: f32,
    /// Degradations sampled uniformly per training item.
    pub degradations: Vec<Degradation>,
    pub ssa_latents: SsaLatents,
    /// Classifier-free guidance scale, used only in CFG mode.
    pub cfg_scale: f32,
    pub log_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for a stage.
    pub fn for_stage(stage: Stage) -> Self {
        let (steps, batch_size, learning_rate) = match stage {
            Stage::Vqvae => (2000, 4, 1e-3),
            Stage::Var => (4000, 1, 1e-3),
            Stage::SsaFinetune => (500, 2, 3e-4),
        };
        TrainConfig {
            stage,
            steps,
            batch_size,
            learning_rate,
            weight_decay: if stage == Stage::Var { 0.01 } else { 0.0 },
            seed: 0,
            beta1: 2.0,
            beta2: 0.5,
            gamma: 0.2,
            degradations: DegradationKind::ALL.iter().flat_map(|&k| Degradation::grid_of(k)).collect(),
            ssa_latents: SsaLatents::GroundTruth,
            cfg_scale: 2.0,
            log_every: 100,
        }
    }
}

/// Everything a training or inference run reads from a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub vq: VqConfig,
    pub var: VarConfig,
}

pub const KEYS: &[&str] = &[
    "stage",
    "steps",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "seed",
    "beta1",
    "beta2",
    "gamma",
    "degradations",
    "ssa_latents",
    "cfg_scale",
    "log_every",
    "bands",
    "latent_channels",
    "codebook_size",
    "schedule",
    "enc_width",
    "dec_width",
    "ssa_heads",
    "width",
    "depth",
    "heads",
    "refiner_blocks",
    "refiner_width",
    "rope_base",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// `kind` (whole grid) or `kind:value`, comma separated.
pub fn parse_degradations(v: &str) -> Result<Vec<Degradation>> {
    let mut out = Vec::new();
    for item in list(v) {
        match item.split_once(':') {
            Some((k, p)) => out.push(Degradation::parse(k.trim().parse()?, p.trim())?),
            None => out.extend(Degradation::grid_of(item.parse()?)),
        }
    }
    if out.is_empty() {
        return Err(Error::Config("`degradations` is empty".into()));
    }
    Ok(out)
}

fn format_degradation(d: &Degradation) -> String {
    format!("{}:{}", d.kind().name(), d.param_string())
}

impl RunConfig {
    pub fn for_stage(stage: Stage) -> Self {
        RunConfig {
            train: TrainConfig::for_stage(stage),
            vq: VqConfig::default(),
            var: VarConfig::default(),
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let t = &mut self.train;
        match key {
            "stage" => {
                let s: Stage = v.parse()?;
                if s != t.stage {
                    return Err(Error::Config(format!(
                        "config is for stage `{}`, this run is `{}`",
                        s.name(),
                        t.stage.name()
                    )));
                }
            }
            "steps" => t.steps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "learning_rate" => t.learning_rate = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "beta1" => t.beta1 = num(key, v)?,
            "beta2" => t.beta2 = num(key, v)?,
            "gamma" => t.gamma = num(key, v)?,
            "degradations" => t.degradations = parse_degradations(v)?,
            "ssa_latents" => {
                t.ssa_latents = match v {
                    "ground_truth" => SsaLatents::GroundTruth,
                    "generated" => SsaLatents::Generated,
                    _ => return Err(Error::Config(format!("`ssa_latents` is ground_truth or generated, got `{v}`"))),
                }
            }
            "cfg_scale" => t.cfg_scale = num(key, v)?,
            "log_every" => t.log_every = num(key, v)?,
            "bands" => self.vq.bands = num(key, v)?,
            "latent_channels" => self.vq.latent_channels = num(key, v)?,
            "codebook_size" => self.vq.codebook_size = num(key, v)?,
            "schedule" => {
                let sides = list(v).map(|s| num(key, s)).collect::<Result<Vec<usize>>>()?;
                self.vq.schedule = ScaleSchedule::new(sides)?;
            }
            "enc_width" => self.vq.enc_width = num(key, v)?,
            "dec_width" => self.vq.dec_width = num(key, v)?,
            "ssa_heads" => self.vq.ssa_heads = num(key, v)?,
            "width" => self.var.width = num(key, v)?,
            "depth" => self.var.depth = num(key, v)?,
            "heads" => self.var.heads = num(key, v)?,
            "refiner_blocks" => self.var.refiner_blocks = num(key, v)?,
            "refiner_width" => self.var.refiner_width = num(key, v)?,
            "rope_base" => self.var.rope_base = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(d) => Error::Config(format!("line {}: {d}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 {
            return Err(Error::Config("`steps` and `batch_size` must be positive".into()));
        }
        if !(t.learning_rate > 0.0) || !t.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be positive", t.learning_rate)));
        }
        for (k, w) in [("weight_decay", t.weight_decay), ("beta1", t.beta1), ("beta2", t.beta2), ("gamma", t.gamma)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("`{k}` = {w} must be a finite non-negative weight")));
            }
        }
        if t.log_every == 0 {
            return Err(Error::Config("`log_every` must be positive".into()));
        }
        self.vq.validate()?;
        self.var.validate()
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("stage", t.stage.name().into());
        put("steps", t.steps.to_string());
        put("batch_size", t.batch_size.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("seed", t.seed.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("gamma", t.gamma.to_string());
        put(
            "degradations",
            t.degradations.iter().map(format_degradation).collect::<Vec<_>>().join(","),
        );
        put(
            "ssa_latents",
            match t.ssa_latents {
                SsaLatents::GroundTruth => "ground_truth",
                SsaLatents::Generated => "generated",
            }
            .into(),
        );
        put("cfg_scale", t.cfg_scale.to_string());
        put("log_every", t.log_every.to_string());
        let q = &self.vq;
        put("bands", q.bands.to_string());
        put("latent_channels", q.latent_channels.to_string());
        put("codebook_size", q.codebook_size.to_string());
        put(
            "schedule",
            q.schedule.sides().iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        put("enc_width", q.enc_width.to_string());
        put("dec_width", q.dec_width.to_string());
        put("ssa_heads", q.ssa_heads.to_string());
        let v = &self.var;
        put("width", v.width.to_string());
        put("depth", v.depth.to_string());
        put("heads", v.heads.to_string());
        put("refiner_blocks", v.refiner_blocks.to_string());
        put("refiner_width", v.refiner_width.to_string());
        put("rope_base", v.rope_base.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_loss_weights() {
        let c = RunConfig::for_stage(Stage::Var);
        assert_eq!((c.train.beta1, c.train.beta2, c.train.gamma), (2.0, 0.5, 0.2));
        assert_eq!(c.train.degradations.len(), 3 + 4 + 3 + 3 + 3 + 3);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::for_stage(Stage::Vqvae);
        c.apply_text("# desk run\nsteps = 10\nschedule = 1, 2, 4, 8 # pyramid\ndegradations = iid_gaussian_noise:30, gaussian_blur\n")
            .unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.degradations.len(), 4);
        let mut back = RunConfig::for_stage(Stage::Vqvae);
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn bad_lines_are_rejected() {
        let mut c = RunConfig::for_stage(Stage::Var);
        for text in ["nonsense = 1", "steps", "steps = many", "stage = vqvae", "schedule = 4,2"] {
            assert!(matches!(c.apply_text(text), Err(Error::Config(_))), "{text}");
        }
        assert!(matches!(c.apply_text("degradations = iid_gaussian_noise:31"), Err(Error::Parameter(_))));
        assert!(matches!(c.apply_text("degradations = fog"), Err(Error::Taxonomy(_))));
        c.train.steps = 0;
        assert!(c.validate().is_err());
    }
}
