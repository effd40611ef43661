use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hsivar_core::checkpoint::Checkpoint;
use hsivar_core::degrade::{self, Degradation, DegradationKind, DegradationSpec};
use hsivar_core::hsidata::{decode_hsc1, encode_hsc1, synth_cube, Cube, SceneSpec};
use hsivar_core::metrics;
use hsivar_core::pipeline::{self, Dataset, Models, RestoreOptions, RunConfig, Stage, TrainLog};
use hsivar_core::vartx::{GuidanceMode, Sampler};

use crate::args::*;
use crate::files::{read, require_inputs, sibling, write_atomic, Manifest};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(verb: Verb) -> Result<()> {
    match verb {
        Verb::Synth(a) => synth(a),
        Verb::Degrade(a) => degrade_cmd(a),
        Verb::TrainVqvae(a) => train_vqvae(a),
        Verb::TrainVar(a) => train_var(a),
        Verb::FinetuneSsa(a) => finetune_ssa(a),
        Verb::Restore(a) => restore(a),
        Verb::Eval(a) => eval(a),
        Verb::ReportComplexity(a) => report_complexity(a),
    }
}

fn load_cube(path: &Path, m: &mut Manifest, role: &str) -> Result<Cube> {
    let bytes = read(path)?;
    m.input(role, path, &bytes);
    Ok(decode_hsc1(&bytes)?)
}

fn load_checkpoint(path: &Path, m: &mut Manifest, role: &str) -> Result<Checkpoint> {
    let bytes = read(path)?;
    m.input(role, path, &bytes);
    Ok(Checkpoint::from_bytes(&bytes)?)
}

fn write_cube(path: &Path, cube: &Cube, m: &mut Manifest) -> Result<()> {
    let bytes = encode_hsc1(cube);
    write_atomic(path, &bytes)?;
    m.output("cube", path, &bytes);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SceneSpec::with_seed(a.seed);
    if let Some(v) = a.endmembers {
        spec.num_endmembers = v;
    }
    if let Some(v) = a.smoothness {
        spec.spectral_smoothness = v;
    }
    if let Some(v) = a.blobs {
        spec.spatial_blob_count = v;
    }
    let cube = synth_cube(&spec, a.h, a.w, a.c)?;
    let mut m = Manifest::new("synth");
    m.put("h", a.h);
    m.put("w", a.w);
    m.put("c", a.c);
    m.put("seed", a.seed);
    m.put("endmembers", spec.num_endmembers);
    m.put("smoothness", spec.spectral_smoothness);
    m.put("blobs", spec.spatial_blob_count);
    write_cube(&a.out, &cube, &mut m)?;
    m.write_beside(&a.out)
}

fn degrade_cmd(a: DegradeArgs) -> Result<()> {
    let kind: DegradationKind = a.kind.parse()?;
    let params = a.params();
    let value = match params.as_slice() {
        [(k, v)] if *k == kind.param_key() => *v,
        _ => {
            return Err(CliError::Usage(format!(
                "{kind} takes exactly one parameter flag, --{}",
                kind.param_key().replace('_', "-")
            )))
        }
    };
    let spec = DegradationSpec::new(Degradation::parse(kind, value)?, a.seed)?;
    require_inputs(&[&a.input])?;
    let mut m = Manifest::new("degrade");
    let hq = load_cube(&a.input, &mut m, "cube")?;
    let lq = degrade::apply(&spec, &hq)?;
    m.put("degradation", spec.to_sidecar());
    let side = format!("{}\n", spec.to_sidecar());
    let side_path = sibling(&a.out, "degradation");
    write_cube(&a.out, &lq, &mut m)?;
    write_atomic(&side_path, side.as_bytes())?;
    m.output("degradation", &side_path, side.as_bytes());
    m.write_beside(&a.out)
}

/// Sorted HSC1 files under the given files and directories.
fn data_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| hsivar_core::Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "hsc"))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::Usage(format!("data path `{}` does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::Core(hsivar_core::Error::EmptyDataset("no .hsc files under --data".into())));
    }
    Ok(out)
}

fn load_data(paths: &[PathBuf], m: &mut Manifest) -> Result<Dataset> {
    let files = data_files(paths)?;
    let mut cubes = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        cubes.push(load_cube(f, m, &format!("data{i}"))?);
    }
    Ok(Dataset::new(cubes)?)
}

/// Defaults, then the config file, then flags.
fn configure(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(path) = &a.config {
        require_inputs(&[path])?;
        let text = String::from_utf8(read(path)?)
            .map_err(|_| CliError::Usage(format!("config `{}` is not UTF-8", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in &a.overrides.0 {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(())
}

fn loss_table(log: &TrainLog, head: &str) -> String {
    let mut s = format!("step\tloss\t{head}\n");
    for (i, l) in log.losses.iter().enumerate() {
        write!(s, "{i}\t{l:.6}").unwrap();
        if let Some(c) = log.components.get(i) {
            for v in c {
                write!(s, "\t{v:.6}").unwrap();
            }
        }
        if let Some(acc) = log.accuracy.get(i) {
            for v in acc {
                write!(s, "\t{v:.4}").unwrap();
            }
        }
        s.push('\n');
    }
    s
}

fn finish_training(out: &Path, ck: &Checkpoint, log: &TrainLog, head: &str, mut m: Manifest) -> Result<()> {
    let bytes = ck.to_bytes();
    let table = loss_table(log, head);
    let table_path = sibling(out, "losses.tsv");
    write_atomic(out, &bytes)?;
    write_atomic(&table_path, table.as_bytes())?;
    m.output("checkpoint", out, &bytes);
    m.output("losses", &table_path, table.as_bytes());
    if let Some(l) = log.losses.last() {
        m.put("final_loss", format!("{l:.6}"));
    }
    m.write_beside(out)
}

fn train_vqvae(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::for_stage(Stage::Vqvae);
    configure(&mut cfg, &a)?;
    let mut m = Manifest::new("train-vqvae");
    m.put_block("config", &cfg.to_text());
    let data = load_data(&a.data, &mut m)?;
    let (vq, log) = pipeline::train_vqvae(&cfg, &data)?;
    finish_training(&a.out, &pipeline::vqvae_checkpoint(&vq), &log, "rec\tcodebook\tcommitment", m)
}

fn train_var(a: TrainVarArgs) -> Result<()> {
    require_inputs(&[&a.vqvae])?;
    let mut m = Manifest::new("train-var");
    let vq = pipeline::vqvae_from_checkpoint(&load_checkpoint(&a.vqvae, &mut m, "vqvae")?)?;
    let mut cfg = RunConfig::for_stage(Stage::Var);
    cfg.vq = vq.cfg.clone();
    configure(&mut cfg, &a.train)?;
    m.put_block("config", &cfg.to_text());
    let data = load_data(&a.train.data, &mut m)?;
    let (var, log) = pipeline::train_var(&cfg, &vq, &data)?;
    let head: Vec<String> = ["ce", "refiner", "align"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=vq.cfg.schedule.len()).map(|k| format!("acc{k}")))
        .collect();
    finish_training(&a.train.out, &pipeline::var_checkpoint(&var), &log, &head.join("\t"), m)
}

fn finetune_ssa(a: FinetuneArgs) -> Result<()> {
    require_inputs(&[&a.vqvae, &a.var])?;
    let mut m = Manifest::new("finetune-ssa");
    let vq = pipeline::vqvae_from_checkpoint(&load_checkpoint(&a.vqvae, &mut m, "vqvae")?)?;
    let var = pipeline::var_from_checkpoint(&load_checkpoint(&a.var, &mut m, "var")?)?;
    let mut cfg = RunConfig::for_stage(Stage::SsaFinetune);
    cfg.vq = vq.cfg.clone();
    cfg.var = var.cfg.clone();
    configure(&mut cfg, &a.train)?;
    m.put_block("config", &cfg.to_text());
    let data = load_data(&a.train.data, &mut m)?;
    let (ssa, log) = pipeline::finetune_ssa(&cfg, &vq, &var, &data)?;
    finish_training(&a.train.out, &pipeline::ssa_checkpoint(&ssa, &vq.cfg), &log, "", m)
}

fn load_models(p: &ModelPaths, m: &mut Manifest) -> Result<Models> {
    require_inputs(&[&p.vqvae, &p.var, &p.ssa])?;
    let vq = load_checkpoint(&p.vqvae, m, "vqvae")?;
    let var = load_checkpoint(&p.var, m, "var")?;
    let ssa = load_checkpoint(&p.ssa, m, "ssa")?;
    Ok(Models::from_checkpoints(&vq, &var, &ssa)?)
}

fn restore(a: RestoreArgs) -> Result<()> {
    let side_path = a.degradation.clone().unwrap_or_else(|| sibling(&a.input, "degradation"));
    require_inputs(&[&a.input, &side_path])?;
    let mode = match a.mode {
        Mode::Dag => GuidanceMode::Dag,
        Mode::Cfg => GuidanceMode::Cfg { scale: a.cfg_scale },
    };
    let sampler = match a.sampler {
        SamplerKind::Greedy => Sampler::Greedy,
        SamplerKind::TopK => {
            if a.top_k == 0 || !(a.temperature > 0.0) {
                return Err(CliError::Usage("--top-k and --temperature must be positive".into()));
            }
            Sampler::TopK {
                temperature: a.temperature,
                k: a.top_k,
                seed: a.seed,
            }
        }
    };
    let mut m = Manifest::new("restore");
    let side = read(&side_path)?;
    m.input("degradation", &side_path, &side);
    let side = String::from_utf8_lossy(&side);
    let spec = DegradationSpec::parse_sidecar(side.trim())?;
    let lq = load_cube(&a.input, &mut m, "cube")?;
    let models = load_models(&a.models, &mut m)?;
    m.put("degradation", spec.to_sidecar());
    m.put("mode", format!("{:?}", a.mode).to_lowercase());
    if let GuidanceMode::Cfg { scale } = mode {
        m.put("cfg_scale", scale);
    }
    match sampler {
        Sampler::Greedy => m.put("sampler", "greedy"),
        Sampler::TopK { temperature, k, seed } => {
            m.put("sampler", "top_k");
            m.put("temperature", temperature);
            m.put("top_k", k);
            m.put("seed", seed);
        }
    }
    let r = models.restore(&lq, &spec, &RestoreOptions { mode, sampler })?;
    m.put("macs", r.counters.macs);
    m.put("transformer_forwards", r.counters.transformer_forwards);
    write_cube(&a.out, &r.cube, &mut m)?;
    m.write_beside(&a.out)
}

fn eval(a: EvalArgs) -> Result<()> {
    require_inputs(&[&a.reference, &a.input])?;
    let mut m = Manifest::new("eval");
    let reference = load_cube(&a.reference, &mut m, "reference")?;
    let cube = load_cube(&a.input, &mut m, "cube")?;
    let r = metrics::report(&cube, &reference)?;
    let mut text = format!("psnr_db = {:.6}\nssim = {:.6}\n", r.psnr_db, r.ssim);
    for (b, (p, s)) in r.per_band.iter().enumerate() {
        writeln!(text, "band{b} = {p:.6} {s:.6}").unwrap();
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write_atomic(out, text.as_bytes())?;
        m.output("report", out, text.as_bytes());
        m.write_beside(out)?;
    }
    Ok(())
}

fn report_complexity(a: ComplexityArgs) -> Result<()> {
    let mut m = Manifest::new("report-complexity");
    let models = load_models(&a.models, &mut m)?;
    let r = pipeline::complexity_report(&models, a.cfg_scale)?;
    let mut text = String::new();
    for (name, c) in [("dag", r.dag), ("cfg", r.cfg)] {
        writeln!(text, "{name}.params = {}", c.params).unwrap();
        writeln!(text, "{name}.macs = {}", c.macs).unwrap();
        writeln!(text, "{name}.forwards = {}", c.forwards).unwrap();
    }
    writeln!(text, "mac_ratio = {:.4}", r.mac_ratio()).unwrap();
    print!("{text}");
    if let Some(out) = &a.out {
        m.put("cfg_scale", a.cfg_scale);
        write_atomic(out, text.as_bytes())?;
        m.output("report", out, text.as_bytes());
        m.write_beside(out)?;
    }
    Ok(())
}
