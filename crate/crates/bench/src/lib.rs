//! Fixtures shared by the benchmarks: desk-size models with untrained weights.

use hsivar_core::degrade::{Degradation, DegradationSpec};
use hsivar_core::hsidata::{synth_cube, Cube, SceneSpec};
use hsivar_core::msvq::{SsaDecoder, VqConfig, VqVae};
use hsivar_core::pipeline::Models;
use hsivar_core::vartx::{VarConfig, VarModel};

pub fn desk_models(seed: u64) -> Models {
    let vq = VqVae::new(VqConfig::default(), seed).expect("default config is valid");
    let var = VarModel::new(VarConfig::default(), &vq, seed + 1).expect("default config is valid");
    let ssa = SsaDecoder::from_vqvae(&vq, seed + 2).expect("layouts match");
    Models::new(vq, var, ssa).expect("configs agree")
}

pub fn desk_cube(seed: u64) -> Cube {
    let side = VqConfig::default().image_side();
    synth_cube(&SceneSpec::with_seed(seed), side, side, VqConfig::default().bands).expect("valid size")
}

pub fn noise30() -> DegradationSpec {
    DegradationSpec::new(Degradation::IidGaussianNoise { sigma: 30 }, 0).expect("grid value")
}
