//! Full-reference PSNR and SSIM, computed per band and averaged.

use crate::error::{Error, Result};
use crate::hsidata::Cube;
use crate::numerics::{ConvSpec, PadMode, Tape, Tensor, Var};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    /// `(psnr_db, ssim)` of every band.
    pub per_band: Vec<(f64, f64)>,
}

fn check_same(op: &'static str, a: &Cube, b: &Cube) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shapes(op, a.values().shape(), b.values().shape()));
    }
    Ok(())
}

fn band_psnr(a: &[f32], b: &[f32], max_val: f64) -> f64 {
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &Cube, b: &Cube, max_val: f64) -> Result<f64> {
    check_same("psnr", a, b)?;
    let c = a.c();
    Ok((0..c).map(|k| band_psnr(&a.band(k), &b.band(k), max_val)).sum::<f64>() / c as f64)
}

/// Normalised `SSIM_WINDOW`-tap Gaussian.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn band_ssim(a: &[f32], b: &[f32], h: usize, w: usize, win: &[f64]) -> f64 {
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = win.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut total = 0.0f64;
    for y in 0..ho {
        for x in 0..wo {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let wt = win[i] * win[j];
                    let p = (y + i) * w + x + j;
                    let (va, vb) = (a[p] as f64, b[p] as f64);
                    ma += wt * va;
                    mb += wt * vb;
                    aa += wt * va * va;
                    bb += wt * vb * vb;
                    ab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (ho * wo) as f64
}

fn check_window(op: &'static str, a: &Cube) -> Result<()> {
    if a.h() < SSIM_WINDOW || a.w() < SSIM_WINDOW {
        return Err(Error::dim(
            op,
            format!("{}x{} cube is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.h(), a.w()),
        ));
    }
    Ok(())
}

/// Mean over bands of Gaussian-windowed SSIM on the valid region.
pub fn ssim(a: &Cube, b: &Cube) -> Result<f64> {
    Ok(report(a, b)?.ssim)
}

pub fn report(a: &Cube, b: &Cube) -> Result<MetricReport> {
    check_same("ssim", a, b)?;
    check_window("ssim", a)?;
    let win = gaussian_window();
    let (h, w, c) = a.dims();
    let per_band: Vec<(f64, f64)> = (0..c)
        .map(|k| {
            let (x, y) = (a.band(k), b.band(k));
            (band_psnr(&x, &y, 1.0), band_ssim(&x, &y, h, w, &win))
        })
        .collect();
    Ok(MetricReport {
        psnr_db: per_band.iter().map(|p| p.0).sum::<f64>() / c as f64,
        ssim: per_band.iter().map(|p| p.1).sum::<f64>() / c as f64,
        per_band,
    })
}

/// Differentiable SSIM of two `N x C x H x W` maps, averaged over every
/// window position, band and batch item.
pub fn ssim_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let map = ssim_map_tape(tape, a, b)?;
    Ok(tape.mean(map))
}

/// Per-window SSIM values, `N x C x (H - 10) x (W - 10)`.
pub fn ssim_map_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if s != tape.shape(b) {
        return Err(Error::shapes("ssim", &s, tape.shape(b)));
    }
    if s.len() != 4 || s[2] < SSIM_WINDOW || s[3] < SSIM_WINDOW {
        return Err(Error::dim("ssim", format!("input {s:?} smaller than the window")));
    }
    let c = s[1];
    let g: Vec<f32> = gaussian_window().into_iter().map(|v| v as f32).collect();
    let taps: Vec<f32> = (0..c).flat_map(|_| g.iter().copied()).collect();
    // The window is separable: filter rows then columns.
    let wv = tape.constant(Tensor::new([c, 1, SSIM_WINDOW, 1], taps.clone())?);
    let wh = tape.constant(Tensor::new([c, 1, 1, SSIM_WINDOW], taps)?);
    let spec = ConvSpec {
        stride: 1,
        pad: 0,
        pad_mode: PadMode::Zeros,
        groups: c,
    };
    let filt = |tape: &mut Tape, x: Var| {
        let y = tape.conv2d(x, wv, None, spec)?;
        tape.conv2d(y, wh, None, spec)
    };
    let ma = filt(tape, a)?;
    let mb = filt(tape, b)?;
    let a2 = tape.mul(a, a)?;
    let b2 = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let eaa = filt(tape, a2)?;
    let ebb = filt(tape, b2)?;
    let eab = filt(tape, ab)?;
    let mama = tape.mul(ma, ma)?;
    let mbmb = tape.mul(mb, mb)?;
    let mamb = tape.mul(ma, mb)?;
    let va = tape.sub(eaa, mama)?;
    let vb = tape.sub(ebb, mbmb)?;
    let cov = tape.sub(eab, mamb)?;
    let (c1, c2) = ((SSIM_K1 * SSIM_K1) as f32, (SSIM_K2 * SSIM_K2) as f32);
    let l_num = tape.scale(mamb, 2.0);
    let l_num = tape.add_scalar(l_num, c1);
    let cs_num = tape.scale(cov, 2.0);
    let cs_num = tape.add_scalar(cs_num, c2);
    let l_den = tape.add(mama, mbmb)?;
    let l_den = tape.add_scalar(l_den, c1);
    let cs_den = tape.add(va, vb)?;
    let cs_den = tape.add_scalar(cs_den, c2);
    let num = tape.mul(l_num, cs_num)?;
    let den = tape.mul(l_den, cs_den)?;
    tape.div(num, den)
}
