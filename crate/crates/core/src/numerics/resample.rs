//! Separable 2D resampling over the two trailing axes of an `N x C x H x W` grid.

/// Interpolation kernel for [`Tape::interpolate_2d`](super::Tape::interpolate_2d).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    /// Half-pixel-centred linear interpolation with edge clamping.
    Bilinear,
    /// Adaptive average pooling: each output cell averages the input cells it covers.
    Area,
}

/// Sparse linear map from one axis length to another.
#[derive(Clone, Debug)]
pub(crate) struct AxisMap {
    pub inp: usize,
    pub out: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    pub fn new(mode: Interp, inp: usize, out: usize) -> Self {
        let scale = inp as f64 / out as f64;
        let taps = (0..out)
            .map(|i| match mode {
                Interp::Nearest => {
                    let src = ((i as f64 * scale).floor() as usize).min(inp - 1);
                    vec![(src, 1.0)]
                }
                Interp::Bilinear => {
                    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(inp - 1);
                    let i1 = (i0 + 1).min(inp - 1);
                    let frac = src - i0 as f64;
                    if i0 == i1 || frac == 0.0 {
                        vec![(i0, 1.0)]
                    } else {
                        vec![(i0, 1.0 - frac), (i1, frac)]
                    }
                }
                Interp::Area => {
                    let start = (i * inp) / out;
                    let end = ((i + 1) * inp).div_ceil(out);
                    let w = 1.0 / (end - start) as f64;
                    (start..end).map(|s| (s, w)).collect()
                }
            })
            .collect();
        AxisMap { inp, out, taps }
    }
}

/// Applies `rows` along H and `cols` along W for `planes` independent planes.
pub(crate) fn forward(x: &[f32], planes: usize, rows: &AxisMap, cols: &AxisMap) -> Vec<f32> {
    let (h, w, ho, wo) = (rows.inp, cols.inp, rows.out, cols.out);
    let mut out = vec![0.0f32; planes * ho * wo];
    let mut tmp = vec![0.0f64; h * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for a in 0..h {
            for (j, taps) in cols.taps.iter().enumerate() {
                tmp[a * wo + j] = taps.iter().map(|&(b, wt)| wt * src[a * w + b] as f64).sum();
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (i, taps) in rows.taps.iter().enumerate() {
            for j in 0..wo {
                dst[i * wo + j] = taps.iter().map(|&(a, wt)| wt * tmp[a * wo + j]).sum::<f64>() as f32;
            }
        }
    }
    out
}

/// Adjoint of [`forward`]: scatters output gradients back onto the input grid.
pub(crate) fn backward(g: &[f32], planes: usize, rows: &AxisMap, cols: &AxisMap) -> Vec<f32> {
    let (h, w, ho, wo) = (rows.inp, cols.inp, rows.out, cols.out);
    let mut gx = vec![0.0f32; planes * h * w];
    let mut tmp = vec![0.0f64; h * wo];
    let mut acc = vec![0.0f64; h * w];
    for p in 0..planes {
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for (i, taps) in rows.taps.iter().enumerate() {
            for &(a, wt) in taps {
                for j in 0..wo {
                    tmp[a * wo + j] += wt * gp[i * wo + j] as f64;
                }
            }
        }
        acc.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..h {
            for (j, taps) in cols.taps.iter().enumerate() {
                for &(b, wt) in taps {
                    acc[a * w + b] += wt * tmp[a * wo + j];
                }
            }
        }
        for (d, s) in gx[p * h * w..(p + 1) * h * w].iter_mut().zip(&acc) {
            *d = *s as f32;
        }
    }
    gx
}
