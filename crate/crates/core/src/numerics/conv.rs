//! im2col-based 2D convolution over `N x C x H x W` tensors.

use super::kernels::gemm;
use crate::error::{Error, Result};

/// How out-of-bounds taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Clamp to the nearest edge pixel.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub groups: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: kernel / 2,
            pad_mode: PadMode::Zeros,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shapes("conv2d", x, w));
        }
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (o, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
        let g = spec.groups;
        if g == 0 || c % g != 0 || o % g != 0 || cg != c / g || spec.stride == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("input {x:?} weight {w:?} groups {g} are inconsistent"),
            ));
        }
        if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
            return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} larger than padded input {x:?}")));
        }
        let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho,
            wo,
            spec,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }

    pub fn macs(&self) -> u64 {
        let cg = self.c / self.spec.groups;
        (self.n * self.o * self.ho * self.wo * cg * self.kh * self.kw) as u64
    }

    fn cg(&self) -> usize {
        self.c / self.spec.groups
    }

    fn og(&self) -> usize {
        self.o / self.spec.groups
    }

    /// Source index along one axis, `None` for a zero tap.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k) as isize - self.spec.pad as isize;
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            match self.spec.pad_mode {
                PadMode::Zeros => None,
                PadMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
            }
        }
    }

    fn is_depthwise(&self) -> bool {
        self.cg() == 1 && self.og() == 1
    }

    /// Source rows for every `(oy, ky)` and columns for every `(ox, kx)`.
    fn taps(&self) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        let rows = (0..self.ho)
            .flat_map(|o| (0..self.kh).map(move |k| (o, k)))
            .map(|(o, k)| self.src(o, k, self.h))
            .collect();
        let cols = (0..self.wo)
            .flat_map(|o| (0..self.kw).map(move |k| (o, k)))
            .map(|(o, k)| self.src(o, k, self.w))
            .collect();
        (rows, cols)
    }

    fn im2col(&self, plane: &[f32], cols: &mut [f32]) {
        let (h, w, kh, kw, ho, wo) = (self.h, self.w, self.kh, self.kw, self.ho, self.wo);
        let q = ho * wo;
        for c in 0..self.cg() {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let dst = &mut cols[row * q..(row + 1) * q];
                    for oy in 0..ho {
                        let iy = self.src(oy, ky, h);
                        for ox in 0..wo {
                            dst[oy * wo + ox] = match (iy, self.src(ox, kx, w)) {
                                (Some(y), Some(x)) => plane[(c * h + y) * w + x],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], plane: &mut [f32]) {
        let (h, w, kh, kw, ho, wo) = (self.h, self.w, self.kh, self.kw, self.ho, self.wo);
        let q = ho * wo;
        for c in 0..self.cg() {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let src = &cols[row * q..(row + 1) * q];
                    for oy in 0..ho {
                        let Some(y) = self.src(oy, ky, h) else { continue };
                        for ox in 0..wo {
                            if let Some(x) = self.src(ox, kx, w) {
                                plane[(c * h + y) * w + x] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward(g: &ConvGeom, x: &[f32], w: &[f32], out: &mut [f32]) {
    let (rows, cols) = g.taps();
    let (q, hw, kk) = (g.ho * g.wo, g.h * g.w, g.kh * g.kw);
    for plane in 0..g.n * g.c {
        let src = &x[plane * hw..(plane + 1) * hw];
        let wk = &w[(plane % g.c) * kk..(plane % g.c + 1) * kk];
        let dst = &mut out[plane * q..(plane + 1) * q];
        for oy in 0..g.ho {
            for ky in 0..g.kh {
                let Some(iy) = rows[oy * g.kh + ky] else { continue };
                let line = &src[iy * g.w..(iy + 1) * g.w];
                let wrow = &wk[ky * g.kw..(ky + 1) * g.kw];
                for ox in 0..g.wo {
                    let taps = &cols[ox * g.kw..(ox + 1) * g.kw];
                    let mut acc = 0.0f32;
                    for (t, &wv) in taps.iter().zip(wrow) {
                        if let Some(ix) = *t {
                            acc += wv * line[ix];
                        }
                    }
                    dst[oy * g.wo + ox] += acc;
                }
            }
        }
    }
}

fn depthwise_backward(g: &ConvGeom, gout: &[f32], x: &[f32], w: &[f32], gx: Option<&mut [f32]>, gw: Option<&mut [f32]>) {
    let (rows, cols) = g.taps();
    let (q, hw, kk) = (g.ho * g.wo, g.h * g.w, g.kh * g.kw);
    let mut gx = gx;
    let mut gw = gw;
    for plane in 0..g.n * g.c {
        let ch = plane % g.c;
        let src = &x[plane * hw..(plane + 1) * hw];
        let go = &gout[plane * q..(plane + 1) * q];
        for oy in 0..g.ho {
            for ky in 0..g.kh {
                let Some(iy) = rows[oy * g.kh + ky] else { continue };
                for ox in 0..g.wo {
                    let gv = go[oy * g.wo + ox];
                    for kx in 0..g.kw {
                        let Some(ix) = cols[ox * g.kw + kx] else { continue };
                        let k = ch * kk + ky * g.kw + kx;
                        let si = iy * g.w + ix;
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[k] += gv * src[si];
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[plane * hw + si] += gv * w[k];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
    let (cg, og, q) = (g.cg(), g.og(), g.ho * g.wo);
    if g.is_depthwise() {
        let mut out = vec![0.0f32; g.n * g.o * q];
        depthwise_forward(g, x, w, &mut out);
        if let Some(b) = b {
            for (i, dst) in out.chunks_exact_mut(q).enumerate() {
                dst.iter_mut().for_each(|v| *v += b[i % g.o]);
            }
        }
        return out;
    }
    let kdim = cg * g.kh * g.kw;
    let mut out = vec![0.0f32; g.n * g.o * q];
    let mut cols = vec![0.0f32; kdim * q];
    for n in 0..g.n {
        for grp in 0..g.spec.groups {
            let plane = &x[(n * g.c + grp * cg) * g.h * g.w..(n * g.c + (grp + 1) * cg) * g.h * g.w];
            g.im2col(plane, &mut cols);
            let wg = &w[grp * og * kdim..(grp + 1) * og * kdim];
            let dst = &mut out[(n * g.o + grp * og) * q..(n * g.o + (grp + 1) * og) * q];
            gemm(og, kdim, q, wg, false, &cols, false, dst, 0.0);
        }
        if let Some(b) = b {
            for o in 0..g.o {
                let dst = &mut out[(n * g.o + o) * q..(n * g.o + o + 1) * q];
                dst.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

/// Returns gradients with respect to input, weight and bias.
pub(crate) fn backward(
    g: &ConvGeom,
    gout: &[f32],
    x: &[f32],
    w: &[f32],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let (cg, og, q) = (g.cg(), g.og(), g.ho * g.wo);
    let kdim = cg * g.kh * g.kw;
    let mut gx = need_x.then(|| vec![0.0f32; x.len()]);
    let mut gw = need_w.then(|| vec![0.0f32; w.len()]);
    let mut gb = vec![0.0f32; g.o];
    if g.is_depthwise() {
        for (i, go) in gout.chunks_exact(q).enumerate() {
            gb[i % g.o] += go.iter().sum::<f32>();
        }
        depthwise_backward(g, gout, x, w, gx.as_deref_mut(), gw.as_deref_mut());
        return (gx, gw, gb);
    }
    let mut cols = vec![0.0f32; kdim * q];
    for n in 0..g.n {
        for o in 0..g.o {
            gb[o] += gout[(n * g.o + o) * q..(n * g.o + o + 1) * q].iter().sum::<f32>();
        }
        for grp in 0..g.spec.groups {
            let go = &gout[(n * g.o + grp * og) * q..(n * g.o + (grp + 1) * og) * q];
            let pr = (n * g.c + grp * cg) * g.h * g.w..(n * g.c + (grp + 1) * cg) * g.h * g.w;
            if let Some(gw) = gw.as_mut() {
                g.im2col(&x[pr.clone()], &mut cols);
                let dst = &mut gw[grp * og * kdim..(grp + 1) * og * kdim];
                gemm(og, q, kdim, go, false, &cols, true, dst, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                let wg = &w[grp * og * kdim..(grp + 1) * og * kdim];
                gemm(kdim, og, q, wg, true, go, false, &mut cols, 0.0);
                g.col2im(&cols, &mut gx[pr]);
            }
        }
    }
    (gx, gw, gb)
}
