//! Hyperspectral cubes, synthetic scenes, patch extraction and the HSC1
//! file format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const HSC1_MAGIC: &[u8; 4] = b"HSC1";
const HSC1_HEADER: usize = 16;

/// An `H x W x C` cube stored row-major in `(y, x, band)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    values: Tensor,
}

impl Cube {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::dim("cube", format!("dims {h}x{w}x{c} must be positive")));
        }
        Ok(Cube {
            values: Tensor::new([h, w, c], data)?,
        })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Result<Self> {
        Self::new(h, w, c, vec![value; h * w * c])
    }

    pub fn h(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn c(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h(), self.w(), self.c())
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn data(&self) -> &[f32] {
        self.values.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.values.data_mut()
    }

    pub fn at(&self, y: usize, x: usize, b: usize) -> f32 {
        self.values.data()[(y * self.w() + x) * self.c() + b]
    }

    pub fn at_mut(&mut self, y: usize, x: usize, b: usize) -> &mut f32 {
        let (w, c) = (self.w(), self.c());
        &mut self.values.data_mut()[(y * w + x) * c + b]
    }

    /// One band as an `H x W` row-major plane.
    pub fn band(&self, b: usize) -> Vec<f32> {
        let c = self.c();
        self.data().iter().skip(b).step_by(c).copied().collect()
    }

    /// `(min, max)` of every band.
    pub fn band_ranges(&self) -> Vec<(f32, f32)> {
        (0..self.c())
            .map(|b| {
                self.band(b)
                    .into_iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            })
            .collect()
    }

    /// Global min-max scaling to `[0, 1]`. A cube with zero range is only
    /// clamped, so normalising twice changes nothing.
    pub fn normalized(&self) -> Cube {
        let (lo, hi) = self
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let values = if range > 0.0 {
            self.values.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
        } else {
            self.values.map(|v| v.clamp(0.0, 1.0))
        };
        Cube { values }
    }

    pub fn clamped(mut self) -> Cube {
        self.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Channels-first `1 x C x H x W` copy.
    pub fn to_nchw(&self) -> Tensor {
        Self::stack_nchw(std::slice::from_ref(self)).expect("single cube always stacks")
    }

    /// Stacks equally sized cubes into `N x C x H x W`.
    pub fn stack_nchw(cubes: &[Cube]) -> Result<Tensor> {
        let first = cubes.first().ok_or_else(|| Error::EmptyDataset("no cubes to stack".into()))?;
        let (h, w, c) = first.dims();
        let mut out = vec![0.0f32; cubes.len() * c * h * w];
        for (n, cube) in cubes.iter().enumerate() {
            if cube.dims() != (h, w, c) {
                return Err(Error::shapes("stack_nchw", &[h, w, c], cube.values.shape()));
            }
            let dst = &mut out[n * c * h * w..(n + 1) * c * h * w];
            for (p, px) in cube.data().chunks_exact(c).enumerate() {
                for (b, &v) in px.iter().enumerate() {
                    dst[b * h * w + p] = v;
                }
            }
        }
        Tensor::new([cubes.len(), c, h, w], out)
    }

    /// Inverse of [`Cube::to_nchw`] for a batch of one.
    pub fn from_nchw(t: &Tensor) -> Result<Cube> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::dim("from_nchw", format!("expected 1 x C x H x W, got {s:?}")));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut data = vec![0.0f32; c * h * w];
        for b in 0..c {
            for p in 0..h * w {
                data[p * c + b] = t.data()[b * h * w + p];
            }
        }
        Cube::new(h, w, c, data)
    }
}

/// Parameters of a synthetic linear-mixing scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub num_endmembers: usize,
    /// Width (in bands) of the Gaussian bumps that make up each signature.
    pub spectral_smoothness: f32,
    pub spatial_blob_count: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_endmembers: 4,
            spectral_smoothness: 2.0,
            spatial_blob_count: 6,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(seed: u64) -> Self {
        SceneSpec {
            seed,
            ..Self::default()
        }
    }
}

/// Endmember spectra and their per-pixel abundances.
#[derive(Clone, Debug)]
pub struct Scene {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// `E` spectra of length `C`, values in `[0, 1]`.
    pub signatures: Vec<Vec<f32>>,
    /// `E` abundance planes of `H * W`; at every pixel they sum to at most 1.
    pub abundances: Vec<Vec<f32>>,
}

impl Scene {
    pub fn generate(spec: &SceneSpec, h: usize, w: usize, c: usize) -> Result<Scene> {
        if spec.num_endmembers == 0 {
            return Err(Error::Parameter("num_endmembers must be at least 1".into()));
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::dim("synth_cube", format!("dims {h}x{w}x{c} must be positive")));
        }
        let e = spec.num_endmembers;
        let mut rng = Rng::new(spec.seed);
        let width = spec.spectral_smoothness.max(0.5) as f64;

        let signatures = (0..e)
            .map(|_| {
                let bumps: Vec<(f64, f64)> = (0..3)
                    .map(|_| {
                        let centre = rng.uniform_range(-0.5, c as f32 - 0.5) as f64;
                        let amp = rng.uniform_range(-1.0, 1.0) as f64;
                        (centre, amp)
                    })
                    .collect();
                let raw: Vec<f64> = (0..c)
                    .map(|b| {
                        bumps
                            .iter()
                            .map(|&(mu, a)| a * (-(b as f64 - mu).powi(2) / (2.0 * width * width)).exp())
                            .sum()
                    })
                    .collect();
                let lo = rng.uniform_range(0.05, 0.4) as f64;
                let hi = rng.uniform_range(0.6, 0.95) as f64;
                let (rmin, rmax) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                raw.iter()
                    .map(|&v| {
                        let t = if rmax > rmin { (v - rmin) / (rmax - rmin) } else { 0.5 };
                        (lo + (hi - lo) * t) as f32
                    })
                    .collect()
            })
            .collect();

        let mut abundances: Vec<Vec<f64>> = (0..e)
            .map(|_| vec![rng.uniform_range(0.0, 0.3) as f64; h * w])
            .collect();
        let side = h.min(w) as f32;
        for blob in 0..spec.spatial_blob_count {
            let owner = if blob < e { blob } else { rng.below(e) };
            let cy = rng.uniform_range(0.0, h as f32) as f64;
            let cx = rng.uniform_range(0.0, w as f32) as f64;
            let r = rng.uniform_range(side / 8.0, side / 3.0) as f64;
            let amp = rng.uniform_range(0.5, 1.5) as f64;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    abundances[owner][y * w + x] += amp * (-d2 / (2.0 * r * r)).exp();
                }
            }
        }
        for p in 0..h * w {
            let total: f64 = abundances.iter().map(|a| a[p]).sum();
            if total > 1.0 {
                abundances.iter_mut().for_each(|a| a[p] /= total);
            }
        }
        Ok(Scene {
            h,
            w,
            c,
            signatures,
            abundances: abundances
                .into_iter()
                .map(|a| a.into_iter().map(|v| v as f32).collect())
                .collect(),
        })
    }

    /// Linear mixture of the signatures, clipped to `[0, 1]`.
    pub fn render(&self) -> Result<Cube> {
        let mut data = vec![0.0f32; self.h * self.w * self.c];
        for p in 0..self.h * self.w {
            for b in 0..self.c {
                let v: f64 = self
                    .signatures
                    .iter()
                    .zip(&self.abundances)
                    .map(|(s, a)| a[p] as f64 * s[b] as f64)
                    .sum();
                data[p * self.c + b] = (v as f32).clamp(0.0, 1.0);
            }
        }
        Cube::new(self.h, self.w, self.c, data)
    }
}

pub fn synth_cube(spec: &SceneSpec, h: usize, w: usize, c: usize) -> Result<Cube> {
    Scene::generate(spec, h, w, c)?.render()
}

/// A crop together with its top-left corner in the source cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub y: usize,
    pub x: usize,
    pub cube: Cube,
}

/// Square crops on a `stride` grid covering the cube, full band depth.
/// With an `rng` the patch order is shuffled.
pub fn crop_patches(cube: &Cube, size: usize, stride: usize, rng: Option<&mut Rng>) -> Result<Vec<Patch>> {
    let (h, w, c) = cube.dims();
    if size == 0 || size > h.min(w) {
        return Err(Error::dim("crop_patches", format!("patch size {size} for a {h}x{w} cube")));
    }
    if stride == 0 {
        return Err(Error::dim("crop_patches", "stride must be positive"));
    }
    let mut patches = Vec::new();
    for y in (0..=h - size).step_by(stride) {
        for x in (0..=w - size).step_by(stride) {
            let mut data = Vec::with_capacity(size * size * c);
            for yy in y..y + size {
                let start = (yy * w + x) * c;
                data.extend_from_slice(&cube.data()[start..start + size * c]);
            }
            patches.push(Patch {
                y,
                x,
                cube: Cube::new(size, size, c, data)?,
            });
        }
    }
    if let Some(rng) = rng {
        rng.shuffle(&mut patches);
    }
    Ok(patches)
}

pub fn encode_hsc1(cube: &Cube) -> Vec<u8> {
    let (h, w, c) = cube.dims();
    let mut out = Vec::with_capacity(HSC1_HEADER + 4 * h * w * c);
    out.extend_from_slice(HSC1_MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in cube.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_hsc1(bytes: &[u8]) -> Result<Cube> {
    if bytes.len() < 4 || &bytes[..4] != HSC1_MAGIC {
        let found = &bytes[..bytes.len().min(4)];
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {found:?}, expected \"HSC1\""),
        });
    }
    if bytes.len() < HSC1_HEADER {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("header needs {HSC1_HEADER} bytes, file has {}", bytes.len()),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if let Some(i) = [h, w, c].iter().position(|&d| d == 0) {
        return Err(Error::Format {
            offset: 4 + 4 * i as u64,
            detail: format!("zero dimension in {h}x{w}x{c}"),
        });
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format {
            offset: 4,
            detail: format!("dimensions {h}x{w}x{c} overflow"),
        })?;
    let actual = bytes.len() - HSC1_HEADER;
    if actual != expected {
        return Err(Error::Format {
            offset: HSC1_HEADER as u64,
            detail: format!("payload expected {expected} bytes, found {actual}"),
        });
    }
    let data = bytes[HSC1_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Cube::new(h, w, c, data)
}

pub fn save_cube(cube: &Cube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_hsc1(cube)).map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<Cube> {
    let path = path.as_ref();
    decode_hsc1(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_cube(seed: u64) -> Cube {
        synth_cube(&SceneSpec::with_seed(seed), 32, 32, 8).unwrap()
    }

    #[test]
    fn single_flat_endmember_gives_constant_cube() {
        let scene = Scene {
            h: 4,
            w: 5,
            c: 3,
            signatures: vec![vec![0.5; 3]],
            abundances: vec![vec![1.0; 20]],
        };
        let cube = scene.render().unwrap();
        assert!(cube.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn same_seed_same_cube() {
        assert!(default_cube(4).values().bitwise_eq(default_cube(4).values()));
        assert!(!default_cube(4).values().bitwise_eq(default_cube(5).values()));
    }

    #[test]
    fn spectra_are_smoother_than_white_noise() {
        let mut rng = Rng::new(0);
        for seed in 0..5 {
            let cube = default_cube(seed);
            let c = cube.c();
            let (mut smooth, mut noise) = (0.0f64, 0.0f64);
            for px in cube.data().chunks_exact(c) {
                let mean = px.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                let var = px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
                // uniform on [0, a] has variance a^2 / 12
                let a = (12.0 * var).sqrt();
                let white: Vec<f64> = (0..c).map(|_| rng.uniform() as f64 * a).collect();
                let d2 = |s: &[f64]| (1..c - 1).map(|i| (s[i - 1] - 2.0 * s[i] + s[i + 1]).powi(2)).sum::<f64>();
                let px: Vec<f64> = px.iter().map(|&v| v as f64).collect();
                smooth += d2(&px);
                noise += d2(&white);
            }
            assert!(smooth < noise, "seed {seed}: {smooth} vs {noise}");
        }
    }

    #[test]
    fn values_within_unit_interval() {
        let cube = default_cube(9);
        assert!(cube.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_whole_cube_is_identity() {
        let cube = default_cube(1);
        let p = crop_patches(&cube, 32, 32, None).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].cube, cube);
    }

    #[test]
    fn disjoint_tiling() {
        let cube = default_cube(2);
        let p = crop_patches(&cube, 16, 16, None).unwrap();
        assert_eq!(p.len(), 4);
        let mut covered = vec![0u8; 32 * 32];
        for patch in &p {
            for y in 0..16 {
                for x in 0..16 {
                    covered[(patch.y + y) * 32 + patch.x + x] += 1;
                }
            }
        }
        assert!(covered.iter().all(|&n| n == 1));
    }

    #[test]
    fn shuffled_overlapping_patches_match_source_windows() {
        let cube = default_cube(3);
        let mut rng = Rng::new(8);
        let p = crop_patches(&cube, 16, 8, Some(&mut rng)).unwrap();
        assert_eq!(p.len(), 9);
        for patch in &p {
            for y in 0..16 {
                for x in 0..16 {
                    for b in 0..8 {
                        assert_eq!(patch.cube.at(y, x, b).to_bits(), cube.at(patch.y + y, patch.x + x, b).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_patch_is_dimension_error() {
        let cube = default_cube(3);
        assert!(matches!(crop_patches(&cube, 33, 1, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn normalisation_is_idempotent() {
        let mut cube = default_cube(6);
        cube.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 - 0.5);
        let once = cube.normalized();
        let twice = once.normalized();
        assert!(once.values().bitwise_eq(twice.values()));
        let flat = Cube::filled(4, 4, 2, 0.3).unwrap().normalized();
        assert!(flat.values().bitwise_eq(flat.normalized().values()));
    }

    #[test]
    fn nchw_round_trip() {
        let cube = default_cube(7);
        let t = cube.to_nchw();
        assert_eq!(t.shape(), &[1, 8, 32, 32]);
        assert_eq!(t.data()[3 * 1024 + 5 * 32 + 2], cube.at(5, 2, 3));
        assert_eq!(Cube::from_nchw(&t).unwrap(), cube);
    }

    #[test]
    fn hsc1_round_trip_and_errors() {
        let cube = default_cube(8);
        let bytes = encode_hsc1(&cube);
        assert_eq!(bytes.len(), 16 + 4 * 32 * 32 * 8);
        assert!(decode_hsc1(&bytes).unwrap().values().bitwise_eq(cube.values()));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_hsc1(&bad), Err(Error::Format { offset: 0, .. })));

        let err = decode_hsc1(&bytes[..bytes.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { offset: 16, .. }));
        assert!(msg.contains("expected 32768") && msg.contains("found 32765"), "{msg}");
    }
}
