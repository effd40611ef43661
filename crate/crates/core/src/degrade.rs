//! The six degradation families and their parameter grids.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hsidata::Cube;
use crate::numerics::Rng;

/// Degradation families in their fixed enumeration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DegradationKind {
    IidGaussianNoise,
    ComplexNoise,
    GaussianBlur,
    DownsampleSr,
    Inpainting,
    BandCompletion,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 6] = [
        DegradationKind::IidGaussianNoise,
        DegradationKind::ComplexNoise,
        DegradationKind::GaussianBlur,
        DegradationKind::DownsampleSr,
        DegradationKind::Inpainting,
        DegradationKind::BandCompletion,
    ];

    /// Number of families, i.e. the number of guidance embeddings.
    pub const COUNT: usize = Self::ALL.len();

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::IidGaussianNoise => "iid_gaussian_noise",
            DegradationKind::ComplexNoise => "complex_noise",
            DegradationKind::GaussianBlur => "gaussian_blur",
            DegradationKind::DownsampleSr => "downsample_sr",
            DegradationKind::Inpainting => "inpainting",
            DegradationKind::BandCompletion => "band_completion",
        }
    }

    /// 1-based position in [`DegradationKind::ALL`].
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap() + 1
    }

    pub fn param_key(self) -> &'static str {
        match self {
            DegradationKind::IidGaussianNoise => "sigma",
            DegradationKind::ComplexNoise => "case",
            DegradationKind::GaussianBlur => "radius",
            DegradationKind::DownsampleSr => "scale",
            DegradationKind::Inpainting => "mask_rate",
            DegradationKind::BandCompletion => "band_rate",
        }
    }

    /// The allowed parameter values, as they appear in sidecar files.
    pub fn grid(self) -> &'static [&'static str] {
        match self {
            DegradationKind::IidGaussianNoise => &["30", "50", "70"],
            DegradationKind::ComplexNoise => &["1", "2", "3", "4"],
            DegradationKind::GaussianBlur => &["9", "15", "21"],
            DegradationKind::DownsampleSr => &["2", "4", "8"],
            DegradationKind::Inpainting => &["0.7", "0.8", "0.9"],
            DegradationKind::BandCompletion => &["0.1", "0.2", "0.3"],
        }
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Taxonomy(s.to_string()))
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One degradation with its kind-specific parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Noise standard deviation on the 0..255 scale.
    IidGaussianNoise { sigma: u32 },
    ComplexNoise { case: u32 },
    GaussianBlur { radius: usize },
    DownsampleSr { scale: usize },
    Inpainting { mask_rate: f32 },
    BandCompletion { band_rate: f32 },
}

impl Degradation {
    pub fn kind(&self) -> DegradationKind {
        match self {
            Degradation::IidGaussianNoise { .. } => DegradationKind::IidGaussianNoise,
            Degradation::ComplexNoise { .. } => DegradationKind::ComplexNoise,
            Degradation::GaussianBlur { .. } => DegradationKind::GaussianBlur,
            Degradation::DownsampleSr { .. } => DegradationKind::DownsampleSr,
            Degradation::Inpainting { .. } => DegradationKind::Inpainting,
            Degradation::BandCompletion { .. } => DegradationKind::BandCompletion,
        }
    }

    /// Parameter value as it appears in sidecars and configs.
    pub fn param_string(&self) -> String {
        match *self {
            Degradation::IidGaussianNoise { sigma } => sigma.to_string(),
            Degradation::ComplexNoise { case } => case.to_string(),
            Degradation::GaussianBlur { radius } => radius.to_string(),
            Degradation::DownsampleSr { scale } => scale.to_string(),
            Degradation::Inpainting { mask_rate: r } | Degradation::BandCompletion { band_rate: r } => {
                format!("{r:.1}")
            }
        }
    }

    /// Builds a degradation from its kind and textual parameter.
    pub fn parse(kind: DegradationKind, value: &str) -> Result<Self> {
        let bad = || {
            Error::Parameter(format!(
                "{}={value} is not in the allowed grid {{{}}} for {kind}",
                kind.param_key(),
                kind.grid().join(", ")
            ))
        };
        let d = match kind {
            DegradationKind::IidGaussianNoise => Degradation::IidGaussianNoise {
                sigma: value.parse().map_err(|_| bad())?,
            },
            DegradationKind::ComplexNoise => Degradation::ComplexNoise {
                case: value.parse().map_err(|_| bad())?,
            },
            DegradationKind::GaussianBlur => Degradation::GaussianBlur {
                radius: value.parse().map_err(|_| bad())?,
            },
            DegradationKind::DownsampleSr => Degradation::DownsampleSr {
                scale: value.parse().map_err(|_| bad())?,
            },
            DegradationKind::Inpainting => Degradation::Inpainting {
                mask_rate: value.parse().map_err(|_| bad())?,
            },
            DegradationKind::BandCompletion => Degradation::BandCompletion {
                band_rate: value.parse().map_err(|_| bad())?,
            },
        };
        d.validate()?;
        Ok(d)
    }

    /// Checks the parameter against the kind's grid.
    pub fn validate(&self) -> Result<()> {
        let kind = self.kind();
        let ok = match *self {
            Degradation::Inpainting { mask_rate: r } | Degradation::BandCompletion { band_rate: r } => {
                kind.grid().iter().any(|g| (g.parse::<f32>().unwrap() - r).abs() < 1e-6)
            }
            _ => kind.grid().contains(&self.param_string().as_str()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "{}={} is not in the allowed grid {{{}}} for {kind}",
                kind.param_key(),
                self.param_string(),
                kind.grid().join(", ")
            )))
        }
    }

    /// Every grid point of a kind.
    pub fn grid_of(kind: DegradationKind) -> Vec<Degradation> {
        kind.grid()
            .iter()
            .map(|v| Degradation::parse(kind, v).expect("grid values are valid"))
            .collect()
    }
}

/// A degradation together with the seed driving its randomness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(degradation: Degradation, seed: u64) -> Result<Self> {
        degradation.validate()?;
        Ok(DegradationSpec { degradation, seed })
    }

    pub fn kind(&self) -> DegradationKind {
        self.degradation.kind()
    }

    /// `kind=<name> params=<key>=<value> seed=<n>`
    pub fn to_sidecar(&self) -> String {
        let kind = self.kind();
        format!(
            "kind={} params={}={} seed={}",
            kind.name(),
            kind.param_key(),
            self.degradation.param_string(),
            self.seed
        )
    }

    pub fn parse_sidecar(line: &str) -> Result<Self> {
        let mut kind = None;
        let mut param = None;
        let mut seed = None;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("malformed sidecar field `{field}`")))?;
            match k {
                "kind" => kind = Some(v.parse::<DegradationKind>()?),
                "params" => param = Some(v.to_string()),
                "seed" => {
                    seed = Some(
                        v.parse::<u64>()
                            .map_err(|_| Error::Parameter(format!("bad seed `{v}`")))?,
                    )
                }
                _ => return Err(Error::Parameter(format!("unknown sidecar field `{k}`"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::Parameter("sidecar lacks kind".into()))?;
        let param = param.ok_or_else(|| Error::Parameter("sidecar lacks params".into()))?;
        let (key, value) = param
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("malformed params `{param}`")))?;
        if key != kind.param_key() {
            return Err(Error::Parameter(format!(
                "{kind} takes `{}`, got `{key}`",
                kind.param_key()
            )));
        }
        let seed = seed.ok_or_else(|| Error::Parameter("sidecar lacks seed".into()))?;
        DegradationSpec::new(Degradation::parse(kind, value)?, seed)
    }
}

/// Position of the degradation's kind in the taxonomy, in `1..=6`.
pub fn degradation_index(spec: &DegradationSpec) -> usize {
    spec.kind().index()
}

/// Applies the degradation and clips to `[0, 1]`.
pub fn apply(spec: &DegradationSpec, cube: &Cube) -> Result<Cube> {
    Ok(apply_unclipped(spec, cube)?.clamped())
}

/// Like [`apply`] but without the final clip, so additive noise can be
/// inspected directly.
pub fn apply_unclipped(spec: &DegradationSpec, cube: &Cube) -> Result<Cube> {
    spec.degradation.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut out = cube.clone();
    let (h, w, c) = cube.dims();
    match spec.degradation {
        Degradation::IidGaussianNoise { sigma } => {
            let std = sigma as f32 / 255.0;
            out.data_mut().iter_mut().for_each(|v| *v += std * rng.normal());
        }
        Degradation::ComplexNoise { case } => complex_noise(&mut out, case, &mut rng),
        Degradation::GaussianBlur { radius } => {
            let kernel = gaussian_kernel(radius, radius as f64 / 3.0);
            for b in 0..c {
                let blurred = blur_plane(&cube.band(b), h, w, &kernel);
                for (p, v) in blurred.into_iter().enumerate() {
                    out.data_mut()[p * c + b] = v;
                }
            }
        }
        Degradation::DownsampleSr { scale } => {
            if h % scale != 0 || w % scale != 0 {
                return Err(Error::Parameter(format!(
                    "scale {scale} does not divide cube size {h}x{w}"
                )));
            }
            for by in 0..h / scale {
                for bx in 0..w / scale {
                    for b in 0..c {
                        let mut s = 0.0f64;
                        for y in by * scale..(by + 1) * scale {
                            for x in bx * scale..(bx + 1) * scale {
                                s += cube.at(y, x, b) as f64;
                            }
                        }
                        let mean = (s / (scale * scale) as f64) as f32;
                        for y in by * scale..(by + 1) * scale {
                            for x in bx * scale..(bx + 1) * scale {
                                *out.at_mut(y, x, b) = mean;
                            }
                        }
                    }
                }
            }
        }
        Degradation::Inpainting { mask_rate } => {
            for px in out.data_mut().chunks_exact_mut(c) {
                if rng.bernoulli(mask_rate) {
                    px.fill(0.0);
                }
            }
        }
        Degradation::BandCompletion { band_rate } => {
            let count = (band_rate * c as f32).round() as usize;
            if count == 0 {
                return Err(Error::Parameter(format!(
                    "band_rate {band_rate} removes no band of {c}"
                )));
            }
            let mut bands: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut bands);
            for &b in &bands[..count.min(c)] {
                for px in out.data_mut().chunks_exact_mut(c) {
                    px[b] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

fn complex_noise(cube: &mut Cube, case: u32, rng: &mut Rng) {
    let (h, w, c) = cube.dims();
    let sigmas: Vec<f32> = (0..c).map(|_| rng.uniform_range(10.0, 70.0) / 255.0).collect();
    for px in cube.data_mut().chunks_exact_mut(c) {
        for (v, s) in px.iter_mut().zip(&sigmas) {
            *v += s * rng.normal();
        }
    }
    if case == 1 {
        return;
    }
    let mut bands: Vec<usize> = (0..c).collect();
    rng.shuffle(&mut bands);
    let affected = &bands[..((c as f32 / 3.0).round() as usize).max(1)];
    for &b in affected {
        match case {
            2 => {
                let density = rng.uniform_range(0.1, 0.3);
                for p in 0..h * w {
                    if rng.bernoulli(density) {
                        cube.data_mut()[p * c + b] = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
                    }
                }
            }
            _ => {
                let frac = rng.uniform_range(0.05, 0.15);
                let n = ((frac * w as f32).round() as usize).max(1);
                let mut cols: Vec<usize> = (0..w).collect();
                rng.shuffle(&mut cols);
                for &x in &cols[..n] {
                    let offset = rng.uniform_range(-0.25, 0.25);
                    for y in 0..h {
                        let v = cube.at_mut(y, x, b);
                        *v = if case == 3 { *v + offset } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Normalised 1D Gaussian taps for offsets `-radius..=radius`.
fn gaussian_kernel(radius: usize, std: f64) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * std * std)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror index without edge repetition; periodic for offsets past the border.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn blur_plane(plane: &[f32], h: usize, w: usize, kernel: &[f64]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &t)| t * plane[y * w + reflect(x as isize + k as isize - r, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, &t)| t * rows[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
            out[y * w + x] = v as f32;
        }
    }
    out
}
