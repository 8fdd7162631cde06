//! Synthetic degradations: low resolution, rain, noise, blur and haze.
//!
//! Every degradation is deterministic given its [`DegradationSpec`] (which
//! carries its own seed) and returns an image of the same size as the input.

mod manifest;
pub mod scenes;

use std::fmt;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{reflect, ImageTensor, Tensor};

pub use manifest::{
    load_manifest, load_pairs, make_pairs, pair_seed, synth_dataset, ManifestEntry, Pair,
    PairManifest, MANIFEST_FILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Lr,
    Rain,
    Noise,
    Blur,
    Haze,
}

impl DegradationKind {
    /// Column order of the cross-degradation tables.
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::Lr,
        DegradationKind::Rain,
        DegradationKind::Noise,
        DegradationKind::Blur,
        DegradationKind::Haze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Lr => "lr",
            DegradationKind::Rain => "rain",
            DegradationKind::Noise => "noise",
            DegradationKind::Blur => "blur",
            DegradationKind::Haze => "haze",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            DegradationKind::Lr => "LR",
            DegradationKind::Rain => "Rain",
            DegradationKind::Noise => "Noise",
            DegradationKind::Blur => "Blur",
            DegradationKind::Haze => "Haze",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        DegradationKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown degradation kind `{s}`; valid kinds: {}",
                    DegradationKind::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrParams {
    pub scale: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// Standard deviation on the 0-255 scale.
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum BlurParams {
    Gaussian { size: usize, sigma: f64 },
    Motion { length: f64, angle: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazeParams {
    /// Transmission; drawn from `[0.3, 0.9]` when unset.
    pub transmission: Option<f64>,
    /// Airlight; drawn from `[0.7, 1.0]` when unset.
    pub airlight: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainParams {
    pub streak_count: u32,
    /// Mean streak length in pixels.
    pub length: f64,
    /// Streak direction in degrees from the horizontal axis.
    pub angle: f64,
    /// Peak additive brightness of a streak.
    pub intensity: f64,
    /// Gaussian cross-section standard deviation in pixels.
    pub width: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            streak_count: 60,
            length: 12.0,
            angle: 75.0,
            intensity: 0.5,
            width: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    Lr(LrParams),
    Rain(RainParams),
    Noise(NoiseParams),
    Blur(BlurParams),
    Haze(HazeParams),
}

impl Degradation {
    pub fn kind(&self) -> DegradationKind {
        match self {
            Degradation::Lr(_) => DegradationKind::Lr,
            Degradation::Rain(_) => DegradationKind::Rain,
            Degradation::Noise(_) => DegradationKind::Noise,
            Degradation::Blur(_) => DegradationKind::Blur,
            Degradation::Haze(_) => DegradationKind::Haze,
        }
    }

    pub fn params_json(&self) -> String {
        let v = match self {
            Degradation::Lr(p) => serde_json::to_string(p),
            Degradation::Rain(p) => serde_json::to_string(p),
            Degradation::Noise(p) => serde_json::to_string(p),
            Degradation::Blur(p) => serde_json::to_string(p),
            Degradation::Haze(p) => serde_json::to_string(p),
        };
        v.expect("params serialize")
    }

    pub fn from_json(kind: DegradationKind, json: &str) -> Result<Self> {
        let err = |e: serde_json::Error| Error::Config(format!("{kind} params `{json}`: {e}"));
        let d = match kind {
            DegradationKind::Lr => Degradation::Lr(serde_json::from_str(json).map_err(err)?),
            DegradationKind::Rain => Degradation::Rain(serde_json::from_str(json).map_err(err)?),
            DegradationKind::Noise => Degradation::Noise(serde_json::from_str(json).map_err(err)?),
            DegradationKind::Blur => Degradation::Blur(serde_json::from_str(json).map_err(err)?),
            DegradationKind::Haze => Degradation::Haze(serde_json::from_str(json).map_err(err)?),
        };
        d.validate()?;
        Ok(d)
    }

    /// Default parameters for a kind.
    pub fn default_for(kind: DegradationKind) -> Self {
        match kind {
            DegradationKind::Lr => Degradation::Lr(LrParams { scale: 2 }),
            DegradationKind::Rain => Degradation::Rain(RainParams::default()),
            DegradationKind::Noise => Degradation::Noise(NoiseParams { sigma: 25.0 }),
            DegradationKind::Blur => Degradation::Blur(gaussian_params(5)),
            DegradationKind::Haze => Degradation::Haze(HazeParams {
                transmission: None,
                airlight: None,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            Degradation::Lr(p) if !(2..=4).contains(&p.scale) => {
                bad(format!("lr scale must be 2, 3 or 4, got {}", p.scale))
            }
            Degradation::Noise(p) if !(p.sigma.is_finite() && (0.0..=255.0).contains(&p.sigma)) => {
                bad(format!("noise sigma must be in [0, 255], got {}", p.sigma))
            }
            Degradation::Blur(BlurParams::Gaussian { size, sigma })
                if size < 3 || size % 2 == 0 || !(sigma > 0.0 && sigma.is_finite()) =>
            {
                bad(format!(
                    "gaussian blur needs an odd kernel size >= 3 and sigma > 0, got size {size}, sigma {sigma}"
                ))
            }
            Degradation::Blur(BlurParams::Motion { length, angle })
                if !(length >= 1.0 && length <= 101.0 && angle.is_finite()) =>
            {
                bad(format!("motion blur length must be in [1, 101], got {length}"))
            }
            Degradation::Haze(p)
                if p.transmission.is_some_and(|t| !(t > 0.0 && t <= 1.0))
                    || p.airlight.is_some_and(|a| !(0.0..=1.0).contains(&a)) =>
            {
                bad(format!(
                    "haze needs transmission in (0, 1] and airlight in [0, 1], got {:?} / {:?}",
                    p.transmission, p.airlight
                ))
            }
            Degradation::Rain(p)
                if !(p.length > 0.0
                    && p.width > 0.0
                    && p.angle.is_finite()
                    && (0.0..=1.0).contains(&p.intensity)) =>
            {
                bad("rain needs length > 0, width > 0 and intensity in [0, 1]".into())
            }
            _ => Ok(()),
        }
    }
}

fn gaussian_params(size: usize) -> BlurParams {
    // Same size-to-sigma rule as common image libraries.
    let sigma = 0.3 * ((size as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    BlurParams::Gaussian { size, sigma }
}

/// A degradation together with the seed that drives its randomness.
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

    /// Fills in randomly drawn parameters so the spec is fully explicit.
    pub fn resolve(&self) -> Self {
        let mut out = *self;
        if let Degradation::Haze(p) = &mut out.degradation {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x4841_5a45);
            let t = rng.gen_range(0.3..=0.9);
            let a = rng.gen_range(0.7..=1.0);
            p.transmission.get_or_insert(t);
            p.airlight.get_or_insert(a);
        }
        out
    }

    /// Parses `kind[:arg...]`, e.g. `noise:25`, `blur:5`, `blur:motion:9:30`,
    /// `lr:3`, `haze`, `haze:0.5:0.8`, `rain:80`.
    pub fn parse_short(s: &str, seed: u64) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let kind: DegradationKind = parts.next().unwrap_or_default().parse()?;
        let args: Vec<&str> = parts.collect();
        let num = |i: usize| -> Result<Option<f64>> {
            args.get(i)
                .map(|a| {
                    a.parse::<f64>()
                        .map_err(|_| Error::Config(format!("`{s}`: `{a}` is not a number")))
                })
                .transpose()
        };
        let too_many = |max: usize| {
            if args.len() > max {
                Err(Error::Config(format!(
                    "`{s}`: too many arguments for {kind}"
                )))
            } else {
                Ok(())
            }
        };
        let d = match kind {
            DegradationKind::Lr => {
                too_many(1)?;
                Degradation::Lr(LrParams {
                    scale: num(0)?.unwrap_or(2.0) as u32,
                })
            }
            DegradationKind::Noise => {
                too_many(1)?;
                Degradation::Noise(NoiseParams {
                    sigma: num(0)?.unwrap_or(25.0),
                })
            }
            DegradationKind::Blur if args.first() == Some(&"motion") => {
                too_many(3)?;
                Degradation::Blur(BlurParams::Motion {
                    length: num(1)?.unwrap_or(9.0),
                    angle: num(2)?.unwrap_or(0.0),
                })
            }
            DegradationKind::Blur => {
                too_many(2)?;
                let size = num(0)?.unwrap_or(5.0) as usize;
                match num(1)? {
                    Some(sigma) => Degradation::Blur(BlurParams::Gaussian { size, sigma }),
                    None => Degradation::Blur(gaussian_params(size)),
                }
            }
            DegradationKind::Haze => {
                too_many(2)?;
                Degradation::Haze(HazeParams {
                    transmission: num(0)?,
                    airlight: num(1)?,
                })
            }
            DegradationKind::Rain => {
                too_many(4)?;
                let d = RainParams::default();
                Degradation::Rain(RainParams {
                    streak_count: num(0)?.map_or(d.streak_count, |v| v as u32),
                    length: num(1)?.unwrap_or(d.length),
                    angle: num(2)?.unwrap_or(d.angle),
                    intensity: num(3)?.unwrap_or(d.intensity),
                    width: d.width,
                })
            }
        };
        DegradationSpec::new(d, seed)
    }
}

/// Applies a degradation. The output has the size of `clean` and lies in `[0, 1]`.
pub fn degrade(clean: &ImageTensor, spec: &DegradationSpec) -> Result<ImageTensor> {
    spec.degradation.validate()?;
    clean.ensure_channels(3, "degrade")?;
    let spec = spec.resolve();
    let out = match spec.degradation {
        Degradation::Noise(p) => add_gaussian_noise(clean, p.sigma, spec.seed),
        Degradation::Lr(p) => {
            let small = lr_downsample(clean, p.scale)?;
            resize_bicubic(&small, clean.height(), clean.width())
        }
        Degradation::Blur(p) => convolve_reflect(clean, &blur_kernel(&p)),
        Degradation::Haze(p) => haze(
            clean,
            p.transmission.expect("resolved"),
            p.airlight.expect("resolved"),
        ),
        Degradation::Rain(p) => add_rain(clean, &p, spec.seed),
    };
    Ok(out.clamp01())
}

pub fn add_gaussian_noise(clean: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
    if sigma == 0.0 {
        return clean.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma / 255.0).expect("finite sigma");
    let mut out = clean.clone();
    for v in out.data_mut() {
        *v += dist.sample(&mut rng) as f32;
    }
    out
}

/// Atmospheric scattering: `I = J t + A (1 - t)`.
pub fn haze(clean: &ImageTensor, transmission: f64, airlight: f64) -> ImageTensor {
    let t = transmission as f32;
    let a = airlight as f32;
    clean.map(|v| v * t + a * (1.0 - t))
}

/// Inverse of [`haze`] for known parameters.
pub fn dehaze(hazy: &ImageTensor, transmission: f64, airlight: f64) -> ImageTensor {
    let t = transmission as f32;
    let a = airlight as f32;
    hazy.map(|v| (v - a * (1.0 - t)) / t)
}

/// Bicubic downsample by an integer factor (floor of the size).
pub fn lr_downsample(clean: &ImageTensor, scale: u32) -> Result<ImageTensor> {
    let s = scale as usize;
    let (h, w) = (clean.height() / s, clean.width() / s);
    if h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "image {}x{} too small for x{scale} downsampling",
            clean.height(),
            clean.width()
        )));
    }
    Ok(resize_bicubic(clean, h, w))
}

pub fn resize_bicubic(img: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    let (_, h, w) = img.shape();
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)])
    });
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::CatmullRom);
    Tensor::from_fn(3, height, width, |c, y, x| {
        out.get_pixel(x as u32, y as u32)[c]
    })
}

/// Normalized blur kernel, square with odd side.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

pub fn blur_kernel(p: &BlurParams) -> Kernel {
    match *p {
        BlurParams::Gaussian { size, sigma } => {
            let r = (size / 2) as f64;
            let mut w: Vec<f64> = (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
                    (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            normalize(&mut w);
            Kernel { size, weights: w }
        }
        BlurParams::Motion { length, angle } => {
            let size = ((length.ceil() as usize) | 1).max(3);
            let c = (size / 2) as f64;
            let (s, co) = angle.to_radians().sin_cos();
            let mut w = vec![0.0; size * size];
            let steps = (length * 8.0).ceil() as usize + 1;
            for k in 0..steps {
                let t = if steps == 1 {
                    0.0
                } else {
                    k as f64 / (steps - 1) as f64 - 0.5
                };
                let (x, y) = (c + t * (length - 1.0) * co, c - t * (length - 1.0) * s);
                // bilinear splat
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                        let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                            w[yy as usize * size + xx as usize] += wy * wx;
                        }
                    }
                }
            }
            normalize(&mut w);
            Kernel { size, weights: w }
        }
    }
}

fn normalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
}

/// Correlation with reflect-101 borders.
pub fn convolve_reflect(img: &ImageTensor, k: &Kernel) -> ImageTensor {
    let (c, h, w) = img.shape();
    let r = (k.size / 2) as isize;
    Tensor::from_fn(c, h, w, |ch, y, x| {
        let mut acc = 0.0f64;
        for ky in 0..k.size {
            let yy = reflect(y as isize + ky as isize - r, h);
            for kx in 0..k.size {
                let wv = k.weights[ky * k.size + kx];
                if wv == 0.0 {
                    continue;
                }
                let xx = reflect(x as isize + kx as isize - r, w);
                acc += wv * img.at(ch, yy, xx) as f64;
            }
        }
        acc as f32
    })
}

/// Additive layer of oriented line segments with a Gaussian cross-section.
pub fn rain_layer(height: usize, width: usize, p: &RainParams, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 5.0).expect("finite");
    let mut layer = vec![0.0f64; height * width];
    for _ in 0..p.streak_count {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let len = p.length * rng.gen_range(0.8..1.2);
        let ang = (p.angle + jitter.sample(&mut rng)).to_radians();
        let amp = p.intensity * rng.gen_range(0.6..1.0);
        let (dx, dy) = (ang.cos(), -ang.sin());
        let half = len / 2.0;
        let reach = half + 3.0 * p.width;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height.saturating_sub(1));
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                let along = (px * dx + py * dy).clamp(-half, half);
                let (qx, qy) = (px - along * dx, py - along * dy);
                let d2 = qx * qx + qy * qy;
                layer[y * width + x] += amp * (-d2 / (2.0 * p.width * p.width)).exp();
            }
        }
    }
    Tensor::from_vec(
        1,
        height,
        width,
        layer.into_iter().map(|v| v as f32).collect(),
    )
    .expect("shape")
}

pub fn add_rain(clean: &ImageTensor, p: &RainParams, seed: u64) -> ImageTensor {
    let layer = rain_layer(clean.height(), clean.width(), p, seed);
    Tensor::from_fn(3, clean.height(), clean.width(), |c, y, x| {
        clean.at(c, y, x) + layer.at(0, y, x)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(seed: u64, n: usize) -> ImageTensor {
        scenes::render_scene(seed, n, n)
    }

    fn spec(s: &str, seed: u64) -> DegradationSpec {
        DegradationSpec::parse_short(s, seed).unwrap()
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let x = scene(1, 32);
        assert_eq!(degrade(&x, &spec("noise:0", 3)).unwrap(), x);
    }

    #[test]
    fn haze_limits() {
        let x = scene(2, 16);
        assert_eq!(degrade(&x, &spec("haze:1:0.8", 0)).unwrap(), x);
        let y = degrade(&x, &spec("haze:0.000001:0.8", 0)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.8).abs() < 1e-5));
    }

    #[test]
    fn haze_inverts() {
        let x = scene(3, 32);
        let (t, a) = (0.37, 0.91);
        let back = dehaze(&haze(&x, t, a), t, a);
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn unpinned_haze_is_drawn_from_ranges() {
        for seed in 0..50 {
            let r = spec("haze", seed).resolve();
            let Degradation::Haze(p) = r.degradation else {
                unreachable!()
            };
            let (t, a) = (p.transmission.unwrap(), p.airlight.unwrap());
            assert!((0.3..=0.9).contains(&t) && (0.7..=1.0).contains(&a));
        }
    }

    #[test]
    fn noise_std_matches_sigma() {
        let x = Tensor::full(3, 512, 512, 0.5f32);
        let y = degrade(&x, &spec("noise:25", 7)).unwrap();
        let d: Vec<f64> = y.sub(&x).data().iter().map(|&v| v as f64).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        let target = 25.0 / 255.0;
        assert!((sd - target).abs() / target < 0.02, "{sd} vs {target}");
    }

    #[test]
    fn noise_is_white() {
        let x = Tensor::full(1 + 2, 512, 512, 0.5f32);
        let y = degrade(&x, &spec("noise:25", 11)).unwrap();
        let r = y.sub(&x);
        let p = r.plane(0);
        let n = 512;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for yy in 0..n {
            for xx in 0..n {
                let v = p[yy * n + xx] as f64;
                den += v * v;
                if xx + 1 < n {
                    num += v * p[yy * n + xx + 1] as f64;
                }
            }
        }
        assert!((num / den).abs() < 0.02);
    }

    #[test]
    fn blur_kernels_sum_to_one() {
        for p in [
            gaussian_params(3),
            gaussian_params(9),
            BlurParams::Gaussian {
                size: 7,
                sigma: 3.0,
            },
            BlurParams::Motion {
                length: 9.0,
                angle: 30.0,
            },
            BlurParams::Motion {
                length: 1.0,
                angle: 0.0,
            },
        ] {
            let k = blur_kernel(&p);
            assert!((k.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(k.size % 2, 1);
        }
        let x = Tensor::full(3, 10, 10, 0.3f32);
        let y = degrade(&x, &spec("blur:motion:7:45", 0)).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn lr_intermediate_and_output_sizes() {
        let x = scene(4, 100);
        assert_eq!(lr_downsample(&x, 2).unwrap().shape(), (3, 50, 50));
        assert_eq!(lr_downsample(&x, 3).unwrap().shape(), (3, 33, 33));
        let y = degrade(&x, &spec("lr:2", 0)).unwrap();
        assert_eq!(y.shape(), (3, 100, 100));
        assert!(y.max_abs_diff(&x) > 0.01);
        assert!(lr_downsample(&Tensor::zeros(3, 3, 3), 4).is_err());
    }

    #[test]
    fn every_kind_is_deterministic_and_bounded() {
        let x = scene(5, 48);
        for s in [
            "lr:3",
            "rain",
            "noise:50",
            "blur:5",
            "haze",
            "blur:motion:9:10",
        ] {
            let a = degrade(&x, &spec(s, 99)).unwrap();
            let b = degrade(&x, &spec(s, 99)).unwrap();
            assert_eq!(a, b, "{s}");
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{s}");
        }
        let a = degrade(&x, &spec("rain", 1)).unwrap();
        let b = degrade(&x, &spec("rain", 2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rain_brightens() {
        let x = Tensor::full(3, 64, 64, 0.2f32);
        let y = degrade(&x, &spec("rain:40", 3)).unwrap();
        assert!(y.sum() > x.sum());
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a >= b));
    }

    #[test]
    fn parse_rejects_bad_input() {
        let err = DegradationSpec::parse_short("fog:3", 0)
            .unwrap_err()
            .to_string();
        for k in DegradationKind::ALL {
            assert!(err.contains(k.name()));
        }
        assert!(DegradationSpec::parse_short("lr:5", 0).is_err());
        assert!(DegradationSpec::parse_short("blur:4", 0).is_err());
        assert!(DegradationSpec::parse_short("haze:0:0.5", 0).is_err());
        assert!(DegradationSpec::parse_short("noise:x", 0).is_err());
        assert!(DegradationSpec::parse_short("noise:-1", 0).is_err());
    }

    #[test]
    fn params_json_round_trip() {
        for s in [
            "lr:4",
            "rain:10:5:80:0.3",
            "noise:15",
            "blur:7:2",
            "blur:motion:5:90",
            "haze:0.5:0.9",
            "haze",
        ] {
            let d = spec(s, 0).degradation;
            let back = Degradation::from_json(d.kind(), &d.params_json()).unwrap();
            assert_eq!(back, d);
        }
    }
}
