//! Synthetic degradation lab.
//!
//! Clean scenes are generated procedurally and corrupted by additive noise
//! `y = x + N`, an additive rain layer `y = x + A_rain + N`, or multiplicative
//! haze `y = x·A_haze + N`. Every map is a pure function of `(spec, seed)`.
//! Identities between the three corruptions are checked on pre-clamp values
//! by [`verify_decomposition`]; training consumes the clamped copy.

mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 3;

/// Tolerance of every pre-clamp identity.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
/// Magnitude above which a component pixel counts as part of its support.
pub const SUPPORT_THRESHOLD: f64 = 1e-9;
/// Upper bound on the rain layer's support fraction.
pub const MAX_RAIN_SUPPORT: f64 = 0.3;

// independent ChaCha streams per component of one sample seed
const STREAM_NOISE: u64 = 1;
const STREAM_RAIN: u64 = 2;
const STREAM_DEPTH: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Three-channel `C×H×W` map in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "{} values for a {CHANNELS}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Replicates one `H×W` plane on every channel.
    fn from_plane(height: usize, width: usize, plane: &[f64]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * plane.len());
        for _ in 0..CHANNELS {
            data.extend_from_slice(plane);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Dimension(format!(
                "image {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.same_shape(other)?;
        Ok(Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn clamp_unit(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Fraction of elements with magnitude above [`SUPPORT_THRESHOLD`].
    pub fn support_fraction(&self) -> f64 {
        let n = self.data.iter().filter(|v| v.abs() > SUPPORT_THRESHOLD).count();
        n as f64 / self.data.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        (self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, CHANNELS, self.height, self.width], |i| {
            T::from_f64(self.data[i])
        })
    }
}

/// Clean image with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanImage(Image);

impl CleanImage {
    pub fn new(image: Image) -> Result<Self> {
        if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("clean image values must lie in [0, 1]".into()));
        }
        Ok(Self(image))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }
}

impl std::ops::Deref for CleanImage {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainSpec {
    pub streaks: usize,
    /// Nominal streak length in pixels.
    pub length: f64,
    /// Streak angle from vertical, degrees.
    pub angle: f64,
    /// Peak additive value.
    pub intensity: f64,
    /// Line width in pixels.
    pub thickness: f64,
}

impl Default for RainSpec {
    fn default() -> Self {
        Self {
            streaks: 20,
            length: 14.0,
            angle: 15.0,
            intensity: 0.5,
            thickness: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HazeMode {
    /// `y = x·A + N`
    Paper,
    /// `y = x·A + airlight·(1 - A) + N`
    Scattering,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeSpec {
    /// Scattering coefficient; transmission is `exp(-beta·depth)`.
    pub beta: f64,
    pub airlight: f64,
    pub mode: HazeMode,
}

impl Default for HazeSpec {
    fn default() -> Self {
        Self {
            beta: 1.2,
            airlight: 0.8,
            mode: HazeMode::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DegradationKind {
    Noise,
    Rain(RainSpec),
    Haze(HazeSpec),
}

/// One corruption recipe. `noise_sigma` is the additive Gaussian noise shared
/// by every variant; for [`DegradationKind::Noise`] it is the whole recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub noise_sigma: f64,
}

impl DegradationSpec {
    pub fn noise(sigma: f64) -> Self {
        Self {
            kind: DegradationKind::Noise,
            noise_sigma: sigma,
        }
    }

    pub fn rain(spec: RainSpec, noise_sigma: f64) -> Self {
        Self {
            kind: DegradationKind::Rain(spec),
            noise_sigma,
        }
    }

    pub fn haze(spec: HazeSpec, noise_sigma: f64) -> Self {
        Self {
            kind: DegradationKind::Haze(spec),
            noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {} < 0", self.noise_sigma)));
        }
        match self.kind {
            DegradationKind::Noise => {}
            DegradationKind::Rain(r) => {
                if !(r.intensity > 0.0) || !(r.length > 0.0) || !(r.thickness > 0.0) {
                    return Err(Error::Config(format!(
                        "rain intensity, length and thickness must be positive: {r:?}"
                    )));
                }
            }
            DegradationKind::Haze(h) => {
                if !(h.beta >= 0.0) || !(0.0..=1.0).contains(&h.airlight) {
                    return Err(Error::Config(format!(
                        "haze needs beta >= 0 and airlight in [0, 1]: {h:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The five restoration tasks, ordered by ascending difficulty; the index is
/// the task label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Noise15,
    Noise25,
    Noise50,
    Rain,
    Haze,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Noise15, Task::Noise25, Task::Noise50, Task::Rain, Task::Haze];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Noise15 => "noise15",
            Task::Noise25 => "noise25",
            Task::Noise50 => "noise50",
            Task::Rain => "rain",
            Task::Haze => "haze",
        }
    }

    pub fn from_label(label: usize) -> Option<Task> {
        Self::ALL.get(label).copied()
    }

    /// Default recipe at the given resolution. Noise levels are the 8-bit
    /// sigmas rescaled to unit range; rain and haze are noise-free. Streak
    /// count scales with area from 20 streaks per 64×64.
    pub fn default_spec(self, height: usize, width: usize) -> DegradationSpec {
        match self {
            Task::Noise15 => DegradationSpec::noise(15.0 / 255.0),
            Task::Noise25 => DegradationSpec::noise(25.0 / 255.0),
            Task::Noise50 => DegradationSpec::noise(50.0 / 255.0),
            Task::Rain => {
                let area = (height * width) as f64 / (64.0 * 64.0);
                let length = 14.0 * ((height.min(width) as f64) / 64.0).clamp(0.5, 2.0);
                DegradationSpec::rain(
                    RainSpec {
                        streaks: ((20.0 * area).round() as usize).max(1),
                        length,
                        ..RainSpec::default()
                    },
                    0.0,
                )
            }
            Task::Haze => DegradationSpec::haze(HazeSpec::default(), 0.0),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Full-resolution component maps of one degraded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub noise: Image,
    pub rain: Option<Image>,
    pub haze: Option<Image>,
    pub a_prime: Option<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradedSample {
    pub clean: CleanImage,
    /// Degraded image before clamping; the identities hold on this copy.
    pub degraded_raw: Image,
    /// Degraded image clamped to `[0, 1]`.
    pub degraded: Image,
    pub components: Components,
    pub task_label: usize,
}

/// Deterministic procedural clean image.
pub fn synth_clean(seed: u64, height: usize, width: usize) -> Result<CleanImage> {
    if height < 8 || width < 8 {
        return Err(Error::Dimension(format!(
            "clean images need at least 8x8, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CleanImage::new(synth::clean_scene(&mut rng, height, width))
}

/// `y_noise = x + N` with `N ~ N(0, sigma²)` i.i.d.
pub fn apply_noise(x: &CleanImage, sigma: f64, seed: u64) -> Result<(Image, Image)> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {sigma} < 0")));
    }
    let noise = if sigma == 0.0 {
        Image::zeros(x.height, x.width)
    } else {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = stream(seed, STREAM_NOISE);
        Image {
            height: x.height,
            width: x.width,
            data: (0..x.data.len()).map(|_| normal.sample(&mut rng)).collect(),
        }
    };
    let y = x.zip_map(&noise, |a, n| a + n)?;
    Ok((y, noise))
}

fn rain_spec(spec: &DegradationSpec) -> Result<RainSpec> {
    match spec.kind {
        DegradationKind::Rain(r) => Ok(r),
        other => Err(Error::Config(format!("expected a rain spec, got {other:?}"))),
    }
}

fn haze_spec(spec: &DegradationSpec) -> Result<HazeSpec> {
    match spec.kind {
        DegradationKind::Haze(h) => Ok(h),
        other => Err(Error::Config(format!("expected a haze spec, got {other:?}"))),
    }
}

/// Sparse non-negative streak layer for `spec` at the image's resolution.
pub fn rain_layer(spec: &RainSpec, height: usize, width: usize, seed: u64) -> Result<Image> {
    let layer = synth::rain_layer(&mut stream(seed, STREAM_RAIN), spec, height, width);
    let support = layer.support_fraction();
    if support >= MAX_RAIN_SUPPORT {
        return Err(Error::Config(format!(
            "{} streaks cover {:.1}% of pixels, rain must stay below {:.0}%",
            spec.streaks,
            100.0 * support,
            100.0 * MAX_RAIN_SUPPORT
        )));
    }
    Ok(layer)
}

/// `y_rain = x + A_rain + N`; returns `(y_rain, A_rain)`.
pub fn apply_rain(x: &CleanImage, spec: &DegradationSpec, seed: u64) -> Result<(Image, Image)> {
    spec.validate()?;
    let rain = rain_spec(spec)?;
    let layer = rain_layer(&rain, x.height, x.width, seed)?;
    let (_, noise) = apply_noise(x, spec.noise_sigma, seed)?;
    let mut y = x.zip_map(&layer, |a, r| a + r)?;
    y.data.iter_mut().zip(&noise.data).for_each(|(v, n)| *v += n);
    Ok((y, layer))
}

/// Transmission map `A_haze = exp(-beta·d)` over a smooth depth field `d`.
pub fn haze_transmission(beta: f64, height: usize, width: usize, seed: u64) -> Image {
    let depth = synth::depth_map(&mut stream(seed, STREAM_DEPTH), height, width);
    let plane: Vec<f64> = depth.iter().map(|d| (-beta * d).exp()).collect();
    Image::from_plane(height, width, &plane)
}

/// Hazes `x` per `spec.mode`; returns `(y_haze, A_haze)`.
pub fn apply_haze(x: &CleanImage, spec: &DegradationSpec, seed: u64) -> Result<(Image, Image)> {
    spec.validate()?;
    let haze = haze_spec(spec)?;
    let a = haze_transmission(haze.beta, x.height, x.width, seed);
    let (_, noise) = apply_noise(x, spec.noise_sigma, seed)?;
    let mut y = x.zip_map(&a, |xv, av| xv * av)?;
    if haze.mode == HazeMode::Scattering {
        y.data
            .iter_mut()
            .zip(&a.data)
            .for_each(|(v, &av)| *v += haze.airlight * (1.0 - av));
    }
    y.data.iter_mut().zip(&noise.data).for_each(|(v, n)| *v += n);
    Ok((y, a))
}

/// `A' = (A_haze - 1)·x`.
pub fn residual_haze(x: &CleanImage, a_haze: &Image) -> Result<Image> {
    a_haze.zip_map(x, |a, xv| (a - 1.0) * xv)
}

/// Applies one recipe and returns every intermediate map.
pub fn degrade(clean: &CleanImage, spec: &DegradationSpec, seed: u64, task_label: usize) -> Result<DegradedSample> {
    spec.validate()?;
    let (raw, components) = match spec.kind {
        DegradationKind::Noise => {
            let (y, n) = apply_noise(clean, spec.noise_sigma, seed)?;
            (y, Components { noise: n, rain: None, haze: None, a_prime: None })
        }
        DegradationKind::Rain(_) => {
            let (y, a) = apply_rain(clean, spec, seed)?;
            let (_, n) = apply_noise(clean, spec.noise_sigma, seed)?;
            (y, Components { noise: n, rain: Some(a), haze: None, a_prime: None })
        }
        DegradationKind::Haze(_) => {
            let (y, a) = apply_haze(clean, spec, seed)?;
            let (_, n) = apply_noise(clean, spec.noise_sigma, seed)?;
            let a_prime = residual_haze(clean, &a)?;
            (y, Components { noise: n, rain: None, haze: Some(a), a_prime: Some(a_prime) })
        }
    };
    Ok(DegradedSample {
        clean: clean.clone(),
        degraded: raw.clone().clamp_unit(),
        degraded_raw: raw,
        components,
        task_label,
    })
}

/// Measured deviations of the noise → rain → haze identities.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionReport {
    /// `max |y_rain - (y_noise + A_rain)|`
    pub noise_to_rain: f64,
    /// `max |y_haze - (y_noise + A')|`
    pub noise_to_haze: f64,
    /// `max |y_haze - (y_rain + (A' - A_rain) on rain support + A' elsewhere)|`
    pub rain_to_haze: f64,
    pub rain_support: f64,
    pub a_prime_support: f64,
}

impl DecompositionReport {
    pub fn rain_sparser(&self) -> bool {
        self.rain_support < self.a_prime_support
    }
}

/// Builds noisy, rainy and hazy versions of `x` from one shared noise draw and
/// checks that each harder corruption is the easier one plus a residual.
pub fn verify_decomposition(
    x: &CleanImage,
    noise: &DegradationSpec,
    rain: &DegradationSpec,
    haze: &DegradationSpec,
    seed: u64,
) -> Result<DecompositionReport> {
    if !matches!(noise.kind, DegradationKind::Noise) {
        return Err(Error::Config("first spec must be a noise spec".into()));
    }
    if rain.noise_sigma != noise.noise_sigma || haze.noise_sigma != noise.noise_sigma {
        return Err(Error::Config(format!(
            "specs must share one additive noise sigma, got {} / {} / {}",
            noise.noise_sigma, rain.noise_sigma, haze.noise_sigma
        )));
    }
    let (y_noise, _) = apply_noise(x, noise.noise_sigma, seed)?;
    let (y_rain, a_rain) = apply_rain(x, rain, seed)?;
    let (y_haze, a_haze) = apply_haze(x, haze, seed)?;
    let a_prime = residual_haze(x, &a_haze)?;

    let noise_to_rain = y_rain.max_abs_diff(&y_noise.zip_map(&a_rain, |a, b| a + b)?)?;
    let noise_to_haze = y_haze.max_abs_diff(&y_noise.zip_map(&a_prime, |a, b| a + b)?)?;
    let complement = a_prime.zip_map(&a_rain, |ap, ar| {
        if ar.abs() > SUPPORT_THRESHOLD {
            ap - ar
        } else {
            ap
        }
    })?;
    let rain_to_haze = y_haze.max_abs_diff(&y_rain.zip_map(&complement, |a, b| a + b)?)?;

    let report = DecompositionReport {
        noise_to_rain,
        noise_to_haze,
        rain_to_haze,
        rain_support: a_rain.support_fraction(),
        a_prime_support: a_prime.support_fraction(),
    };
    for (identity, deviation) in [
        ("y_rain = y_noise + A_rain", noise_to_rain),
        ("y_haze = y_noise + A'", noise_to_haze),
        ("y_haze = y_rain + (A' - A_rain)|rain + A'|no rain", rain_to_haze),
    ] {
        if !(deviation < IDENTITY_TOLERANCE) {
            return Err(Error::Verification {
                identity: identity.into(),
                deviation,
            });
        }
    }
    // the null recipe has no rain and no haze, so both supports are empty
    let trivial = report.rain_support == 0.0 && report.a_prime_support == 0.0;
    if !trivial && !report.rain_sparser() {
        return Err(Error::Verification {
            identity: "support(A_rain) < support(A')".into(),
            deviation: report.rain_support - report.a_prime_support,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(seed: u64) -> CleanImage {
        synth_clean(seed, 64, 64).unwrap()
    }

    fn null_specs() -> (DegradationSpec, DegradationSpec, DegradationSpec) {
        (
            DegradationSpec::noise(0.0),
            DegradationSpec::rain(RainSpec { streaks: 0, ..RainSpec::default() }, 0.0),
            DegradationSpec::haze(HazeSpec { beta: 0.0, ..HazeSpec::default() }, 0.0),
        )
    }

    #[test]
    fn synth_is_deterministic_and_varied() {
        assert_eq!(clean(3), clean(3));
        let (a, b) = (clean(0), clean(1));
        let differing = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        assert!(differing as f64 > 0.1 * a.data().len() as f64);
        assert!(a.std_dev() > 0.02);
        assert!(synth_clean(0, 7, 16).is_err());
    }

    #[test]
    fn synth_stays_in_unit_range() {
        for seed in 0..1000 {
            let img = synth_clean(seed, 16, 16).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.std_dev() > 0.02, "seed {seed} is nearly flat");
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let x = clean(5);
        let (y, n) = apply_noise(&x, 0.0, 9).unwrap();
        assert_eq!(&y, x.image());
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_std_matches_sigma() {
        let x = clean(5);
        let (y, n) = apply_noise(&x, 0.1, 9).unwrap();
        assert!((n.std_dev() - 0.1).abs() < 0.005, "std {}", n.std_dev());
        let diff = y.zip_map(&x, |a, b| a - b).unwrap();
        assert!(diff.max_abs_diff(&n).unwrap() < 1e-15);
        assert_eq!(apply_noise(&x, 0.1, 9).unwrap(), (y, n));
    }

    #[test]
    fn rain_identities_and_sparsity() {
        let x = clean(2);
        let spec = DegradationSpec::rain(RainSpec::default(), 0.05);
        let (y_rain, a) = apply_rain(&x, &spec, 4).unwrap();
        let (y_noise, _) = apply_noise(&x, 0.05, 4).unwrap();
        let diff = y_rain.zip_map(&y_noise, |a, b| a - b).unwrap();
        assert!(diff.max_abs_diff(&a).unwrap() < 1e-12);
        assert!(a.data().iter().all(|&v| v >= 0.0));
        let support = a.support_fraction();
        assert!((0.01..0.3).contains(&support), "support {support}");

        let none = DegradationSpec::rain(RainSpec { streaks: 0, ..RainSpec::default() }, 0.05);
        let (y0, a0) = apply_rain(&x, &none, 4).unwrap();
        assert!(a0.data().iter().all(|&v| v == 0.0));
        assert_eq!(y0, y_noise);
    }

    #[test]
    fn dense_rain_is_a_configuration_error() {
        let x = clean(2);
        let spec = DegradationSpec::rain(RainSpec { streaks: 2000, thickness: 3.0, ..RainSpec::default() }, 0.0);
        assert!(matches!(apply_rain(&x, &spec, 1), Err(Error::Config(_))));
        assert!(matches!(
            apply_rain(&x, &DegradationSpec::noise(0.1), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn haze_identities() {
        let x = clean(8);
        let (y_noise, _) = apply_noise(&x, 0.02, 6).unwrap();

        let flat = DegradationSpec::haze(HazeSpec { beta: 0.0, ..HazeSpec::default() }, 0.02);
        let (y, a) = apply_haze(&x, &flat, 6).unwrap();
        assert!(a.data().iter().all(|&v| v == 1.0));
        assert_eq!(y, y_noise);

        let paper = DegradationSpec::haze(HazeSpec::default(), 0.02);
        let (y, a) = apply_haze(&x, &paper, 6).unwrap();
        assert!(a.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let expected = a.zip_map(&x, |av, xv| (av - 1.0) * xv).unwrap();
        let diff = y.zip_map(&y_noise, |p, q| p - q).unwrap();
        assert!(diff.max_abs_diff(&expected).unwrap() < 1e-12);

        let a_prime = residual_haze(&x, &a).unwrap();
        assert!(a_prime.data().iter().all(|&v| v <= 0.0));
        let rebuilt = y_noise.zip_map(&a_prime, |p, q| p + q).unwrap();
        assert!(rebuilt.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn scattering_haze_on_black_image_is_airlight() {
        let black = CleanImage::new(Image::zeros(16, 16)).unwrap();
        let spec = DegradationSpec::haze(
            HazeSpec { mode: HazeMode::Scattering, ..HazeSpec::default() },
            0.03,
        );
        let (y, a) = apply_haze(&black, &spec, 2).unwrap();
        let (_, n) = apply_noise(&black, 0.03, 2).unwrap();
        let expected = a.zip_map(&n, |av, nv| 0.8 * (1.0 - av) + nv).unwrap();
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn residual_haze_degenerate_cases() {
        let x = clean(1);
        let ones = Image::filled(64, 64, 1.0);
        assert!(residual_haze(&x, &ones).unwrap().data().iter().all(|&v| v == 0.0));
        let black = CleanImage::new(Image::zeros(64, 64)).unwrap();
        let a = haze_transmission(1.0, 64, 64, 3);
        assert!(residual_haze(&black, &a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn null_specs_have_zero_deviation() {
        let (n, r, h) = null_specs();
        let report = verify_decomposition(&clean(4), &n, &r, &h, 1).unwrap();
        assert_eq!(report.noise_to_rain, 0.0);
        assert_eq!(report.noise_to_haze, 0.0);
        assert_eq!(report.rain_to_haze, 0.0);
    }

    #[test]
    fn default_specs_decompose() {
        let noise = DegradationSpec::noise(0.05);
        let rain = DegradationSpec::rain(RainSpec::default(), 0.05);
        let haze = DegradationSpec::haze(HazeSpec::default(), 0.05);
        for seed in 0..10 {
            let r = verify_decomposition(&clean(100 + seed), &noise, &rain, &haze, seed).unwrap();
            assert!((0.01..0.3).contains(&r.rain_support), "{r:?}");
            assert!(r.a_prime_support > 0.95, "{r:?}");
        }
    }

    #[test]
    fn scattering_mode_breaks_the_haze_identity() {
        let noise = DegradationSpec::noise(0.0);
        let rain = DegradationSpec::rain(RainSpec::default(), 0.0);
        let haze = DegradationSpec::haze(HazeSpec { mode: HazeMode::Scattering, ..HazeSpec::default() }, 0.0);
        match verify_decomposition(&clean(1), &noise, &rain, &haze, 0) {
            Err(Error::Verification { identity, deviation }) => {
                assert!(identity.contains("y_noise + A'"));
                assert!(deviation > 1e-3);
            }
            other => panic!("expected verification failure, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_noise_is_rejected() {
        let x = clean(1);
        let r = verify_decomposition(
            &x,
            &DegradationSpec::noise(0.1),
            &DegradationSpec::rain(RainSpec::default(), 0.0),
            &DegradationSpec::haze(HazeSpec::default(), 0.1),
            0,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn clamped_copy_differs_only_out_of_range() {
        let x = clean(11);
        let s = degrade(&x, &DegradationSpec::noise(0.2), 3, 2).unwrap();
        for (raw, clamped) in s.degraded_raw.data().iter().zip(s.degraded.data()) {
            if (0.0..=1.0).contains(raw) {
                assert_eq!(raw, clamped);
            } else {
                assert_ne!(raw, clamped);
            }
        }
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
            assert_eq!(Task::from_label(t.label()), Some(t));
        }
        assert!("snow".parse::<Task>().is_err());
    }
}
