//! Deterministic synthetic generator of synchronized multi-view spectrograms.
//!
//! Every sample renders a latent Doppler-like track whose shape depends on
//! the activity class (slope, V-shape, oscillation), jittered per sample and
//! per simulated subject, on top of a static zero-Doppler clutter line. Each
//! view resamples the latent to its own resolution, applies a fixed
//! frequency-axis mixing kernel and gain, and adds noise.
//!
//! Noise model, for noise level `sigma` and view correlation `rho`:
//! a latent field `sigma * rho * N(0,1)` shared by all views, plus an
//! independent per-view field `sigma * (1 - rho) * N(0,1)`.
//!
//! Randomness: ChaCha8 seeded from the dataset seed, one stream per sample
//! (stream number = sample id), so a sample's content does not depend on
//! generation order. Gaussian draws use `rand_distr::StandardNormal`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::spectrogram::{Activity, Modality, Spectrogram, SyncedSample, N_CLASSES};
use crate::error::{Error, Result};

/// Spectrogram resolutions used by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    /// (frequency bins, time frames)
    pub csi_shape: (usize, usize),
    pub pwr_shape: (usize, usize),
    pub latent_shape: (usize, usize),
}

impl Profile {
    /// Full-size shapes: CSI 65×501, PWR 100×41.
    pub fn full() -> Self {
        Profile {
            name: "full".into(),
            csi_shape: (65, 501),
            pwr_shape: (100, 41),
            latent_shape: (100, 501),
        }
    }

    /// Reduced shapes for CPU-bound experiments and tests.
    pub fn desk() -> Self {
        Profile {
            name: "desk".into(),
            csi_shape: (16, 48),
            pwr_shape: (24, 16),
            latent_shape: (32, 64),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::arg(format!(
                "unknown profile '{other}' (expected full or desk)"
            ))),
        }
    }

    pub fn shape_of(&self, m: Modality) -> (usize, usize) {
        if m.is_csi() {
            self.csi_shape
        } else {
            self.pwr_shape
        }
    }
}

/// Shape of the latent Doppler track for one class. Frequencies are in
/// normalized units where 0.5 is zero Doppler and the band spans [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    /// Linear frequency change over the active window.
    pub slope: f64,
    /// Depth of a V-shaped excursion (down then up).
    pub vee: f64,
    /// Amplitude of a sinusoidal oscillation.
    pub oscillation: f64,
    /// Oscillation cycles over the active window.
    pub cycles: f64,
    /// Fraction of the time axis the activity occupies.
    pub duration: f64,
    /// Gaussian half-width of the track in frequency.
    pub width: f64,
}

impl ClassSignature {
    fn track(&self, tau: f64, amp: f64) -> f64 {
        0.5 + amp
            * (self.slope * (tau - 0.5)
                + self.vee * ((2.0 * tau - 1.0).abs() - 0.5)
                + self.oscillation * (2.0 * PI * self.cycles * tau).sin())
    }
}

/// Default signatures, in [`Activity::ALL`] order.
pub fn default_signatures() -> Vec<ClassSignature> {
    let sig = |slope, vee, oscillation, cycles, duration| ClassSignature {
        slope,
        vee,
        oscillation,
        cycles,
        duration,
        width: 0.045,
    };
    vec![
        sig(-0.30, 0.0, 0.0, 0.0, 0.55), // lay
        sig(0.0, 0.35, 0.0, 0.0, 0.45),  // pickup
        sig(-0.45, 0.0, 0.0, 0.0, 0.30), // sit
        sig(0.45, 0.0, 0.0, 0.0, 0.30),  // stand
        sig(0.30, 0.0, 0.0, 0.0, 0.55),  // standff
        sig(0.0, 0.0, 0.15, 3.0, 0.85),  // walk
        sig(0.0, 0.0, 0.25, 6.0, 0.45),  // wave
    ]
}

/// Per-view rendering: 3-tap frequency-axis kernel and gain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub modality: Modality,
    pub kernel: [f64; 3],
    pub gain: f64,
}

impl ViewTransform {
    pub fn identity(modality: Modality) -> Self {
        ViewTransform {
            modality,
            kernel: [0.0, 1.0, 0.0],
            gain: 1.0,
        }
    }
}

pub fn default_view_transforms() -> Vec<ViewTransform> {
    vec![
        ViewTransform::identity(Modality::Csi1),
        ViewTransform {
            modality: Modality::Csi2,
            kernel: [0.25, 0.5, 0.25],
            gain: 0.9,
        },
        ViewTransform {
            modality: Modality::Pwr,
            kernel: [0.3, 0.4, 0.3],
            gain: 1.1,
        },
    ]
}

/// Relative speed of each simulated subject.
const SUBJECT_SPEED: [f64; 5] = [0.85, 0.93, 1.0, 1.07, 1.15];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub rho: f64,
    pub seed: u64,
    pub profile: Profile,
    pub class_signatures: Vec<ClassSignature>,
    pub view_transforms: Vec<ViewTransform>,
    /// Relative per-sample jitter of track amplitude and speed.
    pub jitter: f64,
}

impl GeneratorParams {
    pub fn new(n_per_class: usize, noise_sigma: f64, rho: f64, seed: u64, profile: Profile) -> Self {
        GeneratorParams {
            n_per_class,
            noise_sigma,
            rho,
            seed,
            profile,
            class_signatures: default_signatures(),
            view_transforms: default_view_transforms(),
            jitter: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 1 {
            return Err(Error::arg("n_per_class must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::arg(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::arg(format!(
                "sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return Err(Error::arg("jitter must lie in [0, 1)"));
        }
        if self.class_signatures.len() != N_CLASSES {
            return Err(Error::arg(format!(
                "need {N_CLASSES} class signatures, got {}",
                self.class_signatures.len()
            )));
        }
        if self.view_transforms.is_empty() {
            return Err(Error::arg("at least one view transform required"));
        }
        for s in &self.class_signatures {
            if !(s.duration > 0.0 && s.duration <= 1.0 && s.width > 0.0) {
                return Err(Error::arg("class signature needs duration in (0,1] and width > 0"));
            }
        }
        let shapes = [
            self.profile.csi_shape,
            self.profile.pwr_shape,
            self.profile.latent_shape,
        ];
        if shapes.iter().any(|&(h, w)| h < 2 || w < 2) {
            return Err(Error::arg("profile shapes must be at least 2x2"));
        }
        Ok(())
    }
}

/// Generate `n_per_class` samples of each of the seven activities. Sample ids
/// are class-major: `class * n_per_class + i`.
pub fn generate_synthetic_dataset(params: &GeneratorParams) -> Result<Vec<SyncedSample>> {
    params.validate()?;
    let mut out = Vec::with_capacity(params.n_per_class * N_CLASSES);
    for activity in Activity::ALL {
        for i in 0..params.n_per_class {
            let id = (activity.index() * params.n_per_class + i) as u64;
            out.push(generate_sample(params, activity, i, id));
        }
    }
    Ok(out)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn generate_sample(p: &GeneratorParams, activity: Activity, i: usize, id: u64) -> SyncedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(id);

    let sig = &p.class_signatures[activity.index()];
    let subject = (i % SUBJECT_SPEED.len()) as u32;
    let speed = SUBJECT_SPEED[subject as usize] * (1.0 + p.jitter * 0.5 * gauss(&mut rng)).max(0.5);
    let amp = (1.0 + p.jitter * gauss(&mut rng)).max(0.3);
    let duration = (sig.duration / speed).clamp(0.05, 0.98);
    let onset = rng.random_range(0.01..=(0.99 - duration).max(0.011));
    let strength = rng.random_range(0.7..1.0);
    let clutter = rng.random_range(0.2..0.8);
    let centre_shift = 0.02 * gauss(&mut rng);
    let layout = rng.random_range(0..3u32);
    let position = rng.random_range(0..9u32);

    let (lh, lw) = p.profile.latent_shape;
    let mut latent = vec![0.0; lh * lw];
    for t in 0..lw {
        let time = (t as f64 + 0.5) / lw as f64;
        let tau = (time - onset) / duration;
        let active = (0.0..=1.0).contains(&tau);
        let envelope = if active { (PI * tau).sin().sqrt() } else { 0.0 };
        let centre = sig.track(tau.clamp(0.0, 1.0), amp) + centre_shift;
        for f in 0..lh {
            let nu = (f as f64 + 0.5) / lh as f64;
            let mut v = clutter * (-(nu - 0.5).powi(2) / (2.0 * 0.015f64.powi(2))).exp();
            if active {
                v += strength * envelope * (-(nu - centre).powi(2) / (2.0 * sig.width.powi(2))).exp();
            }
            latent[f * lw + t] = v;
        }
    }
    let shared_scale = p.noise_sigma * p.rho;
    for v in latent.iter_mut() {
        // Always draw so the stream layout does not depend on sigma/rho.
        let n = gauss(&mut rng);
        *v += shared_scale * n;
    }

    let indep_scale = p.noise_sigma * (1.0 - p.rho);
    let mut views = BTreeMap::new();
    for vt in &p.view_transforms {
        let (h, w) = p.profile.shape_of(vt.modality);
        let resampled = resample_bilinear(&latent, lh, lw, h, w);
        let mut mixed = mix_frequency(&resampled, h, w, &vt.kernel);
        for v in mixed.iter_mut() {
            let n = gauss(&mut rng);
            *v = vt.gain * *v + indep_scale * n;
        }
        let spec = Spectrogram::normalized(vt.modality, h, w, &mixed)
            .expect("generator shapes are validated");
        views.insert(vt.modality, spec);
    }

    SyncedSample {
        id,
        label: activity,
        views,
        subject: Some(subject),
        layout: Some(layout),
        position: Some(position),
    }
}

/// Bilinear resampling with aligned pixel centres. Identity when shapes match.
pub fn resample_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let coord = |i: usize, d: usize, s: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(s - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = vec![0.0; dh * dw];
    for i in 0..dh {
        let (y0, y1, fy) = coord(i, dh, sh);
        for j in 0..dw {
            let (x0, x1, fx) = coord(j, dw, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out[i * dw + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Convolve each column (frequency axis) with a 3-tap kernel, clamping at
/// the band edges.
fn mix_frequency(src: &[f64], h: usize, w: usize, k: &[f64; 3]) -> Vec<f64> {
    if *k == [0.0, 1.0, 0.0] {
        return src.to_vec();
    }
    let mut out = vec![0.0; h * w];
    for f in 0..h {
        let lo = f.saturating_sub(1);
        let hi = (f + 1).min(h - 1);
        for t in 0..w {
            out[f * w + t] = k[0] * src[lo * w + t] + k[1] * src[f * w + t] + k[2] * src[hi * w + t];
        }
    }
    out
}
