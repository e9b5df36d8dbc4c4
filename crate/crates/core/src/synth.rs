//! Deterministic synthetic EM-trace generation, standing in for physical
//! capture.
//!
//! The signal model: a device radiates a comb of harmonics anchored at its
//! (device-unique) carrier offset, with a device-unique gain applied to each
//! harmonic line. The running activity amplitude-modulates the whole comb
//! with a small set of class-unique tones, so every activity imprints the
//! same sideband pattern around every harmonic. Capture sessions rescale the
//! signal, nudge the carrier, and move the noise floor. Device identity
//! therefore lives in absolute spectral alignment and line weighting, while
//! activity identity lives in the sideband offsets relative to each line,
//! which is what lets a frozen feature extractor carry across devices once
//! its output layer is retrained.
//!
//! Generation is a pure function of (profile, signature, drift, seed).

use std::collections::BTreeMap;

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::assemble;
use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::spectral::{stft_featurize, take_windows, SpectralDataset, StftConfig, TakeStrategy};
use crate::trace_io::{CaptureMeta, IqTrace};

/// Baseband simulation rate used by the built-in configs.
pub const DEFAULT_SIM_RATE_HZ: f64 = 1e6;

/// Harmonic lines sit every `sim_rate / HARMONIC_SPACING_DIVISOR` Hz.
pub const HARMONIC_SPACING_DIVISOR: f64 = 20.0;

/// STFT bin width the built-in configs are calibrated against
/// (1 MHz / 2048).
pub const DEFAULT_BIN_HZ: f64 = DEFAULT_SIM_RATE_HZ / 2048.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqImbalance {
    /// Q-arm gain relative to the I arm; 1.0 is balanced.
    pub gain_ratio: f64,
    /// Quadrature phase skew in radians; 0.0 is balanced.
    pub phase_skew_rad: f64,
}

/// Synthetic device fingerprint: what makes two "identical" units emit
/// distinguishable spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: String,
    /// SoC clock the capture would be centered on; recorded as metadata.
    pub clock_hz: f64,
    /// Device-unique baseband offset of the harmonic comb.
    pub carrier_offset_hz: f64,
    /// Device-unique gain per harmonic line, strictly positive.
    pub harmonic_gains: Vec<f64>,
    pub iq_imbalance: IqImbalance,
    pub noise_floor_db: f64,
}

/// Class-unique AM tone set; distinct activities use disjoint tone sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivitySignature {
    pub activity_label: String,
    pub tone_offsets_hz: Vec<f64>,
    /// Modulation depth per tone, each in (0, 1].
    pub tone_depths: Vec<f64>,
}

/// Capture-to-capture variation: amplitude rescaling, carrier nudge, and
/// noise-floor movement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDrift {
    pub session_id: String,
    pub amplitude_scale: f64,
    pub extra_offset_hz: f64,
    pub snr_delta_db: f64,
}

impl SessionDrift {
    /// A session that changes nothing except the noise realization.
    pub fn none(session_id: &str) -> Self {
        SessionDrift {
            session_id: session_id.to_string(),
            amplitude_scale: 1.0,
            extra_offset_hz: 0.0,
            snr_delta_db: 0.0,
        }
    }
}

/// Versioned generator configuration: device fleet, activity set, and
/// session drifts, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub version: u32,
    pub sim_rate_hz: f64,
    pub devices: Vec<DeviceProfile>,
    pub activities: Vec<ActivitySignature>,
    pub sessions: Vec<SessionDrift>,
}

pub const SYNTH_CONFIG_VERSION: u32 = 1;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != SYNTH_CONFIG_VERSION {
            return Err(Error::Schema(format!(
                "unsupported synth config version {}",
                self.version
            )));
        }
        if !(self.sim_rate_hz > 0.0) {
            return Err(Error::Argument("sim_rate_hz must be positive".into()));
        }
        if self.devices.is_empty() || self.activities.is_empty() || self.sessions.is_empty() {
            return Err(Error::Argument(
                "config needs at least one device, activity, and session".into(),
            ));
        }
        for device in &self.devices {
            if device.harmonic_gains.is_empty()
                || device.harmonic_gains.iter().any(|&g| !(g > 0.0))
            {
                return Err(Error::Argument(format!(
                    "device {} harmonic gains must be strictly positive",
                    device.device_id
                )));
            }
            if !(0.8..=1.2).contains(&device.iq_imbalance.gain_ratio) {
                return Err(Error::Argument(format!(
                    "device {} iq gain ratio {} outside [0.8, 1.2]",
                    device.device_id, device.iq_imbalance.gain_ratio
                )));
            }
        }
        for activity in &self.activities {
            if activity.tone_offsets_hz.len() != activity.tone_depths.len() {
                return Err(Error::Argument(format!(
                    "activity {} has {} tones but {} depths",
                    activity.activity_label,
                    activity.tone_offsets_hz.len(),
                    activity.tone_depths.len()
                )));
            }
            if activity.tone_depths.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
                return Err(Error::Argument(format!(
                    "activity {} tone depths must lie in (0, 1]",
                    activity.activity_label
                )));
            }
        }
        for (i, a) in self.activities.iter().enumerate() {
            for b in &self.activities[i + 1..] {
                if a.activity_label == b.activity_label {
                    return Err(Error::Conflict(format!(
                        "duplicate activity label {}",
                        a.activity_label
                    )));
                }
                if a.tone_offsets_hz.iter().any(|t| b.tone_offsets_hz.contains(t)) {
                    return Err(Error::Conflict(format!(
                        "activities {} and {} share a tone offset",
                        a.activity_label, b.activity_label
                    )));
                }
            }
        }
        for session in &self.sessions {
            if !(session.amplitude_scale > 0.0) {
                return Err(Error::Argument(format!(
                    "session {} amplitude scale must be positive",
                    session.session_id
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the named devices and sessions, in config order.
    pub fn restrict(&self, device_ids: &[&str], session_ids: &[&str]) -> SynthConfig {
        SynthConfig {
            version: self.version,
            sim_rate_hz: self.sim_rate_hz,
            devices: self
                .devices
                .iter()
                .filter(|d| device_ids.contains(&d.device_id.as_str()))
                .cloned()
                .collect(),
            activities: self.activities.clone(),
            sessions: self
                .sessions
                .iter()
                .filter(|s| session_ids.contains(&s.session_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<SynthConfig> {
        let config: SynthConfig =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("synth config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Three iPhone-13-like units running the ten smartphone activities,
    /// with one clean session and two drifted ones.
    pub fn smartphone_default() -> SynthConfig {
        let bin = DEFAULT_BIN_HZ;
        SynthConfig {
            version: SYNTH_CONFIG_VERSION,
            sim_rate_hz: DEFAULT_SIM_RATE_HZ,
            devices: vec![
                DeviceProfile {
                    device_id: "iPhone13-I".into(),
                    clock_hz: 3.23e9,
                    carrier_offset_hz: -0.45 * bin,
                    harmonic_gains: vec![1.00, 0.82, 0.65, 0.52, 0.41, 0.33, 0.26, 0.21],
                    iq_imbalance: IqImbalance {
                        gain_ratio: 1.00,
                        phase_skew_rad: 0.00,
                    },
                    noise_floor_db: -32.0,
                },
                DeviceProfile {
                    device_id: "iPhone13-II".into(),
                    clock_hz: 3.23e9,
                    carrier_offset_hz: 0.55 * bin,
                    harmonic_gains: vec![0.88, 0.99, 0.55, 0.61, 0.35, 0.42, 0.22, 0.28],
                    iq_imbalance: IqImbalance {
                        gain_ratio: 1.12,
                        phase_skew_rad: 0.07,
                    },
                    noise_floor_db: -32.0,
                },
                DeviceProfile {
                    device_id: "iPhone13-III".into(),
                    clock_hz: 3.23e9,
                    carrier_offset_hz: 1.55 * bin,
                    harmonic_gains: vec![1.10, 0.60, 0.80, 0.38, 0.52, 0.24, 0.33, 0.15],
                    iq_imbalance: IqImbalance {
                        gain_ratio: 0.86,
                        phase_skew_rad: -0.09,
                    },
                    noise_floor_db: -32.0,
                },
            ],
            activities: standard_activities(SMARTPHONE_ACTIVITIES, bin),
            sessions: standard_sessions(bin),
        }
    }

    /// Two nRF52-DK-like units running the eight firmware activities.
    pub fn iot_default() -> SynthConfig {
        let bin = DEFAULT_BIN_HZ;
        SynthConfig {
            version: SYNTH_CONFIG_VERSION,
            sim_rate_hz: DEFAULT_SIM_RATE_HZ,
            devices: vec![
                DeviceProfile {
                    device_id: "Nordic-1".into(),
                    clock_hz: 2.4e9,
                    carrier_offset_hz: -0.45 * bin,
                    harmonic_gains: vec![1.00, 0.74, 0.60, 0.47, 0.38, 0.30, 0.24, 0.19],
                    iq_imbalance: IqImbalance {
                        gain_ratio: 1.08,
                        phase_skew_rad: 0.05,
                    },
                    noise_floor_db: -32.0,
                },
                DeviceProfile {
                    device_id: "Nordic-2".into(),
                    clock_hz: 2.4e9,
                    carrier_offset_hz: 0.55 * bin,
                    harmonic_gains: vec![0.92, 0.95, 0.50, 0.58, 0.33, 0.39, 0.20, 0.25],
                    iq_imbalance: IqImbalance {
                        gain_ratio: 0.90,
                        phase_skew_rad: -0.06,
                    },
                    noise_floor_db: -32.0,
                },
            ],
            activities: standard_activities(IOT_ACTIVITIES, bin),
            sessions: standard_sessions(bin),
        }
    }
}

/// The ten smartphone activities of the capture campaign.
pub const SMARTPHONE_ACTIVITIES: &[&str] = &[
    "calendar-app",
    "camera-photo",
    "camera-video",
    "email-app",
    "gallery-app",
    "home-screen",
    "idle",
    "phone-app",
    "sms-app",
    "web-browser-app",
];

/// The eight nRF52-DK firmware activities.
pub const IOT_ACTIVITIES: &[&str] = &[
    "blinky",
    "blinky_freertos",
    "blinky_rtc_freertos",
    "blinky_systick",
    "led_softblink",
    "BLINK_new",
    "IDLE_new",
    "Matrix_multiplication_new",
];

/// Class `c` modulates with one tone per family, all families spaced one
/// nominal STFT bin within themselves: an ascending family at `2 + c` and
/// two coprime-stride permuted families higher up. Classes sit one bin
/// apart inside each family, so a one-bin capture drift relabels every
/// family to some other valid class slot; because the three permutations
/// disagree, the shifted evidence stays inside the trained pattern space
/// (a retrained readout can separate it) while contradicting itself (a
/// frozen readout cannot). All sets are disjoint and stay below half the
/// harmonic spacing.
pub fn standard_activities(labels: &[&str], bin: f64) -> Vec<ActivitySignature> {
    let k = labels.len();
    let (stride_a, stride_b) = coprime_strides(k);
    let base_b = k + 4;
    let base_c = base_b + k + 2;
    labels
        .iter()
        .enumerate()
        .map(|(c, label)| ActivitySignature {
            activity_label: label.to_string(),
            tone_offsets_hz: vec![
                (2 + c) as f64 * bin,
                (base_b + (stride_a * c) % k) as f64 * bin,
                (base_c + (stride_b * c) % k) as f64 * bin,
            ],
            tone_depths: vec![0.42, 0.30, 0.22],
        })
        .collect()
}

/// Two distinct strides coprime with `k`, so `c -> stride * c mod k` is a
/// bijection over class indices.
fn coprime_strides(k: usize) -> (usize, usize) {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    if k <= 2 {
        return (1, 1);
    }
    let mut found = Vec::new();
    let mut candidate = 2;
    while found.len() < 2 {
        if gcd(candidate, k) == 1 {
            found.push(candidate);
        }
        candidate += 1;
    }
    (found[0], found[1])
}

pub fn standard_sessions(bin: f64) -> Vec<SessionDrift> {
    vec![
        SessionDrift::none("s0"),
        SessionDrift {
            session_id: "s1".into(),
            amplitude_scale: 0.50,
            extra_offset_hz: 1.00 * bin,
            snr_delta_db: 6.0,
        },
        SessionDrift {
            session_id: "s2".into(),
            amplitude_scale: 1.50,
            extra_offset_hz: -1.00 * bin,
            snr_delta_db: -6.0,
        },
    ]
}

/// Generates one trace of exactly `n_samples` samples.
pub fn gen_trace_samples(
    profile: &DeviceProfile,
    sig: &ActivitySignature,
    drift: &SessionDrift,
    n_samples: usize,
    sim_rate_hz: f64,
    seed: u64,
) -> Result<IqTrace> {
    if n_samples == 0 {
        return Err(Error::Argument("trace needs at least one sample".into()));
    }
    if !(sim_rate_hz > 0.0) {
        return Err(Error::Argument(format!(
            "sim_rate_hz must be positive, got {sim_rate_hz}"
        )));
    }

    let comb_base_hz = profile.carrier_offset_hz + drift.extra_offset_hz;
    let spacing_hz = sim_rate_hz / HARMONIC_SPACING_DIVISOR;

    // Phase-rotation recurrences instead of per-sample trigonometry.
    let step = |freq_hz: f64| Complex::from_polar(1.0f64, std::f64::consts::TAU * freq_hz / sim_rate_hz);
    let mut harmonics: Vec<(Complex<f64>, Complex<f64>, f64)> = profile
        .harmonic_gains
        .iter()
        .enumerate()
        .map(|(k, &gain)| {
            (
                Complex::new(1.0, 0.0),
                step(comb_base_hz + k as f64 * spacing_hz),
                gain,
            )
        })
        .collect();
    let mut tones: Vec<(Complex<f64>, Complex<f64>, f64)> = sig
        .tone_offsets_hz
        .iter()
        .zip(&sig.tone_depths)
        .map(|(&freq, &depth)| (Complex::new(1.0, 0.0), step(freq), depth))
        .collect();

    let noise_sigma = 10f64.powf((profile.noise_floor_db + drift.snr_delta_db) / 20.0);
    let component_sigma = noise_sigma / std::f64::consts::SQRT_2;
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (cos_skew, sin_skew) = (
        profile.iq_imbalance.phase_skew_rad.cos(),
        profile.iq_imbalance.phase_skew_rad.sin(),
    );
    let q_gain = profile.iq_imbalance.gain_ratio;

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut envelope = 1.0f64;
        for (phasor, tone_step, depth) in tones.iter_mut() {
            envelope += *depth * phasor.re;
            *phasor *= *tone_step;
        }
        let mut carrier = Complex::new(0.0f64, 0.0);
        for (phasor, harm_step, gain) in harmonics.iter_mut() {
            carrier += *gain * *phasor;
            *phasor *= *harm_step;
        }
        let s = drift.amplitude_scale * envelope * carrier;
        let i = s.re;
        let q = q_gain * (cos_skew * s.im + sin_skew * s.re);
        samples.push(Complex::new(
            (i + component_sigma * normal.sample(&mut rng)) as f32,
            (q + component_sigma * normal.sample(&mut rng)) as f32,
        ));
    }

    Ok(IqTrace {
        samples,
        sample_rate_hz: sim_rate_hz,
        center_frequency_hz: profile.clock_hz,
        meta: CaptureMeta::new(&profile.device_id, &sig.activity_label, &drift.session_id),
    })
}

/// Generates one trace of `duration_s` seconds at `sim_rate_hz`.
pub fn gen_trace(
    profile: &DeviceProfile,
    sig: &ActivitySignature,
    drift: &SessionDrift,
    duration_s: f64,
    sim_rate_hz: f64,
    seed: u64,
) -> Result<IqTrace> {
    if !(duration_s > 0.0) {
        return Err(Error::Argument(format!(
            "duration_s must be positive, got {duration_s}"
        )));
    }
    if !(sim_rate_hz > 0.0) {
        return Err(Error::Argument(format!(
            "sim_rate_hz must be positive, got {sim_rate_hz}"
        )));
    }
    let n_samples = (duration_s * sim_rate_hz).round() as usize;
    gen_trace_samples(profile, sig, drift, n_samples.max(1), sim_rate_hz, seed)
}

/// Generates the labeled dataset of every (device, session) pair in the
/// config: traces long enough for `windows_per_activity` STFT rows per
/// activity, featurized and assembled in activity order.
///
/// Each trace draws from a seed derived from the master seed and the
/// (device, session, activity) triple, so any subset of the corpus is
/// reproducible in isolation.
pub fn gen_corpus(
    config: &SynthConfig,
    windows_per_activity: usize,
    stft: &StftConfig,
    seed: u64,
) -> Result<BTreeMap<(String, String), SpectralDataset>> {
    config.validate()?;
    stft.validate()?;
    if windows_per_activity == 0 {
        return Err(Error::Argument("windows_per_activity must be >= 1".into()));
    }
    let n_samples = stft.fft_size + (windows_per_activity - 1) * stft.hop;

    let mut corpus = BTreeMap::new();
    for device in &config.devices {
        for session in &config.sessions {
            let mut parts = Vec::with_capacity(config.activities.len());
            for activity in &config.activities {
                let trace_seed = derive_seed(
                    seed,
                    &[
                        "trace",
                        &device.device_id,
                        &session.session_id,
                        &activity.activity_label,
                    ],
                );
                let trace = gen_trace_samples(
                    device,
                    activity,
                    session,
                    n_samples,
                    config.sim_rate_hz,
                    trace_seed,
                )?;
                let ds = stft_featurize(&trace, stft)?;
                let ds = take_windows(&ds, windows_per_activity, TakeStrategy::Head, seed)?;
                parts.push((ds, activity.activity_label.clone()));
            }
            corpus.insert(
                (device.device_id.clone(), session.session_id.clone()),
                assemble(parts)?,
            );
        }
    }
    Ok(corpus)
}
