//! Synthetic IQ captures with device fingerprints and day-dependent channels.
//!
//! The generator stands in for a physical testbed. A capture is built in
//! three stages:
//!
//! 1. a random QPSK symbol stream, root-raised-cosine shaped at 8 samples
//!    per symbol and scaled to unit average power;
//! 2. device impairments: cubic PA nonlinearity, IQ gain/phase imbalance,
//!    DC offset and carrier frequency offset;
//! 3. domain effects: FIR channel, bulk gain and complex Gaussian noise.
//!
//! Stage 1 and 2 depend only on the capture seed and the device profile, so
//! the same device regenerated under a different [`DomainProfile`] produces
//! the same pre-channel waveform.

use std::f64::consts::PI;

use num_complex::{Complex32, Complex64};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const SAMPLES_PER_SYMBOL: usize = 8;
pub const RRC_ROLLOFF: f64 = 0.35;
/// RRC filter half-span, in symbols.
pub const RRC_SPAN_SYMBOLS: usize = 8;
pub const MIN_CAPTURE_SAMPLES: usize = 1000;

const STREAM_SYMBOLS: u64 = 0x5359_4d42;
const STREAM_NOISE: u64 = 0x4e4f_4953;

/// Hardware impairments of one transmitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: usize,
    /// I/Q amplitude mismatch in dB.
    pub iq_gain_imbalance: f64,
    /// I/Q quadrature skew in radians.
    pub iq_phase_imbalance: f64,
    pub dc_offset_i: f64,
    pub dc_offset_q: f64,
    pub cfo_hz: f64,
    pub pa_cubic_coeff: f64,
    pub seed: u64,
}

impl DeviceProfile {
    /// A transmitter with no impairments at all.
    pub fn ideal(device_id: usize) -> Self {
        DeviceProfile {
            device_id,
            iq_gain_imbalance: 0.0,
            iq_phase_imbalance: 0.0,
            dc_offset_i: 0.0,
            dc_offset_q: 0.0,
            cfo_hz: 0.0,
            pa_cubic_coeff: 0.0,
            seed: device_id as u64,
        }
    }
}

/// Per-day propagation environment shared by all devices recorded that day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub day_id: usize,
    /// `f64::INFINITY` disables noise. Serialized as `null` in that case.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    /// Complex FIR taps with unit total energy.
    pub channel_taps: Vec<Complex64>,
    pub gain_db: f64,
    pub cfo_drift_hz: f64,
    pub seed: u64,
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl DomainProfile {
    /// Identity channel, no gain change, no drift, no noise.
    pub fn identity(day_id: usize) -> Self {
        DomainProfile {
            day_id,
            snr_db: f64::INFINITY,
            channel_taps: vec![Complex64::new(1.0, 0.0)],
            gain_db: 0.0,
            cfo_drift_hz: 0.0,
            seed: day_id as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channel_taps.len();
        if !(1..=8).contains(&n) {
            return Err(Error::invalid(format!(
                "day {}: channel must have 1..=8 taps, got {n}",
                self.day_id
            )));
        }
        let energy: f64 = self.channel_taps.iter().map(|t| t.norm_sqr()).sum();
        if (energy - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "day {}: channel tap energy {energy} is not 1",
                self.day_id
            )));
        }
        if self.snr_db.is_nan() {
            return Err(Error::invalid(format!("day {}: snr_db is NaN", self.day_id)));
        }
        Ok(())
    }
}

/// One device's recording on one day.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCapture {
    pub device_id: usize,
    pub day_id: usize,
    pub samples: Vec<Complex32>,
    pub sample_rate_hz: f64,
}

/// Bounds for the default device sampler. Every impairment is drawn
/// uniformly from `[-max, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceRanges {
    pub iq_gain_imbalance_db: f64,
    pub iq_phase_imbalance_rad: f64,
    pub dc_offset: f64,
    pub cfo_hz: f64,
    pub pa_cubic_coeff: f64,
}

impl Default for DeviceRanges {
    fn default() -> Self {
        DeviceRanges {
            iq_gain_imbalance_db: 1.0,
            iq_phase_imbalance_rad: 0.05,
            dc_offset: 0.02,
            cfo_hz: 40_000.0,
            pa_cubic_coeff: 0.1,
        }
    }
}

impl DeviceRanges {
    /// Wide impairments the desk-scale CNN can resolve from 1,600 frames.
    pub fn desk() -> Self {
        DeviceRanges {
            iq_gain_imbalance_db: 6.0,
            iq_phase_imbalance_rad: 0.5,
            dc_offset: 0.5,
            cfo_hz: 0.0,
            pa_cubic_coeff: 0.3,
        }
    }
}

/// Bounds for the per-day domain sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainRanges {
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// Channel length is drawn from `1..=max_taps`.
    pub max_taps: usize,
    /// Energy of the trailing taps relative to the leading one.
    pub echo_power: f64,
    pub gain_db: f64,
    pub cfo_drift_hz: f64,
    /// Bound on the phase of the leading channel tap.
    pub channel_phase_rad: f64,
}

impl Default for DomainRanges {
    fn default() -> Self {
        DomainRanges {
            snr_db_min: 15.0,
            snr_db_max: 25.0,
            max_taps: 4,
            echo_power: 0.3,
            gain_db: 6.0,
            cfo_drift_hz: 15_000.0,
            channel_phase_rad: PI,
        }
    }
}

impl DomainRanges {
    /// Days that differ mainly in noise level. A bounded receiver phase
    /// keeps phase-sensitive fingerprints comparable across days.
    pub fn desk() -> Self {
        DomainRanges {
            snr_db_min: 0.0,
            snr_db_max: 30.0,
            max_taps: 1,
            echo_power: 0.3,
            gain_db: 6.0,
            cfo_drift_hz: 0.0,
            channel_phase_rad: 0.3,
        }
    }
}

fn symmetric(rng: &mut impl rand::Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(-max..=max)
    }
}

/// Draws `num_devices` profiles using the default impairment bounds.
pub fn sample_device_profiles(num_devices: usize, seed: u64) -> Result<Vec<DeviceProfile>> {
    sample_device_profiles_with(&DeviceRanges::default(), num_devices, seed)
}

pub fn sample_device_profiles_with(
    ranges: &DeviceRanges,
    num_devices: usize,
    seed: u64,
) -> Result<Vec<DeviceProfile>> {
    if num_devices < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 devices for classification, got {num_devices}"
        )));
    }
    let mut rng = rng_from(&[seed, 0xde71ce_u64]);
    let mut out: Vec<DeviceProfile> = Vec::with_capacity(num_devices);
    for device_id in 0..num_devices {
        loop {
            let p = DeviceProfile {
                device_id,
                iq_gain_imbalance: symmetric(&mut rng, ranges.iq_gain_imbalance_db),
                iq_phase_imbalance: symmetric(&mut rng, ranges.iq_phase_imbalance_rad),
                dc_offset_i: symmetric(&mut rng, ranges.dc_offset),
                dc_offset_q: symmetric(&mut rng, ranges.dc_offset),
                cfo_hz: symmetric(&mut rng, ranges.cfo_hz),
                pa_cubic_coeff: symmetric(&mut rng, ranges.pa_cubic_coeff),
                seed: rng.random(),
            };
            if out.iter().all(|o| !same_impairments(o, &p)) {
                out.push(p);
                break;
            }
        }
    }
    Ok(out)
}

fn same_impairments(a: &DeviceProfile, b: &DeviceProfile) -> bool {
    a.iq_gain_imbalance == b.iq_gain_imbalance
        && a.iq_phase_imbalance == b.iq_phase_imbalance
        && a.dc_offset_i == b.dc_offset_i
        && a.dc_offset_q == b.dc_offset_q
        && a.cfo_hz == b.cfo_hz
        && a.pa_cubic_coeff == b.pa_cubic_coeff
}

/// Draws one [`DomainProfile`] per day.
pub fn sample_domain_profiles(
    ranges: &DomainRanges,
    num_days: usize,
    seed: u64,
) -> Result<Vec<DomainProfile>> {
    if ranges.max_taps == 0 || ranges.max_taps > 8 {
        return Err(Error::invalid(format!(
            "max_taps must be in 1..=8, got {}",
            ranges.max_taps
        )));
    }
    if ranges.snr_db_min > ranges.snr_db_max {
        return Err(Error::invalid("snr_db_min exceeds snr_db_max"));
    }
    let mut rng = rng_from(&[seed, 0xd0a1_u64]);
    (0..num_days)
        .map(|day_id| {
            let n_taps = rng.random_range(1..=ranges.max_taps);
            let mut taps = vec![Complex64::from_polar(1.0, symmetric(&mut rng, ranges.channel_phase_rad))];
            for _ in 1..n_taps {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                let scale = (ranges.echo_power / (2.0 * (n_taps - 1) as f64)).sqrt();
                taps.push(Complex64::new(re, im) * scale);
            }
            normalize_energy(&mut taps);
            let snr_db = if ranges.snr_db_min == ranges.snr_db_max {
                ranges.snr_db_min
            } else {
                rng.random_range(ranges.snr_db_min..=ranges.snr_db_max)
            };
            Ok(DomainProfile {
                day_id,
                snr_db,
                channel_taps: taps,
                gain_db: symmetric(&mut rng, ranges.gain_db),
                cfo_drift_hz: symmetric(&mut rng, ranges.cfo_drift_hz),
                seed: rng.random(),
            })
        })
        .collect()
}

pub(crate) fn normalize_energy(taps: &mut [Complex64]) {
    let e: f64 = taps.iter().map(|t| t.norm_sqr()).sum::<f64>().sqrt();
    for t in taps.iter_mut() {
        *t /= e;
    }
}

/// Root-raised-cosine taps, normalized to unit energy.
pub fn rrc_taps(sps: usize, rolloff: f64, span_symbols: usize) -> Vec<f64> {
    let half = (span_symbols * sps) as isize;
    let beta = rolloff;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| {
            let t = i as f64 / sps as f64;
            if i == 0 {
                1.0 - beta + 4.0 * beta / PI
            } else if beta > 0.0 && ((4.0 * beta * t).abs() - 1.0).abs() < 1e-12 {
                (beta / 2f64.sqrt())
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * beta)).sin()
                        + (1.0 - 2.0 / PI) * (PI / (4.0 * beta)).cos())
            } else {
                let num = (PI * t * (1.0 - beta)).sin()
                    + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
                let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
                num / den
            }
        })
        .collect();
    let e = taps.iter().map(|x| x * x).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|x| *x /= e);
    taps
}

/// Pulse-shaped QPSK at unit average power, exactly `num_samples` long.
pub fn clean_waveform(num_samples: usize, stream_seed: u64) -> Vec<Complex64> {
    let taps = rrc_taps(SAMPLES_PER_SYMBOL, RRC_ROLLOFF, RRC_SPAN_SYMBOLS);
    let delay = taps.len() / 2;
    let total = num_samples + 2 * delay;
    let n_symbols = total.div_ceil(SAMPLES_PER_SYMBOL);
    let mut rng = rng_from(&[stream_seed, STREAM_SYMBOLS]);
    let amp = std::f64::consts::FRAC_1_SQRT_2;
    let symbols: Vec<Complex64> = (0..n_symbols)
        .map(|_| {
            let bits: u8 = rng.random_range(0..4);
            Complex64::new(
                if bits & 1 == 0 { amp } else { -amp },
                if bits & 2 == 0 { amp } else { -amp },
            )
        })
        .collect();
    // Upsampled impulse train convolved with the RRC pulse. Output sample m
    // of the shaped stream sits at position m + delay of the full convolution.
    let gain = (SAMPLES_PER_SYMBOL as f64).sqrt();
    (0..num_samples)
        .map(|m| {
            let pos = m + 2 * delay;
            let first_sym = (pos + 1).saturating_sub(taps.len()).div_ceil(SAMPLES_PER_SYMBOL);
            let last_sym = pos / SAMPLES_PER_SYMBOL;
            let mut acc = Complex64::new(0.0, 0.0);
            for s in first_sym..=last_sym.min(n_symbols - 1) {
                let tap = pos - s * SAMPLES_PER_SYMBOL;
                if tap < taps.len() {
                    acc += symbols[s] * taps[tap];
                }
            }
            acc * gain
        })
        .collect()
}

/// Applies PA nonlinearity, IQ imbalance, DC offset and CFO rotation in place.
/// `cfo_hz` is the total offset (device plus any drift).
pub fn apply_device_impairments(
    signal: &mut [Complex64],
    profile: &DeviceProfile,
    cfo_hz: f64,
    sample_rate_hz: f64,
) {
    let a = profile.pa_cubic_coeff;
    let g = 10f64.powf(profile.iq_gain_imbalance / 20.0).sqrt();
    let half_phi = profile.iq_phase_imbalance / 2.0;
    let (s, c) = half_phi.sin_cos();
    let dc = Complex64::new(profile.dc_offset_i, profile.dc_offset_q);
    let w = 2.0 * PI * cfo_hz / sample_rate_hz;
    for (n, x) in signal.iter_mut().enumerate() {
        let y = *x + *x * x.norm_sqr() * a;
        let i = g * (y.re * c - y.im * s);
        let q = (y.im * c - y.re * s) / g;
        let z = Complex64::new(i, q) + dc;
        *x = if w == 0.0 {
            z
        } else {
            z * Complex64::from_polar(1.0, w * n as f64)
        };
    }
}

/// Runs stages 1 and 2 only, over `len` samples.
pub fn impaired_waveform(
    profile: &DeviceProfile,
    cfo_drift_hz: f64,
    len: usize,
    sample_rate_hz: f64,
    seed: u64,
) -> Vec<Complex64> {
    let mut x = clean_waveform(len, crate::rng::derive_seed(&[seed, profile.seed]));
    apply_device_impairments(
        &mut x,
        profile,
        profile.cfo_hz + cfo_drift_hz,
        sample_rate_hz,
    );
    x
}

/// Complex Gaussian noise at `snr_db` relative to the mean power of `signal`.
pub fn add_awgn(signal: &mut [Complex64], snr_db: f64, rng: &mut impl rand::Rng) {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return;
    }
    let p = signal.iter().map(|x| x.norm_sqr()).sum::<f64>() / signal.len() as f64;
    let sigma = (p * 10f64.powf(-snr_db / 10.0) / 2.0).sqrt();
    for x in signal.iter_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *x += Complex64::new(re, im) * sigma;
    }
}

/// Generates one capture of `num_samples` samples.
pub fn synthesize_capture(
    profile: &DeviceProfile,
    domain: &DomainProfile,
    num_samples: usize,
    sample_rate_hz: f64,
    seed: u64,
) -> Result<RawCapture> {
    if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
        return Err(Error::invalid(format!(
            "sample rate must be positive, got {sample_rate_hz}"
        )));
    }
    if num_samples < MIN_CAPTURE_SAMPLES {
        return Err(Error::invalid(format!(
            "capture needs at least {MIN_CAPTURE_SAMPLES} samples, got {num_samples}"
        )));
    }
    domain.validate()?;

    // Extra leading samples absorb the FIR start-up transient.
    let history = domain.channel_taps.len() - 1;
    let x = impaired_waveform(
        profile,
        domain.cfo_drift_hz,
        num_samples + history,
        sample_rate_hz,
        seed,
    );
    let gain = 10f64.powf(domain.gain_db / 20.0);
    let mut y: Vec<Complex64> = (0..num_samples)
        .map(|n| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, h) in domain.channel_taps.iter().enumerate() {
                acc += h * x[n + history - t];
            }
            acc * gain
        })
        .collect();
    let mut noise_rng = rng_from(&[seed, profile.seed, domain.seed, STREAM_NOISE]);
    add_awgn(&mut y, domain.snr_db, &mut noise_rng);

    Ok(RawCapture {
        device_id: profile.device_id,
        day_id: domain.day_id,
        samples: y
            .into_iter()
            .map(|c| Complex32::new(c.re as f32, c.im as f32))
            .collect(),
        sample_rate_hz,
    })
}
