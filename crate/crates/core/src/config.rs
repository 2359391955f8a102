//! The single JSON experiment document shared by the library and the CLI.
//!
//! Every section and field has a default, so `{}` is a valid config that
//! describes the desk-scale experiment: 8 devices, 2 days, 2 sets per day,
//! 200 frames per capture, 1000-sample windows.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataio::{build_capture_set, set_offset_frames, CaptureSet, SetId, TransmissionIdAllocator};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pipeline::{ModelKind, PretrainConfig, TrainConfig};
use crate::rng::derive_seed;
use crate::synthrf::{
    sample_device_profiles_with, sample_domain_profiles, synthesize_capture, DeviceProfile, DeviceRanges,
    DomainProfile, DomainRanges, RawCapture,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DevicesSection {
    pub num_devices: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub ranges: DeviceRanges,
}

impl Default for DevicesSection {
    fn default() -> Self {
        DevicesSection {
            num_devices: 8,
            seed: 1,
            ranges: DeviceRanges::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainsSection {
    pub num_days: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub ranges: DomainRanges,
}

impl Default for DomainsSection {
    fn default() -> Self {
        DomainsSection {
            num_days: 2,
            // Draws a 29.9 dB day and a 15.0 dB day.
            seed: 11,
            ranges: DomainRanges::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub window: usize,
    pub frames_per_capture: usize,
    pub sets_per_day: usize,
    pub sample_rate_hz: f64,
    /// Seeds symbol streams and receiver noise.
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            window: 1000,
            frames_per_capture: 200,
            sets_per_day: 2,
            sample_rate_hz: 45e6,
            seed: 3,
        }
    }
}

impl DatasetSection {
    pub fn samples_per_capture(&self) -> usize {
        self.window * self.frames_per_capture * self.sets_per_day
    }
}

/// Which (source, target) pairs, models and seeds a matrix run covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    /// Pairs written as `["D1S1", "D2S1"]`.
    pub pairs: Vec<(SetId, SetId)>,
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            pairs: vec![
                (SetId::new(0, 0), SetId::new(1, 0)),
                (SetId::new(1, 0), SetId::new(0, 0)),
            ],
            models: vec![ModelKind::Cnn, ModelKind::Ab, ModelKind::Ctl],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub devices: DevicesSection,
    pub domains: DomainsSection,
    pub dataset: DatasetSection,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub grid: GridSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            devices: DevicesSection::default(),
            domains: DomainsSection::default(),
            dataset: DatasetSection::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::desk(),
            pretrain: PretrainConfig {
                epochs: 20,
                ..PretrainConfig::default()
            },
            train: TrainConfig::default(),
            grid: GridSection::default(),
        }
    }

    /// Parses a config, filling every missing field from [`Self::desk`].
    ///
    /// The overlay is applied to the serialized desk config rather than
    /// through per-type defaults, so a partial section keeps the desk values
    /// of its other fields.
    pub fn from_json(text: &str) -> Result<Self> {
        let invalid = |e: serde_json::Error| Error::invalid(format!("config: {e}"));
        let user: serde_json::Value = serde_json::from_str(text).map_err(invalid)?;
        if !user.is_object() {
            return Err(Error::invalid("config: expected a JSON object"));
        }
        let mut merged = serde_json::to_value(Self::desk()).expect("config serializes");
        overlay(&mut merged, user);
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(invalid)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::invalid(format!("config file {} does not exist", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.num_days < 1 {
            return Err(Error::invalid("need at least one day"));
        }
        if self.dataset.sets_per_day < 1 || self.dataset.frames_per_capture < 1 {
            return Err(Error::invalid("need at least one set and one frame per capture"));
        }
        if self.dataset.window != self.encoder.window {
            return Err(Error::invalid(format!(
                "dataset window {} differs from encoder window {}",
                self.dataset.window, self.encoder.window
            )));
        }
        self.augment.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        for (s, t) in &self.grid.pairs {
            for id in [s, t] {
                if id.day >= self.domains.num_days || id.set >= self.dataset.sets_per_day {
                    return Err(Error::invalid(format!("grid references unknown set {id}")));
                }
            }
        }
        Ok(())
    }

    pub fn device_profiles(&self) -> Result<Vec<DeviceProfile>> {
        sample_device_profiles_with(&self.devices.ranges, self.devices.num_devices, self.devices.seed)
    }

    pub fn domain_profiles(&self) -> Result<Vec<DomainProfile>> {
        sample_domain_profiles(&self.domains.ranges, self.domains.num_days, self.domains.seed)
    }

    /// One raw capture per (device, day), day-major.
    pub fn synthesize(&self) -> Result<Vec<RawCapture>> {
        let devices = self.device_profiles()?;
        let days = self.domain_profiles()?;
        let n = self.dataset.samples_per_capture();
        let mut out = Vec::with_capacity(devices.len() * days.len());
        for day in &days {
            for dev in &devices {
                let seed = derive_seed(&[self.dataset.seed, dev.device_id as u64, day.day_id as u64]);
                out.push(synthesize_capture(dev, day, n, self.dataset.sample_rate_hz, seed)?);
            }
        }
        Ok(out)
    }

    /// Cuts raw captures into capture sets. Transmission ids are allocated
    /// day-major, then set, then device.
    pub fn build_sets(&self, raw: &[RawCapture]) -> Result<BTreeMap<SetId, CaptureSet>> {
        let mut by_day: BTreeMap<usize, Vec<RawCapture>> = BTreeMap::new();
        for r in raw {
            by_day.entry(r.day_id).or_default().push(r.clone());
        }
        let mut ids = TransmissionIdAllocator::new();
        let mut sets = BTreeMap::new();
        let f = self.dataset.frames_per_capture;
        for (day, mut caps) in by_day {
            caps.sort_by_key(|c| c.device_id);
            for s in 0..self.dataset.sets_per_day {
                let set = build_capture_set(&caps, s, set_offset_frames(s, f), f, self.dataset.window, &mut ids)?;
                sets.insert(SetId::new(day, s), set);
            }
        }
        Ok(sets)
    }

    /// Overrides every training seed with `seed`.
    pub fn with_run_seed(mut self, seed: u64) -> Self {
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.grid.seeds = vec![seed];
        self
    }
}

/// Recursively replaces fields of `base` with those present in `user`.
fn overlay(base: &mut serde_json::Value, user: serde_json::Value) {
    match (base, user) {
        (serde_json::Value::Object(b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
