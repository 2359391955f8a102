//! Contrastive-learning domain adaptation for RF device fingerprinting.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`synthrf`] generates IQ captures with per-device hardware impairments
//!   and per-day channel effects.
//! - [`dataio`] stores captures on disk and slices them into capture sets
//!   of fixed-size IQ frames.
//! - [`augment`] produces the weak and strong views of each frame.
//! - [`encoder`] holds the base/momentum encoders, predictor and classifier
//!   head, built on the small layer library in [`nn`].
//! - [`loss`] implements the soft nearest-neighbor contrastive loss.
//! - [`pipeline`] runs pre-training, classifier training, evaluation and the
//!   CNN baseline over an experiment grid.
//! - [`report`] renders accuracy tables and confusion matrices.

pub mod augment;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod synthrf;

pub use augment::{AugmentConfig, AugmentedPair};
pub use config::ExperimentConfig;
pub use dataio::{Capture, CaptureSet, IqFrame, LabeledFrame, SetId, UnlabeledFrame};
pub use encoder::{ClassifierHead, EncoderConfig, ModelState};
pub use error::{Error, Result};
pub use pipeline::{EvalResult, ModelKind, PretrainConfig, TrainConfig};
pub use synthrf::{DeviceProfile, DomainProfile, RawCapture};
