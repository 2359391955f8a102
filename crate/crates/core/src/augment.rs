//! Weak and strong views of an IQ frame.
//!
//! Weak: one random gain applied to both rails. Strong: Gaussian jitter
//! followed by a random permutation of contiguous time segments, with the
//! same segments and order on both rails.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::IqFrame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_low: f64,
    pub scale_high: f64,
    /// Jitter standard deviation as a fraction of the frame's std.
    pub jitter_sigma: f64,
    pub max_segments: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_low: 0.7,
            scale_high: 1.3,
            jitter_sigma: 0.05,
            max_segments: 5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Settings under which both views equal the input.
    pub fn identity() -> Self {
        AugmentConfig {
            scale_low: 1.0,
            scale_high: 1.0,
            jitter_sigma: 0.0,
            max_segments: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_low > 0.0 && self.scale_low <= self.scale_high) {
            return Err(Error::invalid(format!(
                "scale bounds must satisfy 0 < low <= high, got [{}, {}]",
                self.scale_low, self.scale_high
            )));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::invalid("jitter_sigma must be non-negative"));
        }
        if self.max_segments == 0 {
            return Err(Error::invalid("max_segments must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub x_weak: IqFrame,
    pub x_strong: IqFrame,
    pub source_frame_index: usize,
    pub transmission_id: u64,
}

pub fn scale_frame(frame: &IqFrame, s: f32) -> IqFrame {
    let data = frame.data().iter().map(|&v| v * s).collect();
    IqFrame::from_parts_unchecked(data, frame.width(), frame.frame_index)
}

pub fn weak_augment(frame: &IqFrame, cfg: &AugmentConfig, rng: &mut impl Rng) -> IqFrame {
    let s = if cfg.scale_low == cfg.scale_high {
        cfg.scale_low
    } else {
        rng.random_range(cfg.scale_low..=cfg.scale_high)
    };
    scale_frame(frame, s as f32)
}

/// Segment boundaries for splitting `width` samples into `m` near-equal
/// pieces; the first `width % m` pieces are one sample longer.
pub fn segment_bounds(width: usize, m: usize) -> Vec<std::ops::Range<usize>> {
    let base = width / m;
    let extra = width % m;
    let mut start = 0;
    (0..m)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Concatenates segments in the order given by `order`: output segment `i`
/// is input segment `order[i]`.
pub fn permute_segments(frame: &IqFrame, order: &[usize]) -> Result<IqFrame> {
    let w = frame.width();
    let m = order.len();
    if m == 0 || m > w {
        return Err(Error::invalid(format!(
            "cannot split {w} samples into {m} segments"
        )));
    }
    let mut seen = vec![false; m];
    for &o in order {
        if o >= m || std::mem::replace(&mut seen[o], true) {
            return Err(Error::invalid(format!("{order:?} is not a permutation")));
        }
    }
    let bounds = segment_bounds(w, m);
    let mut data = Vec::with_capacity(2 * w);
    for row in [frame.i(), frame.q()] {
        for &o in order {
            data.extend_from_slice(&row[bounds[o].clone()]);
        }
    }
    Ok(IqFrame::from_parts_unchecked(data, w, frame.frame_index))
}

pub fn jitter(frame: &IqFrame, sigma_rel: f64, rng: &mut impl Rng) -> IqFrame {
    let (_, std) = frame.moments();
    let sigma = sigma_rel * std;
    if sigma == 0.0 {
        return frame.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let data = frame
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)) as f32)
        .collect();
    IqFrame::from_parts_unchecked(data, frame.width(), frame.frame_index)
}

pub fn strong_augment(frame: &IqFrame, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<IqFrame> {
    if frame.width() < cfg.max_segments {
        return Err(Error::invalid(format!(
            "frame width {} is smaller than max_segments {}",
            frame.width(),
            cfg.max_segments
        )));
    }
    let jittered = jitter(frame, cfg.jitter_sigma, rng);
    let m = rng.random_range(1..=cfg.max_segments);
    if m == 1 {
        return Ok(jittered);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    permute_segments(&jittered, &order)
}

/// Weak and strong view of one frame, drawn from independent streams.
pub fn make_pair(
    frame: &IqFrame,
    transmission_id: u64,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedPair> {
    let x_weak = weak_augment(frame, cfg, rng);
    let x_strong = strong_augment(frame, cfg, rng)?;
    Ok(AugmentedPair {
        x_weak,
        x_strong,
        source_frame_index: frame.frame_index,
        transmission_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn frame(i: &[f32], q: &[f32]) -> IqFrame {
        let mut d = i.to_vec();
        d.extend_from_slice(q);
        IqFrame::new(d, i.len(), 0).unwrap()
    }

    #[test]
    fn unit_scale_is_identity() {
        let f = frame(&[1.0, -2.0, 3.0], &[0.5, 0.25, -1.0]);
        let mut rng = rng_from(&[1]);
        assert_eq!(weak_augment(&f, &AugmentConfig::identity(), &mut rng), f);
    }

    #[test]
    fn forced_half_scale() {
        let f = IqFrame::new(vec![1.0; 8], 4, 0).unwrap();
        assert!(scale_frame(&f, 0.5).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn positive_scale_keeps_argmax() {
        let f = frame(&[0.1, -3.0, 2.0, 0.5], &[1.0, 1.0, 1.0, 1.0]);
        let argmax = |x: &IqFrame| {
            x.i().iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap()
                .0
        };
        let mut rng = rng_from(&[2]);
        for _ in 0..20 {
            let g = weak_augment(&f, &AugmentConfig::default(), &mut rng);
            assert_eq!(argmax(&g), argmax(&f));
        }
    }

    #[test]
    fn hand_computed_three_segment_permutation() {
        let f = frame(&[1., 2., 3., 4., 5., 6.], &[7., 8., 9., 10., 11., 12.]);
        let g = permute_segments(&f, &[2, 0, 1]).unwrap();
        assert_eq!(g.i(), &[5., 6., 1., 2., 3., 4.]);
        assert_eq!(g.q(), &[11., 12., 7., 8., 9., 10.]);
    }

    #[test]
    fn uneven_segments_put_extra_samples_first() {
        let b = segment_bounds(7, 3);
        assert_eq!(b, vec![0..3, 3..5, 5..7]);
    }

    #[test]
    fn identity_strong_augment() {
        let f = frame(&[1., 2., 3., 4.], &[4., 3., 2., 1.]);
        let mut rng = rng_from(&[3]);
        assert_eq!(
            strong_augment(&f, &AugmentConfig::identity(), &mut rng).unwrap(),
            f
        );
    }

    #[test]
    fn too_many_segments_is_rejected() {
        let f = frame(&[1., 2., 3.], &[1., 2., 3.]);
        let cfg = AugmentConfig::default();
        let mut rng = rng_from(&[4]);
        assert!(strong_augment(&f, &cfg, &mut rng).is_err());
        assert!(permute_segments(&f, &[0, 0, 1]).is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut c = AugmentConfig::default();
        c.scale_low = 0.0;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.scale_low = 1.5;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.max_segments = 0;
        assert!(c.validate().is_err());
        AugmentConfig::default().validate().unwrap();
    }
}
