mod common;

use num_complex::Complex64;
use proptest::prelude::*;
use rfctl_core::rng::rng_from;
use rfctl_core::synthrf::{
    add_awgn, clean_waveform, impaired_waveform, sample_device_profiles, sample_domain_profiles, synthesize_capture,
    DeviceProfile, DeviceRanges, DomainProfile, DomainRanges,
};

const FS: f64 = 45e6;

proptest! {
    #[test]
    fn default_sampler_stays_within_typical_bounds(n in 2usize..20, seed in any::<u64>()) {
        let r = DeviceRanges::default();
        for p in sample_device_profiles(n, seed).unwrap() {
            prop_assert!(p.iq_gain_imbalance.abs() <= r.iq_gain_imbalance_db);
            prop_assert!(p.iq_phase_imbalance.abs() <= r.iq_phase_imbalance_rad);
            prop_assert!(p.dc_offset_i.abs() <= r.dc_offset && p.dc_offset_q.abs() <= r.dc_offset);
            prop_assert!(p.cfo_hz.abs() <= r.cfo_hz);
            prop_assert!(p.pa_cubic_coeff.abs() <= r.pa_cubic_coeff);
        }
    }

    #[test]
    fn distinct_devices_differ(n in 2usize..20, seed in any::<u64>()) {
        let p = sample_device_profiles(n, seed).unwrap();
        for i in 0..n {
            for j in i + 1..n {
                prop_assert!(p[i].iq_gain_imbalance != p[j].iq_gain_imbalance
                    || p[i].cfo_hz != p[j].cfo_hz || p[i].dc_offset_i != p[j].dc_offset_i);
            }
        }
    }

    #[test]
    fn channels_have_unit_energy(days in 1usize..6, seed in any::<u64>(), taps in 1usize..=8) {
        let ranges = DomainRanges { max_taps: taps, ..DomainRanges::default() };
        for d in sample_domain_profiles(&ranges, days, seed).unwrap() {
            let e: f64 = d.channel_taps.iter().map(|t| t.norm_sqr()).sum();
            prop_assert!((e - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn captures_are_deterministic_and_finite() {
    let dev = &sample_device_profiles(3, 4).unwrap()[1];
    let day = &sample_domain_profiles(&DomainRanges::default(), 2, 5).unwrap()[1];
    let a = synthesize_capture(dev, day, 20_000, FS, 9).unwrap();
    let b = synthesize_capture(dev, day, 20_000, FS, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.samples.iter().all(|s| s.re.is_finite() && s.im.is_finite()));
}

#[test]
fn days_differ_but_share_the_impairment_stage() {
    let dev = &sample_device_profiles(2, 4).unwrap()[0];
    let days = sample_domain_profiles(&DomainRanges::default(), 2, 5).unwrap();
    let a = synthesize_capture(dev, &days[0], 5_000, FS, 9).unwrap();
    let b = synthesize_capture(dev, &days[1], 5_000, FS, 9).unwrap();
    assert_ne!(a.samples, b.samples);

    // Through an identity day the capture is exactly the impairment stage.
    let id = DomainProfile::identity(0);
    let plain = synthesize_capture(dev, &id, 5_000, FS, 9).unwrap();
    let stage = impaired_waveform(dev, 0.0, 5_000, FS, 9);
    for (x, y) in plain.samples.iter().zip(&stage) {
        assert_eq!((x.re, x.im), (y.re as f32, y.im as f32));
    }
}

#[test]
fn snr_is_calibrated_to_half_a_decibel() {
    let n = 1_000_000;
    let clean = clean_waveform(n, 3);
    let p_sig = clean.iter().map(|x| x.norm_sqr()).sum::<f64>() / n as f64;
    for snr in [0.0, 10.0, 20.0] {
        let mut noisy = clean.clone();
        add_awgn(&mut noisy, snr, &mut rng_from(&[7]));
        let p_noise = noisy.iter().zip(&clean).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / n as f64;
        let measured = 10.0 * (p_sig / p_noise).log10();
        assert!((measured - snr).abs() < 0.5, "requested {snr} dB, measured {measured:.3}");
    }
}

#[test]
fn quarter_rate_cfo_example() {
    let mut dev = DeviceProfile::ideal(0);
    dev.cfo_hz = FS / 4.0;
    let out = synthesize_capture(&dev, &DomainProfile::identity(0), 2_000, FS, 1).unwrap();
    dev.cfo_hz = 0.0;
    let clean = synthesize_capture(&dev, &DomainProfile::identity(0), 2_000, FS, 1).unwrap();
    for n in 0..8 {
        let rot = Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_2 * n as f64);
        let c = clean.samples[n];
        let want = Complex64::new(c.re as f64, c.im as f64) * rot;
        let got = out.samples[n];
        assert!((got.re as f64 - want.re).abs() < 1e-5 && (got.im as f64 - want.im).abs() < 1e-5, "n={n}");
    }
}
