mod common;

use chanforge::channel::{build_pdap, ChannelRealization, Mpc, PdapGrid};
use chanforge::stats::{
    angular_spread, cdf_within_band, delay_spread, dkw_band, dkw_epsilon, empirical_cdf, fit_ci_model, fspl,
    ple_accuracy, read_band_csv, ssim, write_band_csv, SsimParams,
};
use common::{rng, uniform};
use proptest::prelude::*;
use rand::Rng;

/// Two-pass power-weighted moments by plain summation over bin centers.
fn brute_spread(profile: &[f64], width: f64) -> (f64, f64) {
    let mut p_sum = 0.0;
    let mut tp_sum = 0.0;
    for (i, p) in profile.iter().enumerate() {
        p_sum += p;
        tp_sum += (i as f64 * width) * p;
    }
    let mean = tp_sum / p_sum;
    let mut m2 = 0.0;
    for (i, p) in profile.iter().enumerate() {
        let d = i as f64 * width - mean;
        m2 += d * d * p;
    }
    (mean, (m2 / p_sum).sqrt())
}

fn random_profile(r: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let n = r.random_range(1..300);
    (0..n)
        .map(|_| {
            if r.random_bool(0.3) {
                0.0
            } else {
                10f64.powf(r.random_range(-8.0..0.0))
            }
        })
        .chain(std::iter::once(1e-3))
        .collect()
}

#[test]
fn spreads_match_brute_force_on_random_profiles() {
    let mut r = rng(42);
    for _ in 0..100 {
        let profile = random_profile(&mut r);
        let width = r.random_range(0.1..20.0);
        let (mean, rms) = brute_spread(&profile, width);
        for got in [
            delay_spread(&profile, width).unwrap(),
            angular_spread(&profile, width).unwrap(),
        ] {
            assert!((got.mean - mean).abs() <= 1e-12 * mean.abs().max(1e-300));
            if rms > 0.0 {
                assert!((got.rms - rms).abs() <= 1e-12 * rms, "{} vs {rms}", got.rms);
            } else {
                assert_eq!(got.rms, 0.0);
            }
        }
    }
}

#[test]
fn free_space_loss_at_one_metre_300_ghz() {
    // 20·log10(4π·1 m·300 GHz / 3e8 m/s) = 20·log10(4000π)
    let expected = 20.0 * (4000.0 * std::f64::consts::PI).log10();
    let got = fspl(1.0, 300e9).unwrap();
    assert!((got - expected).abs() < 1e-9);
    assert!((got - 81.98).abs() <= 0.01);
}

#[test]
fn close_in_fit_recovers_exponent_from_noiseless_data() {
    let f = 313.5e9;
    for n in [1.0, 1.5138, 2.0] {
        let samples: Vec<(f64, f64)> = (0..21)
            .map(|i| {
                let d = 3.0 + i as f64 * 1.1;
                (d, fspl(1.0, f).unwrap() + 10.0 * n * d.log10())
            })
            .collect();
        let fit = fit_ci_model(&samples, f, 1.0).unwrap();
        assert!((fit.ple - n).abs() < 1e-9);
        assert!(fit.rmse_db < 1e-9);
    }
}

#[test]
fn dkw_half_width_for_21_samples() {
    let expected = ((2.0f64 / 0.01).ln() / 42.0).sqrt();
    let got = dkw_epsilon(21, 0.01).unwrap();
    assert!((got - expected).abs() < 1e-15);
    assert!((got - 0.3551).abs() < 1e-4);
}

#[test]
fn ple_accuracy_of_reported_exponents() {
    let cases = [
        (1.3725, 91.0, 91.0),
        (1.9331, 72.0, 75.0),
        (1.4408, 95.0, 95.0),
        (1.4908, 98.0, 98.0),
    ];
    for (est, lo, hi) in cases {
        let acc = ple_accuracy(est, 1.5138).unwrap();
        assert!(acc >= lo - 3.0 && acc <= hi + 3.0, "{est}: {acc}");
    }
}

fn random_channel(r: &mut rand_chacha::ChaCha8Rng, id: &str) -> ChannelRealization {
    let mpcs = (0..15)
        .map(|_| {
            Mpc::new(
                r.random_range(-140.0..-80.0),
                r.random_range(0.0..150.0),
                r.random_range(0.0..360.0),
                r.random_range(-20.0..20.0),
            )
        })
        .collect();
    ChannelRealization::new(id, r.random_range(3.0..25.0), mpcs).unwrap()
}

#[test]
fn ssim_of_a_pdap_with_itself_is_one() {
    let mut r = rng(3);
    let grid = PdapGrid::default();
    for i in 0..10 {
        let p = build_pdap(&random_channel(&mut r, &format!("c{i}")), &grid).unwrap();
        assert_eq!(ssim(&p, &p, &SsimParams::default()).unwrap(), 1.0);
    }
}

#[test]
fn pdap_spreads_match_component_sums_when_bins_align() {
    // components placed on bin starts make binned and direct moments agree
    let grid = PdapGrid::default();
    let mut r = rng(9);
    for _ in 0..20 {
        let mpcs: Vec<Mpc> = (0..15)
            .map(|_| {
                Mpc::new(
                    r.random_range(-120.0..-80.0),
                    r.random_range(0..150) as f64,
                    10.0 * r.random_range(0..36) as f64,
                    0.0,
                )
            })
            .collect();
        let ch = ChannelRealization::new("x", 5.0, mpcs.clone()).unwrap();
        let pdap = build_pdap(&ch, &grid).unwrap();
        let ds = delay_spread(&pdap.delay_profile(), grid.delta_tau_ns).unwrap();
        let p: Vec<f64> = mpcs.iter().map(|m| 10f64.powf(m.gain_db / 10.0)).collect();
        let total: f64 = p.iter().sum();
        let mean = mpcs.iter().zip(&p).map(|(m, w)| m.delay_ns * w).sum::<f64>() / total;
        let var = mpcs
            .iter()
            .zip(&p)
            .map(|(m, w)| (m.delay_ns - mean).powi(2) * w)
            .sum::<f64>()
            / total;
        assert!((ds.rms - var.sqrt()).abs() <= 1e-9 * var.sqrt().max(1.0));
    }
}

proptest! {
    #[test]
    fn sample_cdf_lies_in_its_own_band(values in prop::collection::vec(-100.0f64..100.0, 1..60)) {
        let cdf = empirical_cdf(&values).unwrap();
        let band = dkw_band(&cdf, 0.01).unwrap();
        let check = cdf_within_band(&cdf, &band);
        prop_assert!(check.within);
        prop_assert_eq!(check.sup_distance, 0.0);
    }

    #[test]
    fn spreads_ignore_power_scale(seed in 0u64..5000, k in 1e-6f64..1e6) {
        let profile = random_profile(&mut rng(seed));
        let scaled: Vec<f64> = profile.iter().map(|p| p * k).collect();
        let a = delay_spread(&profile, 1.0).unwrap();
        let b = delay_spread(&scaled, 1.0).unwrap();
        prop_assert!((a.rms - b.rms).abs() <= 1e-9 * a.rms.max(1e-12));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..5000) {
        let mut r = rng(seed);
        let grid = PdapGrid::default();
        let a = build_pdap(&random_channel(&mut r, "a"), &grid).unwrap();
        let b = build_pdap(&random_channel(&mut r, "b"), &grid).unwrap();
        let ab = ssim(&a, &b, &SsimParams::default()).unwrap();
        let ba = ssim(&b, &a, &SsimParams::default()).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn ci_fit_recovers_any_exponent(n in 0.5f64..4.0, d_lo in 1.5f64..5.0) {
        let f = 300e9;
        let samples: Vec<(f64, f64)> = (0..10).map(|i| {
            let d = d_lo + i as f64;
            (d, fspl(1.0, f).unwrap() + 10.0 * n * d.log10())
        }).collect();
        prop_assert!((fit_ci_model(&samples, f, 1.0).unwrap().ple - n).abs() < 1e-9);
    }
}

#[test]
fn shifted_sample_leaves_band() {
    let values = uniform(&mut rng(1), 21, 0.0, 1.0);
    let shifted: Vec<f64> = values.iter().map(|v| v + 2.0).collect();
    let band = dkw_band(&empirical_cdf(&values).unwrap(), 0.01).unwrap();
    let check = cdf_within_band(&empirical_cdf(&shifted).unwrap(), &band);
    assert!(!check.within);
    assert!(check.max_violation > 0.6);
}

#[test]
fn band_csv_round_trips_and_rejects_edits() {
    let values = uniform(&mut rng(8), 21, 0.0, 40.0);
    let band = dkw_band(&empirical_cdf(&values).unwrap(), 0.01).unwrap();
    let mut buf = Vec::new();
    write_band_csv(&band, &mut buf).unwrap();
    assert_eq!(read_band_csv(buf.as_slice(), 0.01).unwrap(), band);
    let text = String::from_utf8(buf).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let edited = lines[3].replacen(',', ",9", 1);
    lines[3] = &edited;
    assert!(read_band_csv(lines.join("\n").as_bytes(), 0.01).is_err());
}
