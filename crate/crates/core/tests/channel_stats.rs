mod common;

use candle_core::{Device, Tensor};
use gensc_core::channel::{awgn, noise_variance, power_normalize_tensor, transmit, ChannelKind, ChannelSpec};
use proptest::prelude::*;

#[test]
fn awgn_hits_target_snr() {
    let targets: Vec<f64> = (0..=15).map(f64::from).collect();
    for (want, got) in common::awgn_realized_snr(&targets, 100_000, 3).unwrap() {
        assert!((want - got).abs() <= 0.2, "target {want} dB realized {got:.3} dB");
    }
}

#[test]
fn rayleigh_gain_is_unit_on_average() {
    let g = common::rayleigh_gain(100_000, 5).unwrap();
    assert!((g - 1.0).abs() <= 0.02, "E|h|^2 = {g}");
}

#[test]
fn normalised_latents_have_unit_power() {
    let worst = common::power_constraint_error(100, 8).unwrap();
    assert!(worst <= 1e-6, "worst |P - 1| = {worst:e}");
}

#[test]
fn noise_variance_matches_definition() {
    for snr in [-5.0, 0.0, 3.0, 10.0, 20.0] {
        let want = 10f64.powf(-snr / 10.0);
        assert!((noise_variance(snr) - want).abs() < 1e-15);
    }
    assert_eq!(noise_variance(f64::INFINITY), 0.0);
}

#[test]
fn noiseless_awgn_is_identity() {
    let x = power_normalize_tensor(&Tensor::from_vec(common::normals(64, 1), (2, 16, 2), &Device::Cpu).unwrap()).unwrap();
    let y = awgn(&x, f64::INFINITY, 4).unwrap();
    assert_eq!(x.row_interleaved(1).unwrap(), y.row_interleaved(1).unwrap());
}

#[test]
fn same_seed_same_noise() {
    let x = power_normalize_tensor(&Tensor::from_vec(common::normals(64, 1), (1, 32, 2), &Device::Cpu).unwrap()).unwrap();
    let spec = ChannelSpec {
        kind: ChannelKind::Rayleigh,
        snr_db: 3.0,
        mask_density: 0.5,
    };
    let (a, ra) = transmit(&x, &spec, 17).unwrap();
    let (b, rb) = transmit(&x, &spec, 17).unwrap();
    assert_eq!(a.row_interleaved(0).unwrap(), b.row_interleaved(0).unwrap());
    assert_eq!(ra.mask, rb.mask);
    let (c, _) = transmit(&x, &spec, 18).unwrap();
    assert_ne!(a.row_interleaved(0).unwrap(), c.row_interleaved(0).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn power_is_one_for_any_scale(seed in 0u64..10_000, log_scale in -4.0f64..4.0, k in 1usize..200) {
        let v: Vec<f64> = common::normals(2 * k, seed).into_iter().map(|x| x * 10f64.powf(log_scale)).collect();
        let s = power_normalize_tensor(&Tensor::from_vec(v, (1, k, 2), &Device::Cpu).unwrap()).unwrap();
        let p = s.mean_power().unwrap()[0];
        prop_assert!((p - 1.0).abs() <= 1e-9, "power {}", p);
    }
}
