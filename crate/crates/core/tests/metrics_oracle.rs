mod common;

use candle_core::{DType, Device};
use gensc_core::metrics::{psnr_per_image, ssim_per_image};
use gensc_core::ImageBatch;

#[test]
fn psnr_and_ssim_match_oracles() {
    let (dp, ds, self_ssim, symmetric) = common::metric_oracles().unwrap();
    assert!(dp <= 1e-9, "psnr diff {dp:e}");
    assert!(ds <= 1e-9, "ssim diff {ds:e}");
    assert!(self_ssim);
    assert!(symmetric);
}

#[test]
fn known_psnr_values() {
    let a = ImageBatch::constant(1, 8, 8, 0.5, DType::F64, &Device::Cpu).unwrap();
    let b = ImageBatch::constant(1, 8, 8, 0.6, DType::F64, &Device::Cpu).unwrap();
    // mse 0.01 -> 20 dB
    assert!((psnr_per_image(&a, &b, 1.0).unwrap()[0] - 20.0).abs() < 1e-9);
    assert_eq!(psnr_per_image(&a, &a, 1.0).unwrap()[0], 100.0);
}

#[test]
fn ssim_penalises_structure_loss() {
    let a = common::random_images(1, 32, 4);
    let flat = ImageBatch::constant(1, 32, 32, 0.5, DType::F32, &Device::Cpu).unwrap();
    let s = ssim_per_image(&a, &flat).unwrap()[0];
    assert!(s < 0.5, "ssim {s}");
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = ImageBatch::constant(1, 8, 8, 0.5, DType::F32, &Device::Cpu).unwrap();
    let b = ImageBatch::constant(1, 16, 16, 0.5, DType::F32, &Device::Cpu).unwrap();
    assert!(psnr_per_image(&a, &b, 1.0).is_err());
    assert!(ssim_per_image(&a, &b).is_err());
}

#[test]
fn ssim_is_symmetric() {
    let a = common::random_images(3, 32, 5);
    let b = common::random_images(3, 32, 6);
    let (ab, ba) = (ssim_per_image(&a, &b).unwrap(), ssim_per_image(&b, &a).unwrap());
    for (x, y) in ab.iter().zip(&ba) {
        assert!((x - y).abs() <= 1e-9);
    }
}

/// More noise never raises expected PSNR: Monte-Carlo over 100 draws per σ.
#[test]
fn psnr_falls_with_noise() {
    let img = common::random_images(1, 16, 7);
    let clean = img.to_vec_f64().unwrap();
    let stats = |sigma: f64| {
        let v: Vec<f64> = (0..100)
            .map(|d| {
                let noise = common::normals(clean.len(), 10_000 * (sigma * 1000.0) as u64 + d);
                let noisy: Vec<f32> = clean.iter().zip(&noise).map(|(p, n)| (p + sigma * n) as f32).collect();
                let b = ImageBatch::from_vec(noisy.iter().map(|x| x.clamp(0.0, 1.0)).collect(), 1, 16, 16, &Device::Cpu).unwrap();
                psnr_per_image(&img, &b, 1.0).unwrap()[0]
            })
            .collect();
        let mean = v.iter().sum::<f64>() / 100.0;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        (mean, sd / 10.0)
    };
    let mut prev = stats(0.01);
    for sigma in [0.02, 0.05, 0.1, 0.2] {
        let cur = stats(sigma);
        assert!(cur.0 <= prev.0 + 3.0 * (cur.1 + prev.1), "sigma {sigma}: {cur:?} vs {prev:?}");
        prev = cur;
    }
}
