//! Gray-mapped 4-QAM: bit pair `(b0, b1)` maps to `((1 − 2b0) + j(1 − 2b1))/√2`,
//! so 00, 01, 11, 10 land on `(1+j)`, `(1−j)`, `(−1−j)`, `(−1+j)` over `√2`.

use std::f64::consts::FRAC_1_SQRT_2;

use candle_core::Device;

use super::ldpc::Bitstream;
use crate::channel::SymbolVector;
use crate::error::{Error, Result};

/// Floor on the noise variance so a noise-free link yields finite LLRs.
const MIN_VARIANCE: f64 = 1e-12;

/// Interleaved `[re, im, re, im, ...]` constellation points.
pub fn modulate_interleaved(bits: &Bitstream) -> Result<Vec<f64>> {
    if bits.len() % 2 != 0 {
        return Err(Error::Shape(format!("4-QAM needs an even bit count, got {}", bits.len())));
    }
    Ok(bits
        .bits()
        .iter()
        .map(|b| (1.0 - 2.0 * f64::from(*b)) * FRAC_1_SQRT_2)
        .collect())
}

/// One-row symbol vector `(1, bits/2, 2)`.
pub fn qam_modulate(bits: &Bitstream, device: &Device) -> Result<SymbolVector> {
    SymbolVector::from_interleaved(modulate_interleaved(bits)?, device)
}

/// Per-bit LLRs `log P(b=0)/P(b=1)` for interleaved received values, where
/// `variance[i]` is the complex noise variance of symbol `i`.
pub fn demodulate_interleaved(y: &[f64], variance: &[f64]) -> Result<Vec<f64>> {
    if y.len() != 2 * variance.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} received reals for {} noise variances",
            y.len(),
            variance.len()
        )));
    }
    Ok(y
        .iter()
        .enumerate()
        .map(|(i, v)| 2.0 * std::f64::consts::SQRT_2 * v / variance[i / 2].max(MIN_VARIANCE))
        .collect())
}

/// LLRs for row `row` of `y` with a common noise variance.
pub fn qam_demodulate(y: &SymbolVector, row: usize, noise_variance: f64) -> Result<Vec<f64>> {
    let v = y.row_interleaved(row)?;
    demodulate_interleaved(&v, &vec![noise_variance; v.len() / 2])
}

pub fn hard_decision(llr: &[f64]) -> Bitstream {
    Bitstream::new(llr.iter().map(|l| u8::from(*l < 0.0)).collect()).expect("0/1 by construction")
}
