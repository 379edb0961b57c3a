//! Simulated wireless channel: average power normalisation, AWGN, Rayleigh
//! flat fading with zero-forcing equalisation, and erasure masking.
//!
//! Symbols are complex and stored as `(batch, k, 2)` tensors of (re, im) pairs,
//! formed from consecutive reals of the flattened latent. Every operation is
//! differentiable with respect to the transmitted symbols; noise and fading
//! draws are constants generated from an explicit seed.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantic_codec::LatentCode;

/// Average transmit power per complex symbol.
pub const SIGNAL_POWER: f64 = 1.0;

/// Fading magnitudes below this are clamped before equalisation.
pub const MIN_FADING_MAGNITUDE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(Error::Config(format!("unknown channel type `{other}`"))),
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        })
    }
}

/// Noise variance per complex symbol for a given SNR; zero for an infinite SNR
/// (the noise-free setting).
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        SIGNAL_POWER * 10f64.powf(-snr_db / 10.0)
    }
}

/// Complex channel symbols, `(batch, k, 2)`.
#[derive(Debug, Clone)]
pub struct SymbolVector {
    symbols: Tensor,
}

impl SymbolVector {
    pub fn new(symbols: Tensor) -> Result<Self> {
        let d = symbols.dims();
        if d.len() != 3 || d[2] != 2 {
            return Err(Error::Shape(format!("symbols must be (batch, k, 2), got {d:?}")));
        }
        Ok(Self { symbols })
    }

    /// One batch row from interleaved (re, im) values.
    pub fn from_interleaved(values: Vec<f64>, device: &candle_core::Device) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::Shape(format!("{} reals do not pair into symbols", values.len())));
        }
        let k = values.len() / 2;
        Self::new(Tensor::from_vec(values, (1, k, 2), device)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.symbols
    }

    pub fn batch(&self) -> usize {
        self.symbols.dims()[0]
    }

    /// Symbols per batch row.
    pub fn len(&self) -> usize {
        self.symbols.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean `|x_i|²` of each batch row.
    pub fn mean_power(&self) -> Result<Vec<f64>> {
        Ok(self
            .symbols
            .to_dtype(DType::F64)?
            .sqr()?
            .sum(2)?
            .mean(1)?
            .to_vec1()?)
    }

    /// Flat interleaved (re, im) values of batch row `i`.
    pub fn row_interleaved(&self, i: usize) -> Result<Vec<f64>> {
        Ok(self.symbols.get(i)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    /// Reshapes back into a latent of `(batch, rows, cols, C)`.
    pub fn into_latent(self, rows: usize, cols: usize, channels: usize) -> Result<LatentCode> {
        let b = self.batch();
        LatentCode::new(self.symbols.reshape((b, rows, cols, channels))?)
    }
}

/// Pairs consecutive reals of each latent into complex symbols and scales every
/// batch row to unit average symbol power.
pub fn power_normalize(latent: &LatentCode) -> Result<SymbolVector> {
    let (b, ..) = latent.dims();
    let n = latent.reals_per_image();
    if n % 2 != 0 {
        return Err(Error::Shape(format!("latent holds an odd number of reals ({n})")));
    }
    power_normalize_tensor(&latent.values().reshape((b, n / 2, 2))?)
}

/// As [`power_normalize`] for symbols already laid out `(batch, k, 2)`.
pub fn power_normalize_tensor(symbols: &Tensor) -> Result<SymbolVector> {
    let (_, k, _) = symbols.dims3()?;
    let power = (symbols.sqr()?.sum_keepdim(2)?.sum_keepdim(1)? / k as f64)?;
    let host: Vec<f64> = power.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if host.iter().any(|p| *p <= 0.0 || !p.is_finite()) {
        return Err(Error::ZeroPower);
    }
    let scale = (power / SIGNAL_POWER)?.sqrt()?;
    SymbolVector::new(symbols.broadcast_div(&scale)?)
}

fn gaussian_tensor(shape: (usize, usize, usize), std: f64, seed: u64, like: &Tensor) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f64> = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
}

/// Complex Gaussian noise with total variance `variance` per symbol, split
/// evenly between the real and imaginary parts.
pub fn complex_noise(batch: usize, k: usize, variance: f64, seed: u64, like: &Tensor) -> Result<Tensor> {
    gaussian_tensor((batch, k, 2), (variance / 2.0).sqrt(), seed, like)
}

/// `y = x + n` with `n ~ CN(0, σ²)`, `σ² = P · 10^(−snr/10)`.
pub fn awgn(x: &SymbolVector, snr_db: f64, seed: u64) -> Result<SymbolVector> {
    let var = noise_variance(snr_db);
    if var == 0.0 {
        return Ok(x.clone());
    }
    let n = complex_noise(x.batch(), x.len(), var, seed, x.tensor())?;
    SymbolVector::new((x.tensor() + n)?)
}

/// Output of a fading channel together with what the receiver knows.
#[derive(Debug, Clone)]
pub struct FadedOutput {
    pub equalized: SymbolVector,
    /// `(batch, k, 2)` fading coefficients.
    pub fading: Tensor,
    /// Post-equalisation noise variance per symbol, `(batch, k)`.
    pub effective_noise_variance: Tensor,
}

/// `y_i = h_i x_i + n_i` with `h_i ~ CN(0, 1)`, followed by perfect-CSI
/// zero-forcing `x̂_i = y_i / h_i` (with `|h_i|` clamped below at
/// [`MIN_FADING_MAGNITUDE`]).
pub fn rayleigh(x: &SymbolVector, snr_db: f64, seed: u64) -> Result<SymbolVector> {
    Ok(rayleigh_detailed(x, snr_db, seed)?.equalized)
}

/// Fading draw used by [`rayleigh`] for a given seed.
pub fn rayleigh_fading(batch: usize, k: usize, seed: u64, like: &Tensor) -> Result<Tensor> {
    complex_noise(batch, k, 1.0, seed, like)
}

pub fn rayleigh_detailed(x: &SymbolVector, snr_db: f64, seed: u64) -> Result<FadedOutput> {
    let (b, k) = (x.batch(), x.len());
    let var = noise_variance(snr_db);
    let like = x.tensor();
    // fading and noise come from independent streams of the same seed
    let h = rayleigh_fading(b, k, seed ^ 0x5a5a_5a5a_5a5a_5a5a, like)?;
    let n = complex_noise(b, k, var, seed, like)?;

    let h_re = h.narrow(2, 0, 1)?;
    let h_im = h.narrow(2, 1, 1)?;
    let mag2 = (h_re.sqr()? + h_im.sqr()?)?;
    let denom = mag2.maximum(MIN_FADING_MAGNITUDE * MIN_FADING_MAGNITUDE)?;
    // x̂ = x · |h|²/max(|h|², ε²) + n · conj(h)/max(|h|², ε²)
    let gain = (&mag2 / &denom)?;
    let signal = x.tensor().broadcast_mul(&gain)?;
    let n_re = n.narrow(2, 0, 1)?;
    let n_im = n.narrow(2, 1, 1)?;
    let eq_re = ((&n_re * &h_re)? + (&n_im * &h_im)?)?;
    let eq_im = ((&n_im * &h_re)? - (&n_re * &h_im)?)?;
    let noise = (Tensor::cat(&[eq_re, eq_im], 2)?.broadcast_div(&denom))?;
    let equalized = SymbolVector::new((signal + noise)?)?;
    let effective = ((&mag2 * var)? / denom.sqr()?)?.squeeze(2)?;
    Ok(FadedOutput {
        equalized,
        fading: h,
        effective_noise_variance: effective,
    })
}

/// Zeroes the symbols whose mask entry is 0 (the diagonal of the corruption
/// matrix). The mask applies to every batch row.
pub fn apply_corruption(x: &SymbolVector, mask: &[u8]) -> Result<SymbolVector> {
    if mask.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask of length {} for {} symbols",
            mask.len(),
            x.len()
        )));
    }
    if mask.iter().any(|m| *m > 1) {
        return Err(Error::Config("mask entries must be 0 or 1".into()));
    }
    let m: Vec<f64> = mask.iter().map(|v| f64::from(*v)).collect();
    let m = Tensor::from_vec(m, (1, mask.len(), 1), x.tensor().device())?.to_dtype(x.tensor().dtype())?;
    SymbolVector::new(x.tensor().broadcast_mul(&m)?)
}

/// A mask over `k` symbols keeping `round(density · k)` of them, erased
/// positions drawn uniformly from `seed`.
pub fn corruption_mask(k: usize, density: f64, seed: u64) -> Result<Vec<u8>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("mask density {density} outside (0, 1]")));
    }
    let erased = ((1.0 - density) * k as f64).round() as usize;
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut mask = vec![1u8; k];
    for i in idx.into_iter().take(erased) {
        mask[i] = 0;
    }
    Ok(mask)
}

/// Channel settings for one transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub snr_db: f64,
    /// Fraction of symbols that survive; `1.0` disables corruption.
    pub mask_density: f64,
}

/// Record of one channel use.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub snr_db: f64,
    pub noise_seed: u64,
    /// `(batch, k, 2)`, Rayleigh only.
    pub fading: Option<Tensor>,
    pub mask: Vec<u8>,
    /// Post-equalisation noise variance per symbol, `(batch, k)`.
    pub effective_noise_variance: Tensor,
}

/// Corruption, then the configured channel.
pub fn transmit(x: &SymbolVector, spec: &ChannelSpec, seed: u64) -> Result<(SymbolVector, ChannelRealization)> {
    let mask = if spec.mask_density >= 1.0 {
        vec![1u8; x.len()]
    } else {
        corruption_mask(x.len(), spec.mask_density, seed ^ 0xc0ff_ee00)?
    };
    let masked = if spec.mask_density >= 1.0 {
        x.clone()
    } else {
        apply_corruption(x, &mask)?
    };
    let var = noise_variance(spec.snr_db);
    let (y, fading, effective) = match spec.kind {
        ChannelKind::Awgn => {
            let eff = (Tensor::ones((x.batch(), x.len()), DType::F64, x.tensor().device())? * var)?;
            (awgn(&masked, spec.snr_db, seed)?, None, eff)
        }
        ChannelKind::Rayleigh => {
            let out = rayleigh_detailed(&masked, spec.snr_db, seed)?;
            (out.equalized, Some(out.fading), out.effective_noise_variance)
        }
    };
    Ok((
        y,
        ChannelRealization {
            snr_db: spec.snr_db,
            noise_seed: seed,
            fading,
            mask,
            effective_noise_variance: effective,
        },
    ))
}

/// Normalise a latent, send it through the channel and reshape the received
/// symbols back into latent layout.
pub fn transmit_latent(latent: &LatentCode, spec: &ChannelSpec, seed: u64) -> Result<LatentCode> {
    let (_, rows, cols, ch) = latent.dims();
    let x = power_normalize(latent)?;
    let (y, _) = transmit(&x, spec, seed)?;
    y.into_latent(rows, cols, ch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn symbols(values: Vec<f64>) -> SymbolVector {
        SymbolVector::from_interleaved(values, &Device::Cpu).unwrap()
    }

    fn host(x: &SymbolVector) -> Vec<f64> {
        x.row_interleaved(0).unwrap()
    }

    #[test]
    fn all_ones_latent_normalizes_to_unit_diagonal_symbols() {
        let latent = LatentCode::new(Tensor::ones((1, 4, 4, 32), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let x = power_normalize(&latent).unwrap();
        assert_eq!(x.len(), 256);
        let expected = 1.0 / 2f64.sqrt();
        assert!(host(&x).iter().all(|v| (v - expected).abs() < 1e-15));
        assert!((x.mean_power().unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let v: Vec<f64> = (0..64).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let a = power_normalize_tensor(&Tensor::from_vec(v.clone(), (1, 32, 2), &Device::Cpu).unwrap()).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * 10.0).collect();
        let b = power_normalize_tensor(&Tensor::from_vec(scaled, (1, 32, 2), &Device::Cpu).unwrap()).unwrap();
        for (p, q) in host(&a).iter().zip(host(&b)) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_is_rejected() {
        let latent = LatentCode::new(Tensor::zeros((1, 1, 1, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(power_normalize(&latent), Err(Error::ZeroPower)));
    }

    #[test]
    fn odd_latent_is_rejected() {
        let latent = LatentCode::new(Tensor::ones((1, 1, 1, 3), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(power_normalize(&latent), Err(Error::Shape(_))));
    }

    #[test]
    fn noise_free_channels_are_transparent() {
        let x = symbols(vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9]);
        let y = awgn(&x, f64::INFINITY, 1).unwrap();
        assert_eq!(host(&x), host(&y));
        for seed in 0..20 {
            let y = rayleigh(&x, f64::INFINITY, seed).unwrap();
            assert_eq!(host(&x), host(&y), "seed {seed}");
        }
    }

    #[test]
    fn same_seed_same_noise() {
        let x = symbols(vec![0.0; 64]);
        assert_eq!(host(&awgn(&x, 3.0, 9).unwrap()), host(&awgn(&x, 3.0, 9).unwrap()));
        assert_ne!(host(&awgn(&x, 3.0, 9).unwrap()), host(&awgn(&x, 3.0, 10).unwrap()));
    }

    #[test]
    fn corruption_masks() {
        let x = symbols((1..=20).map(f64::from).collect());
        assert_eq!(host(&apply_corruption(&x, &[1; 10]).unwrap()), host(&x));
        assert!(host(&apply_corruption(&x, &[0; 10]).unwrap()).iter().all(|v| *v == 0.0));
        assert!(apply_corruption(&x, &[1; 9]).is_err());

        let mask = corruption_mask(1000, 0.9, 3).unwrap();
        assert_eq!(mask.iter().filter(|m| **m == 0).count(), 100);
        let x = symbols(vec![1.0; 2000]);
        let y = host(&apply_corruption(&x, &mask).unwrap());
        for (i, m) in mask.iter().enumerate() {
            let expect = f64::from(*m);
            assert_eq!(y[2 * i], expect);
            assert_eq!(y[2 * i + 1], expect);
        }
        assert!(corruption_mask(10, 0.0, 0).is_err());
    }

    #[test]
    fn channel_kind_parsing() {
        assert_eq!("AWGN".parse::<ChannelKind>().unwrap(), ChannelKind::Awgn);
        assert!("ofdm".parse::<ChannelKind>().is_err());
    }
}
