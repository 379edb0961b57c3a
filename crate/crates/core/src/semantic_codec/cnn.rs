//! Convolutional JSCC backbone (the DeepJSCC family): five strided
//! convolutions down, five transposed convolutions up, PReLU between layers.

use candle_core::{Module, Tensor};
use candle_nn::{conv2d, conv_transpose2d, Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Init, VarBuilder};

use crate::error::Result;

const KERNEL: usize = 5;
/// Strides of the five encoder layers; the decoder mirrors them.
const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

/// Parametric ReLU with one slope per channel of an NCHW map.
#[derive(Debug, Clone)]
pub struct PRelu {
    slope: Tensor,
}

impl PRelu {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            slope: vb.get_with_hints(channels, "slope", Init::Const(0.25))?,
        })
    }
}

impl Module for PRelu {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = x.dim(1)?;
        let a = self.slope.reshape((1, c, 1, 1))?;
        x.relu()? + x.minimum(0.0)?.broadcast_mul(&a)?
    }
}

#[derive(Debug, Clone)]
pub struct CnnEncoder {
    convs: Vec<Conv2d>,
    acts: Vec<PRelu>,
}

impl CnnEncoder {
    pub fn new(filters: usize, latent_channels: usize, vb: VarBuilder) -> Result<Self> {
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        for (i, stride) in STRIDES.iter().enumerate() {
            let cin = if i == 0 { 3 } else { filters };
            let cout = if i + 1 == STRIDES.len() { latent_channels } else { filters };
            let cfg = Conv2dConfig {
                padding: KERNEL / 2,
                stride: *stride,
                ..Default::default()
            };
            convs.push(conv2d(cin, cout, KERNEL, cfg, vb.pp(format!("conv{i}")))?);
            if i + 1 < STRIDES.len() {
                acts.push(PRelu::new(cout, vb.pp(format!("act{i}")))?);
            }
        }
        Ok(Self { convs, acts })
    }

    /// `(batch, 3, H, W)` → `(batch, C, H/8, W/8)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if let Some(act) = self.acts.get(i) {
                x = act.forward(&x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct CnnDecoder {
    deconvs: Vec<ConvTranspose2d>,
    acts: Vec<PRelu>,
}

impl CnnDecoder {
    pub fn new(filters: usize, latent_channels: usize, vb: VarBuilder) -> Result<Self> {
        let mut deconvs = Vec::new();
        let mut acts = Vec::new();
        let n = STRIDES.len();
        for (i, stride) in STRIDES.iter().rev().enumerate() {
            let cin = if i == 0 { latent_channels } else { filters };
            let cout = if i + 1 == n { 3 } else { filters };
            let cfg = ConvTranspose2dConfig {
                padding: KERNEL / 2,
                output_padding: stride - 1,
                stride: *stride,
                dilation: 1,
            };
            deconvs.push(conv_transpose2d(cin, cout, KERNEL, cfg, vb.pp(format!("deconv{i}")))?);
            if i + 1 < n {
                acts.push(PRelu::new(cout, vb.pp(format!("act{i}")))?);
            }
        }
        Ok(Self { deconvs, acts })
    }

    /// `(batch, C, H/8, W/8)` → pre-activation `(batch, 3, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, deconv) in self.deconvs.iter().enumerate() {
            x = deconv.forward(&x)?;
            if let Some(act) = self.acts.get(i) {
                x = act.forward(&x)?;
            }
        }
        Ok(x)
    }
}
