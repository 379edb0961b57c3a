use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Total downsampling factor of the codec (patch 4, then one 2×2 merge).
pub const SPATIAL_FACTOR: usize = 8;

/// A batch of RGB images laid out `(batch, H, W, 3)` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pixels: Tensor,
}

impl ImageBatch {
    /// Wraps `pixels`, checking layout, spatial divisibility and value range.
    pub fn new(pixels: Tensor) -> Result<Self> {
        let dims = pixels.dims();
        if dims.len() != 4 || dims[3] != 3 {
            return Err(Error::Shape(format!(
                "image batch must be (batch, H, W, 3), got {dims:?}"
            )));
        }
        let (h, w) = (dims[1], dims[2]);
        if h == 0 || w == 0 || h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
            return Err(Error::Shape(format!(
                "image sides must be non-zero multiples of {SPATIAL_FACTOR}, got {h}x{w}"
            )));
        }
        if dims[0] > 0 {
            let flat = pixels.flatten_all()?.to_dtype(DType::F64)?;
            let lo: f64 = flat.min(0)?.to_scalar()?;
            let hi: f64 = flat.max(0)?.to_scalar()?;
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                return Err(Error::Shape(format!(
                    "pixel values must lie in [0, 1], found range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { pixels })
    }

    pub fn from_vec(data: Vec<f32>, batch: usize, height: usize, width: usize, device: &Device) -> Result<Self> {
        if data.len() != batch * height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {batch}x{height}x{width}x3 batch",
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(data, (batch, height, width, 3), device)?)
    }

    /// Builds a batch from an NCHW tensor, clamping into `[0, 1]`.
    pub fn from_nchw_clamped(t: &Tensor) -> Result<Self> {
        let t = t.clamp(0.0, 1.0)?.permute((0, 2, 3, 1))?.contiguous()?;
        Self::new(t)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn batch(&self) -> usize {
        self.pixels.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.dims()[2]
    }

    pub fn dtype(&self) -> DType {
        self.pixels.dtype()
    }

    pub fn same_shape(&self, other: &ImageBatch) -> bool {
        self.pixels.dims() == other.pixels.dims()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            pixels: self.pixels.to_dtype(dtype)?,
        })
    }

    /// `(batch, 3, H, W)` view for convolutional layers.
    pub fn to_nchw(&self) -> Result<Tensor> {
        Ok(self.pixels.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn to_vec_f64(&self) -> Result<Vec<f64>> {
        Ok(self.pixels.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Single image `i` as a batch of one.
    pub fn image(&self, i: usize) -> Result<Self> {
        Ok(Self {
            pixels: self.pixels.narrow(0, i, 1)?,
        })
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            pixels: self.pixels.narrow(0, start, len)?,
        })
    }

    pub fn concat(parts: &[ImageBatch]) -> Result<Self> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| &p.pixels).collect();
        Ok(Self {
            pixels: Tensor::cat(&ts, 0)?,
        })
    }

    /// Batch of `n` images filled with a constant value.
    pub fn constant(n: usize, height: usize, width: usize, value: f64, dtype: DType, device: &Device) -> Result<Self> {
        let t = (Tensor::ones((n, height, width, 3), dtype, device)? * value)?;
        Self::new(t)
    }

    /// 8-bit RGB bytes of image `i`, row-major.
    pub fn to_rgb8(&self, i: usize) -> Result<Vec<u8>> {
        let v: Vec<f64> = self.image(i)?.to_vec_f64()?;
        Ok(v.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect())
    }

    pub fn from_rgb8(bytes: &[u8], height: usize, width: usize, dtype: DType, device: &Device) -> Result<Self> {
        let data: Vec<f32> = bytes.iter().map(|b| f32::from(*b) / 255.0).collect();
        Self::from_vec(data, 1, height, width, device)?.to_dtype(dtype)
    }
}
