//! Value types for the two representation spaces (pixels and latents) and the
//! conditioning vector. All tensors are float64, channel-first, unbatched.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, RgbImage};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;
pub const IMAGE_CHANNELS: usize = 3;
pub const LATENT_CHANNELS: usize = 4;

pub(crate) fn device() -> Device {
    Device::Cpu
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let values = t.flatten_all()?.to_vec1::<f64>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Range(format!("{what} contains non-finite values")))
    }
}

/// An RGB image with values in [0, 1], stored as a `(3, H, W)` tensor.
#[derive(Debug, Clone)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let tensor = tensor.to_dtype(DTYPE)?;
        match tensor.dims() {
            [IMAGE_CHANNELS, h, w] if *h > 0 && *w > 0 => {}
            dims => {
                return Err(Error::Shape(format!(
                    "image tensor must be (3, H, W), got {dims:?}"
                )))
            }
        }
        let values = tensor.flatten_all()?.to_vec1::<f64>()?;
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!(
                "image value {bad} outside [0, 1]"
            )));
        }
        Ok(Self(tensor))
    }

    /// Builds an image from channel-first data, clamping into [0, 1].
    pub fn from_chw(data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if data.len() != IMAGE_CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for a {height}x{width} image, got {}",
                IMAGE_CHANNELS * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("image contains non-finite values".into()));
        }
        let data: Vec<f64> = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let t = Tensor::from_vec(data, (IMAGE_CHANNELS, height, width), &device())?;
        Ok(Self(t))
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; IMAGE_CHANNELS * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..IMAGE_CHANNELS {
                data[c * h * w + y as usize * w + x as usize] = px.0[c] as f64 / 255.0;
            }
        }
        let t = Tensor::from_vec(data, (IMAGE_CHANNELS, h, w), &device())
            .expect("buffer length matches shape");
        Self(t)
    }

    /// Reads a PNG (or any format the `image` crate decodes) and resizes it
    /// to `resolution x resolution` with bilinear filtering.
    pub fn load(path: &Path, resolution: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::load(path, e.to_string()))?
            .to_rgb8();
        let img = if img.width() as usize != resolution || img.height() as usize != resolution {
            image::imageops::resize(
                &img,
                resolution as u32,
                resolution as u32,
                FilterType::Triangle,
            )
        } else {
            img
        };
        Ok(Self::from_rgb(&img))
    }

    pub fn to_rgb(&self) -> Result<RgbImage> {
        let (h, w) = (self.height(), self.width());
        let data = self.to_vec()?;
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let v = data[c * h * w + y as usize * w + x as usize];
                *p = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            image::Rgb(px)
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb()?.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Bilinear resize to a square resolution; identity if already that size.
    pub fn resized(&self, resolution: usize) -> Result<Self> {
        if self.height() == resolution && self.width() == resolution {
            return Ok(self.clone());
        }
        let img = image::imageops::resize(
            &self.to_rgb()?,
            resolution as u32,
            resolution as u32,
            FilterType::Triangle,
        );
        Ok(Self::from_rgb(&img))
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.flatten_all()?.to_vec1::<f64>()?)
    }
}

/// A latent feature map stored as a `(C, h, w)` tensor; `C` is 4 for the
/// default autoencoder.
#[derive(Debug, Clone)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let tensor = tensor.to_dtype(DTYPE)?;
        if tensor.rank() != 3 {
            return Err(Error::Shape(format!(
                "latent tensor must be (C, h, w), got {:?}",
                tensor.dims()
            )));
        }
        check_finite(&tensor, "latent")?;
        Ok(Self(tensor))
    }

    pub fn from_vec(data: Vec<f64>, shape: (usize, usize, usize)) -> Result<Self> {
        if data.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::Shape(format!(
                "{} values do not fill a {shape:?} latent",
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(data, shape, &device())?)
    }

    pub fn full(value: f64, shape: (usize, usize, usize)) -> Result<Self> {
        Self::new(Tensor::full(value, shape, &device())?)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.flatten_all()?.to_vec1::<f64>()?)
    }
}

/// Pooled prompt embedding of fixed length `m`.
#[derive(Debug, Clone)]
pub struct ConditionVector(Tensor);

impl ConditionVector {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let tensor = tensor.to_dtype(DTYPE)?;
        if tensor.rank() != 1 {
            return Err(Error::Shape(format!(
                "condition vector must be rank 1, got {:?}",
                tensor.dims()
            )));
        }
        check_finite(&tensor, "condition vector")?;
        Ok(Self(tensor))
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.to_vec1::<f64>()?)
    }
}

/// Stacks images into a `(B, 3, H, W)` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Tensor> {
    let ts: Vec<&Tensor> = images.into_iter().map(|i| i.tensor()).collect();
    if ts.is_empty() {
        return Err(Error::InsufficientData("cannot stack an empty image list".into()));
    }
    Ok(Tensor::stack(&ts, 0)?)
}
