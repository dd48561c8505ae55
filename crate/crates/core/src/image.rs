//! RGB images as `3×H×W` planar `f64` arrays in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image contains NaN or infinity".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; 3 * height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the `h×w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid("crop window exceeds image bounds"));
        }
        Ok(Self::from_fn(h, w, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.get(c, self.height - 1 - y, x))
    }

    /// Reflect-pads the bottom and right edges up to multiples of `multiple`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> Result<Self> {
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        if ph - self.height >= self.height || pw - self.width >= self.width {
            return Err(Error::invalid(format!(
                "image {}x{} too small to reflect-pad to a multiple of {multiple}",
                self.height, self.width
            )));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        Ok(Self::from_fn(ph, pw, |c, y, x| {
            self.get(c, reflect(y, self.height), reflect(x, self.width))
        }))
    }

    /// Stacks images into an `[N, 3, H, W]` tensor.
    pub fn batch(images: &[&ImageTensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if !img.same_shape(first) {
                return Err(Error::shape("images in a batch must share a size"));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::new(vec![images.len(), 3, first.height, first.width], data)
    }

    /// Splits an `[N, 3, H, W]` tensor back into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("expected [N,3,H,W], got {s:?}")));
        }
        let per = 3 * s[2] * s[3];
        t.data().chunks(per).map(|c| ImageTensor::new(s[2], s[3], c.to_vec())).collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                out.push((self.data[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let hw = height * width;
        if bytes.len() != 3 * hw {
            return Err(Error::shape("RGB byte buffer does not match dimensions"));
        }
        let mut data = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[c * hw + i] = f64::from(bytes[3 * i + c]) / 255.0;
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        Self::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::decode_png(&std::fs::read(path)?)
    }
}
