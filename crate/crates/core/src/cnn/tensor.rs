use super::{CnnError, Result};
use crate::image::GrayImage;

/// Channel-major feature maps: `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(CnnError::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CnnError::Shape("tensor holds non-finite values".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            channels: 1,
            height: img.height(),
            width: img.width(),
            data: img.data().to_vec(),
        }
    }

    /// Single-channel tensor from a `size x size` window of `img`.
    pub fn from_window(img: &GrayImage, row: usize, col: usize, size: usize) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for r in row..row + size {
            let start = r * img.width() + col;
            data.extend_from_slice(&img.data()[start..start + size]);
        }
        Self {
            channels: 1,
            height: size,
            width: size,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Drops `margin` pixels from every side of every channel.
    pub fn crop_center(&self, margin: usize) -> Result<Self> {
        if 2 * margin >= self.height.min(self.width) {
            return Err(CnnError::Shape(format!(
                "cannot crop {margin} from {}x{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height - 2 * margin, self.width - 2 * margin);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in margin..margin + h {
                let start = (c * self.height + y) * self.width + margin;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_center_keeps_interior() {
        let t = Tensor3::new(1, 4, 4, (0..16).map(f64::from).collect()).unwrap();
        let c = t.crop_center(1).unwrap();
        assert_eq!(c.data, vec![5.0, 6.0, 9.0, 10.0]);
        assert!(t.crop_center(2).is_err());
    }

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(Tensor3::new(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(Tensor3::new(1, 1, 1, vec![f64::NAN]).is_err());
    }
}
