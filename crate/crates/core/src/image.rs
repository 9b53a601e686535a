//! RGB image buffers and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self { x, y, width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.width <= self.x + self.width
            && other.y + other.height <= self.y + self.height
    }

    /// Splits into four quadrants in raster order (TL, TR, BL, BR); the
    /// left and top parts take the ceiling half of odd extents.
    pub fn quarter(&self) -> [Rect; 4] {
        let (lw, lh) = (self.width.div_ceil(2), self.height.div_ceil(2));
        let (rw, bh) = (self.width - lw, self.height - lh);
        [
            Rect::new(self.x, self.y, lw, lh),
            Rect::new(self.x + lw, self.y, rw, lh),
            Rect::new(self.x, self.y + lh, lw, bh),
            Rect::new(self.x + lw, self.y + lh, rw, bh),
        ]
    }
}

/// RGB image with channel-planar storage and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    /// `[3 × height × width]`.
    data: Vec<f32>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data("image has zero extent".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Data(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    /// Builds from a per-pixel function returning RGB in `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut data = vec![0.0; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                for c in 0..3 {
                    data[(c * height + y) * width + x] = px[c].clamp(0.0, 1.0);
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

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Copies a region out as a `[3 × h × w]` tensor.
    pub fn crop(&self, r: &Rect) -> Tensor<f32> {
        let mut out = Vec::with_capacity(3 * r.area());
        for c in 0..3 {
            for y in r.y..r.y + r.height {
                let start = (c * self.height + y) * self.width + r.x;
                out.extend_from_slice(&self.data[start..start + r.width]);
            }
        }
        Tensor::new(&[3, r.height, r.width], out).expect("crop shape")
    }

    /// Sub-image over `r`.
    pub fn sub_image(&self, r: &Rect) -> ImageBuffer {
        let t = self.crop(r);
        ImageBuffer {
            height: r.height,
            width: r.width,
            data: t.into_data(),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_tiles_parent() {
        let r = Rect::new(2, 3, 5, 4);
        let q = r.quarter();
        assert_eq!(q.iter().map(Rect::area).sum::<usize>(), r.area());
        assert_eq!(q[0], Rect::new(2, 3, 3, 2));
        assert_eq!(q[3], Rect::new(5, 5, 2, 2));
        assert!(q.iter().all(|c| r.contains(c)));
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageBuffer::new(1, 1, vec![0.0, 2.0, 0.0]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let img = ImageBuffer::from_fn(5, 7, |x, y| {
            [x as f32 * 30.0 / 255.0, y as f32 * 40.0 / 255.0, 17.0 / 255.0]
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert_eq!(back.height(), 5);
        assert_eq!(back.width(), 7);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
