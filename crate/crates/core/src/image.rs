//! Grayscale frames with optional color, and PNM file IO.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("data length {got} does not match {width}x{height}")]
    Size { width: usize, height: usize, got: usize },
    #[error("image decode failed: {0}")]
    Decode(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-major intensities in `[0, 1]`; pixel `(x, y)` has its center at the
/// integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    /// Per-pixel RGB when the source had color.
    pub rgb: Option<Vec<[f32; 3]>>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::Size { width, height, got: data.len() });
        }
        Ok(Self { width, height, data, rgb: None })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height], rgb: None }
    }

    /// Color image; the gray channel is the Rec. 601 luma.
    pub fn from_rgb(width: usize, height: usize, rgb: Vec<[f32; 3]>) -> Result<Self, ImageError> {
        if rgb.len() != width * height {
            return Err(ImageError::Size { width, height, got: rgb.len() });
        }
        let data = rgb.iter().map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect();
        Ok(Self { width, height, data, rgb: Some(rgb) })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb32f();
            let px = rgb.pixels().map(|p| p.0).collect();
            Self::from_rgb(w, h, px).expect("buffer matches dimensions")
        } else {
            let l = img.to_luma32f();
            Self { width: w, height: h, data: l.into_raw(), rgb: None }
        }
    }

    /// Binary 8-bit P5, or P6 when the image has color.
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let q8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        match &self.rgb {
            Some(rgb) => {
                let raw: Vec<u8> = rgb.iter().flat_map(|c| c.map(q8)).collect();
                let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, raw).expect("size checked");
                let enc = PnmEncoder::new(file).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
                buf.write_with_encoder(enc)?;
            }
            None => {
                let raw: Vec<u8> = self.data.iter().map(|&v| q8(v)).collect();
                let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w, h, raw).expect("size checked");
                let enc = PnmEncoder::new(file).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
                buf.write_with_encoder(enc)?;
            }
        }
        Ok(())
    }
}

/// Normalized Gaussian taps out to `truncate·σ` (at least one tap each side).
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f32> {
    let r = (truncate * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian blur, taps to 4σ, borders clamped. `sigma <= 0` is a
/// no-op.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma, 4.0);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width, img.height);
    let pass = |src: &[f32], horizontal: bool| {
        let mut out = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0f32;
                for (i, kv) in k.iter().enumerate() {
                    let o = i as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x as i64 + o).clamp(0, w as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + o).clamp(0, h as i64 - 1) as usize)
                    };
                    s += kv * src[sy * w + sx];
                }
                out[y * w + x] = s;
            }
        }
        out
    };
    let data = pass(&pass(&img.data, true), false);
    GrayImage { width: w, height: h, data, rgb: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(GrayImage::new(4, 3, vec![0.0; 11]).is_err());
        assert!(GrayImage::new(4, 3, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn gray_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let data: Vec<f32> = (0..48).map(|i| i as f32 / 47.0).collect();
        let img = GrayImage::new(8, 6, data.clone()).unwrap();
        img.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..2], b"P5");
        let back = GrayImage::load(&path).unwrap();
        assert_eq!((back.width, back.height), (8, 6));
        for (a, b) in back.data.iter().zip(&data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn color_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let rgb = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]];
        GrayImage::from_rgb(2, 2, rgb.clone()).unwrap().save(&path).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..2], b"P6");
        let back = GrayImage::load(&path).unwrap();
        assert_eq!(back.rgb.unwrap(), rgb);
        assert!((back.data[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn kernel_is_normalized() {
        for s in [1.0, 1.7, 3.0] {
            let k = gaussian_kernel(s, 3.0);
            assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert_eq!(k.len() % 2, 1);
        }
    }

    #[test]
    fn blur_keeps_constants_and_mass() {
        let img = GrayImage::filled(20, 10, 0.4);
        assert!(gaussian_blur(&img, 2.0).data.iter().all(|v| (v - 0.4).abs() < 1e-6));
        let mut img = GrayImage::filled(41, 41, 0.0);
        img.data[20 * 41 + 20] = 1.0;
        let b = gaussian_blur(&img, 1.5);
        assert!((b.data.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn corrupt_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(GrayImage::load(&path).is_err());
    }
}
