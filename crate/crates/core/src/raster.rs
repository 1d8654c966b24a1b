//! In-memory float images and their PNG encodings.

use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

/// Row-major RGB image with channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width as usize * height as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, color: Rgb) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = color;
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let decoded = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_owned(),
                source,
            })?
            .to_rgb8();
        let (width, height) = decoded.dimensions();
        let pixels = decoded
            .pixels()
            .map(|p| {
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ]
            })
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width, self.height);
        for (dst, src) in buf.pixels_mut().zip(&self.pixels) {
            *dst = image::Rgb([quantize(src[0]), quantize(src[1]), quantize(src[2])]);
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
    }
}

#[inline]
fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a depth map as 16-bit grayscale, normalized by `far`.
pub fn write_depth_png(
    depth: &[f64],
    width: u32,
    height: u32,
    far: f64,
    path: &Path,
) -> Result<()> {
    if depth.len() != width as usize * height as usize {
        return Err(Error::Shape(format!(
            "{} depths for a {width}x{height} map",
            depth.len()
        )));
    }
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(width, height);
    for (dst, &d) in buf.pixels_mut().zip(depth) {
        let n = (d / far).clamp(0.0, 1.0);
        *dst = image::Luma([(n * 65535.0).round() as u16]);
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}
