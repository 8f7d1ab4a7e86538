use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `H x W x C` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

pub const MIN_SIDE: usize = 8;

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        let img = Self::new_unchecked(height, width, channels, pixels)?;
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Invalid(format!(
                "image {height}x{width} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if let Some(v) = img.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(img)
    }

    /// Patches and crops may be smaller than the minimum frame size.
    pub(crate) fn new_unchecked(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels == 0 || pixels.len() != height * width * channels {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| color).collect();
        Image {
            height,
            width,
            channels: 3,
            pixels,
        }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, 3, bytes.iter().map(|b| *b as f32 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// ITU-R BT.601 luma; single-channel images pass through.
    pub fn grayscale(&self) -> Vec<f32> {
        if self.channels < 3 {
            return self.pixels.iter().step_by(self.channels).copied().collect();
        }
        self.pixels
            .chunks_exact(self.channels)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Bilinear resize with corner-aligned sampling: output pixel `i` reads
    /// source coordinate `i * (in - 1) / (out - 1)`, so the four corners are
    /// copied exactly. A one-pixel output axis samples the source centre.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys = sample_coords(self.height, height);
        let xs = sample_coords(self.width, width);
        let c = self.channels;
        let mut out = vec![0.0f32; height * width * c];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                for ch in 0..c {
                    let top = self.get(y0, x0, ch) * (1.0 - fx) + self.get(y0, x1, ch) * fx;
                    let bot = self.get(y1, x0, ch) * (1.0 - fx) + self.get(y1, x1, ch) * fx;
                    out[(oy * width + ox) * c + ch] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
                }
            }
        }
        Image {
            height,
            width,
            channels: c,
            pixels: out,
        }
    }

    /// Copy of rows `top..bottom`, columns `left..right`.
    pub fn crop(&self, top: usize, left: usize, bottom: usize, right: usize) -> Result<Image> {
        if top >= bottom || left >= right || bottom > self.height || right > self.width {
            return Err(Error::Invalid(format!(
                "crop [{top},{bottom})x[{left},{right}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity((bottom - top) * (right - left) * c);
        for y in top..bottom {
            let start = (y * self.width + left) * c;
            out.extend_from_slice(&self.pixels[start..start + (right - left) * c]);
        }
        Image::new_unchecked(bottom - top, right - left, c, out)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Invalid("only RGB images can be saved".into()));
        }
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Image::from_rgb8(h as usize, w as usize, rgb.as_raw())
    }
}

fn sample_coords(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    (0..output)
        .map(|i| {
            let s = if output == 1 {
                (input - 1) as f64 / 2.0
            } else {
                i as f64 * (input - 1) as f64 / (output - 1) as f64
            };
            let lo = (s.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}
