//! RGBA float images and PNG input/output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGBA image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl RgbaImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 4],
        }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 4 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not fill a {width}x{height} RGBA image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 4] {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, px: [f32; 4]) {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        self.data[i..i + 4].copy_from_slice(&px);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 4]> + '_ {
        self.data.chunks_exact(4).map(|p| [p[0], p[1], p[2], p[3]])
    }

    /// RGB after compositing over a constant background.
    pub fn composite(&self, background: [f64; 3]) -> Vec<[f64; 3]> {
        self.pixels()
            .map(|p| composite_alpha([p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64], background))
            .collect()
    }

    /// Copy with alpha forced to 1, for renders whose color already includes the background.
    pub fn opaque(&self) -> RgbaImage {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(4) {
            px[3] = 1.0;
        }
        out
    }

    pub fn to_rgba8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize8(v)).collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.to_rgba8())?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Self::decode_png(BufReader::new(file))
    }

    /// Decodes 8- or 16-bit gray, gray-alpha, RGB, RGBA or indexed PNGs; missing alpha is 1.
    pub fn decode_png<R: std::io::BufRead + std::io::Seek>(reader: R) -> Result<Self> {
        let mut decoder = png::Decoder::new(reader);
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info()?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| Error::Png("image too large".into()))?
        ];
        let info = reader.next_frame(&mut buf)?;
        let bytes = &buf[..info.buffer_size()];
        let samples: Vec<f32> = match info.bit_depth {
            png::BitDepth::Sixteen => bytes
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
                .collect(),
            png::BitDepth::Eight => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
            other => return Err(Error::Png(format!("unsupported bit depth {other:?}"))),
        };
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(Error::Png("palette was not expanded".into())),
        };
        let mut data = Vec::with_capacity(info.width as usize * info.height as usize * 4);
        for px in samples.chunks_exact(channels) {
            let rgba = match channels {
                1 => [px[0], px[0], px[0], 1.0],
                2 => [px[0], px[0], px[0], px[1]],
                3 => [px[0], px[1], px[2], 1.0],
                _ => [px[0], px[1], px[2], px[3]],
            };
            data.extend_from_slice(&rgba);
        }
        Self::from_data(info.width, info.height, data)
    }
}

pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `rgb * alpha + background * (1 - alpha)`.
pub fn composite_alpha(rgba: [f64; 4], background: [f64; 3]) -> [f64; 3] {
    let a = rgba[3];
    [0, 1, 2].map(|c| rgba[c] * a + background[c] * (1.0 - a))
}
