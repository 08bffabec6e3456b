//! RGB canvas, shape silhouettes and PNG encoding.

use std::io::{BufWriter, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: Rgb,
}

impl NamedColor {
    pub fn new(name: &str, rgb: Rgb) -> Self {
        Self {
            name: name.to_string(),
            rgb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: color
                .iter()
                .copied()
                .cycle()
                .take(width * height * 3)
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: Rgb) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set(x, y, c);
            }
        }
    }

    /// Paints `c` wherever `mask` is set, with the mask's top-left at `(x0, y0)`.
    pub fn stamp(&mut self, x0: usize, y0: usize, w: usize, h: usize, mask: &[bool], c: Rgb) {
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] && x0 + x < self.width && y0 + y < self.height {
                    self.set(x0 + x, y0 + y, c);
                }
            }
        }
    }

    pub fn write_png<W: Write>(&self, out: W) -> Result<()> {
        let fail = |e: png::EncodingError| Error::RenderFailure(format!("png encoding: {e}"));
        let mut enc = png::Encoder::new(BufWriter::new(out), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(&self.pixels).map_err(fail)?;
        w.finish().map_err(fail)
    }

    pub fn read_png<R: Read + std::io::BufRead + std::io::Seek>(input: R) -> Result<Self> {
        let fail = |e: png::DecodingError| Error::RenderFailure(format!("png decoding: {e}"));
        let mut reader = png::Decoder::new(input).read_info().map_err(fail)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::RenderFailure("png too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(fail)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::RenderFailure(format!(
                "expected 8-bit RGB, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            pixels: buf,
        })
    }
}

/// Simple silhouettes used by the object group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Ring,
    Square,
    Triangle,
    Diamond,
    Cross,
    House,
    Bus,
    Arrow,
}

impl Shape {
    pub const ALL: [Shape; 9] = [
        Shape::Circle,
        Shape::Ring,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
        Shape::House,
        Shape::Bus,
        Shape::Arrow,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Ring => "ring",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::House => "house",
            Shape::Bus => "bus",
            Shape::Arrow => "arrow",
        }
    }

    pub fn plural(&self) -> String {
        match self {
            Shape::Bus => "buses".into(),
            Shape::Cross => "crosses".into(),
            other => format!("{}s", other.name()),
        }
    }

    /// Whether the pixel at normalized center `(u, v)` in `[0, 1]²` is ink.
    fn covers(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Shape::Circle => r2 <= 0.25,
            Shape::Ring => (0.09..=0.25).contains(&r2),
            Shape::Square => true,
            Shape::Triangle => du.abs() <= v / 2.0,
            Shape::Diamond => du.abs() + dv.abs() <= 0.5,
            Shape::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
            Shape::House => {
                if v >= 0.45 {
                    (0.1..=0.9).contains(&u)
                } else {
                    du.abs() <= v / 0.45 * 0.5
                }
            }
            Shape::Bus => {
                let wheel = |cu: f64| (u - cu).powi(2) + (v - 0.82).powi(2) <= 0.018;
                let body = (0.1..=0.75).contains(&v);
                let window = (0.22..=0.42).contains(&v)
                    && (u * 4.0).fract() > 0.3
                    && (u * 4.0).fract() < 0.8;
                (body && !window) || wheel(0.25) || wheel(0.75)
            }
            Shape::Arrow => {
                if u < 0.55 {
                    dv.abs() <= 0.12
                } else {
                    dv.abs() <= (1.0 - u) / 0.45 * 0.5
                }
            }
        }
    }

    /// Row-major `size × size` ink mask.
    pub fn mask(&self, size: usize) -> Vec<bool> {
        let s = size as f64;
        (0..size * size)
            .map(|i| {
                let (x, y) = (i % size, i / size);
                self.covers((x as f64 + 0.5) / s, (y as f64 + 0.5) / s)
            })
            .collect()
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shape `{s}`")))
    }
}
