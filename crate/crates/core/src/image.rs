//! In-memory images and binary/ASCII portable any-map (PGM/PPM) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `height × width × channels` image stored interleaved (HWC), values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-major `[channels, height, width]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, c) = self.dims();
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let rem = i % (h * w);
            self.data[rem * c + ch]
        })
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                for c in 0..self.channels {
                    let top = self.at(y0, x0, c) * (1.0 - tx) + self.at(y0, x1, c) * tx;
                    let bottom = self.at(y1, x0, c) * (1.0 - tx) + self.at(y1, x1, c) * tx;
                    data.push(top * (1.0 - ty) + bottom * ty);
                }
            }
        }
        Image { height, width, channels: self.channels, data }
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), reason: reason.into() }
}

/// Splits the header into whitespace-separated tokens, skipping `#` comments. Returns the
/// tokens and the byte offset just past the single whitespace byte that ends the last one.
fn header_tokens(bytes: &[u8], want: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < want {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Some((tokens, i + 1))
}

/// Reads a PGM (P2/P5) or PPM (P3/P6) file, scaling samples by `1 / maxval`.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, body) = header_tokens(&bytes, 4).ok_or_else(|| bad(path, "truncated header"))?;
    let channels = match tokens[0].as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        other => return Err(bad(path, format!("unsupported magic {other:?}"))),
    };
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| bad(path, format!("bad {what} {s:?}")))
    };
    let width = num(&tokens[1], "width")?;
    let height = num(&tokens[2], "height")?;
    let maxval = num(&tokens[3], "maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad(path, format!("invalid header {width}x{height} maxval {maxval}")));
    }
    let count = width * height * channels;
    let scale = 1.0 / maxval as f64;
    let samples: Vec<usize> = if tokens[0] == "P2" || tokens[0] == "P3" {
        let text = String::from_utf8_lossy(&bytes[body.min(bytes.len())..]);
        text.split_ascii_whitespace()
            .take(count)
            .map(|t| num(t, "sample"))
            .collect::<Result<_>>()?
    } else {
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let raw = bytes.get(body..body + need).ok_or_else(|| bad(path, "truncated pixel data"))?;
        if wide {
            raw.chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]]) as usize).collect()
        } else {
            raw.iter().map(|&b| b as usize).collect()
        }
    };
    if samples.len() != count {
        return Err(bad(path, format!("expected {count} samples, found {}", samples.len())));
    }
    if let Some(&s) = samples.iter().find(|&&s| s > maxval) {
        return Err(bad(path, format!("sample {s} exceeds maxval {maxval}")));
    }
    Image::new(height, width, channels, samples.into_iter().map(|s| s as f64 * scale).collect())
}

/// Writes a binary PGM (1 channel) or PPM (3 channels) with maxval 255; values are clamped to
/// `[0, 1]` and rounded.
pub fn write_pnm(path: &Path, image: &Image) -> Result<()> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(bad(path, format!("cannot write {c}-channel image as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}
