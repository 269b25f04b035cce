//! RGB float images in [0,1] and binary PPM output.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    /// Row-major RGB triples, values nominally in [0,1].
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w * 3, "image data size mismatch");
        Image { h, w, data }
    }

    pub fn fill(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        Image { h, w, data }
    }

    /// Copy out the `w` x `h` sub-image whose top-left corner is (x0, y0).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(
            x0 + w <= self.w && y0 + h <= self.h,
            "crop ({x0},{y0}) {w}x{h} leaves the {}x{} image",
            self.w,
            self.h
        );
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let row = &self.data[(y * self.w + x0) * 3..(y * self.w + x0 + w) * 3];
            data.extend_from_slice(row);
        }
        Image::new(h, w, data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Quantize to 8-bit, rounding half-up from [0,1].
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.w, self.h)?;
        f.write_all(&self.to_rgb8())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path)?;
        let loc = || path.display().to_string();
        // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> data
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(&bytes[start..pos]);
        }
        if fields.len() < 4 || fields[0] != b"P6" {
            return Err(Error::format_in(loc(), "not a binary PPM (P6)"));
        }
        let parse = |b: &[u8]| -> Result<usize> {
            std::str::from_utf8(b)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format_in(loc(), "bad PPM header field"))
        };
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(Error::format_in(loc(), "only maxval 255 supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(Error::format_in(loc(), "truncated PPM payload"));
        }
        let data = bytes[pos..pos + need]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        Ok(Image { h, w, data })
    }
}
