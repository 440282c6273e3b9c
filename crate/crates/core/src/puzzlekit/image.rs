//! 8-bit grayscale and RGB rasters with binary PGM (P5) / PPM (P6) I/O.

use std::path::Path;

use crate::error::{write_atomic, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image::new(w, h, c, data)
    }

    pub fn flip_horizontal(&self) -> Image {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(self.pixel(x, y));
            }
        }
        Image::new(self.width, self.height, c, data).expect("same geometry")
    }

    /// Bilinear resampling with pixel-center alignment; same size is a copy.
    pub fn resize(&self, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("cannot resize to or from an empty image"));
        }
        if (w, h) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let c = self.channels;
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        let coord = |o: usize, scale: f64, len: usize| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = s.floor() as usize;
            (lo, (lo + 1).min(len - 1), s - lo as f64)
        };
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..h {
            let (y0, y1, fy) = coord(y, sy, self.height);
            for x in 0..w {
                let (x0, x1, fx) = coord(x, sx, self.width);
                for ch in 0..c {
                    let p = |xx: usize, yy: usize| self.pixel(xx, yy)[ch] as f64;
                    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                    let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                    data.push((top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Image::new(w, h, c, data)
    }

    /// Binary PGM for one channel, PPM for three.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
        let fmt = |offset: usize, detail: String| Error::format(path, Some(offset as u64), detail);
        if bytes.len() < 2 || (&bytes[..2] != b"P5" && &bytes[..2] != b"P6") {
            return Err(fmt(0, "expected binary PNM magic \"P5\" or \"P6\"".into()));
        }
        let channels = if &bytes[..2] == b"P5" { 1 } else { 3 };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for (i, field) in fields.iter_mut().enumerate() {
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                let what = ["width", "height", "maxval"][i];
                return Err(fmt(start, format!("malformed header: expected {what}")));
            }
            let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
            *field = text
                .parse()
                .map_err(|_| fmt(start, format!("header value {text} out of range")))?;
        }
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 255 {
            return Err(fmt(pos, format!("unsupported maxval {maxval} (8-bit only)")));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fmt(pos, "malformed header: missing separator before payload".into()));
        }
        pos += 1;
        let need = width * height * channels;
        let have = bytes.len() - pos;
        if have < need {
            return Err(fmt(
                bytes.len(),
                format!("truncated payload: {need} bytes expected after offset {pos}, {have} present"),
            ));
        }
        Image::new(width, height, channels, bytes[pos..pos + need].to_vec())
    }

    pub fn read_pnm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_pnm(&bytes, path)
    }

    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_pnm())
    }
}

/// Frames of a directory whose PNM files have numeric stems, in numeric order.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<Image>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut numbered = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "pgm" && ext != "ppm" {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let index: u64 = stem
            .parse()
            .map_err(|_| Error::format(&path, None, "frame file name is not a number"))?;
        numbered.push((index, path));
    }
    if numbered.is_empty() {
        return Err(Error::format(dir, None, "no PGM/PPM frames found"));
    }
    numbered.sort();
    let mut frames: Vec<Image> = Vec::with_capacity(numbered.len());
    for (_, path) in &numbered {
        let img = Image::read_pnm(path)?;
        if let Some(first) = frames.first() {
            let a = (first.width, first.height, first.channels);
            let b = (img.width, img.height, img.channels);
            if a != b {
                return Err(Error::format(
                    path,
                    None,
                    format!("frame geometry {b:?} differs from first frame {a:?}"),
                ));
            }
        }
        frames.push(img);
    }
    Ok(frames)
}
