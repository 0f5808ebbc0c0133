//! Raster types: RGB images, soft masks and binary masks, with PPM (P6)
//! and PGM (P5) serialisation.

use std::path::Path;

use crate::error::{LiraError, Result};

/// RGB image stored row-major as `H × W × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(LiraError::invalid("image must be non-empty"));
        }
        if values.len() != height * width * 3 {
            return Err(LiraError::shape("ImageBuffer::new", &[height, width, 3], &[values.len()]));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LiraError::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageBuffer { height, width, values })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let values = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        for (k, v) in rgb.into_iter().enumerate() {
            self.values[i + k] = v.clamp(0.0, 1.0);
        }
    }

    /// Copies rows `r0..=r1`, columns `c0..=c1`.
    pub fn crop(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> Result<Self> {
        if r0 > r1 || c0 > c1 || r1 >= self.height || c1 >= self.width {
            return Err(LiraError::invalid(format!(
                "crop ({r0},{c0})-({r1},{c1}) outside {}x{}",
                self.height, self.width
            )));
        }
        let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
        let mut values = Vec::with_capacity(h * w * 3);
        for r in r0..=r1 {
            let start = (r * self.width + c0) * 3;
            values.extend_from_slice(&self.values[start..start + w * 3]);
        }
        Self::new(h, w, values)
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(LiraError::invalid("resize to empty image"));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut values = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for c in 0..width {
                let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let (p00, p01, p10, p11) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
                for k in 0..3 {
                    let top = p00[k] * (1.0 - wx) + p01[k] * wx;
                    let bottom = p10[k] * (1.0 - wx) + p11[k] * wx;
                    values.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, values)
    }

    /// Flattens non-overlapping `patch × patch` tiles into rows of
    /// `patch·patch·3` values, tiles ordered row-major.
    pub fn patches(&self, patch: usize) -> Result<(usize, Vec<f64>)> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(LiraError::shape("patches", &[self.height, self.width], &[patch, patch]));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(self.values.len());
        for pr in 0..gh {
            for pc in 0..gw {
                for r in pr * patch..(pr + 1) * patch {
                    let start = (r * self.width + pc * patch) * 3;
                    out.extend_from_slice(&self.values[start..start + patch * 3]);
                }
            }
        }
        Ok((gh * gw, out))
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| to_byte(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_netpbm(bytes, b"P6")?;
        if body.len() != w * h * 3 {
            return Err(LiraError::Format(format!("ppm body has {} bytes, want {}", body.len(), w * h * 3)));
        }
        Self::new(h, w, body.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_ppm())?)
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }
}

/// Per-pixel foreground probabilities, row-major `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(LiraError::shape("MaskMap::new", &[height, width], &[values.len()]));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LiraError::invalid(format!("mask probability {v} outside [0, 1]")));
        }
        Ok(MaskMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Probability × 255 rounded to nearest, as binary PGM.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| to_byte(v)));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_netpbm(bytes, b"P5")?;
        if body.len() != w * h {
            return Err(LiraError::Format(format!("pgm body has {} bytes, want {}", body.len(), w * h)));
        }
        Self::new(h, w, body.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_pgm())?)
    }
}

/// Thresholded mask. `area` always equals the number of set pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    area: usize,
}

/// Inclusive bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(LiraError::shape("BinaryMask::new", &[height, width], &[bits.len()]));
        }
        let area = bits.iter().filter(|&&b| b).count();
        Ok(BinaryMask { height, width, bits, area })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
            area: 0,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
            area: height * width,
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, bits).expect("length matches")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    pub fn bbox(&self) -> Option<BBox> {
        if self.area == 0 {
            return None;
        }
        let mut b = BBox {
            row_min: usize::MAX,
            col_min: usize::MAX,
            row_max: 0,
            col_max: 0,
        };
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &v)| v) {
            let (r, c) = (i / self.width, i % self.width);
            b.row_min = b.row_min.min(r);
            b.row_max = b.row_max.max(r);
            b.col_min = b.col_min.min(c);
            b.col_max = b.col_max.max(c);
        }
        Some(b)
    }

    /// Mask as a 0/1 probability map.
    pub fn to_mask_map(&self) -> MaskMap {
        MaskMap {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        self.to_mask_map().to_pgm()
    }

    /// Pixels at or above 128 are set.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_netpbm(bytes, b"P5")?;
        if body.len() != w * h {
            return Err(LiraError::Format(format!("pgm body has {} bytes, want {}", body.len(), w * h)));
        }
        Self::new(h, w, body.iter().map(|&b| b >= 128).collect())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_pgm())?)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses a binary netpbm header with maxval 255; returns (width, height, body).
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(LiraError::Format(format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(LiraError::Format("truncated netpbm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| LiraError::Format(format!("bad netpbm header field `{text}`")))?;
    }
    if fields[2] != 255 {
        return Err(LiraError::Format(format!("unsupported maxval {}", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(LiraError::Format("missing separator after netpbm header".into()));
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}
