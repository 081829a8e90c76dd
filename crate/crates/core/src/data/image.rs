//! Single-channel raster images and binary PGM/PPM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage<P> {
    width: usize,
    height: usize,
    data: Vec<P>,
}

pub type Gray8 = GrayImage<u8>;
pub type Gray16 = GrayImage<u16>;

impl<P: Copy + Default> GrayImage<P> {
    pub fn new(width: usize, height: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: P) -> Self {
        GrayImage { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixels(&self) -> &[P] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: P) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<Q: Copy + Default>(&self, f: impl Fn(P) -> Q) -> GrayImage<Q> {
        GrayImage { width: self.width, height: self.height, data: self.data.iter().map(|&p| f(p)).collect() }
    }

    /// Mirror left-right (column order reversed).
    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width.max(1)) {
            data.extend(row.iter().rev());
        }
        GrayImage { width: self.width, height: self.height, data }
    }

    /// Sub-image with top-left `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::OutOfBounds(format!(
                "rect ({x}, {y}, {width}, {height}) outside {}×{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for row in y..y + height {
            data.extend_from_slice(&self.data[row * self.width + x..row * self.width + x + width]);
        }
        Ok(GrayImage { width, height, data })
    }
}

impl GrayImage<u8> {
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Round half-to-even and clamp to [0, 255].
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Self {
        let data = values.iter().map(|&v| quantize_u8(v)).collect();
        GrayImage { width, height, data }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    v.round_ties_even().clamp(0.0, 255.0) as u8
}

/// Bilinear sample of a row-major buffer at continuous pixel coordinates,
/// replicating the border.
pub fn sample_bilinear(values: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |xx: usize, yy: usize| values[yy * width + xx];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize_bilinear_f64(values: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = width as f64 / out_w as f64;
    let sy = height as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            out.push(sample_bilinear(values, width, height, src_x, src_y));
        }
    }
    out
}

pub fn resize_bilinear(image: &Gray8, out_w: usize, out_h: usize) -> Gray8 {
    let v = resize_bilinear_f64(&image.to_f64(), image.width(), image.height(), out_w, out_h);
    Gray8::from_f64(out_w, out_h, &v)
}

/// Decoded PGM raster; the bit depth follows the header's maxval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pgm {
    Gray8(Gray8),
    Gray16(Gray16),
}

impl Pgm {
    /// Pixel values widened to 16 bits (8-bit values are kept as-is).
    pub fn into_u16(self) -> Gray16 {
        match self {
            Pgm::Gray8(img) => img.map(u16::from),
            Pgm::Gray16(img) => img,
        }
    }
}

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), message: message.into() }
}

/// Parse a binary (P5) PGM. 16-bit samples are big-endian.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(image_err(path, format!("expected P5 magic, found `{}`", tokens[0])));
    }
    let num = |i: usize, what: &str| -> Result<usize> {
        tokens[i].parse().map_err(|_| image_err(path, format!("bad {what} `{}`", tokens[i])))
    };
    let (width, height, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
    if maxval == 0 || maxval > 65535 {
        return Err(image_err(path, format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if maxval < 256 {
        if raster.len() < n {
            return Err(image_err(path, format!("raster has {} bytes, needs {n}", raster.len())));
        }
        Ok(Pgm::Gray8(Gray8::new(width, height, raster[..n].to_vec())?))
    } else {
        if raster.len() < 2 * n {
            return Err(image_err(path, format!("raster has {} bytes, needs {}", raster.len(), 2 * n)));
        }
        let data = raster[..2 * n].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        Ok(Pgm::Gray16(Gray16::new(width, height, data)?))
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_pgm(&bytes, path)
}

pub fn encode_pgm8(image: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

pub fn encode_pgm16(image: &Gray16) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", image.width(), image.height()).into_bytes();
    for &v in image.pixels() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_pgm8(image: &Gray8, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm8(image))?;
    Ok(())
}

pub fn write_pgm16(image: &Gray16, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm16(image))?;
    Ok(())
}

/// Binary PPM (P6) from interleaved RGB bytes.
pub fn write_ppm(width: usize, height: usize, rgb: &[u8], path: impl AsRef<Path>) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::shape(format!("{width}×{height} RGB image needs {} bytes", 3 * width * height)));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_round_trip_is_big_endian() {
        let img = Gray16::new(3, 2, vec![0, 1, 256, 65535, 4660, 7]).unwrap();
        let bytes = encode_pgm16(&img);
        let header = b"P5\n3 2\n65535\n".len();
        assert_eq!(&bytes[header + 4..header + 6], &[0x01, 0x00]);
        assert_eq!(decode_pgm(&bytes, Path::new("x")).unwrap(), Pgm::Gray16(img));
    }

    #[test]
    fn pgm8_round_trip_with_comment() {
        let img = Gray8::new(2, 2, vec![1, 2, 3, 250]).unwrap();
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(img.pixels());
        assert_eq!(decode_pgm(&bytes, Path::new("x")).unwrap(), Pgm::Gray8(img.clone()));
        assert_eq!(decode_pgm(&encode_pgm8(&img), Path::new("x")).unwrap(), Pgm::Gray8(img));
    }

    #[test]
    fn truncated_raster_is_an_error() {
        let bytes = b"P5\n4 4\n255\n\x00\x01".to_vec();
        assert!(matches!(decode_pgm(&bytes, Path::new("x")), Err(Error::Image { .. })));
        assert!(decode_pgm(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Gray8::from_fn(5, 3, |x, y| (x * 10 + y) as u8);
        let flipped = img.flip_horizontal();
        assert_eq!(flipped.get(0, 1), img.get(4, 1));
        assert_eq!(flipped.flip_horizontal(), img);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Gray8::from_fn(7, 5, |x, y| (x * 30 + y) as u8);
        assert_eq!(resize_bilinear(&img, 7, 5), img);
        let c = Gray8::filled(13, 13, 77);
        assert!(resize_bilinear(&c, 5, 9).pixels().iter().all(|&v| v == 77));
    }
}
