//! RGB float images with binary PPM (8-bit) and PFM (32-bit float) I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub pixels: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    /// Mean squared error over all channels.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch("image sizes differ".into()));
        }
        let mut acc = 0.0;
        for (a, b) in self.pixels.iter().zip(&other.pixels) {
            for k in 0..3 {
                let d = a[k] as f64 - b[k] as f64;
                acc += d * d;
            }
        }
        Ok(acc / (3 * self.pixels.len()).max(1) as f64)
    }

    pub fn write_ppm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.pixels.len() * 3);
        for p in &self.pixels {
            for &c in p {
                buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ppm(r: &mut impl BufRead) -> Result<Image> {
        let magic = read_token(r)?;
        if magic != "P6" {
            return Err(Error::Format(format!("expected P6, found '{magic}'")));
        }
        let width = parse_usize(&read_token(r)?)?;
        let height = parse_usize(&read_token(r)?)?;
        let maxval = parse_usize(&read_token(r)?)?;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        let mut buf = vec![0u8; width * height * 3];
        r.read_exact(&mut buf)?;
        let pixels = buf
            .chunks_exact(3)
            .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
            .collect();
        Ok(Image { width, height, pixels })
    }

    /// Little-endian PFM. PFM stores the bottom row first.
    pub fn write_pfm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.pixels.len() * 12);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in self.get(x, y) {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pfm(r: &mut impl BufRead) -> Result<Image> {
        let magic = read_token(r)?;
        if magic != "PF" {
            return Err(Error::Format(format!("expected PF, found '{magic}'")));
        }
        let width = parse_usize(&read_token(r)?)?;
        let height = parse_usize(&read_token(r)?)?;
        let scale: f64 = read_token(r)?
            .parse()
            .map_err(|_| Error::Format("bad PFM scale".into()))?;
        let little = scale < 0.0;
        let mut buf = vec![0u8; width * height * 12];
        r.read_exact(&mut buf)?;
        let mut img = Image::new(width, height, [0.0; 3]);
        let mut vals = buf.chunks_exact(4).map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        });
        for y in (0..height).rev() {
            for x in 0..width {
                let c = [vals.next().unwrap(), vals.next().unwrap(), vals.next().unwrap()];
                img.set(x, y, c);
            }
        }
        Ok(img)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_ppm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
        Self::read_ppm(&mut BufReader::new(File::open(path)?))
    }

    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_pfm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_pfm(path: impl AsRef<Path>) -> Result<Image> {
        Self::read_pfm(&mut BufReader::new(File::open(path)?))
    }
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("bad integer '{s}'")))
}

/// Next whitespace-delimited header token; skips `#` comments. Consumes
/// exactly one whitespace byte after the token.
fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("truncated header".into()));
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut line = Vec::new();
                r.read_until(b'\n', &mut line)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            b => tok.push(b),
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ascii header".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        let mut img = Image::new(3, 2, [0.0; 3]);
        img.set(0, 0, [1.0, 0.0, 0.5]);
        img.set(2, 1, [0.25, 0.75, 1.0]);
        img
    }

    #[test]
    fn ppm_round_trip_is_quantized() {
        let img = sample();
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        let back = Image::read_ppm(&mut &buf[..]).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert!(img.mse(&back).unwrap() < 1e-5);
    }

    #[test]
    fn pfm_round_trip_is_exact() {
        let img = sample();
        let mut buf = Vec::new();
        img.write_pfm(&mut buf).unwrap();
        assert_eq!(Image::read_pfm(&mut &buf[..]).unwrap(), img);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(Image::read_ppm(&mut &b"P3\n1 1\n255\n"[..]).is_err());
    }
}
