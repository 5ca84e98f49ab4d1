//! In-memory image tensors and binary PNM (PGM/PPM) input and output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Planar image: `data[(c * height + y) * width + x]`, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Rec. 601 luma; a single-channel image passes through.
    pub fn luma(&self) -> Vec<f64> {
        let n = self.width * self.height;
        match self.channels {
            1 => self.data.clone(),
            3 => {
                let (r, rest) = self.data.split_at(n);
                let (g, b) = rest.split_at(n);
                (0..n)
                    .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                    .collect()
            }
            c => panic!("luma undefined for {c} channels"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a binary PGM/PPM file (bad magic {0:?})")]
    BadMagic(String),
    #[error("malformed header")]
    BadHeader,
    #[error("maxval {0} unsupported (want 1..=65535)")]
    BadMaxval(u32),
    #[error("file truncated")]
    Truncated,
}

/// Decoded PNM pixels, always widened to u16.
#[derive(Clone, Debug, PartialEq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub data: Vec<u16>,
}

impl PnmImage {
    /// To a planar float image with values scaled onto [0, 1].
    pub fn to_image(&self) -> Image {
        let mut img = Image::zeros(self.width, self.height, self.channels);
        let m = f64::from(self.maxval);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let s = self.data[(y * self.width + x) * self.channels + c];
                    img.set(c, x, y, f64::from(s) / m);
                }
            }
        }
        img
    }
}

pub fn quantize(v: f64, maxval: u32) -> u16 {
    (v.clamp(0.0, 1.0) * f64::from(maxval)).round() as u16
}

fn write_header<W: Write>(w: &mut W, magic: &str, width: usize, height: usize, maxval: u32) -> std::io::Result<()> {
    write!(w, "{magic}\n{width} {height}\n{maxval}\n")
}

/// Binary 8-bit grayscale (P5, maxval 255).
pub fn write_pgm8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), PnmError> {
    assert_eq!(data.len(), width * height);
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, "P5", width, height, 255)?;
    w.write_all(data)?;
    Ok(())
}

/// Binary 16-bit grayscale (P5, maxval 65535), most significant byte first.
pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<(), PnmError> {
    assert_eq!(data.len(), width * height);
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, "P5", width, height, 65535)?;
    let mut bytes = Vec::with_capacity(data.len() * 2);
    for &s in data {
        bytes.extend_from_slice(&s.to_be_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Binary 8-bit RGB (P6, maxval 255), samples interleaved.
pub fn write_ppm8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), PnmError> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, "P6", width, height, 255)?;
    w.write_all(rgb)?;
    Ok(())
}

/// Writes a planar float image as PPM (3 channels) or 8-bit PGM (1 channel).
pub fn write_image(path: &Path, img: &Image) -> Result<(), PnmError> {
    match img.channels {
        1 => {
            let data: Vec<u8> = (0..img.width * img.height)
                .map(|i| quantize(img.data[i], 255) as u8)
                .collect();
            write_pgm8(path, img.width, img.height, &data)
        }
        3 => {
            let mut rgb = Vec::with_capacity(img.width * img.height * 3);
            for y in 0..img.height {
                for x in 0..img.width {
                    for c in 0..3 {
                        rgb.push(quantize(img.get(c, x, y), 255) as u8);
                    }
                }
            }
            write_ppm8(path, img.width, img.height, &rgb)
        }
        c => panic!("cannot write {c}-channel image as PNM"),
    }
}

/// Next whitespace-delimited token, skipping `#` comments to end of line.
fn next_token<R: Read>(r: &mut R) -> Result<String, PnmError> {
    let mut byte = [0u8; 1];
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(PnmError::Truncated);
            }
            return Ok(tok);
        }
        let ch = byte[0];
        if in_comment {
            if ch == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match ch {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            _ => tok.push(ch as char),
        }
    }
}

/// Reads a binary P5 or P6 file of either sample depth.
pub fn read_pnm(path: &Path) -> Result<PnmImage, PnmError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = next_token(&mut r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(PnmError::BadMagic(magic)),
    };
    let parse = |t: String| t.parse::<u32>().map_err(|_| PnmError::BadHeader);
    let width = parse(next_token(&mut r)?)? as usize;
    let height = parse(next_token(&mut r)?)? as usize;
    let maxval = parse(next_token(&mut r)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(PnmError::BadMaxval(maxval));
    }
    // The single whitespace byte after maxval was already consumed by the
    // tokenizer; raster bytes begin here.
    let samples = width * height * channels;
    let wide = maxval > 255;
    let mut raw = vec![0u8; samples * if wide { 2 } else { 1 }];
    r.read_exact(&mut raw).map_err(|_| PnmError::Truncated)?;
    let data = if wide {
        raw.chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raw.iter().map(|&b| u16::from(b)).collect()
    };
    Ok(PnmImage {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("roam-imageio-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pgm8_roundtrip_preserves_bytes() {
        let path = tmp("g8.pgm");
        let data: Vec<u8> = (0..30u8).map(|i| i.wrapping_mul(9)).collect();
        write_pgm8(&path, 6, 5, &data).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.width, 6);
        assert_eq!(back.height, 5);
        assert_eq!(back.channels, 1);
        assert_eq!(back.maxval, 255);
        assert_eq!(back.data, data.iter().map(|&b| u16::from(b)).collect::<Vec<_>>());
    }

    #[test]
    fn pgm16_roundtrip_and_big_endian_raster() {
        let path = tmp("g16.pgm");
        let data = vec![0x0102u16, 0xFFEE, 0x0000, 0xABCD];
        write_pgm16(&path, 2, 2, &data).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.maxval, 65535);
        assert_eq!(back.data, data);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .unwrap()
            .read_to_end(&mut bytes)
            .unwrap();
        // Raster follows the header; first sample 0x0102 must be MSB-first.
        let raster = &bytes[bytes.len() - 8..];
        assert_eq!(&raster[..2], &[0x01, 0x02]);
    }

    #[test]
    fn ppm_roundtrip_preserves_interleaving() {
        let path = tmp("c8.ppm");
        let rgb: Vec<u8> = (0..24u8).collect();
        write_ppm8(&path, 4, 2, &rgb).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.channels, 3);
        assert_eq!(back.data, rgb.iter().map(|&b| u16::from(b)).collect::<Vec<_>>());
    }

    #[test]
    fn reader_skips_comments_and_odd_whitespace() {
        let path = tmp("commented.pgm");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(b"P5 # magic\n# a comment line\n 3\t2 #dims\n255\n").unwrap();
        f.write_all(&[1, 2, 3, 4, 5, 6]).unwrap();
        drop(f);
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn truncated_and_bad_magic_are_rejected() {
        let path = tmp("short.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nab").unwrap();
        assert!(matches!(read_pnm(&path), Err(PnmError::Truncated)));
        let path2 = tmp("text.pgm");
        std::fs::write(&path2, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pnm(&path2), Err(PnmError::BadMagic(_))));
    }

    #[test]
    fn float_image_writer_picks_format_by_channels() {
        let mut g = Image::zeros(2, 2, 1);
        g.set(0, 0, 0, 1.0);
        g.set(0, 1, 1, 0.5);
        let path = tmp("auto.pgm");
        write_image(&path, &g).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.channels, 1);
        assert_eq!(back.data[0], 255);
        assert_eq!(back.data[3], 128);

        let mut c = Image::zeros(2, 1, 3);
        c.set(0, 0, 0, 1.0);
        c.set(2, 1, 0, 1.0);
        let path = tmp("auto.ppm");
        write_image(&path, &c).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.channels, 3);
        assert_eq!(back.data, vec![255, 0, 0, 0, 0, 255]);
    }

    #[test]
    fn luma_weights_match_rec601() {
        let mut c = Image::zeros(1, 1, 3);
        c.set(0, 0, 0, 1.0);
        assert!((c.luma()[0] - 0.299).abs() < 1e-12);
        c.set(0, 0, 0, 0.0);
        c.set(1, 0, 0, 1.0);
        assert!((c.luma()[0] - 0.587).abs() < 1e-12);
    }
}
