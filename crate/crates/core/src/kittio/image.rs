use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{width}x{height} raster needs {} bytes, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let rgb = color.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, rgb }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bytes(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, u: usize, v: usize) -> [u8; 3] {
        let o = (v * self.width + u) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, c: [u8; 3]) {
        let o = (v * self.width + u) * 3;
        self.rgb[o..o + 3].copy_from_slice(&c);
    }

    /// Channel values scaled to `[0, 1]`.
    pub fn pixel_normalized(&self, u: usize, v: usize) -> [f64; 3] {
        self.pixel(u, v).map(|c| c as f64 / 255.0)
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Binary PPM (`P6`, maxval ≤ 255).
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<ImageRaster> {
    let bad = |m: &str| Error::format(path, None, m.to_string());
    let mut pos = 0;
    if next_token(bytes, &mut pos) != Some(b"P6") {
        return Err(bad("not a binary PPM (P6) file"));
    }
    let mut num = |what: &str| -> Result<usize> {
        next_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| bad(&format!("bad PPM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated PPM raster"));
    }
    let mut rgb = bytes[pos..pos + need].to_vec();
    if maxval != 255 {
        for c in &mut rgb {
            *c = ((*c as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8;
        }
    }
    ImageRaster::new(width, height, rgb)
}

pub fn load_image(path: &Path) -> Result<ImageRaster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes, path)
}

pub fn encode_ppm(img: &ImageRaster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

pub fn write_image(img: &ImageRaster, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
