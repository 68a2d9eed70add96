//! Binary 8-bit PGM (`P5`, max value 255).
//!
//! Writing always emits the header `P5\n{W} {H}\n255\n`. Reading accepts any
//! whitespace and `#` comments inside the header.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// `floor(v * 255 + 0.5)` after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn dequantize(p: u8) -> f64 {
    f64::from(p) / 255.0
}

pub fn write_pgm<W: Write>(mut out: W, img: &GrayImage) -> Result<()> {
    if img.pixels.len() != img.width * img.height {
        return Err(Error::InvalidShape(format!(
            "{} pixels for a {}x{} image",
            img.pixels.len(),
            img.width,
            img.height
        )));
    }
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)?;
    out.write_all(&img.pixels)?;
    Ok(())
}

fn format_err(msg: &str) -> Error {
    Error::Format(format!("pgm: {msg}"))
}

/// Reads one whitespace-delimited header token, skipping comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(format_err("truncated header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn read_pgm<R: Read>(mut input: R) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    if header_token(&bytes, &mut pos)? != "P5" {
        return Err(format_err("not a binary PGM (P5)"));
    }
    let mut number = |what: &str| -> Result<usize> {
        header_token(&bytes, &mut pos)?.parse().map_err(|_| format_err(&format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("max value")?;
    if width == 0 || height == 0 {
        return Err(format_err("zero dimension"));
    }
    if maxval != 255 {
        return Err(format_err(&format!("max value {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("truncated header"));
    }
    let raster = &bytes[pos + 1..];
    if raster.len() != width * height {
        return Err(format_err(&format!("expected {} raster bytes, found {}", width * height, raster.len())));
    }
    Ok(GrayImage { width, height, pixels: raster.to_vec() })
}

/// Quantizes a `1×H×W` or `H×W` image.
pub fn image_from_tensor(t: &Tensor) -> Result<GrayImage> {
    let (height, width) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::InvalidShape(format!("expected a 1xHxW image, got {s:?}"))),
    };
    Ok(GrayImage { width, height, pixels: t.data().iter().map(|&v| quantize(v)).collect() })
}

/// `1×H×W` tensor with values `p / 255`.
pub fn tensor_from_image(img: &GrayImage) -> Tensor {
    Tensor::new(&[1, img.height, img.width], img.pixels.iter().map(|&p| dequantize(p)).collect())
        .expect("dimensions validated on read")
}

/// Masks are stored as 0 / 255.
pub fn image_from_mask(m: &Mask) -> GrayImage {
    GrayImage { width: m.width(), height: m.height(), pixels: m.data().iter().map(|&v| v * 255).collect() }
}

pub fn mask_from_image(img: &GrayImage) -> Result<Mask> {
    let data = img
        .pixels
        .iter()
        .map(|&p| match p {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::InvalidInput(format!("mask pixel value {other}, expected 0 or 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(img.height, img.width, data)
}

pub fn save_image(path: &std::path::Path, img: &GrayImage) -> Result<()> {
    let mut buf = Vec::with_capacity(img.pixels.len() + 16);
    write_pgm(&mut buf, img)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_image(path: &std::path::Path) -> Result<GrayImage> {
    read_pgm(std::fs::File::open(path)?)
}
