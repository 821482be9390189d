//! Low-level file formats: PNG images and masks, raw `f32` maps, JSON, and
//! atomic writes.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dad_core::{Image, Map, MaskProvenance, Shape, TamperMask};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes to a temporary file in the same directory, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

/// Row-major little-endian `f32` values.
pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f64>> {
    ensure!(bytes.len() % 4 == 0, "f32 payload of {} bytes is not a multiple of 4", bytes.len());
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_map(path: &Path, map: &Map) -> Result<()> {
    write_atomic(path, &encode_f32(map.as_slice()))
}

pub fn read_map(path: &Path, shape: Shape) -> Result<Map> {
    let values = decode_f32(&read(path)?).with_context(|| format!("decoding {}", path.display()))?;
    ensure!(
        values.len() == shape.area(),
        "{} holds {} values, expected {} for {shape}",
        path.display(),
        values.len(),
        shape.area()
    );
    Ok(Map::from_vec(shape, values)?)
}

/// Channel-interleaved RGB image, rounded to 8 bits.
pub fn encode_png_rgb(image: &Image) -> Result<Vec<u8>> {
    let s = image.shape();
    let data: Vec<u8> = image.quantized().as_slice().iter().map(|&v| v as u8).collect();
    encode_png(s, png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

pub fn write_png_rgb(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_png_rgb(image)?)
}

pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let (shape, color, data) = decode_png(&read(path)?).with_context(|| format!("decoding {}", path.display()))?;
    let values: Vec<f64> = match color {
        png::ColorType::Rgb => data.iter().map(|&v| v as f64).collect(),
        png::ColorType::Rgba => data
            .chunks_exact(4)
            .flat_map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&v| [v as f64; 3]).collect(),
        other => bail!("{}: unsupported colour type {other:?}", path.display()),
    };
    Ok(Image::from_vec(shape, values)?)
}

/// One bit per pixel, set bits are flagged pixels.
pub fn encode_png_mask(mask: &TamperMask) -> Result<Vec<u8>> {
    let s = mask.shape();
    let stride = s.width.div_ceil(8);
    let mut data = vec![0u8; stride * s.height];
    for r in 0..s.height {
        for c in 0..s.width {
            if mask.get(r, c) {
                data[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    encode_png(s, png::ColorType::Grayscale, png::BitDepth::One, &data)
}

pub fn write_png_mask(path: &Path, mask: &TamperMask) -> Result<()> {
    write_atomic(path, &encode_png_mask(mask)?)
}

pub fn read_png_mask(path: &Path, provenance: MaskProvenance) -> Result<TamperMask> {
    let (shape, color, data) = decode_png(&read(path)?).with_context(|| format!("decoding {}", path.display()))?;
    let step = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => bail!("{}: unsupported mask colour type {other:?}", path.display()),
    };
    let flags = data.chunks_exact(step).map(|p| p[0] != 0).collect();
    Ok(TamperMask::from_flags(shape, flags, provenance)?)
}

fn encode_png(shape: Shape, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, shape.width as u32, shape.height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut w = enc.write_header()?;
        w.write_image_data(data)?;
        w.finish()?;
    }
    Ok(out)
}

/// Decodes to 8 bits per sample.
fn decode_png(bytes: &[u8]) -> Result<(Shape, png::ColorType, Vec<u8>)> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info()?;
    let size = reader.output_buffer_size().context("image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    ensure!(info.bit_depth == png::BitDepth::Eight, "unexpected bit depth {:?}", info.bit_depth);
    Ok((Shape::new(info.height as usize, info.width as usize), info.color_type, buf))
}
