//! File formats: 8-bit PNG for images and label maps, TXF1 for lossless tensors.
//!
//! TXF1 layout: magic `TXF1`, then height, width, channels as little-endian
//! `u32`, then `height * width * channels` little-endian `f32` samples in
//! row-major, channel-interleaved order.

use std::io::Cursor;
use std::path::Path;

use super::{Grid, GridError, LabelMap, Result};

pub const TXF1_MAGIC: &[u8; 4] = b"TXF1";
const TXF1_HEADER: usize = 16;
/// Upper bound on samples in a single container (1 GiB of f32 payload).
const MAX_SAMPLES: usize = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridFormat {
    Png8,
    TensorRaw,
}

impl GridFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(GridFormat::Png8),
            "txf1" | "txf" | "raw" => Some(GridFormat::TensorRaw),
            _ => None,
        }
    }
}

pub fn encode_txf1(g: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(TXF1_HEADER + g.len() * 4);
    out.extend_from_slice(TXF1_MAGIC);
    for d in [g.height(), g.width(), g.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in g.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes one TXF1 block from the front of `bytes`, returning it and the bytes consumed.
pub fn decode_txf1(bytes: &[u8]) -> Result<(Grid, usize)> {
    if bytes.len() < TXF1_HEADER {
        return Err(GridError::Malformed(format!(
            "TXF1 header needs {TXF1_HEADER} bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != TXF1_MAGIC {
        return Err(GridError::Malformed("bad TXF1 magic".into()));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let samples = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .filter(|&n| n <= MAX_SAMPLES)
        .ok_or_else(|| GridError::Malformed(format!("dimension overflow {h}x{w}x{c}")))?;
    let end = TXF1_HEADER + samples * 4;
    if bytes.len() < end {
        return Err(GridError::Malformed(format!(
            "TXF1 payload truncated: need {end} bytes, got {}",
            bytes.len()
        )));
    }
    let data = bytes[TXF1_HEADER..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((Grid::from_vec(h, w, c, data)?, end))
}

/// Encodes a 1, 3 or 4 channel grid as an 8-bit PNG; samples are clamped to `[0, 1]`.
pub fn encode_png8(g: &Grid) -> Result<Vec<u8>> {
    let color = match g.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => {
            return Err(GridError::InvalidArgument(format!(
                "png8 supports 1, 3 or 4 channels, got {c}"
            )))
        }
    };
    let bytes: Vec<u8> = g
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_png(g.width(), g.height(), color, None, &bytes)
}

pub fn decode_png8(bytes: &[u8]) -> Result<Grid> {
    let raw = read_png(bytes)?;
    let channels = match raw.color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            // Expand through the palette.
            let palette = raw.palette.as_deref().unwrap_or(&[]);
            let mut data = Vec::with_capacity(raw.pixels.len() * 3);
            for &i in &raw.pixels {
                let rgb = palette
                    .get(i as usize * 3..i as usize * 3 + 3)
                    .ok_or_else(|| GridError::Malformed(format!("palette index {i} missing")))?;
                data.extend(rgb.iter().map(|&b| b as f64 / 255.0));
            }
            return Grid::from_vec(raw.height, raw.width, 3, data);
        }
    };
    let data = raw.pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Grid::from_vec(raw.height, raw.width, channels, data)
}

/// Deterministic display color for class `id`.
pub fn label_color(id: u8) -> [u8; 3] {
    const BASE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    if (id as usize) < BASE.len() {
        return BASE[id as usize];
    }
    let h = (id as u32).wrapping_mul(2654435761);
    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
}

/// Indexed PNG whose palette index is the class id.
pub fn encode_label_png(labels: &LabelMap) -> Result<Vec<u8>> {
    let palette: Vec<u8> = (0..=labels.num_classes()).flat_map(label_color).collect();
    write_png(
        labels.width(),
        labels.height(),
        png::ColorType::Indexed,
        Some(palette),
        labels.labels(),
    )
}

/// Reads an indexed (or 8-bit grayscale) PNG as labels; the class count is the
/// largest label present unless the caller re-validates with
/// [`LabelMap::with_num_classes`].
pub fn decode_label_png(bytes: &[u8]) -> Result<LabelMap> {
    let raw = read_png(bytes)?;
    match raw.color {
        png::ColorType::Indexed | png::ColorType::Grayscale => {}
        other => {
            return Err(GridError::InvalidArgument(format!(
                "label png must be indexed or grayscale, got {other:?}"
            )))
        }
    }
    let k = raw.pixels.iter().copied().max().unwrap_or(0);
    LabelMap::new(raw.height, raw.width, k, raw.pixels)
}

pub fn read_grid(path: impl AsRef<Path>, format: GridFormat) -> Result<Grid> {
    let bytes = std::fs::read(path)?;
    match format {
        GridFormat::Png8 => decode_png8(&bytes),
        GridFormat::TensorRaw => {
            let (g, used) = decode_txf1(&bytes)?;
            if used != bytes.len() {
                return Err(GridError::Malformed(format!(
                    "{} trailing bytes after TXF1 block",
                    bytes.len() - used
                )));
            }
            Ok(g)
        }
    }
}

pub fn write_grid(path: impl AsRef<Path>, g: &Grid, format: GridFormat) -> Result<()> {
    let bytes = match format {
        GridFormat::Png8 => encode_png8(g)?,
        GridFormat::TensorRaw => encode_txf1(g),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_label_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_label_png(&std::fs::read(path)?)
}

pub fn write_label_png(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    std::fs::write(path, encode_label_png(labels)?)?;
    Ok(())
}

struct RawPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    pixels: Vec<u8>,
}

fn write_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    pixels: &[u8],
) -> Result<Vec<u8>> {
    let to_err = |e: png::EncodingError| GridError::InvalidArgument(e.to_string());
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().map_err(to_err)?;
        writer.write_image_data(pixels).map_err(to_err)?;
        writer.finish().map_err(to_err)?;
    }
    Ok(out)
}

fn read_png(bytes: &[u8]) -> Result<RawPng> {
    let to_err = |e: png::DecodingError| GridError::Malformed(e.to_string());
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(to_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| GridError::Malformed("png too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(to_err)?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(GridError::InvalidArgument(format!(
            "only 8-bit png is supported, got {:?}",
            frame.bit_depth
        )));
    }
    buf.truncate(frame.buffer_size());
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    Ok(RawPng {
        width: frame.width as usize,
        height: frame.height as usize,
        color: frame.color_type,
        palette,
        pixels: buf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn txf1_round_trip_is_bit_exact() {
        let mut rng = Rng::new(5);
        let g = Grid::standard_normal(16, 16, 3, &mut rng);
        let (back, used) = decode_txf1(&encode_txf1(&g)).unwrap();
        assert_eq!(used, 16 + 16 * 16 * 3 * 4);
        assert!(g
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.shape(), g.shape());
    }

    #[test]
    fn txf1_rejects_truncated_and_bad_magic() {
        let g = Grid::filled(4, 4, 1, 0.5);
        let bytes = encode_txf1(&g);
        assert!(matches!(
            decode_txf1(&bytes[..bytes.len() - 1]),
            Err(GridError::Malformed(_))
        ));
        assert!(matches!(
            decode_txf1(&bytes[..10]),
            Err(GridError::Malformed(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_txf1(&bad), Err(GridError::Malformed(_))));
    }

    #[test]
    fn txf1_rejects_dimension_overflow() {
        let mut bytes = TXF1_MAGIC.to_vec();
        for d in [u32::MAX, u32::MAX, 3u32] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        assert!(matches!(decode_txf1(&bytes), Err(GridError::Malformed(_))));
    }

    #[test]
    fn png8_round_trip_within_quantization() {
        let mut rng = Rng::new(2);
        let g = Grid::from_fn(9, 7, 3, |_, _, _| rng.uniform());
        let back = decode_png8(&encode_png8(&g).unwrap()).unwrap();
        assert_eq!(back.shape(), g.shape());
        assert!(g.max_abs_diff(&back).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn png8_rejects_two_channels() {
        assert!(encode_png8(&Grid::zeros(2, 2, 2)).is_err());
    }

    #[test]
    fn label_png_round_trip() {
        let labels: Vec<u8> = (0..12 * 10).map(|i| (i % 6) as u8).collect();
        let m = LabelMap::new(12, 10, 5, labels).unwrap();
        let back = decode_label_png(&encode_label_png(&m).unwrap()).unwrap();
        assert_eq!(back.labels(), m.labels());
        assert_eq!(back.num_classes(), 5);
    }

    #[test]
    fn truncated_png_is_malformed() {
        let bytes = encode_png8(&Grid::filled(8, 8, 1, 0.5)).unwrap();
        assert!(matches!(
            decode_png8(&bytes[..20]),
            Err(GridError::Malformed(_))
        ));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(
            GridFormat::from_path(Path::new("a.PNG")),
            Some(GridFormat::Png8)
        );
        assert_eq!(
            GridFormat::from_path(Path::new("a.txf1")),
            Some(GridFormat::TensorRaw)
        );
        assert_eq!(GridFormat::from_path(Path::new("a.jpg")), None);
    }
}
