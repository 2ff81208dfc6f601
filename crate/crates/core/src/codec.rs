//! PNG encodings for label maps and masks, plus serde adapters that embed
//! them in JSON as base64.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{DynamicImage, GrayImage, ImageFormat};
use thiserror::Error;

use crate::geometry::{Grid, LabelMap, Mask};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("label {0} does not fit in one byte (at most 255 labels per map)")]
    LabelOverflow(u32),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
}

/// Encodes a label map as an 8-bit grayscale PNG, one byte per label.
pub fn encode_label_png(labels: &LabelMap) -> Result<Vec<u8>, CodecError> {
    if let Some(&bad) = labels.as_slice().iter().find(|&&l| l > 255) {
        return Err(CodecError::LabelOverflow(bad));
    }
    let bytes: Vec<u8> = labels.as_slice().iter().map(|&l| l as u8).collect();
    let img = GrayImage::from_raw(labels.width() as u32, labels.height() as u32, bytes)
        .expect("buffer sized from grid");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes a grayscale PNG (8 or 16 bit) into a label map.
pub fn decode_label_png(bytes: &[u8]) -> Result<LabelMap, CodecError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(match img {
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            Grid::from_vec(w as usize, h as usize, g.pixels().map(|p| u32::from(p.0[0])).collect())
        }
        other => {
            let g = other.to_luma8();
            let (w, h) = g.dimensions();
            Grid::from_vec(w as usize, h as usize, g.pixels().map(|p| u32::from(p.0[0])).collect())
        }
    }
    .expect("buffer sized from image"))
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>, CodecError> {
    encode_label_png(&mask.map(|&b| u32::from(b) * 255))
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask, CodecError> {
    Ok(decode_label_png(bytes)?.map(|&v| v != 0))
}

/// `#[serde(with)]` adapter: label map as base64 PNG.
pub mod label_png {
    use super::*;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(labels: &LabelMap, s: S) -> Result<S::Ok, S::Error> {
        let png = encode_label_png(labels).map_err(serde::ser::Error::custom)?;
        s.serialize_str(&STANDARD.encode(png))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LabelMap, D::Error> {
        let text = String::deserialize(d)?;
        let png = STANDARD.decode(text).map_err(de::Error::custom)?;
        decode_label_png(&png).map_err(de::Error::custom)
    }
}

/// `#[serde(with)]` adapter: optional mask as base64 PNG.
pub mod opt_mask_png {
    use super::*;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mask: &Option<Mask>, s: S) -> Result<S::Ok, S::Error> {
        match mask {
            Some(m) => {
                let png = encode_mask_png(m).map_err(serde::ser::Error::custom)?;
                s.serialize_some(&STANDARD.encode(png))
            }
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Mask>, D::Error> {
        match Option::<String>::deserialize(d)? {
            Some(text) => {
                let png = STANDARD.decode(text).map_err(de::Error::custom)?;
                decode_mask_png(&png).map(Some).map_err(de::Error::custom)
            }
            None => Ok(None),
        }
    }
}

/// `#[serde(with)]` adapter: small grids as nested arrays of rows.
pub mod label_rows {
    use super::*;
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(labels: &LabelMap, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[u32]> = labels.rows().collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LabelMap, D::Error> {
        let rows = Vec::<Vec<u32>>::deserialize(d)?;
        Grid::from_rows(rows).ok_or_else(|| de::Error::custom("ragged rows"))
    }
}
