//! Highlight overlay rendering.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use thiserror::Error;

use crate::geometry::{Bbox, Mask};

pub const OVERLAY_OPACITY: f32 = 0.45;
pub const HIGHLIGHT_COLOR: [u8; 3] = [30, 144, 255];
pub const BOX_COLOR: [u8; 3] = [255, 0, 0];
pub const BOX_THICKNESS: u32 = 2;
/// Highlights covering less than this share of the image also get a box.
pub const SMALL_HIGHLIGHT_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("undecodable image: {0}")]
    Decode(image::ImageError),
    #[error("mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    DimensionMismatch {
        mask_w: usize,
        mask_h: usize,
        image_w: u32,
        image_h: u32,
    },
    #[error("png encoding failed: {0}")]
    Encode(image::ImageError),
}

/// What gets drawn, decided before touching pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlayPlan {
    pub blend_mask: bool,
    pub red_box: Option<Bbox>,
}

pub fn plan_overlay(mask: Option<&Mask>, fallback_box: Option<Bbox>) -> OverlayPlan {
    let mask = mask.filter(|m| m.count() > 0);
    match mask {
        Some(m) => {
            let image_area = (m.width() * m.height()) as f64;
            let small = (m.count() as f64) < SMALL_HIGHLIGHT_FRACTION * image_area;
            OverlayPlan {
                blend_mask: true,
                red_box: if small { m.bbox() } else { None },
            }
        }
        None => OverlayPlan {
            blend_mask: false,
            red_box: fallback_box,
        },
    }
}

fn blend(src: u8, over: u8) -> u8 {
    let v = f32::from(src) * (1.0 - OVERLAY_OPACITY) + f32::from(over) * OVERLAY_OPACITY;
    v.round().clamp(0.0, 255.0) as u8
}

fn draw_box(img: &mut RgbImage, b: Bbox) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    // grow outward so the box frames the highlight instead of covering it
    let x1 = b.x1.saturating_sub(BOX_THICKNESS);
    let y1 = b.y1.saturating_sub(BOX_THICKNESS);
    let x2 = (b.x2 + BOX_THICKNESS).min(w - 1);
    let y2 = (b.y2 + BOX_THICKNESS).min(h - 1);
    for y in y1..=y2 {
        for x in x1..=x2 {
            let on_edge = x < x1 + BOX_THICKNESS
                || x + BOX_THICKNESS > x2
                || y < y1 + BOX_THICKNESS
                || y + BOX_THICKNESS > y2;
            if on_edge {
                img.put_pixel(x, y, Rgb(BOX_COLOR));
            }
        }
    }
}

/// Blends the highlight over `image` and adds the red box where the plan
/// calls for one.
pub fn compose_overlay(
    image: &RgbImage,
    mask: Option<&Mask>,
    fallback_box: Option<Bbox>,
) -> Result<RgbImage, RenderError> {
    let (w, h) = image.dimensions();
    if let Some(m) = mask {
        if m.width() != w as usize || m.height() != h as usize {
            return Err(RenderError::DimensionMismatch {
                mask_w: m.width(),
                mask_h: m.height(),
                image_w: w,
                image_h: h,
            });
        }
    }
    let plan = plan_overlay(mask, fallback_box);
    let mut out = image.clone();
    if let (true, Some(m)) = (plan.blend_mask, mask) {
        for (x, y, &on) in m.iter_xy() {
            if on {
                let p = out.get_pixel_mut(x as u32, y as u32);
                for (channel, over) in p.0.iter_mut().zip(HIGHLIGHT_COLOR) {
                    *channel = blend(*channel, over);
                }
            }
        }
    }
    if let Some(b) = plan.red_box {
        draw_box(&mut out, b);
    }
    Ok(out)
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, RenderError> {
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .map_err(RenderError::Encode)?;
    Ok(out.into_inner())
}

/// Decodes `image`, renders the overlay and returns it as PNG.
pub fn render_overlay(
    image: &[u8],
    mask: Option<&Mask>,
    fallback_box: Option<Bbox>,
) -> Result<Vec<u8>, RenderError> {
    let img = image::load_from_memory(image)
        .map_err(RenderError::Decode)?
        .to_rgb8();
    encode_png(&compose_overlay(&img, mask, fallback_box)?)
}
