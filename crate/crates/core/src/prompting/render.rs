use std::io::Cursor;

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Keypoint, MarkCollision, MarkEntry, MarkRegistry, PromptError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkStyle {
    pub radius: u32,
    pub outline_width: u32,
    pub fill: [u8; 3],
    pub outline: [u8; 3],
    pub text: [u8; 3],
}

impl Default for MarkStyle {
    fn default() -> Self {
        Self { radius: 14, outline_width: 2, fill: [24, 24, 24], outline: [255, 255, 255], text: [255, 255, 255] }
    }
}

// 3x5 digit glyphs, one row per entry, most significant bit on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b001, 0b001, 0b001],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_disk(img: &mut RgbImage, cu: f64, cv: f64, style: &MarkStyle) {
    let r = style.radius as f64;
    let inner = (r - style.outline_width as f64).max(0.0);
    let (x0, x1) = ((cu - r).floor() as i64, (cu + r).ceil() as i64);
    let (y0, y1) = ((cv - r).floor() as i64, (cv + r).ceil() as i64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = (x as f64 + 0.5 - cu).hypot(y as f64 + 0.5 - cv);
            if d <= inner {
                put(img, x, y, Rgb(style.fill));
            } else if d <= r {
                put(img, x, y, Rgb(style.outline));
            }
        }
    }
}

fn draw_number(img: &mut RgbImage, cu: f64, cv: f64, n: u32, style: &MarkStyle) {
    let scale = ((style.radius as f64 * 0.9 / 5.0).floor() as i64).max(1);
    let digits: Vec<usize> = n.to_string().bytes().map(|b| (b - b'0') as usize).collect();
    let glyph_w = 3 * scale;
    let gap = scale;
    let total_w = digits.len() as i64 * glyph_w + (digits.len() as i64 - 1) * gap;
    let left = (cu - total_w as f64 / 2.0).round() as i64;
    let top = (cv - 5.0 * scale as f64 / 2.0).round() as i64;
    for (i, d) in digits.iter().enumerate() {
        let gx = left + i as i64 * (glyph_w + gap);
        for (row, bits) in DIGITS[*d].iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        put(img, gx + col * scale + dx, top + row as i64 * scale + dy, Rgb(style.text));
                    }
                }
            }
        }
    }
}

/// Draws one numbered marker per keypoint onto a copy of `image`.
pub fn render_marks(
    image: &RgbImage,
    keypoints: &[Keypoint],
    style: &MarkStyle,
) -> Result<(RgbImage, MarkRegistry), PromptError> {
    if keypoints.is_empty() {
        return Err(PromptError::EmptyKeypoints);
    }
    let (w, h) = image.dimensions();
    let mut ordered: Vec<&Keypoint> = keypoints.iter().collect();
    ordered.sort_by_key(|k| k.mark_id);
    let ids: Vec<u32> = ordered.iter().map(|k| k.mark_id).collect();
    if ids.iter().enumerate().any(|(i, m)| *m != i as u32 + 1) {
        return Err(PromptError::InvalidMarks { expected: ids.len(), got: ids });
    }
    for k in &ordered {
        let p = k.point;
        if !(p.u >= 0.0 && p.v >= 0.0 && p.u < w as f64 && p.v < h as f64) {
            return Err(PromptError::OutOfBounds { mark_id: k.mark_id, u: p.u, v: p.v, width: w, height: h });
        }
    }

    let mut out = image.clone();
    for k in &ordered {
        draw_disk(&mut out, k.point.u, k.point.v, style);
        draw_number(&mut out, k.point.u, k.point.v, k.mark_id, style);
    }

    let mut collisions = Vec::new();
    for (i, a) in ordered.iter().enumerate() {
        for b in &ordered[i + 1..] {
            let distance = a.point.distance(&b.point);
            if distance < style.radius as f64 {
                collisions.push(MarkCollision { first: a.mark_id, second: b.mark_id, distance });
            }
        }
    }
    let registry = MarkRegistry {
        width: w,
        height: h,
        marks: ordered
            .iter()
            .map(|k| MarkEntry { mark_id: k.mark_id, point: k.point, object_hint: k.object_hint })
            .collect(),
        collisions,
    };
    Ok((out, registry))
}

pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    PngEncoder::new(&mut buf)
        .write_image(image.as_raw(), image.width(), image.height(), image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}
