//! Annotated-image output: class-colored box outlines with a small bitmap
//! caption showing `class confidence`.

use crate::head::Detection;
use image::{Rgb, RgbImage};

/// Fixed palette, one color per class id (wrapping).
pub fn class_color(class_id: usize) -> Rgb<u8> {
    const PALETTE: [[u8; 3]; 6] = [
        [230, 90, 40],
        [40, 120, 230],
        [40, 200, 90],
        [230, 200, 40],
        [180, 60, 200],
        [60, 200, 200],
    ];
    Rgb(PALETTE[class_id % PALETTE.len()])
}

fn put_safe(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Draw a rectangle outline, clipped to the image.
pub fn draw_rect(img: &mut RgbImage, corners: [f64; 4], color: Rgb<u8>, thickness: usize) {
    let [x1, y1, x2, y2] = corners.map(|v| v.round() as i64);
    for t in 0..thickness as i64 {
        for x in x1..=x2 {
            put_safe(img, x, y1 + t, color);
            put_safe(img, x, y2 - t, color);
        }
        for y in y1..=y2 {
            put_safe(img, x1 + t, y, color);
            put_safe(img, x2 - t, y, color);
        }
    }
}

// 5x7 glyphs for the caption characters.
fn glyph(c: char) -> Option<[u8; 7]> {
    // each row is 5 bits, most significant bit on the left
    let rows = match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ' ' => [0x00; 7],
        _ => return None,
    };
    Some(rows)
}

/// Draw a caption string (digits, dot, space) at the given top-left corner.
pub fn draw_text(img: &mut RgbImage, text: &str, x: i64, y: i64, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if bits & (0x10 >> rx) != 0 {
                        put_safe(img, cx + rx as i64, y + ry as i64, color);
                    }
                }
            }
        }
        cx += 6;
    }
}

/// Copy the image and draw every detection: a class-colored outline plus a
/// `class confidence` caption anchored inside the box.
pub fn annotate(image: &RgbImage, detections: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    for d in detections {
        let color = class_color(d.class_id);
        draw_rect(&mut out, [d.x1, d.y1, d.x2, d.y2], color, 2);
        let caption = format!("{} {:.2}", d.class_id, d.confidence);
        let tx = d.x1.round() as i64 + 3;
        let ty = d.y1.round() as i64 + 3;
        draw_text(&mut out, &caption, tx, ty, color);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_stays_within_bounds_and_is_deterministic() {
        let img = RgbImage::from_pixel(48, 48, Rgb([10, 10, 10]));
        let dets = vec![
            Detection {
                class_id: 0,
                confidence: 0.87,
                x1: -5.0,
                y1: -5.0,
                x2: 20.0,
                y2: 20.0,
            },
            Detection {
                class_id: 1,
                confidence: 0.5,
                x1: 30.0,
                y1: 30.0,
                x2: 60.0,
                y2: 60.0,
            },
        ];
        // out-of-frame coordinates must not panic
        let a = annotate(&img, &dets);
        let b = annotate(&img, &dets);
        assert_eq!(a.as_raw(), b.as_raw());
        assert_eq!(a.dimensions(), (48, 48));
        // something was drawn
        assert_ne!(a.as_raw(), img.as_raw());
    }

    #[test]
    fn empty_detection_list_copies_the_image() {
        let img = RgbImage::from_pixel(16, 16, Rgb([7, 8, 9]));
        let out = annotate(&img, &[]);
        assert_eq!(out.as_raw(), img.as_raw());
    }
}
