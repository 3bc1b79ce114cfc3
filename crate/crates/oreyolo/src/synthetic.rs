//! Synthetic two-class dataset generator: warm-hued speckled ellipses
//! (class 0) and cool-hued smooth ellipses (class 1) rendered on a textured
//! gray background with exact bounding boxes. Fully seed-deterministic.

use crate::data::{BoxLabel, DatasetSample};
use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Blob {
    class_id: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
    base: [f64; 3],
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    /// Loose pixel bounding box of the rotated ellipse.
    fn extent(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = ((self.rx * c).powi(2) + (self.ry * s).powi(2)).sqrt();
        let ey = ((self.rx * s).powi(2) + (self.ry * c).powi(2)).sqrt();
        (ex, ey)
    }
}

fn boxes_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

pub(crate) struct RenderedSample {
    pub image: RgbImage,
    pub labels: Vec<BoxLabel>,
    /// Per-blob pixel masks, same order as `labels`; consumed by the
    /// box-tightness checks.
    #[cfg_attr(not(test), allow(dead_code))]
    pub masks: Vec<Vec<bool>>,
}

pub(crate) fn render_sample(size: usize, rng: &mut ChaCha8Rng) -> RenderedSample {
    let s = size as f64;
    // textured gray background with a mild illumination gradient
    let base_gray: f64 = rng.gen_range(100.0..140.0);
    let grad: f64 = rng.gen_range(-20.0..20.0);
    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let shade = base_gray + grad * (x as f64 + y as f64) / (2.0 * s)
                + rng.gen_range(-8.0..8.0);
            let v = shade.round().clamp(0.0, 255.0) as u8;
            image.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
        }
    }

    // sample non-overlapping blobs, one to ten per image
    let count = rng.gen_range(1..=10usize);
    let mut blobs: Vec<Blob> = Vec::new();
    let mut taken: Vec<(f64, f64, f64, f64)> = Vec::new();
    for _ in 0..count {
        for _try in 0..60 {
            let class_id = rng.gen_range(0..2usize);
            let rx = rng.gen_range(0.05 * s..0.14 * s);
            let ry = rng.gen_range(0.05 * s..0.14 * s);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let blob = Blob {
                class_id,
                cx: 0.0,
                cy: 0.0,
                rx,
                ry,
                theta,
                base: if class_id == 0 {
                    [
                        rng.gen_range(150.0..205.0),
                        rng.gen_range(90.0..130.0),
                        rng.gen_range(35.0..70.0),
                    ]
                } else {
                    [
                        rng.gen_range(35.0..70.0),
                        rng.gen_range(90.0..130.0),
                        rng.gen_range(150.0..205.0),
                    ]
                },
            };
            let (ex, ey) = blob.extent();
            if 2.0 * ex >= s - 4.0 || 2.0 * ey >= s - 4.0 {
                continue;
            }
            let cx = rng.gen_range(ex + 2.0..s - ex - 2.0);
            let cy = rng.gen_range(ey + 2.0..s - ey - 2.0);
            let rect = (cx - ex, cy - ey, cx + ex, cy + ey);
            if taken.iter().any(|t| boxes_overlap(*t, rect)) {
                continue;
            }
            taken.push(rect);
            blobs.push(Blob { cx, cy, ..blob });
            break;
        }
    }

    // paint blobs and record exact pixel bounds
    let mut labels = Vec::with_capacity(blobs.len());
    let mut masks = Vec::with_capacity(blobs.len());
    for blob in &blobs {
        let (ex, ey) = blob.extent();
        let x_lo = ((blob.cx - ex).floor() as isize).max(0) as usize;
        let x_hi = ((blob.cx + ex).ceil() as isize).min(size as isize - 1) as usize;
        let y_lo = ((blob.cy - ey).floor() as isize).max(0) as usize;
        let y_hi = ((blob.cy + ey).ceil() as isize).min(size as isize - 1) as usize;
        let mut mask = vec![false; size * size];
        let (mut px_lo, mut px_hi, mut py_lo, mut py_hi) = (usize::MAX, 0usize, usize::MAX, 0usize);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                if !blob.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    continue;
                }
                mask[y * size + x] = true;
                px_lo = px_lo.min(x);
                px_hi = px_hi.max(x);
                py_lo = py_lo.min(y);
                py_hi = py_hi.max(y);
                let mut color = blob.base;
                if blob.class_id == 0 {
                    // speckled texture
                    let speckle: f64 = rng.gen_range(-40.0..40.0);
                    for c in color.iter_mut() {
                        *c += speckle + rng.gen_range(-12.0..12.0);
                    }
                } else {
                    // smooth radial shading
                    let d = ((x as f64 + 0.5 - blob.cx) / blob.rx.max(blob.ry)).hypot(
                        (y as f64 + 0.5 - blob.cy) / blob.rx.max(blob.ry),
                    );
                    for c in color.iter_mut() {
                        *c *= 1.0 - 0.25 * d.min(1.0);
                    }
                }
                image.put_pixel(
                    x as u32,
                    y as u32,
                    Rgb([
                        color[0].round().clamp(0.0, 255.0) as u8,
                        color[1].round().clamp(0.0, 255.0) as u8,
                        color[2].round().clamp(0.0, 255.0) as u8,
                    ]),
                );
            }
        }
        if px_lo == usize::MAX {
            continue; // degenerate blob rendered no pixels
        }
        // tight box over painted pixels (pixel extents, inclusive)
        let x1 = px_lo as f64;
        let y1 = py_lo as f64;
        let x2 = (px_hi + 1) as f64;
        let y2 = (py_hi + 1) as f64;
        labels.push(BoxLabel {
            class_id: blob.class_id,
            cx: (x1 + x2) / 2.0 / s,
            cy: (y1 + y2) / 2.0 / s,
            w: (x2 - x1) / s,
            h: (y2 - y1) / s,
        });
        masks.push(mask);
    }

    RenderedSample {
        image,
        labels,
        masks,
    }
}

/// Generate `n` synthetic samples of `image_size` pixels square. The same
/// seed always produces the same samples.
pub fn generate_synthetic(n: usize, seed: u64, image_size: usize) -> Result<Vec<DatasetSample>> {
    if n == 0 {
        return Err(Error::invalid_config("sample count must be >= 1"));
    }
    if image_size < 32 {
        return Err(Error::invalid_config("image size must be >= 32"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let rendered = render_sample(image_size, &mut rng);
        out.push(DatasetSample {
            image: rendered.image,
            labels: rendered.labels,
            id: format!("synth_{i:05}"),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_synthetic(3, 99, 96).unwrap();
        let b = generate_synthetic(3, 99, 96).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image.as_raw(), y.image.as_raw());
            assert_eq!(x.labels, y.labels);
        }
        let c = generate_synthetic(3, 100, 96).unwrap();
        assert_ne!(
            a[0].image.as_raw(),
            c[0].image.as_raw(),
            "different seeds should give different images"
        );
    }

    #[test]
    fn blob_count_is_between_one_and_ten() {
        for (i, s) in generate_synthetic(20, 5, 96).unwrap().iter().enumerate() {
            assert!(
                (1..=10).contains(&s.labels.len()),
                "sample {i} has {} blobs",
                s.labels.len()
            );
            s.validate().unwrap();
        }
    }

    #[test]
    fn boxes_tightly_contain_their_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let size = 96usize;
            let rendered = render_sample(size, &mut rng);
            for (label, mask) in rendered.labels.iter().zip(rendered.masks.iter()) {
                // pixel-scan bounds of the mask
                let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) =
                    (usize::MAX, 0usize, usize::MAX, 0usize);
                for y in 0..size {
                    for x in 0..size {
                        if mask[y * size + x] {
                            x_lo = x_lo.min(x);
                            x_hi = x_hi.max(x);
                            y_lo = y_lo.min(y);
                            y_hi = y_hi.max(y);
                        }
                    }
                }
                let s = size as f64;
                let want = BoxLabel {
                    class_id: label.class_id,
                    cx: (x_lo as f64 + (x_hi + 1) as f64) / 2.0 / s,
                    cy: (y_lo as f64 + (y_hi + 1) as f64) / 2.0 / s,
                    w: ((x_hi + 1 - x_lo) as f64) / s,
                    h: ((y_hi + 1 - y_lo) as f64) / s,
                };
                assert!((label.cx - want.cx).abs() < 1e-12);
                assert!((label.cy - want.cy).abs() < 1e-12);
                assert!((label.w - want.w).abs() < 1e-12);
                assert!((label.h - want.h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classes_have_distinct_hues() {
        let samples = generate_synthetic(10, 3, 96).unwrap();
        for s in &samples {
            for l in &s.labels {
                let px = ((l.cx * 96.0) as u32).min(95);
                let py = ((l.cy * 96.0) as u32).min(95);
                let p = s.image.get_pixel(px, py);
                if l.class_id == 0 {
                    assert!(p.0[0] > p.0[2], "warm blob should be red-dominant: {p:?}");
                } else {
                    assert!(p.0[2] > p.0[0], "cool blob should be blue-dominant: {p:?}");
                }
            }
        }
    }
}
