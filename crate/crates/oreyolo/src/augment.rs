//! Box-consistent image augmentation: six combinable strategies (noise,
//! right-angle rotation, cropping, translation, reflection, brightness),
//! four-image mosaic composition, and two-image mixup blending.

use crate::data::{BoxLabel, DatasetSample};
use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Which augmentation strategies may be applied and how many augmented
/// copies the offline expansion produces per original.
#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    pub noise: bool,
    pub rotate: bool,
    pub crop: bool,
    pub translate: bool,
    pub reflect: bool,
    pub brightness: bool,
    pub copies_per_image: usize,
    pub mosaic_prob: f64,
    pub mixup_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            noise: true,
            rotate: true,
            crop: true,
            translate: true,
            reflect: true,
            brightness: true,
            copies_per_image: 4,
            mosaic_prob: 0.5,
            mixup_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("mosaic_prob", self.mosaic_prob), ("mixup_prob", self.mixup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid_config(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Fraction of a clipped box's area that must survive for the box to be kept.
pub const MIN_BOX_AREA_FRACTION: f64 = 0.25;

/// Clip a box to the unit square; drops it when less than a quarter of its
/// area survives.
fn clip_box(label: &BoxLabel) -> Option<BoxLabel> {
    let x1 = (label.cx - label.w / 2.0).max(0.0);
    let y1 = (label.cy - label.h / 2.0).max(0.0);
    let x2 = (label.cx + label.w / 2.0).min(1.0);
    let y2 = (label.cy + label.h / 2.0).min(1.0);
    if x2 <= x1 || y2 <= y1 {
        return None;
    }
    let area = (x2 - x1) * (y2 - y1);
    if area < MIN_BOX_AREA_FRACTION * label.w * label.h {
        return None;
    }
    Some(BoxLabel {
        class_id: label.class_id,
        cx: (x1 + x2) / 2.0,
        cy: (y1 + y2) / 2.0,
        w: x2 - x1,
        h: y2 - y1,
    })
}

/// Rotate by k x 90 degrees clockwise, transforming boxes accordingly.
pub fn rotate90(sample: &DatasetSample, k: usize) -> DatasetSample {
    let k = k % 4;
    let image = match k {
        0 => sample.image.clone(),
        1 => image::imageops::rotate90(&sample.image),
        2 => image::imageops::rotate180(&sample.image),
        _ => image::imageops::rotate270(&sample.image),
    };
    let labels = sample
        .labels
        .iter()
        .map(|l| {
            let (cx, cy, w, h) = match k {
                0 => (l.cx, l.cy, l.w, l.h),
                1 => (1.0 - l.cy, l.cx, l.h, l.w),
                2 => (1.0 - l.cx, 1.0 - l.cy, l.w, l.h),
                _ => (l.cy, 1.0 - l.cx, l.h, l.w),
            };
            BoxLabel {
                class_id: l.class_id,
                cx,
                cy,
                w,
                h,
            }
        })
        .collect();
    DatasetSample {
        image,
        labels,
        id: sample.id.clone(),
    }
}

/// Mirror horizontally (`vertical = false`) or vertically.
pub fn reflect(sample: &DatasetSample, vertical: bool) -> DatasetSample {
    let image = if vertical {
        image::imageops::flip_vertical(&sample.image)
    } else {
        image::imageops::flip_horizontal(&sample.image)
    };
    let labels = sample
        .labels
        .iter()
        .map(|l| BoxLabel {
            class_id: l.class_id,
            cx: if vertical { l.cx } else { 1.0 - l.cx },
            cy: if vertical { 1.0 - l.cy } else { l.cy },
            w: l.w,
            h: l.h,
        })
        .collect();
    DatasetSample {
        image,
        labels,
        id: sample.id.clone(),
    }
}

/// Shift the image content by a normalized offset, filling exposed borders
/// with mid-gray; boxes translate with the content and clip at the frame.
pub fn translate(sample: &DatasetSample, dx: f64, dy: f64) -> DatasetSample {
    let (w, h) = sample.image.dimensions();
    let px = (dx * w as f64).round() as i64;
    let py = (dy * h as f64).round() as i64;
    let mut image = RgbImage::from_pixel(w, h, Rgb([114, 114, 114]));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let sx = x - px;
            let sy = y - py;
            if sx >= 0 && sx < w as i64 && sy >= 0 && sy < h as i64 {
                image.put_pixel(x as u32, y as u32, *sample.image.get_pixel(sx as u32, sy as u32));
            }
        }
    }
    let shift_x = px as f64 / w as f64;
    let shift_y = py as f64 / h as f64;
    let labels = sample
        .labels
        .iter()
        .filter_map(|l| {
            clip_box(&BoxLabel {
                class_id: l.class_id,
                cx: l.cx + shift_x,
                cy: l.cy + shift_y,
                w: l.w,
                h: l.h,
            })
        })
        .collect();
    DatasetSample {
        image,
        labels,
        id: sample.id.clone(),
    }
}

/// Crop a sub-window (normalized rect) and resize it back to the original
/// dimensions; boxes are remapped, clipped, and dropped when mostly lost.
pub fn crop(sample: &DatasetSample, x0: f64, y0: f64, cw: f64, ch: f64) -> Result<DatasetSample> {
    if !(cw > 0.0 && ch > 0.0 && x0 >= 0.0 && y0 >= 0.0 && x0 + cw <= 1.0 && y0 + ch <= 1.0) {
        return Err(Error::invalid_config(format!(
            "crop window ({x0}, {y0}, {cw}, {ch}) outside the unit square"
        )));
    }
    let (w, h) = sample.image.dimensions();
    let px = (x0 * w as f64).round() as u32;
    let py = (y0 * h as f64).round() as u32;
    let pw = ((cw * w as f64).round() as u32).max(1).min(w - px);
    let ph = ((ch * h as f64).round() as u32).max(1).min(h - py);
    let view = image::imageops::crop_imm(&sample.image, px, py, pw, ph).to_image();
    let image = image::imageops::resize(&view, w, h, image::imageops::FilterType::Triangle);
    // use the realized pixel window so labels match the actual crop
    let (rx0, ry0) = (px as f64 / w as f64, py as f64 / h as f64);
    let (rcw, rch) = (pw as f64 / w as f64, ph as f64 / h as f64);
    let labels = sample
        .labels
        .iter()
        .filter_map(|l| {
            clip_box(&BoxLabel {
                class_id: l.class_id,
                cx: (l.cx - rx0) / rcw,
                cy: (l.cy - ry0) / rch,
                w: l.w / rcw,
                h: l.h / rch,
            })
        })
        .collect();
    Ok(DatasetSample {
        image,
        labels,
        id: sample.id.clone(),
    })
}

/// Additive gaussian pixel noise; labels untouched.
pub fn noise(sample: &DatasetSample, sigma: f64, rng: &mut ChaCha8Rng) -> DatasetSample {
    let mut image = sample.image.clone();
    for p in image.pixels_mut() {
        for c in 0..3 {
            // Box-Muller from two uniforms
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let v = p.0[c] as f64 + sigma * n;
            p.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    DatasetSample {
        image,
        labels: sample.labels.clone(),
        id: sample.id.clone(),
    }
}

/// Multiply brightness by `factor`; labels untouched.
pub fn brightness(sample: &DatasetSample, factor: f64) -> DatasetSample {
    let mut image = sample.image.clone();
    for p in image.pixels_mut() {
        for c in 0..3 {
            p.0[c] = (p.0[c] as f64 * factor).round().clamp(0.0, 255.0) as u8;
        }
    }
    DatasetSample {
        image,
        labels: sample.labels.clone(),
        id: sample.id.clone(),
    }
}

/// Apply a random combination of the enabled strategies. Geometric ops keep
/// boxes consistent; photometric ops leave them untouched. All randomness
/// comes from the seeded generator.
pub fn augment(
    sample: &DatasetSample,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetSample> {
    policy.validate()?;
    sample.validate()?;
    let mut out = sample.clone();
    // fixed op order; each enabled op fires with probability 1/2, and one
    // enabled op is forced if the combination came up empty
    let mut applied = false;
    if policy.rotate && rng.gen_bool(0.5) {
        out = rotate90(&out, rng.gen_range(1..4));
        applied = true;
    }
    if policy.reflect && rng.gen_bool(0.5) {
        out = reflect(&out, rng.gen_bool(0.5));
        applied = true;
    }
    if policy.crop && rng.gen_bool(0.5) {
        let cw = rng.gen_range(0.6..1.0);
        let ch = rng.gen_range(0.6..1.0);
        let x0 = rng.gen_range(0.0..(1.0 - cw));
        let y0 = rng.gen_range(0.0..(1.0 - ch));
        out = crop(&out, x0, y0, cw, ch)?;
        applied = true;
    }
    if policy.translate && rng.gen_bool(0.5) {
        let dx = rng.gen_range(-0.2..0.2);
        let dy = rng.gen_range(-0.2..0.2);
        out = translate(&out, dx, dy);
        applied = true;
    }
    if policy.noise && rng.gen_bool(0.5) {
        out = noise(&out, rng.gen_range(3.0..12.0), rng);
        applied = true;
    }
    if policy.brightness && rng.gen_bool(0.5) {
        out = brightness(&out, rng.gen_range(0.7..1.3));
        applied = true;
    }
    if !applied && policy.brightness {
        out = brightness(&out, rng.gen_range(0.8..1.2));
    }
    Ok(out)
}

/// Offline expansion: the original plus `copies_per_image` augmented copies
/// per sample, each with a distinct id suffix. Deterministic in the seed.
pub fn expand_dataset(
    samples: &[DatasetSample],
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<Vec<DatasetSample>> {
    use rand::SeedableRng;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len() * (1 + policy.copies_per_image));
    for sample in samples {
        out.push(sample.clone());
        for k in 0..policy.copies_per_image {
            let mut aug = augment(sample, policy, rng)?;
            aug.id = format!("{}_aug{k}", sample.id);
            out.push(aug);
        }
    }
    Ok(out)
}

/// Tile four same-size images around a random center into one canvas,
/// remapping each tile's boxes by the tile affine.
pub fn mosaic(samples: [&DatasetSample; 4], rng: &mut ChaCha8Rng) -> Result<DatasetSample> {
    let (w, h) = samples[0].image.dimensions();
    for s in &samples {
        s.validate()?;
        if s.image.dimensions() != (w, h) {
            return Err(Error::Data("mosaic inputs must share dimensions".into()));
        }
    }
    let cx = rng.gen_range((0.3 * w as f64) as u32..(0.7 * w as f64) as u32).max(1);
    let cy = rng.gen_range((0.3 * h as f64) as u32..(0.7 * h as f64) as u32).max(1);
    let mut image = RgbImage::new(w, h);
    let mut labels = Vec::new();
    let quads = [
        (0u32, 0u32, cx, cy),
        (cx, 0, w - cx, cy),
        (0, cy, cx, h - cy),
        (cx, cy, w - cx, h - cy),
    ];
    for (sample, (qx, qy, qw, qh)) in samples.iter().zip(quads.iter()) {
        let tile = image::imageops::resize(
            &sample.image,
            (*qw).max(1),
            (*qh).max(1),
            image::imageops::FilterType::Triangle,
        );
        image::imageops::replace(&mut image, &tile, *qx as i64, *qy as i64);
        let (fx, fy) = (*qw as f64 / w as f64, *qh as f64 / h as f64);
        let (ox, oy) = (*qx as f64 / w as f64, *qy as f64 / h as f64);
        for l in &sample.labels {
            let mapped = BoxLabel {
                class_id: l.class_id,
                cx: ox + l.cx * fx,
                cy: oy + l.cy * fy,
                w: l.w * fx,
                h: l.h * fy,
            };
            if let Some(kept) = clip_box(&mapped) {
                labels.push(kept);
            }
        }
    }
    Ok(DatasetSample {
        image,
        labels,
        id: format!("mosaic_{}", samples[0].id),
    })
}

/// Blend two same-size images as a*lambda + b*(1-lambda) and take the union
/// of their label lists.
pub fn mixup(a: &DatasetSample, b: &DatasetSample, lambda: f64) -> Result<DatasetSample> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid_config(format!(
            "mixup lambda must be in (0, 1], got {lambda}"
        )));
    }
    if a.image.dimensions() != b.image.dimensions() {
        return Err(Error::Data("mixup inputs must share dimensions".into()));
    }
    let (w, h) = a.image.dimensions();
    let mut image = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let pa = a.image.get_pixel(x, y);
            let pb = b.image.get_pixel(x, y);
            let mut out = [0u8; 3];
            for c in 0..3 {
                let v = pa.0[c] as f64 * lambda + pb.0[c] as f64 * (1.0 - lambda);
                out[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            image.put_pixel(x, y, Rgb(out));
        }
    }
    let mut labels = a.labels.clone();
    labels.extend(b.labels.iter().copied());
    Ok(DatasetSample {
        image,
        labels,
        id: format!("mix_{}_{}", a.id, b.id),
    })
}
