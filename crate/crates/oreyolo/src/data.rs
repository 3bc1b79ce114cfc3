//! Dataset ingestion and splitting. Layout: `root/images/*.png|jpg` plus
//! `root/labels/*.txt`, one `class cx cy w h` line per box with normalized
//! center/size coordinates; split manifests are newline-separated id lists.

use crate::error::{Error, Result};
use candle_core::{Device, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Normalized ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLabel {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxLabel {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.w > 0.0 && self.h > 0.0 && ok_range(self.w) && ok_range(self.h)) {
            return Err(Error::Data(format!(
                "box size ({}, {}) outside (0, 1]",
                self.w, self.h
            )));
        }
        if !ok_range(self.cx) || !ok_range(self.cy) {
            return Err(Error::Data(format!(
                "box center ({}, {}) outside [0, 1]",
                self.cx, self.cy
            )));
        }
        // the denormalized box must stay inside the image (small slack for
        // rounding in serialized labels)
        let eps = 1e-6;
        if self.cx - self.w / 2.0 < -eps
            || self.cy - self.h / 2.0 < -eps
            || self.cx + self.w / 2.0 > 1.0 + eps
            || self.cy + self.h / 2.0 > 1.0 + eps
        {
            return Err(Error::Data(format!(
                "box ({}, {}, {}, {}) extends outside the image",
                self.cx, self.cy, self.w, self.h
            )));
        }
        Ok(())
    }

    /// Corner coordinates in pixels for a given image size.
    pub fn to_corners(&self, width: f64, height: f64) -> [f64; 4] {
        [
            (self.cx - self.w / 2.0) * width,
            (self.cy - self.h / 2.0) * height,
            (self.cx + self.w / 2.0) * width,
            (self.cy + self.h / 2.0) * height,
        ]
    }

    pub fn to_line(&self) -> String {
        format!("{} {} {} {} {}", self.class_id, self.cx, self.cy, self.w, self.h)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::Data(format!(
                "label line must have 5 fields, got {}: `{line}`",
                parts.len()
            )));
        }
        let class_id = parts[0]
            .parse()
            .map_err(|_| Error::Data(format!("bad class id `{}`", parts[0])))?;
        let mut vals = [0f64; 4];
        for (i, p) in parts[1..].iter().enumerate() {
            vals[i] = p
                .parse()
                .map_err(|_| Error::Data(format!("bad coordinate `{p}`")))?;
        }
        let label = BoxLabel {
            class_id,
            cx: vals[0],
            cy: vals[1],
            w: vals[2],
            h: vals[3],
        };
        label.validate()?;
        Ok(label)
    }
}

/// One image with its ground-truth boxes.
#[derive(Debug, Clone)]
pub struct DatasetSample {
    pub image: RgbImage,
    pub labels: Vec<BoxLabel>,
    pub id: String,
}

impl DatasetSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.width() == 0 || self.image.height() == 0 {
            return Err(Error::Data(format!("sample {} has an empty image", self.id)));
        }
        for l in &self.labels {
            l.validate()?;
        }
        Ok(())
    }
}

fn image_stems(images_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut stems = Vec::new();
    let entries = std::fs::read_dir(images_dir).map_err(|e| Error::io(images_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(images_dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Data(format!("unreadable file name {path:?}")))?
                .to_string();
            stems.push((stem, path));
        }
    }
    stems.sort();
    Ok(stems)
}

/// Load every sample under `root`. A missing label file produces a warning
/// and an empty label list; malformed or out-of-range labels are errors that
/// name the offending file and line.
pub fn load_dataset(root: &Path) -> Result<Vec<DatasetSample>> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    let mut samples = Vec::new();
    for (stem, img_path) in image_stems(&images_dir)? {
        let image = image::open(&img_path)?.to_rgb8();
        let label_path = labels_dir.join(format!("{stem}.txt"));
        let labels = if label_path.exists() {
            let text =
                std::fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
            let mut labels = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                labels.push(BoxLabel::from_line(line).map_err(|e| {
                    Error::Data(format!("{}:{}: {e}", label_path.display(), lineno + 1))
                })?);
            }
            labels
        } else {
            eprintln!(
                "warning: no label file for image `{stem}` (expected {})",
                label_path.display()
            );
            Vec::new()
        };
        let sample = DatasetSample {
            image,
            labels,
            id: stem,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Write a sample into the dataset layout (PNG image plus label file).
pub fn save_sample(root: &Path, sample: &DatasetSample) -> Result<()> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    let img_path = images_dir.join(format!("{}.png", sample.id));
    sample.image.save(&img_path)?;
    let lines: Vec<String> = sample.labels.iter().map(BoxLabel::to_line).collect();
    let label_path = labels_dir.join(format!("{}.txt", sample.id));
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(&label_path, text).map_err(|e| Error::io(&label_path, e))?;
    Ok(())
}

/// Deterministic shuffled partition of `n` indices. Train and validation
/// sizes round down; the remainder goes to the test split.
pub fn split_indices(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if !(sum > 0.0) || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::invalid_config(format!("bad split ratios {ratios:?}")));
    }
    if n < 3 {
        return Err(Error::Data(format!(
            "cannot split {n} samples into three parts"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = (n as f64 * ratios.0 / sum).floor() as usize;
    let n_val = (n as f64 * ratios.1 / sum).floor() as usize;
    let train = indices[..n_train].to_vec();
    let val = indices[n_train..n_train + n_val].to_vec();
    let test = indices[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// Split samples 7:2:1 (or custom ratios) into train/val/test.
pub fn split_dataset(
    samples: Vec<DatasetSample>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<DatasetSample>, Vec<DatasetSample>, Vec<DatasetSample>)> {
    let (ti, vi, si) = split_indices(samples.len(), ratios, seed)?;
    let mut slots: Vec<Option<DatasetSample>> = samples.into_iter().map(Some).collect();
    let take = |idx: &[usize], slots: &mut Vec<Option<DatasetSample>>| {
        idx.iter().map(|i| slots[*i].take().unwrap()).collect::<Vec<_>>()
    };
    let train = take(&ti, &mut slots);
    let val = take(&vi, &mut slots);
    let test = take(&si, &mut slots);
    Ok((train, val, test))
}

/// Write newline-separated id manifests for the three splits.
pub fn write_split_manifests(
    dir: &Path,
    train: &[DatasetSample],
    val: &[DatasetSample],
    test: &[DatasetSample],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, set) in [("train", train), ("val", val), ("test", test)] {
        let path = dir.join(format!("{name}.txt"));
        let mut text = set.iter().map(|s| s.id.clone()).collect::<Vec<_>>().join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Convert an image to a (1, 3, size, size) float tensor in [0, 1],
/// resizing if needed. Normalized labels are unaffected by the resize.
pub fn image_to_tensor(image: &RgbImage, size: usize, device: &Device) -> Result<Tensor> {
    let resized;
    let img = if image.width() as usize == size && image.height() as usize == size {
        image
    } else {
        resized = image::imageops::resize(
            image,
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        );
        &resized
    };
    let mut data = vec![0f32; 3 * size * size];
    let plane = size * size;
    for (y, row) in img.rows().enumerate() {
        for (x, p) in row.enumerate() {
            let i = y * size + x;
            data[i] = p.0[0] as f32 / 255.0;
            data[plane + i] = p.0[1] as f32 / 255.0;
            data[2 * plane + i] = p.0[2] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, size, size), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_line_parsing() {
        let l = BoxLabel::from_line("0 0.5 0.5 0.2 0.2").unwrap();
        assert_eq!(l.class_id, 0);
        assert!((l.cx - 0.5).abs() < 1e-12 && (l.w - 0.2).abs() < 1e-12);

        // out-of-range center
        assert!(BoxLabel::from_line("1 1.5 0.5 0.2 0.2").is_err());
        // box extending outside the image
        assert!(BoxLabel::from_line("0 0.05 0.5 0.2 0.2").is_err());
        // malformed
        assert!(BoxLabel::from_line("0 0.5 0.5 0.2").is_err());
    }

    #[test]
    fn label_roundtrip_preserves_values() {
        let l = BoxLabel {
            class_id: 1,
            cx: 0.51234567,
            cy: 0.25,
            w: 0.125,
            h: 0.0625,
        };
        let back = BoxLabel::from_line(&l.to_line()).unwrap();
        assert!((back.cx - l.cx).abs() < 1e-6);
        assert!((back.w - l.w).abs() < 1e-6);
    }

    #[test]
    fn dataset_roundtrip_via_files() {
        let dir = std::env::temp_dir().join(format!("oreyolo-data-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let img = RgbImage::from_pixel(32, 32, image::Rgb([10, 20, 30]));
        let sample = DatasetSample {
            image: img,
            labels: vec![BoxLabel {
                class_id: 1,
                cx: 0.5,
                cy: 0.5,
                w: 0.25,
                h: 0.25,
            }],
            id: "s0".into(),
        };
        save_sample(&dir, &sample).unwrap();
        // one image without labels
        let img2 = RgbImage::from_pixel(32, 32, image::Rgb([1, 2, 3]));
        img2.save(dir.join("images/s1.png")).unwrap();

        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].id, "s0");
        assert_eq!(loaded[0].labels.len(), 1);
        assert!((loaded[0].labels[0].cx - 0.5).abs() < 1e-6);
        assert!(loaded[1].labels.is_empty());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn split_sizes_match_701_arithmetic() {
        let (train, val, test) = split_indices(6090, (0.7, 0.2, 0.1), 7).unwrap();
        assert_eq!(train.len(), 4263);
        assert_eq!(val.len(), 1218);
        assert_eq!(test.len(), 609);

        let (train, val, test) = split_indices(10, (0.7, 0.2, 0.1), 7).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (7, 2, 1));
    }

    #[test]
    fn splits_are_deterministic_disjoint_and_cover() {
        let (t1, v1, s1) = split_indices(100, (0.7, 0.2, 0.1), 42).unwrap();
        let (t2, v2, s2) = split_indices(100, (0.7, 0.2, 0.1), 42).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(s1, s2);
        let mut all: Vec<usize> = t1.iter().chain(&v1).chain(&s1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_samples_is_a_data_error() {
        assert!(split_indices(2, (0.7, 0.2, 0.1), 0).is_err());
    }
}
