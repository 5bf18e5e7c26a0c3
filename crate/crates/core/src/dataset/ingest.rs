use std::path::{Path, PathBuf};

use super::image::{Image, LabeledImage, CHANNELS, PLANE, SIDE};
use crate::error::{Error, Result};

/// How class folders map to labels.
#[derive(Debug, Clone, Default)]
pub struct IngestLayout {
    /// Explicit class folder names in label order. `None` uses every
    /// subdirectory, sorted by name.
    pub classes: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub images: Vec<LabeledImage>,
    pub class_names: Vec<String>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

/// Loads `root/<class>/*.png`, resizing every image to 32x32 bilinearly.
pub fn ingest_directory(root: &Path, layout: &IngestLayout) -> Result<IngestReport> {
    let class_names = match &layout.classes {
        Some(names) => names.clone(),
        None => {
            let mut names = Vec::new();
            for entry in std::fs::read_dir(root)? {
                let entry = entry?;
                if entry.file_type()?.is_dir() {
                    names.push(entry.file_name().to_string_lossy().into_owned());
                }
            }
            names.sort();
            names
        }
    };
    if class_names.is_empty() {
        return Err(Error::EmptyDirectory(root.to_path_buf()));
    }

    let mut images = Vec::new();
    let mut skipped = 0;
    for (label, name) in class_names.iter().enumerate() {
        let dir = root.join(name);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
            })
            .collect();
        files.sort();
        let before = images.len();
        for file in files {
            match decode(&file) {
                Ok(image) => images.push(LabeledImage { image, label }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    skipped += 1;
                }
            }
        }
        if images.len() == before {
            return Err(Error::EmptyClass {
                class: name.clone(),
            });
        }
    }
    Ok(IngestReport {
        images,
        class_names,
        skipped,
    })
}

fn decode(path: &Path) -> std::result::Result<Image, String> {
    let img = ::image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?
        .to_rgb32f();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Image::new(resize_bilinear(&raw, w as usize, h as usize)).map_err(|e| e.to_string())
}

/// Bilinear resample of interleaved RGB `[h, w, 3]` data to planar 3x32x32,
/// using pixel-center alignment.
pub(crate) fn resize_bilinear(rgb: &[f32], width: usize, height: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; CHANNELS * PLANE];
    let sample = |x: usize, y: usize, c: usize| rgb[(y * width + x) * CHANNELS + c];
    let axis = |o: usize, src: usize| {
        let pos = ((o as f32 + 0.5) * src as f32 / SIDE as f32 - 0.5).clamp(0.0, (src - 1) as f32);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f32)
    };
    for oy in 0..SIDE {
        let (y0, y1, fy) = axis(oy, height);
        for ox in 0..SIDE {
            let (x0, x1, fx) = axis(ox, width);
            for c in 0..CHANNELS {
                let top = sample(x0, y0, c) * (1.0 - fx) + sample(x1, y0, c) * fx;
                let bottom = sample(x0, y1, c) * (1.0 - fx) + sample(x1, y1, c) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[c * PLANE + oy * SIDE + ox] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ::image::{Rgb, RgbImage};

    fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y)));
        img.save(path).unwrap();
    }

    #[test]
    fn two_classes_three_images_each() {
        let dir = tempfile::tempdir().unwrap();
        for (ci, class) in ["stop", "yield"].iter().enumerate() {
            let d = dir.path().join(class);
            std::fs::create_dir(&d).unwrap();
            for i in 0..3 {
                write_png(&d.join(format!("{i}.png")), 64, 64, |x, y| {
                    [(x * 4) as u8, (y * 4) as u8, (ci * 200) as u8]
                });
            }
        }
        let report = ingest_directory(dir.path(), &IngestLayout::default()).unwrap();
        assert_eq!(report.images.len(), 6);
        assert_eq!(report.class_names, vec!["stop", "yield"]);
        let labels: std::collections::BTreeSet<_> = report.images.iter().map(|s| s.label).collect();
        assert_eq!(labels.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(report.images[0].image.data().len(), 3 * 32 * 32);
    }

    #[test]
    fn constant_image_survives_resize() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("a");
        std::fs::create_dir(&d).unwrap();
        write_png(&d.join("x.png"), 64, 64, |_, _| [77, 140, 203]);
        let report = ingest_directory(dir.path(), &IngestLayout::default()).unwrap();
        let img = &report.images[0].image;
        for row in 0..32 {
            for col in 0..32 {
                let p = img.pixel(row, col);
                for (v, want) in p.iter().zip([77.0, 140.0, 203.0]) {
                    assert!((v - want / 255.0).abs() <= 1.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn unreadable_files_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("a");
        std::fs::create_dir(&d).unwrap();
        write_png(&d.join("good.png"), 8, 8, |_, _| [0, 0, 0]);
        std::fs::write(d.join("broken.png"), b"not a png").unwrap();
        let report = ingest_directory(dir.path(), &IngestLayout::default()).unwrap();
        assert_eq!(report.images.len(), 1);
        assert_eq!(report.skipped, 1);
    }

    #[test]
    fn empty_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        std::fs::create_dir(dir.path().join("b")).unwrap();
        write_png(&dir.path().join("a").join("1.png"), 4, 4, |_, _| [1, 2, 3]);
        let err = ingest_directory(dir.path(), &IngestLayout::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyClass { ref class } if class == "b"));
    }

    #[test]
    fn downscale_averages_two_by_two_blocks() {
        // 64 -> 32 with centre alignment samples exactly between source pixels.
        let w = 64;
        let rgb: Vec<f32> = (0..w * w)
            .flat_map(|i| {
                let v = if (i / w) % 2 == 0 { 0.0 } else { 1.0 };
                [v, v, v]
            })
            .collect();
        let out = resize_bilinear(&rgb, w, w);
        assert!(out.iter().all(|v| (v - 0.5).abs() < 1e-6));
    }
}
