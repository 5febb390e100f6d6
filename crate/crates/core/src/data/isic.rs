//! ISIC challenge directory layout.
//!
//! ```text
//! <dir>/ISIC_0000000.jpg
//! <dir>/ISIC_0000000_segmentation.png
//! <dir>/<any>.csv        image_id,melanoma[,...]
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use super::{rgb_to_tensor, tensor_to_rgb, Sample};
use crate::error::{Error, Result};
use crate::morphology::BinaryMask;

const IMAGE_EXTENSIONS: [&str; 8] = ["png", "jpg", "jpeg", "ppm", "pnm", "pgm", "pbm", "pam"];
const MASK_SUFFIX: &str = "_segmentation";

/// Loaded samples plus one line per image that had to be skipped.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub problems: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn stem(path: &Path) -> Option<&str> {
    path.file_stem().and_then(|s| s.to_str())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `image_id,melanoma` rows; returns `None` when the CSV lacks either
/// column.
fn read_labels(path: &Path, problems: &mut Vec<String>) -> Result<Option<HashMap<String, usize>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(id_col), Some(mel_col)) = (col("image_id"), col("melanoma")) else {
        return Ok(None);
    };
    let mut labels = HashMap::new();
    for row in reader.records() {
        let row = row?;
        let id = row.get(id_col).unwrap_or("").trim().to_string();
        let raw = row.get(mel_col).unwrap_or("").trim();
        match raw.parse::<f64>() {
            Ok(v) if v == 0.0 || v == 1.0 => {
                labels.insert(id, v as usize);
            }
            _ => problems.push(format!("{}: {id}: melanoma value {raw:?} is not 0 or 1", path.display())),
        }
    }
    Ok(Some(labels))
}

/// Loads every image that has both a `_segmentation` mask and a label.
///
/// Images lacking either are listed in [`LoadReport::problems`] and skipped;
/// files that exist but cannot be decoded are an error.
pub fn load_isic(dir: &Path) -> Result<LoadReport> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();

    let mut report = LoadReport::default();
    let mut labels = HashMap::new();
    let mut masks = HashMap::new();
    let mut images = BTreeMap::new();
    for path in &files {
        let Some(name) = stem(path) else { continue };
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            if let Some(found) = read_labels(path, &mut report.problems)? {
                labels.extend(found);
            }
        } else if is_image(path) {
            if let Some(id) = name.strip_suffix(MASK_SUFFIX) {
                masks.insert(id.to_string(), path.clone());
            } else if !name.ends_with("_superpixels") {
                images.insert(name.to_string(), path.clone());
            }
        }
    }

    if images.is_empty() {
        log::warn!("no images found in {}", dir.display());
        return Ok(report);
    }
    for (id, path) in images {
        let Some(mask_path) = masks.get(&id) else {
            report.problems.push(format!("{id}: missing {id}{MASK_SUFFIX} mask"));
            continue;
        };
        let Some(&label) = labels.get(&id) else {
            report.problems.push(format!("{id}: no melanoma label in any CSV"));
            continue;
        };
        let image = rgb_to_tensor(&open_image(&path)?.to_rgb8());
        let mask = BinaryMask::from_gray_image(&open_image(mask_path)?.to_luma8());
        match Sample::new(image, mask, label, id.clone()) {
            Ok(s) => report.samples.push(s),
            Err(e) => report.problems.push(format!("{id}: {e}")),
        }
    }
    for p in &report.problems {
        log::warn!("{p}");
    }
    Ok(report)
}

/// Writes samples as `<id>.png`, `<id>_segmentation.png` and `labels.csv`.
pub fn write_isic(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("labels.csv");
    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer.write_record(["image_id", "melanoma"])?;
    for s in samples {
        let path = dir.join(format!("{}.png", s.id));
        tensor_to_rgb(&s.image)?.save(&path).map_err(|source| Error::Image { path, source })?;
        s.mask.save(&dir.join(format!("{}{MASK_SUFFIX}.png", s.id)))?;
        writer.write_record([s.id.as_str(), if s.label == 1 { "1" } else { "0" }])?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}
