use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::sample::CHANNELS;
use super::{AnnotatedSample, DataError};

/// File naming inside a dataset root.
///
/// ```text
/// root/<sample_id>/image.png
/// root/<sample_id>/annotator_<k>.png   k = 1..=A, nonzero = positive
/// root/metadata.csv                    optional: sample_id,patient_id,organ
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub image_file: String,
    pub mask_prefix: String,
    pub mask_extension: String,
    pub metadata_file: String,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            image_file: "image.png".into(),
            mask_prefix: "annotator_".into(),
            mask_extension: ".png".into(),
            metadata_file: "metadata.csv".into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetadataRow {
    sample_id: String,
    patient_id: Option<String>,
    organ: Option<String>,
}

fn decode(path: &Path) -> Result<DynamicImage, DataError> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => DataError::io(path, io),
        other => DataError::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

fn is_wide(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    )
}

/// Reads an RGB image scaled by its bit depth into `[0, 1]`, channel last;
/// returns `(height, width, values)`.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>), DataError> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_wide(&img) {
        img.to_rgb16().into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()
    };
    Ok((h, w, data))
}

fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_wide(&img) {
        img.to_luma16().into_raw().into_iter().map(|v| u8::from(v != 0)).collect()
    } else {
        img.to_luma8().into_raw().into_iter().map(|v| u8::from(v != 0)).collect()
    };
    Ok((h, w, data))
}

fn read_metadata(path: &Path) -> Result<HashMap<String, MetadataRow>, DataError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DataError::io(path, e))?;
    let mut out = HashMap::new();
    for row in rdr.deserialize::<MetadataRow>() {
        let row = row.map_err(|e| DataError::Layout {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        out.insert(row.sample_id.clone(), row);
    }
    Ok(out)
}

fn mask_index(name: &str, layout: &DatasetLayout) -> Option<usize> {
    name.strip_prefix(&layout.mask_prefix)?
        .strip_suffix(&layout.mask_extension)?
        .parse()
        .ok()
}

/// Loads every sample directory under `root`, sorted by sample id.
pub fn load_dataset(root: &Path, layout: &DatasetLayout) -> Result<Vec<AnnotatedSample>, DataError> {
    let entries = fs::read_dir(root).map_err(|e| DataError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| DataError::io(root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(DataError::Layout {
            path: root.to_path_buf(),
            message: "no sample directories".into(),
        });
    }
    let meta_path = root.join(&layout.metadata_file);
    let meta = if meta_path.exists() {
        read_metadata(&meta_path)?
    } else {
        HashMap::new()
    };

    let mut expected_annotators = None;
    let mut samples = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let image_path = dir.join(&layout.image_file);
        if !image_path.exists() {
            return Err(DataError::Layout {
                path: image_path,
                message: "missing image".into(),
            });
        }
        let (h, w, image) = read_image(&image_path)?;

        let mut indices = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| DataError::io(&dir, e))? {
            let entry = entry.map_err(|e| DataError::io(&dir, e))?;
            if let Some(k) = mask_index(&entry.file_name().to_string_lossy(), layout) {
                indices.push(k);
            }
        }
        indices.sort_unstable();
        let count = indices.len();
        if count == 0 {
            return Err(DataError::Layout {
                path: dir.clone(),
                message: "no annotator masks".into(),
            });
        }
        if indices != (1..=count).collect::<Vec<_>>() {
            return Err(DataError::Layout {
                path: dir.clone(),
                message: format!("annotator masks must be numbered 1..={count}, found {indices:?}"),
            });
        }
        match expected_annotators {
            None => expected_annotators = Some(count),
            Some(a) if a != count => {
                let message = if count < a {
                    format!("missing masks: {count} annotators, expected {a}")
                } else {
                    format!("extra masks: {count} annotators, expected {a}")
                };
                return Err(DataError::Layout { path: dir.clone(), message });
            }
            Some(_) => {}
        }

        let mut annotations = Vec::with_capacity(count);
        for k in 1..=count {
            let path = dir.join(format!("{}{k}{}", layout.mask_prefix, layout.mask_extension));
            let (mh, mw, mask) = read_mask(&path)?;
            if (mh, mw) != (h, w) {
                return Err(DataError::SizeMismatch {
                    path,
                    expected: (h, w),
                    got: (mh, mw),
                });
            }
            annotations.push(mask);
        }
        let row = meta.get(&id);
        let patient = row.and_then(|r| r.patient_id.clone()).filter(|p| !p.is_empty());
        let organ = row.and_then(|r| r.organ.clone()).filter(|o| !o.is_empty());
        samples.push(AnnotatedSample::new(id, h, w, image, annotations, patient, organ)?);
    }
    Ok(samples)
}

/// Writes samples in the layout read by [`load_dataset`] (8-bit PNGs).
pub fn save_dataset(root: &Path, samples: &[AnnotatedSample], layout: &DatasetLayout) -> Result<(), DataError> {
    fs::create_dir_all(root).map_err(|e| DataError::io(root, e))?;
    let meta_path = root.join(&layout.metadata_file);
    let mut meta = csv::Writer::from_path(&meta_path).map_err(|e| DataError::io(&meta_path, e))?;
    for s in samples {
        let dir = root.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        let (w, h) = (s.width as u32, s.height as u32);
        let bytes: Vec<u8> = s.image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        debug_assert_eq!(bytes.len(), s.pixels() * CHANNELS);
        let path = dir.join(&layout.image_file);
        RgbImage::from_raw(w, h, bytes)
            .expect("image buffer size")
            .save(&path)
            .map_err(|e| DataError::io(&path, e))?;
        for (k, mask) in s.annotations.iter().enumerate() {
            let path = dir.join(format!("{}{}{}", layout.mask_prefix, k + 1, layout.mask_extension));
            GrayImage::from_raw(w, h, mask.iter().map(|&v| v * 255).collect())
                .expect("mask buffer size")
                .save(&path)
                .map_err(|e| DataError::io(&path, e))?;
        }
        meta.serialize(MetadataRow {
            sample_id: s.id.clone(),
            patient_id: Some(s.patient_id.clone()),
            organ: s.organ.clone(),
        })
        .map_err(|e| DataError::io(&meta_path, e))?;
    }
    meta.flush().map_err(|e| DataError::io(&meta_path, e))
}
