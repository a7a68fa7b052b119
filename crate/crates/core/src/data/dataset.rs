use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use super::grid::LabelMap;
use super::image::{image_err, RgbImage};
use crate::error::{Error, Result};

pub const DEFAULT_IGNORE_INDEX: u16 = 255;

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image_path: Option<PathBuf>,
    pub label_path: Option<PathBuf>,
    pub image: RgbImage,
    pub label: Option<LabelMap>,
}

/// An in-memory collection of images with optional label maps.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_count: usize,
    pub ignore_index: u16,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(class_count: usize, ignore_index: u16, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            class_count,
            ignore_index,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::Validation("class count must be positive".into()));
        }
        if (self.ignore_index as usize) < self.class_count {
            return Err(Error::Validation(format!(
                "ignore index {} collides with class range [0, {})",
                self.ignore_index, self.class_count
            )));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{}`", s.id)));
            }
            if let Some(label) = &s.label {
                if label.dims() != s.image.dims() {
                    return Err(Error::Validation(format!(
                        "sample `{}`: image is {:?} but label is {:?}",
                        s.id,
                        s.image.dims(),
                        label.dims()
                    )));
                }
                if let Some(&bad) = label
                    .data()
                    .iter()
                    .find(|&&v| v != self.ignore_index && v as usize >= self.class_count)
                {
                    return Err(Error::Validation(format!(
                        "sample `{}`: label value {bad} outside [0, {}) and not ignore index {}",
                        s.id, self.class_count, self.ignore_index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reads a manifest (one `image<TAB>label` per line, label optional) with
/// paths relative to `root`.
pub fn load_dataset(root: &Path, manifest: &Path, class_count: usize, ignore_index: u16) -> Result<Dataset> {
    let manifest_path = if manifest.is_absolute() {
        manifest.to_path_buf()
    } else {
        root.join(manifest)
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::load(&manifest_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let image_rel = parts.next().unwrap_or_default();
        let label_rel = parts.next().filter(|s| !s.is_empty());
        if parts.next().is_some() {
            return Err(Error::Validation(format!(
                "{}:{}: expected at most two tab-separated fields",
                manifest_path.display(),
                lineno + 1
            )));
        }
        let image_path = root.join(image_rel);
        let label_path = label_rel.map(|l| root.join(l));
        let id = Path::new(image_rel)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("cannot derive id from `{image_rel}`")))?
            .to_string();
        let image = RgbImage::open(&require_file(&image_path)?)?;
        let label = match &label_path {
            Some(p) => Some(read_label(&require_file(p)?)?),
            None => None,
        };
        samples.push(Sample {
            id,
            image_path: Some(image_path),
            label_path,
            image,
            label,
        });
    }
    Dataset::new(class_count, ignore_index, samples)
}

fn require_file(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::load(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

/// Reads a single-channel 8- or 16-bit PNG of class indices.
pub fn read_label(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u16> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw(),
        _ => {
            return Err(Error::Validation(format!(
                "label {} is not a single-channel image",
                path.display()
            )))
        }
    };
    LabelMap::new(w, h, data)
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    let (w, h) = (label.width() as u32, label.height() as u32);
    if label.data().iter().all(|&v| v <= u8::MAX as u16) {
        let raw: Vec<u8> = label.data().iter().map(|&v| v as u8).collect();
        let buf = image::GrayImage::from_raw(w, h, raw).expect("buffer size");
        buf.save(path).map_err(|e| image_err(path, e))
    } else {
        let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w, h, label.data().to_vec())
            .expect("buffer size");
        buf.save(path).map_err(|e| image_err(path, e))
    }
}

/// Writes `images/<id>.png`, `labels/<id>.png` and a manifest named
/// `manifest_name` under `root`.
pub fn write_dataset(dataset: &Dataset, root: &Path, manifest_name: &str) -> Result<PathBuf> {
    let images = root.join("images");
    let labels = root.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::load(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| Error::load(&labels, e))?;
    let mut manifest = String::new();
    for s in &dataset.samples {
        let img_rel = format!("images/{}.png", s.id);
        s.image.save_png(&root.join(&img_rel))?;
        manifest.push_str(&img_rel);
        if let Some(label) = &s.label {
            let lab_rel = format!("labels/{}.png", s.id);
            write_label(&root.join(&lab_rel), label)?;
            manifest.push('\t');
            manifest.push_str(&lab_rel);
        }
        manifest.push('\n');
    }
    let path = root.join(manifest_name);
    fs::write(&path, manifest).map_err(|e| Error::load(&path, e))?;
    Ok(path)
}
