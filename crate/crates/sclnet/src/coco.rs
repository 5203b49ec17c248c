//! COCO-style annotation and detection files.
//!
//! Boxes on disk are corner format `[x, y, w, h]` in pixels; in memory they
//! are centre format. Category ids on disk are arbitrary integers and map to
//! dense indices in file order. Image paths resolve relative to the
//! directory holding the annotation file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sclnet_core::data::{Annotation, Category, Dataset, ImageSample};
use sclnet_core::detector::Detection;
use sclnet_core::{BBox, Tensor};

use crate::error::{CliError, CliResult};
use crate::image;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: i64,
    pub bbox: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: i64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One scored box in COCO results format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: u64,
    pub category_id: i64,
    pub bbox: Vec<f64>,
    pub score: f64,
}

fn invalid(path: &Path, msg: String) -> CliError {
    CliError::Runtime(format!("{}: {msg}", path.display()))
}

fn parse_box(path: &Path, what: &str, b: &[f64]) -> CliResult<BBox> {
    if b.len() != 4 {
        return Err(invalid(path, format!("{what}: bbox needs 4 numbers, got {}", b.len())));
    }
    if !(b[2] > 0.0 && b[3] > 0.0) {
        return Err(invalid(path, format!("{what}: bbox width and height must be positive, got {b:?}")));
    }
    BBox::from_xywh(b[0], b[1], b[2], b[3]).map_err(|e| invalid(path, format!("{what}: {e}")))
}

fn category_index(cats: &[Category]) -> HashMap<i64, usize> {
    cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect()
}

/// Converts a parsed file; `path` only labels errors.
pub fn from_coco(file: &CocoFile, path: &Path) -> CliResult<Dataset> {
    let categories: Vec<Category> = file.categories.iter().map(|c| Category { id: c.id, name: c.name.clone() }).collect();
    let cat_of = category_index(&categories);
    if cat_of.len() != categories.len() {
        return Err(invalid(path, "duplicate category ids".into()));
    }
    let mut samples: Vec<ImageSample> = Vec::with_capacity(file.images.len());
    let mut slot = HashMap::new();
    for im in &file.images {
        if slot.insert(im.id, samples.len()).is_some() {
            return Err(invalid(path, format!("duplicate image id {}", im.id)));
        }
        samples.push(ImageSample {
            id: im.id,
            width: im.width,
            height: im.height,
            file_name: im.file_name.clone(),
            pixels: Tensor::zeros(&[0]),
            annotations: Vec::new(),
        });
    }
    for a in &file.annotations {
        let what = format!("annotation {}", a.id);
        let &i = slot.get(&a.image_id).ok_or_else(|| invalid(path, format!("{what}: unknown image id {}", a.image_id)))?;
        let &c = cat_of
            .get(&a.category_id)
            .ok_or_else(|| invalid(path, format!("{what}: unknown category id {}", a.category_id)))?;
        let bbox = parse_box(path, &what, &a.bbox)?;
        samples[i].annotations.push(Annotation { id: a.id, bbox, category_id: c });
    }
    Ok(Dataset { samples, categories })
}

pub fn to_coco(ds: &Dataset) -> CocoFile {
    CocoFile {
        images: ds
            .samples
            .iter()
            .map(|s| CocoImage { id: s.id, width: s.width, height: s.height, file_name: s.file_name.clone() })
            .collect(),
        annotations: ds
            .samples
            .iter()
            .flat_map(|s| {
                s.annotations.iter().map(move |a| CocoAnnotation {
                    id: a.id,
                    image_id: s.id,
                    category_id: ds.categories[a.category_id].id,
                    bbox: a.bbox.to_xywh().to_vec(),
                })
            })
            .collect(),
        categories: ds.categories.iter().map(|c| CocoCategory { id: c.id, name: c.name.clone() }).collect(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| invalid(path, format!("schema violation: {e}")))
}

/// Reads an annotation file, optionally decoding every referenced image.
pub fn load_annotations(path: &Path, with_pixels: bool) -> CliResult<Dataset> {
    let file: CocoFile = read_json(path)?;
    let mut ds = from_coco(&file, path)?;
    if with_pixels {
        let root = path.parent().unwrap_or(Path::new("."));
        for s in &mut ds.samples {
            let p = root.join(&s.file_name);
            let px = image::read_rgb(&p)?;
            if px.shape() != [3, s.height, s.width] {
                return Err(invalid(
                    &p,
                    format!("image is {}x{}, annotation file says {}x{}", px.dim(2), px.dim(1), s.width, s.height),
                ));
            }
            s.pixels = px;
        }
    }
    Ok(ds)
}

/// Annotation file of a dataset directory, or `path` itself if it is a file.
pub fn annotation_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATION_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Writes `annotations.json` and, for samples with pixels, one PNG per
/// image under `images/`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> CliResult<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| CliError::io(&img_dir, e))?;
    let mut file = to_coco(ds);
    for (s, im) in ds.samples.iter().zip(&mut file.images) {
        im.file_name = format!("{IMAGE_DIR}/{}", s.file_name);
        if s.has_pixels() {
            image::write_rgb(&dir.join(&im.file_name), &s.pixels)?;
        }
    }
    write_json(&dir.join(ANNOTATION_FILE), &file)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a results file and groups it per dataset image, in dataset order.
pub fn load_detections(path: &Path, ds: &Dataset) -> CliResult<Vec<Vec<Detection>>> {
    let raw: Vec<CocoDetection> = read_json(path)?;
    let cat_of = category_index(&ds.categories);
    let slot: HashMap<u64, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut out = vec![Vec::new(); ds.samples.len()];
    for (n, d) in raw.iter().enumerate() {
        let what = format!("detection #{n}");
        let &i = slot.get(&d.image_id).ok_or_else(|| invalid(path, format!("{what}: unknown image id {}", d.image_id)))?;
        let &c = cat_of
            .get(&d.category_id)
            .ok_or_else(|| invalid(path, format!("{what}: unknown category id {}", d.category_id)))?;
        if !d.score.is_finite() {
            return Err(invalid(path, format!("{what}: score must be finite")));
        }
        out[i].push(Detection { bbox: parse_box(path, &what, &d.bbox)?, category_id: c, score: d.score });
    }
    Ok(out)
}

pub fn detections_to_coco(dets: &[Vec<Detection>], ds: &Dataset) -> Vec<CocoDetection> {
    ds.samples
        .iter()
        .zip(dets)
        .flat_map(|(s, d)| {
            d.iter().map(move |d| CocoDetection {
                image_id: s.id,
                category_id: ds.categories[d.category_id].id,
                bbox: d.bbox.to_xywh().to_vec(),
                score: d.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file() -> CocoFile {
        CocoFile {
            images: vec![CocoImage { id: 7, width: 64, height: 64, file_name: "a.png".into() }],
            annotations: vec![CocoAnnotation { id: 3, image_id: 7, category_id: 12, bbox: vec![10.0, 10.0, 20.0, 20.0] }],
            categories: vec![CocoCategory { id: 12, name: "car".into() }],
        }
    }

    #[test]
    fn corner_box_becomes_centre_box() {
        let ds = from_coco(&file(), Path::new("x")).unwrap();
        assert_eq!(ds.num_categories(), 1);
        let a = &ds.samples[0].annotations[0];
        assert_eq!(a.bbox, BBox::new(20.0, 20.0, 20.0, 20.0).unwrap());
        assert_eq!(a.category_id, 0);
        assert_eq!(to_coco(&ds), file());
    }

    #[test]
    fn zero_width_names_the_annotation() {
        let mut f = file();
        f.annotations[0].bbox[2] = 0.0;
        let msg = from_coco(&f, Path::new("x")).unwrap_err().to_string();
        assert!(msg.contains("annotation 3"), "{msg}");
    }

    #[test]
    fn unknown_references_rejected() {
        let mut f = file();
        f.annotations[0].category_id = 99;
        assert!(from_coco(&f, Path::new("x")).unwrap_err().to_string().contains("unknown category id 99"));
        let mut f = file();
        f.annotations[0].image_id = 1;
        assert!(from_coco(&f, Path::new("x")).unwrap_err().to_string().contains("unknown image id 1"));
    }
}
