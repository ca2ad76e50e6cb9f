//! Dataset ingestion: INRIA-layout person annotations, COCO-JSON subsets,
//! normalized JSON manifests, and synthetic desk-scale data paired with the
//! toy detector.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::{builtin_template, ToyTemplate};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::Image;

/// Backing storage of one sample image.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Memory(Arc<Image>),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub source: ImageSource,
    pub width: usize,
    pub height: usize,
    /// Ground-truth boxes of the target category, in annotation order.
    pub boxes: Vec<BBox>,
}

impl Sample {
    pub fn load_image(&self) -> Result<Image> {
        match &self.source {
            ImageSource::Memory(img) => Ok(img.as_ref().clone()),
            ImageSource::Path(path) => {
                let img = image::open(path)
                    .map_err(|e| Error::NotFound(format!("image {}: {e}", path.display())))?
                    .into_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let mut out = Array3::zeros((h, w, 3));
                for (x, y, px) in img.enumerate_pixels() {
                    for ch in 0..3 {
                        out[[y as usize, x as usize, ch]] = px.0[ch] as f64 / 255.0;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Images plus ground-truth boxes for one target category.
#[derive(Debug, Clone)]
pub struct AnnotatedDataset {
    pub id: String,
    pub category: String,
    pub samples: Vec<Sample>,
}

impl AnnotatedDataset {
    pub fn total_boxes(&self) -> usize {
        self.samples.iter().map(|s| s.boxes.len()).sum()
    }
}

fn box_intersects_frame(b: &BBox, width: usize, height: usize) -> bool {
    b.x < width as f64 && b.y < height as f64 && b.x + b.w > 0.0 && b.y + b.h > 0.0
}

fn keep_valid_boxes(boxes: Vec<BBox>, width: usize, height: usize, ctx: &str) -> Vec<BBox> {
    boxes
        .into_iter()
        .filter(|b| {
            let ok = b.w > 0.0 && b.h > 0.0 && box_intersects_frame(b, width, height);
            if !ok {
                log::warn!("{ctx}: dropping degenerate box {b:?}");
            }
            ok
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InriaSplit {
    Train,
    Test,
}

impl InriaSplit {
    fn dir_name(&self) -> &'static str {
        match self {
            InriaSplit::Train => "Train",
            InriaSplit::Test => "Test",
        }
    }
}

/// Parse the INRIA Person plain-text annotation layout:
/// `root/<Split>/annotations/*.txt` with `Image filename`, `Image size`, and
/// `Bounding box` lines, images referenced relative to `root`.
pub fn load_inria(root: &Path, split: InriaSplit) -> Result<AnnotatedDataset> {
    let ann_dir = root.join(split.dir_name()).join("annotations");
    if !ann_dir.is_dir() {
        return Err(Error::NotFound(format!(
            "annotation directory {}",
            ann_dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&ann_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |e| e == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        log::warn!("no annotation files under {}", ann_dir.display());
    }

    let mut samples = Vec::new();
    for file in files {
        // INRIA annotations are ISO-8859-1; decode lossily
        let bytes = std::fs::read(&file)?;
        let text = String::from_utf8_lossy(&bytes);
        let mut image_rel: Option<String> = None;
        let mut size: Option<(usize, usize)> = None;
        let mut boxes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("Image filename :") {
                image_rel = Some(rest.trim().trim_matches('"').to_string());
            } else if line.starts_with("Image size") {
                let rhs = line.split(':').nth(1).ok_or_else(|| parse_err(&file, lineno, line))?;
                let dims: Vec<usize> = rhs
                    .split('x')
                    .filter_map(|t| t.trim().parse().ok())
                    .collect();
                if dims.len() < 2 {
                    return Err(parse_err(&file, lineno, line));
                }
                size = Some((dims[0], dims[1]));
            } else if line.starts_with("Bounding box") {
                let rhs = line
                    .rsplit(':')
                    .next()
                    .ok_or_else(|| parse_err(&file, lineno, line))?;
                let nums: Vec<f64> = rhs
                    .split(|c: char| !(c.is_ascii_digit() || c == '-' || c == '.'))
                    .filter(|t| !t.is_empty())
                    .filter_map(|t| t.parse().ok())
                    .collect();
                if nums.len() != 4 {
                    return Err(parse_err(&file, lineno, line));
                }
                let (xmin, ymin, xmax, ymax) = (nums[0], nums[1], nums[2], nums[3]);
                boxes.push(BBox { x: xmin, y: ymin, w: xmax - xmin, h: ymax - ymin });
            }
        }
        let image_rel = image_rel.ok_or_else(|| Error::Parse {
            file: file.clone(),
            line: None,
            msg: "missing Image filename line".into(),
        })?;
        let (w, h) = size.ok_or_else(|| Error::Parse {
            file: file.clone(),
            line: None,
            msg: "missing Image size line".into(),
        })?;
        let image_path = root.join(&image_rel);
        if !image_path.is_file() {
            return Err(Error::NotFound(format!("image {}", image_path.display())));
        }
        let boxes = keep_valid_boxes(boxes, w, h, &file.display().to_string());
        samples.push(Sample {
            source: ImageSource::Path(image_path),
            width: w,
            height: h,
            boxes,
        });
    }
    if samples.is_empty() {
        log::warn!("INRIA {split:?} split at {} is empty", root.display());
    }
    Ok(AnnotatedDataset {
        id: format!("inria-{}", split.dir_name().to_lowercase()),
        category: "person".into(),
        samples,
    })
}

fn parse_err(file: &Path, lineno: usize, line: &str) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line: Some(lineno + 1),
        msg: format!("malformed annotation line: {line}"),
    }
}

#[derive(Deserialize)]
struct CocoJson {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnn>,
    categories: Vec<CocoCat>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct CocoAnn {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCat {
    id: u64,
    name: String,
}

/// Load the subset of a COCO-format detection JSON whose images contain at
/// least one annotation of the named category.
pub fn load_coco_subset(
    ann_json: &Path,
    images_dir: &Path,
    category_name: &str,
) -> Result<AnnotatedDataset> {
    let text = std::fs::read_to_string(ann_json)
        .map_err(|_| Error::NotFound(format!("annotation file {}", ann_json.display())))?;
    let coco: CocoJson = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: ann_json.to_path_buf(),
        line: None,
        msg: e.to_string(),
    })?;
    let cat_id = coco
        .categories
        .iter()
        .find(|c| c.name == category_name)
        .map(|c| c.id)
        .ok_or_else(|| {
            Error::invalid(format!("category {category_name:?} not present in {}", ann_json.display()))
        })?;

    let mut images: Vec<&CocoImage> = coco.images.iter().collect();
    images.sort_by(|a, b| a.file_name.cmp(&b.file_name));

    let mut samples = Vec::new();
    for img in images {
        let boxes: Vec<BBox> = coco
            .annotations
            .iter()
            .filter(|a| a.image_id == img.id && a.category_id == cat_id)
            .map(|a| BBox { x: a.bbox[0], y: a.bbox[1], w: a.bbox[2], h: a.bbox[3] })
            .collect();
        let boxes = keep_valid_boxes(boxes, img.width, img.height, &img.file_name);
        if boxes.is_empty() {
            continue;
        }
        samples.push(Sample {
            source: ImageSource::Path(images_dir.join(&img.file_name)),
            width: img.width,
            height: img.height,
            boxes,
        });
    }
    Ok(AnnotatedDataset {
        id: format!("coco-{category_name}"),
        category: category_name.into(),
        samples,
    })
}

/// One entry of the normalized JSON manifest.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<[f64; 4]>,
}

/// Load the normalized manifest format: a JSON array of
/// `{image, width, height, boxes: [[x,y,w,h], ...]}` with image paths
/// resolved relative to the manifest location.
pub fn load_manifest(path: &Path, category: &str) -> Result<AnnotatedDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::NotFound(format!("manifest {}", path.display())))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: None,
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples: Vec<Sample> = entries
        .into_iter()
        .map(|e| {
            let boxes = e
                .boxes
                .iter()
                .map(|b| BBox { x: b[0], y: b[1], w: b[2], h: b[3] })
                .collect();
            Sample {
                source: ImageSource::Path(base.join(&e.image)),
                width: e.width,
                height: e.height,
                boxes: keep_valid_boxes(boxes, e.width, e.height, &e.image),
            }
        })
        .collect();
    samples.sort_by(|a, b| match (&a.source, &b.source) {
        (ImageSource::Path(x), ImageSource::Path(y)) => x.cmp(y),
        _ => std::cmp::Ordering::Equal,
    });
    Ok(AnnotatedDataset {
        id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "manifest".into()),
        category: category.into(),
        samples,
    })
}

/// Write a dataset as a normalized manifest (paths as given, not copied).
pub fn write_manifest(dataset: &AnnotatedDataset, path: &Path) -> Result<()> {
    let entries: Vec<ManifestEntry> = dataset
        .samples
        .iter()
        .map(|s| ManifestEntry {
            image: match &s.source {
                ImageSource::Path(p) => p.display().to_string(),
                ImageSource::Memory(_) => "<memory>".into(),
            },
            width: s.width,
            height: s.height,
            boxes: s.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&entries)?)?;
    Ok(())
}

/// Parameters of the synthetic toy dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Built-in template name of the paired toy detector.
    pub template: String,
    pub background_level: f64,
    pub background_noise: f64,
    /// Template contrasts are laid out evenly over this range so detection
    /// scores grade smoothly across the dataset.
    pub contrast_lo: f64,
    pub contrast_hi: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 32,
            image_size: 96,
            template: "rings-red".into(),
            background_level: 0.5,
            background_noise: 0.02,
            contrast_lo: 0.45,
            contrast_hi: 1.0,
        }
    }
}

/// Generate images containing the toy template at random grid-aligned
/// positions, with exact ground-truth boxes.
pub fn synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<AnnotatedDataset> {
    let template = builtin_template(&spec.template)?;
    synthetic_dataset_with_template(spec, &template, seed)
}

pub fn synthetic_dataset_with_template(
    spec: &SyntheticSpec,
    template: &ToyTemplate,
    seed: u64,
) -> Result<AnnotatedDataset> {
    let k = template.side();
    let n = spec.image_size;
    if k > n {
        return Err(Error::invalid("template larger than synthetic image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // positions snapped to the detector's window grid so a clean detection
    // matches its ground-truth box exactly
    let grid: Vec<usize> = (0..)
        .map(|i| i * template.stride)
        .take_while(|&p| p + k <= n)
        .collect();
    let mut samples = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut img = Array3::from_shape_simple_fn((n, n, 3), || {
            spec.background_level + rng.gen_range(-spec.background_noise..=spec.background_noise)
        });
        let x = grid[rng.gen_range(0..grid.len())];
        let y = grid[rng.gen_range(0..grid.len())];
        let contrast = if spec.count > 1 {
            spec.contrast_lo
                + (spec.contrast_hi - spec.contrast_lo) * i as f64 / (spec.count - 1) as f64
        } else {
            spec.contrast_hi
        };
        for ty in 0..k {
            for tx in 0..k {
                for ch in 0..3 {
                    img[[y + ty, x + tx, ch]] =
                        0.5 + contrast * (template.pixels[[ty, tx, ch]] - 0.5);
                }
            }
        }
        samples.push(Sample {
            source: ImageSource::Memory(Arc::new(img)),
            width: n,
            height: n,
            boxes: vec![BBox { x: x as f64, y: y as f64, w: k as f64, h: k as f64 }],
        });
    }
    Ok(AnnotatedDataset {
        id: format!("synthetic-{}-s{seed}", template.name),
        category: "toy-object".into(),
        samples,
    })
}
