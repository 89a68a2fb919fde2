//! Bitemporal samples, the on-disk dataset layout, synthetic generation,
//! augmentation and test-time perturbations.
//!
//! ```text
//! <root>/A/<id>.png        image at time 1
//! <root>/B/<id>.png        image at time 2
//! <root>/label/<id>.png    change mask, 0 or 255
//! <root>/captions.jsonl    {"id", "t1", "t2"} per line
//! <root>/manifest.json     {"count", "size", "seed", "format_version"}
//! ```

pub mod augment;
pub mod perturb;
pub mod synth;

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::encoders::captions::{load_captions, write_captions, CaptionPair};
use crate::error::{Error, Result};
use crate::metrics::ChangeMask;
use crate::model::ModelInput;
use crate::tensor::{Shape, Tensor};

pub use self::augment::{augment, AugmentConfig};
pub use self::perturb::{perturb, Perturbation};
pub use self::synth::{generate_dataset, generate_sample, generate_samples, SceneSpec};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalSample {
    pub id: String,
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub caption_a: String,
    pub caption_b: String,
    pub mask: ChangeMask,
}

impl BiTemporalSample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Checks that both images and the mask share one `H×W`.
    pub fn validate(&self) -> Result<()> {
        let want = Shape::new(1, 3, self.height(), self.width());
        self.image_a.expect_shape(want)?;
        self.image_b.expect_shape(want)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub format_version: u32,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Option<Manifest>,
    pub samples: Vec<BiTemporalSample>,
    /// False when the dataset has no `captions.jsonl`.
    pub has_captions: bool,
}

/// Several samples stacked along the batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images_a: Tensor,
    pub images_b: Tensor,
    pub captions_a: Vec<String>,
    pub captions_b: Vec<String>,
    pub masks: Vec<ChangeMask>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a BiTemporalSample>) -> Result<Self> {
        let samples: Vec<&BiTemporalSample> = samples.into_iter().collect();
        let a: Vec<&Tensor> = samples.iter().map(|s| &s.image_a).collect();
        let b: Vec<&Tensor> = samples.iter().map(|s| &s.image_b).collect();
        Ok(Self {
            images_a: Tensor::stack(&a)?,
            images_b: Tensor::stack(&b)?,
            captions_a: samples.iter().map(|s| s.caption_a.clone()).collect(),
            captions_b: samples.iter().map(|s| s.caption_b.clone()).collect(),
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            images_a: &self.images_a,
            images_b: &self.images_b,
            captions_a: &self.captions_a,
            captions_b: &self.captions_b,
        }
    }

    /// Mask bytes in `(n, h, w)` order, as the loss expects.
    pub fn targets(&self) -> Vec<u8> {
        self.masks.iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

/// Rounds `[0,1]` values to 8-bit.
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_rgb(image: &Tensor) -> RgbImage {
    let s = image.shape();
    assert_eq!((s.n, s.c), (1, 3), "expected a 1×3×H×W image");
    RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|c| to_u8(image.at(0, c, y, x))))
    })
}

pub fn rgb_to_image(rgb: &RgbImage) -> Tensor {
    let (w, h) = rgb.dimensions();
    Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

/// Snaps values to the 8-bit grid so in-memory samples equal their PNGs.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| f64::from(to_u8(v)) / 255.0)
}

pub fn mask_to_gray(mask: &ChangeMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

/// Deterministic PNG bytes for any 8-bit buffer.
pub fn png_bytes<P, C>(img: &image::ImageBuffer<P, C>) -> Vec<u8>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
    C: std::ops::Deref<Target = [u8]>,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("PNG encoding to memory");
    out.into_inner()
}

pub fn save_rgb(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, png_bytes(&image_to_rgb(image))).map_err(|e| Error::io(path, e))
}

pub fn save_mask(path: &Path, mask: &ChangeMask) -> Result<()> {
    fs::write(path, png_bytes(&mask_to_gray(mask))).map_err(|e| Error::io(path, e))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_image(&open_image(path)?.to_rgb8()))
}

/// Pixels above mid-grey are changed.
pub fn load_mask(path: &Path) -> Result<ChangeMask> {
    let g = open_image(path)?.to_luma8();
    let (w, h) = g.dimensions();
    ChangeMask::from_vec(h as usize, w as usize, g.pixels().map(|p| u8::from(p[0] > 127)).collect())
}

/// Writes one sample's three PNGs under `root`.
pub fn write_sample(root: &Path, sample: &BiTemporalSample) -> Result<()> {
    save_rgb(&root.join("A").join(format!("{}.png", sample.id)), &sample.image_a)?;
    save_rgb(&root.join("B").join(format!("{}.png", sample.id)), &sample.image_b)?;
    save_mask(&root.join("label").join(format!("{}.png", sample.id)), &sample.mask)
}

/// Writes a complete dataset directory.
pub fn write_dataset(root: &Path, manifest: &Manifest, samples: &[BiTemporalSample]) -> Result<()> {
    for sub in ["A", "B", "label"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        write_sample(root, s)?;
    }
    let pairs: Vec<CaptionPair> = samples
        .iter()
        .map(|s| CaptionPair {
            id: s.id.clone(),
            t1: s.caption_a.clone(),
            t2: s.caption_b.clone(),
        })
        .collect();
    write_captions(&root.join("captions.jsonl"), &pairs)?;
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serialises") + "\n";
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads every `A/<id>.png` with its partner and label, in id order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let dataset_err = |message: String| Error::Dataset {
        path: root.to_path_buf(),
        message,
    };
    let manifest_path = root.join("manifest.json");
    let manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(
            serde_json::from_str::<Manifest>(&text)
                .map_err(|e| dataset_err(format!("manifest.json: {e}")))?,
        )
    } else {
        None
    };
    let a_dir = root.join("A");
    let mut ids: Vec<String> = fs::read_dir(&a_dir)
        .map_err(|e| Error::io(&a_dir, e))?
        .filter_map(|entry| {
            let p = entry.ok()?.path();
            (p.extension()? == "png").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    ids.sort();
    let captions_path = root.join("captions.jsonl");
    let captions = if captions_path.exists() {
        Some(load_captions(&captions_path)?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image_a = load_rgb(&a_dir.join(format!("{id}.png")))?;
        let image_b = load_rgb(&root.join("B").join(format!("{id}.png")))?;
        let mask = load_mask(&root.join("label").join(format!("{id}.png")))?;
        let (caption_a, caption_b) = match &captions {
            Some(map) => {
                let p = map.get(&id).ok_or_else(|| Error::MissingCaption(id.clone()))?;
                (p.t1.clone(), p.t2.clone())
            }
            None => (String::new(), String::new()),
        };
        let sample = BiTemporalSample {
            id,
            image_a,
            image_b,
            caption_a,
            caption_b,
            mask,
        };
        sample
            .validate()
            .map_err(|e| dataset_err(format!("sample `{}`: {e}", sample.id)))?;
        samples.push(sample);
    }
    if let Some(m) = &manifest {
        if m.count != samples.len() {
            return Err(dataset_err(format!(
                "manifest lists {} samples, found {}",
                m.count,
                samples.len()
            )));
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        has_captions: captions.is_some(),
        samples,
    })
}
