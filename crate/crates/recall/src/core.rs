//! Shared domain model: class ids and sets, images, label maps, samples and
//! datasets, plus the paired-PNG interchange format and seeded RNG helpers.
//!
//! All types here are immutable after construction and safe to share across
//! threads; every operation is a pure function of its inputs.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-pixel semantic class index. Id 0 is reserved for the background class.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClassId(pub u8);

/// The background class `b`.
pub const BACKGROUND: ClassId = ClassId(0);

impl ClassId {
    pub fn is_background(self) -> bool {
        self.0 == 0
    }

    /// Canonical query/display name, e.g. `class07`; background is `background`.
    pub fn name(self) -> String {
        if self.is_background() {
            "background".to_string()
        } else {
            format!("class{:02}", self.0)
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
    #[error("label {label} at ({row},{col}) outside the class universe")]
    LabelOutOfUniverse { label: u8, row: usize, col: usize },
    #[error("image is {ih}x{iw} but label map is {lh}x{lw}")]
    ShapeMismatch {
        ih: usize,
        iw: usize,
        lh: usize,
        lw: usize,
    },
    #[error("bad manifest: {0}")]
    BadManifest(String),
}

/// Ordered set of class ids. Iteration is always ascending by id.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassSet {
    members: Vec<ClassId>,
}

impl ClassSet {
    pub fn new<I: IntoIterator<Item = ClassId>>(ids: I) -> Self {
        let set: BTreeSet<ClassId> = ids.into_iter().collect();
        ClassSet {
            members: set.into_iter().collect(),
        }
    }

    pub fn empty() -> Self {
        ClassSet::default()
    }

    /// Dense universe {0, 1, ..., num_foreground} including background.
    pub fn universe(num_foreground: usize) -> Self {
        ClassSet {
            members: (0..=num_foreground as u8).map(ClassId).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, c: ClassId) -> bool {
        self.members.binary_search(&c).is_ok()
    }

    /// Index of `c` in ascending iteration order, if present.
    pub fn position(&self, c: ClassId) -> Option<usize> {
        self.members.binary_search(&c).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.members.iter().copied()
    }

    pub fn as_slice(&self) -> &[ClassId] {
        &self.members
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        ClassSet::new(self.iter().chain(other.iter()))
    }

    pub fn intersection(&self, other: &ClassSet) -> ClassSet {
        ClassSet {
            members: self.iter().filter(|c| other.contains(*c)).collect(),
        }
    }

    pub fn difference(&self, other: &ClassSet) -> ClassSet {
        ClassSet {
            members: self.iter().filter(|c| !other.contains(*c)).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &ClassSet) -> bool {
        self.iter().all(|c| other.contains(c))
    }

    pub fn is_disjoint_from(&self, other: &ClassSet) -> bool {
        self.iter().all(|c| !other.contains(c))
    }

    pub fn with(&self, c: ClassId) -> ClassSet {
        ClassSet::new(self.iter().chain(std::iter::once(c)))
    }

    /// Members minus the background class.
    pub fn foreground(&self) -> ClassSet {
        ClassSet {
            members: self.iter().filter(|c| !c.is_background()).collect(),
        }
    }

    pub fn max_id(&self) -> Option<ClassId> {
        self.members.last().copied()
    }
}

impl FromIterator<ClassId> for ClassSet {
    fn from_iter<I: IntoIterator<Item = ClassId>>(iter: I) -> Self {
        ClassSet::new(iter)
    }
}

impl fmt::Display for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, c) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "}}")
    }
}

/// RGB raster with values in [0,1], row-major `H x W x 3`.
#[derive(Clone, PartialEq, Debug)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "pixel buffer size");
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Snap every channel to the nearest 8-bit level so PNG round-trips are exact.
    pub fn quantize(&mut self) {
        for v in &mut self.pixels {
            *v = quantize_unit(*v);
        }
    }
}

/// Nearest 8-bit level of a unit-interval value.
pub fn quantize_unit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Per-pixel class indices, row-major `H x W`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<ClassId>) -> Self {
        assert_eq!(labels.len(), height * width, "label buffer size");
        LabelMap {
            height,
            width,
            labels,
        }
    }

    pub fn filled(height: usize, width: usize, c: ClassId) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![c; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> ClassId {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, c: ClassId) {
        self.labels[row * self.width + col] = c;
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }
}

/// The distinct class ids occurring in a label map.
pub fn present_classes(labels: &LabelMap) -> ClassSet {
    let mut seen = [false; 256];
    for c in labels.labels() {
        seen[c.0 as usize] = true;
    }
    ClassSet {
        members: (0..=255u8)
            .filter(|i| seen[*i as usize])
            .map(ClassId)
            .collect(),
    }
}

/// Keep labels in `keep`, replace everything else with `b`.
pub fn mask_to(labels: &LabelMap, keep: &ClassSet, b: ClassId) -> LabelMap {
    let masked = labels
        .labels()
        .iter()
        .map(|c| if keep.contains(*c) { *c } else { b })
        .collect();
    LabelMap::new(labels.height(), labels.width(), masked)
}

/// An image paired with its label map; `present_classes` is cached at construction.
#[derive(Clone, PartialEq, Debug)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
    present: ClassSet,
}

impl Sample {
    pub fn new(image: Image, labels: LabelMap) -> Result<Self, CoreError> {
        if image.height() != labels.height() || image.width() != labels.width() {
            return Err(CoreError::ShapeMismatch {
                ih: image.height(),
                iw: image.width(),
                lh: labels.height(),
                lw: labels.width(),
            });
        }
        let present = present_classes(&labels);
        Ok(Sample {
            image,
            labels,
            present,
        })
    }

    pub fn present_classes(&self) -> &ClassSet {
        &self.present
    }

    /// Same image, different labels (re-derives the class cache).
    pub fn with_labels(&self, labels: LabelMap) -> Result<Self, CoreError> {
        Sample::new(self.image.clone(), labels)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// Ordered collection of samples over a shared class universe.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_universe: ClassSet,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// ---------------------------------------------------------------------------
// PNG pair interchange
// ---------------------------------------------------------------------------

fn image_to_rgb8(img: &Image) -> RgbImage {
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    for row in 0..img.height() {
        for col in 0..img.width() {
            let [r, g, b] = img.get(row, col);
            let px = [
                (r.clamp(0.0, 1.0) * 255.0).round() as u8,
                (g.clamp(0.0, 1.0) * 255.0).round() as u8,
                (b.clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            out.put_pixel(col as u32, row as u32, image::Rgb(px));
        }
    }
    out
}

fn rgb8_to_image(img: &RgbImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        for col in 0..w {
            let px = img.get_pixel(col as u32, row as u32);
            pixels.push(px.0[0] as f64 / 255.0);
            pixels.push(px.0[1] as f64 / 255.0);
            pixels.push(px.0[2] as f64 / 255.0);
        }
    }
    Image::new(h, w, pixels)
}

/// Write `<name>.png` (RGB) and `<name>.labels.png` (8-bit gray, value = class id).
pub fn save_sample(dir: &Path, name: &str, sample: &Sample) -> Result<(), CoreError> {
    save_image_png(&dir.join(format!("{name}.png")), &sample.image)?;
    let mut gray = GrayImage::new(sample.labels.width() as u32, sample.labels.height() as u32);
    for row in 0..sample.labels.height() {
        for col in 0..sample.labels.width() {
            gray.put_pixel(
                col as u32,
                row as u32,
                image::Luma([sample.labels.get(row, col).0]),
            );
        }
    }
    gray.save(dir.join(format!("{name}.labels.png")))?;
    Ok(())
}

/// Read a PNG pair back; labels are validated against `universe`.
pub fn load_sample(dir: &Path, name: &str, universe: &ClassSet) -> Result<Sample, CoreError> {
    let img = load_image_png(&dir.join(format!("{name}.png")))?;
    let gray = image::open(dir.join(format!("{name}.labels.png")))?.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut labels = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let v = gray.get_pixel(col as u32, row as u32).0[0];
            if !universe.contains(ClassId(v)) {
                return Err(CoreError::LabelOutOfUniverse {
                    label: v,
                    row,
                    col,
                });
            }
            labels.push(ClassId(v));
        }
    }
    Sample::new(img, LabelMap::new(h, w, labels))
}

pub fn save_image_png(path: &Path, img: &Image) -> Result<(), CoreError> {
    image_to_rgb8(img).save(path)?;
    Ok(())
}

pub fn load_image_png(path: &Path) -> Result<Image, CoreError> {
    let img = image::open(path)?.into_rgb8();
    Ok(rgb8_to_image(&img))
}

/// Decode an in-memory PNG (or any supported raster) into an [`Image`].
pub fn decode_image_bytes(bytes: &[u8]) -> Result<Image, CoreError> {
    let img = image::load_from_memory(bytes)?.into_rgb8();
    Ok(rgb8_to_image(&img))
}

// ---------------------------------------------------------------------------
// Seeded randomness
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed for (`base`, `tag`, `idx`).
pub fn derive_seed(base: u64, tag: u64, idx: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(tag)) ^ idx)
}

/// Deterministic, platform-stable RNG from a seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
