//! On-disk dataset layout, tissue class codes and streaming region reads.
//!
//! A dataset is a directory:
//!
//! ```text
//! <root>/manifest.json
//! <root>/slides/<slide_id>/levels/<factor>/tile_<col>_<row>.png
//! <root>/slides/<slide_id>/mask.png          (optional ground truth)
//! ```
//!
//! Every level is cut into 256×256 tiles at that level's resolution; tiles on
//! the right and bottom edges are stored partial. Reads decode only the tiles
//! a request touches, so memory follows the request size, not the slide.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{GrayImage, ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

/// Side length of stored tiles and of every model patch.
pub const TILE_SIZE: u32 = 256;

/// Levels every slide must provide so 20×/10×/5× reads are exact level reads.
pub const REQUIRED_LEVELS: [u32; 3] = [1, 2, 4];

/// Padding for slide pixels outside the stored extent (glass).
pub const PAD_RGB: Rgb<u8> = Rgb([255, 255, 255]);

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: manifest does not parse: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("schema violation at `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("case `{case_id}` references unknown slide `{slide_id}`")]
    DanglingSlide { case_id: String, slide_id: String },
    #[error("unknown slide `{0}`")]
    UnknownSlide(String),
    #[error("slide `{slide_id}` has no level with downsample factor {factor}")]
    UnknownLevel { slide_id: String, factor: u32 },
    #[error("region must have positive dimensions, got {width}x{height}")]
    EmptyRegion { width: u32, height: u32 },
    #[error("region ({x},{y}) {width}x{height} does not intersect level {factor} of `{slide_id}`")]
    OutsideExtent {
        slide_id: String,
        factor: u32,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },
    #[error("invalid tissue class code {code} at ({x},{y})")]
    InvalidCode { code: u8, x: u32, y: u32 },
    #[error("mask is {actual:?} but slide `{slide_id}` is {expected:?}")]
    MaskSize {
        slide_id: String,
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("slide `{0}` has no ground-truth mask")]
    MissingMask(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> StoreError + '_ {
    move |source| StoreError::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Tissue class codes. The integer values are part of every file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TissueClass {
    Unlabeled = 0,
    ViableTumor = 1,
    NecrosisWithBone = 2,
    NecrosisWithoutBone = 3,
    NormalBone = 4,
    NormalTissue = 5,
    Cartilage = 6,
    Blank = 7,
}

impl TissueClass {
    pub const COUNT: usize = 8;

    pub const ALL: [TissueClass; 8] = [
        TissueClass::Unlabeled,
        TissueClass::ViableTumor,
        TissueClass::NecrosisWithBone,
        TissueClass::NecrosisWithoutBone,
        TissueClass::NormalBone,
        TissueClass::NormalTissue,
        TissueClass::Cartilage,
        TissueClass::Blank,
    ];

    /// The seven classes a segmenter may emit.
    pub const TISSUE: [TissueClass; 7] = [
        TissueClass::ViableTumor,
        TissueClass::NecrosisWithBone,
        TissueClass::NecrosisWithoutBone,
        TissueClass::NormalBone,
        TissueClass::NormalTissue,
        TissueClass::Cartilage,
        TissueClass::Blank,
    ];

    pub fn from_code(code: u8) -> Option<TissueClass> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Necrotic tumor: necrosis with or without bone.
    pub fn is_necrotic(self) -> bool {
        matches!(
            self,
            TissueClass::NecrosisWithBone | TissueClass::NecrosisWithoutBone
        )
    }

    pub fn is_tumor(self) -> bool {
        self == TissueClass::ViableTumor || self.is_necrotic()
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Unlabeled => "unlabeled",
            TissueClass::ViableTumor => "viable_tumor",
            TissueClass::NecrosisWithBone => "necrosis_with_bone",
            TissueClass::NecrosisWithoutBone => "necrosis_without_bone",
            TissueClass::NormalBone => "normal_bone",
            TissueClass::NormalTissue => "normal_tissue",
            TissueClass::Cartilage => "cartilage",
            TissueClass::Blank => "blank",
        }
    }

    pub fn from_name(name: &str) -> Option<TissueClass> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for TissueClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TissueClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        TissueClass::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown tissue class `{name}`")))
    }
}

/// Per-pixel tissue class codes for one slide at level 0.
#[derive(Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: u32,
    height: u32,
    codes: Vec<u8>,
}

impl fmt::Debug for LabelMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LabelMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl LabelMask {
    pub fn filled(width: u32, height: u32, class: TissueClass) -> Self {
        LabelMask {
            width,
            height,
            codes: vec![class.code(); width as usize * height as usize],
        }
    }

    /// Wraps raw codes, rejecting anything that is not a tissue class.
    pub fn from_codes(width: u32, height: u32, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != width as usize * height as usize {
            return Err(StoreError::MaskSize {
                slide_id: String::new(),
                expected: (width, height),
                actual: (codes.len() as u32, 1),
            });
        }
        if let Some(i) = codes.iter().position(|&c| c as usize >= TissueClass::COUNT) {
            return Err(StoreError::InvalidCode {
                code: codes[i],
                x: (i % width as usize) as u32,
                y: (i / width as usize) as u32,
            });
        }
        Ok(LabelMask {
            width,
            height,
            codes,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub(crate) fn codes_mut(&mut self) -> &mut [u8] {
        &mut self.codes
    }

    pub fn get(&self, x: u32, y: u32) -> TissueClass {
        TissueClass::ALL[self.codes[y as usize * self.width as usize + x as usize] as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, class: TissueClass) {
        self.codes[y as usize * self.width as usize + x as usize] = class.code();
    }

    /// Crop with out-of-bounds pixels reported as Blank.
    pub fn crop_padded(&self, x: i64, y: i64, width: u32, height: u32) -> LabelMask {
        let mut out = LabelMask::filled(width, height, TissueClass::Blank);
        let x_lo = x.max(0);
        let y_lo = y.max(0);
        let x_hi = (x + width as i64).min(self.width as i64);
        let y_hi = (y + height as i64).min(self.height as i64);
        if x_lo >= x_hi || y_lo >= y_hi {
            return out;
        }
        let run = (x_hi - x_lo) as usize;
        for sy in y_lo..y_hi {
            let src = sy as usize * self.width as usize + x_lo as usize;
            let dst = (sy - y) as usize * width as usize + (x_lo - x) as usize;
            out.codes[dst..dst + run].copy_from_slice(&self.codes[src..src + run]);
        }
        out
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(self.width, self.height, self.codes.clone())
            .expect("buffer length matches dimensions")
    }

    pub fn from_gray(img: GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        LabelMask::from_codes(w, h, img.into_raw())
    }

    /// Reads an 8-bit single channel PNG. Palette PNGs are expanded by the
    /// decoder, so they must carry their codes as gray levels.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(image_err(path))?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(StoreError::Schema {
                    key: path.display().to_string(),
                    message: format!("mask must be 8-bit single channel, got {:?}", other.color()),
                })
            }
        };
        LabelMask::from_gray(gray)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, &self.codes, self.width, self.height, image::ExtendedColorType::L8)
    }
}

pub(crate) fn write_png(
    path: &Path,
    buf: &[u8],
    width: u32,
    height: u32,
    color: image::ExtendedColorType,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let encoder = PngEncoder::new_with_quality(
        BufWriter::new(file),
        CompressionType::Fast,
        FilterType::Adaptive,
    );
    encoder
        .write_image(buf, width, height, color)
        .map_err(image_err(path))
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_png(
        path,
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(image_err(path))?.into_rgb8())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

fn is_default_split(split: &Split) -> bool {
    *split == Split::Test
}

/// Manifest entry for one slide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideMeta {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub levels: Vec<u32>,
}

impl SlideMeta {
    pub fn new(id: impl Into<String>, width: u32, height: u32) -> Self {
        SlideMeta {
            id: id.into(),
            width,
            height,
            levels: REQUIRED_LEVELS.to_vec(),
        }
    }

    pub fn has_level(&self, factor: u32) -> bool {
        self.levels.contains(&factor)
    }

    /// Dimensions of the level with the given downsample factor.
    pub fn level_dims(&self, factor: u32) -> (u32, u32) {
        (self.width.div_ceil(factor), self.height.div_ceil(factor))
    }

    /// Tile grid (columns, rows) of a level.
    pub fn tile_grid(&self, factor: u32) -> (u32, u32) {
        let (w, h) = self.level_dims(factor);
        (w.div_ceil(TILE_SIZE), h.div_ceil(TILE_SIZE))
    }
}

/// Clinical row for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub id: String,
    pub slides: Vec<String>,
    /// Necrosis ratio from the pathology report, as a fraction.
    pub r_pr: Option<f64>,
    pub os_months: Option<f64>,
    pub os_event: bool,
    pub pfs_months: Option<f64>,
    pub pfs_event: bool,
    /// `None` when the status was never recorded.
    pub metastasis_at_diagnosis: Option<bool>,
    #[serde(default, skip_serializing_if = "is_default_split")]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub slides: Vec<SlideMeta>,
    pub cases: Vec<CaseRecord>,
}

fn schema(key: impl Into<String>, message: impl Into<String>) -> StoreError {
    StoreError::Schema {
        key: key.into(),
        message: message.into(),
    }
}

/// Slide ids become directory names, so they are restricted to a safe set.
fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl Manifest {
    /// Checks semantic rules that serde cannot express, including
    /// referential integrity between cases and slides.
    pub fn validate(&self) -> Result<()> {
        let mut slide_ids = HashSet::new();
        for (i, s) in self.slides.iter().enumerate() {
            if !valid_id(&s.id) {
                return Err(schema(format!("slides[{i}].id"), format!("invalid slide id `{}`", s.id)));
            }
            if !slide_ids.insert(s.id.as_str()) {
                return Err(schema(format!("slides[{i}].id"), format!("duplicate slide id `{}`", s.id)));
            }
            if s.width == 0 || s.height == 0 {
                return Err(schema(
                    format!("slides[{i}].width"),
                    format!("slide `{}` has zero area", s.id),
                ));
            }
            for (j, &f) in s.levels.iter().enumerate() {
                if !f.is_power_of_two() {
                    return Err(schema(
                        format!("slides[{i}].levels[{j}]"),
                        format!("downsample factor {f} is not a power of two"),
                    ));
                }
            }
            for f in REQUIRED_LEVELS {
                if !s.has_level(f) {
                    return Err(schema(
                        format!("slides[{i}].levels"),
                        format!("slide `{}` lacks required level {f}", s.id),
                    ));
                }
            }
        }
        let mut case_ids = HashSet::new();
        for (i, c) in self.cases.iter().enumerate() {
            if c.id.is_empty() || !case_ids.insert(c.id.as_str()) {
                return Err(schema(format!("cases[{i}].id"), format!("missing or duplicate case id `{}`", c.id)));
            }
            if c.slides.is_empty() {
                return Err(schema(format!("cases[{i}].slides"), format!("case `{}` has no slides", c.id)));
            }
            for slide in &c.slides {
                if !slide_ids.contains(slide.as_str()) {
                    return Err(StoreError::DanglingSlide {
                        case_id: c.id.clone(),
                        slide_id: slide.clone(),
                    });
                }
            }
            if let Some(r) = c.r_pr {
                if !(0.0..=1.0).contains(&r) {
                    return Err(schema(format!("cases[{i}].r_pr"), format!("{r} is not a fraction in [0,1]")));
                }
            }
            for (key, t) in [("os_months", c.os_months), ("pfs_months", c.pfs_months)] {
                if let Some(t) = t {
                    if !t.is_finite() || t < 0.0 {
                        return Err(schema(format!("cases[{i}].{key}"), format!("{t} is not a non-negative time")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }
}

/// A loaded dataset index with resolved slide references.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    slide_index: HashMap<String, usize>,
}

/// Loads `manifest.json` from a dataset directory (or the file itself).
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (root, path.to_path_buf())
    };
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| StoreError::Json {
        path: file.clone(),
        source,
    })?;
    Dataset::new(root, manifest)
}

impl Dataset {
    pub fn new(root: PathBuf, manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        let slide_index = manifest
            .slides
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Ok(Dataset {
            root,
            manifest,
            slide_index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn slides(&self) -> &[SlideMeta] {
        &self.manifest.slides
    }

    pub fn cases(&self) -> &[CaseRecord] {
        &self.manifest.cases
    }

    pub fn cases_in(&self, split: Split) -> impl Iterator<Item = &CaseRecord> {
        self.manifest.cases.iter().filter(move |c| c.split == split)
    }

    pub fn slide_meta(&self, id: &str) -> Result<&SlideMeta> {
        self.slide_index
            .get(id)
            .map(|&i| &self.manifest.slides[i])
            .ok_or_else(|| StoreError::UnknownSlide(id.to_string()))
    }

    pub fn slide(&self, id: &str) -> Result<SlidePyramid> {
        let meta = self.slide_meta(id)?.clone();
        Ok(SlidePyramid::new(slide_dir(&self.root, id), meta))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        slide_dir(&self.root, id).join("mask.png")
    }

    /// Ground-truth mask of a slide, checked against the slide dimensions.
    pub fn mask(&self, id: &str) -> Result<LabelMask> {
        let meta = self.slide_meta(id)?;
        let path = self.mask_path(id);
        if !path.exists() {
            return Err(StoreError::MissingMask(id.to_string()));
        }
        let mask = LabelMask::load_png(&path)?;
        check_mask_dims(meta, &mask)?;
        Ok(mask)
    }
}

pub fn check_mask_dims(meta: &SlideMeta, mask: &LabelMask) -> Result<()> {
    if mask.dims() != (meta.width, meta.height) {
        return Err(StoreError::MaskSize {
            slide_id: meta.id.clone(),
            expected: (meta.width, meta.height),
            actual: mask.dims(),
        });
    }
    Ok(())
}

pub fn slide_dir(root: &Path, slide_id: &str) -> PathBuf {
    root.join("slides").join(slide_id)
}

fn tile_path(dir: &Path, factor: u32, col: u32, row: u32) -> PathBuf {
    dir.join("levels")
        .join(factor.to_string())
        .join(format!("tile_{col}_{row}.png"))
}

/// Read handle on one stored slide pyramid. Cheap to clone and safe to read
/// from many threads.
#[derive(Debug, Clone)]
pub struct SlidePyramid {
    dir: PathBuf,
    meta: SlideMeta,
}

impl SlidePyramid {
    pub fn new(dir: PathBuf, meta: SlideMeta) -> Self {
        SlidePyramid { dir, meta }
    }

    pub fn meta(&self) -> &SlideMeta {
        &self.meta
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn read_tile(&self, factor: u32, col: u32, row: u32) -> Result<RgbImage> {
        let path = tile_path(&self.dir, factor, col, row);
        load_rgb_png(&path)
    }

    /// Reads a `width`×`height` raster at level `factor`, with `(x, y)` in
    /// that level's pixel coordinates. Pixels outside the level are white.
    pub fn read_region(&self, factor: u32, x: i64, y: i64, width: u32, height: u32) -> Result<RgbImage> {
        if !self.meta.has_level(factor) {
            return Err(StoreError::UnknownLevel {
                slide_id: self.meta.id.clone(),
                factor,
            });
        }
        if width == 0 || height == 0 {
            return Err(StoreError::EmptyRegion { width, height });
        }
        let (lw, lh) = self.meta.level_dims(factor);
        let x_lo = x.max(0);
        let y_lo = y.max(0);
        let x_hi = (x + width as i64).min(lw as i64);
        let y_hi = (y + height as i64).min(lh as i64);
        if x_lo >= x_hi || y_lo >= y_hi {
            return Err(StoreError::OutsideExtent {
                slide_id: self.meta.id.clone(),
                factor,
                x,
                y,
                width,
                height,
            });
        }

        let mut out = RgbImage::from_pixel(width, height, PAD_RGB);
        let ts = TILE_SIZE as i64;
        for row in (y_lo / ts)..=((y_hi - 1) / ts) {
            for col in (x_lo / ts)..=((x_hi - 1) / ts) {
                let tile = self.read_tile(factor, col as u32, row as u32)?;
                let (tx0, ty0) = (col * ts, row * ts);
                let cx_lo = x_lo.max(tx0);
                let cx_hi = x_hi.min(tx0 + tile.width() as i64);
                let cy_lo = y_lo.max(ty0);
                let cy_hi = y_hi.min(ty0 + tile.height() as i64);
                if cx_lo >= cx_hi {
                    continue;
                }
                let run = 3 * (cx_hi - cx_lo) as usize;
                let src = tile.as_raw();
                let dst = &mut *out;
                for gy in cy_lo..cy_hi {
                    let s = 3 * ((gy - ty0) as usize * tile.width() as usize + (cx_lo - tx0) as usize);
                    let d = 3 * ((gy - y) as usize * width as usize + (cx_lo - x) as usize);
                    dst[d..d + run].copy_from_slice(&src[s..s + run]);
                }
            }
        }
        Ok(out)
    }

    /// Reads a whole level into memory.
    pub fn read_level(&self, factor: u32) -> Result<RgbImage> {
        let (w, h) = self.meta.level_dims(factor);
        self.read_region(factor, 0, 0, w, h)
    }
}

/// Writes a full-resolution raster as a pyramid with box-filtered levels.
/// Convenient for small slides; the generator streams large ones itself.
pub fn write_pyramid(root: &Path, meta: &SlideMeta, level0: &RgbImage) -> Result<SlidePyramid> {
    if level0.dimensions() != (meta.width, meta.height) {
        return Err(StoreError::MaskSize {
            slide_id: meta.id.clone(),
            expected: (meta.width, meta.height),
            actual: level0.dimensions(),
        });
    }
    let dir = slide_dir(root, &meta.id);
    for &factor in &meta.levels {
        let level = if factor == 1 {
            level0.clone()
        } else {
            downsample_box(level0, factor)
        };
        write_level_tiles(&dir, factor, &level, 0)?;
    }
    Ok(SlidePyramid::new(dir, meta.clone()))
}

/// Writes the tiles of a horizontal band of a level. `band` holds whole tile
/// rows starting at tile row `first_row`.
pub(crate) fn write_level_tiles(dir: &Path, factor: u32, band: &RgbImage, first_row: u32) -> Result<()> {
    let (w, h) = band.dimensions();
    for row in 0..h.div_ceil(TILE_SIZE) {
        for col in 0..w.div_ceil(TILE_SIZE) {
            let x = col * TILE_SIZE;
            let y = row * TILE_SIZE;
            let tw = TILE_SIZE.min(w - x);
            let th = TILE_SIZE.min(h - y);
            let tile = image::imageops::crop_imm(band, x, y, tw, th).to_image();
            save_rgb_png(&tile_path(dir, factor, col, first_row + row), &tile)?;
        }
    }
    Ok(())
}

/// Area-averaging downsample; partial edge blocks average their in-bounds
/// pixels only. Rounds half up.
pub fn downsample_box(src: &RgbImage, factor: u32) -> RgbImage {
    let (w, h) = src.dimensions();
    let (dw, dh) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut out = RgbImage::new(dw, dh);
    for oy in 0..dh {
        for ox in 0..dw {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for y in oy * factor..((oy + 1) * factor).min(h) {
                for x in ox * factor..((ox + 1) * factor).min(w) {
                    let p = src.get_pixel(x, y);
                    for c in 0..3 {
                        sum[c] += p[c] as u32;
                    }
                    n += 1;
                }
            }
            out.put_pixel(ox, oy, Rgb(sum.map(|s| ((s + n / 2) / n) as u8)));
        }
    }
    out
}
