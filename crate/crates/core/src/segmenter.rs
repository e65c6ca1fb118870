//! Segmentation backends and the full-slide runner.
//!
//! A backend turns a batch of [`MultiMagPatch`]es into 256×256 label
//! patches. Three kinds exist:
//!
//! - `oracle`: crops the ground-truth mask; the identity baseline.
//! - `chromatic`: nearest palette color per p20 pixel, with optional seeded
//!   mislabel injection.
//! - `external`: hands batches to another process over a directory protocol.
//!
//! # External protocol
//!
//! For every batch the runner creates a directory holding `batch.json`
//! (`{"items":[{"id","p20","p10","p5"}, ...]}`, file names relative to the
//! directory) and the three RGB PNGs per item, plus an empty `out/`. The
//! configured command runs with the directory path appended as its last
//! argument and must write `out/<id>.png` (8-bit gray, tissue codes 1–7) for
//! every item, then exit 0.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::palette::Palette;
use crate::slide_store::{
    check_mask_dims, save_rgb_png, LabelMask, SlidePyramid, StoreError, TissueClass, TILE_SIZE,
};
use crate::synth::derive_seed;
use crate::tiler::{extract, schedule, Magnification, MultiMagPatch, TileCoord, TilerError};

const PATCH_PIXELS: usize = (TILE_SIZE * TILE_SIZE) as usize;

#[derive(Debug, thiserror::Error)]
pub enum SegmentError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tiler(#[from] TilerError),
    #[error("oracle backend needs the ground-truth mask of slide `{0}`")]
    MissingTruth(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("failed to launch `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("`{command}` exited with {status}")]
    ExitStatus { command: String, status: String },
    #[error("`{command}` did not finish within {timeout:?}")]
    Timeout { command: String, timeout: Duration },
    #[error("external backend wrote no output for item `{0}`")]
    MissingOutput(String),
    #[error("malformed output for item `{id}`: {reason}")]
    MalformedOutput { id: String, reason: String },
    #[error("batch directory {path}: {source}")]
    BatchIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("slide `{slide_id}` tile ({col},{row}): {source}")]
    Tile {
        slide_id: String,
        col: u32,
        row: u32,
        #[source]
        source: Box<SegmentError>,
    },
}

pub type Result<T> = std::result::Result<T, SegmentError>;

/// Label answer for one tile: a full 256×256 grid, of which only the tile's
/// effective extent is written back into the slide mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPatch {
    pub tile: TileCoord,
    codes: Vec<u8>,
}

impl LabelPatch {
    /// Accepts only 256×256 grids of tissue codes 1–7.
    pub fn new(tile: TileCoord, codes: Vec<u8>) -> std::result::Result<Self, String> {
        if codes.len() != PATCH_PIXELS {
            return Err(format!("expected {PATCH_PIXELS} labels, got {}", codes.len()));
        }
        if let Some(i) = codes.iter().position(|&c| c == 0 || c as usize >= TissueClass::COUNT) {
            return Err(format!(
                "invalid code {} at ({},{})",
                codes[i],
                i % TILE_SIZE as usize,
                i / TILE_SIZE as usize
            ));
        }
        Ok(LabelPatch { tile, codes })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn get(&self, x: u32, y: u32) -> TissueClass {
        TissueClass::ALL[self.codes[(y * TILE_SIZE + x) as usize] as usize]
    }
}

fn default_batch_size() -> usize {
    16
}

fn default_timeout_secs() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Oracle,
    Chromatic {
        /// Overrides on top of the canonical palette.
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        palette: BTreeMap<TissueClass, [u8; 3]>,
        /// Probability that a pixel is relabeled to a random other class.
        #[serde(default)]
        mislabel_rate: f64,
        #[serde(default)]
        seed: u64,
    },
    External {
        /// Program and leading arguments; the batch directory is appended.
        command: Vec<String>,
        /// Where batch directories are created (system temp dir if absent).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        workdir: Option<PathBuf>,
        #[serde(default = "default_batch_size")]
        batch_size: usize,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
    },
}

impl BackendConfig {
    pub fn chromatic() -> Self {
        BackendConfig::Chromatic {
            palette: BTreeMap::new(),
            mislabel_rate: 0.0,
            seed: 0,
        }
    }

    pub fn chromatic_with_faults(mislabel_rate: f64, seed: u64) -> Self {
        BackendConfig::Chromatic {
            palette: BTreeMap::new(),
            mislabel_rate,
            seed,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BackendConfig::Oracle => "oracle",
            BackendConfig::Chromatic { .. } => "chromatic",
            BackendConfig::External { .. } => "external",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackendConfig::Oracle => Ok(()),
            BackendConfig::Chromatic { mislabel_rate, .. } => {
                if (0.0..=1.0).contains(mislabel_rate) {
                    Ok(())
                } else {
                    Err(SegmentError::Config(format!("mislabel_rate {mislabel_rate} is not in [0,1]")))
                }
            }
            BackendConfig::External {
                command,
                batch_size,
                timeout_secs,
                ..
            } => {
                if command.is_empty() || command[0].is_empty() {
                    return Err(SegmentError::Config("external backend needs a command".into()));
                }
                if *batch_size == 0 {
                    return Err(SegmentError::Config("batch_size must be positive".into()));
                }
                if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                    return Err(SegmentError::Config("timeout_secs must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

/// A configured backend bound to one slide.
pub trait Segmenter: Sync {
    fn segment_batch(&self, patches: &[MultiMagPatch]) -> Result<Vec<LabelPatch>>;

    /// Preferred number of patches per call.
    fn batch_size(&self) -> usize {
        1
    }
}

pub struct OracleSegmenter<'a> {
    truth: &'a LabelMask,
}

impl<'a> OracleSegmenter<'a> {
    pub fn new(truth: &'a LabelMask) -> Self {
        OracleSegmenter { truth }
    }

    fn segment_one(&self, patch: &MultiMagPatch) -> LabelPatch {
        let t = &patch.tile;
        let crop = self
            .truth
            .crop_padded(t.x0 as i64, t.y0 as i64, TILE_SIZE, TILE_SIZE);
        LabelPatch {
            tile: *t,
            codes: crop.codes().to_vec(),
        }
    }
}

impl Segmenter for OracleSegmenter<'_> {
    fn segment_batch(&self, patches: &[MultiMagPatch]) -> Result<Vec<LabelPatch>> {
        Ok(patches.iter().map(|p| self.segment_one(p)).collect())
    }
}

/// Classifies each p20 pixel by nearest palette color. p10/p5 are ignored.
pub struct ChromaticSegmenter {
    palette: Palette,
    mislabel_rate: f64,
    seed: u64,
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ChromaticSegmenter {
    pub fn new(palette: Palette, mislabel_rate: f64, seed: u64) -> Self {
        ChromaticSegmenter {
            palette,
            mislabel_rate,
            seed,
        }
    }

    pub fn segment_one(&self, patch: &MultiMagPatch) -> LabelPatch {
        let mut codes: Vec<u8> = patch
            .p20
            .pixels()
            .map(|p| self.palette.nearest(p.0).code())
            .collect();
        if self.mislabel_rate > 0.0 {
            let t = &patch.tile;
            let key = derive_seed(self.seed ^ fnv1a(&patch.slide_id), ((t.col as u64) << 32) | t.row as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            for code in codes.iter_mut() {
                if rng.random::<f64>() < self.mislabel_rate {
                    // Uniform over the six tissue classes other than the current one.
                    let k = rng.random_range(1..TissueClass::TISSUE.len() as u8);
                    *code = (*code - 1 + k) % 7 + 1;
                }
            }
        }
        LabelPatch {
            tile: patch.tile,
            codes,
        }
    }
}

impl Segmenter for ChromaticSegmenter {
    fn segment_batch(&self, patches: &[MultiMagPatch]) -> Result<Vec<LabelPatch>> {
        Ok(patches.iter().map(|p| self.segment_one(p)).collect())
    }
}

pub struct ExternalSegmenter {
    command: Vec<String>,
    workdir: PathBuf,
    batch_size: usize,
    timeout: Duration,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: String,
    pub p20: String,
    pub p10: String,
    pub p5: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BatchFile {
    pub items: Vec<BatchItem>,
}

pub const BATCH_FILE: &str = "batch.json";

fn item_id(tile: &TileCoord) -> String {
    format!("t{}_{}", tile.col, tile.row)
}

impl ExternalSegmenter {
    pub fn new(command: Vec<String>, workdir: PathBuf, batch_size: usize, timeout: Duration) -> Self {
        ExternalSegmenter {
            command,
            workdir,
            batch_size,
            timeout,
        }
    }

    fn command_line(&self) -> String {
        self.command.join(" ")
    }

    fn write_batch(&self, dir: &Path, patches: &[MultiMagPatch]) -> Result<Vec<String>> {
        let io = |source| SegmentError::BatchIo {
            path: dir.to_path_buf(),
            source,
        };
        let mut items = Vec::with_capacity(patches.len());
        for patch in patches {
            let id = item_id(&patch.tile);
            for mag in Magnification::ALL {
                save_rgb_png(&dir.join(format!("{id}_{}.png", mag.label())), patch.get(mag))?;
            }
            items.push(BatchItem {
                p20: format!("{id}_p20.png"),
                p10: format!("{id}_p10.png"),
                p5: format!("{id}_p5.png"),
                id,
            });
        }
        let ids = items.iter().map(|i| i.id.clone()).collect();
        let text = serde_json::to_string_pretty(&BatchFile { items }).expect("batch serializes");
        fs::write(dir.join(BATCH_FILE), text).map_err(io)?;
        fs::create_dir_all(dir.join("out")).map_err(io)?;
        Ok(ids)
    }

    fn run(&self, dir: &Path) -> Result<()> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| SegmentError::Spawn {
                command: self.command_line(),
                source,
            })?;
        let deadline = Instant::now() + self.timeout;
        let wait_err = |source| SegmentError::Spawn {
            command: self.command_line(),
            source,
        };
        loop {
            if let Some(status) = child.try_wait().map_err(wait_err)? {
                if status.success() {
                    return Ok(());
                }
                return Err(SegmentError::ExitStatus {
                    command: self.command_line(),
                    status: status.to_string(),
                });
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(SegmentError::Timeout {
                    command: self.command_line(),
                    timeout: self.timeout,
                });
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    fn read_output(dir: &Path, id: &str, tile: TileCoord) -> Result<LabelPatch> {
        let path = dir.join("out").join(format!("{id}.png"));
        if !path.exists() {
            return Err(SegmentError::MissingOutput(id.to_string()));
        }
        let malformed = |reason: String| SegmentError::MalformedOutput {
            id: id.to_string(),
            reason,
        };
        let img = image::open(&path).map_err(|e| malformed(e.to_string()))?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => return Err(malformed(format!("expected 8-bit gray, got {:?}", other.color()))),
        };
        if gray.dimensions() != (TILE_SIZE, TILE_SIZE) {
            return Err(malformed(format!("expected 256x256, got {:?}", gray.dimensions())));
        }
        LabelPatch::new(tile, gray.into_raw()).map_err(malformed)
    }
}

impl Segmenter for ExternalSegmenter {
    fn segment_batch(&self, patches: &[MultiMagPatch]) -> Result<Vec<LabelPatch>> {
        fs::create_dir_all(&self.workdir).map_err(|source| SegmentError::BatchIo {
            path: self.workdir.clone(),
            source,
        })?;
        let dir = tempfile::Builder::new()
            .prefix("batch-")
            .tempdir_in(&self.workdir)
            .map_err(|source| SegmentError::BatchIo {
                path: self.workdir.clone(),
                source,
            })?;
        let ids = self.write_batch(dir.path(), patches)?;
        self.run(dir.path())?;
        ids.iter()
            .zip(patches)
            .map(|(id, p)| Self::read_output(dir.path(), id, p.tile))
            .collect()
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }
}

/// Instantiates the backend for one slide. The oracle needs `truth`.
pub fn build_backend<'a>(
    config: &BackendConfig,
    slide_id: &str,
    truth: Option<&'a LabelMask>,
) -> Result<Box<dyn Segmenter + 'a>> {
    config.validate()?;
    Ok(match config {
        BackendConfig::Oracle => {
            let truth = truth.ok_or_else(|| SegmentError::MissingTruth(slide_id.to_string()))?;
            Box::new(OracleSegmenter::new(truth))
        }
        BackendConfig::Chromatic {
            palette,
            mislabel_rate,
            seed,
        } => Box::new(ChromaticSegmenter::new(
            Palette::canonical().with_overrides(palette),
            *mislabel_rate,
            *seed,
        )),
        BackendConfig::External {
            command,
            workdir,
            batch_size,
            timeout_secs,
        } => Box::new(ExternalSegmenter::new(
            command.clone(),
            workdir.clone().unwrap_or_else(std::env::temp_dir),
            *batch_size,
            Duration::from_secs_f64(*timeout_secs),
        )),
    })
}

/// Segments a single patch.
pub fn segment(patch: &MultiMagPatch, config: &BackendConfig, truth: Option<&LabelMask>) -> Result<LabelPatch> {
    let backend = build_backend(config, &patch.slide_id, truth)?;
    let mut out = backend.segment_batch(std::slice::from_ref(patch))?;
    out.pop()
        .ok_or_else(|| SegmentError::MissingOutput(item_id(&patch.tile)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideRunStats {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub tiles: usize,
    pub elapsed_ms: u64,
}

fn tile_error(slide_id: &str, tile: &TileCoord, source: SegmentError) -> SegmentError {
    SegmentError::Tile {
        slide_id: slide_id.to_string(),
        col: tile.col,
        row: tile.row,
        source: Box::new(source),
    }
}

/// Segments one tile row and writes each patch's effective extent into the
/// row's band of the output mask.
fn run_row(
    slide: &SlidePyramid,
    backend: &dyn Segmenter,
    tiles: &[TileCoord],
    band: &mut [u8],
    width: usize,
) -> Result<()> {
    for chunk in tiles.chunks(backend.batch_size().max(1)) {
        let patches = chunk
            .iter()
            .map(|t| extract(slide, t).map_err(|e| tile_error(slide.id(), t, e.into())))
            .collect::<Result<Vec<_>>>()?;
        let labels = backend
            .segment_batch(&patches)
            .map_err(|e| tile_error(slide.id(), &chunk[0], e))?;
        for (tile, label) in chunk.iter().zip(&labels) {
            for dy in 0..tile.height as usize {
                let src = dy * TILE_SIZE as usize;
                let dst = dy * width + tile.x0 as usize;
                band[dst..dst + tile.width as usize]
                    .copy_from_slice(&label.codes()[src..src + tile.width as usize]);
            }
        }
    }
    Ok(())
}

/// Segments a whole slide and assembles the level-0 label mask.
///
/// Tile rows run in parallel on a pool of `workers` threads; each row owns a
/// disjoint band of the output, so the result does not depend on `workers`.
/// The first failing tile in schedule order is reported and no mask is
/// returned.
pub fn run_slide(
    slide: &SlidePyramid,
    truth: Option<&LabelMask>,
    config: &BackendConfig,
    workers: usize,
) -> Result<(LabelMask, SlideRunStats)> {
    let started = Instant::now();
    let meta = slide.meta();
    if let Some(truth) = truth {
        check_mask_dims(meta, truth)?;
    }
    let backend = build_backend(config, &meta.id, truth)?;
    let tiles = schedule(meta.width, meta.height)?;
    let cols = meta.width.div_ceil(TILE_SIZE) as usize;
    let width = meta.width as usize;
    let mut mask = LabelMask::filled(meta.width, meta.height, TissueClass::Unlabeled);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SegmentError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<()>> = pool.install(|| {
        mask.codes_mut()
            .par_chunks_mut(TILE_SIZE as usize * width)
            .zip(tiles.par_chunks(cols))
            .map(|(band, row_tiles)| run_row(slide, backend.as_ref(), row_tiles, band, width))
            .collect()
    });
    results.into_iter().collect::<Result<()>>()?;

    let stats = SlideRunStats {
        slide_id: meta.id.clone(),
        width: meta.width,
        height: meta.height,
        tiles: tiles.len(),
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    Ok((mask, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide_store::{write_pyramid, SlideMeta};
    use image::{Rgb, RgbImage};

    fn white_slide(dir: &Path, w: u32, h: u32) -> SlidePyramid {
        let meta = SlideMeta::new("white", w, h);
        write_pyramid(dir, &meta, &RgbImage::from_pixel(w, h, Rgb([255, 255, 255]))).unwrap()
    }

    #[test]
    fn white_patch_is_blank() {
        let dir = tempfile::tempdir().unwrap();
        let slide = white_slide(dir.path(), 300, 300);
        let tile = schedule(300, 300).unwrap()[0];
        let patch = extract(&slide, &tile).unwrap();
        let label = segment(&patch, &BackendConfig::chromatic(), None).unwrap();
        assert!(label.codes().iter().all(|&c| c == TissueClass::Blank.code()));
    }

    #[test]
    fn oracle_without_truth_fails() {
        let dir = tempfile::tempdir().unwrap();
        let slide = white_slide(dir.path(), 10, 10);
        let err = run_slide(&slide, None, &BackendConfig::Oracle, 1).unwrap_err();
        assert!(matches!(err, SegmentError::MissingTruth(_)));
    }

    #[test]
    fn label_patch_rejects_unlabeled_and_bad_shape() {
        let tile = schedule(1, 1).unwrap()[0];
        assert!(LabelPatch::new(tile, vec![1; 10]).is_err());
        let mut codes = vec![1; PATCH_PIXELS];
        codes[300] = 0;
        let err = LabelPatch::new(tile, codes).unwrap_err();
        assert!(err.contains("(44,1)"), "{err}");
    }

    #[test]
    fn mislabel_always_changes_class() {
        let dir = tempfile::tempdir().unwrap();
        let slide = white_slide(dir.path(), 256, 256);
        let tile = schedule(256, 256).unwrap()[0];
        let patch = extract(&slide, &tile).unwrap();
        let label = ChromaticSegmenter::new(Palette::canonical(), 1.0, 9).segment_one(&patch);
        assert!(label.codes().iter().all(|&c| (1..7).contains(&c)));
        let mut seen = [false; 8];
        for &c in label.codes() {
            seen[c as usize] = true;
        }
        assert!(seen[1..7].iter().all(|&s| s));
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::chromatic_with_faults(1.5, 0).validate().is_err());
        let ext = BackendConfig::External {
            command: vec![],
            workdir: None,
            batch_size: 4,
            timeout_secs: 1.0,
        };
        assert!(ext.validate().is_err());
        let json = r#"{"kind":"external","command":["worker"],"batch_size":2}"#;
        let cfg: BackendConfig = serde_json::from_str(json).unwrap();
        assert!(matches!(cfg, BackendConfig::External { batch_size: 2, .. }));
    }
}
