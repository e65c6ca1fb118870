//! Sliding-window schedule and multi-magnification patch extraction.
//!
//! Windows step by 256 level-0 pixels from the top-left corner in row-major
//! order and cover every pixel; there is no tissue-detection prefilter, so
//! pale necrotic regions are never skipped.

use image::RgbImage;

use crate::slide_store::{self, SlidePyramid, StoreError, TILE_SIZE};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TilerError {
    #[error("cannot schedule a {width}x{height} slide")]
    ZeroDimension { width: u32, height: u32 },
}

/// One window of the schedule. `width`/`height` are the effective extent:
/// the part of the 256×256 window that lies on the slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileCoord {
    pub col: u32,
    pub row: u32,
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl TileCoord {
    /// Window center in level-0 coordinates.
    pub fn center(&self) -> (i64, i64) {
        let half = (TILE_SIZE / 2) as i64;
        (self.x0 as i64 + half, self.y0 as i64 + half)
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

/// Row-major windows covering a `width`×`height` slide.
pub fn schedule(width: u32, height: u32) -> Result<Vec<TileCoord>, TilerError> {
    if width == 0 || height == 0 {
        return Err(TilerError::ZeroDimension { width, height });
    }
    let cols = width.div_ceil(TILE_SIZE);
    let rows = height.div_ceil(TILE_SIZE);
    let mut tiles = Vec::with_capacity((cols * rows) as usize);
    for row in 0..rows {
        for col in 0..cols {
            let x0 = col * TILE_SIZE;
            let y0 = row * TILE_SIZE;
            tiles.push(TileCoord {
                col,
                row,
                x0,
                y0,
                width: TILE_SIZE.min(width - x0),
                height: TILE_SIZE.min(height - y0),
            });
        }
    }
    Ok(tiles)
}

/// Magnifications fed to the model, by pyramid downsample factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Magnification {
    X20,
    X10,
    X5,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::X20, Magnification::X10, Magnification::X5];

    pub fn factor(self) -> u32 {
        match self {
            Magnification::X20 => 1,
            Magnification::X10 => 2,
            Magnification::X5 => 4,
        }
    }

    /// Side of the level-0 field a patch at this magnification covers.
    pub fn field_side(self) -> u32 {
        TILE_SIZE * self.factor()
    }

    pub fn label(self) -> &'static str {
        match self {
            Magnification::X20 => "p20",
            Magnification::X10 => "p10",
            Magnification::X5 => "p5",
        }
    }
}

/// Level-0 origin of the field `[center - s/2, center + s/2)` for a tile.
pub fn field_origin(tile: &TileCoord, mag: Magnification) -> (i64, i64) {
    let (cx, cy) = tile.center();
    let half = (mag.field_side() / 2) as i64;
    (cx - half, cy - half)
}

/// Three concentric 256×256 patches read at 20×, 10× and 5×.
#[derive(Debug, Clone)]
pub struct MultiMagPatch {
    pub slide_id: String,
    pub tile: TileCoord,
    pub p20: RgbImage,
    pub p10: RgbImage,
    pub p5: RgbImage,
}

impl MultiMagPatch {
    pub fn get(&self, mag: Magnification) -> &RgbImage {
        match mag {
            Magnification::X20 => &self.p20,
            Magnification::X10 => &self.p10,
            Magnification::X5 => &self.p5,
        }
    }
}

/// Reads the three fields of a tile from the pyramid levels. Areas off the
/// slide come back as slide padding.
pub fn extract(slide: &SlidePyramid, tile: &TileCoord) -> Result<MultiMagPatch, StoreError> {
    let read = |mag: Magnification| {
        let (ox, oy) = field_origin(tile, mag);
        let f = mag.factor() as i64;
        // Origins are multiples of the factor: x0 is a multiple of 256.
        debug_assert!(ox % f == 0 && oy % f == 0);
        slide.read_region(mag.factor(), ox / f, oy / f, TILE_SIZE, TILE_SIZE)
    };
    Ok(MultiMagPatch {
        slide_id: slide.id().to_string(),
        tile: *tile,
        p20: read(Magnification::X20)?,
        p10: read(Magnification::X10)?,
        p5: read(Magnification::X5)?,
    })
}

/// Level-0 pixels of a patch field that lie off the slide, as a
/// per-pixel flag over the 256×256 patch grid.
pub fn padding_map(meta: &slide_store::SlideMeta, tile: &TileCoord, mag: Magnification) -> Vec<bool> {
    let (ox, oy) = field_origin(tile, mag);
    let f = mag.factor() as i64;
    let (lw, lh) = meta.level_dims(mag.factor());
    let mut map = Vec::with_capacity((TILE_SIZE * TILE_SIZE) as usize);
    for py in 0..TILE_SIZE as i64 {
        for px in 0..TILE_SIZE as i64 {
            let lx = ox / f + px;
            let ly = oy / f + py;
            map.push(lx < 0 || ly < 0 || lx >= lw as i64 || ly >= lh as i64);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_slide_has_four_full_tiles() {
        let tiles = schedule(512, 512).unwrap();
        assert_eq!(tiles.len(), 4);
        assert!(tiles.iter().all(|t| t.width == 256 && t.height == 256));
        assert_eq!((tiles[1].col, tiles[1].row), (1, 0));
    }

    #[test]
    fn ragged_slide_clips_edges() {
        let tiles = schedule(500, 300).unwrap();
        assert_eq!(tiles.len(), 4);
        let last = tiles.last().unwrap();
        assert_eq!((last.x0, last.y0, last.width, last.height), (256, 256, 244, 44));
    }

    #[test]
    fn single_pixel_slide() {
        let tiles = schedule(1, 1).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!((tiles[0].width, tiles[0].height), (1, 1));
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert_eq!(
            schedule(0, 10),
            Err(TilerError::ZeroDimension { width: 0, height: 10 })
        );
    }

    #[test]
    fn origin_tile_fields() {
        let tile = schedule(2048, 2048).unwrap()[0];
        assert_eq!(field_origin(&tile, Magnification::X20), (0, 0));
        assert_eq!(field_origin(&tile, Magnification::X10), (-128, -128));
        assert_eq!(field_origin(&tile, Magnification::X5), (-384, -384));
    }
}
