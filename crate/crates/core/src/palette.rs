//! Class colors: the overlay legend and the painting palette the synthetic
//! slides and the chromatic classifier share.

use std::collections::BTreeMap;

use image::Rgb;

use crate::slide_store::TissueClass;

/// Overlay legend: red, blue, yellow, green, orange, brown, gray for codes 1–7.
pub fn legend_color(class: TissueClass) -> Rgb<u8> {
    match class {
        TissueClass::Unlabeled => Rgb([0, 0, 0]),
        TissueClass::ViableTumor => Rgb([255, 0, 0]),
        TissueClass::NecrosisWithBone => Rgb([0, 0, 255]),
        TissueClass::NecrosisWithoutBone => Rgb([255, 255, 0]),
        TissueClass::NormalBone => Rgb([0, 128, 0]),
        TissueClass::NormalTissue => Rgb([255, 165, 0]),
        TissueClass::Cartilage => Rgb([165, 42, 42]),
        TissueClass::Blank => Rgb([128, 128, 128]),
    }
}

/// Reference color per class, indexed by code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Palette {
    colors: [Rgb<u8>; TissueClass::COUNT],
}

impl Default for Palette {
    fn default() -> Self {
        Palette::canonical()
    }
}

impl Palette {
    /// The legend colors, except that Blank is painted as glass (white).
    pub fn canonical() -> Self {
        let mut colors = TissueClass::ALL.map(legend_color);
        colors[TissueClass::Blank as usize] = Rgb([255, 255, 255]);
        Palette { colors }
    }

    pub fn with_overrides(mut self, overrides: &BTreeMap<TissueClass, [u8; 3]>) -> Self {
        for (&class, &rgb) in overrides {
            self.colors[class as usize] = Rgb(rgb);
        }
        self
    }

    pub fn color(&self, class: TissueClass) -> Rgb<u8> {
        self.colors[class as usize]
    }

    /// Nearest tissue class in RGB Euclidean distance; ties go to the lowest
    /// code. Unlabeled is never returned.
    pub fn nearest(&self, px: [u8; 3]) -> TissueClass {
        let mut best = TissueClass::ViableTumor;
        let mut best_d = u32::MAX;
        for class in TissueClass::TISSUE {
            let c = self.colors[class as usize].0;
            let d: u32 = (0..3)
                .map(|i| {
                    let diff = px[i] as i32 - c[i] as i32;
                    (diff * diff) as u32
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = class;
            }
        }
        best
    }

    /// Smallest distance between two tissue colors.
    pub fn min_separation(&self) -> f64 {
        let mut min = f64::INFINITY;
        for (i, a) in TissueClass::TISSUE.iter().enumerate() {
            for b in &TissueClass::TISSUE[i + 1..] {
                let (ca, cb) = (self.color(*a).0, self.color(*b).0);
                let d: f64 = (0..3).map(|k| (ca[k] as f64 - cb[k] as f64).powi(2)).sum();
                min = min.min(d.sqrt());
            }
        }
        min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_is_blank() {
        assert_eq!(Palette::canonical().nearest([255, 255, 255]), TissueClass::Blank);
    }

    #[test]
    fn painted_colors_classify_as_themselves() {
        let p = Palette::canonical();
        for class in TissueClass::TISSUE {
            assert_eq!(p.nearest(p.color(class).0), class);
        }
    }

    #[test]
    fn ties_go_to_lowest_code() {
        let mut overrides = BTreeMap::new();
        overrides.insert(TissueClass::NecrosisWithBone, [255, 0, 0]);
        let p = Palette::canonical().with_overrides(&overrides);
        assert_eq!(p.nearest([255, 0, 0]), TissueClass::ViableTumor);
    }
}
