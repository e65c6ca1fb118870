//! Deterministic synthetic slides and cohorts with exact ground truth.
//!
//! Tissue regions are Voronoi cells of a jittered seed grid. Cells are
//! assigned to classes greedily (largest cells first, each to the class with
//! the largest remaining area deficit), which lands every class within a few
//! small cells of its target area. The slide is then painted with the class
//! palette and a seeded fraction of pixels gets a bounded color jitter.
//!
//! Geometry is integer arithmetic and all randomness comes from seeded ChaCha
//! streams consumed in a fixed order, so a spec maps to byte-identical files
//! on every platform.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::palette::Palette;
use crate::slide_store::{
    self, downsample_box, slide_dir, write_level_tiles, CaseRecord, Dataset, LabelMask, Manifest,
    SlideMeta, SlidePyramid, Split, StoreError, TissueClass, REQUIRED_LEVELS, TILE_SIZE,
};

/// Per-channel bound of the color jitter. Keeps jittered pixels closer to
/// their own canonical color than to any other (min separation is 90).
pub const JITTER_AMPLITUDE: i32 = 24;

/// Cells are shrunk until the slide holds at least this many.
const MIN_CELLS: u64 = 200;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("class fractions sum to {0}, expected 1")]
    FractionSum(f64),
    #[error("fraction for {class} is {value}, expected a value in [0,1]")]
    FractionRange { class: TissueClass, value: f64 },
    #[error("unlabeled cannot be a synthetic target class")]
    UnlabeledTarget,
    #[error("slide has zero area ({width}x{height})")]
    ZeroArea { width: u32, height: u32 },
    #[error("noise_epsilon {0} is not in [0,1]")]
    NoiseRange(f64),
    #[error("cohort arm `{0}` would contain no cases")]
    DegenerateArm(&'static str),
    #[error("invalid cohort spec: {0}")]
    Cohort(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

fn default_granularity() -> u32 {
    64
}

/// Recipe for one synthetic slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Target area fraction per class; must sum to 1.
    pub fractions: BTreeMap<TissueClass, f64>,
    /// Nominal Voronoi cell spacing in pixels.
    #[serde(default = "default_granularity")]
    pub granularity: u32,
    /// Color overrides on top of the canonical palette.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub colors: BTreeMap<TissueClass, [u8; 3]>,
    /// Fraction of pixels that receive color jitter.
    #[serde(default)]
    pub noise_epsilon: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, width: u32, height: u32, fractions: &[(TissueClass, f64)]) -> Self {
        SynthSpec {
            seed,
            width,
            height,
            fractions: fractions.iter().copied().collect(),
            granularity: default_granularity(),
            colors: BTreeMap::new(),
            noise_epsilon: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::ZeroArea {
                width: self.width,
                height: self.height,
            });
        }
        for (&class, &value) in &self.fractions {
            if class == TissueClass::Unlabeled {
                return Err(SynthError::UnlabeledTarget);
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(SynthError::FractionRange { class, value });
            }
        }
        let sum: f64 = self.fractions.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::FractionSum(sum));
        }
        if !(0.0..=1.0).contains(&self.noise_epsilon) {
            return Err(SynthError::NoiseRange(self.noise_epsilon));
        }
        Ok(())
    }

    pub fn palette(&self) -> Palette {
        Palette::canonical().with_overrides(&self.colors)
    }

    /// Cell spacing actually used: the nominal granularity, shrunk so the
    /// slide holds at least `MIN_CELLS` cells.
    pub fn effective_granularity(&self) -> u32 {
        let area = self.width as u64 * self.height as u64;
        let cap = ((area / MIN_CELLS) as f64).sqrt().floor() as u32;
        self.granularity.min(cap).max(1)
    }
}

/// splitmix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream))
}

/// Voronoi partition of the slide with one class per cell.
struct BlobField {
    spacing: u32,
    cols: u32,
    rows: u32,
    seeds: Vec<(u32, u32)>,
    classes: Vec<u8>,
}

impl BlobField {
    fn build(spec: &SynthSpec) -> BlobField {
        let spacing = spec.effective_granularity();
        let cols = spec.width.div_ceil(spacing);
        let rows = spec.height.div_ceil(spacing);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
        let mut seeds = Vec::with_capacity((cols * rows) as usize);
        for j in 0..rows {
            for i in 0..cols {
                let x0 = i * spacing;
                let y0 = j * spacing;
                let x1 = (x0 + spacing).min(spec.width);
                let y1 = (y0 + spacing).min(spec.height);
                seeds.push((rng.random_range(x0..x1), rng.random_range(y0..y1)));
            }
        }
        let mut field = BlobField {
            spacing,
            cols,
            rows,
            seeds,
            classes: Vec::new(),
        };

        let mut areas = vec![0u64; field.seeds.len()];
        for y in 0..spec.height {
            for x in 0..spec.width {
                areas[field.nearest(x, y)] += 1;
            }
        }
        field.classes = assign_classes(spec, &areas, &mut rng);
        field
    }

    fn nearest(&self, x: u32, y: u32) -> usize {
        let ci = x / self.spacing;
        let cj = y / self.spacing;
        let mut best = usize::MAX;
        let mut best_d = u64::MAX;
        for j in cj.saturating_sub(1)..=(cj + 1).min(self.rows - 1) {
            for i in ci.saturating_sub(1)..=(ci + 1).min(self.cols - 1) {
                let idx = (j * self.cols + i) as usize;
                let (sx, sy) = self.seeds[idx];
                let dx = sx as i64 - x as i64;
                let dy = sy as i64 - y as i64;
                let d = (dx * dx + dy * dy) as u64;
                if d < best_d || (d == best_d && idx < best) {
                    best_d = d;
                    best = idx;
                }
            }
        }
        best
    }

    fn class_at(&self, x: u32, y: u32) -> u8 {
        self.classes[self.nearest(x, y)]
    }
}

fn assign_classes(spec: &SynthSpec, areas: &[u64], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let total: u64 = areas.iter().sum();
    let targets: Vec<(u8, f64)> = spec
        .fractions
        .iter()
        .map(|(c, f)| (c.code(), f * total as f64))
        .collect();
    let mut assigned = vec![0.0f64; targets.len()];

    // Largest first; the shuffle breaks ties between equal areas.
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.shuffle(rng);
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]));

    let mut classes = vec![0u8; areas.len()];
    for cell in order {
        let mut pick = 0;
        let mut best = f64::NEG_INFINITY;
        for (k, (_, target)) in targets.iter().enumerate() {
            let deficit = target - assigned[k];
            if deficit > best {
                best = deficit;
                pick = k;
            }
        }
        assigned[pick] += areas[cell] as f64;
        classes[cell] = targets[pick].0;
    }
    classes
}

/// Ground-truth mask for a spec, without painting anything.
pub fn render_mask(spec: &SynthSpec) -> Result<LabelMask> {
    spec.validate()?;
    let field = BlobField::build(spec);
    Ok(mask_from_field(spec, &field))
}

fn mask_from_field(spec: &SynthSpec, field: &BlobField) -> LabelMask {
    let mut codes = Vec::with_capacity(spec.width as usize * spec.height as usize);
    for y in 0..spec.height {
        for x in 0..spec.width {
            codes.push(field.class_at(x, y));
        }
    }
    LabelMask::from_codes(spec.width, spec.height, codes).expect("field only holds tissue codes")
}

/// Paints level-0 rows `[y0, y1)` of the slide.
fn paint_band(spec: &SynthSpec, palette: &Palette, mask: &LabelMask, y0: u32, y1: u32) -> RgbImage {
    let w = spec.width;
    let mut band = RgbImage::new(w, y1 - y0);
    let codes = mask.codes();
    for y in y0..y1 {
        let row = &codes[y as usize * w as usize..(y as usize + 1) * w as usize];
        let mut rng = (spec.noise_epsilon > 0.0)
            .then(|| ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x1_0000_0000 + y as u64)));
        for (x, &code) in row.iter().enumerate() {
            let mut px = palette.color(TissueClass::ALL[code as usize]).0;
            if let Some(rng) = rng.as_mut() {
                if rng.random::<f64>() < spec.noise_epsilon {
                    for c in px.iter_mut() {
                        let delta = rng.random_range(-JITTER_AMPLITUDE..=JITTER_AMPLITUDE);
                        *c = (*c as i32 + delta).clamp(0, 255) as u8;
                    }
                }
            }
            band.put_pixel(x as u32, y - y0, Rgb(px));
        }
    }
    band
}

/// Renders the full level-0 raster in memory. Only sensible for small slides.
pub fn render_slide(spec: &SynthSpec) -> Result<(RgbImage, LabelMask)> {
    let mask = render_mask(spec)?;
    let img = paint_band(spec, &spec.palette(), &mask, 0, spec.height);
    Ok((img, mask))
}

/// Generates a slide pyramid and its mask under `root/slides/<slide_id>`.
///
/// The pyramid is written in horizontal bands one coarsest-level tile row
/// tall, so only the mask and one band are resident at a time.
pub fn generate_slide(spec: &SynthSpec, root: &Path, slide_id: &str) -> Result<(SlidePyramid, LabelMask)> {
    let mask = render_mask(spec)?;
    let meta = SlideMeta::new(slide_id, spec.width, spec.height);
    let dir = slide_dir(root, slide_id);
    let palette = spec.palette();
    let max_factor = *REQUIRED_LEVELS.iter().max().unwrap();
    let band_height = TILE_SIZE * max_factor;

    let mut y0 = 0;
    while y0 < spec.height {
        let y1 = (y0 + band_height).min(spec.height);
        let band = paint_band(spec, &palette, &mask, y0, y1);
        for factor in REQUIRED_LEVELS {
            let level_band = if factor == 1 {
                band.clone()
            } else {
                downsample_box(&band, factor)
            };
            write_level_tiles(&dir, factor, &level_band, y0 / factor / TILE_SIZE)?;
        }
        y0 = y1;
    }
    mask.save_png(&dir.join("mask.png"))?;
    Ok((SlidePyramid::new(dir, meta), mask))
}

/// Survival model: exponential event times whose hazard depends on which
/// side of the planted cutoff the case's necrosis ratio falls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurvivalModel {
    pub planted_cutoff: f64,
    /// Death hazard per month for cases with ratio ≥ cutoff.
    pub responder_hazard: f64,
    pub non_responder_hazard: f64,
    /// Progression hazard as a multiple of the death hazard.
    pub progression_multiplier: f64,
    /// Random loss-to-follow-up hazard per month.
    pub censoring_hazard: f64,
    /// Administrative censoring horizon in months.
    pub horizon_months: f64,
}

impl Default for SurvivalModel {
    fn default() -> Self {
        SurvivalModel {
            planted_cutoff: 0.8,
            responder_hazard: 0.005,
            non_responder_hazard: 0.05,
            progression_multiplier: 2.0,
            censoring_hazard: 0.005,
            horizon_months: 120.0,
        }
    }
}

/// Number of testing cases carrying each data gap. The groups are disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Exclusions {
    pub missing_r_pr: usize,
    pub missing_os: usize,
    pub missing_metastasis: usize,
    pub metastatic_at_diagnosis: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub seed: u64,
    /// Total cases, training included.
    pub cases: usize,
    pub training_cases: usize,
    /// Inclusive range of slides per case.
    pub slides_per_case: [usize; 2],
    pub slide_width: u32,
    pub slide_height: u32,
    pub granularity: u32,
    pub noise_epsilon: f64,
    /// Case necrosis ratios are uniform over this range ...
    pub ratio_range: [f64; 2],
    /// ... except this share of cases, which are complete responders (1.0).
    pub complete_response_share: f64,
    /// Tumor share of each slide's area, uniform over this range.
    pub tumor_fraction: [f64; 2],
    /// Standard deviation of the reported ratio around the true one.
    pub report_noise_sd: f64,
    pub survival: SurvivalModel,
    pub exclusions: Exclusions,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            seed: 0,
            cases: 10,
            training_cases: 0,
            slides_per_case: [1, 1],
            slide_width: 512,
            slide_height: 512,
            granularity: 32,
            noise_epsilon: 0.0,
            ratio_range: [0.0, 1.0],
            complete_response_share: 0.0,
            tumor_fraction: [0.3, 0.6],
            report_noise_sd: 0.05,
            survival: SurvivalModel::default(),
            exclusions: Exclusions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannedSlide {
    pub id: String,
    pub spec: SynthSpec,
}

#[derive(Debug, Clone)]
pub struct PlannedCase {
    pub record: CaseRecord,
    /// Ratio the slide fractions were built from; the mask-derived ratio
    /// differs from it by at most a few small cells.
    pub target_ratio: f64,
    pub slides: Vec<PlannedSlide>,
}

#[derive(Debug, Clone)]
pub struct CohortPlan {
    pub cases: Vec<PlannedCase>,
}

impl CohortPlan {
    pub fn manifest(&self) -> Manifest {
        let slides = self
            .cases
            .iter()
            .flat_map(|c| &c.slides)
            .map(|s| SlideMeta::new(s.id.clone(), s.spec.width, s.spec.height))
            .collect();
        let cases = self.cases.iter().map(|c| c.record.clone()).collect();
        Manifest { slides, cases }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn exp_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    Exp::new(rate).expect("positive rate").sample(rng)
}

/// Draws a (time, event) pair; times are kept strictly positive.
fn draw_outcome(rng: &mut ChaCha8Rng, hazard: f64, model: &SurvivalModel) -> (f64, bool) {
    let event_time = exp_draw(rng, hazard);
    let censor_time = exp_draw(rng, model.censoring_hazard).min(model.horizon_months);
    let (t, event) = if event_time <= censor_time {
        (event_time, true)
    } else {
        (censor_time, false)
    };
    (t.max(1e-3), event)
}

impl CohortSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Cohort(m.to_string()));
        if self.cases == 0 {
            return bad("cohort needs at least one case");
        }
        if self.training_cases > self.cases {
            return bad("training_cases exceeds cases");
        }
        let [lo, hi] = self.slides_per_case;
        if lo == 0 || lo > hi {
            return bad("slides_per_case must be a non-empty range starting at 1 or more");
        }
        let [rlo, rhi] = self.ratio_range;
        if !(0.0..=1.0).contains(&rlo) || !(0.0..=1.0).contains(&rhi) || rlo > rhi {
            return bad("ratio_range must lie in [0,1]");
        }
        let [tlo, thi] = self.tumor_fraction;
        if !(tlo > 0.0 && thi <= 1.0 && tlo <= thi) {
            return bad("tumor_fraction must lie in (0,1]");
        }
        if !(0.0..=1.0).contains(&self.complete_response_share) {
            return bad("complete_response_share must lie in [0,1]");
        }
        let m = &self.survival;
        if [m.responder_hazard, m.non_responder_hazard, m.censoring_hazard, m.progression_multiplier]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
            || !(m.horizon_months > 0.0)
        {
            return bad("survival model parameters must be non-negative with a positive horizon");
        }
        let e = &self.exclusions;
        let excluded = e.missing_r_pr + e.missing_os + e.missing_metastasis + e.metastatic_at_diagnosis;
        if excluded > self.cases - self.training_cases {
            return bad("more exclusions than testing cases");
        }
        // Both arms must be reachable by the ratio distribution.
        let cut = m.planted_cutoff;
        let uniform_used = self.complete_response_share < 1.0;
        let uniform_responds = if rhi > rlo { rhi > cut } else { rlo >= cut };
        let can_respond =
            (self.complete_response_share > 0.0 && cut <= 1.0) || (uniform_used && uniform_responds);
        let can_fail = uniform_used && rlo < cut;
        if !can_respond {
            return Err(SynthError::DegenerateArm("responder"));
        }
        if !can_fail {
            return Err(SynthError::DegenerateArm("non-responder"));
        }
        Ok(())
    }
}

fn slide_fractions(rng: &mut ChaCha8Rng, ratio: f64, tumor_range: [f64; 2]) -> BTreeMap<TissueClass, f64> {
    let tumor = uniform(rng, tumor_range);
    let bone_share: f64 = rng.random();
    let necrotic = tumor * ratio;
    let others = [
        TissueClass::NormalBone,
        TissueClass::NormalTissue,
        TissueClass::Cartilage,
        TissueClass::Blank,
    ];
    let weights: Vec<f64> = others.iter().map(|_| rng.random_range(0.2..1.0)).collect();
    let wsum: f64 = weights.iter().sum();

    let mut f = BTreeMap::new();
    f.insert(TissueClass::ViableTumor, tumor - necrotic);
    f.insert(TissueClass::NecrosisWithBone, necrotic * bone_share);
    f.insert(TissueClass::NecrosisWithoutBone, necrotic * (1.0 - bone_share));
    for (class, w) in others.iter().zip(&weights) {
        f.insert(*class, (1.0 - tumor) * w / wsum);
    }
    f
}

/// Lays out a cohort (records, slide specs, outcomes) without rendering.
pub fn plan_cohort(spec: &CohortSpec) -> Result<CohortPlan> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
    let mut cases = Vec::with_capacity(spec.cases);
    for i in 0..spec.cases {
        let case_id = format!("case-{i:03}");
        let ratio = if rng.random::<f64>() < spec.complete_response_share {
            1.0
        } else {
            uniform(&mut rng, spec.ratio_range)
        };
        let n_slides = rng.random_range(spec.slides_per_case[0]..=spec.slides_per_case[1]);
        let slides: Vec<PlannedSlide> = (0..n_slides)
            .map(|s| {
                let mut slide = SynthSpec {
                    seed: rng.random(),
                    width: spec.slide_width,
                    height: spec.slide_height,
                    fractions: slide_fractions(&mut rng, ratio, spec.tumor_fraction),
                    granularity: spec.granularity,
                    colors: BTreeMap::new(),
                    noise_epsilon: spec.noise_epsilon,
                };
                // Guard the unit-sum check against accumulated rounding.
                let sum: f64 = slide.fractions.values().sum();
                for v in slide.fractions.values_mut() {
                    *v /= sum;
                }
                PlannedSlide {
                    id: format!("{case_id}-s{s}"),
                    spec: slide,
                }
            })
            .collect();

        let model = &spec.survival;
        let hazard = if ratio >= model.planted_cutoff {
            model.responder_hazard
        } else {
            model.non_responder_hazard
        };
        let (os, os_event) = draw_outcome(&mut rng, hazard, model);
        // Death ends progression-free follow-up.
        let (pfs, pfs_event) = match draw_outcome(&mut rng, hazard * model.progression_multiplier, model) {
            (t, event) if t <= os => (t, event),
            _ => (os, os_event),
        };
        let report = if spec.report_noise_sd > 0.0 {
            let noise: f64 = rand_distr::Normal::new(0.0, spec.report_noise_sd)
                .expect("finite sd")
                .sample(&mut rng);
            ((ratio + noise).clamp(0.0, 1.0) * 100.0).round() / 100.0
        } else {
            ratio
        };

        cases.push(PlannedCase {
            record: CaseRecord {
                id: case_id,
                slides: slides.iter().map(|s| s.id.clone()).collect(),
                r_pr: Some(report),
                os_months: Some(os),
                os_event,
                pfs_months: Some(pfs),
                pfs_event,
                metastasis_at_diagnosis: Some(false),
                split: if i < spec.training_cases { Split::Train } else { Split::Test },
            },
            target_ratio: ratio,
            slides,
        });
    }

    let mut testing: Vec<usize> = (spec.training_cases..spec.cases).collect();
    testing.shuffle(&mut rng);
    let e = &spec.exclusions;
    let mut picks = testing.into_iter();
    for idx in picks.by_ref().take(e.missing_r_pr) {
        cases[idx].record.r_pr = None;
    }
    for idx in picks.by_ref().take(e.missing_os) {
        cases[idx].record.os_months = None;
        cases[idx].record.os_event = false;
    }
    for idx in picks.by_ref().take(e.missing_metastasis) {
        cases[idx].record.metastasis_at_diagnosis = None;
    }
    for idx in picks.by_ref().take(e.metastatic_at_diagnosis) {
        cases[idx].record.metastasis_at_diagnosis = Some(true);
    }
    Ok(CohortPlan { cases })
}

/// Renders every slide of a plan and writes the manifest. Slides render in
/// parallel; each slide is generated on one thread.
pub fn render_cohort(plan: &CohortPlan, root: &Path) -> Result<Dataset> {
    let slides: Vec<&PlannedSlide> = plan.cases.iter().flat_map(|c| &c.slides).collect();
    slides
        .par_iter()
        .try_for_each(|s| generate_slide(&s.spec, root, &s.id).map(|_| ()))?;
    let manifest = plan.manifest();
    manifest.write(root)?;
    Ok(slide_store::Dataset::new(root.to_path_buf(), manifest)?)
}

pub fn generate_cohort(spec: &CohortSpec, root: &Path) -> Result<Dataset> {
    let plan = plan_cohort(spec)?;
    render_cohort(&plan, root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(mask: &LabelMask) -> [u64; 8] {
        let mut c = [0u64; 8];
        for &code in mask.codes() {
            c[code as usize] += 1;
        }
        c
    }

    #[test]
    fn single_class_spec_is_uniform() {
        let spec = SynthSpec::new(3, 300, 200, &[(TissueClass::ViableTumor, 1.0)]);
        let mask = render_mask(&spec).unwrap();
        assert!(mask.codes().iter().all(|&c| c == 1));
    }

    #[test]
    fn quarter_viable_ratio() {
        let spec = SynthSpec::new(
            11,
            1024,
            1024,
            &[(TissueClass::ViableTumor, 0.25), (TissueClass::NecrosisWithoutBone, 0.75)],
        );
        let c = counts(&render_mask(&spec).unwrap());
        let ratio = c[3] as f64 / (c[1] + c[3]) as f64;
        assert!((0.73..=0.77).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = SynthSpec::new(1, 10, 10, &[(TissueClass::ViableTumor, 0.5)]);
        assert!(matches!(render_mask(&spec), Err(SynthError::FractionSum(_))));
        spec.fractions.insert(TissueClass::Blank, 0.5);
        spec.width = 0;
        assert!(matches!(render_mask(&spec), Err(SynthError::ZeroArea { .. })));
        spec.width = 10;
        spec.noise_epsilon = 2.0;
        assert!(matches!(render_mask(&spec), Err(SynthError::NoiseRange(_))));
    }

    #[test]
    fn jitter_touches_about_epsilon_of_pixels() {
        let mut spec = SynthSpec::new(5, 256, 256, &[(TissueClass::NormalTissue, 1.0)]);
        spec.noise_epsilon = 0.1;
        let (img, _) = render_slide(&spec).unwrap();
        let base = spec.palette().color(TissueClass::NormalTissue);
        let changed = img.pixels().filter(|p| **p != base).count() as f64 / 65536.0;
        // A jittered pixel keeps its color only if all three deltas are zero.
        assert!((changed - 0.1).abs() < 0.01, "{changed}");
    }

    #[test]
    fn degenerate_arm_is_rejected() {
        let spec = CohortSpec {
            ratio_range: [0.0, 0.5],
            ..CohortSpec::default()
        };
        assert!(matches!(plan_cohort(&spec), Err(SynthError::DegenerateArm("responder"))));
        let spec = CohortSpec {
            cases: 0,
            ..CohortSpec::default()
        };
        assert!(matches!(plan_cohort(&spec), Err(SynthError::Cohort(_))));
    }

    #[test]
    fn exclusions_are_disjoint() {
        let spec = CohortSpec {
            cases: 103,
            training_cases: 15,
            exclusions: Exclusions {
                missing_r_pr: 8,
                missing_os: 3,
                missing_metastasis: 1,
                metastatic_at_diagnosis: 10,
            },
            ..CohortSpec::default()
        };
        let plan = plan_cohort(&spec).unwrap();
        let test: Vec<_> = plan.cases.iter().filter(|c| c.record.split == Split::Test).collect();
        assert_eq!(test.len(), 88);
        assert_eq!(test.iter().filter(|c| c.record.r_pr.is_none()).count(), 8);
        assert_eq!(test.iter().filter(|c| c.record.os_months.is_none()).count(), 3);
        assert_eq!(
            test.iter()
                .filter(|c| c.record.r_pr.is_none() && c.record.os_months.is_none())
                .count(),
            0
        );
    }
}
