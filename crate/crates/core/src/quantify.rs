//! Pixel aggregation, necrosis ratio, response grading and the comparison
//! against reported ratios.
//!
//! The ratio is kept as exact integer counts (`necrotic / tumor`) and only
//! turned into a float for presentation and thresholding. Necrotic tumor is
//! the union of necrosis with and without bone.

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, AddAssign};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::palette::legend_color;
use crate::slide_store::{CaseRecord, LabelMask, SlidePyramid, StoreError, TissueClass};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QuantifyError {
    #[error("no viable or necrotic tumor pixels")]
    NoTumor,
    #[error("ratio {0} is outside [0,1]")]
    RatioRange(f64),
    #[error("case `{case_id}` has no mask for slide `{slide_id}`")]
    MissingSlideMask { case_id: String, slide_id: String },
    #[error("masks differ in size: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("no cases with both a reported and a computed ratio")]
    EmptyReport,
    #[error("alpha {0} is outside [0,1]")]
    Alpha(f64),
}

pub type Result<T> = std::result::Result<T, QuantifyError>;

/// Pixel tally per tissue class, indexed by code.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassCounts(pub [u64; TissueClass::COUNT]);

impl ClassCounts {
    pub fn get(&self, class: TissueClass) -> u64 {
        self.0[class as usize]
    }

    pub fn viable(&self) -> u64 {
        self.get(TissueClass::ViableTumor)
    }

    pub fn necrotic(&self) -> u64 {
        self.get(TissueClass::NecrosisWithBone) + self.get(TissueClass::NecrosisWithoutBone)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn merge(&self, other: &ClassCounts) -> ClassCounts {
        *self + *other
    }
}

impl Add for ClassCounts {
    type Output = ClassCounts;

    fn add(mut self, rhs: ClassCounts) -> ClassCounts {
        self += rhs;
        self
    }
}

impl AddAssign for ClassCounts {
    fn add_assign(&mut self, rhs: ClassCounts) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl std::iter::Sum for ClassCounts {
    fn sum<I: Iterator<Item = ClassCounts>>(iter: I) -> ClassCounts {
        iter.fold(ClassCounts::default(), Add::add)
    }
}

pub fn count_pixels(mask: &LabelMask) -> ClassCounts {
    let mut counts = ClassCounts::default();
    for &code in mask.codes() {
        counts.0[code as usize] += 1;
    }
    counts
}

/// Necrotic share of tumor pixels as an exact fraction.
#[derive(Debug, Clone, Copy)]
pub struct NecrosisRatio {
    necrotic: u64,
    tumor: u64,
}

impl NecrosisRatio {
    pub fn necrotic(&self) -> u64 {
        self.necrotic
    }

    pub fn tumor(&self) -> u64 {
        self.tumor
    }

    pub fn viable(&self) -> u64 {
        self.tumor - self.necrotic
    }

    /// Correctly rounded quotient.
    pub fn value(&self) -> f64 {
        self.necrotic as f64 / self.tumor as f64
    }
}

/// Equality is rational: 1/2 == 2/4.
impl PartialEq for NecrosisRatio {
    fn eq(&self, other: &Self) -> bool {
        self.necrotic as u128 * other.tumor as u128 == other.necrotic as u128 * self.tumor as u128
    }
}

impl Eq for NecrosisRatio {}

impl fmt::Display for NecrosisRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.value())
    }
}

pub fn necrosis_ratio(counts: &ClassCounts) -> Result<NecrosisRatio> {
    let necrotic = counts.necrotic();
    let tumor = necrotic + counts.viable();
    if tumor == 0 {
        return Err(QuantifyError::NoTumor);
    }
    Ok(NecrosisRatio { necrotic, tumor })
}

/// Chemotherapy response grade by necrosis ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NecrosisGrade {
    I,
    II,
    III,
    IV,
}

impl NecrosisGrade {
    /// Table order: IV first.
    pub const DESCENDING: [NecrosisGrade; 4] =
        [NecrosisGrade::IV, NecrosisGrade::III, NecrosisGrade::II, NecrosisGrade::I];

    pub fn label(self) -> &'static str {
        match self {
            NecrosisGrade::I => "I",
            NecrosisGrade::II => "II",
            NecrosisGrade::III => "III",
            NecrosisGrade::IV => "IV",
        }
    }

    pub fn range(self) -> &'static str {
        match self {
            NecrosisGrade::IV => "r = 100%",
            NecrosisGrade::III => "90% <= r < 100%",
            NecrosisGrade::II => "50% <= r < 90%",
            NecrosisGrade::I => "0% <= r < 50%",
        }
    }
}

impl fmt::Display for NecrosisGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn grade_of(r: f64) -> Result<NecrosisGrade> {
    if !(0.0..=1.0).contains(&r) {
        return Err(QuantifyError::RatioRange(r));
    }
    Ok(if r == 1.0 {
        NecrosisGrade::IV
    } else if r >= 0.9 {
        NecrosisGrade::III
    } else if r >= 0.5 {
        NecrosisGrade::II
    } else {
        NecrosisGrade::I
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseFlag {
    /// No tumor pixels anywhere in the case; the ratio is undefined.
    NoTumor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseQuantification {
    pub case_id: String,
    pub slide_counts: Vec<(String, ClassCounts)>,
    pub counts: ClassCounts,
    pub ratio: Option<NecrosisRatio>,
    pub grade: Option<NecrosisGrade>,
    pub r_pr: Option<f64>,
    /// `|r_PR - r_DL|` as a fraction.
    pub abs_diff: Option<f64>,
    pub flags: Vec<CaseFlag>,
}

impl CaseQuantification {
    pub fn r_dl(&self) -> Option<f64> {
        self.ratio.map(|r| r.value())
    }

    pub fn has_flag(&self, flag: CaseFlag) -> bool {
        self.flags.contains(&flag)
    }
}

/// Pools the pixel counts of every slide of a case.
pub fn aggregate_case(case: &CaseRecord, slide_counts: &HashMap<String, ClassCounts>) -> Result<CaseQuantification> {
    let per_slide = case
        .slides
        .iter()
        .map(|id| {
            slide_counts
                .get(id)
                .map(|c| (id.clone(), *c))
                .ok_or_else(|| QuantifyError::MissingSlideMask {
                    case_id: case.id.clone(),
                    slide_id: id.clone(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let counts: ClassCounts = per_slide.iter().map(|(_, c)| *c).sum();

    let mut flags = Vec::new();
    let ratio = match necrosis_ratio(&counts) {
        Ok(r) => Some(r),
        Err(QuantifyError::NoTumor) => {
            flags.push(CaseFlag::NoTumor);
            None
        }
        Err(e) => return Err(e),
    };
    let grade = ratio.map(|r| grade_of(r.value())).transpose()?;
    let abs_diff = match (case.r_pr, ratio) {
        (Some(pr), Some(r)) => Some((pr - r.value()).abs()),
        _ => None,
    };
    Ok(CaseQuantification {
        case_id: case.id.clone(),
        slide_counts: per_slide,
        counts,
        ratio,
        grade,
        r_pr: case.r_pr,
        abs_diff,
        flags,
    })
}

fn fmt4(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

pub const CASE_CSV_HEADER: [&str; 8] = ["case_id", "p_VT", "p_NT", "r_DL", "grade", "r_PR", "abs_diff", "flags"];

/// Per-case table; ratios and differences as fractions to four places.
pub fn cases_csv(cases: &[CaseQuantification]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CASE_CSV_HEADER).expect("in-memory write");
    for c in cases {
        let flags: Vec<&str> = c
            .flags
            .iter()
            .map(|f| match f {
                CaseFlag::NoTumor => "no_tumor",
            })
            .collect();
        w.write_record([
            c.case_id.clone(),
            c.counts.viable().to_string(),
            c.counts.necrotic().to_string(),
            fmt4(c.r_dl()),
            c.grade.map(|g| g.label().to_string()).unwrap_or_default(),
            fmt4(c.r_pr),
            fmt4(c.abs_diff),
            flags.join(";"),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 fields")
}

/// One row of the comparison table. Statistics are in percentage points and
/// absent for empty groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRow {
    pub grade: String,
    pub range: String,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub case_id: String,
    pub r_pr: f64,
    pub r_dl: f64,
    pub grade: NecrosisGrade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Rows IV, III, II, I, All.
    pub rows: Vec<GradeRow>,
    pub scatter: Vec<ScatterPoint>,
    /// Always "population".
    pub std_kind: String,
    /// Grades are assigned from the reported ratio.
    pub grouped_by: String,
}

fn summarize(grade: &str, range: &str, diffs: &[f64]) -> GradeRow {
    let count = diffs.len();
    if count == 0 {
        return GradeRow {
            grade: grade.to_string(),
            range: range.to_string(),
            mean: None,
            median: None,
            std: None,
            count,
        };
    }
    let n = count as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = diffs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if count % 2 == 1 {
        sorted[count / 2]
    } else {
        (sorted[count / 2 - 1] + sorted[count / 2]) / 2.0
    };
    GradeRow {
        grade: grade.to_string(),
        range: range.to_string(),
        mean: Some(mean),
        median: Some(median),
        std: Some(var.sqrt()),
        count,
    }
}

/// Mean, median and population standard deviation of `|r_PR - r_DL|` per
/// reported grade and overall, plus the scatter pairs behind them.
pub fn report_comparison(cases: &[CaseQuantification]) -> Result<ComparisonReport> {
    let mut scatter = Vec::new();
    for c in cases {
        if let (Some(pr), Some(dl)) = (c.r_pr, c.r_dl()) {
            scatter.push(ScatterPoint {
                case_id: c.case_id.clone(),
                r_pr: pr,
                r_dl: dl,
                grade: grade_of(pr)?,
            });
        }
    }
    if scatter.is_empty() {
        return Err(QuantifyError::EmptyReport);
    }
    let pp = |p: &ScatterPoint| (p.r_pr - p.r_dl).abs() * 100.0;
    let mut rows: Vec<GradeRow> = NecrosisGrade::DESCENDING
        .iter()
        .map(|&g| {
            let diffs: Vec<f64> = scatter.iter().filter(|p| p.grade == g).map(pp).collect();
            summarize(g.label(), g.range(), &diffs)
        })
        .collect();
    let all: Vec<f64> = scatter.iter().map(pp).collect();
    rows.push(summarize("All", "0% <= r <= 100%", &all));
    Ok(ComparisonReport {
        rows,
        scatter,
        std_kind: "population".to_string(),
        grouped_by: "r_PR".to_string(),
    })
}

impl ComparisonReport {
    pub fn stats_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["grade", "range", "mean", "median", "std", "count"])
            .expect("in-memory write");
        let f1 = |v: Option<f64>| v.map(|v| format!("{v:.1}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.grade.clone(),
                r.range.clone(),
                f1(r.mean),
                f1(r.median),
                f1(r.std),
                r.count.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 fields")
    }

    pub fn scatter_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["case_id", "r_PR", "r_DL", "grade"]).expect("in-memory write");
        for p in &self.scatter {
            w.write_record([
                p.case_id.clone(),
                format!("{:.4}", p.r_pr),
                format!("{:.4}", p.r_dl),
                p.grade.label().to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 fields")
    }

    /// Reported vs computed ratio, dots colored by reported grade.
    pub fn scatter_svg(&self) -> String {
        let (size, pad) = (400.0, 40.0);
        let span = size - 2.0 * pad;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{b}\" x2=\"{pad}\" y2=\"{pad}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{pad}\" stroke=\"#bbbbbb\" stroke-dasharray=\"4 4\"/>\n\
             <text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\" font-size=\"12\">r_PR</text>\n\
             <text x=\"12\" y=\"{cx}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 12 {cx})\">r_DL</text>\n",
            b = size - pad,
            r = size - pad,
            cx = size / 2.0,
            xl = size - 8.0,
        );
        for p in &self.scatter {
            let color = match p.grade {
                NecrosisGrade::IV => "red",
                NecrosisGrade::III => "green",
                NecrosisGrade::II => "orange",
                NecrosisGrade::I => "blue",
            };
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"><title>{}</title></circle>\n",
                pad + p.r_pr * span,
                size - pad - p.r_dl * span,
                xml_escape(&p.case_id),
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean over classes present in either mask of |A ∩ B| / |A ∪ B|.
pub fn mean_iou(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(QuantifyError::DimensionMismatch(pred.dims(), truth.dims()));
    }
    let mut inter = [0u64; TissueClass::COUNT];
    let mut union = [0u64; TissueClass::COUNT];
    for (&p, &t) in pred.codes().iter().zip(truth.codes()) {
        if p == t {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[t as usize] += 1;
        }
    }
    let present: Vec<f64> = (0..TissueClass::COUNT)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if present.is_empty() {
        // Two empty masks agree trivially.
        return Ok(1.0);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

fn blend(base: Rgb<u8>, over: Rgb<u8>, alpha: f64) -> Rgb<u8> {
    Rgb(std::array::from_fn(|i| {
        ((1.0 - alpha) * base[i] as f64 + alpha * over[i] as f64).round() as u8
    }))
}

/// Alpha-blends the legend colors over a raster. Unlabeled pixels are left
/// untouched.
pub fn render_overlay(slide: &RgbImage, mask: &LabelMask, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(QuantifyError::Alpha(alpha));
    }
    if slide.dimensions() != mask.dims() {
        return Err(QuantifyError::DimensionMismatch(slide.dimensions(), mask.dims()));
    }
    let legend = TissueClass::ALL.map(legend_color);
    let mut out = slide.clone();
    for (px, &code) in out.pixels_mut().zip(mask.codes()) {
        if code != TissueClass::Unlabeled.code() {
            *px = blend(*px, legend[code as usize], alpha);
        }
    }
    Ok(out)
}

/// Majority class per `factor`×`factor` block; ties go to the lowest code.
pub fn downsample_mask(mask: &LabelMask, factor: u32) -> LabelMask {
    if factor == 1 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let (dw, dh) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut codes = Vec::with_capacity(dw as usize * dh as usize);
    for by in 0..dh {
        for bx in 0..dw {
            let mut hist = [0u32; TissueClass::COUNT];
            for y in by * factor..((by + 1) * factor).min(h) {
                for x in bx * factor..((bx + 1) * factor).min(w) {
                    hist[mask.get(x, y) as usize] += 1;
                }
            }
            let best = (0..TissueClass::COUNT)
                .max_by_key(|&c| (hist[c], std::cmp::Reverse(c)))
                .unwrap();
            codes.push(best as u8);
        }
    }
    LabelMask::from_codes(dw, dh, codes).expect("codes come from a valid mask")
}

#[derive(Debug, thiserror::Error)]
pub enum OverlayError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Quantify(#[from] QuantifyError),
}

/// Overlay at a stored pyramid level, with the level-0 mask reduced by
/// majority vote.
pub fn render_overlay_level(
    slide: &SlidePyramid,
    mask: &LabelMask,
    alpha: f64,
    factor: u32,
) -> std::result::Result<RgbImage, OverlayError> {
    let meta = slide.meta();
    if mask.dims() != (meta.width, meta.height) {
        return Err(QuantifyError::DimensionMismatch((meta.width, meta.height), mask.dims()).into());
    }
    let raster = slide.read_level(factor)?;
    Ok(render_overlay(&raster, &downsample_mask(mask, factor), alpha)?)
}
