//! Kaplan-Meier curves, the two-group log-rank test, cutoff stratification
//! and the cutoff sweep.
//!
//! Conventions:
//! - deaths tied at one time are processed together;
//! - an observation censored at an event time is still at risk for it;
//! - the responder arm is `ratio >= cutoff`, never chosen from the data;
//! - the sweep reports raw p-values, with no multiple-testing correction.

use libm::erfc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::quantify::{CaseFlag, CaseQuantification};
use crate::slide_store::{CaseRecord, Split};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SurvivalError {
    #[error("no observations")]
    Empty,
    #[error("observation `{case_id}` has invalid time {time}")]
    InvalidTime { case_id: String, time: f64 },
    #[error("{0} arm is empty")]
    EmptyArm(Arm),
    #[error("no events in either arm")]
    NoEvents,
    #[error("log-rank variance is zero; the arms cannot be compared")]
    ZeroVariance,
    #[error("no thresholds given")]
    NoThresholds,
    #[error("threshold {0} is not a fraction in [0,1]")]
    BadThreshold(f64),
    #[error("no threshold yields two testable arms")]
    AllUnevaluable,
}

pub type Result<T> = std::result::Result<T, SurvivalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalObservation {
    pub case_id: String,
    /// Months, strictly positive.
    pub time: f64,
    /// `true` for death or progression, `false` when censored.
    pub event: bool,
}

impl SurvivalObservation {
    pub fn new(case_id: impl Into<String>, time: f64, event: bool) -> Result<Self> {
        let case_id = case_id.into();
        if !(time.is_finite() && time > 0.0) {
            return Err(SurvivalError::InvalidTime { case_id, time });
        }
        Ok(SurvivalObservation { case_id, time, event })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    pub time: f64,
    pub n_risk: usize,
    pub events: usize,
    pub survival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// One step per distinct event time, ascending.
    pub steps: Vec<KmStep>,
    /// Times of censored observations, ascending (for tick marks).
    pub censored: Vec<f64>,
    pub subjects: usize,
}

impl KmCurve {
    /// S(t): product over event times up to and including `t`.
    pub fn survival_at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|s| s.time <= t)
            .last()
            .map_or(1.0, |s| s.survival)
    }

    pub fn last_time(&self) -> f64 {
        let last_event = self.steps.last().map_or(0.0, |s| s.time);
        let last_censor = self.censored.last().copied().unwrap_or(0.0);
        last_event.max(last_censor)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,n_risk,d,S\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{}\n", s.time, s.n_risk, s.events, s.survival));
        }
        out
    }
}

fn check_times(obs: &[SurvivalObservation]) -> Result<()> {
    for o in obs {
        if !(o.time.is_finite() && o.time > 0.0) {
            return Err(SurvivalError::InvalidTime {
                case_id: o.case_id.clone(),
                time: o.time,
            });
        }
    }
    Ok(())
}

fn sorted_by_time(obs: &[SurvivalObservation]) -> Vec<&SurvivalObservation> {
    let mut sorted: Vec<&SurvivalObservation> = obs.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    sorted
}

/// Product-limit estimate.
pub fn km_estimate(obs: &[SurvivalObservation]) -> Result<KmCurve> {
    if obs.is_empty() {
        return Err(SurvivalError::Empty);
    }
    check_times(obs)?;
    let sorted = sorted_by_time(obs);
    let mut steps = Vec::new();
    let mut censored = Vec::new();
    let mut at_risk = sorted.len();
    let mut survival = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let group_end = sorted[i..].iter().position(|o| o.time != t).map_or(sorted.len(), |k| i + k);
        let group = &sorted[i..group_end];
        let deaths = group.iter().filter(|o| o.event).count();
        censored.extend(group.iter().filter(|o| !o.event).map(|o| o.time));
        if deaths > 0 {
            survival *= 1.0 - deaths as f64 / at_risk as f64;
            steps.push(KmStep {
                time: t,
                n_risk: at_risk,
                events: deaths,
                survival,
            });
        }
        at_risk -= group.len();
        i = group_end;
    }
    Ok(KmCurve {
        steps,
        censored,
        subjects: obs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    /// Chi-square statistic with one degree of freedom.
    pub statistic: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1_upper_tail(statistic: f64) -> f64 {
    erfc((statistic / 2.0).sqrt())
}

/// Two-group log-rank test.
pub fn logrank(arm_a: &[SurvivalObservation], arm_b: &[SurvivalObservation]) -> Result<LogRank> {
    if arm_a.is_empty() {
        return Err(SurvivalError::EmptyArm(Arm::Responder));
    }
    if arm_b.is_empty() {
        return Err(SurvivalError::EmptyArm(Arm::NonResponder));
    }
    check_times(arm_a)?;
    check_times(arm_b)?;

    // (time, in arm A, event), ascending by time.
    let mut pooled: Vec<(f64, bool, bool)> = arm_a
        .iter()
        .map(|o| (o.time, true, o.event))
        .chain(arm_b.iter().map(|o| (o.time, false, o.event)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut n = pooled.len() as f64;
    let mut n_a = arm_a.len() as f64;
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    let mut any_event = false;
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let end = pooled[i..].iter().position(|p| p.0 != t).map_or(pooled.len(), |k| i + k);
        let group = &pooled[i..end];
        let d = group.iter().filter(|p| p.2).count() as f64;
        let d_a = group.iter().filter(|p| p.1 && p.2).count() as f64;
        if d > 0.0 {
            any_event = true;
            let share = n_a / n;
            observed += d_a;
            expected += d * share;
            if n > 1.0 {
                variance += d * share * (1.0 - share) * (n - d) / (n - 1.0);
            }
        }
        n -= group.len() as f64;
        n_a -= group.iter().filter(|p| p.1).count() as f64;
        i = end;
    }
    if !any_event {
        return Err(SurvivalError::NoEvents);
    }
    if variance <= 0.0 {
        return Err(SurvivalError::ZeroVariance);
    }
    let statistic = (observed - expected).powi(2) / variance;
    Ok(LogRank {
        statistic,
        p_value: chi2_1_upper_tail(statistic),
        observed_a: observed,
        expected_a: expected,
        variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Os,
    Pfs,
}

impl Endpoint {
    pub fn label(self) -> &'static str {
        match self {
            Endpoint::Os => "os",
            Endpoint::Pfs => "pfs",
        }
    }
}

impl std::str::FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "os" => Ok(Endpoint::Os),
            "pfs" => Ok(Endpoint::Pfs),
            other => Err(format!("unknown endpoint `{other}` (expected os or pfs)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Responder,
    NonResponder,
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arm::Responder => "responder",
            Arm::NonResponder => "non-responder",
        })
    }
}

/// Which ratio assigns arms: the model's or the pathology report's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioSource {
    Model,
    Report,
}

/// A case as seen by the survival analysis: its clinical record plus the
/// model ratio, absent when the case was flagged as tumor-free.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortCase {
    pub record: CaseRecord,
    pub r_dl: Option<f64>,
}

impl CohortCase {
    pub fn new(record: CaseRecord, quantification: &CaseQuantification) -> Self {
        let r_dl = if quantification.has_flag(CaseFlag::NoTumor) {
            None
        } else {
            quantification.r_dl()
        };
        CohortCase { record, r_dl }
    }

    pub fn ratio(&self, source: RatioSource) -> Option<f64> {
        match source {
            RatioSource::Model => self.r_dl,
            RatioSource::Report => self.record.r_pr,
        }
    }

    fn ratio_evaluable(&self) -> bool {
        self.record.split == Split::Test && self.record.r_pr.is_some() && self.r_dl.is_some()
    }

    fn os_evaluable(&self) -> bool {
        self.ratio_evaluable() && self.record.os_months.is_some()
    }

    fn pfs_evaluable(&self) -> bool {
        self.os_evaluable()
            && self.record.metastasis_at_diagnosis == Some(false)
            && self.record.pfs_months.is_some()
    }

    pub fn evaluable(&self, endpoint: Endpoint) -> bool {
        match endpoint {
            Endpoint::Os => self.os_evaluable(),
            Endpoint::Pfs => self.pfs_evaluable(),
        }
    }

    pub fn observation(&self, endpoint: Endpoint) -> Option<Result<SurvivalObservation>> {
        let (time, event) = match endpoint {
            Endpoint::Os => (self.record.os_months?, self.record.os_event),
            Endpoint::Pfs => (self.record.pfs_months?, self.record.pfs_event),
        };
        Some(SurvivalObservation::new(self.record.id.clone(), time, event))
    }
}

/// Sizes of the successive analysis subsets: testing cases, those with a
/// reported and computed ratio, those also with overall survival, and those
/// also eligible for progression-free survival.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsortCounts {
    pub training: usize,
    pub testing: usize,
    pub ratio_evaluable: usize,
    pub os_evaluable: usize,
    pub pfs_evaluable: usize,
}

pub fn consort(cases: &[CohortCase]) -> ConsortCounts {
    let count = |f: &dyn Fn(&CohortCase) -> bool| cases.iter().filter(|c| f(c)).count();
    ConsortCounts {
        training: count(&|c| c.record.split == Split::Train),
        testing: count(&|c| c.record.split == Split::Test),
        ratio_evaluable: count(&|c| c.ratio_evaluable()),
        os_evaluable: count(&|c| c.os_evaluable()),
        pfs_evaluable: count(&|c| c.pfs_evaluable()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationResult {
    pub endpoint: Endpoint,
    pub source: RatioSource,
    pub cutoff: f64,
    pub responders: Vec<String>,
    pub non_responders: Vec<String>,
    pub km_responders: KmCurve,
    pub km_non_responders: KmCurve,
    pub logrank: LogRank,
}

/// Splits the evaluable cohort at `cutoff` and compares the arms.
pub fn stratify(cases: &[CohortCase], endpoint: Endpoint, cutoff: f64, source: RatioSource) -> Result<StratificationResult> {
    if !(0.0..=1.0).contains(&cutoff) {
        return Err(SurvivalError::BadThreshold(cutoff));
    }
    let mut responders = Vec::new();
    let mut non_responders = Vec::new();
    for case in cases.iter().filter(|c| c.evaluable(endpoint)) {
        let Some(ratio) = case.ratio(source) else { continue };
        let Some(obs) = case.observation(endpoint) else { continue };
        if ratio >= cutoff {
            responders.push(obs?);
        } else {
            non_responders.push(obs?);
        }
    }
    if responders.is_empty() {
        return Err(SurvivalError::EmptyArm(Arm::Responder));
    }
    if non_responders.is_empty() {
        return Err(SurvivalError::EmptyArm(Arm::NonResponder));
    }
    let logrank = logrank(&responders, &non_responders)?;
    Ok(StratificationResult {
        endpoint,
        source,
        cutoff,
        km_responders: km_estimate(&responders)?,
        km_non_responders: km_estimate(&non_responders)?,
        responders: responders.into_iter().map(|o| o.case_id).collect(),
        non_responders: non_responders.into_iter().map(|o| o.case_id).collect(),
        logrank,
    })
}

/// Cutoffs tried by default, in table order.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.9, 0.8, 0.7, 0.6, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cutoff: f64,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    /// Why the cutoff could not be tested, if it could not.
    pub unevaluable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub endpoint: Endpoint,
    pub source: RatioSource,
    pub rows: Vec<SweepRow>,
    /// Cutoff with the smallest p-value; ties go to the higher cutoff.
    pub argmin: f64,
    /// The sweep is exploratory: p-values are not corrected.
    pub corrected: bool,
}

/// Stratifies at every threshold. Rows keep the order of `thresholds`.
pub fn sweep(cases: &[CohortCase], endpoint: Endpoint, thresholds: &[f64], source: RatioSource) -> Result<SweepResult> {
    if thresholds.is_empty() {
        return Err(SurvivalError::NoThresholds);
    }
    if let Some(&bad) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(SurvivalError::BadThreshold(bad));
    }
    let rows: Vec<SweepRow> = thresholds
        .par_iter()
        .map(|&cutoff| match stratify(cases, endpoint, cutoff, source) {
            Ok(s) => SweepRow {
                cutoff,
                statistic: Some(s.logrank.statistic),
                p_value: Some(s.logrank.p_value),
                unevaluable: None,
            },
            Err(e) => SweepRow {
                cutoff,
                statistic: None,
                p_value: None,
                unevaluable: Some(e.to_string()),
            },
        })
        .collect();
    let argmin = select_argmin(&rows).ok_or(SurvivalError::AllUnevaluable)?;
    Ok(SweepResult {
        endpoint,
        source,
        rows,
        argmin,
        corrected: false,
    })
}

fn select_argmin(rows: &[SweepRow]) -> Option<f64> {
    rows.iter()
        .filter_map(|r| r.p_value.map(|p| (p, r.cutoff)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)))
        .map(|(_, cutoff)| cutoff)
}

/// p-value with two significant digits in scientific notation.
pub fn format_p(p: f64) -> String {
    format!("{p:.1e}")
}

/// Sweep results side by side: one row per cutoff, one column pair
/// (p-value, argmin marker) per endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cutoffs: Vec<f64>,
    pub endpoints: Vec<SweepResult>,
}

impl SweepTable {
    pub fn new(endpoints: Vec<SweepResult>) -> Self {
        let cutoffs = endpoints
            .first()
            .map(|e| e.rows.iter().map(|r| r.cutoff).collect())
            .unwrap_or_default();
        SweepTable { cutoffs, endpoints }
    }

    pub fn to_csv(&self) -> String {
        let mut header = vec!["cutoff".to_string()];
        for e in &self.endpoints {
            header.push(format!("{}_p", e.endpoint.label()));
            header.push(format!("{}_argmin", e.endpoint.label()));
        }
        let mut out = header.join(",");
        out.push('\n');
        for (i, cutoff) in self.cutoffs.iter().enumerate() {
            let mut cells = vec![format!("{cutoff:.2}")];
            for e in &self.endpoints {
                let row = &e.rows[i];
                cells.push(row.p_value.map(format_p).unwrap_or_else(|| "NA".to_string()));
                cells.push((row.p_value.is_some() && row.cutoff == e.argmin).to_string());
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Step plot of one or more curves with censoring ticks.
pub fn km_svg(curves: &[(&str, &KmCurve)], title: &str) -> String {
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"];
    let (w, h, pad) = (560.0, 400.0, 50.0);
    let t_max = curves
        .iter()
        .map(|(_, c)| c.last_time())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let sx = |t: f64| pad + t / t_max * (w - 2.0 * pad);
    let sy = |s: f64| h - pad - s * (h - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{pad}\" y2=\"{pad}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">months (max {t_max:.1})</text>\n",
        w / 2.0,
        crate::quantify::xml_escape(title),
        w / 2.0,
        h - 15.0,
        b = h - pad,
        r = w - pad,
    );
    for (k, (label, curve)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut points = vec![(sx(0.0), sy(1.0))];
        let mut s = 1.0;
        for step in &curve.steps {
            points.push((sx(step.time), sy(s)));
            s = step.survival;
            points.push((sx(step.time), sy(s)));
        }
        points.push((sx(curve.last_time()), sy(s)));
        let path: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &t in &curve.censored {
            let (x, y) = (sx(t), sy(curve.survival_at(t)));
            svg.push_str(&format!(
                "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"{color}\"/>\n",
                y - 5.0,
                y + 5.0
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{} (n={})</text>\n",
            w - pad - 150.0,
            pad + 16.0 * (k as f64 + 1.0),
            crate::quantify::xml_escape(label),
            curve.subjects
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(pairs: &[(f64, bool)]) -> Vec<SurvivalObservation> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(t, e))| SurvivalObservation::new(format!("o{i}"), t, e).unwrap())
            .collect()
    }

    #[test]
    fn km_all_censored_stays_at_one() {
        let curve = km_estimate(&obs(&[(1.0, false), (2.0, false)])).unwrap();
        assert!(curve.steps.is_empty());
        assert_eq!(curve.survival_at(100.0), 1.0);
    }

    #[test]
    fn km_hand_example() {
        let curve = km_estimate(&obs(&[(1.0, true), (2.0, false), (3.0, true)])).unwrap();
        assert_eq!(curve.steps.len(), 2);
        assert!((curve.survival_at(1.0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((curve.survival_at(2.5) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(curve.steps[1].n_risk, 1);
        assert_eq!(curve.survival_at(3.0), 0.0);
        assert_eq!(curve.survival_at(0.5), 1.0);
    }

    #[test]
    fn km_single_event() {
        let curve = km_estimate(&obs(&[(5.0, true)])).unwrap();
        assert_eq!(curve.survival_at(5.0), 0.0);
    }

    #[test]
    fn km_errors() {
        assert_eq!(km_estimate(&[]), Err(SurvivalError::Empty));
        let bad = SurvivalObservation {
            case_id: "x".into(),
            time: 0.0,
            event: true,
        };
        assert!(matches!(km_estimate(&[bad]), Err(SurvivalError::InvalidTime { .. })));
        assert!(SurvivalObservation::new("y", -1.0, false).is_err());
    }

    #[test]
    fn censored_tied_with_event_stays_at_risk() {
        let curve = km_estimate(&obs(&[(2.0, true), (2.0, false), (3.0, true)])).unwrap();
        assert_eq!(curve.steps[0].n_risk, 3);
        assert!((curve.steps[0].survival - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_arms_give_p_one() {
        let a = obs(&[(1.0, true), (2.0, false), (4.0, true)]);
        let r = logrank(&a, &a.clone()).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn critical_value_maps_to_five_percent() {
        assert!((chi2_1_upper_tail(3.841) - 0.05).abs() < 1e-3);
        assert!((chi2_1_upper_tail(6.635) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn logrank_errors() {
        let a = obs(&[(1.0, true)]);
        assert_eq!(logrank(&[], &a), Err(SurvivalError::EmptyArm(Arm::Responder)));
        let censored = obs(&[(1.0, false), (2.0, false)]);
        assert_eq!(logrank(&censored, &censored.clone()), Err(SurvivalError::NoEvents));
        // One subject per arm, both dying at once: n_j = 2, d_j = 2 → v = 0.
        let b = obs(&[(1.0, true)]);
        assert_eq!(logrank(&a, &b), Err(SurvivalError::ZeroVariance));
    }

    #[test]
    fn p_formatting() {
        assert_eq!(format_p(0.0021), "2.1e-3");
        assert_eq!(format_p(1.4e-6), "1.4e-6");
    }

    #[test]
    fn argmin_prefers_higher_cutoff_on_ties() {
        let row = |cutoff, p| SweepRow {
            cutoff,
            statistic: Some(1.0),
            p_value: p,
            unevaluable: None,
        };
        let rows = [row(0.5, Some(0.01)), row(0.7, Some(0.01)), row(0.9, None), row(0.6, Some(0.2))];
        assert_eq!(select_argmin(&rows), Some(0.7));
        assert_eq!(select_argmin(&[row(0.9, None)]), None);
    }
}
