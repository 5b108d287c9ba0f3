//! Caltech-style evaluation: miss rate against false positives per image,
//! sampled at nine log-spaced FPPI points in `[1e-2, 1]` and summarised by
//! their geometric mean.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::annotation::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{iou, rank_by_score, ScoredBox};
use crate::tensor::Real;

pub const FPPI_POINTS: usize = 9;
pub const MISS_RATE_FLOOR: Real = 1e-10;

/// Ground-truth window and matching threshold of one benchmark column.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSetting {
    pub name: String,
    pub min_height: Real,
    /// Inclusive occlusion-fraction window.
    pub occlusion_range: (Real, Real),
    pub iou_threshold: Real,
}

impl EvalSetting {
    pub fn new(name: &str, min_height: Real, occlusion_range: (Real, Real), iou_threshold: Real) -> Result<Self> {
        let (lo, hi) = occlusion_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("occlusion range [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi ≤ 1")));
        }
        if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
            return Err(Error::Config(format!("IoU threshold {iou_threshold} must be in (0, 1)")));
        }
        Ok(EvalSetting {
            name: name.to_string(),
            min_height,
            occlusion_range,
            iou_threshold,
        })
    }

    pub fn reasonable() -> Self {
        Self::new("reasonable", 50.0, (0.0, 0.35), 0.5).unwrap()
    }

    pub fn all() -> Self {
        Self::new("all", 20.0, (0.0, 1.0), 0.5).unwrap()
    }

    pub fn occ_none() -> Self {
        Self::new("occ-none", 50.0, (0.0, 0.0), 0.5).unwrap()
    }

    pub fn occ_partial() -> Self {
        Self::new("occ-partial", 50.0, (0.01, 0.35), 0.5).unwrap()
    }

    pub fn occ_heavy() -> Self {
        Self::new("occ-heavy", 50.0, (0.35, 0.80), 0.5).unwrap()
    }

    pub fn over75() -> Self {
        Self::new("over75", 50.0, (0.0, 0.35), 0.75).unwrap()
    }

    /// The six benchmark columns in report order.
    pub fn standard() -> Vec<EvalSetting> {
        vec![
            Self::reasonable(),
            Self::all(),
            Self::occ_none(),
            Self::occ_partial(),
            Self::occ_heavy(),
            Self::over75(),
        ]
    }

    pub fn by_name(name: &str) -> Result<EvalSetting> {
        Self::standard()
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| {
                let names: Vec<String> = Self::standard().into_iter().map(|s| s.name).collect();
                Error::Config(format!("unknown setting `{name}`; valid settings: {}", names.join(", ")))
            })
    }

    pub fn includes(&self, a: &Annotation) -> bool {
        let (lo, hi) = self.occlusion_range;
        a.bbox.height >= self.min_height && a.occlusion_fraction >= lo && a.occlusion_fraction <= hi
    }
}

/// Splits ground truth into the evaluated set and the ignored remainder.
pub fn filter_setting(annotations: &[Annotation], setting: &EvalSetting) -> (Vec<Annotation>, Vec<Annotation>) {
    annotations.iter().cloned().partition(|a| setting.includes(a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrCurve {
    pub fppi_points: [Real; FPPI_POINTS],
    pub miss_rates: [Real; FPPI_POINTS],
    pub log_average: Real,
}

pub fn fppi_reference_points() -> [Real; FPPI_POINTS] {
    std::array::from_fn(|i| (10.0 as Real).powf(-2.0 + 2.0 * i as Real / (FPPI_POINTS - 1) as Real))
}

pub fn log_average(miss_rates: &[Real]) -> Real {
    let mean = miss_rates.iter().map(|m| m.max(MISS_RATE_FLOOR).ln()).sum::<Real>() / miss_rates.len() as Real;
    mean.exp()
}

/// Per-detection outcome of matching within one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    /// Matched an ignored ground truth; excluded from the sweep.
    Ignored,
}

/// Greedy matching of one image's detections in descending score order.
/// Each evaluated ground truth is claimed at most once, by the unmatched
/// one of highest IoU at or above the threshold; ignored ground truth may
/// absorb any number of detections.
pub fn match_image(
    detections: &[ScoredBox],
    evaluated: &[Annotation],
    ignored: &[Annotation],
    iou_threshold: Real,
) -> Vec<MatchOutcome> {
    let mut out = vec![MatchOutcome::FalsePositive; detections.len()];
    let mut taken = vec![false; evaluated.len()];
    for d in rank_by_score(detections) {
        let bbox = &detections[d].bbox;
        let mut best: Option<(usize, Real)> = None;
        for (j, gt) in evaluated.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou(bbox, &gt.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        out[d] = if let Some((j, _)) = best {
            taken[j] = true;
            MatchOutcome::TruePositive
        } else if ignored.iter().any(|gt| iou(bbox, &gt.bbox) >= iou_threshold) {
            MatchOutcome::Ignored
        } else {
            MatchOutcome::FalsePositive
        };
    }
    out
}

/// Achieved (fppi, miss rate) pairs after each distinct score threshold.
pub fn operating_points(scored: &mut [(Real, bool)], n_images: usize, n_gt: usize) -> Vec<(Real, Real)> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = scored.get(i + 1).is_none_or(|next| next.0 != score);
        if group_ends {
            points.push((fp as Real / n_images as Real, 1.0 - tp as Real / n_gt as Real));
        }
    }
    points
}

/// Miss rate at `fppi`: piecewise-linear between achieved points, constant
/// beyond the extremes. Points sharing an FPPI value collapse to their
/// lowest miss rate. With no points the miss rate is 1.
pub fn interpolate_miss_rate(points: &[(Real, Real)], fppi: Real) -> Real {
    let mut collapsed: Vec<(Real, Real)> = Vec::new();
    for &(f, m) in points {
        match collapsed.last_mut() {
            Some(last) if last.0 == f => last.1 = last.1.min(m),
            _ => collapsed.push((f, m)),
        }
    }
    let Some(&first) = collapsed.first() else {
        return 1.0;
    };
    let last = *collapsed.last().unwrap();
    if fppi <= first.0 {
        return first.1;
    }
    if fppi >= last.0 {
        return last.1;
    }
    for w in collapsed.windows(2) {
        let ((f0, m0), (f1, m1)) = (w[0], w[1]);
        if fppi >= f0 && fppi <= f1 {
            let t = (fppi - f0) / (f1 - f0);
            return m0 + t * (m1 - m0);
        }
    }
    last.1
}

/// Evaluates detections against annotations over `images`. Every detection
/// and annotation must reference an image in that set.
pub fn evaluate_mr(
    images: &BTreeSet<usize>,
    detections: &BTreeMap<usize, Vec<ScoredBox>>,
    annotations: &BTreeMap<usize, Vec<Annotation>>,
    setting: &EvalSetting,
) -> Result<MrCurve> {
    if let Some(id) = detections.keys().find(|id| !images.contains(id)) {
        return Err(Error::ImageSetMismatch(format!("detections reference unknown image {id}")));
    }
    if let Some(id) = annotations.keys().find(|id| !images.contains(id)) {
        return Err(Error::ImageSetMismatch(format!("annotations reference unknown image {id}")));
    }
    if images.is_empty() {
        return Err(Error::ImageSetMismatch("empty image set".into()));
    }
    let mut scored: Vec<(Real, bool)> = Vec::new();
    let mut n_gt = 0;
    for id in images {
        let anns = annotations.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let (evaluated, ignored) = filter_setting(anns, setting);
        n_gt += evaluated.len();
        let dets = detections.get(id).map(Vec::as_slice).unwrap_or(&[]);
        for (d, outcome) in dets.iter().zip(match_image(dets, &evaluated, &ignored, setting.iou_threshold)) {
            match outcome {
                MatchOutcome::TruePositive => scored.push((d.score, true)),
                MatchOutcome::FalsePositive => scored.push((d.score, false)),
                MatchOutcome::Ignored => {}
            }
        }
    }
    if n_gt == 0 {
        return Err(Error::NoGroundTruth(setting.name.clone()));
    }
    let points = operating_points(&mut scored, images.len(), n_gt);
    let fppi_points = fppi_reference_points();
    let miss_rates = fppi_points.map(|f| interpolate_miss_rate(&points, f));
    Ok(MrCurve {
        fppi_points,
        miss_rates,
        log_average: log_average(&miss_rates),
    })
}

/// `fppi,miss_rate` rows followed by a `log_average,<value>` summary line.
pub fn format_curve_csv(curve: &MrCurve) -> String {
    let mut out = String::from("fppi,miss_rate\n");
    for (f, m) in curve.fppi_points.iter().zip(&curve.miss_rates) {
        let _ = writeln!(out, "{f},{m}");
    }
    let _ = writeln!(out, "log_average,{}", curve.log_average);
    out
}
