//! Fused detections and the detection dump format.
//!
//! One detection per line, whitespace separated:
//!
//! ```text
//! image_id x_min y_min width height fused_score original part context
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::anchors::apply_deltas;
use super::network::{Backbone, OriginalOutput};
use crate::error::{Error, Result};
use crate::geometry::{nms_indices, BBox, Scored, ScoredBox};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BBox,
    /// `Σ_m α_m · branch_scores[m]`.
    pub score: Real,
    /// Original, part and context branch scores.
    pub branch_scores: [Real; 3],
}

impl Scored for Detection {
    fn bbox(&self) -> BBox {
        self.bbox
    }

    fn score(&self) -> Real {
        self.score
    }
}

/// Weighted sum of branch scores.
pub fn fuse(branch_scores: [Real; 3], weights: [Real; 3]) -> Real {
    branch_scores.iter().zip(weights).map(|(s, w)| s * w).sum()
}

/// Builds detections from per-proposal branch outputs: boxes come from the
/// original branch's deltas, scores are fused, then NMS runs on the fused
/// scores.
pub fn assemble(
    image_id: usize,
    bb: &Backbone,
    original: &OriginalOutput,
    part: &[Real],
    context: &[Real],
    weights: [Real; 3],
    nms_iou: Real,
) -> Result<Vec<Detection>> {
    let n = bb.proposals.len();
    if original.scores.len() != n || part.len() != n || context.len() != n {
        return Err(Error::Invalid(format!(
            "branch outputs ({}, {}, {}) do not match {n} proposals",
            original.scores.len(),
            part.len(),
            context.len()
        )));
    }
    let mut dets = Vec::with_capacity(n);
    for i in 0..n {
        let b = apply_deltas(&original.deltas[i], &bb.proposals[i].bbox)?;
        let Some(b) = b.clip(bb.image_width, bb.image_height) else {
            continue;
        };
        let branch_scores = [original.scores[i], part[i], context[i]];
        dets.push(Detection {
            image_id,
            bbox: b,
            score: fuse(branch_scores, weights),
            branch_scores,
        });
    }
    Ok(nms_indices(&dets, nms_iou).into_iter().map(|i| dets[i].clone()).collect())
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::from("# image_id x_min y_min width height score original part context\n");
    for d in dets {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {}",
            d.image_id,
            d.bbox.x_min,
            d.bbox.y_min,
            d.bbox.width,
            d.bbox.height,
            d.score,
            d.branch_scores[0],
            d.branch_scores[1],
            d.branch_scores[2]
        );
    }
    out
}

pub fn parse_detections(text: &str, origin: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<Real>().map_err(|e| err(format!("`{s}`: {e}")));
        let image_id = f[0].parse::<usize>().map_err(|e| err(format!("image id: {e}")))?;
        let bbox = BBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?).map_err(|e| err(e.to_string()))?;
        out.push(Detection {
            image_id,
            bbox,
            score: num(f[5])?,
            branch_scores: [num(f[6])?, num(f[7])?, num(f[8])?],
        });
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    std::fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string())
}

/// Groups detections per image for evaluation.
pub fn by_image(dets: &[Detection]) -> BTreeMap<usize, Vec<ScoredBox>> {
    let mut out: BTreeMap<usize, Vec<ScoredBox>> = BTreeMap::new();
    for d in dets {
        out.entry(d.image_id).or_default().push(ScoredBox {
            bbox: d.bbox,
            score: d.score,
        });
    }
    out
}
