//! Anchor and RoI labelling with positive/negative sampling.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::Sampling;
use crate::annotation::Annotation;
use crate::geometry::{encode_bbox, iou, BBox};
use crate::model::BBOX_STD;
use crate::nn::Roi;
use crate::tensor::Real;

fn normalized_target(gt: &BBox, reference: &BBox) -> [Real; 4] {
    let t = encode_bbox(gt, reference);
    [t[0] / BBOX_STD[0], t[1] / BBOX_STD[1], t[2] / BBOX_STD[2], t[3] / BBOX_STD[3]]
}

/// Sampled anchors with labels, and regression targets for positives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorSample {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Anchor indices of the positives, with their targets.
    pub positives: Vec<usize>,
    pub targets: Vec<[Real; 4]>,
}

/// Labels anchors by IoU of their image-clipped extent with the ground
/// truth: positive at `rpn_fg_iou` or above, or when an anchor is the best
/// match of some box; negative below `rpn_bg_iou`. Samples up to half the
/// batch as positives and fills the rest with negatives.
pub fn sample_anchors(anchors: &[BBox], gts: &[BBox], extent: (Real, Real), s: &Sampling, rng: &mut impl Rng) -> AnchorSample {
    let mut label: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut best_gt = vec![0usize; anchors.len()];
    let mut gt_best = vec![(0.0 as Real, Vec::<usize>::new()); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        let Some(clipped) = a.clip(extent.0, extent.1) else { continue };
        let mut best = 0.0;
        for (j, g) in gts.iter().enumerate() {
            let o = iou(&clipped, g);
            if o > best {
                best = o;
                best_gt[i] = j;
            }
            if o > 0.0 {
                if o > gt_best[j].0 {
                    gt_best[j] = (o, vec![i]);
                } else if o == gt_best[j].0 {
                    gt_best[j].1.push(i);
                }
            }
        }
        if best >= s.rpn_fg_iou {
            label[i] = Some(1);
        } else if best < s.rpn_bg_iou {
            label[i] = Some(0);
        }
    }
    for (j, (_, idx)) in gt_best.iter().enumerate() {
        for &i in idx {
            label[i] = Some(1);
            best_gt[i] = j;
        }
    }
    let mut pos: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == Some(1)).collect();
    let mut neg: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == Some(0)).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(s.rpn_batch / 2);
    neg.truncate(s.rpn_batch - pos.len());
    let targets = pos.iter().map(|&i| normalized_target(&gts[best_gt[i]], &anchors[i])).collect();
    let mut indices = pos.clone();
    indices.extend_from_slice(&neg);
    let mut labels = vec![1; pos.len()];
    labels.extend(std::iter::repeat_n(0, neg.len()));
    AnchorSample {
        indices,
        labels,
        positives: pos,
        targets,
    }
}

/// Sampled RoIs, positives first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiSample {
    pub rois: Vec<Roi>,
    pub labels: Vec<usize>,
    /// Ground-truth index matched by each positive.
    pub matched: Vec<usize>,
    /// Normalised regression targets of the positives.
    pub targets: Vec<[Real; 4]>,
}

impl RoiSample {
    pub fn positives(&self) -> usize {
        self.matched.len()
    }
}

/// Samples RoIs from the proposals plus the ground-truth boxes themselves.
pub fn sample_rois(proposals: &[BBox], gts: &[Annotation], s: &Sampling, rng: &mut impl Rng) -> RoiSample {
    let cands: Vec<BBox> = proposals.iter().copied().chain(gts.iter().map(|a| a.bbox)).collect();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, c) in cands.iter().enumerate() {
        let (best, j) = gts
            .iter()
            .enumerate()
            .map(|(j, g)| (iou(c, &g.bbox), j))
            .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
        if best >= s.fg_iou {
            fg.push((i, j));
        } else if best < s.bg_iou {
            bg.push(i);
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let max_fg = ((s.roi_batch as Real * s.fg_fraction).round() as usize).max(1);
    fg.truncate(max_fg);
    bg.truncate(s.roi_batch - fg.len());
    let mut out = RoiSample::default();
    for &(i, j) in &fg {
        out.rois.push(Roi::from_bbox(&cands[i], 0));
        out.labels.push(1);
        out.matched.push(j);
        out.targets.push(normalized_target(&gts[j].bbox, &cands[i]));
    }
    for &i in &bg {
        out.rois.push(Roi::from_bbox(&cands[i], 0));
        out.labels.push(0);
    }
    out
}
