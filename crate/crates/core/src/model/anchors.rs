//! Anchors, proposal decoding and context-region scaling.

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{decode_bbox, nms_indices, BBox, ScoredBox};
use crate::nn::Roi;
use crate::tensor::{Real, Tensor};

/// Largest log size ratio a predicted delta may apply.
pub const MAX_LOG_RATIO: Real = 4.135_166_556_742_356; // ln(1000/16)

/// Anchors centred on every feature cell, ordered by row, column, then
/// scale: anchor `(y·W + x)·A + a` has height `base·stride^a`.
pub fn generate_anchors(cfg: &ModelConfig, feature_stride: usize, feature_size: (usize, usize)) -> Vec<BBox> {
    let (fh, fw) = feature_size;
    let s = feature_stride.max(1) as Real;
    let heights = cfg.anchor_heights();
    let mut out = Vec::with_capacity(fh * fw * heights.len());
    for y in 0..fh {
        for x in 0..fw {
            let (cx, cy) = ((x as Real + 0.5) * s, (y as Real + 0.5) * s);
            for &h in &heights {
                out.push(BBox::from_center(cx, cy, h * cfg.anchor_aspect_ratio, h).expect("positive anchor"));
            }
        }
    }
    out
}

/// Applies deltas with the size ratio clamped so huge predictions stay finite.
pub fn apply_deltas(t: &[Real], reference: &BBox) -> Result<BBox> {
    let t = [t[0], t[1], t[2].min(MAX_LOG_RATIO), t[3].min(MAX_LOG_RATIO)];
    decode_bbox(&t, reference)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalSettings {
    pub image_width: Real,
    pub image_height: Real,
    pub pre_nms_top: usize,
    pub top_n: usize,
    pub nms_iou: Real,
    pub min_size: Real,
}

/// Decodes `deltas[N×4]` onto the anchors, clips to the image, drops tiny
/// boxes, keeps the `pre_nms_top` most confident, runs NMS and returns at
/// most `top_n` regions in descending objectness. `objectness` holds one
/// foreground probability per anchor (`[N]`) or a two-class distribution
/// per anchor (`[N×2]`).
pub fn propose(objectness: &Tensor, deltas: &Tensor, anchors: &[BBox], settings: &ProposalSettings) -> Result<Vec<Roi>> {
    Ok(propose_scored(objectness, deltas, anchors, settings)?
        .iter()
        .map(|s| Roi::from_bbox(&s.bbox, 0))
        .collect())
}

pub fn propose_scored(objectness: &Tensor, deltas: &Tensor, anchors: &[BBox], settings: &ProposalSettings) -> Result<Vec<ScoredBox>> {
    let n = anchors.len();
    let fg: Vec<Real> = match objectness.shape() {
        [m] if *m == n => objectness.data().to_vec(),
        [m, 2] if *m == n => objectness.data().chunks(2).map(|c| c[1]).collect(),
        s => {
            return Err(Error::ShapeMismatch {
                op: "propose",
                lhs: s.to_vec(),
                rhs: vec![n],
            })
        }
    };
    if deltas.shape() != [n, 4] {
        return Err(Error::ShapeMismatch {
            op: "propose",
            lhs: deltas.shape().to_vec(),
            rhs: vec![n, 4],
        });
    }
    let mut cands = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let b = apply_deltas(&deltas.data()[i * 4..i * 4 + 4], anchor)?;
        let Some(b) = b.clip(settings.image_width, settings.image_height) else {
            continue;
        };
        if b.width < settings.min_size || b.height < settings.min_size {
            continue;
        }
        cands.push(ScoredBox { bbox: b, score: fg[i] });
    }
    let order = crate::geometry::rank_by_score(&cands);
    let top: Vec<ScoredBox> = order.iter().take(settings.pre_nms_top).map(|&i| cands[i]).collect();
    Ok(nms_indices(&top, settings.nms_iou)
        .into_iter()
        .take(settings.top_n)
        .map(|i| top[i])
        .collect())
}

/// Context region: the RoI's size multiplied by `s` about the same centre,
/// then clipped to the image.
pub fn scale_roi(roi: &Roi, s: Real, image_extent: (Real, Real)) -> Result<Roi> {
    if !(s > 0.0) {
        return Err(Error::Invalid(format!("context scale {s} must be positive")));
    }
    let scaled = BBox::from_center(roi.x_center, roi.y_center, roi.width * s, roi.height * s)?;
    let (w, h) = image_extent;
    if scaled.x_min >= 0.0 && scaled.y_min >= 0.0 && scaled.x_max() <= w && scaled.y_max() <= h {
        return Ok(Roi { width: roi.width * s, height: roi.height * s, ..*roi });
    }
    let clipped = scaled.clip(w, h).ok_or(Error::RoiOutside)?;
    Ok(Roi::from_bbox(&clipped, roi.source_image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn settings(top_n: usize) -> ProposalSettings {
        ProposalSettings {
            image_width: 100.0,
            image_height: 100.0,
            pre_nms_top: 100,
            top_n,
            nms_iou: 0.5,
            min_size: 1.0,
        }
    }

    #[test]
    fn anchor_layout() {
        let cfg = ModelConfig::default();
        let a = generate_anchors(&cfg, 4, (2, 3));
        assert_eq!(a.len(), 2 * 3 * 9);
        assert_eq!(a[0].height, 40.0);
        assert!((a[1].height - 56.0).abs() < 1e-12);
        assert!((a[2].height - 78.4).abs() < 1e-12);
        // cell (y=1, x=2), first scale
        let b = a[(3 + 2) * 9];
        assert_eq!(b.center(), (10.0, 6.0));
        assert!((b.width - 40.0 * 0.41).abs() < 1e-12);
    }

    #[test]
    fn identity_decode() {
        let anchor = BBox::new(10.0, 20.0, 16.0, 40.0).unwrap();
        let r = propose(&Tensor::from_slice(&[0.7]), &Tensor::zeros(vec![1, 4]), &[anchor], &settings(50)).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].to_bbox(), anchor);
    }

    #[test]
    fn coincident_anchors_suppressed() {
        let anchor = BBox::new(10.0, 20.0, 16.0, 40.0).unwrap();
        let obj = Tensor::new(vec![2, 2], vec![0.2, 0.8, 0.1, 0.9]).unwrap();
        let r = propose_scored(&obj, &Tensor::zeros(vec![2, 4]), &[anchor, anchor], &settings(50)).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].score, 0.9);
    }

    #[test]
    fn top_n_bounds_output() {
        let anchors: Vec<BBox> = (0..80).map(|i| BBox::new((i % 10) as Real * 10.0, (i / 10) as Real * 12.0, 8.0, 10.0).unwrap()).collect();
        let obj = Tensor::new(vec![80], (0..80).map(|i| i as Real / 80.0).collect()).unwrap();
        let r = propose(&obj, &Tensor::zeros(vec![80, 4]), &anchors, &settings(50)).unwrap();
        assert_eq!(r.len(), 50);
        for (i, a) in r.iter().enumerate() {
            for b in &r[i + 1..] {
                assert!(iou(&a.to_bbox(), &b.to_bbox()) <= 0.5);
            }
        }
    }

    #[test]
    fn scale_roi_cases() {
        let roi = Roi::new(50.0, 50.0, 20.0, 40.0, 0).unwrap();
        assert_eq!(scale_roi(&roi, 1.0, (200.0, 200.0)).unwrap(), roi);
        let s = scale_roi(&roi, 1.5, (200.0, 200.0)).unwrap().to_bbox();
        assert_eq!((s.x_min, s.y_min, s.x_max(), s.y_max()), (35.0, 20.0, 65.0, 80.0));
        let c = scale_roi(&roi, 3.0, (100.0, 100.0)).unwrap().to_bbox();
        assert_eq!((c.y_min, c.y_max()), (0.0, 100.0));
        assert!(scale_roi(&roi, 0.0, (100.0, 100.0)).is_err());
    }
}
