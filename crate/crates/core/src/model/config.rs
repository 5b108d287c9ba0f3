use std::fmt::Write as _;

use crate::config::{join, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Architecture and inference settings of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Side K of the part grid.
    pub part_grid: usize,
    pub context_scales: Vec<Real>,
    /// Fusion weights of the original, part and context branches.
    pub branch_weights: [Real; 3],
    pub anchor_base_height: Real,
    pub anchor_scale_stride: Real,
    pub anchor_count: usize,
    /// Anchor width over height.
    pub anchor_aspect_ratio: Real,
    pub proposals_train: usize,
    pub proposals_test: usize,
    /// Proposals kept by objectness before NMS.
    pub pre_nms_top: usize,
    pub nms_iou: Real,
    /// Proposals smaller than this (pixels, either side) are dropped.
    pub min_proposal_size: Real,
    pub trunk_channels: Vec<usize>,
    /// Per trunk block: dilation of its 3×3 conv.
    pub trunk_dilation: Vec<usize>,
    /// Per trunk block: whether a 2×2 max pool follows it.
    pub trunk_pool: Vec<bool>,
    pub rpn_channels: usize,
    pub roi_pool_size: usize,
    pub fc_hidden: usize,
    pub context_channels: usize,
    pub part_hidden: usize,
    pub lstm_hidden: usize,
    /// Refine part maps with the grid LSTM; off averages raw part scores.
    pub use_lstm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            part_grid: 3,
            context_scales: vec![1.5, 1.8, 2.1],
            branch_weights: [1.0 / 3.0; 3],
            anchor_base_height: 40.0,
            anchor_scale_stride: 1.4,
            anchor_count: 9,
            anchor_aspect_ratio: 0.41,
            proposals_train: 1000,
            proposals_test: 50,
            pre_nms_top: 600,
            nms_iou: 0.5,
            min_proposal_size: 4.0,
            trunk_channels: vec![8, 12, 16, 16],
            trunk_dilation: vec![1, 1, 1, 2],
            trunk_pool: vec![true, true, false, false],
            rpn_channels: 16,
            roi_pool_size: 4,
            fc_hidden: 48,
            context_channels: 16,
            part_hidden: 12,
            lstm_hidden: 32,
            use_lstm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.part_grid == 0 {
            return bad("part_grid must be at least 1".into());
        }
        if self.context_scales.is_empty() || self.context_scales.iter().any(|&s| !(s > 1.0)) {
            return bad(format!("context_scales {:?} must be non-empty and all > 1", self.context_scales));
        }
        let wsum: Real = self.branch_weights.iter().sum();
        if self.branch_weights.iter().any(|&w| !(w >= 0.0)) || (wsum - 1.0).abs() > 1e-9 {
            return bad(format!("branch_weights {:?} must be non-negative and sum to 1", self.branch_weights));
        }
        if self.anchor_count == 0 || !(self.anchor_base_height > 0.0) || !(self.anchor_scale_stride > 0.0) || !(self.anchor_aspect_ratio > 0.0) {
            return bad("anchors need a positive count, base height, stride and aspect ratio".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad(format!("nms_iou {} must lie in (0, 1)", self.nms_iou));
        }
        let n = self.trunk_channels.len();
        if n < 2 || self.trunk_dilation.len() != n || self.trunk_pool.len() != n {
            return bad("trunk_channels, trunk_dilation and trunk_pool need one entry per block (at least 2)".into());
        }
        if self.trunk_channels.iter().chain(&self.trunk_dilation).any(|&v| v == 0) {
            return bad("trunk channels and dilations must be positive".into());
        }
        if self.trunk_pool[n - 2] || self.trunk_pool[n - 1] {
            return bad("the two deepest trunk blocks are the part taps and must not be pooled".into());
        }
        if [self.rpn_channels, self.roi_pool_size, self.fc_hidden, self.context_channels, self.part_hidden, self.lstm_hidden]
            .contains(&0)
            || self.proposals_train == 0
            || self.proposals_test == 0
            || self.pre_nms_top == 0
        {
            return bad("layer sizes and proposal counts must be positive".into());
        }
        Ok(())
    }

    /// Pixels per feature cell at the trunk output.
    pub fn feature_stride(&self) -> usize {
        1 << self.trunk_pool.iter().filter(|&&p| p).count()
    }

    /// Anchor heights `base·stride^k` for `k = 0..anchor_count`.
    pub fn anchor_heights(&self) -> Vec<Real> {
        (0..self.anchor_count)
            .map(|k| self.anchor_base_height * self.anchor_scale_stride.powi(k as i32))
            .collect()
    }

    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.set("part_grid", &mut self.part_grid)?;
        kv.set_list("context_scales", &mut self.context_scales)?;
        kv.set_array("branch_weights", &mut self.branch_weights)?;
        kv.set("anchor_base_height", &mut self.anchor_base_height)?;
        kv.set("anchor_scale_stride", &mut self.anchor_scale_stride)?;
        kv.set("anchor_count", &mut self.anchor_count)?;
        kv.set("anchor_aspect_ratio", &mut self.anchor_aspect_ratio)?;
        kv.set("proposals_train", &mut self.proposals_train)?;
        kv.set("proposals_test", &mut self.proposals_test)?;
        kv.set("pre_nms_top", &mut self.pre_nms_top)?;
        kv.set("nms_iou", &mut self.nms_iou)?;
        kv.set("min_proposal_size", &mut self.min_proposal_size)?;
        kv.set_list("trunk_channels", &mut self.trunk_channels)?;
        kv.set_list("trunk_dilation", &mut self.trunk_dilation)?;
        kv.set_list("trunk_pool", &mut self.trunk_pool)?;
        kv.set("rpn_channels", &mut self.rpn_channels)?;
        kv.set("roi_pool_size", &mut self.roi_pool_size)?;
        kv.set("fc_hidden", &mut self.fc_hidden)?;
        kv.set("context_channels", &mut self.context_channels)?;
        kv.set("part_hidden", &mut self.part_hidden)?;
        kv.set("lstm_hidden", &mut self.lstm_hidden)?;
        kv.set("use_lstm", &mut self.use_lstm)?;
        Ok(())
    }

    pub fn write_kv(&self, out: &mut String) {
        let _ = writeln!(out, "part_grid={}", self.part_grid);
        let _ = writeln!(out, "context_scales={}", join(&self.context_scales));
        let _ = writeln!(out, "branch_weights={}", join(&self.branch_weights));
        let _ = writeln!(out, "anchor_base_height={}", self.anchor_base_height);
        let _ = writeln!(out, "anchor_scale_stride={}", self.anchor_scale_stride);
        let _ = writeln!(out, "anchor_count={}", self.anchor_count);
        let _ = writeln!(out, "anchor_aspect_ratio={}", self.anchor_aspect_ratio);
        let _ = writeln!(out, "proposals_train={}", self.proposals_train);
        let _ = writeln!(out, "proposals_test={}", self.proposals_test);
        let _ = writeln!(out, "pre_nms_top={}", self.pre_nms_top);
        let _ = writeln!(out, "nms_iou={}", self.nms_iou);
        let _ = writeln!(out, "min_proposal_size={}", self.min_proposal_size);
        let _ = writeln!(out, "trunk_channels={}", join(&self.trunk_channels));
        let _ = writeln!(out, "trunk_dilation={}", join(&self.trunk_dilation));
        let _ = writeln!(out, "trunk_pool={}", join(&self.trunk_pool));
        let _ = writeln!(out, "rpn_channels={}", self.rpn_channels);
        let _ = writeln!(out, "roi_pool_size={}", self.roi_pool_size);
        let _ = writeln!(out, "fc_hidden={}", self.fc_hidden);
        let _ = writeln!(out, "context_channels={}", self.context_channels);
        let _ = writeln!(out, "part_hidden={}", self.part_hidden);
        let _ = writeln!(out, "lstm_hidden={}", self.lstm_hidden);
        let _ = writeln!(out, "use_lstm={}", self.use_lstm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.feature_stride(), 4);
        let h = c.anchor_heights();
        assert_eq!(h.len(), 9);
        assert_eq!(h[0], 40.0);
        assert!((h[1] - 56.0).abs() < 1e-12 && (h[2] - 78.4).abs() < 1e-12);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::default();
        c.context_scales = vec![1.8];
        c.use_lstm = false;
        c.branch_weights = [0.5, 0.5, 0.0];
        let mut text = String::new();
        c.write_kv(&mut text);
        let mut back = ModelConfig::default();
        let mut kv = KeyValues::parse(&text, "t").unwrap();
        back.apply(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ModelConfig { context_scales: vec![1.0], ..Default::default() },
            ModelConfig { branch_weights: [0.5, 0.5, 0.5], ..Default::default() },
            ModelConfig { anchor_count: 0, ..Default::default() },
            ModelConfig { trunk_pool: vec![true, true, true, false], ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
