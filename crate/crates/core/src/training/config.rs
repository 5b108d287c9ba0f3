use std::fmt::Write as _;

use crate::config::{join, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Settings of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: usize,
    pub base_lr: Real,
    /// Iteration from which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: usize,
    pub lr_decay_factor: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    /// α_m of the branches the stage trains: (original, context) in stage
    /// 1, (part) in stages 2 and 3.
    pub loss_weights: Vec<Real>,
    pub sampling: Sampling,
    pub seed: u64,
}

/// Anchor and RoI sampling rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    pub rpn_batch: usize,
    pub rpn_fg_iou: Real,
    pub rpn_bg_iou: Real,
    pub roi_batch: usize,
    /// Largest share of positives in a RoI batch.
    pub fg_fraction: Real,
    pub fg_iou: Real,
    pub bg_iou: Real,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            rpn_batch: 64,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            roi_batch: 32,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.stage) {
            return bad(format!("stage {} must be 1, 2 or 3", self.stage));
        }
        if self.iterations == 0 || self.lr_decay_at == 0 || self.lr_decay_at >= self.iterations {
            return bad(format!("need 0 < lr_decay_at ({}) < iterations ({})", self.lr_decay_at, self.iterations));
        }
        let m = if self.stage == 1 { 2 } else { 1 };
        if self.loss_weights.len() != m || self.loss_weights.iter().any(|&a| !(a >= 0.0)) {
            return bad(format!("stage {} needs {m} non-negative loss weights, got {:?}", self.stage, self.loss_weights));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("need base_lr > 0, momentum in [0, 1) and weight_decay ≥ 0".into());
        }
        let s = &self.sampling;
        if s.rpn_batch == 0 || s.roi_batch == 0 || !(s.fg_fraction > 0.0 && s.fg_fraction <= 1.0) || s.bg_iou > s.fg_iou || s.rpn_bg_iou > s.rpn_fg_iou {
            return bad("invalid sampling settings".into());
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> Real {
        if iteration < self.lr_decay_at {
            self.base_lr
        } else {
            self.base_lr * self.lr_decay_factor
        }
    }
}

/// Everything needed to train all stages, as written in config files.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPlan {
    pub stage_iterations: [usize; 3],
    /// Iterations of each context-only refit in the ablation.
    pub context_refit_iterations: usize,
    pub base_lr: Real,
    /// Decay point as a fraction of a stage's iterations.
    pub lr_decay_fraction: Real,
    pub lr_decay_factor: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    /// α of the original, part and context branch losses.
    pub loss_weights: [Real; 3],
    pub sampling: Sampling,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        TrainingPlan {
            stage_iterations: [4000, 1500, 1500],
            context_refit_iterations: 1500,
            base_lr: 0.01,
            lr_decay_fraction: 0.8,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            loss_weights: [1.0, 1.0, 1.0],
            sampling: Sampling::default(),
        }
    }
}

impl TrainingPlan {
    fn config(&self, stage: u8, iterations: usize, seed: u64) -> TrainConfig {
        let [a_orig, a_part, a_ctx] = self.loss_weights;
        TrainConfig {
            stage,
            iterations,
            base_lr: self.base_lr,
            lr_decay_at: ((iterations as Real * self.lr_decay_fraction).round() as usize).clamp(1, iterations.saturating_sub(1).max(1)),
            lr_decay_factor: self.lr_decay_factor,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            loss_weights: if stage == 1 { vec![a_orig, a_ctx] } else { vec![a_part] },
            sampling: self.sampling,
            seed: seed.wrapping_mul(31).wrapping_add(stage as u64),
        }
    }

    pub fn stage_config(&self, stage: u8, seed: u64) -> Result<TrainConfig> {
        if !(1..=3).contains(&stage) {
            return Err(Error::Config(format!("stage {stage} must be 1, 2 or 3")));
        }
        let cfg = self.config(stage, self.stage_iterations[stage as usize - 1], seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// A context-only refit is trained like stage 1 with only the context
    /// loss active.
    pub fn refit_config(&self, seed: u64, variant: u64) -> Result<TrainConfig> {
        let mut cfg = self.config(1, self.context_refit_iterations, seed);
        cfg.loss_weights = vec![0.0, self.loss_weights[2]];
        cfg.seed = cfg.seed.wrapping_add(1000 + variant);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.set("stage1_iterations", &mut self.stage_iterations[0])?;
        kv.set("stage2_iterations", &mut self.stage_iterations[1])?;
        kv.set("stage3_iterations", &mut self.stage_iterations[2])?;
        kv.set("context_refit_iterations", &mut self.context_refit_iterations)?;
        kv.set("base_lr", &mut self.base_lr)?;
        kv.set("lr_decay_fraction", &mut self.lr_decay_fraction)?;
        kv.set("lr_decay_factor", &mut self.lr_decay_factor)?;
        kv.set("momentum", &mut self.momentum)?;
        kv.set("weight_decay", &mut self.weight_decay)?;
        kv.set_array("loss_weights", &mut self.loss_weights)?;
        let s = &mut self.sampling;
        kv.set("rpn_batch", &mut s.rpn_batch)?;
        kv.set("rpn_fg_iou", &mut s.rpn_fg_iou)?;
        kv.set("rpn_bg_iou", &mut s.rpn_bg_iou)?;
        kv.set("roi_batch", &mut s.roi_batch)?;
        kv.set("fg_fraction", &mut s.fg_fraction)?;
        kv.set("fg_iou", &mut s.fg_iou)?;
        kv.set("bg_iou", &mut s.bg_iou)?;
        Ok(())
    }

    pub fn write_kv(&self, out: &mut String) {
        let _ = writeln!(out, "stage1_iterations={}", self.stage_iterations[0]);
        let _ = writeln!(out, "stage2_iterations={}", self.stage_iterations[1]);
        let _ = writeln!(out, "stage3_iterations={}", self.stage_iterations[2]);
        let _ = writeln!(out, "context_refit_iterations={}", self.context_refit_iterations);
        let _ = writeln!(out, "base_lr={}", self.base_lr);
        let _ = writeln!(out, "lr_decay_fraction={}", self.lr_decay_fraction);
        let _ = writeln!(out, "lr_decay_factor={}", self.lr_decay_factor);
        let _ = writeln!(out, "momentum={}", self.momentum);
        let _ = writeln!(out, "weight_decay={}", self.weight_decay);
        let _ = writeln!(out, "loss_weights={}", join(&self.loss_weights));
        let s = &self.sampling;
        let _ = writeln!(out, "rpn_batch={}", s.rpn_batch);
        let _ = writeln!(out, "rpn_fg_iou={}", s.rpn_fg_iou);
        let _ = writeln!(out, "rpn_bg_iou={}", s.rpn_bg_iou);
        let _ = writeln!(out, "roi_batch={}", s.roi_batch);
        let _ = writeln!(out, "fg_fraction={}", s.fg_fraction);
        let _ = writeln!(out, "fg_iou={}", s.fg_iou);
        let _ = writeln!(out, "bg_iou={}", s.bg_iou);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_keeps_the_decay_ratio() {
        let plan = TrainingPlan {
            stage_iterations: [50, 10, 10],
            base_lr: 0.001,
            ..Default::default()
        };
        let c = plan.stage_config(1, 0).unwrap();
        assert_eq!(c.lr_decay_at, 40);
        assert_eq!(c.lr_at(0), 0.001);
        assert_eq!(c.lr_at(39), 0.001);
        assert!((c.lr_at(40) - 0.0001).abs() < 1e-18);
        assert_eq!(plan.stage_config(2, 0).unwrap().loss_weights.len(), 1);
        assert!(plan.stage_config(4, 0).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut p = TrainingPlan::default();
        p.stage_iterations = [7, 8, 9];
        p.loss_weights = [0.5, 1.0, 2.0];
        let mut text = String::new();
        p.write_kv(&mut text);
        let mut back = TrainingPlan::default();
        let mut kv = KeyValues::parse(&text, "t").unwrap();
        back.apply(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn invalid_decay_point() {
        let mut c = TrainingPlan::default().stage_config(1, 0).unwrap();
        c.lr_decay_at = c.iterations;
        assert!(c.validate().is_err());
    }
}
