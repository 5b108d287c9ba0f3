//! The staged training procedure.
//!
//! * Stage 1 trains the trunk, proposal network, original and context
//!   branches jointly.
//! * Stage 2 fixes all of that and pre-trains the part heads on per-cell
//!   labels derived from the part-visibility masks.
//! * Stage 3 keeps stage-1 parameters fixed and trains the grid LSTM while
//!   fine-tuning the part heads, with every refined cell supervised by the
//!   instance label.
//!
//! A context refit trains only a freshly initialised context branch on the
//! frozen stage-1 trunk; the ablation uses it to compare context scales.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::losses::{regression_loss, weighted_loss};
use super::sampling::{sample_anchors, sample_rois, RoiSample};
use super::sgd::{sgd_step, SgdSettings, Velocity};
use crate::annotation::Annotation;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::Pcn;
use crate::params::{read_checkpoint, write_checkpoint, Binder, GroupSet, ParamGroup, Params};
use crate::tensor::{Real, Tensor};

/// One training image.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// `[1×H×W]` in `[0, 1]`.
    pub image: Tensor,
    pub gts: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StageKind {
    Joint,
    PartPretrain,
    PartLstm,
    ContextRefit { scales: Vec<Real> },
}

impl StageKind {
    pub fn for_stage(stage: u8) -> Result<Self> {
        match stage {
            1 => Ok(StageKind::Joint),
            2 => Ok(StageKind::PartPretrain),
            3 => Ok(StageKind::PartLstm),
            s => Err(Error::Config(format!("stage {s} must be 1, 2 or 3"))),
        }
    }

    pub fn trainable(&self) -> GroupSet {
        use ParamGroup::*;
        match self {
            StageKind::Joint => GroupSet::of(&[Trunk, Rpn, Original, Context]),
            StageKind::PartPretrain => GroupSet::of(&[PartHead]),
            StageKind::PartLstm => GroupSet::of(&[PartHead, Lstm]),
            StageKind::ContextRefit { .. } => GroupSet::of(&[Context]),
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageKind::Joint => write!(f, "1"),
            StageKind::PartPretrain => write!(f, "2"),
            StageKind::PartLstm => write!(f, "3"),
            StageKind::ContextRefit { .. } => write!(f, "context"),
        }
    }
}

/// Loss values of one batch. `total` is the weighted branch sum; `rpn` is
/// the proposal network's auxiliary loss, optimised alongside it in stage 1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub total: Real,
    pub original: Real,
    pub context: Real,
    pub part: Real,
    pub rpn: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: String,
    pub lr: Real,
    pub losses: BatchLosses,
}

pub fn format_loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("iteration,stage,lr,total_loss,original,context,part,rpn\n");
    for r in records {
        let l = &r.losses;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration, r.stage, r.lr, l.total, l.original, l.context, l.part, l.rpn
        );
    }
    out
}

/// Parameters together with the last stage they completed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: Params,
    pub stage: u8,
}

impl TrainedModel {
    pub fn save(&self, net: &Pcn, path: &Path) -> Result<()> {
        let mut records = self.params.to_records();
        records.push(("meta.stage".into(), Tensor::scalar(self.stage as Real)));
        records.push(("meta.part_grid".into(), Tensor::scalar(net.cfg.part_grid as Real)));
        write_checkpoint(path, &records)
    }

    /// Loads a checkpoint into `net`'s parameter layout, checking that it
    /// was trained with the same part grid.
    pub fn load(net: &Pcn, template: &Params, path: &Path) -> Result<Self> {
        let records = read_checkpoint(path)?;
        let meta = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.item())
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{name}`", path.display())))
        };
        let k = meta("meta.part_grid")? as usize;
        if k != net.cfg.part_grid {
            return Err(Error::Checkpoint(format!(
                "{} was trained with K={k} but the model uses K={}",
                path.display(),
                net.cfg.part_grid
            )));
        }
        let stage = meta("meta.stage")? as u8;
        let mut params = template.clone();
        params.load_records(&records)?;
        Ok(TrainedModel { params, stage })
    }
}

fn pick_rows(g: &mut Graph, probs: Var, rows: &[usize]) -> Result<Var> {
    let c = g.shape(probs)[1];
    let idx: Vec<usize> = rows.iter().flat_map(|&r| (0..c).map(move |j| r * c + j)).collect();
    let flat = g.gather(probs, &idx)?;
    g.reshape(flat, &[rows.len(), c])
}

fn head_loss(g: &mut Graph, probs: Var, deltas: Var, s: &RoiSample) -> Result<Var> {
    let ce = g.cross_entropy(probs, &s.labels)?;
    let pos: Vec<usize> = (0..s.positives()).collect();
    let reg = regression_loss(g, deltas, &pos, &s.targets, s.rois.len())?;
    g.add(ce, reg)
}

/// Per-cell labels `[T×R×K×K]` for the part maps of a RoI sample.
fn cell_labels(s: &RoiSample, gts: &[Annotation], taps: usize, k: usize, use_visibility: bool) -> Vec<usize> {
    let mut per_roi = Vec::with_capacity(s.rois.len() * k * k);
    for (r, &label) in s.labels.iter().enumerate() {
        for c in 0..k * k {
            let y = if label == 0 {
                0
            } else if use_visibility {
                let vis = &gts[s.matched[r]].visibility;
                if vis.k() == k {
                    vis.cells()[c] as usize
                } else {
                    1
                }
            } else {
                1
            };
            per_roi.push(y);
        }
    }
    per_roi.repeat(taps)
}

/// Builds the graph of one training batch and returns the objective to
/// differentiate along with the loss values.
pub fn batch_objective(
    g: &mut Graph,
    bind: &mut Binder,
    net: &Pcn,
    sample: &TrainSample,
    kind: &StageKind,
    alphas: &[Real],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<Var>, BatchLosses)> {
    let [_, ih, iw] = *sample.image.shape() else {
        return Err(Error::InvalidShape {
            shape: sample.image.shape().to_vec(),
            reason: "image must be [1,H,W]".into(),
        });
    };
    let extent = (iw as Real, ih as Real);
    let image = g.input(sample.image.clone());
    let trunk = net.trunk_forward(g, bind, image)?;
    let (probs, deltas) = net.rpn_forward(g, bind, trunk.top())?;
    let anchors = net.anchors(ih, iw);
    let settings = net.proposal_settings(extent.0, extent.1, net.cfg.proposals_train);
    let proposals: Vec<BBox> = net
        .decode_proposals(g.value(probs), g.value(deltas), &anchors, &settings)?
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    let rois = sample_rois(&proposals, &sample.gts, &cfg.sampling, rng);
    let mut losses = BatchLosses::default();
    let mut terms: Vec<Var> = Vec::new();

    let rpn = if *kind == StageKind::Joint {
        let gts: Vec<BBox> = sample.gts.iter().map(|a| a.bbox).collect();
        let a = sample_anchors(&anchors, &gts, extent, &cfg.sampling, rng);
        if a.indices.is_empty() {
            None
        } else {
            let picked = pick_rows(g, probs, &a.indices)?;
            let ce = g.cross_entropy(picked, &a.labels)?;
            let reg = regression_loss(g, deltas, &a.positives, &a.targets, a.indices.len())?;
            Some(g.add(ce, reg)?)
        }
    } else {
        None
    };

    if rois.rois.is_empty() {
        let objective = rpn;
        if let Some(r) = rpn {
            losses.rpn = g.value(r).item();
        }
        return Ok((objective, losses));
    }

    let eq1 = match kind {
        StageKind::Joint => {
            let (p, d) = net.original_forward(g, bind, trunk.top(), &rois.rois)?;
            let lo = head_loss(g, p, d, &rois)?;
            let (p, d) = net.context_forward(g, bind, trunk.top(), &rois.rois, &net.cfg.context_scales, extent)?;
            let lc = head_loss(g, p, d, &rois)?;
            losses.original = g.value(lo).item();
            losses.context = g.value(lc).item();
            terms.extend([lo, lc]);
            weighted_loss(g, &terms, alphas)?
        }
        StageKind::ContextRefit { scales } => {
            let (p, d) = net.context_forward(g, bind, trunk.top(), &rois.rois, scales, extent)?;
            let lc = head_loss(g, p, d, &rois)?;
            losses.context = g.value(lc).item();
            let a = alphas.last().copied().unwrap_or(1.0);
            g.scale(lc, a)
        }
        StageKind::PartPretrain | StageKind::PartLstm => {
            let lstm = *kind == StageKind::PartLstm;
            let maps = net.part_forward(g, bind, trunk.taps, &rois.rois, lstm)?;
            let s = g.shape(maps).to_vec();
            let flat = g.reshape(maps, &[s[..4].iter().product(), s[4]])?;
            let labels = cell_labels(&rois, &sample.gts, s[0], net.cfg.part_grid, !lstm);
            let lp = g.cross_entropy(flat, &labels)?;
            losses.part = g.value(lp).item();
            weighted_loss(g, &[lp], alphas)?
        }
    };
    losses.total = g.value(eq1).item();
    let objective = match rpn {
        Some(r) => {
            losses.rpn = g.value(r).item();
            g.add(eq1, r)?
        }
        None => eq1,
    };
    Ok((Some(objective), losses))
}

/// Loss values of one batch under `alphas`, with sampling drawn from `seed`.
pub fn batch_losses(net: &Pcn, params: &Params, sample: &TrainSample, kind: &StageKind, alphas: &[Real], cfg: &TrainConfig, seed: u64) -> Result<BatchLosses> {
    let mut g = Graph::new();
    let mut bind = Binder::new(params, GroupSet::empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(batch_objective(&mut g, &mut bind, net, sample, kind, alphas, cfg, &mut rng)?.1)
}

/// Runs `cfg.iterations` SGD steps of `kind`, one image per step, visiting
/// the data in a fresh seeded order every epoch.
pub fn train_loop(net: &Pcn, params: &mut Params, kind: &StageKind, cfg: &TrainConfig, data: &[TrainSample]) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training images".into()));
    }
    let trainable = kind.trainable();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Velocity::new(params);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it % data.len() == 0 {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let sample = &data[order[it % data.len()]];
        let lr = cfg.lr_at(it);
        let mut g = Graph::new();
        let (grads, losses) = {
            let mut bind = Binder::new(params, trainable);
            let (objective, losses) = batch_objective(&mut g, &mut bind, net, sample, kind, &cfg.loss_weights, cfg, &mut rng)?;
            let grads = match objective {
                Some(o) if g.requires_grad(o) => {
                    if !g.value(o).all_finite() {
                        return Err(Error::Invalid(format!("non-finite loss at iteration {it} of stage {kind}")));
                    }
                    g.backward(o)?;
                    bind.grads(&g)
                }
                _ => Vec::new(),
            };
            (grads, losses)
        };
        let s = SgdSettings {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        sgd_step(params, &mut velocity, &grads, s, trainable)?;
        records.push(LossRecord {
            iteration: it,
            stage: kind.to_string(),
            lr,
            losses,
        });
    }
    Ok(records)
}

/// Trains stage `stage` on top of `model`, which must have completed the
/// previous stage.
pub fn run_stage(stage: u8, cfg: &TrainConfig, net: &Pcn, model: &mut TrainedModel, data: &[TrainSample]) -> Result<Vec<LossRecord>> {
    if cfg.stage != stage {
        return Err(Error::Config(format!("config is for stage {} but stage {stage} was requested", cfg.stage)));
    }
    let kind = StageKind::for_stage(stage)?;
    if stage > 1 && model.stage < stage - 1 {
        return Err(Error::MissingStage {
            needed: stage - 1,
            requested: stage,
        });
    }
    let records = train_loop(net, &mut model.params, &kind, cfg, data)?;
    model.stage = stage;
    Ok(records)
}

/// Re-initialises the context branch and trains it alone with `scales`
/// on the frozen stage-1 trunk.
pub fn run_context_refit(cfg: &TrainConfig, net: &Pcn, model: &TrainedModel, data: &[TrainSample], scales: &[Real]) -> Result<(Params, Vec<LossRecord>)> {
    if model.stage < 1 {
        return Err(Error::MissingStage { needed: 1, requested: 1 });
    }
    let mut params = model.params.clone();
    net.reinit_context(&mut params, cfg.seed)?;
    let kind = StageKind::ContextRefit { scales: scales.to_vec() };
    let records = train_loop(net, &mut params, &kind, cfg, data)?;
    Ok((params, records))
}
