//! The detector: trunk, proposal network and the original, part and
//! context branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::anchors::{generate_anchors, propose_scored, scale_roi, ProposalSettings};
use super::config::ModelConfig;
use super::detection::{assemble, Detection};
use crate::autodiff::{ConvParams, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};
use crate::nn::{aggregate_scores, Conv2dLayer, GridLstm, Linear, PartHead, Roi};
use crate::params::{Binder, GroupSet, Params};
use crate::tensor::{Real, Tensor};

/// Regression targets are divided by these before the loss, and
/// predictions multiplied by them before decoding.
pub const BBOX_STD: [Real; 4] = [0.1, 0.1, 0.2, 0.2];

/// Foreground classes; part maps carry `CLASSES + 1` entries per cell.
pub const CLASSES: usize = 1;

/// Mean subtracted from `[0, 1]` pixel values.
pub const PIXEL_MEAN: Real = 0.5;

#[derive(Clone, Debug)]
pub struct TrunkBlock {
    pub conv: Conv2dLayer,
    pub pool: bool,
}

/// Classification and regression on pooled RoI features.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub fc: Linear,
    pub cls: Linear,
    pub bbox: Linear,
}

impl BoxHead {
    fn new(params: &mut Params, name: &str, inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        BoxHead {
            fc: Linear::new(params, &format!("{name}.fc"), inputs, hidden, None, rng),
            cls: Linear::new(params, &format!("{name}.cls"), hidden, 2, Some(0.01), rng),
            bbox: Linear::new(params, &format!("{name}.bbox"), hidden, 4, Some(0.001), rng),
        }
    }

    /// `pooled[R×C×m×m]` to class probabilities `[R×2]` and deltas `[R×4]`.
    pub fn forward(&self, g: &mut Graph, bind: &mut Binder, pooled: Var) -> Result<(Var, Var)> {
        let s = g.shape(pooled).to_vec();
        let flat = g.reshape(pooled, &[s[0], s[1..].iter().product()])?;
        let h = self.fc.forward(g, bind, flat)?;
        let h = g.relu(h)?;
        let logits = self.cls.forward(g, bind, h)?;
        let deltas = self.bbox.forward(g, bind, h)?;
        Ok((g.softmax(logits), deltas))
    }
}

#[derive(Clone, Debug)]
pub struct ContextHead {
    pub reduce: Conv2dLayer,
    pub head: BoxHead,
}

/// Values the proposal stage hands to the branches: the trunk tap
/// features and the proposals of one image.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub taps: Vec<Tensor>,
    pub proposals: Vec<ScoredBox>,
    pub image_width: Real,
    pub image_height: Real,
}

impl Backbone {
    pub fn rois(&self) -> Vec<Roi> {
        self.proposals.iter().map(|p| Roi::from_bbox(&p.bbox, 0)).collect()
    }
}

/// Per-proposal outputs of the original branch.
#[derive(Clone, Debug, PartialEq)]
pub struct OriginalOutput {
    pub scores: Vec<Real>,
    pub deltas: Vec<[Real; 4]>,
}

/// Trunk outputs in graph form.
pub struct TrunkOutput {
    /// Feature maps of the two deepest blocks, shallower first.
    pub taps: [Var; 2],
}

impl TrunkOutput {
    pub fn top(&self) -> Var {
        self.taps[1]
    }
}

#[derive(Clone, Debug)]
pub struct Pcn {
    pub cfg: ModelConfig,
    pub trunk: Vec<TrunkBlock>,
    pub rpn_conv: Conv2dLayer,
    pub rpn_cls: Conv2dLayer,
    pub rpn_bbox: Conv2dLayer,
    pub original: BoxHead,
    pub context: ContextHead,
    pub part: PartHead,
    pub lstm: GridLstm,
}

impl Pcn {
    /// Builds the network and its parameters, initialised from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Pcn, Params)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut trunk = Vec::new();
        let mut in_ch = 1;
        for (i, ((&c, &d), &pool)) in cfg.trunk_channels.iter().zip(&cfg.trunk_dilation).zip(&cfg.trunk_pool).enumerate() {
            let conv = ConvParams { stride: 1, pad: d, dilation: d };
            trunk.push(TrunkBlock {
                conv: Conv2dLayer::new(&mut params, &format!("trunk.conv{}", i + 1), in_ch, c, 3, conv, &mut rng),
                pool,
            });
            in_ch = c;
        }
        let n = cfg.trunk_channels.len();
        let top_ch = cfg.trunk_channels[n - 1];
        let a = cfg.anchor_count;
        let one = ConvParams::default();
        let rpn_conv = Conv2dLayer::new(&mut params, "rpn.conv", top_ch, cfg.rpn_channels, 3, ConvParams { stride: 1, pad: 1, dilation: 1 }, &mut rng);
        let rpn_cls = Conv2dLayer::new(&mut params, "rpn.cls", cfg.rpn_channels, 2 * a, 1, one, &mut rng);
        let rpn_bbox = Conv2dLayer::new(&mut params, "rpn.bbox", cfg.rpn_channels, 4 * a, 1, one, &mut rng);
        // small output layers start near uniform scores and zero deltas
        for id in [rpn_cls.weight, rpn_bbox.weight] {
            let t = params.get_mut(id);
            *t = t.map(|v| v * 0.01);
        }
        let m2 = cfg.roi_pool_size * cfg.roi_pool_size;
        let original = BoxHead::new(&mut params, "original", top_ch * m2, cfg.fc_hidden, &mut rng);
        let context = ContextHead {
            reduce: Conv2dLayer::new(&mut params, "context.reduce", top_ch, cfg.context_channels, 1, one, &mut rng),
            head: BoxHead::new(&mut params, "context", cfg.context_channels * m2, cfg.fc_hidden, &mut rng),
        };
        let taps = [cfg.trunk_channels[n - 2], top_ch];
        let part = PartHead::new(&mut params, &taps, cfg.part_hidden, cfg.part_grid, CLASSES + 1, &mut rng);
        let lstm = GridLstm::new(&mut params, CLASSES + 1, cfg.lstm_hidden, &mut rng);
        let net = Pcn {
            cfg: cfg.clone(),
            trunk,
            rpn_conv,
            rpn_cls,
            rpn_bbox,
            original,
            context,
            part,
            lstm,
        };
        Ok((net, params))
    }

    /// Reinitialises the context branch from `seed`, leaving every other
    /// parameter untouched.
    pub fn reinit_context(&self, params: &mut Params, seed: u64) -> Result<()> {
        let (_, fresh) = Pcn::new(&self.cfg, seed)?;
        for id in params.ids().collect::<Vec<_>>() {
            if params.entry(id).group == crate::params::ParamGroup::Context {
                let name = params.entry(id).name.clone();
                let src = fresh.id(&name).expect("same architecture");
                *params.get_mut(id) = fresh.get(src).clone();
            }
        }
        Ok(())
    }

    pub fn feature_stride(&self) -> usize {
        self.cfg.feature_stride()
    }

    pub fn feature_size(&self, image_height: usize, image_width: usize) -> (usize, usize) {
        let mut h = image_height;
        let mut w = image_width;
        for b in &self.trunk {
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }

    pub fn anchors(&self, image_height: usize, image_width: usize) -> Vec<BBox> {
        generate_anchors(&self.cfg, self.feature_stride(), self.feature_size(image_height, image_width))
    }

    /// `image[1×H×W]` in `[0, 1]` through the conv blocks.
    pub fn trunk_forward(&self, g: &mut Graph, bind: &mut Binder, image: Var) -> Result<TrunkOutput> {
        let mut x = g.add_scalar(image, -PIXEL_MEAN)?;
        let n = self.trunk.len();
        let mut taps = Vec::with_capacity(2);
        for (i, b) in self.trunk.iter().enumerate() {
            x = b.conv.forward(g, bind, x)?;
            x = g.relu(x)?;
            if i + 2 >= n {
                taps.push(x);
            }
            if b.pool {
                x = g.max_pool2d(x, 2, 2)?;
            }
        }
        Ok(TrunkOutput {
            taps: [taps[0], taps[1]],
        })
    }

    /// Objectness distributions `[N×2]` and deltas `[N×4]` for every anchor.
    pub fn rpn_forward(&self, g: &mut Graph, bind: &mut Binder, top: Var) -> Result<(Var, Var)> {
        let h = self.rpn_conv.forward(g, bind, top)?;
        let h = g.relu(h)?;
        let cls = self.rpn_cls.forward(g, bind, h)?;
        let bbox = self.rpn_bbox.forward(g, bind, h)?;
        let [_, fh, fw] = *g.shape(cls) else { unreachable!("conv output is rank 3") };
        let n = fh * fw * self.cfg.anchor_count;
        let cls = g.permute(cls, &[1, 2, 0])?;
        let cls = g.reshape(cls, &[n, 2])?;
        let bbox = g.permute(bbox, &[1, 2, 0])?;
        let bbox = g.reshape(bbox, &[n, 4])?;
        Ok((g.softmax(cls), bbox))
    }

    pub fn proposal_settings(&self, image_width: Real, image_height: Real, top_n: usize) -> ProposalSettings {
        ProposalSettings {
            image_width,
            image_height,
            pre_nms_top: self.cfg.pre_nms_top,
            top_n,
            nms_iou: self.cfg.nms_iou,
            min_size: self.cfg.min_proposal_size,
        }
    }

    /// Proposals from objectness and (normalised) deltas.
    pub fn decode_proposals(&self, probs: &Tensor, deltas: &Tensor, anchors: &[BBox], settings: &ProposalSettings) -> Result<Vec<ScoredBox>> {
        let scaled = Tensor::new(
            deltas.shape().to_vec(),
            deltas.data().iter().enumerate().map(|(i, &d)| d * BBOX_STD[i % 4]).collect(),
        )?;
        propose_scored(probs, &scaled, anchors, settings)
    }

    /// Runs the trunk and proposal network without gradients.
    pub fn backbone(&self, params: &Params, image: &Tensor, top_n: usize) -> Result<Backbone> {
        let [_, ih, iw] = *image.shape() else {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: "image must be [1,H,W]".into(),
            });
        };
        if !image.all_finite() {
            return Err(Error::Invalid("image contains non-finite values".into()));
        }
        let mut g = Graph::new();
        let mut bind = Binder::new(params, GroupSet::empty());
        let x = g.input(image.clone());
        let t = self.trunk_forward(&mut g, &mut bind, x)?;
        let (probs, deltas) = self.rpn_forward(&mut g, &mut bind, t.top())?;
        let anchors = self.anchors(ih, iw);
        let settings = self.proposal_settings(iw as Real, ih as Real, top_n);
        let proposals = self.decode_proposals(g.value(probs), g.value(deltas), &anchors, &settings)?;
        Ok(Backbone {
            taps: t.taps.iter().map(|&v| g.value(v).clone()).collect(),
            proposals,
            image_width: iw as Real,
            image_height: ih as Real,
        })
    }

    pub fn original_forward(&self, g: &mut Graph, bind: &mut Binder, top: Var, rois: &[Roi]) -> Result<(Var, Var)> {
        let scale = 1.0 / self.feature_stride() as Real;
        let pooled = g.roi_pool(top, rois, self.cfg.roi_pool_size, scale)?;
        self.original.forward(g, bind, pooled)
    }

    /// Pools the reduced features at every context scale, merges them by
    /// maxout (when there is more than one scale) and classifies.
    pub fn context_forward(&self, g: &mut Graph, bind: &mut Binder, top: Var, rois: &[Roi], scales: &[Real], extent: (Real, Real)) -> Result<(Var, Var)> {
        if scales.is_empty() {
            return Err(Error::Config("the context branch needs at least one scale".into()));
        }
        let scale = 1.0 / self.feature_stride() as Real;
        let reduced = self.context.reduce.forward(g, bind, top)?;
        let reduced = g.relu(reduced)?;
        let mut pooled = Vec::with_capacity(scales.len());
        for &s in scales {
            let scaled: Vec<Roi> = rois.iter().map(|r| scale_roi(r, s, extent)).collect::<Result<_>>()?;
            pooled.push(g.roi_pool(reduced, &scaled, self.cfg.roi_pool_size, scale)?);
        }
        let merged = if pooled.len() == 1 { pooled[0] } else { g.maxout_merge(&pooled)? };
        self.context.head.forward(g, bind, merged)
    }

    /// Per-cell maps `[T×R×K×K×(C+1)]`, refined by the grid LSTM when
    /// `use_lstm` is set.
    pub fn part_forward(&self, g: &mut Graph, bind: &mut Binder, taps: [Var; 2], rois: &[Roi], use_lstm: bool) -> Result<Var> {
        let scale = 1.0 / self.feature_stride() as Real;
        let maps = self.part.forward(g, bind, &[(taps[0], scale), (taps[1], scale)], rois)?;
        if !use_lstm {
            return Ok(maps);
        }
        let s = g.shape(maps).to_vec();
        let flat = g.reshape(maps, &[s[0] * s[1], s[2], s[3], s[4]])?;
        let refined = self.lstm.forward(g, bind, flat)?;
        g.reshape(refined, &s)
    }

    fn frozen_taps(g: &mut Graph, bb: &Backbone) -> [Var; 2] {
        [g.input(bb.taps[0].clone()), g.input(bb.taps[1].clone())]
    }

    pub fn original_scores(&self, params: &Params, bb: &Backbone) -> Result<OriginalOutput> {
        let rois = bb.rois();
        if rois.is_empty() {
            return Ok(OriginalOutput { scores: vec![], deltas: vec![] });
        }
        let mut g = Graph::new();
        let mut bind = Binder::new(params, GroupSet::empty());
        let taps = Self::frozen_taps(&mut g, bb);
        let (probs, deltas) = self.original_forward(&mut g, &mut bind, taps[1], &rois)?;
        Ok(OriginalOutput {
            scores: g.value(probs).data().chunks(2).map(|c| c[1]).collect(),
            deltas: g
                .value(deltas)
                .data()
                .chunks(4)
                .map(|c| [c[0] * BBOX_STD[0], c[1] * BBOX_STD[1], c[2] * BBOX_STD[2], c[3] * BBOX_STD[3]])
                .collect(),
        })
    }

    pub fn context_scores(&self, params: &Params, bb: &Backbone, scales: &[Real]) -> Result<Vec<Real>> {
        let rois = bb.rois();
        if rois.is_empty() {
            return Ok(vec![]);
        }
        let mut g = Graph::new();
        let mut bind = Binder::new(params, GroupSet::empty());
        let taps = Self::frozen_taps(&mut g, bb);
        let (probs, _) = self.context_forward(&mut g, &mut bind, taps[1], &rois, scales, (bb.image_width, bb.image_height))?;
        Ok(g.value(probs).data().chunks(2).map(|c| c[1]).collect())
    }

    pub fn part_scores(&self, params: &Params, bb: &Backbone, use_lstm: bool) -> Result<Vec<Real>> {
        let rois = bb.rois();
        if rois.is_empty() {
            return Ok(vec![]);
        }
        let mut g = Graph::new();
        let mut bind = Binder::new(params, GroupSet::empty());
        let taps = Self::frozen_taps(&mut g, bb);
        let maps = self.part_forward(&mut g, &mut bind, taps, &rois, use_lstm)?;
        let scores = aggregate_scores(&mut g, maps)?;
        Ok(g.value(scores).data().to_vec())
    }

    /// Full inference with the configured fusion weights, scales and part
    /// refinement.
    pub fn detect(&self, params: &Params, image: &Tensor, image_id: usize) -> Result<Vec<Detection>> {
        let bb = self.backbone(params, image, self.cfg.proposals_test)?;
        let orig = self.original_scores(params, &bb)?;
        let part = self.part_scores(params, &bb, self.cfg.use_lstm)?;
        let ctx = self.context_scores(params, &bb, &self.cfg.context_scales)?;
        assemble(image_id, &bb, &orig, &part, &ctx, self.cfg.branch_weights, self.cfg.nms_iou)
    }
}
