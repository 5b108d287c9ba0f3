//! End-to-end runs: benchmark data, staged training, detection over a
//! dataset, evaluation under every setting and the branch ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::annotation::Annotation;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_mr, EvalSetting, MrCurve};
use crate::model::{assemble, by_image, Backbone, Detection, ModelConfig, Pcn};
use crate::params::Params;
use crate::synth::{generate_dataset, Dataset, SceneConfig};
use crate::tensor::Real;
use crate::training::{run_context_refit, run_stage, LossRecord, TrainSample, TrainedModel, TrainingPlan};

/// Everything a run depends on besides its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub plan: TrainingPlan,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            plan: TrainingPlan::default(),
            train_images: 2000,
            test_images: 500,
        }
    }
}

impl RunConfig {
    /// Applies `text` over the defaults; unknown keys are errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let mut cfg = RunConfig::default();
        cfg.model.apply(&mut kv)?;
        cfg.scene.apply(&mut kv)?;
        cfg.plan.apply(&mut kv)?;
        kv.set("train_images", &mut cfg.train_images)?;
        kv.set("test_images", &mut cfg.test_images)?;
        kv.finish()?;
        cfg.scene.part_grid = cfg.model.part_grid;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        if self.scene.part_grid != self.model.part_grid {
            return Err(Error::Config("scene and model part grids differ".into()));
        }
        for s in 1..=3 {
            self.plan.stage_config(s, 0)?;
        }
        Ok(())
    }

    /// Every key, so that the text reproduces this configuration.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        self.model.write_kv(&mut out);
        self.scene.write_kv(&mut out);
        self.plan.write_kv(&mut out);
        let _ = writeln!(out, "train_images={}", self.train_images);
        let _ = writeln!(out, "test_images={}", self.test_images);
        out
    }
}

/// Train and test sets drawn from independent seeds.
pub fn benchmark(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = generate_dataset(&cfg.scene, cfg.train_images, seed.wrapping_mul(2))?;
    let test = generate_dataset(&cfg.scene, cfg.test_images, seed.wrapping_mul(2).wrapping_add(1))?;
    Ok((train, test))
}

pub fn training_samples(d: &Dataset) -> Vec<TrainSample> {
    d.images
        .iter()
        .zip(d.grouped())
        .map(|(img, gts)| TrainSample { image: img.to_tensor(), gts })
        .collect()
}

/// Runs `stages` in order, continuing from `model`; returns each stage's
/// loss trace.
pub fn train_stages(net: &Pcn, model: &mut TrainedModel, plan: &TrainingPlan, data: &[TrainSample], stages: &[u8], seed: u64) -> Result<Vec<Vec<LossRecord>>> {
    stages
        .iter()
        .map(|&s| run_stage(s, &plan.stage_config(s, seed)?, net, model, data))
        .collect()
}

pub fn detect_dataset(net: &Pcn, params: &Params, d: &Dataset) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, img) in d.images.iter().enumerate() {
        out.extend(net.detect(params, &img.to_tensor(), i)?);
    }
    Ok(out)
}

/// One curve per setting, in the order given.
pub fn evaluate_settings(dets: &[Detection], annotations: &[Annotation], n_images: usize, settings: &[EvalSetting]) -> Result<Vec<MrCurve>> {
    let images: BTreeSet<usize> = (0..n_images).collect();
    let det_map = by_image(dets);
    let mut ann_map: BTreeMap<usize, Vec<Annotation>> = BTreeMap::new();
    for a in annotations {
        ann_map.entry(a.image_id).or_default().push(a.clone());
    }
    settings.iter().map(|s| evaluate_mr(&images, &det_map, &ann_map, s)).collect()
}

/// A table with one row per label and one log-average column per setting.
pub fn format_summary(settings: &[EvalSetting], rows: &[(String, Vec<MrCurve>)]) -> String {
    let mut out = String::from("variant");
    for s in settings {
        out.push(',');
        out.push_str(&s.name);
    }
    out.push('\n');
    for (label, curves) in rows {
        out.push_str(label);
        for c in curves {
            let _ = write!(out, ",{}", c.log_average);
        }
        out.push('\n');
    }
    out
}

/// A row of the branch ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    /// Original branch alone.
    Base,
    /// Original and part branches; raw part maps averaged.
    PartAvg,
    /// Original and part branches with grid-LSTM refinement.
    PartLstm,
    /// Original and a context branch trained for the listed scales alone.
    Context(Vec<Real>),
    /// All three branches as trained by the staged procedure.
    Full,
}

impl Variant {
    /// The standard rows: base, both part variants, each single context
    /// scale, their maxout combination and the full model.
    pub fn standard(scales: &[Real]) -> Vec<Variant> {
        let mut v = vec![Variant::Base, Variant::PartAvg, Variant::PartLstm];
        v.extend(scales.iter().map(|&s| Variant::Context(vec![s])));
        v.push(Variant::Context(scales.to_vec()));
        v.push(Variant::Full);
        v
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Base => "base".into(),
            Variant::PartAvg => "base+part_avg".into(),
            Variant::PartLstm => "base+part+lstm".into(),
            Variant::Context(s) if s.len() == 1 => format!("base+context(S={})", s[0]),
            Variant::Context(_) => "base+context(maxout)".into(),
            Variant::Full => "full".into(),
        }
    }

    fn weights(&self, full: [Real; 3]) -> [Real; 3] {
        match self {
            Variant::Base => [1.0, 0.0, 0.0],
            Variant::PartAvg | Variant::PartLstm => [0.5, 0.5, 0.0],
            Variant::Context(_) => [0.5, 0.0, 0.5],
            Variant::Full => full,
        }
    }
}

/// Parameter sets the ablation reads from.
#[derive(Clone, Debug)]
pub struct AblationModels {
    /// After part pre-training, before the LSTM stage.
    pub stage2: Params,
    pub stage3: Params,
    /// Context-only refits keyed by their scale list.
    pub context: Vec<(Vec<Real>, Params)>,
}

impl AblationModels {
    fn context_params(&self, scales: &[Real]) -> Result<&Params> {
        self.context
            .iter()
            .find(|(s, _)| s.as_slice() == scales)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Config(format!("no context model trained for scales {scales:?}")))
    }
}

/// Trains all stages and every context refit of `variants`.
pub fn train_ablation(net: &Pcn, init: &Params, plan: &TrainingPlan, data: &[TrainSample], variants: &[Variant], seed: u64) -> Result<AblationModels> {
    let mut m = TrainedModel { params: init.clone(), stage: 0 };
    train_stages(net, &mut m, plan, data, &[1, 2], seed)?;
    let stage2 = m.params.clone();
    train_stages(net, &mut m, plan, data, &[3], seed)?;
    let mut context = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        if let Variant::Context(scales) = v {
            let cfg = plan.refit_config(seed, i as u64)?;
            let (p, _) = run_context_refit(&cfg, net, &m, data, scales)?;
            context.push((scales.clone(), p));
        }
    }
    Ok(AblationModels {
        stage2,
        stage3: m.params,
        context,
    })
}

/// Detections of every variant. Trunk, proposals and original branch are
/// shared by all variants (later stages never change them), so the
/// backbone runs once per image.
pub fn ablation_detections(net: &Pcn, models: &AblationModels, variants: &[Variant], d: &Dataset) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); variants.len()];
    let cfg = &net.cfg;
    for (id, img) in d.images.iter().enumerate() {
        let bb: Backbone = net.backbone(&models.stage3, &img.to_tensor(), cfg.proposals_test)?;
        let orig = net.original_scores(&models.stage3, &bb)?;
        let zeros = vec![0.0; bb.proposals.len()];
        for (v, dets) in variants.iter().zip(out.iter_mut()) {
            let (part, ctx) = match v {
                Variant::Base => (zeros.clone(), zeros.clone()),
                Variant::PartAvg => (net.part_scores(&models.stage2, &bb, false)?, zeros.clone()),
                Variant::PartLstm => (net.part_scores(&models.stage3, &bb, true)?, zeros.clone()),
                Variant::Context(s) => (zeros.clone(), net.context_scores(models.context_params(s)?, &bb, s)?),
                Variant::Full => (
                    net.part_scores(&models.stage3, &bb, cfg.use_lstm)?,
                    net.context_scores(&models.stage3, &bb, &cfg.context_scales)?,
                ),
            };
            dets.extend(assemble(id, &bb, &orig, &part, &ctx, v.weights(cfg.branch_weights), cfg.nms_iou)?);
        }
    }
    Ok(out)
}
