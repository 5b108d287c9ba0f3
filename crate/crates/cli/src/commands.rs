use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pcn_core::evaluation::{format_curve_csv, EvalSetting};
use pcn_core::experiment::{ablation_detections, detect_dataset, evaluate_settings, format_summary, training_samples, AblationModels, RunConfig, Variant};
use pcn_core::model::{read_detections, write_detections, Pcn};
use pcn_core::synth::{generate_dataset, Dataset};
use pcn_core::training::{format_loss_csv, run_context_refit, run_stage, TrainedModel};
use pcn_core::Real;

use crate::manifest::RunManifest;
use crate::{Cli, Command};

pub fn dispatch(cli: &Cli, cfg: RunConfig, args: Vec<String>) -> Result<()> {
    let out = cli.out.clone().ok_or_else(|| anyhow!("--out is required"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let name = match &cli.command {
        Command::Gen { .. } => "gen",
        Command::Train { .. } => "train",
        Command::Detect { .. } => "detect",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Replay { .. } => bail!("nested replay"),
    };
    let mut m = RunManifest::new(name, args, cli.seed, cfg.to_kv());
    match &cli.command {
        Command::Gen { n_images } => gen(&cfg, cli.seed, n_images.unwrap_or(cfg.train_images), &out, &mut m),
        Command::Train { data, stages, from } => train(&cfg, cli.seed, data, stages, from.as_deref().unwrap_or(&out), &out, &mut m),
        Command::Detect {
            data,
            checkpoint,
            branch_weights,
        } => detect(cfg, data, checkpoint, branch_weights.as_deref(), &out, &mut m),
        Command::Eval { data, detections, settings } => eval(data, detections, settings, &out, &mut m),
        Command::Ablate { data, run, variants } => ablate(&cfg, data, run, variants.as_deref(), &out, &mut m),
        Command::Replay { .. } => unreachable!(),
    }
}

fn gen(cfg: &RunConfig, seed: u64, n: usize, out: &Path, m: &mut RunManifest) -> Result<()> {
    if n == 0 {
        bail!("--n-images must be at least 1");
    }
    m.outputs = vec![out.join("images"), out.join("annotations.txt")];
    m.write(out)?;
    let d = generate_dataset(&cfg.scene, n, seed)?;
    d.save(out)?;
    Ok(())
}

fn load_data(dir: &Path, k: usize) -> Result<Dataset> {
    let d = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if let Some(a) = d.annotations.iter().find(|a| a.visibility.k() != k) {
        bail!(
            "dataset {} has {}×{} part masks but the model uses K={k}",
            dir.display(),
            a.visibility.k(),
            a.visibility.k()
        );
    }
    Ok(d)
}

fn stage_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

fn context_path(dir: &Path, scales: &[Real]) -> PathBuf {
    if scales.len() == 1 {
        dir.join(format!("context_S{}.ckpt", scales[0]))
    } else {
        dir.join("context_maxout.ckpt")
    }
}

enum Step {
    Stage(u8),
    Context,
}

fn parse_steps(tokens: &[String]) -> Result<Vec<Step>> {
    tokens
        .iter()
        .map(|t| match t.trim() {
            "1" => Ok(Step::Stage(1)),
            "2" => Ok(Step::Stage(2)),
            "3" => Ok(Step::Stage(3)),
            "context" => Ok(Step::Context),
            other => bail!("unknown stage `{other}`; use 1, 2, 3 or context"),
        })
        .collect()
}

fn train(cfg: &RunConfig, seed: u64, data: &Path, stages: &[String], from: &Path, out: &Path, m: &mut RunManifest) -> Result<()> {
    let steps = parse_steps(stages)?;
    let (net, init) = Pcn::new(&cfg.model, seed)?;
    let refits = Variant::standard(&cfg.model.context_scales)
        .into_iter()
        .filter_map(|v| match v {
            Variant::Context(s) => Some(s),
            _ => None,
        })
        .collect::<Vec<_>>();

    // Check the checkpoint chain before any training starts.
    let on_disk = |s: u8| stage_path(from, s).exists();
    let latest = (1..=3u8).rev().find(|&s| on_disk(s)).unwrap_or(0);
    let mut trained = 0u8;
    for step in &steps {
        match *step {
            Step::Stage(s) => {
                if s > 1 && trained != s - 1 && !on_disk(s - 1) {
                    bail!("stage {s} needs the stage {} checkpoint {}", s - 1, stage_path(from, s - 1).display());
                }
                trained = s;
                m.checkpoints.push(stage_path(out, s));
                m.outputs.push(out.join(format!("loss_stage{s}.csv")));
            }
            Step::Context => {
                if trained == 0 && latest == 0 {
                    bail!("context refits need the stage 1 checkpoint {}", stage_path(from, 1).display());
                }
                for s in &refits {
                    let p = context_path(out, s);
                    m.outputs.push(out.join(format!("loss_{}.csv", p.file_stem().unwrap().to_string_lossy())));
                    m.checkpoints.push(p);
                }
            }
        }
    }
    m.write(out)?;

    let samples = training_samples(&load_data(data, cfg.model.part_grid)?);
    let mut model = TrainedModel { params: init.clone(), stage: 0 };
    for step in &steps {
        match *step {
            Step::Stage(s) => {
                // Each stage continues from the previous one: trained just
                // now, or read from the checkpoint directory.
                if model.stage + 1 != s {
                    model = if s == 1 {
                        TrainedModel { params: init.clone(), stage: 0 }
                    } else {
                        TrainedModel::load(&net, &init, &stage_path(from, s - 1))?
                    };
                }
                let tc = cfg.plan.stage_config(s, seed)?;
                let rec = run_stage(s, &tc, &net, &mut model, &samples)?;
                model.save(&net, &stage_path(out, s))?;
                write(&out.join(format!("loss_stage{s}.csv")), &format_loss_csv(&rec))?;
            }
            Step::Context => {
                if model.stage == 0 {
                    model = TrainedModel::load(&net, &init, &stage_path(from, latest))?;
                }
                for (i, s) in refits.iter().enumerate() {
                    let tc = cfg.plan.refit_config(seed, i as u64)?;
                    let (params, rec) = run_context_refit(&tc, &net, &model, &samples, s)?;
                    let p = context_path(out, s);
                    TrainedModel { params, stage: 1 }.save(&net, &p)?;
                    write(&out.join(format!("loss_{}.csv", p.file_stem().unwrap().to_string_lossy())), &format_loss_csv(&rec))?;
                }
            }
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn detect(mut cfg: RunConfig, data: &Path, checkpoint: &Path, weights: Option<&[Real]>, out: &Path, m: &mut RunManifest) -> Result<()> {
    if let Some(w) = weights {
        cfg.model.branch_weights = w.try_into().map_err(|_| anyhow!("--branch-weights needs 3 values, got {}", w.len()))?;
        cfg.model.validate()?;
        m.config = cfg.to_kv();
    }
    let path = out.join("detections.txt");
    m.checkpoints.push(checkpoint.to_path_buf());
    m.outputs.push(path.clone());
    m.write(out)?;
    let (net, template) = Pcn::new(&cfg.model, 0)?;
    let model = TrainedModel::load(&net, &template, checkpoint)?;
    let d = load_data(data, cfg.model.part_grid)?;
    let dets = detect_dataset(&net, &model.params, &d)?;
    write_detections(&path, &dets)?;
    Ok(())
}

fn eval(data: &Path, detections: &Path, names: &[String], out: &Path, m: &mut RunManifest) -> Result<()> {
    let settings = if names.is_empty() {
        EvalSetting::standard()
    } else {
        names.iter().map(|n| EvalSetting::by_name(n)).collect::<pcn_core::Result<_>>()?
    };
    for s in &settings {
        m.outputs.push(out.join(format!("curve_{}.csv", s.name)));
    }
    m.outputs.push(out.join("summary.csv"));
    m.write(out)?;
    let d = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let dets = read_detections(detections)?;
    let curves = evaluate_settings(&dets, &d.annotations, d.images.len(), &settings)?;
    for (s, c) in settings.iter().zip(&curves) {
        write(&out.join(format!("curve_{}.csv", s.name)), &format_curve_csv(c))?;
    }
    let label = detections.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write(&out.join("summary.csv"), &format_summary(&settings, &[(label, curves)]))
}

fn parse_variant(token: &str, scales: &[Real]) -> Result<Variant> {
    Ok(match token.trim() {
        "base" => Variant::Base,
        "part_avg" => Variant::PartAvg,
        "part_lstm" => Variant::PartLstm,
        "maxout" => Variant::Context(scales.to_vec()),
        "full" => Variant::Full,
        t => match t.strip_prefix("context:").map(str::parse::<Real>) {
            Some(Ok(s)) => Variant::Context(vec![s]),
            _ => bail!("unknown variant `{t}`; use base, part_avg, part_lstm, context:S, maxout or full"),
        },
    })
}

fn ablate(cfg: &RunConfig, data: &Path, run: &Path, tokens: Option<&[String]>, out: &Path, m: &mut RunManifest) -> Result<()> {
    let scales = &cfg.model.context_scales;
    let variants = match tokens {
        Some(t) => t.iter().map(|t| parse_variant(t, scales)).collect::<Result<Vec<_>>>()?,
        None => Variant::standard(scales),
    };
    let need = |v: &Variant, p: PathBuf| -> Result<PathBuf> {
        if p.exists() {
            Ok(p)
        } else {
            bail!("variant `{}` needs the checkpoint {}", v.name(), p.display())
        }
    };
    let mut context_ckpts = Vec::new();
    let mut stage2 = None;
    let stage3 = need(&Variant::Full, stage_path(run, 3))?;
    for v in &variants {
        match v {
            Variant::PartAvg => stage2 = Some(need(v, stage_path(run, 2))?),
            Variant::Context(s) => context_ckpts.push((s.clone(), need(v, context_path(run, s))?)),
            _ => {}
        }
    }
    m.checkpoints.push(stage3.clone());
    m.checkpoints.extend(stage2.clone());
    m.checkpoints.extend(context_ckpts.iter().map(|(_, p)| p.clone()));
    let report = out.join("ablation.csv");
    m.outputs.push(report.clone());
    m.write(out)?;

    let (net, template) = Pcn::new(&cfg.model, 0)?;
    let s3 = TrainedModel::load(&net, &template, &stage3)?.params;
    let models = AblationModels {
        stage2: match &stage2 {
            Some(p) => TrainedModel::load(&net, &template, p)?.params,
            None => s3.clone(),
        },
        context: context_ckpts
            .iter()
            .map(|(s, p)| Ok((s.clone(), TrainedModel::load(&net, &template, p)?.params)))
            .collect::<Result<_>>()?,
        stage3: s3,
    };
    let d = load_data(data, cfg.model.part_grid)?;
    let dets = ablation_detections(&net, &models, &variants, &d)?;
    let settings = EvalSetting::standard();
    let rows = variants
        .iter()
        .zip(&dets)
        .map(|(v, ds)| Ok((v.name(), evaluate_settings(ds, &d.annotations, d.images.len(), &settings)?)))
        .collect::<Result<Vec<_>>>()?;
    write(&report, &format_summary(&settings, &rows))
}
