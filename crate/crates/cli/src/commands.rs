use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use s4c_core::clsnet::{self, extract_pool3_features, roi_from_mask, roi_or_whole, ClsSample};
use s4c_core::evaluation::{self, case_dsc, cross_validate, CaseOutcome, PhaseOutcome};
use s4c_core::inference::predict_volume;
use s4c_core::io::{read_mask, read_volume, write_mask};
use s4c_core::manifest::{load_all, load_manifest};
use s4c_core::phantom::{generate_datasets, DatasetOptions, Difficulty};
use s4c_core::postclassify::{classify_phase, retained_mask};
use s4c_core::segnet::{load_model, save_model, train_with_progress, training_volumes};
use s4c_core::{CaseDecision, Dims, LabelMask, Phase, PostOptions, RunConfig, Verdict};

use crate::{overlay, Cmd, PostArgs};

/// A flag combination that cannot be acted on.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn dispatch(cmd: Cmd, config: Option<&Path>) -> Result<Value> {
    let cfg = match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("--config {}", p.display()))?,
        None => RunConfig::default(),
    };
    match cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Train(a) => train(a, cfg),
        Cmd::Infer(a) => infer(a, cfg),
        Cmd::Classify(a) => classify(a, cfg),
        Cmd::Eval(a) => eval(a, cfg),
        Cmd::Cv(a) => cv(a, cfg),
        Cmd::TrainCls(a) => train_cls(a, cfg),
        Cmd::InferCls(a) => infer_cls(a, cfg),
        Cmd::Run(a) => run(a, cfg),
        Cmd::Overlay(a) => overlay_cmd(a),
    }
}

fn post_options(base: PostOptions, a: &PostArgs) -> PostOptions {
    PostOptions {
        connectivity: a.connectivity.unwrap_or(base.connectivity),
        tumor_thresh: a.tumor_thresh.unwrap_or(base.tumor_thresh),
        duct_thresh: a.duct_thresh.unwrap_or(base.duct_thresh),
        ..base
    }
}

fn phase_volume_path(dir: &Path, phase: Phase) -> PathBuf {
    dir.join(format!("{phase}.raw"))
}

fn class_counts(m: &LabelMask) -> Value {
    json!({
        "background": m.count(0),
        "pancreas": m.count(1),
        "tumor": m.count(2),
        "duct": m.count(3),
    })
}

fn gen(a: crate::GenArgs) -> Result<Value> {
    let dims = Dims::cube(a.size).map_err(|e| UsageError(format!("--size: {e}")))?;
    let parts: Vec<DatasetOptions> = [
        (Difficulty::Easy, a.easy_normal, a.easy_abnormal),
        (Difficulty::Hard, a.hard_normal, a.hard_abnormal),
    ]
    .into_iter()
    .filter(|&(_, n, m)| n + m > 0)
    .map(|(difficulty, n_normal, n_abnormal)| DatasetOptions {
        n_normal,
        n_abnormal,
        dims,
        seed: a.seed,
        difficulty,
    })
    .collect();
    if parts.is_empty() {
        return Err(UsageError("nothing to generate: all case counts are zero".into()).into());
    }
    let m = generate_datasets(&parts, &a.out)?;
    Ok(json!({
        "manifest": a.out.join("manifest.json"),
        "cases": m.cases.len(),
        "abnormal": m.cases.iter().filter(|c| c.abnormal()).count(),
        "seed": a.seed,
        "dims": [a.size, a.size, a.size],
    }))
}

fn train(a: crate::TrainArgs, cfg: RunConfig) -> Result<Value> {
    let mut seg = cfg.seg;
    if let Some(n) = a.iters {
        seg.max_iters = n;
    }
    if let Some(p) = a.train_patch {
        seg.train_patch_size = Some(p);
    }
    if let Some(s) = a.seed {
        seg.seed = s;
    }
    let manifest = load_manifest(&a.manifest)?;
    let cases = load_all(&manifest)?;
    let vols = training_volumes(&cases, a.phase, &seg.window)?;
    log::info!("training {} on {} volumes for {} iterations", a.phase, vols.len(), seg.max_iters);
    let (model, log) = train_with_progress(&vols, &seg, |_, _| {})?;
    save_model(&model, &a.out)?;
    if let Some(p) = &a.loss_log {
        fs::write(p, serde_json::to_vec(&log)?).with_context(|| format!("writing {}", p.display()))?;
    }
    let tail = log.losses.len().min(100);
    Ok(json!({
        "model": a.out,
        "phase": a.phase,
        "iterations": log.losses.len(),
        "parameters": model.num_params(),
        "final_loss_mean": log.losses[log.losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64,
        "seconds": log.seconds,
    }))
}

fn infer(a: crate::InferArgs, cfg: RunConfig) -> Result<Value> {
    let model = load_model(&a.model)?;
    let volume = read_volume(&phase_volume_path(&a.case_dir, a.phase))?;
    let mut opts = cfg.inference;
    if let Some(s) = a.stride {
        opts.stride = s;
    }
    let mask = predict_volume(&model, &volume, &opts)?;
    write_mask(&mask, &a.out, volume.spacing())?;
    Ok(json!({ "mask": a.out, "dims": mask.dims().0, "counts": class_counts(&mask) }))
}

fn classify(a: crate::ClassifyArgs, cfg: RunConfig) -> Result<Value> {
    let post = post_options(cfg.post, &a.post);
    let mut phases = BTreeMap::new();
    phases.insert(a.phase, classify_phase(&read_mask(&a.mask)?, &post));
    if let Some(m2) = &a.mask2 {
        if a.phase2 == a.phase {
            return Err(UsageError("--phase and --phase2 must differ".into()).into());
        }
        phases.insert(a.phase2, classify_phase(&read_mask(m2)?, &post));
    }
    Ok(serde_json::to_value(CaseDecision::new(None, phases)?)?)
}

fn eval(a: crate::EvalArgs, cfg: RunConfig) -> Result<Value> {
    let post = post_options(cfg.post, &a.post);
    let manifest = load_manifest(&a.manifest)?;
    let cases = load_all(&manifest)?;
    let mut outcomes = Vec::new();
    for c in &cases {
        let mut phases = BTreeMap::new();
        for &p in &a.phases {
            let path = a.predictions.join(&c.case_id).join(format!("{p}_pred.raw"));
            let pred = read_mask(&path)?;
            let truth = c
                .phase(p)?
                .mask
                .as_ref()
                .with_context(|| format!("case {} has no {p} ground truth", c.case_id))?;
            let (kept, _, _) = retained_mask(&pred, &post);
            let (pancreas_dsc, tumor_dsc) = case_dsc(&kept, truth)?;
            phases.insert(
                p,
                PhaseOutcome {
                    decision: classify_phase(&pred, &post),
                    pancreas_dsc,
                    tumor_dsc,
                    cls_probability: None,
                },
            );
        }
        outcomes.push(CaseOutcome {
            case_id: c.case_id.clone(),
            abnormal: c.abnormal,
            fold: 0,
            phases,
        });
    }
    let reports = evaluation::s4c_reports(&outcomes, &a.phases)?;
    if a.emit_table {
        eprintln!("{}\n{}", evaluation::table1(&reports), evaluation::table2(&[&reports.fused]));
    }
    Ok(serde_json::to_value(reports)?)
}

fn cv(a: crate::CvArgs, cfg: RunConfig) -> Result<Value> {
    let mut opts = cfg.cv_options();
    if let Some(m) = a.mode {
        opts.mode = m;
    }
    if let Some(k) = a.k {
        opts.k = k;
    }
    if let Some(s) = a.seed {
        opts.seed = s;
    }
    if let Some(n) = a.iters {
        opts.seg.max_iters = n;
    }
    if let Some(p) = a.train_patch {
        opts.seg.train_patch_size = Some(p);
    }
    let manifest = load_manifest(&a.manifest)?;
    let cases = load_all(&manifest)?;
    let report = cross_validate(&cases, &opts, |msg| log::info!("{msg}"))?;
    fs::write(&a.out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", a.out.display()))?;
    if a.emit_table {
        eprintln!("{}", evaluation::tables_text(&report));
    }
    let summary = |r: &s4c_core::EvalReport| {
        json!({
            "misses": r.misses,
            "n_abnormal": r.n_abnormal,
            "wrong_calls": r.wrong_calls,
            "n_normal": r.n_normal,
            "sensitivity": r.sensitivity,
            "specificity": r.specificity,
        })
    };
    let mut out = json!({
        "report": a.out,
        "seconds": report.seconds,
        "s4c": {
            "fused": summary(&report.s4c.fused),
            "phases": report.s4c.phases.iter().map(|(p, r)| (p.to_string(), summary(r))).collect::<BTreeMap<_, _>>(),
        },
    });
    if let Some(c) = &report.clsnet {
        out["clsnet"] = json!({ "fused": summary(&c.fused) });
    }
    Ok(out)
}

fn train_cls(a: crate::TrainClsArgs, cfg: RunConfig) -> Result<Value> {
    let mut cls = cfg.cls;
    if let Some(n) = a.iters {
        cls.max_iters = n;
    }
    let seg = load_model(&a.segmodel)?;
    let manifest = load_manifest(&a.manifest)?;
    let cases = load_all(&manifest)?;
    let samples = cases
        .iter()
        .map(|c| {
            let pd = c.phase(a.phase)?;
            let mask = pd
                .mask
                .as_ref()
                .with_context(|| format!("case {} has no {} mask", c.case_id, a.phase))?;
            let roi = roi_from_mask(mask, cls.roi_margin)?;
            Ok(ClsSample {
                features: extract_pool3_features(&seg, &pd.volume, &roi)?,
                label: c.abnormal as u8,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (head, log) = clsnet::train_head(&samples, &cls)?;
    clsnet::save_head(&head, &a.out)?;
    Ok(json!({ "model": a.out, "phase": a.phase, "samples": samples.len(), "iterations": log.losses.len(), "seconds": log.seconds }))
}

fn infer_cls(a: crate::InferClsArgs, cfg: RunConfig) -> Result<Value> {
    let seg = load_model(&a.segmodel)?;
    let head = clsnet::load_head(&a.clsmodel)?;
    let volume = read_volume(&phase_volume_path(&a.case_dir, a.phase))?;
    let mask = match &a.mask {
        Some(p) => read_mask(p)?,
        None => predict_volume(&seg, &volume, &cfg.inference)?,
    };
    let roi = roi_or_whole(&mask, cfg.cls.roi_margin);
    let p = head.predict_proba(&extract_pool3_features(&seg, &volume, &roi)?)?;
    Ok(json!({ "phase": a.phase, "roi": roi, "probability": p, "verdict": Verdict::from_bool(p >= 0.5) }))
}

fn run(a: crate::RunArgs, cfg: RunConfig) -> Result<Value> {
    let post = post_options(cfg.post, &a.post);
    let mut opts = cfg.inference;
    if let Some(s) = a.stride {
        opts.stride = s;
    }
    let models: Vec<(Phase, &PathBuf)> = [(Phase::Arterial, &a.arterial_model), (Phase::Venous, &a.venous_model)]
        .into_iter()
        .filter_map(|(p, m)| m.as_ref().map(|m| (p, m)))
        .collect();
    if models.is_empty() {
        return Err(UsageError("give --arterial-model and/or --venous-model".into()).into());
    }
    if let Some(d) = &a.out_dir {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut phases = BTreeMap::new();
    for (phase, model_path) in models {
        let model = load_model(model_path)?;
        let volume = read_volume(&phase_volume_path(&a.case_dir, phase))?;
        let mask = predict_volume(&model, &volume, &opts)?;
        if let Some(d) = &a.out_dir {
            write_mask(&mask, &d.join(format!("{phase}_pred.raw")), volume.spacing())?;
        }
        phases.insert(phase, classify_phase(&mask, &post));
    }
    let id = a.case_dir.file_name().map(|s| s.to_string_lossy().into_owned());
    Ok(serde_json::to_value(CaseDecision::new(id, phases)?)?)
}

fn overlay_cmd(a: crate::OverlayArgs) -> Result<Value> {
    if a.every == 0 {
        return Err(UsageError("--every must be positive".into()).into());
    }
    let volume = read_volume(&phase_volume_path(&a.case_dir, a.phase))?;
    let mask_path = a.mask.clone().unwrap_or_else(|| a.case_dir.join(format!("{}_mask.raw", a.phase)));
    let mask = read_mask(&mask_path)?;
    let files = overlay::write_slices(&volume, &mask, &a.out, a.every)?;
    Ok(json!({ "out": a.out, "slices": files.len(), "mask": mask_path }))
}
