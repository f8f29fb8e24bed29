//! Overlap and detection metrics, stratified folds and cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clsnet::{extract_pool3_features, roi_from_mask, roi_or_whole, train_head, ClsConfig, ClsSample};
use crate::error::{Error, Result};
use crate::inference::{predict_volume, InferenceOptions};
use crate::postclassify::{classify_phase, fuse_phases, retained_mask, PhaseDecision, PostOptions, Verdict};
use crate::rng::{derive_seed, SplitMix64};
use crate::segnet::{train, training_volumes, SegNetConfig, TrainLog};
use crate::volume::{CaseRecord, LabelMask, Phase, TUMOR};

/// `2|A n B| / (|A| + |B|)`, with 1.0 when both sets are empty.
pub fn dsc<T: Ord>(pred: &BTreeSet<T>, truth: &BTreeSet<T>) -> f64 {
    dsc_counts(pred.intersection(truth).count(), pred.len(), truth.len())
}

pub fn dsc_counts(inter: usize, pred: usize, truth: usize) -> f64 {
    if pred + truth == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (pred + truth) as f64
    }
}

/// DSC of the voxel sets whose class is in `classes`.
pub fn mask_dsc(pred: &LabelMask, truth: &LabelMask, classes: &[u8]) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!("prediction {} vs truth {}", pred.dims(), truth.dims())));
    }
    let (mut i, mut p, mut t) = (0, 0, 0);
    for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
        let (ia, ib) = (classes.contains(&a), classes.contains(&b));
        p += ia as usize;
        t += ib as usize;
        i += (ia && ib) as usize;
    }
    Ok(dsc_counts(i, p, t))
}

/// Whole-pancreas (classes 1-3) and tumor DSC.
pub fn case_dsc(pred: &LabelMask, truth: &LabelMask) -> Result<(f64, f64)> {
    Ok((mask_dsc(pred, truth, &[1, 2, 3])?, mask_dsc(pred, truth, &[TUMOR])?))
}

/// `100 * num / den` rounded half-up to two decimals, e.g. `"89.47"`.
/// Exact integer arithmetic, so the displayed value never depends on
/// floating-point rounding.
pub fn percent(num: u64, den: u64) -> Option<String> {
    if den == 0 {
        return None;
    }
    let hundredths = (20_000 * num + den) / (2 * den);
    Some(format!("{}.{:02}", hundredths / 100, hundredths % 100))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub abnormal: bool,
    pub predicted: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pancreas_dsc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tumor_dsc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: values.len(),
        })
    }
}

/// Case-mean DSC statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DscSummary {
    pub normal_pancreas: Option<Stat>,
    pub abnormal_pancreas: Option<Stat>,
    pub tumor: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Abnormal cases predicted normal.
    pub misses: usize,
    /// Normal cases predicted abnormal.
    pub wrong_calls: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub dsc: DscSummary,
    pub cases: Vec<CaseResult>,
}

impl EvalReport {
    pub fn sensitivity_pct(&self) -> Option<String> {
        percent((self.n_abnormal - self.misses) as u64, self.n_abnormal as u64)
    }

    pub fn specificity_pct(&self) -> Option<String> {
        percent((self.n_normal - self.wrong_calls) as u64, self.n_normal as u64)
    }

    pub fn missed_ids(&self) -> BTreeSet<&str> {
        self.cases
            .iter()
            .filter(|c| c.abnormal && !c.predicted.is_abnormal())
            .map(|c| c.case_id.as_str())
            .collect()
    }

    pub fn wrong_call_ids(&self) -> BTreeSet<&str> {
        self.cases
            .iter()
            .filter(|c| !c.abnormal && c.predicted.is_abnormal())
            .map(|c| c.case_id.as_str())
            .collect()
    }
}

/// Pools per-case outcomes into one report. Undefined rates are `None`.
pub fn evaluate(name: &str, cases: &[CaseResult]) -> EvalReport {
    let n_abnormal = cases.iter().filter(|c| c.abnormal).count();
    let n_normal = cases.len() - n_abnormal;
    let misses = cases.iter().filter(|c| c.abnormal && !c.predicted.is_abnormal()).count();
    let wrong_calls = cases.iter().filter(|c| !c.abnormal && c.predicted.is_abnormal()).count();
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let pick = |abn: bool, f: fn(&CaseResult) -> Option<f64>| -> Vec<f64> {
        cases.iter().filter(|c| c.abnormal == abn).filter_map(f).collect()
    };
    EvalReport {
        name: name.to_string(),
        n_normal,
        n_abnormal,
        misses,
        wrong_calls,
        sensitivity: rate(n_abnormal - misses, n_abnormal),
        specificity: rate(n_normal - wrong_calls, n_normal),
        accuracy: rate(cases.len() - misses - wrong_calls, cases.len()),
        dsc: DscSummary {
            normal_pancreas: Stat::of(&pick(false, |c| c.pancreas_dsc)),
            abnormal_pancreas: Stat::of(&pick(true, |c| c.pancreas_dsc)),
            tumor: Stat::of(&pick(true, |c| c.tumor_dsc)),
        },
        cases: cases.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Stratified k-fold split. Each class is shuffled with its own stream and
/// dealt round-robin; ids keep input order inside each split.
pub fn make_folds(cases: &[(String, bool)], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut fold_of = vec![0usize; cases.len()];
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].1 == class).collect();
        if idx.len() < k {
            let name = if class { "abnormal" } else { "normal" };
            return Err(Error::InvalidArgument(format!("{} {name} cases is fewer than k = {k}", idx.len())));
        }
        SplitMix64::new(derive_seed(seed, &[0xF01D, class as u64])).shuffle(&mut idx);
        for (j, &i) in idx.iter().enumerate() {
            fold_of[i] = j % k;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) = (0..cases.len()).partition(|&i| fold_of[i] == f);
            Fold {
                train: train.into_iter().map(|i| cases[i].0.clone()).collect(),
                test: test.into_iter().map(|i| cases[i].0.clone()).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CvMode {
    #[default]
    S4c,
    Clsnet,
}

impl std::str::FromStr for CvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s4c" => Ok(CvMode::S4c),
            "clsnet" => Ok(CvMode::Clsnet),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}, expected s4c or clsnet"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    pub mode: CvMode,
    pub phases: Vec<Phase>,
    pub seg: SegNetConfig,
    pub cls: ClsConfig,
    pub inference: InferenceOptions,
    pub post: PostOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            k: 4,
            seed: 0,
            mode: CvMode::S4c,
            phases: Phase::ALL.to_vec(),
            seg: SegNetConfig::default(),
            cls: ClsConfig::default(),
            inference: InferenceOptions::default(),
            post: PostOptions::default(),
        }
    }
}

/// Outcome of one test case in one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub decision: PhaseDecision,
    pub pancreas_dsc: f64,
    pub tumor_dsc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub abnormal: bool,
    pub fold: usize,
    pub phases: BTreeMap<Phase, PhaseOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub fold: usize,
    pub phase: Phase,
    pub seg_log: TrainLog,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_log: Option<TrainLog>,
}

/// Reports for one decision method: one per phase plus the OR-fused one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReports {
    pub phases: BTreeMap<Phase, EvalReport>,
    pub fused: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
    pub s4c: MethodReports,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clsnet: Option<MethodReports>,
    pub cases: Vec<CaseOutcome>,
    pub logs: Vec<FoldLog>,
    pub seconds: f64,
    /// DSC values are case means; rates pool all test folds.
    pub notes: String,
}

/// Rule-based reports (per phase and fused) from per-case outcomes.
pub fn s4c_reports(cases: &[CaseOutcome], phases: &[Phase]) -> Result<MethodReports> {
    method_reports(cases, phases, "S4C", |o| o.decision.verdict, true)
}

/// Classification-head reports; a phase is abnormal when its probability is at least 0.5.
pub fn clsnet_reports(cases: &[CaseOutcome], phases: &[Phase]) -> Result<MethodReports> {
    method_reports(
        cases,
        phases,
        "ClsNet",
        |o| Verdict::from_bool(o.cls_probability.unwrap_or(0.0) >= 0.5),
        false,
    )
}

fn method_reports(
    cases: &[CaseOutcome],
    phases: &[Phase],
    name: &str,
    verdict: impl Fn(&PhaseOutcome) -> Verdict,
    with_dsc: bool,
) -> Result<MethodReports> {
    let mut per_phase = BTreeMap::new();
    for &p in phases {
        let rows: Vec<CaseResult> = cases
            .iter()
            .map(|c| {
                let o = &c.phases[&p];
                CaseResult {
                    case_id: c.case_id.clone(),
                    abnormal: c.abnormal,
                    predicted: verdict(o),
                    pancreas_dsc: with_dsc.then_some(o.pancreas_dsc),
                    tumor_dsc: (with_dsc && c.abnormal).then_some(o.tumor_dsc),
                }
            })
            .collect();
        per_phase.insert(p, evaluate(&format!("{name} {p}"), &rows));
    }
    let fused_rows = cases
        .iter()
        .map(|c| {
            let verdicts: Vec<PhaseDecision> = phases
                .iter()
                .map(|p| PhaseDecision {
                    verdict: verdict(&c.phases[p]),
                    ..c.phases[p].decision.clone()
                })
                .collect();
            Ok(CaseResult {
                case_id: c.case_id.clone(),
                abnormal: c.abnormal,
                predicted: fuse_phases(&verdicts)?,
                pancreas_dsc: None,
                tumor_dsc: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodReports {
        phases: per_phase,
        fused: evaluate(&format!("{name} fused"), &fused_rows),
    })
}

/// Trains and evaluates per fold and phase, then pools test outcomes.
/// `progress` receives a short status line per completed step.
pub fn cross_validate(cases: &[CaseRecord], opts: &CvOptions, mut progress: impl FnMut(&str)) -> Result<CvReport> {
    let start = Instant::now();
    if opts.phases.is_empty() {
        return Err(Error::InvalidArgument("no phases selected".into()));
    }
    let by_id: BTreeMap<&str, &CaseRecord> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    if by_id.len() != cases.len() {
        return Err(Error::DuplicateCase("duplicate case id in cross-validation set".into()));
    }
    let labels: Vec<(String, bool)> = cases.iter().map(|c| (c.case_id.clone(), c.abnormal)).collect();
    let folds = make_folds(&labels, opts.k, opts.seed)?;
    let mut outcomes: BTreeMap<String, CaseOutcome> = BTreeMap::new();
    let mut logs = Vec::new();

    for (f, fold) in folds.iter().enumerate() {
        let train_cases: Vec<CaseRecord> = fold.train.iter().map(|id| by_id[id.as_str()].clone()).collect();
        for &phase in &opts.phases {
            let seg_cfg = SegNetConfig {
                seed: derive_seed(opts.seed, &[f as u64, phase as u64]),
                ..opts.seg.clone()
            };
            let vols = training_volumes(&train_cases, phase, &seg_cfg.window)?;
            let (model, seg_log) = train(&vols, &seg_cfg)?;
            progress(&format!(
                "fold {f} {phase}: segmentation trained ({} iters, {:.0}s, final loss {:.4})",
                seg_cfg.max_iters,
                seg_log.seconds,
                seg_log.losses.last().copied().unwrap_or(f64::NAN)
            ));

            let head = if opts.mode == CvMode::Clsnet {
                let samples = train_cases
                    .iter()
                    .map(|c| {
                        let pd = c.phase(phase)?;
                        let mask = pd.mask.as_ref().ok_or_else(|| {
                            Error::InvalidArgument(format!("case {} has no {phase} mask", c.case_id))
                        })?;
                        let roi = roi_from_mask(mask, opts.cls.roi_margin)?;
                        Ok(ClsSample {
                            features: extract_pool3_features(&model, &pd.volume, &roi)?,
                            label: c.abnormal as u8,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let cls_cfg = ClsConfig {
                    seed: derive_seed(opts.seed, &[0xC1, f as u64, phase as u64]),
                    ..opts.cls.clone()
                };
                let (h, log) = train_head(&samples, &cls_cfg)?;
                progress(&format!("fold {f} {phase}: classifier trained ({:.0}s)", log.seconds));
                Some((h, log))
            } else {
                None
            };

            for id in &fold.test {
                let case = by_id[id.as_str()];
                let pd = case.phase(phase)?;
                let pred = predict_volume(&model, &pd.volume, &opts.inference)?;
                let decision = classify_phase(&pred, &opts.post);
                let (kept, _, _) = retained_mask(&pred, &opts.post);
                let (pancreas_dsc, tumor_dsc) = match &pd.mask {
                    Some(truth) => case_dsc(&kept, truth)?,
                    None => (f64::NAN, f64::NAN),
                };
                let cls_probability = match &head {
                    Some((h, _)) => {
                        let roi = roi_or_whole(&pred, opts.cls.roi_margin);
                        Some(h.predict_proba(&extract_pool3_features(&model, &pd.volume, &roi)?)?)
                    }
                    None => None,
                };
                outcomes
                    .entry(id.clone())
                    .or_insert_with(|| CaseOutcome {
                        case_id: id.clone(),
                        abnormal: case.abnormal,
                        fold: f,
                        phases: BTreeMap::new(),
                    })
                    .phases
                    .insert(
                        phase,
                        PhaseOutcome {
                            decision,
                            pancreas_dsc,
                            tumor_dsc,
                            cls_probability,
                        },
                    );
            }
            progress(&format!("fold {f} {phase}: {} test cases predicted", fold.test.len()));
            logs.push(FoldLog {
                fold: f,
                phase,
                seg_log,
                cls_log: head.map(|(_, l)| l),
            });
        }
    }

    // Report cases in input order.
    let cases_out: Vec<CaseOutcome> = cases.iter().map(|c| outcomes.remove(&c.case_id).expect("every case tested")).collect();
    let s4c = s4c_reports(&cases_out, &opts.phases)?;
    let clsnet = match opts.mode {
        CvMode::Clsnet => Some(clsnet_reports(&cases_out, &opts.phases)?),
        CvMode::S4c => None,
    };
    Ok(CvReport {
        k: opts.k,
        seed: opts.seed,
        folds,
        s4c,
        clsnet,
        cases: cases_out,
        logs,
        seconds: start.elapsed().as_secs_f64(),
        notes: "DSC: case mean over test cases of retained predictions; rates pooled over all test folds".into(),
    })
}

fn pct_or_dash(v: Option<String>) -> String {
    v.map(|s| format!("{s}%")).unwrap_or_else(|| "-".into())
}

fn dsc_cell(s: &Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.2} +/- {:.2}", 100.0 * s.mean, 100.0 * s.std),
        None => "-".into(),
    }
}

/// Single-phase detection and segmentation table.
pub fn table1(reports: &MethodReports) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>9} {:>11} {:>9} {:>11} {:>18} {:>18} {:>18}",
        "Method", "Misses", "Sensitivity", "W.Calls", "Specificity", "N.Pancreas DSC", "A.Pancreas DSC", "Tumor DSC"
    );
    for r in reports.phases.values() {
        let _ = writeln!(
            out,
            "{:<18} {:>9} {:>11} {:>9} {:>11} {:>18} {:>18} {:>18}",
            r.name,
            format!("{}/{}", r.misses, r.n_abnormal),
            pct_or_dash(r.sensitivity_pct()),
            format!("{}/{}", r.wrong_calls, r.n_normal),
            pct_or_dash(r.specificity_pct()),
            dsc_cell(&r.dsc.normal_pancreas),
            dsc_cell(&r.dsc.abnormal_pancreas),
            dsc_cell(&r.dsc.tumor)
        );
    }
    out
}

/// Fused detection table, one row per method.
pub fn table2(rows: &[&EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:>9} {:>11} {:>9} {:>11}", "Method", "Misses", "Sensitivity", "W.Calls", "Specificity");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>9} {:>11} {:>9} {:>11}",
            r.name,
            format!("{}/{}", r.misses, r.n_abnormal),
            pct_or_dash(r.sensitivity_pct()),
            format!("{}/{}", r.wrong_calls, r.n_normal),
            pct_or_dash(r.specificity_pct())
        );
    }
    out
}

pub fn tables_text(report: &CvReport) -> String {
    let mut rows = vec![&report.s4c.fused];
    if let Some(c) = &report.clsnet {
        rows.push(&c.fused);
    }
    format!("{}\n{}", table1(&report.s4c), table2(&rows))
}
