//! One function per subcommand. Each returns the log of files it read and
//! wrote; `main` turns that into the run manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anevrix_core::bids::{grouped_kfold, FoldAssignment};
use anevrix_core::evaluation::{
    auc_froc, froc, fp_rate, match_detections, outcomes_csv, sensitivity, wilcoxon_signed_rank, wilson_ci,
    DetectionOutcome, FrocCurve, SubjectDetections, WilcoxonMethod,
};
use anevrix_core::nifti::{gzip, write_nifti, Datatype, NiftiHeader};
use anevrix_core::phases::{
    classify, collect_lesions, eligibility, phases_partial_score, review_list, stratification_csv, stratify,
    LesionStatus, StratAxis,
};
use anevrix_core::rng;
use anevrix_core::sampler::{sample_negative, sample_positive, PatchSpec};
use anevrix_core::sliding_window::{detect, load_candidates, write_candidates_csv, CandidateRecord};
use anevrix_core::synth::{generate_cohort, write_dataset};
use anevrix_core::unet::WeightsBundle;
use anevrix_core::weak_labels::{sphere_labels, weaken_components, write_annotations_csv, AnnotationRecord};
use anevrix_core::{Affine4x4, Grid3, Volume3D};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::dataset::{self, Scan, ScanId};
use crate::error::{invalid, CliError, CliResult};
use crate::manifest::RunLog;
use crate::svg::froc_svg;

fn out_path(config: &PipelineConfig, name: impl AsRef<Path>) -> PathBuf {
    config.output_dir.join(name)
}

fn json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

pub fn index(config: &PipelineConfig) -> CliResult<RunLog> {
    let mut log = RunLog::default();
    let (_, scans) = dataset::index(config, &mut log)?;
    let mut out = String::from("subject,session,angio,label,age\n");
    for s in &scans {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.id.subject,
            s.id.session,
            s.angio.display(),
            s.label.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            s.age_years.map(|a| a.to_string()).unwrap_or_default()
        );
    }
    log.write(out_path(config, "index.csv"), out)?;
    info!("indexed {} scans", scans.len());
    Ok(log)
}

pub fn split(config: &PipelineConfig, import: Option<&Path>) -> CliResult<RunLog> {
    let mut log = RunLog::default();
    let (records, _) = dataset::index(config, &mut log)?;
    let folds = match import {
        Some(p) => {
            log.input(p);
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let f = FoldAssignment::from_csv(&text, &p.display().to_string())?;
            for r in &records {
                if f.fold_of(&r.subject_id).is_none() {
                    return Err(invalid(format!("{}: subject {} has no fold", p.display(), r.subject_id)));
                }
            }
            f
        }
        None => grouped_kfold(&records, config.folds, config.seed)?,
    };
    log.write(out_path(config, "folds.csv"), folds.to_csv())?;
    Ok(log)
}

pub fn weaken(config: &PipelineConfig, write_masks: bool) -> CliResult<RunLog> {
    let mut log = RunLog::default();
    let (_, scans) = dataset::index(config, &mut log)?;
    let labelled: Vec<&Scan> = scans.iter().filter(|s| s.label.is_some()).collect();
    if labelled.is_empty() {
        return Err(invalid("weaken: no scan has a voxel-wise label mask"));
    }
    for s in &labelled {
        log.input(s.label.clone().expect("filtered"));
    }
    let results: Vec<(Vec<AnnotationRecord>, Option<(PathBuf, Vec<u8>)>)> = labelled
        .par_iter()
        .map(|s| -> CliResult<_> {
            let mask = dataset::read_volume(s.label.as_ref().expect("filtered"))?;
            let anns = weaken_components(&mask, config.weaken_margin_mm, &s.id.key())?;
            let file = if write_masks {
                let weak = sphere_labels(&anns, &mask)?;
                let bytes = gzip(&write_nifti(&NiftiHeader::for_volume(&weak, Datatype::Uint8), &weak)?)?;
                Some((out_path(config, format!("weak_masks/{}_weak.nii.gz", s.id.key())), bytes))
            } else {
                None
            };
            let records = anns
                .into_iter()
                .map(|annotation| AnnotationRecord {
                    subject: s.id.subject.clone(),
                    session: s.id.session.clone(),
                    annotation,
                    extracranial: false,
                })
                .collect();
            Ok((records, file))
        })
        .collect::<CliResult<_>>()?;
    let mut all = Vec::new();
    for (records, file) in results {
        all.extend(records);
        if let Some((path, bytes)) = file {
            log.write(path, bytes)?;
        }
    }
    info!("weakened {} lesions from {} masks", all.len(), labelled.len());
    log.write(out_path(config, "annotations_weak.csv"), write_annotations_csv(&all))?;
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PatchExport {
    None,
    Nifti,
    Tensor,
}

struct ScanPatches {
    id: ScanId,
    rows: Vec<(String, String, PatchSpec)>,
    shortfall: anevrix_core::sampler::Shortfall,
    /// (name, image, label) when exporting.
    grids: Vec<(String, Grid3, Grid3)>,
    affine: Affine4x4,
    spacing: [f64; 3],
}

fn patch_volume(grid: &Grid3, spec: &PatchSpec, affine: &Affine4x4, spacing: [f64; 3]) -> CliResult<Volume3D> {
    let shift = Affine4x4::diagonal([1.0; 3], spec.origin.map(|o| o as f64));
    Ok(Volume3D::new(grid.shape, spacing, affine.compose(&shift), grid.data.clone())?)
}

pub fn sample(config: &PipelineConfig, export: PatchExport) -> CliResult<RunLog> {
    let mut log = RunLog::default();
    let (_, scans) = dataset::index(config, &mut log)?;
    let ann_path = config.require("annotations", &config.annotations)?;
    let annotations = dataset::annotations_by_scan(ann_path, &mut log)?;
    let landmarks: Vec<Vec<[f64; 3]>> = scans
        .iter()
        .map(|s| dataset::landmarks_for(config, &s.id, &mut log))
        .collect::<CliResult<_>>()?;
    let side = config.patch_side;
    let per_scan: Vec<ScanPatches> = scans
        .par_iter()
        .zip(&landmarks)
        .map(|(s, lm)| -> CliResult<ScanPatches> {
            let volume = dataset::read_volume(&s.angio)?;
            let anns = dataset::plain(annotations.get(&s.id));
            let key = s.id.key();
            let mut r = rng::keyed(config.seed, &key);
            let mut rows = Vec::new();
            for a in &anns {
                for spec in sample_positive(&volume, a, config.sampling.n_pos_per_aneurysm, side, &key, &mut r)? {
                    rows.push(("positive".to_string(), a.lesion_id.clone(), spec));
                }
            }
            let neg = sample_negative(&volume, lm, &anns, &config.sampling, side, &key, &mut r)?;
            for (kind, specs) in [("landmark", &neg.landmark), ("vessel", &neg.vessel), ("random", &neg.random)] {
                rows.extend(specs.iter().map(|spec| (format!("negative_{kind}"), String::new(), spec.clone())));
            }
            let mut grids = Vec::new();
            if export != PatchExport::None {
                let truth = sphere_labels(&anns, &volume)?;
                for (k, (kind, _, spec)) in rows.iter().enumerate() {
                    grids.push((format!("{kind}_{k:03}"), spec.extract(&volume), spec.extract(&truth)));
                }
            }
            Ok(ScanPatches {
                id: s.id.clone(),
                rows,
                shortfall: neg.shortfall,
                grids,
                affine: *volume.affine(),
                spacing: volume.spacing(),
            })
        })
        .collect::<CliResult<_>>()?;

    let mut csv = String::from("subject,session,kind,lesion_id,origin_x,origin_y,origin_z,side\n");
    let mut shortfalls = String::from("subject,session,landmark,vessel,random\n");
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for p in &per_scan {
        for (kind, lesion, spec) in &p.rows {
            let [x, y, z] = spec.origin;
            let _ = writeln!(csv, "{},{},{kind},{lesion},{x},{y},{z},{}", p.id.subject, p.id.session, spec.side);
        }
        let sf = &p.shortfall;
        let _ = writeln!(shortfalls, "{},{},{},{},{}", p.id.subject, p.id.session, sf.landmark, sf.vessel, sf.random);
        if !sf.is_empty() {
            log::warn!("{}: negative shortfall {:?}", p.id.key(), sf);
        }
        for ((name, image, label), (_, _, spec)) in p.grids.iter().zip(&p.rows) {
            match export {
                PatchExport::Nifti => {
                    for (suffix, grid, dt) in [("image", image, Datatype::Float32), ("label", label, Datatype::Uint8)] {
                        let v = patch_volume(grid, spec, &p.affine, p.spacing)?;
                        let bytes = gzip(&write_nifti(&NiftiHeader::for_volume(&v, dt), &v)?)?;
                        log.write(out_path(config, format!("patches/{}/{name}_{suffix}.nii.gz", p.id.key())), bytes)?;
                    }
                }
                PatchExport::Tensor => {
                    let shape = vec![side, side, side];
                    tensors.push((format!("{}/{name}/image", p.id.key()), shape.clone(), image.data.clone()));
                    tensors.push((format!("{}/{name}/label", p.id.key()), shape, label.data.clone()));
                }
                PatchExport::None => {}
            }
        }
    }
    if export == PatchExport::Tensor {
        let bundle = WeightsBundle::from_tensors(tensors)?;
        log.write(out_path(config, "patches.txt"), bundle.manifest_text())?;
        log.write(out_path(config, "patches.bin"), bundle.blob_bytes())?;
    }
    log.write(out_path(config, "patches.csv"), csv)?;
    log.write(out_path(config, "shortfall.csv"), shortfalls)?;
    Ok(log)
}

pub fn infer(config: &PipelineConfig, save_probability: bool) -> CliResult<RunLog> {
    let mut log = RunLog::default();
    let (_, scans) = dataset::index(config, &mut log)?;
    let annotations = dataset::optional_annotations(config, &mut log)?;
    let landmarks: Vec<Vec<[f64; 3]>> = scans
        .iter()
        .map(|s| dataset::landmarks_for(config, &s.id, &mut log))
        .collect::<CliResult<_>>()?;
    let shared = dataset::shared_predictor(config, &mut log)?;
    let side = config.patch_side;
    let results: Vec<(Vec<CandidateRecord>, (usize, usize), Option<Vec<u8>>)> = scans
        .par_iter()
        .zip(&landmarks)
        .map(|(s, lm)| -> CliResult<_> {
            let volume = dataset::read_volume(&s.angio)?;
            let oracle;
            let predictor: &dyn anevrix_core::unet::PatchPredictor = match &shared {
                Some(p) => p.as_ref(),
                None => {
                    oracle = dataset::oracle_for(s, &volume, &dataset::plain(annotations.get(&s.id)))?;
                    &oracle
                }
            };
            let det = detect(&volume, lm, predictor, &config.retention, side, &s.id.key())?;
            let prob = if save_probability {
                Some(gzip(&write_nifti(
                    &NiftiHeader::for_volume(&det.probability, Datatype::Float32),
                    &det.probability,
                )?)?)
            } else {
                None
            };
            let records = det
                .candidates
                .into_iter()
                .map(|candidate| CandidateRecord {
                    subject: s.id.subject.clone(),
                    session: s.id.session.clone(),
                    candidate,
                })
                .collect();
            Ok((records, (det.enumerated, det.retained.len()), prob))
        })
        .collect::<CliResult<_>>()?;

    let mut all = Vec::new();
    let mut retention = String::from("subject,session,enumerated,retained\n");
    for (s, (records, (n, kept), prob)) in scans.iter().zip(results) {
        let _ = writeln!(retention, "{},{},{n},{kept}", s.id.subject, s.id.session);
        info!("{}: kept {kept}/{n} patches, {} candidates", s.id.key(), records.len());
        all.extend(records);
        if let Some(bytes) = prob {
            log.write(out_path(config, format!("probability/{}_prob.nii.gz", s.id.key())), bytes)?;
        }
    }
    let ids: Vec<ScanId> = scans.iter().map(|s| s.id.clone()).collect();
    log.write(out_path(config, "candidates.csv"), write_candidates_csv(&all))?;
    log.write(out_path(config, "scans.csv"), dataset::scans_csv(&ids))?;
    log.write(out_path(config, "retention.csv"), retention)?;
    Ok(log)
}

/// Per-unit detections for one candidate set, renamed to unit keys.
fn unit_detections(
    units: &[ScanId],
    candidates: &[CandidateRecord],
    annotations: &BTreeMap<ScanId, Vec<AnnotationRecord>>,
) -> Vec<SubjectDetections> {
    let by_scan = dataset::candidates_by_scan(candidates);
    units
        .iter()
        .map(|u| SubjectDetections {
            subject: u.key(),
            candidates: by_scan.get(u).cloned().unwrap_or_default(),
            annotations: dataset::plain(annotations.get(u)),
        })
        .collect()
}

fn listed_units(scans: Option<&Path>, config: &PipelineConfig, log: &mut RunLog) -> CliResult<Vec<ScanId>> {
    match (scans, &config.dataset_root) {
        (Some(p), _) => dataset::read_scans(p, log),
        (None, Some(_)) => Ok(dataset::index(config, log)?.1.into_iter().map(|s| s.id).collect()),
        (None, None) => Ok(Vec::new()),
    }
}

fn load_candidate_file(path: &Path, log: &mut RunLog) -> CliResult<Vec<CandidateRecord>> {
    log.input(path);
    let c = load_candidates(path)?;
    if let Some(bad) = c.iter().find(|r| !(0.0..=1.0).contains(&r.candidate.score)) {
        return Err(invalid(format!(
            "{}: candidate {} of {} has score {} outside [0, 1]",
            path.display(),
            bad.candidate.component_id,
            bad.subject,
            bad.candidate.score
        )));
    }
    Ok(c)
}

#[derive(Debug, Serialize)]
struct WilsonReport {
    confidence: f64,
    lower: f64,
    upper: f64,
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    subjects: usize,
    annotations: usize,
    tp: usize,
    fp: usize,
    fn_count: usize,
    sensitivity: Option<f64>,
    fp_rate: f64,
    wilson: Option<WilsonReport>,
    fp_max: f64,
    auc_froc: f64,
}

pub fn evaluate(config: &PipelineConfig, candidates: &Path, scans: Option<&Path>) -> CliResult<RunLog> {
    let mut log = RunLog::default();
    let cands = load_candidate_file(candidates, &mut log)?;
    let ann_path = config.require("annotations", &config.annotations)?;
    let annotations = dataset::annotations_by_scan(ann_path, &mut log)?;
    let listed = listed_units(scans, config, &mut log)?;
    let units = dataset::evaluation_units(&listed, &annotations, &[&cands]);
    if units.is_empty() {
        return Err(invalid("evaluate: no subjects to evaluate"));
    }
    let subjects = unit_detections(&units, &cands, &annotations);
    let outcomes: Vec<DetectionOutcome> = subjects
        .par_iter()
        .map(|s| match_detections(&s.subject, &s.candidates, &s.annotations, config.matching))
        .collect();
    let curve = froc(&subjects, None, config.matching)?;
    let total: usize = outcomes.iter().map(|o| o.annotations()).sum();
    let tp: usize = outcomes.iter().map(|o| o.tp()).sum();
    let wilson = if total > 0 {
        let w = wilson_ci(tp as u64, total as u64, config.confidence)?;
        Some(WilsonReport {
            confidence: config.confidence,
            lower: w.lower,
            upper: w.upper,
        })
    } else {
        None
    };
    let report = EvaluationReport {
        subjects: outcomes.len(),
        annotations: total,
        tp,
        fp: outcomes.iter().map(|o| o.fp()).sum(),
        fn_count: outcomes.iter().map(|o| o.fn_count()).sum(),
        sensitivity: (total > 0).then(|| sensitivity(&outcomes)).transpose()?,
        fp_rate: fp_rate(&outcomes)?,
        wilson,
        fp_max: config.fp_max,
        auc_froc: auc_froc(&curve, config.fp_max)?,
    };
    log.write(out_path(config, "outcomes.csv"), outcomes_csv(&outcomes))?;
    log.write(out_path(config, "froc.csv"), curve.to_csv())?;
    log.write(out_path(config, "froc.svg"), froc_svg(&[("detector", &curve)], config.fp_max))?;
    log.write(out_path(config, "stats.json"), json(&report))?;
    println!(
        "sensitivity {}/{} fp/subject {:.3} auc@{} {:.4}",
        report.tp, report.annotations, report.fp_rate, config.fp_max, report.auc_froc
    );
    Ok(log)
}

#[derive(Debug, Serialize)]
struct ModelSummary {
    name: String,
    auc_froc: f64,
    final_sensitivity: f64,
    final_avg_fp: f64,
}

#[derive(Debug, Serialize)]
struct Comparison {
    a: String,
    b: String,
    /// Per-subject AUC pairs with a nonzero difference.
    n: usize,
    w: Option<f64>,
    p: Option<f64>,
    note: Option<String>,
}

#[derive(Debug, Serialize)]
struct FrocReport {
    fp_max: f64,
    models: Vec<ModelSummary>,
    comparison: Option<Comparison>,
}

fn parse_named(spec: &str) -> CliResult<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => {
            if !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(invalid(format!("--candidates: name {n:?} must be alphanumeric, '-' or '_'")));
            }
            Ok((n.to_string(), PathBuf::from(p)))
        }
        None if !spec.is_empty() => {
            let p = PathBuf::from(spec);
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
            Ok((name, p))
        }
        _ => Err(invalid(format!("--candidates: expected name=path or path, got {spec:?}"))),
    }
}

pub fn froc_cmd(config: &PipelineConfig, specs: &[String], scans: Option<&Path>) -> CliResult<RunLog> {
    let mut log = RunLog::default();
    let named: Vec<(String, PathBuf)> = specs.iter().map(|s| parse_named(s)).collect::<CliResult<_>>()?;
    for (i, (n, _)) in named.iter().enumerate() {
        if named[..i].iter().any(|(m, _)| m == n) {
            return Err(invalid(format!("--candidates: model name {n} used twice")));
        }
    }
    let sets: Vec<Vec<CandidateRecord>> = named
        .iter()
        .map(|(_, p)| load_candidate_file(p, &mut log))
        .collect::<CliResult<_>>()?;
    let ann_path = config.require("annotations", &config.annotations)?;
    let annotations = dataset::annotations_by_scan(ann_path, &mut log)?;
    let listed = listed_units(scans, config, &mut log)?;
    let refs: Vec<&[CandidateRecord]> = sets.iter().map(Vec::as_slice).collect();
    let units = dataset::evaluation_units(&listed, &annotations, &refs);
    if units.is_empty() {
        return Err(invalid("froc: no subjects to evaluate"));
    }

    let mut curves: Vec<FrocCurve> = Vec::new();
    let mut per_subject_auc: Vec<Vec<f64>> = Vec::new();
    let mut models = Vec::new();
    for ((name, _), set) in named.iter().zip(&sets) {
        let subjects = unit_detections(&units, set, &annotations);
        let curve = froc(&subjects, None, config.matching)?;
        let aucs = subjects
            .iter()
            .map(|s| auc_froc(&froc(std::slice::from_ref(s), None, config.matching)?, config.fp_max))
            .collect::<anevrix_core::Result<Vec<f64>>>()?;
        let last = curve.points.last().copied();
        models.push(ModelSummary {
            name: name.clone(),
            auc_froc: auc_froc(&curve, config.fp_max)?,
            final_sensitivity: last.map_or(0.0, |p| p.sensitivity),
            final_avg_fp: last.map_or(0.0, |p| p.avg_fp),
        });
        log.write(out_path(config, format!("froc_{name}.csv")), curve.to_csv())?;
        curves.push(curve);
        per_subject_auc.push(aucs);
    }
    let comparison = (named.len() == 2).then(|| {
        let (a, b) = (&per_subject_auc[0], &per_subject_auc[1]);
        let n = a.iter().zip(b).filter(|(x, y)| x != y).count();
        let (w, p, note) = match wilcoxon_signed_rank(a, b, WilcoxonMethod::Normal) {
            Ok(r) => (Some(r.w), Some(r.p), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        Comparison {
            a: named[0].0.clone(),
            b: named[1].0.clone(),
            n,
            w,
            p,
            note,
        }
    });
    let labelled: Vec<(&str, &FrocCurve)> = named.iter().map(|(n, _)| n.as_str()).zip(&curves).collect();
    log.write(out_path(config, "froc.svg"), froc_svg(&labelled, config.fp_max))?;
    let mut per_subject = String::from("subject");
    for (n, _) in &named {
        let _ = write!(per_subject, ",auc_{n}");
    }
    per_subject.push('\n');
    for (i, u) in units.iter().enumerate() {
        per_subject.push_str(&u.key());
        for aucs in &per_subject_auc {
            let _ = write!(per_subject, ",{}", aucs[i]);
        }
        per_subject.push('\n');
    }
    log.write(out_path(config, "froc_subject_auc.csv"), per_subject)?;
    log.write(
        out_path(config, "froc_report.json"),
        json(&FrocReport {
            fp_max: config.fp_max,
            models,
            comparison,
        }),
    )?;
    Ok(log)
}

fn lesions_csv(lesions: &[LesionStatus]) -> CliResult<String> {
    let mut out = String::from("subject,lesion_id,detected,age,location,size_mm,eligible,score,risk_group\n");
    for l in lesions {
        let input = l.phases_input()?;
        let eligible = eligibility(&input);
        let score = if eligible { phases_partial_score(&input)?.to_string() } else { String::new() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            l.subject,
            l.lesion_id,
            l.detected,
            input.age_years,
            input.location.as_str(),
            l.size_mm,
            eligible,
            score,
            classify(&input)?.as_str()
        );
    }
    Ok(out)
}

pub fn phases(
    config: &PipelineConfig,
    candidates: &Path,
    participants: Option<&Path>,
    axes: &[StratAxis],
) -> CliResult<RunLog> {
    let mut log = RunLog::default();
    let cands = load_candidate_file(candidates, &mut log)?;
    let ann_path = config.require("annotations", &config.annotations)?;
    let annotations = dataset::annotations_by_scan(ann_path, &mut log)?;
    let subject_ages = dataset::ages(config, participants, &mut log)?;
    let units: Vec<ScanId> = annotations.keys().cloned().collect();
    let subjects = unit_detections(&units, &cands, &annotations);
    let outcomes: Vec<DetectionOutcome> = subjects
        .iter()
        .map(|s| match_detections(&s.subject, &s.candidates, &s.annotations, config.matching))
        .collect();
    // Records and ages keyed by evaluation unit, matching the outcomes.
    let records: Vec<AnnotationRecord> = annotations
        .iter()
        .flat_map(|(id, rs)| {
            rs.iter().map(move |r| AnnotationRecord {
                subject: id.key(),
                ..r.clone()
            })
        })
        .collect();
    let ages: HashMap<String, u32> = units
        .iter()
        .filter_map(|u| subject_ages.get(&u.subject).map(|&a| (u.key(), a)))
        .collect();
    let lesions = collect_lesions(&outcomes, &records, &ages)?;
    let tables = axes.iter().map(|&a| stratify(&lesions, a)).collect::<anevrix_core::Result<Vec<_>>>()?;
    let mut review = String::from("subject,lesion_id,score\n");
    for (l, s) in review_list(&lesions)? {
        let _ = writeln!(review, "{},{},{s}", l.subject, l.lesion_id);
    }
    log.write(out_path(config, "lesions.csv"), lesions_csv(&lesions)?)?;
    log.write(out_path(config, "stratification.csv"), stratification_csv(&tables))?;
    log.write(out_path(config, "review.csv"), review)?;
    Ok(log)
}

pub fn synth(config: &PipelineConfig) -> CliResult<RunLog> {
    let mut log = RunLog::default();
    let s = &config.synth;
    let subjects = generate_cohort(&s.to_core(), s.patients, s.controls, config.seed)?;
    write_dataset(&config.output_dir, &subjects)?;
    for sub in &subjects {
        let id = &sub.subject_id;
        log.outputs.push(out_path(config, format!("{id}/anat/{id}_angio.nii.gz")));
        log.outputs.push(out_path(config, format!("derivatives/manual_masks/{id}/anat/{id}_mask.nii.gz")));
        log.outputs.push(out_path(config, format!("landmarks/{id}_landmarks.csv")));
    }
    log.outputs.push(out_path(config, "annotations.csv"));
    log.outputs.push(out_path(config, "participants.tsv"));
    info!("wrote {} synthetic subjects to {}", subjects.len(), config.output_dir.display());
    Ok(log)
}
