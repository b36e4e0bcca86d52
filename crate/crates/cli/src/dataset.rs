//! Scan discovery and per-scan inputs shared by several subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anevrix_core::bids::{index_dataset, read_participants, SubjectRecord};
use anevrix_core::nifti::read_nifti;
use anevrix_core::sampler::load_landmarks;
use anevrix_core::sliding_window::CandidateRecord;
use anevrix_core::unet::{HeuristicPredictor, OraclePredictor, PatchPredictor, UNetPredictor, WeightsBundle};
use anevrix_core::weak_labels::{load_annotations, sphere_labels, AneurysmAnnotation, AnnotationRecord};
use anevrix_core::Volume3D;

use crate::config::{PipelineConfig, PredictorChoice};
use crate::error::{invalid, CliError, CliResult};
use crate::manifest::RunLog;

/// One acquisition: a subject, optionally one of its sessions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScanId {
    pub subject: String,
    pub session: String,
}

impl ScanId {
    pub fn new(subject: impl Into<String>, session: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            session: session.into(),
        }
    }

    /// `sub-01` or `sub-01_ses-02`; used as the evaluation unit name.
    pub fn key(&self) -> String {
        if self.session.is_empty() {
            self.subject.clone()
        } else {
            format!("{}_{}", self.subject, self.session)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scan {
    pub id: ScanId,
    pub angio: PathBuf,
    pub label: Option<PathBuf>,
    pub age_years: Option<u32>,
}

pub fn scans_of(records: &[SubjectRecord]) -> Vec<Scan> {
    let mut out = Vec::new();
    for r in records {
        for (session, angio) in &r.angio_paths {
            out.push(Scan {
                id: ScanId::new(&r.subject_id, session),
                angio: angio.clone(),
                label: r.label_path(session).map(Path::to_path_buf),
                age_years: r.age_years,
            });
        }
    }
    out
}

pub fn index(config: &PipelineConfig, log: &mut RunLog) -> CliResult<(Vec<SubjectRecord>, Vec<Scan>)> {
    let root = config.require("dataset_root", &config.dataset_root)?;
    log.input(root);
    let records = index_dataset(root)?;
    if records.is_empty() {
        return Err(invalid(format!("dataset_root {}: no subjects with angiography found", root.display())));
    }
    let scans = scans_of(&records);
    Ok((records, scans))
}

pub fn read_volume(path: &Path) -> CliResult<Volume3D> {
    Ok(read_nifti(path)?.1)
}

/// Annotation records grouped by scan.
pub fn annotations_by_scan(path: &Path, log: &mut RunLog) -> CliResult<BTreeMap<ScanId, Vec<AnnotationRecord>>> {
    log.input(path);
    let mut out: BTreeMap<ScanId, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in load_annotations(path)? {
        out.entry(ScanId::new(&r.subject, &r.session)).or_default().push(r);
    }
    Ok(out)
}

pub fn optional_annotations(
    config: &PipelineConfig,
    log: &mut RunLog,
) -> CliResult<BTreeMap<ScanId, Vec<AnnotationRecord>>> {
    match &config.annotations {
        Some(p) => annotations_by_scan(p, log),
        None => Ok(BTreeMap::new()),
    }
}

pub fn plain(records: Option<&Vec<AnnotationRecord>>) -> Vec<AneurysmAnnotation> {
    records
        .map(|v| v.iter().map(|r| r.annotation.clone()).collect())
        .unwrap_or_default()
}

/// Landmarks from a shared CSV or a per-scan file inside a directory.
pub fn landmarks_for(config: &PipelineConfig, scan: &ScanId, log: &mut RunLog) -> CliResult<Vec<[f64; 3]>> {
    let base = config.require("landmarks", &config.landmarks)?;
    let path = if base.is_dir() {
        let candidates = [
            base.join(format!("{}_landmarks.csv", scan.key())),
            base.join(format!("{}_landmarks.csv", scan.subject)),
        ];
        candidates
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| invalid(format!("landmarks: no {}_landmarks.csv in {}", scan.key(), base.display())))?
    } else {
        base.to_path_buf()
    };
    log.input(&path);
    let lm = load_landmarks(&path)?;
    if lm.is_empty() {
        return Err(invalid(format!("{}: no landmarks", path.display())));
    }
    Ok(lm.iter().map(|l| l.position()).collect())
}

/// Predictor shared by all scans, or `None` when it is built per scan
/// (the oracle).
pub fn shared_predictor(config: &PipelineConfig, log: &mut RunLog) -> CliResult<Option<Box<dyn PatchPredictor>>> {
    Ok(match &config.predictor {
        PredictorChoice::Oracle => None,
        PredictorChoice::Heuristic(p) => Some(Box::new(HeuristicPredictor::new(*p)?)),
        PredictorChoice::UNet(manifest) => {
            let blob = WeightsBundle::blob_path_for(manifest);
            log.input(manifest);
            log.input(&blob);
            let weights = WeightsBundle::load(manifest, &blob)?;
            Some(Box::new(UNetPredictor::new(config.unet.clone(), weights)?))
        }
    })
}

/// Oracle for one scan: its label mask, else its annotation spheres.
pub fn oracle_for(scan: &Scan, volume: &Volume3D, annotations: &[AneurysmAnnotation]) -> CliResult<OraclePredictor> {
    let truth = match &scan.label {
        Some(p) => {
            let mask = read_volume(p)?;
            if mask.shape() != volume.shape() {
                return Err(invalid(format!(
                    "{}: label shape {:?} differs from angiography {:?}",
                    p.display(),
                    mask.shape(),
                    volume.shape()
                )));
            }
            mask
        }
        None => sphere_labels(annotations, volume)?,
    };
    Ok(OraclePredictor::for_volume(truth))
}

pub const SCANS_CSV_HEADER: &str = "subject,session";

pub fn scans_csv(ids: &[ScanId]) -> String {
    let mut out = format!("{SCANS_CSV_HEADER}\n");
    for id in ids {
        out.push_str(&format!("{},{}\n", id.subject, id.session));
    }
    out
}

/// Reads a `subject,session` list. Extra columns are ignored, so an
/// `index.csv` works too.
pub fn read_scans(path: &Path, log: &mut RunLog) -> CliResult<Vec<ScanId>> {
    log.input(path);
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let s = col("subject").ok_or_else(|| invalid(format!("{}: missing subject column", path.display())))?;
    let ses = col("session");
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| invalid(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        let subject = row.get(s).unwrap_or("").trim();
        if subject.is_empty() {
            return Err(invalid(format!("{}: row {}: empty subject", path.display(), i + 2)));
        }
        let session = ses.and_then(|c| row.get(c)).unwrap_or("").trim();
        out.push(ScanId::new(subject, session));
    }
    Ok(out)
}

/// Evaluation units: the union of listed scans, annotated scans and scans
/// with candidates, in sorted order.
pub fn evaluation_units(
    listed: &[ScanId],
    annotations: &BTreeMap<ScanId, Vec<AnnotationRecord>>,
    candidates: &[&[CandidateRecord]],
) -> Vec<ScanId> {
    let mut set: BTreeSet<ScanId> = listed.iter().cloned().collect();
    set.extend(annotations.keys().cloned());
    for cs in candidates {
        set.extend(cs.iter().map(|c| ScanId::new(&c.subject, &c.session)));
    }
    set.into_iter().collect()
}

pub fn candidates_by_scan(records: &[CandidateRecord]) -> BTreeMap<ScanId, Vec<anevrix_core::sliding_window::CandidateDetection>> {
    let mut out: BTreeMap<ScanId, Vec<_>> = BTreeMap::new();
    for r in records {
        out.entry(ScanId::new(&r.subject, &r.session)).or_default().push(r.candidate.clone());
    }
    out
}

/// Subject ages from `participants.tsv` under the dataset root, or an
/// explicit file.
pub fn ages(config: &PipelineConfig, explicit: Option<&Path>, log: &mut RunLog) -> CliResult<BTreeMap<String, u32>> {
    let path = match (explicit, &config.dataset_root) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(root)) => root.join("participants.tsv"),
        (None, None) => return Err(invalid("ages need --participants or dataset_root with participants.tsv")),
    };
    if !path.is_file() {
        return Err(invalid(format!("participants file {} does not exist", path.display())));
    }
    log.input(&path);
    Ok(read_participants(&path)?
        .into_iter()
        .filter_map(|(id, (age, _))| age.map(|a| (id, a)))
        .collect())
}
