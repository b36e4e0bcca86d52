//! BIDS dataset indexing and subject-grouped k-fold splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Key used for subjects scanned without a `ses-*` level.
pub const NO_SESSION: &str = "";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubjectRecord {
    /// Directory name, e.g. `sub-001`.
    pub subject_id: String,
    /// Sorted session names (`ses-01`, ...); [`NO_SESSION`] for flat layouts.
    pub session_ids: Vec<String>,
    pub angio_paths: BTreeMap<String, PathBuf>,
    pub label_paths: BTreeMap<String, PathBuf>,
    pub age_years: Option<u32>,
    pub sex: Option<Sex>,
}

impl SubjectRecord {
    pub fn label_path(&self, session: &str) -> Option<&Path> {
        self.label_paths.get(session).map(PathBuf::as_path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexOptions {
    /// Glob matched against file names inside `anat/`.
    pub angio_glob: String,
    /// Label tree, relative to the dataset root.
    pub labels_dir: PathBuf,
    pub participants_file: PathBuf,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            angio_glob: "*_angio.nii*".into(),
            labels_dir: PathBuf::from("derivatives/manual_masks"),
            participants_file: PathBuf::from("participants.tsv"),
        }
    }
}

pub fn index_dataset(root: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    index_dataset_with(root, &IndexOptions::default())
}

fn sorted_dir(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
    }
    out.sort();
    Ok(out)
}

fn is_nifti_name(name: &str) -> bool {
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// First file (lexicographic) in `dir` whose name satisfies `pred`.
fn first_matching(dir: &Path, pred: impl Fn(&str) -> bool) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let hits: Vec<_> = sorted_dir(dir)?
        .into_iter()
        .filter(|(n, p)| p.is_file() && pred(n))
        .collect();
    if hits.len() > 1 {
        log::warn!(
            "{} files match in {}; using {}",
            hits.len(),
            dir.display(),
            hits[0].0
        );
    }
    Ok(hits.into_iter().next().map(|(_, p)| p))
}

pub fn index_dataset_with(root: impl AsRef<Path>, opts: &IndexOptions) -> Result<Vec<SubjectRecord>> {
    let root = root.as_ref();
    let pattern = glob::Pattern::new(&opts.angio_glob)
        .map_err(|e| Error::InvalidArgument(format!("angio glob {:?}: {e}", opts.angio_glob)))?;
    let subject_dirs: Vec<(String, PathBuf)> = sorted_dir(root)?
        .into_iter()
        .filter(|(n, p)| n.starts_with("sub-") && p.is_dir())
        .collect();

    let mut records: Vec<SubjectRecord> = subject_dirs
        .par_iter()
        .map(|(sub, dir)| -> Result<Option<SubjectRecord>> {
            let mut rec = SubjectRecord {
                subject_id: sub.clone(),
                ..Default::default()
            };
            let mut session_dirs: Vec<(String, PathBuf)> = sorted_dir(dir)?
                .into_iter()
                .filter(|(n, p)| n.starts_with("ses-") && p.is_dir())
                .collect();
            if dir.join("anat").is_dir() {
                session_dirs.insert(0, (NO_SESSION.to_string(), dir.clone()));
            }
            for (ses, ses_dir) in session_dirs {
                let Some(angio) = first_matching(&ses_dir.join("anat"), |n| pattern.matches(n))? else {
                    continue;
                };
                let mut label_dir = root.join(&opts.labels_dir).join(sub);
                if ses != NO_SESSION {
                    label_dir.push(&ses);
                }
                label_dir.push("anat");
                if let Some(label) = first_matching(&label_dir, is_nifti_name)? {
                    rec.label_paths.insert(ses.clone(), label);
                }
                rec.angio_paths.insert(ses.clone(), angio);
                rec.session_ids.push(ses);
            }
            Ok((!rec.session_ids.is_empty()).then_some(rec))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));

    let participants = root.join(&opts.participants_file);
    if participants.is_file() {
        let demo = read_participants(&participants)?;
        for rec in &mut records {
            if let Some(&(age, sex)) = demo.get(&rec.subject_id) {
                rec.age_years = age;
                rec.sex = sex;
            }
        }
    }
    Ok(records)
}

/// Reads `participants.tsv`; rows with unparsable fields are skipped with a
/// warning.
pub fn read_participants(path: &Path) -> Result<BTreeMap<String, (Option<u32>, Option<Sex>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::csv(path.display(), e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path.display(), e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("participant_id")
        .ok_or_else(|| Error::parse(path.display(), "missing participant_id column"))?;
    let age_col = col("age");
    let sex_col = col("sex");
    let mut out = BTreeMap::new();
    for (line, row) in rdr.records().enumerate() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}: row {}: {e}; skipped", path.display(), line + 2);
                continue;
            }
        };
        let Some(id) = row.get(id_col).map(str::trim).filter(|s| !s.is_empty()) else {
            log::warn!("{}: row {} has no participant_id; skipped", path.display(), line + 2);
            continue;
        };
        let age = match age_col.and_then(|c| row.get(c)).map(str::trim) {
            None | Some("") | Some("n/a") => None,
            Some(s) => match s.parse::<f64>() {
                Ok(v) if v >= 0.0 => Some(v.floor() as u32),
                _ => {
                    log::warn!("{}: row {}: bad age {s:?}; skipped", path.display(), line + 2);
                    continue;
                }
            },
        };
        let sex = match sex_col.and_then(|c| row.get(c)).map(str::trim) {
            None | Some("") | Some("n/a") => None,
            Some("M") | Some("m") | Some("male") => Some(Sex::M),
            Some("F") | Some("f") | Some("female") => Some(Sex::F),
            Some(s) => {
                log::warn!("{}: row {}: bad sex {s:?}; skipped", path.display(), line + 2);
                continue;
            }
        };
        let id = if id.starts_with("sub-") {
            id.to_string()
        } else {
            format!("sub-{id}")
        };
        out.insert(id, (age, sex));
    }
    Ok(out)
}

/// Subject-level fold assignment; sessions inherit their subject's fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of_subject: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.fold_of_subject.get(subject).copied()
    }

    pub fn test_subjects(&self, fold: usize) -> Vec<&str> {
        self.fold_of_subject
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<&str> {
        self.fold_of_subject
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// `subject_id,fold` CSV with a header row, sorted by subject.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id,fold\n");
        for (s, f) in &self.fold_of_subject {
            out.push_str(&format!("{s},{f}\n"));
        }
        out
    }

    /// Imports a `subject_id,fold` CSV (ours or an external split).
    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut map = BTreeMap::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::csv(source, e))?;
            let (Some(s), Some(f)) = (row.get(0), row.get(1)) else {
                return Err(Error::parse(source, format!("row {}: expected subject_id,fold", i + 2)));
            };
            let fold: usize = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(source, format!("row {}: fold {f:?} is not an integer", i + 2)))?;
            if map.insert(s.trim().to_string(), fold).is_some() {
                return Err(Error::parse(source, format!("subject {s} listed twice")));
            }
        }
        let k = map.values().max().map_or(0, |m| m + 1);
        if k < 2 {
            return Err(Error::parse(source, "split needs at least two folds"));
        }
        Ok(Self { k, fold_of_subject: map })
    }
}

/// Shuffles subject ids (sorted first, then seeded Fisher–Yates) and deals
/// them round-robin into `k` folds.
pub fn grouped_kfold(subjects: &[SubjectRecord], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k}; need at least 2 folds")));
    }
    let mut ids: Vec<&str> = subjects.iter().map(|s| s.subject_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} subjects cannot fill {k} folds",
            ids.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    rng::fisher_yates(&mut ids, &mut rng);
    let fold_of_subject = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i % k))
        .collect();
    Ok(FoldAssignment { k, fold_of_subject })
}
