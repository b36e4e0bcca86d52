//! Partial PHASES rupture-risk score (age, location, size) and
//! sensitivity broken down by risk group, location and size.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{chi_squared, ChiSquaredResult, DetectionOutcome};
use crate::weak_labels::{AnnotationRecord, LesionShape, Location};

/// Highest partial score still counted as low risk.
pub const LOW_RISK_MAX: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasesInput {
    pub age_years: u32,
    pub location: Location,
    pub size_mm: f64,
    pub shape: LesionShape,
    pub extracranial_carotid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskGroup {
    LowRisk,
    MediumRisk,
    Excluded,
}

impl RiskGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::LowRisk => "low_risk",
            RiskGroup::MediumRisk => "medium_risk",
            RiskGroup::Excluded => "excluded",
        }
    }
}

/// Fusiform and extracranial carotid lesions are not scored.
pub fn eligibility(input: &PhasesInput) -> bool {
    input.shape != LesionShape::Fusiform && !input.extracranial_carotid
}

fn age_points(age: u32) -> u32 {
    if age >= 70 {
        1
    } else {
        0
    }
}

fn location_points(location: Location) -> u32 {
    match location {
        Location::Ica => 0,
        Location::Mca => 2,
        Location::AcaPcomPosterior => 4,
    }
}

fn size_points(size_mm: f64) -> u32 {
    match SizeBin::of(size_mm) {
        SizeBin::Below7 => 0,
        SizeBin::From7To10 => 3,
        SizeBin::From10To20 => 6,
        SizeBin::AtLeast20 => 10,
    }
}

pub fn phases_partial_score(input: &PhasesInput) -> Result<u32> {
    if !eligibility(input) {
        return Err(Error::InvalidArgument("lesion is excluded from PHASES scoring".into()));
    }
    if !(input.size_mm > 0.0 && input.size_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!("lesion size {} mm must be positive", input.size_mm)));
    }
    Ok(age_points(input.age_years) + location_points(input.location) + size_points(input.size_mm))
}

pub fn risk_group(score: u32) -> RiskGroup {
    if score <= LOW_RISK_MAX {
        RiskGroup::LowRisk
    } else {
        RiskGroup::MediumRisk
    }
}

/// Risk group of a lesion, `Excluded` when ineligible.
pub fn classify(input: &PhasesInput) -> Result<RiskGroup> {
    if !eligibility(input) {
        return Ok(RiskGroup::Excluded);
    }
    phases_partial_score(input).map(risk_group)
}

/// Scores sitting on the low/medium boundary get a second look.
pub fn needs_review(score: u32) -> bool {
    score == LOW_RISK_MAX || score == LOW_RISK_MAX + 1
}

/// Left-closed size classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBin {
    Below7,
    From7To10,
    From10To20,
    AtLeast20,
}

impl SizeBin {
    pub const ALL: [Self; 4] = [Self::Below7, Self::From7To10, Self::From10To20, Self::AtLeast20];

    pub fn of(size_mm: f64) -> Self {
        if size_mm < 7.0 {
            Self::Below7
        } else if size_mm < 10.0 {
            Self::From7To10
        } else if size_mm < 20.0 {
            Self::From10To20
        } else {
            Self::AtLeast20
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Below7 => "<7",
            Self::From7To10 => "7-9.9",
            Self::From10To20 => "10-19.9",
            Self::AtLeast20 => ">=20",
        }
    }
}

/// Small-lesion classes: `<=3`, `(3,5]`, `(5,7)` mm. Larger lesions have none.
pub fn fine_size_label(size_mm: f64) -> Option<&'static str> {
    if size_mm <= 3.0 {
        Some("<=3")
    } else if size_mm <= 5.0 {
        Some("3-5")
    } else if size_mm < 7.0 {
        Some("5-7")
    } else {
        None
    }
}

const FINE_LABELS: [&str; 3] = ["<=3", "3-5", "5-7"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratAxis {
    Risk,
    Location,
    Size,
    FineSize,
}

impl StratAxis {
    pub const ALL: [Self; 4] = [Self::Risk, Self::Location, Self::Size, Self::FineSize];

    pub fn as_str(self) -> &'static str {
        match self {
            StratAxis::Risk => "risk",
            StratAxis::Location => "location",
            StratAxis::Size => "size",
            StratAxis::FineSize => "fine_size",
        }
    }
}

impl fmt::Display for StratAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StratAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stratification axis {s:?}")))
    }
}

/// One reference lesion with its detection status and the attributes the
/// axes need.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionStatus {
    pub subject: String,
    pub lesion_id: String,
    pub detected: bool,
    pub age_years: Option<u32>,
    pub location: Option<Location>,
    pub size_mm: f64,
    pub shape: LesionShape,
    pub extracranial_carotid: bool,
}

impl LesionStatus {
    pub fn phases_input(&self) -> Result<PhasesInput> {
        let missing = |what: &str| {
            Error::InvalidArgument(format!("lesion {}/{} has no {what}", self.subject, self.lesion_id))
        };
        Ok(PhasesInput {
            age_years: self.age_years.ok_or_else(|| missing("age"))?,
            location: self.location.ok_or_else(|| missing("location"))?,
            size_mm: self.size_mm,
            shape: self.shape,
            extracranial_carotid: self.extracranial_carotid,
        })
    }
}

/// Joins outcomes with annotation records (by subject and lesion id) and
/// subject ages. Every annotation in the outcomes must have a record.
pub fn collect_lesions(
    outcomes: &[DetectionOutcome],
    records: &[AnnotationRecord],
    ages: &HashMap<String, u32>,
) -> Result<Vec<LesionStatus>> {
    let by_key: HashMap<(&str, &str), &AnnotationRecord> = records
        .iter()
        .map(|r| ((r.subject.as_str(), r.annotation.lesion_id.as_str()), r))
        .collect();
    let mut out = Vec::new();
    for o in outcomes {
        let detected = o.matches.iter().map(|m| (&m.annotation, true));
        let missed = o.false_negatives.iter().map(|a| (a, false));
        for (a, hit) in detected.chain(missed) {
            let rec = by_key
                .get(&(o.subject.as_str(), a.lesion_id.as_str()))
                .ok_or_else(|| Error::InvalidArgument(format!("no annotation record for {}/{}", o.subject, a.lesion_id)))?;
            out.push(LesionStatus {
                subject: o.subject.clone(),
                lesion_id: a.lesion_id.clone(),
                detected: hit,
                age_years: ages.get(&o.subject).copied(),
                location: rec.annotation.location,
                size_mm: rec.annotation.max_diameter,
                shape: rec.annotation.shape,
                extracranial_carotid: rec.extracranial,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratRow {
    pub group: String,
    pub tp: usize,
    pub total: usize,
    /// `None` for empty groups.
    pub sensitivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stratification {
    pub axis: StratAxis,
    pub rows: Vec<StratRow>,
    /// Independence test over detected/missed × non-empty groups; `None`
    /// when fewer than two groups are populated.
    pub test: Option<ChiSquaredResult>,
}

fn group_of(lesion: &LesionStatus, axis: StratAxis) -> Result<Option<String>> {
    Ok(match axis {
        StratAxis::Risk => {
            let input = lesion.phases_input()?;
            match classify(&input)? {
                RiskGroup::Excluded => None,
                g => Some(g.as_str().to_string()),
            }
        }
        StratAxis::Location => Some(
            lesion
                .location
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("lesion {}/{} has no location", lesion.subject, lesion.lesion_id))
                })?
                .as_str()
                .to_string(),
        ),
        StratAxis::Size => Some(SizeBin::of(lesion.size_mm).label().to_string()),
        StratAxis::FineSize => fine_size_label(lesion.size_mm).map(str::to_string),
    })
}

fn axis_groups(axis: StratAxis) -> Vec<&'static str> {
    match axis {
        StratAxis::Risk => vec![RiskGroup::LowRisk.as_str(), RiskGroup::MediumRisk.as_str()],
        StratAxis::Location => Location::ALL.iter().map(|l| l.as_str()).collect(),
        StratAxis::Size => SizeBin::ALL.iter().map(|b| b.label()).collect(),
        StratAxis::FineSize => FINE_LABELS.to_vec(),
    }
}

/// Per-group detection counts along one axis, with a chi-squared test.
pub fn stratify(lesions: &[LesionStatus], axis: StratAxis) -> Result<Stratification> {
    let groups = axis_groups(axis);
    let mut tp = vec![0usize; groups.len()];
    let mut total = vec![0usize; groups.len()];
    for l in lesions {
        let Some(g) = group_of(l, axis)? else { continue };
        let k = groups.iter().position(|&x| x == g).expect("group belongs to axis");
        total[k] += 1;
        tp[k] += l.detected as usize;
    }
    let rows: Vec<StratRow> = groups
        .iter()
        .enumerate()
        .map(|(k, g)| StratRow {
            group: g.to_string(),
            tp: tp[k],
            total: total[k],
            sensitivity: (total[k] > 0).then(|| tp[k] as f64 / total[k] as f64),
        })
        .collect();
    let populated: Vec<&StratRow> = rows.iter().filter(|r| r.total > 0).collect();
    let test = if populated.len() < 2 {
        None
    } else {
        let hits: Vec<f64> = populated.iter().map(|r| r.tp as f64).collect();
        let misses: Vec<f64> = populated.iter().map(|r| (r.total - r.tp) as f64).collect();
        if hits.iter().all(|&v| v == 0.0) || misses.iter().all(|&v| v == 0.0) {
            // Identical sensitivities in every group: independence holds exactly.
            Some(ChiSquaredResult { statistic: 0.0, dof: populated.len() - 1, p: 1.0 })
        } else {
            Some(chi_squared(&[hits, misses])?)
        }
    };
    Ok(Stratification { axis, rows, test })
}

pub fn stratification_csv(tables: &[Stratification]) -> String {
    let mut out = String::from("axis,group,tp,total,sensitivity\n");
    for t in tables {
        for r in &t.rows {
            let sens = r.sensitivity.map(|s| format!("{s:.4}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", t.axis, r.group, r.tp, r.total, sens);
        }
        match &t.test {
            Some(c) => {
                let _ = writeln!(out, "# {} chi2={:.4} dof={} p={:.6}", t.axis, c.statistic, c.dof, c.p);
            }
            None => {
                let _ = writeln!(out, "# {} chi2 skipped (fewer than two populated groups)", t.axis);
            }
        }
    }
    out
}

/// Eligible lesions whose partial score sits on the risk boundary.
pub fn review_list(lesions: &[LesionStatus]) -> Result<Vec<(&LesionStatus, u32)>> {
    let mut out = Vec::new();
    for l in lesions {
        let input = l.phases_input()?;
        if !eligibility(&input) {
            continue;
        }
        let s = phases_partial_score(&input)?;
        if needs_review(s) {
            out.push((l, s));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(age: u32, location: Location, size: f64) -> PhasesInput {
        PhasesInput {
            age_years: age,
            location,
            size_mm: size,
            shape: LesionShape::Saccular,
            extracranial_carotid: false,
        }
    }

    #[test]
    fn score_rows() {
        assert_eq!(phases_partial_score(&input(50, Location::Ica, 4.0)).unwrap(), 0);
        assert_eq!(phases_partial_score(&input(71, Location::Mca, 8.0)).unwrap(), 6);
        assert_eq!(phases_partial_score(&input(69, Location::Ica, 4.0)).unwrap(), 0);
        assert_eq!(phases_partial_score(&input(70, Location::Ica, 4.0)).unwrap(), 1);
        assert_eq!(phases_partial_score(&input(30, Location::AcaPcomPosterior, 25.0)).unwrap(), 14);
        assert_eq!(phases_partial_score(&input(30, Location::Ica, 10.0)).unwrap(), 6);
        assert_eq!(phases_partial_score(&input(30, Location::Ica, 9.99)).unwrap(), 3);
        assert!(phases_partial_score(&input(30, Location::Ica, 0.0)).is_err());
    }

    #[test]
    fn score_is_monotone() {
        for loc in Location::ALL {
            let mut prev = 0;
            for s in 1..300 {
                let v = phases_partial_score(&input(40, loc, s as f64 / 10.0)).unwrap();
                assert!(v >= prev);
                prev = v;
            }
            let mut prev = 0;
            for age in 0..100 {
                let v = phases_partial_score(&input(age, loc, 5.0)).unwrap();
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn groups_and_eligibility() {
        assert_eq!(risk_group(4), RiskGroup::LowRisk);
        assert_eq!(risk_group(5), RiskGroup::MediumRisk);
        assert_eq!(risk_group(0), RiskGroup::LowRisk);
        let fus = PhasesInput { shape: LesionShape::Fusiform, ..input(50, Location::Ica, 4.0) };
        assert!(!eligibility(&fus));
        assert_eq!(classify(&fus).unwrap(), RiskGroup::Excluded);
        assert!(phases_partial_score(&fus).is_err());
        assert!(eligibility(&input(50, Location::Ica, 4.0)));
        let extra = PhasesInput { extracranial_carotid: true, ..input(50, Location::Ica, 4.0) };
        assert!(!eligibility(&extra));
        assert!(needs_review(4) && needs_review(5) && !needs_review(3) && !needs_review(6));
    }

    #[test]
    fn bins() {
        assert_eq!(SizeBin::of(6.99), SizeBin::Below7);
        assert_eq!(SizeBin::of(7.0), SizeBin::From7To10);
        assert_eq!(SizeBin::of(20.0), SizeBin::AtLeast20);
        assert_eq!(fine_size_label(3.0), Some("<=3"));
        assert_eq!(fine_size_label(3.01), Some("3-5"));
        assert_eq!(fine_size_label(5.0), Some("3-5"));
        assert_eq!(fine_size_label(6.9), Some("5-7"));
        assert_eq!(fine_size_label(7.0), None);
    }

    fn lesion(i: usize, detected: bool, location: Option<Location>, size: f64) -> LesionStatus {
        LesionStatus {
            subject: format!("s{i}"),
            lesion_id: format!("l{i}"),
            detected,
            age_years: Some(50),
            location,
            size_mm: size,
            shape: LesionShape::Saccular,
            extracranial_carotid: false,
        }
    }

    #[test]
    fn single_group_skips_test() {
        let ls: Vec<_> = (0..5).map(|i| lesion(i, i % 2 == 0, Some(Location::Ica), 4.0)).collect();
        let t = stratify(&ls, StratAxis::Risk).unwrap();
        assert_eq!(t.rows.iter().filter(|r| r.total > 0).count(), 1);
        assert!(t.test.is_none());
    }

    #[test]
    fn equal_sensitivities_give_zero_statistic() {
        let mut ls = Vec::new();
        for i in 0..10 {
            ls.push(lesion(i, i < 6, Some(Location::Ica), 4.0));
            ls.push(lesion(100 + i, i < 6, Some(Location::Mca), 4.0));
        }
        let t = stratify(&ls, StratAxis::Location).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows.iter().map(|r| r.group.as_str()).collect::<Vec<_>>(), vec!["ICA", "MCA", "ACA_Pcom_Posterior"]);
        let c = t.test.unwrap();
        assert!(c.statistic.abs() < 1e-12);
        assert_eq!(c.dof, 1);
    }

    #[test]
    fn totals_and_missing_attributes() {
        let ls: Vec<_> = (0..12)
            .map(|i| lesion(i, i % 3 != 0, Some(Location::ALL[i % 3]), 2.0 + 2.0 * i as f64))
            .collect();
        for axis in [StratAxis::Location, StratAxis::Size] {
            let t = stratify(&ls, axis).unwrap();
            assert_eq!(t.rows.iter().map(|r| r.total).sum::<usize>(), ls.len());
        }
        let small = ls.iter().filter(|l| l.size_mm < 7.0).count();
        let fine = stratify(&ls, StratAxis::FineSize).unwrap();
        assert_eq!(fine.rows.iter().map(|r| r.total).sum::<usize>(), small);
        let mut bad = ls.clone();
        bad[0].location = None;
        assert!(stratify(&bad, StratAxis::Location).is_err());
        assert!(stratify(&bad, StratAxis::Size).is_ok());
        bad[1].age_years = None;
        assert!(stratify(&bad, StratAxis::Risk).is_err());
    }

    #[test]
    fn excluded_never_enter_risk() {
        let mut ls: Vec<_> = (0..4).map(|i| lesion(i, true, Some(Location::Mca), 12.0)).collect();
        ls[0].shape = LesionShape::Fusiform;
        ls[1].extracranial_carotid = true;
        let t = stratify(&ls, StratAxis::Risk).unwrap();
        assert_eq!(t.rows.iter().map(|r| r.total).sum::<usize>(), 2);
    }

    #[test]
    fn csv_layout() {
        let ls: Vec<_> = (0..4).map(|i| lesion(i, i < 2, Some(Location::Ica), 4.0 + 4.0 * i as f64)).collect();
        let t = stratify(&ls, StratAxis::Size).unwrap();
        let csv = stratification_csv(&[t]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("axis,group,tp,total,sensitivity"));
        assert_eq!(lines.next(), Some("size,<7,1,1,1.0000"));
        assert!(csv.lines().last().unwrap().starts_with("# size chi2="));
    }
}
