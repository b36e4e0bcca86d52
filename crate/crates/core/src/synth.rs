//! Synthetic angiography fixtures: a bright straight vessel with spherical
//! lesions attached next to landmark points, plus a lesion-free vessel in
//! the opposite corner.
//!
//! Both vessels run along x. The first one's y and z offsets stay clear of
//! the 32-voxel tiling boundaries so that, on the default 128³ grid with
//! 0.5 mm voxels, each lesion lies inside a patch whose center is within
//! 15 mm of the lesion's landmark.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::affine::Affine4x4;
use crate::error::{Error, Result};
use crate::nifti::save_volume;
use crate::rng::{self, fisher_yates, uniform_below, uniform_unit};
use crate::sampler::{write_landmarks_csv, Landmark};
use crate::volume::{paint_sphere, Volume3D};
use crate::weak_labels::{write_annotations_csv, AneurysmAnnotation, AnnotationRecord, LesionShape, Location};

pub const VESSEL_PEAK: f32 = 200.0;
pub const VESSEL_EDGE: f32 = 100.0;
pub const LESION_INTENSITY: f32 = 120.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub shape: [usize; 3],
    pub spacing: f64,
    /// World position of voxel (0, 0, 0).
    pub origin: [f64; 3],
    pub vessel_radius_mm: f64,
    /// Inclusive range of lesions per subject.
    pub lesions: (usize, usize),
    /// Lesion diameter range in mm.
    pub diameter_mm: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: [128; 3],
            spacing: 0.5,
            origin: [-32.0; 3],
            vessel_radius_mm: 1.5,
            lesions: (1, 3),
            diameter_mm: (3.0, 8.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 64) {
            return Err(Error::InvalidArgument(format!("synthetic volumes need every side >= 64, got {:?}", self.shape)));
        }
        if !(self.spacing > 0.0) || !(self.vessel_radius_mm > 0.0) {
            return Err(Error::InvalidArgument("spacing and vessel radius must be positive".into()));
        }
        if self.lesions.0 > self.lesions.1 || self.lesions.1 > 3 {
            return Err(Error::InvalidArgument(format!("lesion count range {:?} must lie within 0..=3", self.lesions)));
        }
        if !(self.diameter_mm.0 > 0.0 && self.diameter_mm.0 <= self.diameter_mm.1) {
            return Err(Error::InvalidArgument(format!("bad diameter range {:?}", self.diameter_mm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub subject_id: String,
    pub age_years: u32,
    pub volume: Volume3D,
    pub mask: Volume3D,
    pub annotations: Vec<AneurysmAnnotation>,
    pub landmarks: Vec<Landmark>,
}

fn uniform_range<R: rand::RngCore>(r: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform_unit(r)
}

/// Generates one subject; `lesions_override` forces the lesion count (e.g. 0
/// for a control).
pub fn generate_subject(
    config: &SynthConfig,
    subject_id: &str,
    seed: u64,
    lesions_override: Option<usize>,
) -> Result<SynthSubject> {
    config.validate()?;
    let mut r = rng::keyed(seed, subject_id);
    let [nx, ny, nz] = config.shape;
    let h = config.spacing;
    let affine = Affine4x4::diagonal([h; 3], config.origin);

    // Axis offsets in [0.36, 0.39] of the side: 46..50 voxels on a 128 grid.
    let y0 = ny as f64 * uniform_range(&mut r, 0.36, 0.39);
    let z0 = nz as f64 * uniform_range(&mut r, 0.36, 0.39);
    let radius_vox = config.vessel_radius_mm / h;

    let axes = [(y0, z0), (ny as f64 * 0.85, nz as f64 * 0.85)];
    let mut voxels = vec![0.0f32; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            let rr = axes
                .iter()
                .map(|&(ay, az)| ((y as f64 - ay).powi(2) + (z as f64 - az).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if rr > radius_vox {
                continue;
            }
            let v = VESSEL_EDGE + (VESSEL_PEAK - VESSEL_EDGE) * (1.0 - (rr / radius_vox) as f32);
            let row = nx * (y + ny * z);
            voxels[row..row + nx].fill(v);
        }
    }
    let mut volume = Volume3D::new(config.shape, [h; 3], affine, voxels)?;
    let mut mask = volume.zeros_like();

    let count = match lesions_override {
        Some(n) => n.min(3),
        None => config.lesions.0 + uniform_below(&mut r, (config.lesions.1 - config.lesions.0 + 1) as u64) as usize,
    };
    let mut slots = [0.25, 0.5, 0.75];
    fisher_yates(&mut slots, &mut r);
    let mut annotations = Vec::new();
    let mut landmarks = Vec::new();
    for (i, &frac) in slots.iter().enumerate() {
        let x = nx as f64 * frac - 0.5 + uniform_range(&mut r, -6.0, 6.0);
        let anchor = volume.voxel_to_world([x, y0, z0]);
        landmarks.push(Landmark {
            landmark_id: format!("L{}", i + 1),
            label: format!("vessel-{}", i + 1),
            x_mm: anchor[0],
            y_mm: anchor[1],
            z_mm: anchor[2],
        });
        if i >= count {
            continue;
        }
        let diameter = uniform_range(&mut r, config.diameter_mm.0, config.diameter_mm.1);
        let radius = diameter / 2.0;
        let offset = config.vessel_radius_mm + 0.25 * radius;
        let mut center = anchor;
        let axis = 1 + uniform_below(&mut r, 2) as usize;
        let sign = if uniform_below(&mut r, 2) == 0 { 1.0 } else { -1.0 };
        center[axis] += sign * offset;
        paint_sphere(&mut mask, center, radius)?;
        let location = Location::ALL[uniform_below(&mut r, 3) as usize];
        annotations.push(AneurysmAnnotation {
            lesion_id: format!("{subject_id}-A{}", i + 1),
            center,
            radius,
            shape: LesionShape::Saccular,
            location: Some(location),
            max_diameter: diameter,
        });
    }
    // An off-vessel landmark in a dark corner exercises the intensity rule.
    let corner = volume.voxel_to_world([nx as f64 * 0.8, ny as f64 * 0.15, nz as f64 * 0.85]);
    landmarks.push(Landmark {
        landmark_id: "L4".into(),
        label: "off-vessel".into(),
        x_mm: corner[0],
        y_mm: corner[1],
        z_mm: corner[2],
    });

    for (v, m) in volume.voxels_mut().iter_mut().zip(mask.voxels()) {
        if *m > 0.5 {
            *v = v.max(LESION_INTENSITY);
        }
    }
    let age_years = 30 + uniform_below(&mut r, 56) as u32;
    Ok(SynthSubject {
        subject_id: subject_id.to_string(),
        age_years,
        volume,
        mask,
        annotations,
        landmarks,
    })
}

/// `n_patients` subjects with lesions followed by `n_controls` without.
pub fn generate_cohort(config: &SynthConfig, n_patients: usize, n_controls: usize, seed: u64) -> Result<Vec<SynthSubject>> {
    (0..n_patients + n_controls)
        .map(|i| {
            let id = format!("sub-{:03}", i + 1);
            let lesions = (i >= n_patients).then_some(0);
            generate_subject(config, &id, seed, lesions)
        })
        .collect()
}

/// Writes a BIDS-style tree under `root`:
/// `sub-*/anat/*_angio.nii.gz`, `derivatives/manual_masks/sub-*/anat/*_mask.nii.gz`,
/// `landmarks/sub-*_landmarks.csv`, `annotations.csv` and `participants.tsv`.
pub fn write_dataset(root: &Path, subjects: &[SynthSubject]) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let mut records = Vec::new();
    let mut participants = String::from("participant_id\tage\tsex\n");
    mkdir(&root.join("landmarks"))?;
    for s in subjects {
        let anat = root.join(&s.subject_id).join("anat");
        mkdir(&anat)?;
        save_volume(anat.join(format!("{}_angio.nii.gz", s.subject_id)), &s.volume)?;
        let labels = root.join("derivatives/manual_masks").join(&s.subject_id).join("anat");
        mkdir(&labels)?;
        save_volume(labels.join(format!("{}_mask.nii.gz", s.subject_id)), &s.mask)?;
        let lm = root.join("landmarks").join(format!("{}_landmarks.csv", s.subject_id));
        fs::write(&lm, write_landmarks_csv(&s.landmarks)).map_err(|e| Error::io(&lm, e))?;
        let sex = if s.age_years % 2 == 0 { "F" } else { "M" };
        let _ = writeln!(participants, "{}\t{}\t{}", s.subject_id, s.age_years, sex);
        records.extend(s.annotations.iter().map(|a| AnnotationRecord {
            subject: s.subject_id.clone(),
            session: String::new(),
            annotation: a.clone(),
            extracranial: false,
        }));
    }
    let ann = root.join("annotations.csv");
    fs::write(&ann, write_annotations_csv(&records)).map_err(|e| Error::io(&ann, e))?;
    let part = root.join("participants.tsv");
    fs::write(&part, participants).map_err(|e| Error::io(&part, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::{connected_components, Connectivity};

    #[test]
    fn subject_is_deterministic_and_consistent() {
        let cfg = SynthConfig::default();
        let a = generate_subject(&cfg, "sub-001", 5, None).unwrap();
        let b = generate_subject(&cfg, "sub-001", 5, None).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.annotations, b.annotations);
        assert!((1..=3).contains(&a.annotations.len()));
        assert_eq!(a.landmarks.len(), 4);
        let comps = connected_components(&a.mask, Connectivity::TwentySix);
        assert_eq!(comps.len(), a.annotations.len());
        for ann in &a.annotations {
            assert!((3.0..=8.0).contains(&ann.max_diameter));
            let idx = a.volume.world_to_index(ann.center).unwrap().unwrap();
            assert_eq!(a.mask.get(idx[0], idx[1], idx[2]), 1.0);
            assert!(a.volume.get(idx[0], idx[1], idx[2]) >= LESION_INTENSITY);
        }
    }

    #[test]
    fn controls_have_no_lesions() {
        let s = generate_subject(&SynthConfig::default(), "sub-009", 1, Some(0)).unwrap();
        assert!(s.annotations.is_empty());
        assert_eq!(s.mask.foreground_count(), 0);
        assert!(s.volume.voxels().iter().any(|&v| v > 0.9 * VESSEL_PEAK));
    }

    #[test]
    fn rejects_small_grids() {
        let cfg = SynthConfig { shape: [32, 128, 128], ..Default::default() };
        assert!(generate_subject(&cfg, "s", 0, None).is_err());
    }

    #[test]
    fn dataset_layout_indexes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { shape: [64; 3], lesions: (1, 1), ..Default::default() };
        let subjects = generate_cohort(&cfg, 2, 1, 3).unwrap();
        write_dataset(dir.path(), &subjects).unwrap();
        let idx = crate::bids::index_dataset(dir.path()).unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.iter().all(|s| s.label_path("").is_some() && s.age_years.is_some()));
        let anns = crate::weak_labels::load_annotations(&dir.path().join("annotations.csv")).unwrap();
        assert_eq!(anns.len(), 2);
    }
}
