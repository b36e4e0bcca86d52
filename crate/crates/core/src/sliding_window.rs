//! Whole-volume inference: tile, keep anatomically plausible patches,
//! predict with test-time augmentation, average overlaps, extract blobs.

use std::cmp::Ordering;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::GeometricTransform;
use crate::components::{connected_components, Connectivity};
use crate::error::{Error, Result};
use crate::sampler::{PatchSpec, VesselCriterion};
use crate::unet::{PatchInput, PatchPredictor};
use crate::volume::{center_of_mass, zscore, Grid3, Volume3D};

/// Patches predicted concurrently before merging into the accumulator.
const MERGE_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetentionConfig {
    /// Patch centers farther than this (mm) from every landmark are dropped.
    pub max_landmark_distance: f64,
    pub stride: usize,
    pub vessel_intensity_percentile: f64,
    pub vessel_min_bright_voxels: usize,
    pub tta_enabled: bool,
    pub threshold: f64,
    pub max_candidates: usize,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        let v = VesselCriterion::default();
        Self {
            max_landmark_distance: 15.0,
            stride: 32,
            vessel_intensity_percentile: v.intensity_percentile,
            vessel_min_bright_voxels: v.min_bright_voxels,
            tta_enabled: true,
            threshold: 0.5,
            max_candidates: 5,
        }
    }
}

impl RetentionConfig {
    pub fn vessel_criterion(&self) -> VesselCriterion {
        VesselCriterion {
            intensity_percentile: self.vessel_intensity_percentile,
            min_bright_voxels: self.vessel_min_bright_voxels,
        }
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        if self.stride == 0 || self.stride > side {
            return Err(Error::InvalidArgument(format!("stride {} must lie in 1..={side}", self.stride)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        if self.max_candidates == 0 {
            return Err(Error::InvalidArgument("max_candidates must be at least 1".into()));
        }
        if !(self.max_landmark_distance >= 0.0) {
            return Err(Error::InvalidArgument("max_landmark_distance must be non-negative".into()));
        }
        self.vessel_criterion().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDetection {
    /// Probability-weighted center of mass, world mm.
    pub center: [f64; 3],
    /// Highest probability inside the blob.
    pub score: f64,
    pub voxel_count: usize,
    pub component_id: usize,
}

fn axis_origins(n: usize, side: usize, stride: usize) -> Vec<i64> {
    if n <= side {
        return vec![0];
    }
    let mut out: Vec<i64> = (0..).map(|k| k * stride).take_while(|&o| o + side < n).map(|o| o as i64).collect();
    out.push((n - side) as i64);
    out
}

/// Regular tiling at multiples of `stride`; the last origin on each axis is
/// clamped so the patch ends on the volume edge. Order is x-fastest.
pub fn enumerate_patches(volume: &Volume3D, side: usize, stride: usize, volume_ref: &str) -> Result<Vec<PatchSpec>> {
    if side == 0 || stride == 0 {
        return Err(Error::InvalidArgument("side and stride must be positive".into()));
    }
    let shape = volume.shape();
    let [ox, oy, oz] = [0, 1, 2].map(|a| axis_origins(shape[a], side, stride));
    let mut out = Vec::with_capacity(ox.len() * oy.len() * oz.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                out.push(PatchSpec::new([x, y, z], side, volume_ref));
            }
        }
    }
    Ok(out)
}

/// Keeps specs whose world center lies within the landmark distance and that
/// pass the vessel-intensity rule. Order is preserved.
pub fn retain_anatomical(
    specs: &[PatchSpec],
    landmarks: &[[f64; 3]],
    volume: &Volume3D,
    config: &RetentionConfig,
) -> Result<Vec<PatchSpec>> {
    if landmarks.is_empty() {
        return Err(Error::Empty("landmark list"));
    }
    let counter = config.vessel_criterion().counter(volume);
    let max2 = config.max_landmark_distance * config.max_landmark_distance;
    Ok(specs
        .iter()
        .filter(|s| {
            let c = s.center_world(volume);
            let near = landmarks.iter().any(|l| {
                let d2: f64 = (0..3).map(|a| (c[a] - l[a]).powi(2)).sum();
                d2 <= max2
            });
            near && counter.passes(s)
        })
        .cloned()
        .collect())
}

fn check_prediction(out: &Grid3, shape: [usize; 3], name: &str) -> Result<()> {
    if out.shape != shape {
        return Err(Error::Shape(format!(
            "predictor {name} returned {:?} for a {:?} patch",
            out.shape, shape
        )));
    }
    if let Some(v) = out.data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
        return Err(Error::InvalidArgument(format!("predictor {name} produced {v} outside [0, 1]")));
    }
    Ok(())
}

/// Mean of predictions over the six TTA transforms, each mapped back to the
/// input frame.
pub fn tta_predict(patch: &Grid3, spec: Option<&PatchSpec>, predictor: &dyn PatchPredictor) -> Result<Grid3> {
    if !patch.is_cubic() {
        return Err(Error::Shape(format!("TTA needs a cubic patch, got {:?}", patch.shape)));
    }
    let mut acc = vec![0.0f64; patch.len()];
    for t in GeometricTransform::TTA_SET {
        let moved = t.apply(patch)?;
        let pred = predictor.predict(&PatchInput { data: &moved, spec, transform: t })?;
        check_prediction(&pred, patch.shape, predictor.name())?;
        let back = t.inverse().apply(&pred)?;
        for (a, v) in acc.iter_mut().zip(&back.data) {
            *a += *v as f64;
        }
    }
    let n = GeometricTransform::TTA_SET.len() as f64;
    Grid3::new(patch.shape, acc.into_iter().map(|v| (v / n) as f32).collect())
}

fn predict_patch(volume: &Volume3D, spec: &PatchSpec, predictor: &dyn PatchPredictor, tta: bool) -> Result<Grid3> {
    let raw = spec.extract(volume);
    let patch = Grid3::new(raw.shape, zscore(&raw.data))?;
    if tta {
        tta_predict(&patch, Some(spec), predictor)
    } else {
        let out = predictor.predict(&PatchInput {
            data: &patch,
            spec: Some(spec),
            transform: GeometricTransform::Identity,
        })?;
        check_prediction(&out, patch.shape, predictor.name())?;
        Ok(out)
    }
}

/// Per-voxel mean of all overlapping patch predictions; uncovered voxels
/// are 0. Patches are z-scored before prediction and merged in spec order.
pub fn predict_volume(
    volume: &Volume3D,
    predictor: &dyn PatchPredictor,
    specs: &[PatchSpec],
    tta: bool,
) -> Result<Volume3D> {
    let shape = volume.shape();
    for s in specs {
        s.validate(shape)?;
    }
    let mut sum = vec![0.0f64; volume.len()];
    let mut count = vec![0u32; volume.len()];
    for chunk in specs.chunks(MERGE_CHUNK) {
        let preds: Vec<Grid3> = chunk
            .par_iter()
            .map(|s| predict_patch(volume, s, predictor, tta))
            .collect::<Result<_>>()?;
        for (spec, pred) in chunk.iter().zip(&preds) {
            merge(&mut sum, &mut count, shape, spec, pred);
        }
    }
    let probs = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect();
    volume.with_voxels(probs)
}

fn merge(sum: &mut [f64], count: &mut [u32], shape: [usize; 3], spec: &PatchSpec, pred: &Grid3) {
    let s = spec.side as i64;
    let [ox, oy, oz] = spec.origin;
    for z in 0..s {
        let vz = oz + z;
        if vz < 0 || vz >= shape[2] as i64 {
            continue;
        }
        for y in 0..s {
            let vy = oy + y;
            if vy < 0 || vy >= shape[1] as i64 {
                continue;
            }
            for x in 0..s {
                let vx = ox + x;
                if vx < 0 || vx >= shape[0] as i64 {
                    continue;
                }
                let dst = (vx as usize) + shape[0] * (vy as usize + shape[1] * vz as usize);
                sum[dst] += pred.get(x as usize, y as usize, z as usize) as f64;
                count[dst] += 1;
            }
        }
    }
}

/// 26-connected blobs of `prob >= threshold`, in component order.
pub fn extract_candidates(prob: &Volume3D, threshold: f64) -> Result<Vec<CandidateDetection>> {
    let mask = prob.with_voxels(
        prob.voxels()
            .iter()
            .map(|&p| if p as f64 >= threshold { 1.0 } else { 0.0 })
            .collect(),
    )?;
    connected_components(&mask, Connectivity::TwentySix)
        .iter()
        .enumerate()
        .map(|(id, comp)| {
            let score = comp
                .voxels
                .iter()
                .map(|v| prob.get(v[0], v[1], v[2]) as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(CandidateDetection {
                center: center_of_mass(comp, Some(prob.voxels()), prob)?,
                score: score.clamp(0.0, 1.0),
                voxel_count: comp.voxels.len(),
                component_id: id,
            })
        })
        .collect()
}

fn rank(a: &CandidateDetection, b: &CandidateDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.voxel_count.cmp(&a.voxel_count))
        .then(a.component_id.cmp(&b.component_id))
}

/// The `k` best candidates by score, then size, then lower component id.
pub fn top_k(candidates: &[CandidateDetection], k: usize) -> Vec<CandidateDetection> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(rank);
    sorted.truncate(k);
    sorted
}

/// Everything one inference run produces for a scan.
#[derive(Debug, Clone)]
pub struct Detection {
    pub enumerated: usize,
    pub retained: Vec<PatchSpec>,
    pub probability: Volume3D,
    pub candidates: Vec<CandidateDetection>,
}

/// Tiling, retention, prediction, aggregation and top-k for one volume.
pub fn detect(
    volume: &Volume3D,
    landmarks: &[[f64; 3]],
    predictor: &dyn PatchPredictor,
    config: &RetentionConfig,
    side: usize,
    volume_ref: &str,
) -> Result<Detection> {
    config.validate(side)?;
    let all = enumerate_patches(volume, side, config.stride, volume_ref)?;
    let retained = retain_anatomical(&all, landmarks, volume, config)?;
    let probability = predict_volume(volume, predictor, &retained, config.tta_enabled)?;
    let candidates = top_k(&extract_candidates(&probability, config.threshold)?, config.max_candidates);
    Ok(Detection {
        enumerated: all.len(),
        retained,
        probability,
        candidates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub subject: String,
    pub session: String,
    pub candidate: CandidateDetection,
}

pub const CANDIDATE_CSV_HEADER: &str = "subject,session,candidate_id,x_mm,y_mm,z_mm,score,voxel_count";

pub fn write_candidates_csv(records: &[CandidateRecord]) -> String {
    let mut out = String::from(CANDIDATE_CSV_HEADER);
    out.push('\n');
    for r in records {
        let c = &r.candidate;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.subject, r.session, c.component_id, c.center[0], c.center[1], c.center[2], c.score, c.voxel_count
        ));
    }
    out
}

#[derive(Deserialize)]
struct CandidateRow {
    subject: String,
    #[serde(default)]
    session: String,
    candidate_id: usize,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
    score: f64,
    voxel_count: usize,
}

pub fn read_candidates_csv(reader: impl Read, source: &str) -> Result<Vec<CandidateRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<CandidateRow>().enumerate() {
        let r = row.map_err(|e| Error::csv(source, e))?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::parse(source, format!("line {}: score {} outside [0, 1]", i + 2, r.score)));
        }
        out.push(CandidateRecord {
            subject: r.subject,
            session: r.session,
            candidate: CandidateDetection {
                center: [r.x_mm, r.y_mm, r.z_mm],
                score: r.score,
                voxel_count: r.voxel_count,
                component_id: r.candidate_id,
            },
        });
    }
    Ok(out)
}

pub fn load_candidates(path: &Path) -> Result<Vec<CandidateRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_candidates_csv(f, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::unet::{HeuristicPredictor, OraclePredictor};

    struct Constant(f32);

    impl PatchPredictor for Constant {
        fn predict(&self, input: &PatchInput<'_>) -> Result<Grid3> {
            Ok(Grid3::filled(input.data.shape, self.0))
        }
        fn name(&self) -> &str {
            "constant"
        }
    }

    /// Returns 1 on patches whose origin x is 0, else 0.
    struct ByOrigin;

    impl PatchPredictor for ByOrigin {
        fn predict(&self, input: &PatchInput<'_>) -> Result<Grid3> {
            let v = if input.spec.unwrap().origin[0] == 0 { 0.0 } else { 1.0 };
            Ok(Grid3::filled(input.data.shape, v))
        }
        fn name(&self) -> &str {
            "by-origin"
        }
    }

    fn vol(shape: [usize; 3]) -> Volume3D {
        let mut r = rng::seeded(1);
        let n = shape.iter().product();
        Volume3D::with_spacing(shape, [1.0; 3], [0.0; 3], (0..n).map(|_| rng::uniform_unit(&mut r) as f32).collect())
            .unwrap()
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(enumerate_patches(&vol([64; 3]), 64, 32, "v").unwrap().len(), 1);
        let specs = enumerate_patches(&vol([128; 3]), 64, 32, "v").unwrap();
        assert_eq!(specs.len(), 27);
        assert_eq!(specs.last().unwrap().origin, [64, 64, 64]);
        assert_eq!(axis_origins(100, 64, 32), vec![0, 32, 36]);
        assert_eq!(axis_origins(20, 64, 32), vec![0]);
    }

    #[test]
    fn tiling_covers_every_voxel() {
        let mut r = rng::seeded(2);
        for _ in 0..30 {
            let shape = [0; 3].map(|_| 1 + rng::uniform_below(&mut r, 40) as usize);
            let side = 8 + rng::uniform_below(&mut r, 12) as usize;
            let stride = 1 + rng::uniform_below(&mut r, side as u64) as usize;
            let v = Volume3D::zeros(shape, [1.0; 3], crate::Affine4x4::identity()).unwrap();
            let specs = enumerate_patches(&v, side, stride, "v").unwrap();
            let mut covered = vec![false; v.len()];
            for s in &specs {
                for z in 0..shape[2] {
                    for y in 0..shape[1] {
                        for x in 0..shape[0] {
                            if s.contains([x as i64, y as i64, z as i64]) {
                                covered[v.index(x, y, z)] = true;
                            }
                        }
                    }
                }
            }
            assert!(covered.iter().all(|&c| c), "shape {shape:?} side {side} stride {stride}");
        }
    }

    fn bright_volume() -> Volume3D {
        Volume3D::with_spacing([32; 3], [1.0; 3], [0.0; 3], (0..32usize.pow(3)).map(|i| (i % 101) as f32 + 1.0).collect())
            .unwrap()
    }

    #[test]
    fn retention_filters() {
        let v = bright_volume();
        let cfg = RetentionConfig { vessel_min_bright_voxels: 1, ..Default::default() };
        let specs = enumerate_patches(&v, 16, 8, "v").unwrap();
        let center = specs[0].center_world(&v);
        let kept = retain_anatomical(&specs, &[center], &v, &cfg).unwrap();
        assert!(kept.contains(&specs[0]));
        assert!(kept.iter().all(|s| specs.contains(s)));
        assert_eq!(retain_anatomical(&kept, &[center], &v, &cfg).unwrap(), kept);
        assert!(retain_anatomical(&specs, &[[1e4, 0.0, 0.0]], &v, &cfg).unwrap().is_empty());
        assert!(retain_anatomical(&specs, &[], &v, &cfg).is_err());
        // dark volume: nothing passes the intensity rule
        let dark = Volume3D::with_spacing([32; 3], [1.0; 3], [0.0; 3], vec![0.0; 32usize.pow(3)]).unwrap();
        assert!(retain_anatomical(&specs, &[center], &dark, &cfg).unwrap().is_empty());
    }

    #[test]
    fn tta_constant_and_reference() {
        let g = vol([8; 3]).to_grid();
        let out = tta_predict(&g, None, &Constant(0.3)).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let h = HeuristicPredictor::new(70.0).unwrap();
        let got = tta_predict(&g, None, &h).unwrap();
        let mut want = vec![0.0f64; g.len()];
        for t in GeometricTransform::TTA_SET {
            let p = h.predict(&PatchInput::plain(&t.apply(&g).unwrap())).unwrap();
            for (w, v) in want.iter_mut().zip(t.inverse().apply(&p).unwrap().data) {
                *w += v as f64 / 6.0;
            }
        }
        for (a, b) in got.data.iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tta_on_symmetric_input_matches_plain() {
        let mut g = Grid3::cube(8, 0.0);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let d = |c: usize| (c as f32 - 3.5).abs();
                    g.set(x, y, z, d(x) + d(y) + 2.0 * d(z));
                }
            }
        }
        let h = HeuristicPredictor::new(60.0).unwrap();
        let plain = h.predict(&PatchInput::plain(&g)).unwrap();
        let tta = tta_predict(&g, None, &h).unwrap();
        for (a, b) in plain.data.iter().zip(&tta.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregation() {
        let v = vol([16; 3]);
        let whole = [PatchSpec::new([0; 3], 16, "v")];
        let h = HeuristicPredictor::new(50.0).unwrap();
        let agg = predict_volume(&v, &h, &whole, false).unwrap();
        let direct = h
            .predict(&PatchInput::plain(&Grid3::new([16; 3], zscore(v.voxels())).unwrap()))
            .unwrap();
        assert_eq!(agg.voxels(), &direct.data[..]);

        let v = vol([24, 16, 16]);
        let specs = [PatchSpec::new([0, 0, 0], 16, "v"), PatchSpec::new([8, 0, 0], 16, "v")];
        let agg = predict_volume(&v, &ByOrigin, &specs, false).unwrap();
        assert_eq!(agg.get(4, 3, 3), 0.0);
        assert_eq!(agg.get(12, 3, 3), 0.5);
        assert_eq!(agg.get(20, 3, 3), 1.0);

        let c = predict_volume(&v, &Constant(0.7), &specs[..1], true).unwrap();
        assert!((c.get(3, 3, 3) - 0.7).abs() < 1e-6);
        assert_eq!(c.get(20, 3, 3), 0.0);
    }

    #[test]
    fn candidates_from_blobs() {
        let mut p = Volume3D::with_spacing([6, 4, 4], [1.0; 3], [0.0; 3], vec![0.0; 96]).unwrap();
        assert!(extract_candidates(&p, 0.5).unwrap().is_empty());
        let i = p.index(0, 0, 0);
        p.voxels_mut()[i] = 0.6;
        let i = p.index(1, 0, 0);
        p.voxels_mut()[i] = 0.8;
        let c = extract_candidates(&p, 0.5).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c[0].score - 0.8).abs() < 1e-6);
        assert!((c[0].center[0] - 4.0 / 7.0).abs() < 1e-6);
        assert_eq!(c[0].voxel_count, 2);

        let i = p.index(5, 3, 3);
        p.voxels_mut()[i] = 0.9;
        let c = extract_candidates(&p, 0.5).unwrap();
        assert_eq!(c.iter().map(|c| c.component_id).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(c[1].center, [5.0, 3.0, 3.0]);
    }

    fn cand(score: f64, voxel_count: usize, id: usize) -> CandidateDetection {
        CandidateDetection { center: [0.0; 3], score, voxel_count, component_id: id }
    }

    #[test]
    fn top_k_ranking() {
        let cs: Vec<_> = (0..7).map(|i| cand(i as f64 / 10.0, 1, i)).collect();
        let top = top_k(&cs, 5);
        assert_eq!(top.iter().map(|c| c.component_id).collect::<Vec<_>>(), vec![6, 5, 4, 3, 2]);
        assert_eq!(top_k(&cs[..3], 5).len(), 3);
        let tie = top_k(&[cand(0.5, 3, 0), cand(0.5, 9, 1), cand(0.5, 9, 2)], 2);
        assert_eq!(tie.iter().map(|c| c.component_id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn oracle_detects_planted_sphere() {
        let shape = [48; 3];
        let mut img = vec![0.0f32; 48usize.pow(3)];
        let mut mask = vec![0.0f32; img.len()];
        for z in 0..48 {
            for y in 0..48 {
                for x in 0..48 {
                    let i = x + 48 * (y + 48 * z);
                    if (y as i64 - 24).abs() <= 2 && (z as i64 - 24).abs() <= 2 {
                        img[i] = 50.0 + x as f32;
                    }
                    let d2 = (x as f64 - 30.0).powi(2) + (y as f64 - 24.0).powi(2) + (z as f64 - 24.0).powi(2);
                    if d2 <= 9.0 {
                        mask[i] = 1.0;
                        img[i] = 80.0;
                    }
                }
            }
        }
        let v = Volume3D::with_spacing(shape, [1.0; 3], [0.0; 3], img).unwrap();
        let m = v.with_voxels(mask).unwrap();
        let cfg = RetentionConfig::default();
        let d = detect(&v, &[[30.0, 24.0, 24.0]], &OraclePredictor::for_volume(m), &cfg, 32, "v").unwrap();
        assert!(d.retained.len() < d.enumerated, "{} of {}", d.retained.len(), d.enumerated);
        assert_eq!(d.candidates.len(), 1, "{:?}", d.retained);
        let c = &d.candidates[0];
        assert!((c.center[0] - 30.0).abs() < 1e-6 && (c.center[1] - 24.0).abs() < 1e-6);
        assert_eq!(c.score, 1.0);
    }

    #[test]
    fn candidate_csv_round_trip() {
        let recs = vec![CandidateRecord {
            subject: "sub-1".into(),
            session: "ses-1".into(),
            candidate: CandidateDetection { center: [1.5, -2.0, 0.25], score: 0.75, voxel_count: 12, component_id: 3 },
        }];
        let text = write_candidates_csv(&recs);
        assert_eq!(read_candidates_csv(text.as_bytes(), "t").unwrap(), recs);
    }

    #[test]
    fn config_validation() {
        assert!(RetentionConfig::default().validate(64).is_ok());
        assert!(RetentionConfig { stride: 0, ..Default::default() }.validate(64).is_err());
        assert!(RetentionConfig { stride: 65, ..Default::default() }.validate(64).is_err());
        assert!(RetentionConfig { threshold: 1.0, ..Default::default() }.validate(64).is_err());
        assert!(RetentionConfig { max_candidates: 0, ..Default::default() }.validate(64).is_err());
    }
}
