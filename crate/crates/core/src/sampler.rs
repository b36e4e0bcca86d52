//! Anatomically-informed selection of training patches.
//!
//! Positive patches contain a whole lesion sphere at a random position.
//! Negative patches come from three pools: centered on landmark points,
//! containing bright vessels, and uniformly random. No negative patch may
//! touch a lesion sphere.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::uniform_inclusive;
use crate::volume::{sphere_lattice, Grid3, Volume3D};
use crate::weak_labels::AneurysmAnnotation;

pub const DEFAULT_PATCH_SIDE: usize = 64;
/// Rejection-sampling trials per requested patch.
pub const MAX_TRIALS: usize = 1000;

/// A cubic patch placed on a volume's (zero-padded) voxel lattice.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Voxel index of the patch corner; may be negative.
    pub origin: [i64; 3],
    pub side: usize,
    /// Identifies the scan, e.g. `sub-001/ses-01`.
    pub volume_ref: String,
}

impl PatchSpec {
    pub fn new(origin: [i64; 3], side: usize, volume_ref: impl Into<String>) -> Self {
        Self {
            origin,
            side,
            volume_ref: volume_ref.into(),
        }
    }

    /// Origin that centers a patch of `side` on a continuous voxel index.
    pub fn centered_at(center: [f64; 3], side: usize, volume_ref: impl Into<String>) -> Self {
        let half = (side as f64 - 1.0) / 2.0;
        Self::new(center.map(|c| (c - half).round() as i64), side, volume_ref)
    }

    /// Continuous voxel index of the patch center.
    pub fn center_index(&self) -> [f64; 3] {
        let half = (self.side as f64 - 1.0) / 2.0;
        self.origin.map(|o| o as f64 + half)
    }

    pub fn center_world(&self, volume: &Volume3D) -> [f64; 3] {
        volume.voxel_to_world(self.center_index())
    }

    pub fn end(&self) -> [i64; 3] {
        self.origin.map(|o| o + self.side as i64 - 1)
    }

    #[inline]
    pub fn contains(&self, idx: [i64; 3]) -> bool {
        let s = self.side as i64;
        (0..3).all(|a| idx[a] >= self.origin[a] && idx[a] < self.origin[a] + s)
    }

    /// Side at least 8 and the patch overlaps the volume.
    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        if self.side < 8 {
            return Err(Error::InvalidArgument(format!("patch side {} < 8", self.side)));
        }
        for a in 0..3 {
            let lo = -(self.side as i64) + 1;
            if self.origin[a] < lo || self.origin[a] >= shape[a] as i64 {
                return Err(Error::InvalidArgument(format!(
                    "patch origin {:?} does not overlap volume {:?}",
                    self.origin, shape
                )));
            }
        }
        Ok(())
    }

    /// Copies the patch out of the volume, reading zeros outside it.
    pub fn extract(&self, volume: &Volume3D) -> Grid3 {
        let s = self.side;
        let shape = volume.shape();
        let mut data = vec![0.0f32; s * s * s];
        let [ox, oy, oz] = self.origin;
        let x0 = ox.max(0);
        let x1 = (ox + s as i64).min(shape[0] as i64);
        for z in 0..s as i64 {
            let vz = oz + z;
            if vz < 0 || vz >= shape[2] as i64 {
                continue;
            }
            for y in 0..s as i64 {
                let vy = oy + y;
                if vy < 0 || vy >= shape[1] as i64 || x0 >= x1 {
                    continue;
                }
                let src = volume.index(x0 as usize, vy as usize, vz as usize);
                let dst = ((x0 - ox) + s as i64 * (y + s as i64 * z)) as usize;
                let len = (x1 - x0) as usize;
                data[dst..dst + len].copy_from_slice(&volume.voxels()[src..src + len]);
            }
        }
        Grid3 { shape: [s; 3], data }
    }
}

/// One anatomical landmark, already in the subject's world space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub landmark_id: String,
    #[serde(default)]
    pub label: String,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

impl Landmark {
    pub fn position(&self) -> [f64; 3] {
        [self.x_mm, self.y_mm, self.z_mm]
    }
}

pub fn read_landmarks_csv(reader: impl std::io::Read, source: &str) -> Result<Vec<Landmark>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<Landmark>() {
        let lm = row.map_err(|e| Error::csv(source, e))?;
        if !lm.position().iter().all(|v| v.is_finite()) {
            return Err(Error::parse(source, format!("landmark {} has a non-finite coordinate", lm.landmark_id)));
        }
        out.push(lm);
    }
    Ok(out)
}

pub fn load_landmarks(path: &std::path::Path) -> Result<Vec<Landmark>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_landmarks_csv(f, &path.display().to_string())
}

pub fn write_landmarks_csv(landmarks: &[Landmark]) -> String {
    let mut out = String::from("landmark_id,label,x_mm,y_mm,z_mm\n");
    for l in landmarks {
        out.push_str(&format!("{},{},{},{},{}\n", l.landmark_id, l.label, l.x_mm, l.y_mm, l.z_mm));
    }
    out
}

/// Lattice voxels covered by one lesion sphere (not clipped to the grid).
#[derive(Debug, Clone)]
pub struct LesionFootprint {
    pub voxels: Vec<[i64; 3]>,
    pub lo: [i64; 3],
    pub hi: [i64; 3],
}

impl LesionFootprint {
    pub fn new(annotation: &AneurysmAnnotation, volume: &Volume3D) -> Result<Self> {
        let mut voxels = sphere_lattice(annotation.center, annotation.radius, volume.affine())?;
        if voxels.is_empty() {
            let c = volume.world_to_voxel(annotation.center)?;
            voxels.push(c.map(|v| v.round() as i64));
        }
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for v in &voxels {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Ok(Self { voxels, lo, hi })
    }

    pub fn intersects(&self, spec: &PatchSpec) -> bool {
        let end = spec.end();
        if (0..3).any(|a| self.hi[a] < spec.origin[a] || self.lo[a] > end[a]) {
            return false;
        }
        self.voxels.iter().any(|&v| spec.contains(v))
    }

    pub fn contained_in(&self, spec: &PatchSpec) -> bool {
        let end = spec.end();
        (0..3).all(|a| self.lo[a] >= spec.origin[a] && self.hi[a] <= end[a])
    }

    pub fn touches_grid(&self, shape: [usize; 3]) -> bool {
        self.voxels
            .iter()
            .any(|v| (0..3).all(|a| v[a] >= 0 && (v[a] as usize) < shape[a]))
    }
}

/// "Contains vessels" rule: enough voxels brighter than a percentile of the
/// volume's nonzero intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VesselCriterion {
    pub intensity_percentile: f64,
    pub min_bright_voxels: usize,
}

impl Default for VesselCriterion {
    fn default() -> Self {
        Self {
            intensity_percentile: 90.0,
            min_bright_voxels: 50,
        }
    }
}

impl VesselCriterion {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_percentile > 0.0 && self.intensity_percentile < 100.0) {
            return Err(Error::InvalidArgument(format!(
                "vessel percentile {} must lie in (0, 100)",
                self.intensity_percentile
            )));
        }
        Ok(())
    }

    pub fn counter(&self, volume: &Volume3D) -> BrightCounter {
        let mut nonzero: Vec<f32> = volume.voxels().iter().copied().filter(|&v| v != 0.0).collect();
        let threshold = percentile(&mut nonzero, self.intensity_percentile).unwrap_or(f32::INFINITY);
        BrightCounter::new(volume, threshold, self.min_bright_voxels)
    }
}

/// Linear-interpolated percentile (`q` in [0, 100]); sorts `values`.
pub fn percentile(values: &mut [f32], q: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f32::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    Some((values[lo] as f64 * (1.0 - t) + values[hi] as f64 * t) as f32)
}

/// Counts bright voxels in any box with a summed-volume table.
#[derive(Debug, Clone)]
pub struct BrightCounter {
    pub threshold: f32,
    pub min_count: usize,
    shape: [usize; 3],
    table: Vec<u32>,
}

impl BrightCounter {
    pub fn new(volume: &Volume3D, threshold: f32, min_count: usize) -> Self {
        let [nx, ny, nz] = volume.shape();
        let (sx, sy) = (nx + 1, ny + 1);
        let mut table = vec![0u32; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        for z in 0..nz {
            for y in 0..ny {
                let mut row = 0u32;
                for x in 0..nx {
                    row += (volume.get(x, y, z) > threshold) as u32;
                    table[at(x + 1, y + 1, z + 1)] =
                        row + table[at(x + 1, y, z + 1)] + table[at(x + 1, y + 1, z)] - table[at(x + 1, y, z)];
                }
            }
        }
        Self {
            threshold,
            min_count,
            shape: [nx, ny, nz],
            table,
        }
    }

    /// Bright voxels inside the patch (clipped to the grid).
    pub fn count(&self, spec: &PatchSpec) -> usize {
        let lo: [usize; 3] = std::array::from_fn(|a| spec.origin[a].clamp(0, self.shape[a] as i64) as usize);
        let hi: [usize; 3] =
            std::array::from_fn(|a| (spec.origin[a] + spec.side as i64).clamp(0, self.shape[a] as i64) as usize);
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return 0;
        }
        let (sx, sy) = (self.shape[0] + 1, self.shape[1] + 1);
        let t = |x: usize, y: usize, z: usize| self.table[x + sx * (y + sy * z)] as i64;
        let v = t(hi[0], hi[1], hi[2]) - t(lo[0], hi[1], hi[2]) - t(hi[0], lo[1], hi[2]) - t(hi[0], hi[1], lo[2])
            + t(lo[0], lo[1], hi[2])
            + t(lo[0], hi[1], lo[2])
            + t(hi[0], lo[1], lo[2])
            - t(lo[0], lo[1], lo[2]);
        v as usize
    }

    pub fn passes(&self, spec: &PatchSpec) -> bool {
        self.count(spec) >= self.min_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_pos_per_aneurysm: usize,
    pub n_neg_landmark: usize,
    pub n_neg_vessel: usize,
    pub n_neg_random: usize,
    pub vessel_intensity_percentile: f64,
    pub vessel_min_bright_voxels: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_pos_per_aneurysm: 8,
            n_neg_landmark: 20,
            n_neg_vessel: 20,
            n_neg_random: 10,
            vessel_intensity_percentile: 90.0,
            vessel_min_bright_voxels: 50,
        }
    }
}

impl SamplingConfig {
    pub fn vessel_criterion(&self) -> VesselCriterion {
        VesselCriterion {
            intensity_percentile: self.vessel_intensity_percentile,
            min_bright_voxels: self.vessel_min_bright_voxels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vessel_criterion().validate()
    }
}

/// Places `n` patches so the whole lesion sphere lies inside each one, at a
/// uniformly drawn offset. Lesions too large for the patch are centered.
pub fn sample_positive<R: RngCore + ?Sized>(
    volume: &Volume3D,
    annotation: &AneurysmAnnotation,
    n: usize,
    side: usize,
    volume_ref: &str,
    rng: &mut R,
) -> Result<Vec<PatchSpec>> {
    let fp = LesionFootprint::new(annotation, volume)?;
    if !fp.touches_grid(volume.shape()) {
        return Err(Error::InvalidArgument(format!(
            "lesion {} does not intersect the volume",
            annotation.lesion_id
        )));
    }
    let s = side as i64;
    let ranges: [(i64, i64); 3] = std::array::from_fn(|a| (fp.hi[a] - s + 1, fp.lo[a]));
    let fits = ranges.iter().all(|(lo, hi)| lo <= hi);
    let center = volume.world_to_voxel(annotation.center)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let spec = if fits {
            let origin = std::array::from_fn(|a| uniform_inclusive(rng, ranges[a].0, ranges[a].1));
            PatchSpec::new(origin, side, volume_ref)
        } else {
            PatchSpec::centered_at(center, side, volume_ref)
        };
        out.push(spec);
    }
    Ok(out)
}

/// Requested versus produced counts per negative pool.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Shortfall {
    pub landmark: usize,
    pub vessel: usize,
    pub random: usize,
}

impl Shortfall {
    pub fn is_empty(&self) -> bool {
        self.landmark == 0 && self.vessel == 0 && self.random == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeSamples {
    pub landmark: Vec<PatchSpec>,
    pub vessel: Vec<PatchSpec>,
    pub random: Vec<PatchSpec>,
    pub shortfall: Shortfall,
}

impl NegativeSamples {
    pub fn all(&self) -> impl Iterator<Item = &PatchSpec> {
        self.landmark.iter().chain(&self.vessel).chain(&self.random)
    }

    pub fn len(&self) -> usize {
        self.landmark.len() + self.vessel.len() + self.random.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn origin_range(n: usize, side: usize) -> (i64, i64) {
    let (n, s) = (n as i64, side as i64);
    if n >= s {
        (0, n - s)
    } else {
        (n - s, 0)
    }
}

/// Draws the three negative pools. Shortfalls (too few eligible landmarks,
/// trial cap reached) are reported in the result rather than failing.
pub fn sample_negative<R: RngCore + ?Sized>(
    volume: &Volume3D,
    landmarks: &[[f64; 3]],
    annotations: &[AneurysmAnnotation],
    config: &SamplingConfig,
    side: usize,
    volume_ref: &str,
    rng: &mut R,
) -> Result<NegativeSamples> {
    config.validate()?;
    let footprints: Vec<LesionFootprint> = annotations
        .iter()
        .map(|a| LesionFootprint::new(a, volume))
        .collect::<Result<_>>()?;
    let lesion_free = |spec: &PatchSpec| footprints.iter().all(|f| !f.intersects(spec));
    let shape = volume.shape();
    let mut out = NegativeSamples::default();

    let inv = volume.affine().inverse()?;
    let eligible: Vec<PatchSpec> = landmarks
        .iter()
        .filter_map(|&l| {
            let c = inv.apply(l);
            let idx = c.map(|v| v.round() as i64);
            volume.contains_index(idx).then(|| PatchSpec::centered_at(c, side, volume_ref))
        })
        .filter(|s| lesion_free(s))
        .collect();
    if !eligible.is_empty() {
        out.landmark = eligible.iter().cycle().take(config.n_neg_landmark).cloned().collect();
    }
    out.shortfall.landmark = config.n_neg_landmark - out.landmark.len();

    let ranges: [(i64, i64); 3] = std::array::from_fn(|a| origin_range(shape[a], side));
    let draw = |rng: &mut R| {
        PatchSpec::new(
            std::array::from_fn(|a| uniform_inclusive(rng, ranges[a].0, ranges[a].1)),
            side,
            volume_ref,
        )
    };

    let counter = config.vessel_criterion().counter(volume);
    for _ in 0..config.n_neg_vessel {
        let found = (0..MAX_TRIALS)
            .map(|_| draw(rng))
            .find(|s| counter.passes(s) && lesion_free(s));
        match found {
            Some(s) => out.vessel.push(s),
            None => out.shortfall.vessel += 1,
        }
    }

    for _ in 0..config.n_neg_random {
        match (0..MAX_TRIALS).map(|_| draw(rng)).find(|s| lesion_free(s)) {
            Some(s) => out.random.push(s),
            None => out.shortfall.random += 1,
        }
    }
    if !out.shortfall.is_empty() {
        log::warn!("{volume_ref}: negative sampling shortfall {:?}", out.shortfall);
    }
    Ok(out)
}
