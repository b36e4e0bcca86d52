//! Volumetric grids and the numerics that operate on them.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::Affine4x4;
use crate::components::Component;
use crate::error::{Error, Result};

/// Guard against division by a vanishing standard deviation.
pub const ZSCORE_EPS: f64 = 1e-6;

#[inline]
pub fn linear_index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

#[inline]
pub fn unravel(shape: [usize; 3], idx: usize) -> [usize; 3] {
    let x = idx % shape[0];
    let rest = idx / shape[0];
    [x, rest % shape[1], rest / shape[1]]
}

/// A plain 3D grid of reals without geometry. Used for patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Grid3 {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("grid shape {shape:?} has a zero axis")));
        }
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "grid shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn cube(side: usize, value: f32) -> Self {
        Self::filled([side; 3], value)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_cubic(&self) -> bool {
        self.shape[0] == self.shape[1] && self.shape[1] == self.shape[2]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.shape, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = linear_index(self.shape, x, y, z);
        self.data[i] = v;
    }
}

/// Scalar voxel grid with spacing (mm) and voxel-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    shape: [usize; 3],
    spacing: [f64; 3],
    affine: Affine4x4,
    voxels: Vec<f32>,
}

impl Volume3D {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], affine: Affine4x4, voxels: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("volume shape {shape:?} has a zero axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        let n: usize = shape.iter().product();
        if voxels.len() != n {
            return Err(Error::Shape(format!(
                "volume shape {shape:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Self {
            shape,
            spacing,
            affine,
            voxels,
        })
    }

    /// Axis-aligned volume whose affine is `diag(spacing)` with the given origin.
    pub fn with_spacing(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        Self::new(shape, spacing, Affine4x4::diagonal(spacing, origin), voxels)
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3], affine: Affine4x4) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, spacing, affine, vec![0.0; n])
    }

    /// Same geometry, all voxels zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            spacing: self.spacing,
            affine: self.affine,
            voxels: vec![0.0; self.voxels.len()],
        }
    }

    /// Same geometry, new voxel values.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Self> {
        Self::new(self.shape, self.spacing, self.affine, voxels)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine4x4 {
        &self.affine
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.shape, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Value at a possibly out-of-bounds index; zero outside the grid.
    #[inline]
    pub fn get_padded(&self, x: i64, y: i64, z: i64) -> f32 {
        if self.contains_index([x, y, z]) {
            self.get(x as usize, y as usize, z as usize)
        } else {
            0.0
        }
    }

    #[inline]
    pub fn contains_index(&self, idx: [i64; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.shape[a])
    }

    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        self.affine.apply(idx)
    }

    pub fn world_to_voxel(&self, world: [f64; 3]) -> Result<[f64; 3]> {
        Ok(self.affine.inverse()?.apply(world))
    }

    /// Nearest voxel index of a world point, or `None` outside the grid.
    pub fn world_to_index(&self, world: [f64; 3]) -> Result<Option<[usize; 3]>> {
        let c = self.world_to_voxel(world)?;
        let idx = c.map(|v| v.round() as i64);
        Ok(self.contains_index(idx).then(|| idx.map(|v| v as usize)))
    }

    /// Foreground test used for every mask in the crate.
    #[inline]
    pub fn is_foreground(v: f32) -> bool {
        v > 0.5
    }

    /// Copy binarized with threshold `> 0.5`.
    pub fn binarized(&self) -> Volume3D {
        let voxels = self
            .voxels
            .iter()
            .map(|&v| if Self::is_foreground(v) { 1.0 } else { 0.0 })
            .collect();
        Volume3D {
            shape: self.shape,
            spacing: self.spacing,
            affine: self.affine,
            voxels,
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| Self::is_foreground(v)).count()
    }

    pub fn to_grid(&self) -> Grid3 {
        Grid3 {
            shape: self.shape,
            data: self.voxels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

/// Per-axis median of the voxel spacings; even counts take the mean of the
/// two middle values.
pub fn median_spacing(volumes: &[&Volume3D]) -> Result<[f64; 3]> {
    if volumes.is_empty() {
        return Err(Error::Empty("median_spacing needs at least one volume"));
    }
    let mut out = [0.0; 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let mut vals: Vec<f64> = volumes.iter().map(|v| v.spacing[axis]).collect();
        vals.sort_by(f64::total_cmp);
        let n = vals.len();
        *slot = if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        };
    }
    Ok(out)
}

/// Resamples onto a grid with `target_spacing`.
///
/// Output voxel `j` samples input continuous index `j * target / spacing`
/// along each axis, so voxel 0 keeps its world position and the affine is
/// updated by the same scaling. Samples falling outside the input read 0.
pub fn resample(volume: &Volume3D, target_spacing: [f64; 3], mode: Interpolation) -> Result<Volume3D> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target spacing {target_spacing:?} must be positive"
        )));
    }
    let step: [f64; 3] = std::array::from_fn(|a| target_spacing[a] / volume.spacing[a]);
    let out_shape: [usize; 3] = std::array::from_fn(|a| {
        ((volume.shape[a] as f64 * volume.spacing[a] / target_spacing[a]).round() as usize).max(1)
    });
    let affine = volume
        .affine
        .compose(&Affine4x4::diagonal(step, [0.0; 3]));

    let plane = out_shape[0] * out_shape[1];
    let mut voxels = vec![0.0f32; plane * out_shape[2]];
    voxels.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        let iz = z as f64 * step[2];
        for y in 0..out_shape[1] {
            let iy = y as f64 * step[1];
            for x in 0..out_shape[0] {
                let ix = x as f64 * step[0];
                slab[x + out_shape[0] * y] = match mode {
                    Interpolation::Trilinear => sample_trilinear(volume, [ix, iy, iz]),
                    Interpolation::Nearest => sample_nearest(volume, [ix, iy, iz]),
                };
            }
        }
    });
    Volume3D::new(out_shape, target_spacing, affine, voxels)
}

/// Trilinear interpolation at a continuous voxel index, zero outside.
pub fn sample_trilinear(volume: &Volume3D, p: [f64; 3]) -> f32 {
    let base = p.map(|v| v.floor());
    let frac: [f64; 3] = std::array::from_fn(|a| p[a] - base[a]);
    let b = base.map(|v| v as i64);
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let d = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        let v = volume.get_padded(b[0] + d[0] as i64, b[1] + d[1] as i64, b[2] + d[2] as i64);
        acc += w * v as f64;
    }
    acc as f32
}

pub fn sample_nearest(volume: &Volume3D, p: [f64; 3]) -> f32 {
    let idx = p.map(|v| (v + 0.5).floor() as i64);
    volume.get_padded(idx[0], idx[1], idx[2])
}

/// `(v - mean) / max(std, eps)` with the population standard deviation.
pub fn zscore(values: &[f32]) -> Vec<f32> {
    if values.is_empty() {
        return Vec::new();
    }
    let (mean, std) = mean_std(values);
    let denom = std.max(ZSCORE_EPS);
    values
        .iter()
        .map(|&v| ((v as f64 - mean) / denom) as f32)
        .collect()
}

/// Mean and population standard deviation, accumulated in f64.
pub fn mean_std(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// World-space (optionally weighted) mean of a component's voxel centers.
pub fn center_of_mass(component: &Component, weights: Option<&[f32]>, volume: &Volume3D) -> Result<[f64; 3]> {
    if component.voxels.is_empty() {
        return Err(Error::Empty("center_of_mass of an empty component"));
    }
    if let Some(w) = weights {
        if w.len() != volume.len() {
            return Err(Error::Shape(format!(
                "weights have {} values for a volume of {}",
                w.len(),
                volume.len()
            )));
        }
    }
    let mut acc = [0.0f64; 3];
    let mut total = 0.0f64;
    for v in &component.voxels {
        let w = match weights {
            Some(w) => {
                let wv = w[volume.index(v[0], v[1], v[2])] as f64;
                if wv < 0.0 {
                    return Err(Error::InvalidArgument("negative weight in center_of_mass".into()));
                }
                wv
            }
            None => 1.0,
        };
        for a in 0..3 {
            acc[a] += w * v[a] as f64;
        }
        total += w;
    }
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("center_of_mass: zero total weight".into()));
    }
    Ok(volume.voxel_to_world(acc.map(|c| c / total)))
}

/// Squared world distance from a voxel center to `point`. Every sphere
/// membership test in the crate goes through this function.
#[inline]
pub fn voxel_center_dist2(affine: &Affine4x4, idx: [i64; 3], point: [f64; 3]) -> f64 {
    let w = affine.apply(idx.map(|v| v as f64));
    (w[0] - point[0]).powi(2) + (w[1] - point[1]).powi(2) + (w[2] - point[2]).powi(2)
}

/// Unbounded lattice indices whose world-space voxel centers lie within
/// `radius` (inclusive) of `center`, in ascending linear (z, y, x) order.
pub fn sphere_lattice(center: [f64; 3], radius: f64, affine: &Affine4x4) -> Result<Vec<[i64; 3]>> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("sphere radius {radius} must be >= 0")));
    }
    let inv = affine.inverse()?;
    let c = inv.apply(center);
    let rows = inv.rows();
    let half: [f64; 3] = std::array::from_fn(|a| {
        radius * (rows[a][0].powi(2) + rows[a][1].powi(2) + rows[a][2].powi(2)).sqrt()
    });
    let lo: [i64; 3] = std::array::from_fn(|a| (c[a] - half[a]).floor() as i64 - 1);
    let hi: [i64; 3] = std::array::from_fn(|a| (c[a] + half[a]).ceil() as i64 + 1);
    let r2 = radius * radius;
    let mut out = Vec::new();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                if voxel_center_dist2(affine, [x, y, z], center) <= r2 {
                    out.push([x, y, z]);
                }
            }
        }
    }
    Ok(out)
}

/// Binary mask of voxels whose world centers lie within `radius` of `center`.
pub fn rasterize_sphere(center: [f64; 3], radius: f64, template: &Volume3D) -> Result<Volume3D> {
    let mut out = template.zeros_like();
    paint_sphere(&mut out, center, radius)?;
    Ok(out)
}

/// Sets the voxels of a sphere to 1 in an existing mask.
pub fn paint_sphere(mask: &mut Volume3D, center: [f64; 3], radius: f64) -> Result<usize> {
    let pts = sphere_lattice(center, radius, &mask.affine)?;
    let mut painted = 0;
    for p in pts {
        if mask.contains_index(p) {
            let i = mask.index(p[0] as usize, p[1] as usize, p[2] as usize);
            mask.voxels[i] = 1.0;
            painted += 1;
        }
    }
    Ok(painted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::Connectivity;
    use proptest::prelude::*;

    fn vol(shape: [usize; 3], spacing: [f64; 3]) -> Volume3D {
        Volume3D::with_spacing(shape, spacing, [0.0; 3], vec![0.0; shape.iter().product()]).unwrap()
    }

    #[test]
    fn median_of_single_volume_is_its_spacing() {
        let v = vol([2, 2, 2], [0.4, 0.5, 0.6]);
        assert_eq!(median_spacing(&[&v]).unwrap(), [0.4, 0.5, 0.6]);
    }

    #[test]
    fn median_per_axis() {
        let a = vol([1, 1, 1], [0.4, 0.4, 0.6]);
        let b = vol([1, 1, 1], [0.5, 0.5, 0.5]);
        let c = vol([1, 1, 1], [0.3, 0.6, 0.7]);
        let m = median_spacing(&[&a, &b, &c]).unwrap();
        for (got, want) in m.iter().zip([0.4, 0.5, 0.6]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn median_even_count_is_mean() {
        let a = vol([1, 1, 1], [0.4, 1.0, 1.0]);
        let b = vol([1, 1, 1], [0.6, 1.0, 1.0]);
        assert!((median_spacing(&[&a, &b]).unwrap()[0] - 0.5).abs() < 1e-12);
        assert!(median_spacing(&[]).is_err());
    }

    #[test]
    fn resample_identity() {
        let data: Vec<f32> = (0..60).map(|i| i as f32 * 0.5).collect();
        let v = Volume3D::with_spacing([3, 4, 5], [0.5, 0.5, 0.8], [1.0, 2.0, 3.0], data.clone()).unwrap();
        let r = resample(&v, [0.5, 0.5, 0.8], Interpolation::Trilinear).unwrap();
        assert_eq!(r.shape(), [3, 4, 5]);
        assert_eq!(r.voxels(), &data[..]);
        assert_eq!(r.affine(), v.affine());
    }

    #[test]
    fn resample_constant_downsample() {
        let v = Volume3D::with_spacing([8, 8, 8], [1.0; 3], [0.0; 3], vec![3.5; 512]).unwrap();
        let r = resample(&v, [2.0; 3], Interpolation::Trilinear).unwrap();
        assert_eq!(r.shape(), [4, 4, 4]);
        assert!(r.voxels().iter().all(|&x| x == 3.5));
        let n = resample(&v, [2.0; 3], Interpolation::Nearest).unwrap();
        assert!(n.voxels().iter().all(|&x| x == 3.5));
    }

    #[test]
    fn resample_linear_midpoint() {
        // [0, 2] along x at spacing 1, resampled at 0.5: the sample at
        // index 0.5 is the midpoint.
        let v = Volume3D::with_spacing([2, 1, 1], [1.0; 3], [0.0; 3], vec![0.0, 2.0]).unwrap();
        let r = resample(&v, [0.5, 1.0, 1.0], Interpolation::Trilinear).unwrap();
        assert_eq!(r.shape(), [4, 1, 1]);
        assert!((r.voxels()[1] - 1.0).abs() < 1e-6);
        assert_eq!(r.voxels()[0], 0.0);
        assert_eq!(r.voxels()[2], 2.0);
        // World position of the midpoint sample is 0.5 mm.
        assert!((r.voxel_to_world([1.0, 0.0, 0.0])[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resample_rejects_bad_spacing() {
        let v = vol([2, 2, 2], [1.0; 3]);
        assert!(resample(&v, [0.0, 1.0, 1.0], Interpolation::Nearest).is_err());
        assert!(resample(&v, [-1.0, 1.0, 1.0], Interpolation::Nearest).is_err());
    }

    #[test]
    fn zscore_constant_is_zero() {
        assert!(zscore(&[4.0; 27]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_two_values() {
        assert_eq!(zscore(&[0.0, 2.0, 0.0, 2.0]), vec![-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn com_examples() {
        let v = vol([5, 5, 5], [1.0; 3]);
        let single = Component::new(vec![[2, 2, 2]], Connectivity::TwentySix);
        assert_eq!(center_of_mass(&single, None, &v).unwrap(), [2.0, 2.0, 2.0]);
        let pair = Component::new(vec![[0, 0, 0], [2, 0, 0]], Connectivity::TwentySix);
        assert_eq!(center_of_mass(&pair, None, &v).unwrap(), [1.0, 0.0, 0.0]);
        let mut w = vec![0.0f32; 125];
        w[0] = 1.0;
        w[3] = 3.0;
        let weighted = Component::new(vec![[0, 0, 0], [3, 0, 0]], Connectivity::TwentySix);
        let c = center_of_mass(&weighted, Some(&w), &v).unwrap();
        assert!((c[0] - 2.25).abs() < 1e-12 && c[1] == 0.0 && c[2] == 0.0);
        let zero = vec![0.0f32; 125];
        assert!(center_of_mass(&weighted, Some(&zero), &v).is_err());
    }

    #[test]
    fn sphere_radius_zero_is_one_voxel() {
        let t = vol([5, 5, 5], [1.0; 3]);
        let m = rasterize_sphere([2.0, 2.0, 2.0], 0.0, &t).unwrap();
        assert_eq!(m.foreground_count(), 1);
        assert_eq!(m.get(2, 2, 2), 1.0);
    }

    #[test]
    fn sphere_radius_one_is_seven_voxels() {
        let t = vol([5, 5, 5], [1.0; 3]);
        let m = rasterize_sphere([2.0, 2.0, 2.0], 1.0, &t).unwrap();
        assert_eq!(m.foreground_count(), 7);
    }

    #[test]
    fn sphere_outside_grid_is_empty() {
        let t = vol([5, 5, 5], [1.0; 3]);
        let m = rasterize_sphere([100.0, 0.0, 0.0], 3.0, &t).unwrap();
        assert_eq!(m.foreground_count(), 0);
    }

    proptest! {
        #[test]
        fn zscore_normalizes(values in proptest::collection::vec(-1000.0f32..1000.0, 8..200)) {
            let (_, std) = mean_std(&values);
            prop_assume!(std > 1e-2);
            let z = zscore(&values);
            let (m, s) = mean_std(&z);
            prop_assert!(m.abs() < 1e-4);
            prop_assert!((s - 1.0).abs() < 1e-4);
        }

        #[test]
        fn zscore_affine_invariant(
            values in proptest::collection::vec(-10.0f32..10.0, 8..100),
            a in 0.1f32..10.0,
            b in -50.0f32..50.0,
        ) {
            let (_, std) = mean_std(&values);
            prop_assume!(std > 1e-1);
            let shifted: Vec<f32> = values.iter().map(|&v| a * v + b).collect();
            let z1 = zscore(&values);
            let z2 = zscore(&shifted);
            for (p, q) in z1.iter().zip(&z2) {
                prop_assert!((p - q).abs() < 1e-4, "{} vs {}", p, q);
            }
        }

        #[test]
        fn sphere_is_monotone_in_radius(
            cx in -2.0f64..10.0, cy in -2.0f64..10.0, cz in -2.0f64..10.0,
            r1 in 0.0f64..4.0, dr in 0.0f64..3.0,
        ) {
            let t = Volume3D::with_spacing([8, 8, 8], [0.9, 1.1, 1.3], [0.0; 3], vec![0.0; 512]).unwrap();
            let small = rasterize_sphere([cx, cy, cz], r1, &t).unwrap();
            let big = rasterize_sphere([cx, cy, cz], r1 + dr, &t).unwrap();
            for (s, b) in small.voxels().iter().zip(big.voxels()) {
                prop_assert!(*s <= *b);
            }
        }

        #[test]
        fn resample_keeps_bbox_center(
            nx in 4usize..24, ny in 4usize..24, nz in 4usize..24,
            sx in 0.3f64..1.5, sy in 0.3f64..1.5, sz in 0.3f64..1.5,
            ratio in 0.5f64..2.0,
        ) {
            let shape = [nx, ny, nz];
            let spacing = [sx, sy, sz];
            let v = Volume3D::with_spacing(shape, spacing, [3.0, -2.0, 1.0], vec![0.0; nx * ny * nz]).unwrap();
            let target = spacing.map(|s| s * ratio);
            let r = resample(&v, target, Interpolation::Nearest).unwrap();
            let c_in = v.voxel_to_world(shape.map(|n| (n as f64 - 1.0) / 2.0));
            let c_out = r.voxel_to_world(r.shape().map(|n| (n as f64 - 1.0) / 2.0));
            for a in 0..3 {
                prop_assert!((c_in[a] - c_out[a]).abs() <= target[a] + 1e-9);
            }
        }
    }
}
