//! Spherical weak labels: rasterizing them, deriving them from voxel-wise
//! masks ("weakening"), and measuring lesion size.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::components::{connected_components, Connectivity};
use crate::error::{Error, Result};
use crate::volume::{paint_sphere, rasterize_sphere, voxel_center_dist2, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LesionShape {
    #[default]
    Saccular,
    Fusiform,
}

/// Anatomical location groups used for PHASES scoring and stratification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Location {
    #[serde(rename = "ICA")]
    Ica,
    #[serde(rename = "MCA")]
    Mca,
    /// Anterior cerebral, posterior communicating, or posterior circulation.
    #[serde(rename = "ACA_Pcom_Posterior")]
    AcaPcomPosterior,
}

impl Location {
    pub const ALL: [Location; 3] = [Location::Ica, Location::Mca, Location::AcaPcomPosterior];

    pub fn as_str(self) -> &'static str {
        match self {
            Location::Ica => "ICA",
            Location::Mca => "MCA",
            Location::AcaPcomPosterior => "ACA_Pcom_Posterior",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Location {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ICA" | "ica" => Ok(Location::Ica),
            "MCA" | "mca" => Ok(Location::Mca),
            "ACA_Pcom_Posterior" | "ACA/Pcom/Posterior" | "aca_pcom_posterior" => Ok(Location::AcaPcomPosterior),
            other => Err(Error::InvalidArgument(format!("unknown location {other:?}"))),
        }
    }
}

impl fmt::Display for LesionShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LesionShape::Saccular => "saccular",
            LesionShape::Fusiform => "fusiform",
        })
    }
}

impl FromStr for LesionShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "saccular" => Ok(LesionShape::Saccular),
            "fusiform" => Ok(LesionShape::Fusiform),
            other => Err(Error::InvalidArgument(format!("unknown lesion shape {other:?}"))),
        }
    }
}

/// One lesion annotated with an enclosing sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct AneurysmAnnotation {
    pub lesion_id: String,
    /// World coordinates (mm).
    pub center: [f64; 3],
    pub radius: f64,
    pub shape: LesionShape,
    pub location: Option<Location>,
    pub max_diameter: f64,
}

impl AneurysmAnnotation {
    pub fn sphere(lesion_id: impl Into<String>, center: [f64; 3], radius: f64) -> Self {
        Self {
            lesion_id: lesion_id.into(),
            center,
            radius,
            shape: LesionShape::Saccular,
            location: None,
            max_diameter: 2.0 * radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lesion {}: radius {} must be > 0",
                self.lesion_id, self.radius
            )));
        }
        if !(self.max_diameter >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lesion {}: max_diameter {} must be >= 0",
                self.lesion_id, self.max_diameter
            )));
        }
        Ok(())
    }
}

/// Rasterized sphere of one annotation on the template grid.
pub fn sphere_label(annotation: &AneurysmAnnotation, template: &Volume3D) -> Result<Volume3D> {
    rasterize_sphere(annotation.center, annotation.radius, template)
}

/// Union of the spheres of several annotations.
pub fn sphere_labels(annotations: &[AneurysmAnnotation], template: &Volume3D) -> Result<Volume3D> {
    let mut out = template.zeros_like();
    for a in annotations {
        paint_sphere(&mut out, a.center, a.radius)?;
    }
    Ok(out)
}

/// Length of one voxel diagonal for the given spacing.
pub fn voxel_diagonal(spacing: [f64; 3]) -> f64 {
    spacing.iter().map(|s| s * s).sum::<f64>().sqrt()
}

fn foreground_indices(mask: &Volume3D) -> Vec<[i64; 3]> {
    let [nx, ny, _] = mask.shape();
    mask.voxels()
        .iter()
        .enumerate()
        .filter(|(_, &v)| Volume3D::is_foreground(v))
        .map(|(i, _)| [(i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64])
        .collect()
}

/// Smallest `r` with `r * r >= d2` in floating point.
fn covering_radius(d2: f64) -> f64 {
    let mut r = d2.sqrt();
    while r * r < d2 {
        r = f64::from_bits(r.to_bits() + 1);
    }
    r
}

/// Replaces a voxel-wise mask by its enclosing sphere: centered on the
/// unweighted center of mass, reaching the farthest foreground voxel center
/// plus `margin` mm (one voxel diagonal when `None`).
pub fn weaken(mask: &Volume3D, margin: Option<f64>) -> Result<AneurysmAnnotation> {
    let fg = foreground_indices(mask);
    if fg.is_empty() {
        return Err(Error::Empty("weaken needs a non-empty mask"));
    }
    let margin = margin.unwrap_or_else(|| voxel_diagonal(mask.spacing()));
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!("margin {margin} must be >= 0")));
    }
    let mut acc = [0.0f64; 3];
    for p in &fg {
        for a in 0..3 {
            acc[a] += p[a] as f64;
        }
    }
    let n = fg.len() as f64;
    let center = mask.voxel_to_world(acc.map(|c| c / n));
    let far2 = fg
        .iter()
        .map(|&p| voxel_center_dist2(mask.affine(), p, center))
        .fold(0.0f64, f64::max);
    let radius = covering_radius(far2) + margin;
    Ok(AneurysmAnnotation {
        lesion_id: String::new(),
        center,
        radius,
        shape: LesionShape::Saccular,
        location: None,
        max_diameter: max_diameter(mask)?,
    })
}

/// One weakened annotation per 26-connected lesion, ids `{prefix}-L{k}`
/// numbered from 1 in component order.
pub fn weaken_components(mask: &Volume3D, margin: Option<f64>, prefix: &str) -> Result<Vec<AneurysmAnnotation>> {
    connected_components(mask, Connectivity::TwentySix)
        .into_iter()
        .enumerate()
        .map(|(k, comp)| {
            let mut single = mask.zeros_like();
            for [x, y, z] in comp.voxels {
                let i = single.index(x, y, z);
                single.voxels_mut()[i] = 1.0;
            }
            let mut a = weaken(&single, margin)?;
            a.lesion_id = format!("{prefix}-L{}", k + 1);
            Ok(a)
        })
        .collect()
}

/// Largest world distance between two foreground voxel centers. Only
/// boundary voxels are compared.
pub fn max_diameter(mask: &Volume3D) -> Result<f64> {
    let shape = mask.shape();
    let fg = |x: i64, y: i64, z: i64| Volume3D::is_foreground(mask.get_padded(x, y, z));
    let boundary: Vec<[f64; 3]> = foreground_indices(mask)
        .into_iter()
        .filter(|&[x, y, z]| {
            let on_edge = (0..3).any(|a| [x, y, z][a] == 0 || [x, y, z][a] as usize == shape[a] - 1);
            on_edge
                || !fg(x - 1, y, z)
                || !fg(x + 1, y, z)
                || !fg(x, y - 1, z)
                || !fg(x, y + 1, z)
                || !fg(x, y, z - 1)
                || !fg(x, y, z + 1)
        })
        .map(|p| mask.voxel_to_world(p.map(|v| v as f64)))
        .collect();
    if boundary.is_empty() {
        return Err(Error::Empty("max_diameter needs a non-empty mask"));
    }
    let mut best = 0.0f64;
    for (i, a) in boundary.iter().enumerate() {
        for b in &boundary[i + 1..] {
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            best = best.max(d2);
        }
    }
    Ok(best.sqrt())
}

/// An annotation together with the scan it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub subject: String,
    pub session: String,
    pub annotation: AneurysmAnnotation,
    /// Optional `extracranial` column; absent means intracranial.
    pub extracranial: bool,
}

pub const ANNOTATION_CSV_HEADER: &str =
    "lesion_id,subject,session,center_x_mm,center_y_mm,center_z_mm,radius_mm,shape,location,max_diameter_mm";

pub fn write_annotations_csv(records: &[AnnotationRecord]) -> String {
    let mut out = String::from(ANNOTATION_CSV_HEADER);
    out.push('\n');
    for r in records {
        let a = &r.annotation;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            a.lesion_id,
            r.subject,
            r.session,
            a.center[0],
            a.center[1],
            a.center[2],
            a.radius,
            a.shape,
            a.location.map(|l| l.as_str()).unwrap_or(""),
            a.max_diameter
        ));
    }
    out
}

pub fn read_annotations_csv(reader: impl Read, source: &str) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv(source, e))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(source, format!("missing column {name}")))
    };
    let cols: Vec<usize> = ANNOTATION_CSV_HEADER
        .split(',')
        .map(col)
        .collect::<Result<_>>()?;
    let extra = headers.iter().position(|h| h == "extracranial");
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::csv(source, e))?;
        let line = i + 2;
        let field = |k: usize| row.get(cols[k]).unwrap_or("");
        let num = |k: usize, name: &str| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .map_err(|_| Error::parse(source, format!("line {line}: {name} {:?} is not a number", field(k))))
        };
        let location = match field(8) {
            "" => None,
            s => Some(s.parse().map_err(|e: Error| Error::parse(source, format!("line {line}: {e}")))?),
        };
        let annotation = AneurysmAnnotation {
            lesion_id: field(0).to_string(),
            center: [num(3, "center_x_mm")?, num(4, "center_y_mm")?, num(5, "center_z_mm")?],
            radius: num(6, "radius_mm")?,
            shape: field(7)
                .parse()
                .map_err(|e: Error| Error::parse(source, format!("line {line}: {e}")))?,
            location,
            max_diameter: num(9, "max_diameter_mm")?,
        };
        annotation
            .validate()
            .map_err(|e| Error::parse(source, format!("line {line}: {e}")))?;
        let extracranial = match extra.and_then(|c| row.get(c)) {
            None | Some("") => false,
            Some(s) => matches!(s.to_ascii_lowercase().as_str(), "1" | "true" | "yes"),
        };
        out.push(AnnotationRecord {
            subject: field(1).to_string(),
            session: field(2).to_string(),
            annotation,
            extracranial,
        });
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations_csv(f, &path.display().to_string())
}
