//! Geometry-aware volume containers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Array extent in `(z, y, x)` order.
pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Mr,
    Ct,
    SynthCt,
    #[default]
    Other,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Mr => "MR",
            Modality::Ct => "CT",
            Modality::SynthCt => "SYNTH_CT",
            Modality::Other => "OTHER",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "MR" => Some(Modality::Mr),
            "CT" => Some(Modality::Ct),
            "SYNTH_CT" => Some(Modality::SynthCt),
            "OTHER" => Some(Modality::Other),
            _ => None,
        }
    }
}

/// Physical placement of a grid: millimeters per voxel and position of the
/// first voxel, both in `(z, y, x)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry { spacing, origin };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(spacing: f64) -> Self {
        Geometry {
            spacing: [spacing; 3],
            origin: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be finite and > 0, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    fn within(&self, other: &Geometry, tol: f64) -> bool {
        self.spacing
            .iter()
            .zip(other.spacing.iter())
            .chain(self.origin.iter().zip(other.origin.iter()))
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

fn validate_shape(shape: Shape3, len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidVolume(format!(
            "every axis needs at least one voxel, got {shape:?}"
        )));
    }
    if voxel_count(shape) != len {
        return Err(Error::InvalidVolume(format!(
            "shape {shape:?} holds {} voxels but data has {len}",
            voxel_count(shape)
        )));
    }
    Ok(())
}

/// A 3D scalar image. Immutable once constructed; every constructor
/// enforces finiteness, positive spacing and a non-empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: Shape3,
    geometry: Geometry,
    modality: Modality,
}

impl Volume {
    pub fn new(
        data: Vec<f32>,
        shape: Shape3,
        geometry: Geometry,
        modality: Modality,
    ) -> Result<Self> {
        validate_shape(shape, data.len())?;
        geometry.validate()?;
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFiniteValues { count: bad });
        }
        Ok(Volume {
            data,
            shape,
            geometry,
            modality,
        })
    }

    pub fn filled(
        shape: Shape3,
        value: f32,
        geometry: Geometry,
        modality: Modality,
    ) -> Result<Self> {
        Volume::new(
            alloc::vec![value; voxel_count(shape)],
            shape,
            geometry,
            modality,
        )
    }

    /// Same geometry and modality, new voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(data, self.shape, self.geometry, self.modality)
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }
}

/// Integer-labelled grid; `0` is always background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    labels: Vec<u32>,
    shape: Shape3,
    geometry: Geometry,
    label_names: BTreeMap<u32, String>,
}

impl LabelVolume {
    pub fn new(
        labels: Vec<u32>,
        shape: Shape3,
        geometry: Geometry,
        label_names: BTreeMap<u32, String>,
    ) -> Result<Self> {
        validate_shape(shape, labels.len())?;
        geometry.validate()?;
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != 0 && !label_names.contains_key(&l))
        {
            return Err(Error::InvalidVolume(format!(
                "label {bad} is not declared in label_names"
            )));
        }
        Ok(LabelVolume {
            labels,
            shape,
            geometry,
            label_names,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn label_names(&self) -> &BTreeMap<u32, String> {
        &self.label_names
    }

    pub fn mask(&self, label: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    /// Voxels carrying any non-background label.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Copy with labels rewritten through `map` (missing keys become background).
    pub fn remap(&self, map: &BTreeMap<u32, u32>, names: BTreeMap<u32, String>) -> Result<Self> {
        let labels = self
            .labels
            .iter()
            .map(|l| map.get(l).copied().unwrap_or(0))
            .collect();
        LabelVolume::new(labels, self.shape, self.geometry, names)
    }
}

/// Source/target pair sharing one grid, optionally with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub source: Volume,
    pub target: Volume,
    pub labels: Option<LabelVolume>,
}

impl VolumePair {
    pub fn new(source: Volume, target: Volume, labels: Option<LabelVolume>) -> Result<Self> {
        if source.shape() != target.shape() || source.geometry() != target.geometry() {
            return Err(Error::Misaligned(format!(
                "source {:?}/{:?} vs target {:?}/{:?}",
                source.shape(),
                source.geometry(),
                target.shape(),
                target.geometry()
            )));
        }
        if let Some(l) = &labels {
            if l.shape() != source.shape() || l.geometry() != source.geometry() {
                return Err(Error::Misaligned(
                    "labels do not share the pair's grid".into(),
                ));
            }
        }
        Ok(VolumePair {
            source,
            target,
            labels,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.source.shape()
    }
}

/// True when both grids have the same shape and every spacing/origin
/// component agrees within `tol` millimeters.
pub fn check_alignment(a: &Volume, b: &Volume, tol: f64) -> bool {
    a.shape() == b.shape() && a.geometry().within(b.geometry(), tol)
}

pub(crate) fn ensure_aligned(a: Shape3, ga: &Geometry, b: Shape3, gb: &Geometry) -> Result<()> {
    if a != b || !ga.within(gb, 1e-6) {
        return Err(Error::Misaligned(format!(
            "{a:?} @ {:?} vs {b:?} @ {:?}",
            ga.spacing, gb.spacing
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cube(v: f32, spacing: [f64; 3]) -> Volume {
        Volume::filled(
            [4, 4, 4],
            v,
            Geometry::new(spacing, [0.0; 3]).unwrap(),
            Modality::Ct,
        )
        .unwrap()
    }

    #[test]
    fn rejects_nan_with_count() {
        let mut data = vec![0.0f32; 8];
        data[1] = f32::NAN;
        data[5] = f32::INFINITY;
        let err = Volume::new(data, [2, 2, 2], Geometry::isotropic(1.0), Modality::Mr).unwrap_err();
        assert_eq!(err, Error::NonFiniteValues { count: 2 });
    }

    #[test]
    fn rejects_bad_spacing_and_shape() {
        assert!(Geometry::new([1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Volume::new(vec![], [0, 1, 1], Geometry::isotropic(1.0), Modality::Mr).is_err());
        assert!(Volume::new(
            vec![0.0; 7],
            [2, 2, 2],
            Geometry::isotropic(1.0),
            Modality::Mr
        )
        .is_err());
    }

    #[test]
    fn alignment_tolerance() {
        let a = cube(0.0, [1.0, 1.0, 1.0]);
        assert!(check_alignment(&a, &a.clone(), 1e-3));
        let b = cube(0.0, [1.0, 1.5, 1.0]);
        assert!(!check_alignment(&a, &b, 1e-3));
        let c = cube(0.0, [1.0, 1.0 + 1e-6, 1.0]);
        assert!(check_alignment(&a, &c, 1e-3));
        let d = Volume::filled([4, 4, 5], 0.0, Geometry::isotropic(1.0), Modality::Ct).unwrap();
        assert!(!check_alignment(&a, &d, 1e-3));
    }

    #[test]
    fn labels_must_be_declared() {
        let names: BTreeMap<u32, String> = [(1, "tube".into())].into_iter().collect();
        assert!(LabelVolume::new(
            vec![0, 1],
            [1, 1, 2],
            Geometry::isotropic(1.0),
            names.clone()
        )
        .is_ok());
        assert!(LabelVolume::new(vec![0, 2], [1, 1, 2], Geometry::isotropic(1.0), names).is_err());
    }

    #[test]
    fn pair_requires_identical_grids() {
        let a = cube(0.0, [1.0; 3]);
        let b = cube(1.0, [2.0, 1.0, 1.0]);
        assert!(matches!(
            VolumePair::new(a.clone(), b, None),
            Err(Error::Misaligned(_))
        ));
        assert!(VolumePair::new(a.clone(), a, None).is_ok());
    }
}
