//! Volumetric images and label maps with physical-space metadata.
//!
//! Voxel arrays are stored x-fastest: the voxel at `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.

mod io;
mod resample;

use std::fmt;

use thiserror::Error;

use crate::autodiff::Tensor;

pub use io::{read_image, read_labels, read_volume, write_labels, write_volume, MetaVolume};
pub use resample::{resample_labels, resample_volume, resampled_dims};

/// Number of segmentation classes (background plus four organs).
pub const N_CLASSES: usize = 5;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("voxel buffer holds {found} elements, geometry requires {expected}")]
    ElementCountMismatch { expected: usize, found: usize },
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("label value {value} at voxel {index} is not a known organ code")]
    InvalidLabel { index: usize, value: u8 },
    #[error("intensity {value} at voxel {index} cannot be stored as a 16-bit integer")]
    NotRepresentable { index: usize, value: f32 },
    #[error("malformed MetaImage header: {0}")]
    MalformedHeader(String),
    #[error("unsupported element type `{0}`")]
    UnsupportedElementType(String),
    #[error("expected {expected} volume, file holds {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("axis {axis} has {len} voxels; interpolation needs at least 2")]
    DegenerateAxis { axis: usize, len: usize },
    #[error("geometry mismatch between paired volumes")]
    GeometryMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Grid layout of a volume in physical space. `origin` is the centre of the
/// first voxel, in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Self {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidGeometry(format!(
                "zero-sized dims {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing {:?} must be positive and finite",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!(
                "origin {:?} must be finite",
                self.origin
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let yz = index / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    /// Physical position (mm) of a voxel centre.
    pub fn position(&self, idx: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + idx[a] as f64 * self.spacing[a])
    }

    /// Physical extent covered by the voxel grid along each axis.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }
}

/// Segmentation classes; the discriminant is the label code and the network
/// output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum OrganLabel {
    Background = 0,
    Prostate = 1,
    SeminalVesicles = 2,
    Bladder = 3,
    Rectum = 4,
}

impl OrganLabel {
    pub const ALL: [OrganLabel; N_CLASSES] = [
        OrganLabel::Background,
        OrganLabel::Prostate,
        OrganLabel::SeminalVesicles,
        OrganLabel::Bladder,
        OrganLabel::Rectum,
    ];

    /// The four evaluated structures.
    pub const ORGANS: [OrganLabel; 4] = [
        OrganLabel::Prostate,
        OrganLabel::SeminalVesicles,
        OrganLabel::Bladder,
        OrganLabel::Rectum,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            OrganLabel::Background => "background",
            OrganLabel::Prostate => "prostate",
            OrganLabel::SeminalVesicles => "seminal_vesicles",
            OrganLabel::Bladder => "bladder",
            OrganLabel::Rectum => "rectum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name)
    }
}

impl fmt::Display for OrganLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    geometry: Geometry,
    voxels: Vec<f32>,
}

impl Volume3 {
    pub fn new(geometry: Geometry, voxels: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if voxels.len() != geometry.len() {
            return Err(VolumeError::ElementCountMismatch {
                expected: geometry.len(),
                found: voxels.len(),
            });
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { geometry, voxels })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self> {
        Self::new(geometry, vec![value; geometry.len()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.geometry.index(x, y, z)]
    }
}

/// Integer organ label map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap3 {
    geometry: Geometry,
    labels: Vec<u8>,
}

impl LabelMap3 {
    pub fn new(geometry: Geometry, labels: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(VolumeError::ElementCountMismatch {
                expected: geometry.len(),
                found: labels.len(),
            });
        }
        if let Some(index) = labels.iter().position(|&l| l as usize >= N_CLASSES) {
            return Err(VolumeError::InvalidLabel {
                index,
                value: labels[index],
            });
        }
        Ok(Self { geometry, labels })
    }

    pub fn filled(geometry: Geometry, label: OrganLabel) -> Result<Self> {
        Self::new(geometry, vec![label.code(); geometry.len()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.geometry.index(x, y, z)]
    }

    /// Voxel count per class code.
    pub fn histogram(&self) -> [usize; N_CLASSES] {
        let mut h = [0; N_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Class codes present at least once, ascending.
    pub fn present_classes(&self) -> Vec<u8> {
        self.histogram()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c as u8)
            .collect()
    }

    pub fn matches(&self, image: &Volume3) -> bool {
        self.geometry == image.geometry
    }
}

/// One channel per class: channel `c` is 1 where the label equals `c`.
pub fn one_hot(labels: &LabelMap3, n_classes: usize) -> Result<Tensor<f32>> {
    let n = labels.geometry.len();
    let mut data = vec![0.0f32; n_classes * n];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l as usize >= n_classes {
            return Err(VolumeError::InvalidLabel { index: i, value: l });
        }
        data[l as usize * n + i] = 1.0;
    }
    let [nx, ny, nz] = labels.geometry.dims;
    Ok(Tensor::from_vec(vec![n_classes, nz, ny, nx], data).expect("shape matches buffer"))
}
