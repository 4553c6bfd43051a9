//! Volumes, labels and the nested tumour regions derived from them.

pub mod brats;
pub mod dataset;
pub mod phantom;
pub mod preprocess;

use std::fmt;

use digest_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::{DigestError, Result};

pub use brats::{load_brats_case, save_case};
pub use dataset::{generate_dataset, CaseRef, Dataset, Manifest, PhantomDatasetSpec, Sample, Split, MANIFEST};
pub use phantom::{generate_phantom, render_phantom, ContrastProfile, LesionSpec, PhantomSpec};
pub use preprocess::{brain_box, preprocess};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T1ce,
    T2,
    Flair,
}

/// Channel order of every volume.
pub const MODALITIES: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1ce => "T1ce",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        }
    }

    /// File name suffix in the BraTS layout, e.g. `case_t1ce.nii.gz`.
    pub fn file_suffix(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial placement of a volume: voxel size in mm and the voxel-to-world
/// affine (three rows of a 4×4 matrix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub spacing: [f32; 3],
    pub affine: [[f32; 4]; 3],
}

impl Default for Geometry {
    fn default() -> Self {
        Self::isotropic(1.0)
    }
}

impl Geometry {
    pub fn isotropic(mm: f32) -> Self {
        Self {
            spacing: [mm; 3],
            affine: [[mm, 0.0, 0.0, 0.0], [0.0, mm, 0.0, 0.0], [0.0, 0.0, mm, 0.0]],
        }
    }

    /// Same placement after dropping `offset` voxels from the start of each axis.
    pub fn shifted(&self, offset: [usize; 3]) -> Self {
        let mut affine = self.affine;
        for row in &mut affine {
            row[3] += (0..3).map(|k| row[k] * offset[k] as f32).sum::<f32>();
        }
        Self {
            spacing: self.spacing,
            affine,
        }
    }
}

/// Four co-registered intensity channels in [`MODALITIES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    dims: [usize; 3],
    data: Vec<f32>,
    pub geometry: Geometry,
}

impl MultiModalVolume {
    pub fn new(dims: [usize; 3], data: Vec<f32>, geometry: Geometry) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || data.len() != 4 * n {
            return Err(DigestError::Shape(format!(
                "{} intensities for 4 channels of {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DigestError::Format(format!(
                "non-finite intensity in {} at voxel {}",
                MODALITIES[i / n],
                i % n
            )));
        }
        Ok(Self { dims, data, geometry })
    }

    pub fn from_channels(channels: [Vec<f32>; 4], dims: [usize; 3], geometry: Geometry) -> Result<Self> {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(4 * n);
        for (m, c) in MODALITIES.iter().zip(&channels) {
            if c.len() != n {
                return Err(DigestError::Shape(format!(
                    "{m} channel has {} voxels, expected {n}",
                    c.len()
                )));
            }
            data.extend_from_slice(c);
        }
        Self::new(dims, data, geometry)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, m: Modality) -> &[f32] {
        let n = self.voxels();
        &self.data[m.index() * n..(m.index() + 1) * n]
    }

    pub fn channel_mut(&mut self, m: Modality) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[m.index() * n..(m.index() + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `4×D×H×W` view as a single-sample network input `1×4×D×H×W`.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::from_vec(&[1, 4, d, h, w], self.data.clone()).expect("length checked at construction")
    }
}

/// BraTS label ids.
pub const BACKGROUND: u8 = 0;
pub const NCR: u8 = 1;
pub const ED: u8 = 2;
pub const ET: u8 = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(DigestError::Shape(format!(
                "{} labels for a {dims:?} volume",
                labels.len()
            )));
        }
        if let Some((i, v)) = labels
            .iter()
            .enumerate()
            .find(|(_, &v)| !matches!(v, BACKGROUND | NCR | ED | ET))
        {
            return Err(DigestError::Format(format!(
                "label {v} at voxel {i} is not one of 0, 1, 2, 4"
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn background(dims: [usize; 3]) -> Self {
        Self {
            dims,
            labels: vec![BACKGROUND; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, id: u8) -> usize {
        self.labels.iter().filter(|&&v| v == id).count()
    }
}

/// Binary ET, TC and WT maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NestedTargets {
    pub dims: [usize; 3],
    pub et: Vec<bool>,
    pub tc: Vec<bool>,
    pub wt: Vec<bool>,
}

impl NestedTargets {
    pub fn regions(&self) -> [&[bool]; 3] {
        [&self.et, &self.tc, &self.wt]
    }

    /// `1×3×D×H×W` tensor of 0/1 values, channels (ET, TC, WT).
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        let data = self
            .regions()
            .iter()
            .flat_map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }))
            .collect();
        Tensor::from_vec(&[1, 3, d, h, w], data).expect("three channels")
    }
}

/// ET = {4}, TC = {1, 4}, WT = {1, 2, 4}.
pub fn nested_targets(labels: &LabelVolume) -> NestedTargets {
    let l = labels.labels();
    NestedTargets {
        dims: labels.dims(),
        et: l.iter().map(|&v| v == ET).collect(),
        tc: l.iter().map(|&v| v == ET || v == NCR).collect(),
        wt: l.iter().map(|&v| v != BACKGROUND).collect(),
    }
}

/// Region names in target channel order.
pub const REGIONS: [&str; 3] = ["ET", "TC", "WT"];
