//! BraTS-layout case directories: `<case>_{t1,t1ce,t2,flair,seg}.nii.gz`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{Geometry, LabelVolume, Modality, MultiModalVolume, MODALITIES};
use crate::{DigestError, Result};

const SEG_SUFFIX: &str = "seg";

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> DigestError {
    DigestError::Nifti {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn find_file(dir: &Path, names: &[String], suffix: &str) -> Result<Option<PathBuf>> {
    let hits: Vec<&String> = names
        .iter()
        .filter(|n| n.ends_with(&format!("_{suffix}.nii.gz")) || n.ends_with(&format!("_{suffix}.nii")))
        .collect();
    match hits.as_slice() {
        [] => Ok(None),
        [one] => Ok(Some(dir.join(one))),
        many => Err(DigestError::Format(format!(
            "several `_{suffix}` volumes in {}: {many:?}",
            dir.display()
        ))),
    }
}

fn read_volume(path: &Path) -> Result<(ArrayD<f32>, Geometry)> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let geometry = geometry_of(obj.header());
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| nifti_err(path, e))?;
    if arr.ndim() != 3 {
        return Err(nifti_err(
            path,
            format!("expected a 3-D volume, got shape {:?}", arr.shape()),
        ));
    }
    Ok((arr, geometry))
}

fn geometry_of(h: &NiftiHeader) -> Geometry {
    let spacing = [h.pixdim[1], h.pixdim[2], h.pixdim[3]];
    if h.sform_code > 0 {
        Geometry {
            spacing,
            affine: [h.srow_x, h.srow_y, h.srow_z],
        }
    } else {
        let mut g = Geometry::isotropic(1.0);
        for k in 0..3 {
            g.affine[k][k] = spacing[k];
        }
        g.spacing = spacing;
        g
    }
}

fn header_for(g: &Geometry) -> NiftiHeader {
    let mut h = NiftiHeader {
        sform_code: 1,
        qform_code: 0,
        xyzt_units: 2,
        srow_x: g.affine[0],
        srow_y: g.affine[1],
        srow_z: g.affine[2],
        ..NiftiHeader::default()
    };
    h.pixdim[1..4].copy_from_slice(&g.spacing);
    h
}

fn dims_of(arr: &ArrayD<f32>) -> [usize; 3] {
    [arr.shape()[0], arr.shape()[1], arr.shape()[2]]
}

/// Loads the four modalities (in [`MODALITIES`] order) and the label map.
pub fn load_brats_case(dir: &Path) -> Result<(MultiModalVolume, LabelVolume)> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| DigestError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();

    let mut dims = None;
    let mut geometry = None;
    let mut data = Vec::new();
    for m in MODALITIES {
        let path = find_file(dir, &names, m.file_suffix())?.ok_or_else(|| DigestError::MissingModality {
            modality: m.name().to_string(),
            dir: dir.to_path_buf(),
        })?;
        let (arr, g) = read_volume(&path)?;
        let d = dims_of(&arr);
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(DigestError::Shape(format!(
                    "{m} volume is {d:?} but T1 is {prev:?} in {}",
                    dir.display()
                )))
            }
            _ => {}
        }
        geometry.get_or_insert(g);
        data.extend(arr.iter().copied());
    }
    let dims = dims.expect("four modalities read");

    let seg = find_file(dir, &names, SEG_SUFFIX)?.ok_or_else(|| DigestError::MissingModality {
        modality: "segmentation".to_string(),
        dir: dir.to_path_buf(),
    })?;
    let (arr, _) = read_volume(&seg)?;
    if dims_of(&arr) != dims {
        return Err(DigestError::Shape(format!(
            "segmentation is {:?} but the images are {dims:?}",
            dims_of(&arr)
        )));
    }
    let mut labels = Vec::with_capacity(arr.len());
    for (i, &v) in arr.iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(DigestError::Format(format!(
                "label {v} at voxel {i} of {} is not one of 0, 1, 2, 4",
                seg.display()
            )));
        }
        labels.push(v as u8);
    }
    let vol = MultiModalVolume::new(dims, data, geometry.expect("four modalities read"))?;
    let lab = LabelVolume::new(dims, labels).map_err(|e| match e {
        DigestError::Format(msg) => DigestError::Format(format!("{}: {msg}", seg.display())),
        other => other,
    })?;
    Ok((vol, lab))
}

/// Path of one modality file of a case.
pub fn modality_path(dir: &Path, case_id: &str, m: Modality) -> PathBuf {
    dir.join(format!("{case_id}_{}.nii.gz", m.file_suffix()))
}

/// Writes a case in the layout [`load_brats_case`] reads.
pub fn save_case(dir: &Path, case_id: &str, vol: &MultiModalVolume, labels: &LabelVolume) -> Result<()> {
    if vol.dims() != labels.dims() {
        return Err(DigestError::Shape(format!(
            "volume {:?} vs labels {:?}",
            vol.dims(),
            labels.dims()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| DigestError::io(dir, e))?;
    let [d, h, w] = vol.dims();
    let header = header_for(&vol.geometry);
    for m in MODALITIES {
        let path = modality_path(dir, case_id, m);
        let arr = Array3::from_shape_vec((d, h, w), vol.channel(m).to_vec()).expect("dims match");
        WriterOptions::new(&path)
            .reference_header(&header)
            .write_nifti(&arr)
            .map_err(|e| nifti_err(&path, e))?;
    }
    let path = dir.join(format!("{case_id}_{SEG_SUFFIX}.nii.gz"));
    let arr = Array3::from_shape_vec((d, h, w), labels.labels().to_vec()).expect("dims match");
    WriterOptions::new(&path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| nifti_err(&path, e))?;
    Ok(())
}
