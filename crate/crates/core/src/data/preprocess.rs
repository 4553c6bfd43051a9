//! Brain bounding-box crop, per-channel z-scoring and sub-volume cropping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelVolume, MultiModalVolume, MODALITIES};
use crate::{DigestError, Result};

/// Half-open box `start..end` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub start: [usize; 3],
    pub end: [usize; 3],
}

impl Region {
    pub fn size(&self) -> [usize; 3] {
        [0, 1, 2].map(|k| self.end[k] - self.start[k])
    }
}

/// Smallest box holding every voxel that is nonzero in any channel.
pub fn brain_bbox(vol: &MultiModalVolume) -> Option<Region> {
    let [d, h, w] = vol.dims();
    let n = vol.voxels();
    let mut start = [usize::MAX; 3];
    let mut end = [0usize; 3];
    let data = vol.data();
    let mut any = false;
    for i in 0..n {
        if (0..4).any(|c| data[c * n + i] != 0.0) {
            any = true;
            let p = [i / (h * w), (i / w) % h, i % w];
            for k in 0..3 {
                start[k] = start[k].min(p[k]);
                end[k] = end[k].max(p[k] + 1);
            }
        }
    }
    debug_assert!(!any || end.iter().zip([d, h, w]).all(|(e, s)| *e <= s));
    any.then_some(Region { start, end })
}

fn extract<T: Copy>(src: &[T], dims: [usize; 3], r: Region) -> Vec<T> {
    let [_, h, w] = dims;
    let [sd, sh, sw] = r.size();
    let mut out = Vec::with_capacity(sd * sh * sw);
    for z in r.start[0]..r.end[0] {
        for y in r.start[1]..r.end[1] {
            let row = (z * h + y) * w;
            out.extend_from_slice(&src[row + r.start[2]..row + r.end[2]]);
        }
    }
    out
}

fn crop_pair(vol: &MultiModalVolume, labels: &LabelVolume, r: Region) -> Result<(MultiModalVolume, LabelVolume)> {
    let dims = vol.dims();
    let mut channels: [Vec<f32>; 4] = Default::default();
    for (c, m) in MODALITIES.iter().enumerate() {
        channels[c] = extract(vol.channel(*m), dims, r);
    }
    let g = vol.geometry.shifted(r.start);
    let v = MultiModalVolume::from_channels(channels, r.size(), g)?;
    let l = LabelVolume::new(r.size(), extract(labels.labels(), dims, r))?;
    Ok((v, l))
}

/// Grows `r` to at least `size` per axis, staying inside `dims`.
fn widen(r: Region, size: [usize; 3], dims: [usize; 3]) -> Region {
    let mut out = r;
    for k in 0..3 {
        let have = r.end[k] - r.start[k];
        if have < size[k] {
            let extra = size[k] - have;
            let start = r.start[k].saturating_sub(extra / 2);
            let start = start.min(dims[k] - size[k]);
            out.start[k] = start;
            out.end[k] = start + size[k];
        }
    }
    out
}

/// Z-scores each channel over its nonzero voxels in place; zeros stay zero.
pub fn zscore_nonzero(vol: &mut MultiModalVolume) {
    for m in MODALITIES {
        let chan = vol.channel_mut(m);
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for &v in chan.iter() {
            if v != 0.0 {
                n += 1;
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for v in chan.iter_mut() {
            if *v != 0.0 {
                *v = ((*v as f64 - mean) * inv) as f32;
            }
        }
    }
}

/// Crops to the brain box, normalises, then takes a `crop`-sized window:
/// random in train mode, centred otherwise.
///
/// Normalisation statistics come from the whole brain box, not the window.
/// A brain box smaller than `crop` is widened inside the volume.
pub fn preprocess(
    vol: &MultiModalVolume,
    labels: &LabelVolume,
    crop: [usize; 3],
    train: bool,
    seed: u64,
) -> Result<(MultiModalVolume, LabelVolume)> {
    let (v, l) = brain_box(vol, labels, crop)?;
    let size = v.dims();
    let start = if train {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [0, 1, 2].map(|k| rng.random_range(0..=size[k] - crop[k]))
    } else {
        [0, 1, 2].map(|k| (size[k] - crop[k]) / 2)
    };
    let window = Region {
        start,
        end: [0, 1, 2].map(|k| start[k] + crop[k]),
    };
    crop_pair(&v, &l, window)
}

/// The normalised brain box, widened to at least `min_size`.
pub fn brain_box(
    vol: &MultiModalVolume,
    labels: &LabelVolume,
    min_size: [usize; 3],
) -> Result<(MultiModalVolume, LabelVolume)> {
    let dims = vol.dims();
    if labels.dims() != dims {
        return Err(DigestError::Shape(format!(
            "labels {:?} do not match volume {dims:?}",
            labels.dims()
        )));
    }
    if min_size.contains(&0) || (0..3).any(|k| min_size[k] > dims[k]) {
        return Err(DigestError::Shape(format!(
            "crop {min_size:?} does not fit in volume {dims:?}"
        )));
    }
    let bbox = brain_bbox(vol).ok_or_else(|| DigestError::Shape("volume has no nonzero voxels".into()))?;
    let (mut v, l) = crop_pair(vol, labels, widen(bbox, min_size, dims))?;
    zscore_nonzero(&mut v);
    Ok((v, l))
}
