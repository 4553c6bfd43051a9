//! Synthetic multi-modal brain phantoms with layered lesions.
//!
//! The brain is an ellipsoid of healthy tissue on a zero background. Each
//! lesion is a set of three concentric ellipsoids: a necrotic core, an
//! enhancing rim around it and an oedema halo outside both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Geometry, LabelVolume, MultiModalVolume, ED, ET, NCR};
use crate::{DigestError, Result};

/// Brain semi-axis as a fraction of the volume extent.
pub const BRAIN_EXTENT: f32 = 0.45;

/// Smallest intensity inside the brain, so that "nonzero" means "brain".
const BRAIN_FLOOR: f32 = 1e-3;

/// Mean intensity of each tissue in each modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastProfile {
    pub healthy: [f32; 4],
    /// `lesion[m] = [NCR, ED, ET]` for modality `m`.
    pub lesion: [[f32; 3]; 4],
}

impl Default for ContrastProfile {
    /// The enhancing rim and dark necrosis only stand out in T1ce, both
    /// T2 and FLAIR light up the whole lesion, and T1 shows a faint
    /// hypointensity across it.
    fn default() -> Self {
        Self {
            healthy: [1.0, 1.0, 1.0, 1.0],
            lesion: [
                [0.80, 0.88, 0.88],
                [0.50, 1.00, 2.20],
                [1.70, 1.70, 1.70],
                [1.45, 1.60, 1.45],
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub volume_size: [usize; 3],
    pub num_lesions: usize,
    /// Outer (oedema) radius range in voxels.
    pub lesion_radius_range: (f32, f32),
    pub contrast: ContrastProfile,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            volume_size: [40, 40, 40],
            num_lesions: 1,
            lesion_radius_range: (5.0, 9.0),
            contrast: ContrastProfile::default(),
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.volume_size.contains(&0) {
            return Err(DigestError::Phantom(format!(
                "volume size {:?} has an empty axis",
                self.volume_size
            )));
        }
        let (lo, hi) = self.lesion_radius_range;
        let half = *self.volume_size.iter().min().unwrap() as f32 / 2.0;
        if !(lo > 0.0 && lo <= hi && hi <= half) {
            return Err(DigestError::Phantom(format!(
                "lesion radii ({lo}, {hi}) must satisfy 0 < min <= max <= {half}"
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DigestError::Phantom(format!(
                "noise_std {} must be finite and non-negative",
                self.noise_std
            )));
        }
        let c = &self.contrast;
        if c.healthy
            .iter()
            .chain(c.lesion.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(DigestError::Phantom("contrast profile has non-finite entries".into()));
        }
        Ok(())
    }

    fn brain(&self) -> ([f32; 3], [f32; 3]) {
        let centre = self.volume_size.map(|s| (s as f32 - 1.0) / 2.0);
        let semi = self.volume_size.map(|s| s as f32 * BRAIN_EXTENT);
        (centre, semi)
    }
}

/// One layered lesion. Radii are in units of the axis-scaled distance
/// `sqrt(Σ ((x_k − centre_k) / axes_k)²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub centre: [f32; 3],
    pub axes: [f32; 3],
    pub necrosis_radius: f32,
    pub core_radius: f32,
    pub outer_radius: f32,
}

impl LesionSpec {
    pub fn sphere(centre: [f32; 3], necrosis: f32, core: f32, outer: f32) -> Self {
        Self {
            centre,
            axes: [1.0; 3],
            necrosis_radius: necrosis,
            core_radius: core,
            outer_radius: outer,
        }
    }

    /// Label of voxel `p` under this lesion alone, if inside it.
    pub fn label_at(&self, p: [usize; 3]) -> Option<u8> {
        let mut q = 0.0f32;
        for k in 0..3 {
            let t = (p[k] as f32 - self.centre[k]) / self.axes[k];
            q += t * t;
        }
        let r = q.sqrt();
        if r <= self.necrosis_radius {
            Some(NCR)
        } else if r <= self.core_radius {
            Some(ET)
        } else if r <= self.outer_radius {
            Some(ED)
        } else {
            None
        }
    }
}

fn severity(label: u8) -> u8 {
    match label {
        NCR => 3,
        ET => 2,
        ED => 1,
        _ => 0,
    }
}

fn sample_lesion(spec: &PhantomSpec, rng: &mut ChaCha8Rng, index: usize) -> Result<LesionSpec> {
    let (lo, hi) = spec.lesion_radius_range;
    let outer = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let axes = [0; 3].map(|_| rng.random_range(0.8f32..=1.2));
    let core = outer * rng.random_range(0.45f32..=0.7);
    let necrosis = core * rng.random_range(0.35f32..=0.6);

    let (bc, semi) = spec.brain();
    let mut room = [0.0f32; 3];
    for k in 0..3 {
        room[k] = semi[k] - outer * axes[k] - 1.0;
        if room[k] <= 0.0 {
            return Err(DigestError::Phantom(format!(
                "lesion {index} with outer radius {outer:.2} cannot fit in a brain of \
                 semi-axes {semi:?} inside a {:?} volume",
                spec.volume_size
            )));
        }
    }
    loop {
        let u = [0; 3].map(|_| rng.random_range(-1.0f32..=1.0));
        if u.iter().map(|v| v * v).sum::<f32>() <= 1.0 {
            let centre = [0, 1, 2].map(|k| bc[k] + u[k] * room[k]);
            return Ok(LesionSpec {
                centre,
                axes,
                necrosis_radius: necrosis,
                core_radius: core,
                outer_radius: outer,
            });
        }
    }
}

/// Draws lesions and renders the phantom. Equal specs give bitwise-equal
/// output.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(MultiModalVolume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lesions = (0..spec.num_lesions)
        .map(|i| sample_lesion(spec, &mut rng, i))
        .collect::<Result<Vec<_>>>()?;
    render(spec, &lesions, &mut rng)
}

/// Renders the given lesions; lesion sampling fields of `spec` are ignored.
pub fn render_phantom(spec: &PhantomSpec, lesions: &[LesionSpec]) -> Result<(MultiModalVolume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    render(spec, lesions, &mut rng)
}

fn render(spec: &PhantomSpec, lesions: &[LesionSpec], rng: &mut ChaCha8Rng) -> Result<(MultiModalVolume, LabelVolume)> {
    let [d, h, w] = spec.volume_size;
    let n = d * h * w;
    let (bc, semi) = spec.brain();
    let mut labels = vec![0u8; n];
    let mut brain = vec![false; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z, y, x];
                let i = (z * h + y) * w + x;
                let q: f32 = (0..3).map(|k| ((p[k] as f32 - bc[k]) / semi[k]).powi(2)).sum();
                brain[i] = q <= 1.0;
                for l in lesions {
                    if let Some(lab) = l.label_at(p) {
                        if severity(lab) > severity(labels[i]) {
                            labels[i] = lab;
                        }
                    }
                }
                if labels[i] != 0 {
                    brain[i] = true;
                }
            }
        }
    }

    let noise =
        Normal::new(0.0f32, spec.noise_std).map_err(|e| DigestError::Phantom(format!("noise distribution: {e}")))?;
    let c = &spec.contrast;
    let mut data = vec![0.0f32; 4 * n];
    for m in 0..4 {
        let chan = &mut data[m * n..(m + 1) * n];
        for i in 0..n {
            if !brain[i] {
                continue;
            }
            let mean = match labels[i] {
                NCR => c.lesion[m][0],
                ED => c.lesion[m][1],
                ET => c.lesion[m][2],
                _ => c.healthy[m],
            };
            let eps = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            chan[i] = (mean + eps).max(BRAIN_FLOOR);
        }
    }
    let vol = MultiModalVolume::new(spec.volume_size, data, Geometry::default())?;
    let lab = LabelVolume::new(spec.volume_size, labels)?;
    Ok((vol, lab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oversized_lesion_rejected() {
        let spec = PhantomSpec {
            volume_size: [16, 16, 16],
            lesion_radius_range: (8.0, 8.0),
            ..PhantomSpec::default()
        };
        let err = generate_phantom(&spec).unwrap_err();
        assert!(err.to_string().contains("cannot fit"), "{err}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            PhantomSpec {
                noise_std: -1.0,
                ..PhantomSpec::default()
            },
            PhantomSpec {
                lesion_radius_range: (0.0, 2.0),
                ..PhantomSpec::default()
            },
            PhantomSpec {
                lesion_radius_range: (4.0, 3.0),
                ..PhantomSpec::default()
            },
            PhantomSpec {
                lesion_radius_range: (2.0, 30.0),
                ..PhantomSpec::default()
            },
        ];
        for s in bad {
            assert!(matches!(generate_phantom(&s), Err(DigestError::Phantom(_))));
        }
    }

    #[test]
    fn outside_brain_is_exactly_zero() {
        let (vol, _) = generate_phantom(&PhantomSpec::default()).unwrap();
        for m in super::super::MODALITIES {
            assert_eq!(vol.channel(m)[0], 0.0);
            assert!(vol.channel(m).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn lesions_stay_inside_the_brain() {
        for seed in 0..10 {
            let spec = PhantomSpec {
                num_lesions: 2,
                seed,
                ..PhantomSpec::default()
            };
            let (_, lab) = generate_phantom(&spec).unwrap();
            let (bc, semi) = spec.brain();
            let [d, h, w] = spec.volume_size;
            for (i, &l) in lab.labels().iter().enumerate() {
                if l != 0 {
                    let p = [i / (h * w), (i / w) % h, i % w];
                    assert!(p[0] < d);
                    let q: f32 = (0..3).map(|k| ((p[k] as f32 - bc[k]) / semi[k]).powi(2)).sum();
                    assert!(q <= 1.0, "seed {seed}: lesion voxel {p:?} outside brain");
                }
            }
            assert!(lab.count(ED) > 0);
        }
    }
}
