//! Case directories, train/val/test splits and network-ready samples.

use std::fs;
use std::path::{Path, PathBuf};

use digest_nn::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    brain_box, load_brats_case, nested_targets, preprocess, save_case, LabelVolume, MultiModalVolume, PhantomSpec,
};
use crate::{DigestError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Generator settings for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomDatasetSpec>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Shuffles `ids` with `seed` and splits off validation and test cases.
    pub fn split(mut ids: Vec<String>, val: usize, test: usize, seed: u64) -> Result<Self> {
        if val + test >= ids.len() {
            return Err(DigestError::Config(format!(
                "{} cases cannot provide {val} validation and {test} test cases plus training data",
                ids.len()
            )));
        }
        ids.sort();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test_ids = ids.split_off(ids.len() - test);
        let val_ids = ids.split_off(ids.len() - val);
        Ok(Self {
            train: ids,
            val: val_ids,
            test: test_ids,
            phantom: None,
        })
    }
}

/// How a synthetic dataset is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomDatasetSpec {
    pub cases: usize,
    pub val_cases: usize,
    pub test_cases: usize,
    /// Lesions per case are drawn uniformly from this inclusive range.
    pub lesions: (usize, usize),
    pub phantom: PhantomSpec,
    pub seed: u64,
}

impl Default for PhantomDatasetSpec {
    fn default() -> Self {
        Self {
            cases: 54,
            val_cases: 8,
            test_cases: 20,
            lesions: (1, 2),
            phantom: PhantomSpec::default(),
            seed: 0,
        }
    }
}

impl PhantomDatasetSpec {
    /// Phantom settings of case `i`.
    pub fn case_spec(&self, i: usize) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0000_0000_0000 ^ i as u64);
        let (lo, hi) = self.lesions;
        PhantomSpec {
            num_lesions: rng.random_range(lo.min(hi)..=hi.max(lo)),
            seed: rng.random(),
            ..self.phantom.clone()
        }
    }

    /// Resizes to `cases`, keeping the validation and test fractions.
    pub fn with_cases(&self, cases: usize) -> Self {
        let share = |n: usize| (n as f64 * cases as f64 / self.cases.max(1) as f64).round() as usize;
        Self {
            cases,
            val_cases: share(self.val_cases),
            test_cases: share(self.test_cases),
            ..self.clone()
        }
    }

    pub fn case_id(i: usize) -> String {
        format!("case_{i:04}")
    }
}

/// Generates a synthetic dataset under `root`, overwriting earlier files of
/// the same cases.
pub fn generate_dataset(root: &Path, spec: &PhantomDatasetSpec) -> Result<Manifest> {
    let mut manifest = Manifest::split(
        (0..spec.cases).map(PhantomDatasetSpec::case_id).collect(),
        spec.val_cases,
        spec.test_cases,
        spec.seed,
    )?;
    fs::create_dir_all(root).map_err(|e| DigestError::io(root, e))?;
    for i in 0..spec.cases {
        let id = PhantomDatasetSpec::case_id(i);
        let (vol, lab) = super::generate_phantom(&spec.case_spec(i))?;
        save_case(&root.join(&id), &id, &vol, &lab)?;
    }
    manifest.phantom = Some(spec.clone());
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DigestError::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| DigestError::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct CaseRef {
    pub id: String,
    pub volume: MultiModalVolume,
    pub labels: LabelVolume,
}

/// Network-ready pair: `1×4×D×H×W` input and `1×3×D×H×W` (ET, TC, WT) target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Tensor,
    pub target: Tensor,
}

impl CaseRef {
    pub fn sample(&self, crop: [usize; 3], train: bool, seed: u64) -> Result<Sample> {
        let (v, l) = preprocess(&self.volume, &self.labels, crop, train, seed)?;
        Ok(Sample {
            id: self.id.clone(),
            input: v.to_tensor(),
            target: nested_targets(&l).to_tensor(),
        })
    }

    /// The whole normalised brain box, at least `min_size` on each axis.
    pub fn full_sample(&self, min_size: [usize; 3]) -> Result<Sample> {
        let (v, l) = brain_box(&self.volume, &self.labels, min_size)?;
        Ok(Sample {
            id: self.id.clone(),
            input: v.to_tensor(),
            target: nested_targets(&l).to_tensor(),
        })
    }
}

/// All cases of a dataset directory, held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    train: Vec<CaseRef>,
    val: Vec<CaseRef>,
    test: Vec<CaseRef>,
}

impl Dataset {
    /// Opens `root`. Without a manifest, every subdirectory is a case and
    /// the split is drawn with `seed`.
    pub fn open(root: &Path, fallback_split: (usize, usize), seed: u64) -> Result<Self> {
        let path = root.join(MANIFEST);
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| DigestError::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| DigestError::Format(format!("{}: {e}", path.display())))?
        } else {
            let ids = fs::read_dir(root)
                .map_err(|e| DigestError::io(root, e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            Manifest::split(ids, fallback_split.0, fallback_split.1, seed)?
        };
        let load = |ids: &[String]| -> Result<Vec<CaseRef>> {
            ids.iter()
                .map(|id| {
                    let (volume, labels) = load_brats_case(&root.join(id))?;
                    Ok(CaseRef {
                        id: id.clone(),
                        volume,
                        labels,
                    })
                })
                .collect()
        };
        Ok(Self {
            root: root.to_path_buf(),
            train: load(&manifest.train)?,
            val: load(&manifest.val)?,
            test: load(&manifest.test)?,
            manifest,
        })
    }

    /// In-memory dataset, mostly for tests.
    pub fn from_cases(train: Vec<CaseRef>, val: Vec<CaseRef>, test: Vec<CaseRef>) -> Self {
        let ids = |c: &[CaseRef]| c.iter().map(|c| c.id.clone()).collect();
        Self {
            root: PathBuf::new(),
            manifest: Manifest {
                train: ids(&train),
                val: ids(&val),
                test: ids(&test),
                phantom: None,
            },
            train,
            val,
            test,
        }
    }

    pub fn cases(&self, split: Split) -> &[CaseRef] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Centre-cropped samples of a split.
    pub fn eval_samples(&self, split: Split, crop: [usize; 3]) -> Result<Vec<Sample>> {
        self.cases(split).iter().map(|c| c.sample(crop, false, 0)).collect()
    }

    /// Whole brain boxes of a split, for sliding-window inference.
    pub fn full_samples(&self, split: Split, min_size: [usize; 3]) -> Result<Vec<Sample>> {
        self.cases(split).iter().map(|c| c.full_sample(min_size)).collect()
    }
}
