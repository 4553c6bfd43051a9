#![allow(dead_code)]

use digest_core::data::{generate_phantom, CaseRef, Dataset, PhantomSpec};
use digest_core::network::NetworkConfig;
use digest_core::training::{Phase, TrainConfig};

pub fn tiny_case(i: usize, size: usize) -> CaseRef {
    let spec = PhantomSpec {
        volume_size: [size; 3],
        lesion_radius_range: (size as f32 * 0.15, size as f32 * 0.22),
        seed: 1000 + i as u64,
        ..PhantomSpec::default()
    };
    let (volume, labels) = generate_phantom(&spec).unwrap();
    CaseRef {
        id: format!("case_{i:04}"),
        volume,
        labels,
    }
}

pub fn tiny_dataset(train: usize, val: usize, test: usize, size: usize) -> Dataset {
    let mut i = 0;
    let mut take = |n: usize| {
        let v: Vec<CaseRef> = (i..i + n).map(|k| tiny_case(k, size)).collect();
        i += n;
        v
    };
    let (a, b, c) = (take(train), take(val), take(test));
    Dataset::from_cases(a, b, c)
}

pub fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        base_width: 2,
        depth: 2,
        cbam_reduction: 1,
        cbam_kernel: 3,
        seed: 4,
        ..NetworkConfig::default()
    }
}

pub fn tiny_train(phase: Phase, epochs: usize, crop: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        cosine_decay_start_epoch: (epochs / 2).max(1),
        lr_initial: 3e-3,
        crop: [crop; 3],
        seed: 9,
        phase,
        ..TrainConfig::default()
    }
}
