use digest_core::losses::{
    dice_loss, ds_transfer, ds_transfer_loss, soft_dice, student_loss, teacher_pretrain_loss, total_loss, DiceConfig,
    DiceNumerator,
};
use digest_core::network::StageOutputs;
use digest_nn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXACT: f64 = 1e-6;

fn cfg() -> DiceConfig {
    DiceConfig::default()
}

#[test]
fn dice_perfect_binary_prediction_is_zero() {
    let mut t = vec![0.0f64; 27];
    for i in [0, 3, 5, 8, 13, 20, 21, 26] {
        t[i] = 1.0;
    }
    let v = soft_dice(&t, &t, 1, 1, cfg()).unwrap();
    // (2·8 + 1) / (8 + 8 + 1) = 1
    assert_eq!(v.loss, 0.0);
}

#[test]
fn dice_empty_versus_empty_is_zero() {
    let z = vec![0.0f64; 12];
    assert_eq!(soft_dice(&z, &z, 1, 3, cfg()).unwrap().loss, 0.0);
}

#[test]
fn dice_all_wrong_four_voxels() {
    let p = [1.0f64; 4];
    let t = [0.0f64; 4];
    let v = soft_dice(&p, &t, 1, 1, cfg()).unwrap();
    // (0 + 1) / (4 + 0 + 1) = 0.2
    assert!((v.loss - 0.8).abs() < EXACT);
    assert!((v.per_channel[0] - 0.2).abs() < EXACT);
}

#[test]
fn dice_averages_channels_and_batch() {
    // channel 0 perfect (ratio 1), channel 1 all wrong on 4 voxels (ratio 0.2)
    let p = [1.0f64; 8];
    let t = [1.0f64, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let v = soft_dice(&p, &t, 1, 2, cfg()).unwrap();
    assert!((v.loss - (1.0 - 0.6)).abs() < EXACT);
    let two = [p, p].concat();
    let tt = [t, t].concat();
    let v2 = soft_dice(&two, &tt, 2, 2, cfg()).unwrap();
    assert!((v2.loss - v.loss).abs() < EXACT);
}

#[test]
fn transfer_identical_maps_is_zero() {
    let a = [0.1f64, 0.7, 0.3, 0.9];
    let b = [0.5f64, 0.5];
    let v = ds_transfer(&[&a, &b], &[&a, &b], 1).unwrap();
    assert_eq!(v.loss, 0.0);
}

#[test]
fn transfer_two_voxel_case() {
    let v = ds_transfer(&[&[0.8f64, 0.2]], &[&[0.5f64, 0.5]], 1).unwrap();
    assert!((v.loss - 0.3).abs() < EXACT);
}

#[test]
fn transfer_sums_stages() {
    let (t1, s1) = ([0.8f64, 0.2], [0.5f64, 0.5]);
    let (t2, s2) = ([0.0f64, 1.0, 0.5, 0.5], [0.1f64, 0.9, 0.5, 0.9]);
    let a = ds_transfer(&[&t1], &[&s1], 1).unwrap().loss;
    let b = ds_transfer(&[&t2], &[&s2], 1).unwrap().loss;
    let both = ds_transfer(&[&t1, &t2], &[&s1, &s2], 1).unwrap();
    assert!((b - 0.15).abs() < EXACT);
    assert!((both.loss - (a + b)).abs() < EXACT);
    assert_eq!(both.per_stage.len(), 2);
}

#[test]
fn transfer_shape_mismatch_names_stage() {
    let t = vec![Tensor::zeros(&[1, 3, 2, 2, 2]), Tensor::zeros(&[1, 3, 4, 4, 4])];
    let s = vec![Tensor::zeros(&[1, 3, 2, 2, 2]), Tensor::zeros(&[1, 3, 4, 4, 2])];
    let err = ds_transfer_loss(&t, &s).unwrap_err();
    assert!(err.to_string().contains("stage 1"), "{err}");
    assert!(ds_transfer_loss(&t[..1], &s).is_err());
}

#[test]
fn total_loss_cases() {
    assert_eq!(total_loss(0.0, 0.0), 0.0);
    assert!((total_loss(0.3, 0.5) - 0.8).abs() < 1e-12);
}

fn stage(size: usize, fill: f32) -> Tensor {
    Tensor::full(&[1, 3, size, size, size], fill)
}

#[test]
fn pretrain_loss_perfect_prediction_is_zero() {
    let target = stage(4, 1.0);
    let out = StageOutputs {
        final_map: target.clone(),
        aux: vec![stage(1, 1.0), stage(2, 1.0), target.clone()],
    };
    let (v, grads) = teacher_pretrain_loss(&out, &target, cfg()).unwrap();
    assert_eq!(v, 0.0);
    assert_eq!(grads.len(), 3);
}

#[test]
fn pretrain_loss_wrong_coarse_stage() {
    // 8 voxels per channel all predicted 1 against an empty pooled target:
    // (0 + 1) / (8 + 1) = 1/9, loss 8/9, weighted by 1/2 over two stages.
    let target = Tensor::zeros(&[1, 3, 4, 4, 4]);
    let out = StageOutputs {
        final_map: target.clone(),
        aux: vec![Tensor::full(&[1, 3, 2, 2, 2], 1.0), target.clone()],
    };
    let (v, grads) = teacher_pretrain_loss(&out, &target, cfg()).unwrap();
    assert!((v - (8.0 / 9.0) / 2.0).abs() < EXACT);
    assert!(grads[0].data().iter().all(|&g| g > 0.0));
}

#[test]
fn pretrain_loss_four_voxel_wrong_stage() {
    let target = Tensor::zeros(&[1, 1, 4, 4, 4]);
    let out = StageOutputs {
        final_map: target.clone(),
        aux: vec![Tensor::full(&[1, 1, 1, 1, 1], 0.0), target.clone()],
    };
    assert_eq!(teacher_pretrain_loss(&out, &target, cfg()).unwrap().0, 0.0);
    // A 4-voxel stage: a 1x2x2 map against a target pooled by 2 from 2x4x4.
    let target = Tensor::zeros(&[1, 1, 2, 4, 4]);
    let out = StageOutputs {
        final_map: target.clone(),
        aux: vec![Tensor::full(&[1, 1, 1, 2, 2], 1.0), target.clone()],
    };
    let (v, _) = teacher_pretrain_loss(&out, &target, cfg()).unwrap();
    assert!((v - 0.8 / 2.0).abs() < EXACT);
}

#[test]
fn student_loss_matches_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    };
    let teacher = vec![rand_t(&[1, 3, 2, 2, 2]), rand_t(&[1, 3, 4, 4, 4])];
    let student = StageOutputs {
        final_map: Tensor::zeros(&[1, 3, 4, 4, 4]),
        aux: vec![rand_t(&[1, 3, 2, 2, 2]), rand_t(&[1, 3, 4, 4, 4])],
    };
    let student = StageOutputs {
        final_map: student.aux[1].clone(),
        ..student
    };
    let target = rand_t(&[1, 3, 4, 4, 4])
        .data()
        .iter()
        .map(|&v| (v > 0.5) as u8 as f32)
        .collect();
    let target = Tensor::from_vec(&[1, 3, 4, 4, 4], target).unwrap();
    let (r, grads) = student_loss(&teacher, &student, &target, cfg(), 1.0).unwrap();
    assert!((r.l_total - (r.l_ds + r.l_seg)).abs() < 1e-7);
    assert!(r.l_ds >= 0.0 && (0.0..=1.0).contains(&r.l_seg));
    assert_eq!(r.per_stage_ds.len(), 2);
    assert_eq!(r.per_channel_dice.len(), 3);
    assert_eq!(grads[0].shape(), &[1, 3, 2, 2, 2]);

    let (seg_only, _) = student_loss(&teacher, &student, &target, cfg(), 0.0).unwrap();
    assert_eq!(seg_only.l_total, seg_only.l_seg);
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.05..0.95)).collect()
}

/// Central differences with step 1e-4 against the analytic gradient.
#[test]
fn dice_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-4;
    for trial in 0..20 {
        let (b, c) = (1 + trial % 2, 1 + trial % 3);
        let n = b * c * rng.random_range(2..=64 / (b * c));
        let p = random_probs(&mut rng, n);
        let t: Vec<f64> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let numerator = if trial % 4 == 3 {
            DiceNumerator::Single
        } else {
            DiceNumerator::Doubled
        };
        let cfg = DiceConfig {
            smoothing: 1.0,
            numerator,
        };
        let g = soft_dice(&p, &t, b, c, cfg).unwrap().grad;
        for i in 0..n {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd =
                (soft_dice(&hi, &t, b, c, cfg).unwrap().loss - soft_dice(&lo, &t, b, c, cfg).unwrap().loss) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "trial {trial} voxel {i}: fd {fd} vs analytic {}", g[i]);
        }
    }
}

#[test]
fn transfer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = 1e-4;
    for trial in 0..20 {
        let batch = 1 + trial % 2;
        let sizes = [batch * rng.random_range(1..=8), batch * rng.random_range(1..=24)];
        let t: Vec<Vec<f64>> = sizes.iter().map(|&n| random_probs(&mut rng, n)).collect();
        let mut s: Vec<Vec<f64>> = sizes.iter().map(|&n| random_probs(&mut rng, n)).collect();
        // keep every |t - s| away from the kink
        for (ts, ss) in t.iter().zip(&mut s) {
            for (a, b) in ts.iter().zip(ss.iter_mut()) {
                if (a - *b).abs() < 1e-3 {
                    *b = a + 0.01;
                }
            }
        }
        let tr: Vec<&[f64]> = t.iter().map(Vec::as_slice).collect();
        let eval = |s: &Vec<Vec<f64>>| {
            let sr: Vec<&[f64]> = s.iter().map(Vec::as_slice).collect();
            ds_transfer(&tr, &sr, batch).unwrap()
        };
        let v = eval(&s);
        for z in 0..2 {
            for i in 0..s[z].len() {
                let mut hi = s.clone();
                let mut lo = s.clone();
                hi[z][i] += h;
                lo[z][i] -= h;
                let fd = (eval(&hi).loss - eval(&lo).loss) / (2.0 * h);
                let an = v.grads[z][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel < 1e-3, "trial {trial} stage {z} voxel {i}: fd {fd} vs {an}");
            }
        }
    }
}

#[test]
fn tensor_dice_gradient_is_f32_copy() {
    let p = Tensor::from_vec(&[1, 1, 1, 1, 4], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    let t = Tensor::from_vec(&[1, 1, 1, 1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let (v, g) = dice_loss(&p, &t, cfg()).unwrap();
    for (a, b) in g.data().iter().zip(&v.grad) {
        assert_eq!(*a, *b as f32);
    }
}

proptest! {
    #[test]
    fn dice_in_unit_interval(
        p in prop::collection::vec(0.0f64..=1.0, 1..64),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = p.iter().map(|_| rng.random_bool(0.5) as u8 as f64).collect();
        let v = soft_dice(&p, &t, 1, 1, cfg()).unwrap();
        prop_assert!((0.0..=1.0).contains(&v.loss));
    }

    #[test]
    fn dice_permutation_invariant(
        p in prop::collection::vec(0.0f64..=1.0, 2..48),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = p.iter().map(|_| rng.random_bool(0.5) as u8 as f64).collect();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let tp: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
        let a = soft_dice(&p, &t, 1, 1, cfg()).unwrap().loss;
        let b = soft_dice(&pp, &tp, 1, 1, cfg()).unwrap().loss;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dice_binary_match_is_exactly_zero(
        bits in prop::collection::vec(any::<bool>(), 1..64),
        eps in 1e-3f64..10.0,
    ) {
        let t: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
        let c = DiceConfig { smoothing: eps, numerator: DiceNumerator::Doubled };
        prop_assert_eq!(soft_dice(&t, &t, 1, 1, c).unwrap().loss, 0.0);
    }

    #[test]
    fn transfer_nonnegative_symmetric_zero_iff_equal(
        a in prop::collection::vec(0.0f64..=1.0, 1..32),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|&x| if rng.random_bool(0.5) { x } else { rng.random() }).collect();
        let ab = ds_transfer(&[&a], &[&b], 1).unwrap();
        let ba = ds_transfer(&[&b], &[&a], 1).unwrap();
        prop_assert!(ab.loss >= 0.0);
        prop_assert_eq!(ab.loss, ba.loss);
        prop_assert_eq!(ab.loss == 0.0, a == b);
    }
}
