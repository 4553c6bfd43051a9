use std::fs;

use digest_core::data::phantom::BRAIN_EXTENT;
use digest_core::data::{
    generate_dataset, generate_phantom, load_brats_case, nested_targets, preprocess, render_phantom, save_case,
    Dataset, Geometry, LabelVolume, LesionSpec, Modality, MultiModalVolume, PhantomDatasetSpec, PhantomSpec, Split, ED,
    ET, MODALITIES, NCR,
};
use digest_core::DigestError;
use proptest::prelude::*;

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        volume_size: [24, 24, 24],
        lesion_radius_range: (3.0, 5.0),
        seed,
        ..PhantomSpec::default()
    }
}

#[test]
fn phantom_is_deterministic_in_seed() {
    let a = generate_phantom(&small_spec(5)).unwrap();
    let b = generate_phantom(&small_spec(5)).unwrap();
    let c = generate_phantom(&small_spec(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn phantom_without_lesions_is_all_background() {
    let spec = PhantomSpec {
        num_lesions: 0,
        ..small_spec(1)
    };
    let (_, labels) = generate_phantom(&spec).unwrap();
    assert!(labels.labels().iter().all(|&l| l == 0));
}

#[test]
fn oversized_lesion_is_a_phantom_error() {
    let spec = PhantomSpec {
        lesion_radius_range: (30.0, 30.0),
        ..small_spec(1)
    };
    assert!(matches!(generate_phantom(&spec), Err(DigestError::Phantom(_))));
}

/// Brute-force oracle: label by distance from the centre, then compare.
#[test]
fn sphere_lesion_matches_distance_oracle() {
    let spec = PhantomSpec {
        volume_size: [32, 32, 32],
        noise_std: 0.0,
        ..small_spec(0)
    };
    let centre = [15.5f32, 16.0, 14.25];
    let (rn, rc, ro) = (2.5f32, 5.0, 8.0);
    let (_, labels) = render_phantom(&spec, &[LesionSpec::sphere(centre, rn, rc, ro)]).unwrap();
    let mut counts = [0usize; 3];
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                let d =
                    ((z as f32 - centre[0]).powi(2) + (y as f32 - centre[1]).powi(2) + (x as f32 - centre[2]).powi(2))
                        .sqrt();
                let want = if d <= rn {
                    NCR
                } else if d <= rc {
                    ET
                } else if d <= ro {
                    ED
                } else {
                    0
                };
                assert_eq!(labels.labels()[(z * 32 + y) * 32 + x], want, "voxel {z},{y},{x}");
                match want {
                    NCR => counts[0] += 1,
                    ET => counts[1] += 1,
                    ED => counts[2] += 1,
                    _ => {}
                }
            }
        }
    }
    // shell volumes of the continuous spheres, within 15 %
    let ball = |r: f32| 4.0 / 3.0 * std::f32::consts::PI * r.powi(3);
    for (got, want) in counts.iter().zip([ball(rn), ball(rc) - ball(rn), ball(ro) - ball(rc)]) {
        assert!((*got as f32 - want).abs() / want < 0.15, "{got} vs {want}");
    }
}

#[test]
fn overlapping_lesions_keep_most_severe_label() {
    let spec = PhantomSpec {
        noise_std: 0.0,
        ..small_spec(0)
    };
    let a = LesionSpec::sphere([12.0, 12.0, 10.0], 2.0, 3.0, 6.0);
    let b = LesionSpec::sphere([12.0, 12.0, 14.0], 1.0, 1.5, 6.0);
    let (_, labels) = render_phantom(&spec, &[a.clone(), b.clone()]).unwrap();
    for z in 0..24 {
        for y in 0..24 {
            for x in 0..24 {
                let la = a.label_at([z, y, x]);
                let lb = b.label_at([z, y, x]);
                let got = labels.labels()[(z * 24 + y) * 24 + x];
                if la == Some(NCR) || lb == Some(NCR) {
                    assert_eq!(got, NCR);
                } else if la == Some(ET) || lb == Some(ET) {
                    assert_eq!(got, ET);
                } else if la.is_some() || lb.is_some() {
                    assert_eq!(got, ED);
                }
            }
        }
    }
}

#[test]
fn noiseless_phantom_uses_contrast_means() {
    let spec = PhantomSpec {
        noise_std: 0.0,
        ..small_spec(0)
    };
    let lesion = LesionSpec::sphere([12.0, 12.0, 12.0], 1.5, 3.0, 5.0);
    let (vol, labels) = render_phantom(&spec, &[lesion]).unwrap();
    let c = &spec.contrast;
    let semi = 24.0 * BRAIN_EXTENT;
    for m in MODALITIES {
        let chan = vol.channel(m);
        for (i, &l) in labels.labels().iter().enumerate() {
            let [z, y, x] = [i / 576, i / 24 % 24, i % 24].map(|v| v as f32 - 11.5);
            let inside = [z, y, x].iter().map(|v| (v / semi).powi(2)).sum::<f32>() <= 1.0;
            let want = match l {
                NCR => c.lesion[m.index()][0],
                ED => c.lesion[m.index()][1],
                ET => c.lesion[m.index()][2],
                _ if inside => c.healthy[m.index()],
                _ => 0.0,
            };
            assert_eq!(chan[i], want, "{m} voxel {i}");
        }
    }
}

#[test]
fn nifti_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (mut vol, labels) = generate_phantom(&small_spec(9)).unwrap();
    vol.geometry = Geometry::isotropic(1.5).shifted([2, 3, 4]);
    let case = dir.path().join("case_a");
    save_case(&case, "case_a", &vol, &labels).unwrap();
    let (v2, l2) = load_brats_case(&case).unwrap();
    assert_eq!(v2.data(), vol.data());
    assert_eq!(v2.dims(), vol.dims());
    assert_eq!(l2, labels);
    assert_eq!(v2.geometry, vol.geometry);
}

#[test]
fn missing_t1ce_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let (vol, labels) = generate_phantom(&small_spec(2)).unwrap();
    let case = dir.path().join("c");
    save_case(&case, "c", &vol, &labels).unwrap();
    let t1ce = fs::read_dir(&case)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().contains("_t1ce."))
        .unwrap();
    fs::remove_file(t1ce).unwrap();
    let err = load_brats_case(&case).unwrap_err();
    assert!(matches!(err, DigestError::MissingModality { .. }), "{err:?}");
    assert!(err.to_string().contains("T1ce"), "{err}");
}

#[test]
fn bad_label_ids_rejected() {
    assert!(LabelVolume::new([1, 1, 2], vec![0, 3]).is_err());
    assert!(LabelVolume::new([1, 1, 2], vec![0]).is_err());
}

#[test]
fn volume_rejects_non_finite_input() {
    let mut data = vec![0.0f32; 8];
    data[5] = f32::NAN;
    let err = MultiModalVolume::new([1, 1, 2], data, Geometry::default()).unwrap_err();
    assert!(err.to_string().contains("T2"), "{err}");
}

#[test]
fn nested_targets_match_label_sets() {
    let labels = LabelVolume::new([1, 1, 4], vec![0, NCR, ED, ET]).unwrap();
    let t = nested_targets(&labels);
    assert_eq!(t.et, [false, false, false, true]);
    assert_eq!(t.tc, [false, true, false, true]);
    assert_eq!(t.wt, [false, true, true, true]);
    let tensor = t.to_tensor();
    assert_eq!(tensor.shape(), &[1, 3, 1, 1, 4]);
    assert_eq!(tensor.data(), &[0., 0., 0., 1., 0., 1., 0., 1., 0., 1., 1., 1.]);
}

#[test]
fn preprocess_rejects_crop_larger_than_volume() {
    let (vol, labels) = generate_phantom(&small_spec(3)).unwrap();
    let err = preprocess(&vol, &labels, [25, 8, 8], false, 0).unwrap_err();
    assert!(matches!(err, DigestError::Shape(_)));
}

#[test]
fn preprocess_normalises_brain_box() {
    let (vol, labels) = generate_phantom(&small_spec(4)).unwrap();
    let (v, l) = preprocess(&vol, &labels, [22, 22, 22], false, 0).unwrap();
    assert_eq!(v.dims(), [22, 22, 22]);
    assert_eq!(l.dims(), [22, 22, 22]);
    // the 22³ window covers the whole brain box, so nonzero voxels are z-scored
    for m in MODALITIES {
        let nz: Vec<f64> = v.channel(m).iter().filter(|&&x| x != 0.0).map(|&x| x as f64).collect();
        let mean = nz.iter().sum::<f64>() / nz.len() as f64;
        let var = nz.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nz.len() as f64;
        assert!(mean.abs() < 1e-3, "{m}: mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-3, "{m}: std {}", var.sqrt());
    }
    let lesion = |l: &LabelVolume| l.labels().iter().filter(|&&x| x != 0).count();
    assert_eq!(lesion(&l), lesion(&labels));
}

#[test]
fn generated_dataset_opens_with_manifest_split() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomDatasetSpec {
        cases: 5,
        val_cases: 1,
        test_cases: 2,
        phantom: small_spec(0),
        ..PhantomDatasetSpec::default()
    };
    let manifest = generate_dataset(dir.path(), &spec).unwrap();
    let ds = Dataset::open(dir.path(), (0, 0), 0).unwrap();
    assert_eq!(ds.manifest, manifest);
    assert_eq!(ds.cases(Split::Train).len(), 2);
    assert_eq!(ds.cases(Split::Val).len(), 1);
    assert_eq!(ds.cases(Split::Test).len(), 2);
    let samples = ds.eval_samples(Split::Test, [16, 16, 16]).unwrap();
    assert_eq!(samples[0].input.shape(), &[1, 4, 16, 16, 16]);
    assert_eq!(samples[0].target.shape(), &[1, 3, 16, 16, 16]);
    let again = generate_dataset(&dir.path().join("again"), &spec).unwrap();
    assert_eq!(again, manifest);
    let a = load_brats_case(&dir.path().join(&manifest.test[0])).unwrap();
    let b = load_brats_case(&dir.path().join("again").join(&manifest.test[0])).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nested_regions_are_ordered(labels in prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 4]), 1..200)) {
        let n = labels.len();
        let t = nested_targets(&LabelVolume::new([1, 1, n], labels).unwrap());
        for i in 0..n {
            prop_assert!(!t.et[i] || t.tc[i]);
            prop_assert!(!t.tc[i] || t.wt[i]);
        }
    }

    #[test]
    fn phantom_labels_are_nested_and_valid(seed in any::<u64>()) {
        let (vol, labels) = generate_phantom(&PhantomSpec { volume_size: [20, 20, 20], ..small_spec(seed) }).unwrap();
        prop_assert!(labels.labels().iter().all(|l| [0, NCR, ED, ET].contains(l)));
        prop_assert!(vol.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        // every lesion voxel lies inside the nonzero brain
        for (i, &l) in labels.labels().iter().enumerate() {
            if l != 0 {
                prop_assert!(vol.channel(Modality::T2)[i] > 0.0);
            }
        }
    }

    #[test]
    fn train_crops_keep_shape(seed in any::<u64>(), c in 8usize..=20) {
        let (vol, labels) = generate_phantom(&small_spec(seed % 7)).unwrap();
        let (v, l) = preprocess(&vol, &labels, [c, c, c], true, seed).unwrap();
        prop_assert_eq!(v.dims(), [c, c, c]);
        prop_assert_eq!(l.dims(), [c, c, c]);
        prop_assert!(v.data().iter().all(|x| x.is_finite()));
    }
}
