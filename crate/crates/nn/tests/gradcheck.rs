//! Finite-difference checks of every graph op's backward pass.

use digest_nn::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Scalar objective `Σ r ⊙ f(inputs)` evaluated in f64.
fn objective(inputs: &[Tensor], f: &Build, r: &Tensor) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars);
    g.value(y)
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum()
}

fn check(name: &str, inputs: Vec<Tensor>, f: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&mut g, &vars);
    let r = random(g.value(y).shape(), &mut rng);
    g.backward(vec![(y, r.clone())]).unwrap();
    let h = 1e-3f32;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("every input reaches the output").clone();
        for idx in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[idx] -= h;
            let fd = (objective(&plus, f, &r) - objective(&minus, f, &r)) / (2.0 * h as f64);
            let an = analytic.data()[idx] as f64;
            assert!(
                (fd - an).abs() <= 5e-3 + 2e-2 * fd.abs().max(an.abs()),
                "{name}: input {k} element {idx}: fd {fd} vs analytic {an}"
            );
        }
    }
}

#[test]
fn conv3d_gemm_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(
        "conv3d",
        vec![
            random(&[2, 3, 3, 2, 4], &mut rng),
            random(&[4, 3, 3, 3, 3], &mut rng),
            random(&[4], &mut rng),
        ],
        &|g, v| g.conv3d(v[0], v[1], Some(v[2])).unwrap(),
    );
}

#[test]
fn conv3d_direct_path_and_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(
        "conv3d direct",
        vec![random(&[1, 2, 3, 3, 3], &mut rng), random(&[1, 2, 3, 3, 3], &mut rng)],
        &|g, v| g.conv3d(v[0], v[1], None).unwrap(),
    );
    check(
        "conv3d 1x1",
        vec![
            random(&[2, 3, 2, 2, 2], &mut rng),
            random(&[5, 3, 1, 1, 1], &mut rng),
            random(&[5], &mut rng),
        ],
        &|g, v| g.conv3d(v[0], v[1], Some(v[2])).unwrap(),
    );
}

#[test]
fn transposed_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(
        "up_conv",
        vec![
            random(&[2, 3, 1, 2, 2], &mut rng),
            random(&[3, 2, 2, 2, 2], &mut rng),
            random(&[2], &mut rng),
        ],
        &|g, v| g.up_conv(v[0], v[1], Some(v[2])).unwrap(),
    );
}

#[test]
fn group_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(
        "group_norm",
        vec![
            random(&[2, 4, 2, 2, 2], &mut rng),
            random(&[4], &mut rng),
            random(&[4], &mut rng),
        ],
        &|g, v| g.group_norm(v[0], v[1], v[2], 2).unwrap(),
    );
}

#[test]
fn pooling_and_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 2, 2, 4, 2], &mut rng);
    check("max_pool2", vec![x.clone()], &|g, v| g.max_pool2(v[0]).unwrap());
    check("leaky_relu", vec![x.clone()], &|g, v| g.leaky_relu(v[0], 0.01));
    check("sigmoid", vec![x.clone()], &|g, v| g.sigmoid(v[0]));
    check("global_avg", vec![x.clone()], &|g, v| g.global_avg_pool(v[0]).unwrap());
    check("global_max", vec![x.clone()], &|g, v| g.global_max_pool(v[0]).unwrap());
    check("channel_mean", vec![x.clone()], &|g, v| g.channel_mean(v[0]).unwrap());
    check("channel_max", vec![x], &|g, v| g.channel_max(v[0]).unwrap());
}

#[test]
fn binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3, 2, 1, 2], &mut rng);
    let b = random(&[2, 2, 2, 1, 2], &mut rng);
    check("concat", vec![a.clone(), b], &|g, v| g.concat(v[0], v[1]).unwrap());
    check("add", vec![a.clone(), a.clone()], &|g, v| g.add(v[0], v[1]).unwrap());
    check(
        "scale_channels",
        vec![a.clone(), random(&[2, 3, 1, 1, 1], &mut rng)],
        &|g, v| g.scale_channels(v[0], v[1]).unwrap(),
    );
    check("scale_spatial", vec![a, random(&[2, 1, 2, 1, 2], &mut rng)], &|g, v| {
        g.scale_spatial(v[0], v[1]).unwrap()
    });
}

#[test]
fn composed_graph_reuses_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check(
        "composed",
        vec![random(&[1, 2, 2, 2, 2], &mut rng), random(&[2, 2, 3, 3, 3], &mut rng)],
        &|g, v| {
            let c = g.conv3d(v[0], v[1], None).unwrap();
            let s = g.sigmoid(c);
            let m = g.channel_max(s).unwrap();
            let scaled = g.scale_spatial(c, m).unwrap();
            g.add(scaled, v[0]).unwrap()
        },
    );
}

#[test]
fn inference_graph_keeps_no_gradients() {
    let mut g = Graph::inference();
    let x = g.leaf(Tensor::full(&[1, 1, 2, 2, 2], 0.5));
    let y = g.sigmoid(x);
    assert!(!g.requires_grad(y));
    g.backward(vec![(y, Tensor::full(&[1, 1, 2, 2, 2], 1.0))]).unwrap();
    assert!(g.grad(x).is_none());
}
