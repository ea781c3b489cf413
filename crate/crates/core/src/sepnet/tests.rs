use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> SepNetHyper {
    SepNetHyper {
        depth: 2,
        k: 2,
        embed_dim: 4,
        base_channels: 2,
        max_channels: 4,
        leaky_slope: 0.2,
    }
}

fn random_input(frames: usize, bins: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames * bins)
        .map(|_| rng.gen_range(0.0..3.0))
        .collect()
}

fn random_query(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn init_is_deterministic() {
    let a = SeparationModel::<f32>::init(SepNetHyper::default(), 5).unwrap();
    let b = SeparationModel::<f32>::init(SepNetHyper::default(), 5).unwrap();
    let c = SeparationModel::<f32>::init(SepNetHyper::default(), 6).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn desk_parameter_count() {
    let h = SepNetHyper::default();
    assert_eq!(h.channels(), vec![8, 16, 16, 16, 16]);
    let m = SeparationModel::<f32>::init(h.clone(), 0).unwrap();
    // enc 80 + 1168 + 3*2320, dec 1736 + 3*4624, masks 72, proj 520, combine 9
    assert_eq!(h.param_count(), 24417);
    assert_eq!(m.param_count(), 24417);
    let audited: usize = m
        .tensors()
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    assert_eq!(audited, 24417);
}

#[test]
fn full_scale_configuration_is_constructible() {
    let h = SepNetHyper::full_scale();
    let m = SeparationModel::<f32>::init(h.clone(), 0).unwrap();
    assert_eq!(m.param_count(), h.param_count());
    assert_eq!(m.tensor("query_proj.weight").unwrap().len(), 32 * 1024);
    assert_eq!(m.tensor("masks.weight").unwrap().len(), 32 * 32);
}

#[test]
fn invalid_hyperparameters() {
    for h in [
        SepNetHyper { depth: 0, ..tiny() },
        SepNetHyper { k: 0, ..tiny() },
        SepNetHyper {
            max_channels: 1,
            ..tiny()
        },
        SepNetHyper {
            leaky_slope: 0.0,
            ..tiny()
        },
    ] {
        assert!(SeparationModel::<f32>::init(h, 0).is_err());
    }
}

#[test]
fn zero_preactivation_gives_half() {
    let mut m = SeparationModel::<f64>::init(tiny(), 1).unwrap();
    m.tensor_mut("query_proj.weight").unwrap().fill(0.0);
    m.tensor_mut("query_proj.bias").unwrap().fill(0.0);
    m.tensor_mut("combine.bias").unwrap().fill(0.0);
    let x = random_input(8, 8, 2);
    let q = random_query(4, 3);
    let t = m.forward(&x, 8, 8, &[&q]).unwrap();
    assert!(t.heads[0].mask.iter().all(|&v| v == 0.5));
}

#[test]
fn single_channel_mask_is_sigmoid_of_intermediate() {
    let h = SepNetHyper { k: 1, ..tiny() };
    let mut m = SeparationModel::<f64>::init(h, 4).unwrap();
    m.tensor_mut("query_proj.weight").unwrap().fill(0.0);
    m.tensor_mut("query_proj.bias").unwrap().fill(1.0);
    m.tensor_mut("combine.scale").unwrap().fill(1.0);
    m.tensor_mut("combine.bias").unwrap().fill(0.0);
    let x = random_input(6, 10, 5);
    let t = m.forward(&x, 6, 10, &[&random_query(4, 1)]).unwrap();
    for (p, &mt) in t.intermediate.channel(0).iter().enumerate() {
        let expect = 1.0 / (1.0 + (-mt).exp());
        assert!((t.heads[0].mask[p] - expect).abs() < 1e-15);
    }
}

#[test]
fn queries_change_the_mask() {
    let m = SeparationModel::<f32>::init(tiny(), 9).unwrap();
    let x = random_input(8, 8, 1);
    let t = m
        .forward(&x, 8, 8, &[&random_query(4, 1), &random_query(4, 2)])
        .unwrap();
    assert_ne!(t.heads[0].mask, t.heads[1].mask);
}

#[test]
fn forward_rejects_bad_inputs() {
    let m = SeparationModel::<f32>::init(tiny(), 9).unwrap();
    let x = random_input(8, 8, 1);
    assert!(matches!(
        m.forward(&x, 8, 8, &[&random_query(5, 1)]),
        Err(Error::DimensionMismatch { .. })
    ));
    let mut bad = x.clone();
    bad[3] = f64::NAN;
    assert!(m.forward(&bad, 8, 8, &[&random_query(4, 1)]).is_err());
    assert!(m.forward(&x, 8, 9, &[&random_query(4, 1)]).is_err());
}

#[test]
fn forward_is_deterministic() {
    let m = SeparationModel::<f32>::init(SepNetHyper::default(), 3).unwrap();
    let x = random_input(20, 65, 4);
    let q = random_query(64, 5);
    let a = m.forward(&x, 20, 65, &[&q]).unwrap();
    let b = m.forward(&x, 20, 65, &[&q]).unwrap();
    assert_eq!(a.heads, b.heads);
    assert_eq!(a.intermediate, b.intermediate);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let m = SeparationModel::<f64>::init(tiny(), 2).unwrap();
    let x = random_input(8, 8, 3);
    let t = m.forward(&x, 8, 8, &[&random_query(4, 4)]).unwrap();
    let b = m.backward(&t, &[vec![0.0; 64]]).unwrap();
    assert!(b.grads.values.iter().all(|&g| g == 0.0));
    assert!(b.query_grads[0].iter().all(|&g| g == 0.0));
}

#[test]
fn bias_gradient_is_sum_of_sigmoid_slopes() {
    let m = SeparationModel::<f64>::init(tiny(), 2).unwrap();
    let x = random_input(8, 8, 3);
    let t = m.forward(&x, 8, 8, &[&random_query(4, 4)]).unwrap();
    let b = m.backward(&t, &[vec![1.0; 64]]).unwrap();
    let mut expect = 0.0;
    for &mh in &t.heads[0].mask {
        expect += mh * (1.0 - mh);
    }
    let off = m
        .tensors()
        .iter()
        .find(|t| t.name == "combine.bias")
        .unwrap()
        .offset;
    assert!((b.grads.values[off] - expect).abs() < 1e-12);
}

#[test]
fn stale_trace_is_rejected() {
    let mut m = SeparationModel::<f64>::init(tiny(), 2).unwrap();
    let x = random_input(8, 8, 3);
    let t = m.forward(&x, 8, 8, &[&random_query(4, 4)]).unwrap();
    m.params_mut()[0] += 0.1;
    assert!(matches!(
        m.backward(&t, &[vec![1.0; 64]]),
        Err(Error::StaleTrace(_))
    ));
    let other = m.clone();
    let t2 = other.forward(&x, 8, 8, &[&random_query(4, 4)]).unwrap();
    assert!(m.backward(&t2, &[vec![1.0; 64]]).is_err());
}

fn weighted_mask_sum(m: &SeparationModel<f64>, x: &[f64], qs: &[&[f64]], r: &[Vec<f64>]) -> f64 {
    let t = m.forward(x, 8, 8, qs).unwrap();
    t.heads
        .iter()
        .zip(r)
        .map(|(h, r)| h.mask.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Largest relative error between backward() and central differences of a
/// random linear functional of the masks.
fn fd_worst(seed: u64, h: f64) -> f64 {
    let m = SeparationModel::<f64>::init(tiny(), seed).unwrap();
    let x = random_input(8, 8, seed + 1);
    let (q0, q1) = (random_query(4, seed + 2), random_query(4, seed + 3));
    let qs: [&[f64]; 2] = [&q0, &q1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
    let r: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let t = m.forward(&x, 8, 8, &qs).unwrap();
    let b = m.backward(&t, &r).unwrap();
    let mut worst = 0.0f64;
    for i in 0..m.param_count() {
        let mut plus = m.clone();
        plus.params_mut()[i] += h;
        let mut minus = m.clone();
        minus.params_mut()[i] -= h;
        let fd = (weighted_mask_sum(&plus, &x, &qs, &r) - weighted_mask_sum(&minus, &x, &qs, &r))
            / (2.0 * h);
        let a = b.grads.values[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

// With h = 1e-3 a perturbation can push a leaky-rectifier input across zero,
// where the function has a kink and differences stop measuring the
// derivative. Seed 1 has no such crossing.
#[test]
fn gradients_match_central_differences() {
    let worst = fd_worst(1, 1e-3);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn gradients_match_fine_differences_across_instances() {
    for seed in 0..12 {
        let worst = fd_worst(seed, 1e-5);
        assert!(worst <= 1e-4, "seed {seed}: worst relative error {worst}");
    }
}

#[test]
fn query_gradients_match_central_differences() {
    let m = SeparationModel::<f64>::init(tiny(), 21).unwrap();
    let x = random_input(8, 8, 22);
    let (q0, q1) = (random_query(4, 23), random_query(4, 24));
    let qs: [&[f64]; 2] = [&q0, &q1];
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let r: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let t = m.forward(&x, 8, 8, &qs).unwrap();
    let b = m.backward(&t, &r).unwrap();
    let h = 1e-3;
    // query gradients
    for (head, q) in [q0.clone(), q1.clone()].iter().enumerate() {
        for d in 0..4 {
            let mut qp = q.clone();
            qp[d] += h;
            let mut qm = q.clone();
            qm[d] -= h;
            let swap = |v: &[f64]| -> f64 {
                let mut pair: [&[f64]; 2] = [&q0, &q1];
                pair[head] = v;
                weighted_mask_sum(&m, &x, &pair, &r)
            };
            let fd = (swap(&qp) - swap(&qm)) / (2.0 * h);
            let a = b.query_grads[head][d];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) <= 1e-4);
        }
    }
}

#[test]
fn channel_permutation_leaves_mask_unchanged() {
    let h = SepNetHyper { k: 4, ..tiny() };
    let m = SeparationModel::<f64>::init(h.clone(), 31).unwrap();
    let perm = [2usize, 0, 3, 1];
    let mut p = m.clone();
    let c0 = h.channels()[0];
    let d = h.embed_dim;
    let src = |name: &str| m.tensor(name).unwrap().to_vec();
    let (mw, mb, pw, pb, cs) = (
        src("masks.weight"),
        src("masks.bias"),
        src("query_proj.weight"),
        src("query_proj.bias"),
        src("combine.scale"),
    );
    for (new, &old) in perm.iter().enumerate() {
        p.tensor_mut("masks.weight").unwrap()[new * c0..(new + 1) * c0]
            .copy_from_slice(&mw[old * c0..(old + 1) * c0]);
        p.tensor_mut("masks.bias").unwrap()[new] = mb[old];
        p.tensor_mut("query_proj.weight").unwrap()[new * d..(new + 1) * d]
            .copy_from_slice(&pw[old * d..(old + 1) * d]);
        p.tensor_mut("query_proj.bias").unwrap()[new] = pb[old];
        p.tensor_mut("combine.scale").unwrap()[new] = cs[old];
    }
    let x = random_input(8, 8, 1);
    let q = random_query(4, 2);
    let a = m.forward(&x, 8, 8, &[&q]).unwrap();
    let b = p.forward(&x, 8, 8, &[&q]).unwrap();
    for (u, v) in a.heads[0].mask.iter().zip(&b.heads[0].mask) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn odd_sizes_flow_through_every_level() {
    let m = SeparationModel::<f32>::init(SepNetHyper::default(), 3).unwrap();
    let x = random_input(35, 257, 1);
    let t = m.forward(&x, 35, 257, &[&random_query(64, 1)]).unwrap();
    assert_eq!((t.frames(), t.bins()), (35, 257));
    assert_eq!(t.heads[0].mask.len(), 35 * 257);
    let shapes = m.level_shapes(35, 257);
    assert_eq!(shapes.last(), Some(&(3, 17)));
    let b = m.backward(&t, &[vec![0.5; 35 * 257]]).unwrap();
    assert!(b.grads.values.iter().all(|g| g.is_finite()));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn masks_stay_in_open_unit_interval(seed in 0u64..10_000, gain in 0.0f64..50.0) {
            let m = SeparationModel::<f32>::init(tiny(), seed).unwrap();
            let x: Vec<f64> = random_input(5, 7, seed).into_iter().map(|v| v * gain).collect();
            let t = m.forward(&x, 5, 7, &[&random_query(4, seed + 1)]).unwrap();
            prop_assert!(t.heads[0].mask.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
