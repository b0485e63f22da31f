use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4dec_core::autodiff::{Graph, Tape};
use s4dec_core::params::ParamStore;
use s4dec_core::s4::{channel_discrete, s4_forward_conv, s4_forward_step, S4Layer};
use s4dec_core::ssm::{discretize_bilinear, ContinuousSsm};
use s4dec_core::tensor::Tensor;
use s4dec_core::Real;

/// Layer with every parameter group moved away from its structured init.
fn random_layer<T: Real>(h: usize, n: usize, h_out: usize, seed: u64) -> (ParamStore<T>, S4Layer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<T>::new();
    let layer = S4Layer::new(&mut store, "s4", h, n, h_out, &mut rng).unwrap();
    let ids = *layer.param_ids();
    for (k, id) in ids.iter().enumerate() {
        let t = store.get_mut(*id);
        for v in t.data_mut() {
            let x = v.as_f64();
            let y = match k {
                0 => x + rng.gen_range(-0.5..1.0),
                1 => x + rng.gen_range(-0.5..0.5),
                2 | 3 => rng.gen_range(-0.4..0.4),
                4..=7 => x + rng.gen_range(-0.3..0.3),
                8 => rng.gen_range(1e-3f64.ln()..0.5f64.ln()),
                _ => x + rng.gen_range(-0.2..0.2),
            };
            *v = T::of(y);
        }
    }
    (store, layer)
}

fn random_input<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::from_fn2(rows, cols, |_, _| T::of(rng.gen_range(-1.0..1.0)))
}

fn stepped<T: Real>(layer: &S4Layer, store: &ParamStore<T>, u: &Tensor<T>) -> Tensor<T> {
    let stepper = layer.prepare(store).unwrap();
    let mut state = stepper.zero_state();
    let ut = u.transpose().unwrap();
    let len = ut.rows();
    let mut cols = Vec::with_capacity(len);
    for t in 0..len {
        cols.push(s4_forward_step(&stepper, &mut state, ut.row(t)).unwrap());
    }
    Tensor::from_fn2(layer.out_dim, len, |i, t| cols[t][i])
}

#[test]
fn zero_input_with_zero_bias_gives_zero_output() {
    let (store, layer) = random_layer::<f64>(3, 4, 2, 0);
    let mut store = store;
    *store.get_mut(layer.out_bias_id()) = Tensor::zeros(&[4]);
    let y = s4_forward_conv(&layer, &store, &Tensor::zeros(&[3, 9])).unwrap();
    assert_eq!(y, Tensor::zeros(&[2, 9]));
}

#[test]
fn scalar_fixture_through_glu_is_halved() {
    // λ = −1, Δ = 1, B = C = 1 reproduces Ā = 1/3, B̄ = 2/3; the second
    // state component has B = C = 0 and never contributes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let layer = S4Layer::new(&mut store, "s4", 1, 2, 1, &mut rng).unwrap();
    let ids = *layer.param_ids();
    let set = |store: &mut ParamStore<f64>, i: usize, v: &[f64]| {
        store.get_mut(ids[i]).data_mut().copy_from_slice(v);
    };
    set(&mut store, 0, &[0.0, 0.0]);
    set(&mut store, 1, &[0.0, 0.0]);
    set(&mut store, 2, &[0.0, 0.0]);
    set(&mut store, 3, &[0.0, 0.0]);
    set(&mut store, 4, &[1.0, 0.0]);
    set(&mut store, 5, &[0.0, 0.0]);
    set(&mut store, 6, &[1.0, 0.0]);
    set(&mut store, 7, &[0.0, 0.0]);
    set(&mut store, 8, &[0.0]);
    set(&mut store, 9, &[0.0]);
    set(&mut store, 10, &[1.0, 0.0]);
    set(&mut store, 11, &[0.0, 0.0]);
    let d = channel_discrete(&layer, &store, 0).unwrap();
    assert!((d.a_bar[(0, 0)].re - 1.0 / 3.0).abs() < 1e-15);
    let y = s4_forward_conv(&layer, &store, &Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
    let expect = [1.0 / 3.0, 1.0 / 9.0, 1.0 / 27.0];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn convolution_and_stepping_agree_in_double_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for (i, &h) in [1, 4, 16].iter().enumerate() {
        for (j, &n) in [2, 8, 64].iter().enumerate() {
            for &len in &[1, 16, 128] {
                let (store, layer) = random_layer::<f64>(h, n, h, (i * 3 + j) as u64 * 31 + len as u64);
                let u = random_input::<f64>(&mut rng, h, len);
                let conv = s4_forward_conv(&layer, &store, &u).unwrap();
                let step = stepped(&layer, &store, &u);
                worst = worst.max(conv.max_abs_diff(&step));
            }
        }
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn convolution_and_stepping_agree_in_single_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for &(h, n, len) in &[(4, 8, 32), (16, 8, 128), (1, 64, 16), (4, 64, 128)] {
        let (store, layer) = random_layer::<f32>(h, n, h, (h * n + len) as u64);
        let u = random_input::<f32>(&mut rng, h, len);
        let conv = s4_forward_conv(&layer, &store, &u).unwrap();
        let step = stepped(&layer, &store, &u);
        worst = worst.max(conv.max_abs_diff(&step));
    }
    assert!(worst < 1e-5, "max deviation {worst}");
}

#[test]
fn single_channel_matches_dense_reference_before_glu() {
    let (store, layer) = random_layer::<f64>(3, 8, 3, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let u = random_input::<f64>(&mut rng, 20, 3);
    let mut g = s4dec_core::autodiff::Eager;
    let un = Graph::<f64>::constant(&mut g, u.clone());
    let y = layer.forward_ssm(&mut g, &store, &un).unwrap();
    for c in 0..3 {
        let p = layer.channel(&store, c);
        let dense = ContinuousSsm {
            a: p.state_matrix(),
            b: p.b.clone(),
            c: p.c.clone(),
            d: Complex64::new(layer.channel_d(&store, c), 0.0),
        };
        let d = discretize_bilinear(&dense, p.delta()).unwrap();
        let col: Vec<f64> = (0..20).map(|t| u.at(t, c)).collect();
        let r = d.run_recurrent(&col).unwrap();
        for t in 0..20 {
            assert!((y.at(t, c) - r[t]).abs() < 1e-9);
        }
    }
}

#[test]
fn state_carries_across_split_sequences() {
    let (store, layer) = random_layer::<f64>(4, 8, 2, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let u = random_input::<f64>(&mut rng, 30, 4);
    let stepper = layer.prepare(&store).unwrap();
    let mut whole = stepper.zero_state();
    let full: Vec<Vec<f64>> = (0..30).map(|t| stepper.step(&mut whole, u.row(t)).unwrap()).collect();
    let mut split = stepper.zero_state();
    let first: Vec<Vec<f64>> = (0..13).map(|t| stepper.step(&mut split, u.row(t)).unwrap()).collect();
    let carried = split.clone();
    let second: Vec<Vec<f64>> = (13..30).map(|t| stepper.step(&mut split, u.row(t)).unwrap()).collect();
    assert_eq!(first.len() + second.len(), full.len());
    for (a, b) in first.iter().chain(&second).zip(&full) {
        assert_eq!(a, b);
    }
    assert!(!carried.is_zero());
}

#[test]
fn fresh_state_with_zero_input_only_sees_the_bias() {
    let (store, layer) = random_layer::<f64>(2, 4, 2, 14);
    let stepper = layer.prepare(&store).unwrap();
    let mut st = stepper.zero_state();
    let y = stepper.step(&mut st, &[0.0, 0.0]).unwrap();
    let b = store.get(layer.out_bias_id()).data();
    for i in 0..2 {
        let expect = b[i] / (1.0 + (-b[2 + i]).exp());
        assert!((y[i] - expect).abs() < 1e-15);
    }
    assert!(st.is_zero());
}

#[test]
fn output_is_invariant_to_future_inputs() {
    let (store, layer) = random_layer::<f64>(3, 8, 3, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let u = random_input::<f64>(&mut rng, 3, 24);
    let base = s4_forward_conv(&layer, &store, &u).unwrap();
    for k in [0, 7, 23] {
        let mut v = u.clone();
        for c in 0..3 {
            for t in k + 1..24 {
                v.data_mut()[c * 24 + t] += 1.0;
            }
        }
        let y = s4_forward_conv(&layer, &store, &v).unwrap();
        for c in 0..3 {
            for t in 0..=k {
                assert_eq!(y.at(c, t), base.at(c, t));
            }
        }
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let (store, layer) = random_layer::<f64>(3, 4, 3, 16);
    assert!(s4_forward_conv(&layer, &store, &Tensor::zeros(&[2, 5])).is_err());
    let stepper = layer.prepare(&store).unwrap();
    let mut st = stepper.zero_state();
    assert!(stepper.step(&mut st, &[0.0; 2]).is_err());
    assert!(S4Layer::new(
        &mut ParamStore::<f64>::new(),
        "x",
        2,
        3,
        2,
        &mut ChaCha8Rng::seed_from_u64(0)
    )
    .is_err());
}

fn loss(layer: &S4Layer, store: &ParamStore<f64>, u: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    let y = s4_forward_conv(layer, store, u).unwrap();
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn analytic_gradients_match_central_differences() {
    let (mut store, layer) = random_layer::<f64>(2, 4, 2, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let len = 8;
    let u = random_input::<f64>(&mut rng, 2, len);
    let w = random_input::<f64>(&mut rng, 2, len);

    let mut tape = Tape::<f64>::new();
    let un = tape.constant(u.transpose().unwrap());
    let y = layer.forward(&mut tape, &store, &un).unwrap();
    let wn = tape.constant(w.transpose().unwrap());
    let prod = tape.mul(&y, &wn).unwrap();
    let l = tape.sum(&prod).unwrap();
    let grads = tape.backward(&l).unwrap().for_params(&store);

    let h = 1e-5;
    for id in layer.param_ids().iter() {
        let n = store.get(*id).numel();
        for i in 0..n {
            let orig = store.get(*id).data()[i];
            store.get_mut(*id).data_mut()[i] = orig + h;
            let up = loss(&layer, &store, &u, &w);
            store.get_mut(*id).data_mut()[i] = orig - h;
            let down = loss(&layer, &store, &u, &w);
            store.get_mut(*id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[id.index()].data()[i];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "param {} [{i}]: analytic {an} vs fd {fd}",
                store.param(*id).name
            );
        }
    }
}
