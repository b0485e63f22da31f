//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! `ACCEPTANCE_ONLY=1,4,9` runs a subset; `ACCEPTANCE_STRICT=1` turns any
//! FAIL into a non-zero exit.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s4dec::config::{RunConfig, TaskKind, VariantName};
use s4dec::data::{Dataset, TaskData};
use s4dec::eval::evaluate_discrete;
use s4dec::longform::{run_longform_experiment, EvalSet};
use s4dec::{average_checkpoints, train, Checkpoint};
use s4dec_core::autodiff::{Eager, Graph, Op, Tape};
use s4dec_core::decoder::{Decoder, DecoderConfig, DecoderInput, OutputHead, Variant};
use s4dec_core::linalg::{CMat, Lu};
use s4dec_core::metrics::Metrics;
use s4dec_core::params::{ParamKind, ParamStore};
use s4dec_core::s4::{channel_discrete, s4_forward_conv, s4_forward_step, S4Layer};
use s4dec_core::search::{beam_search, SearchConfig, StepModel};
use s4dec_core::ssm::{discretize_bilinear, materialize_kernel, ContinuousSsm, DiscreteSsm};
use s4dec_core::tensor::Tensor;
use s4dec_core::Real;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- helpers

fn cplx(rng: &mut impl Rng, scale: f64) -> Complex64 {
    Complex64::new(rng.gen_range(-1.0..1.0) * scale, rng.gen_range(-1.0..1.0) * scale)
}

/// `V diag(μ) V⁻¹` with every eigenvalue strictly in the left half-plane.
fn random_stable(rng: &mut impl Rng, n: usize) -> ContinuousSsm {
    let mu: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.gen_range(-2.0..-0.05), rng.gen_range(-3.0..3.0)))
        .collect();
    let v = CMat::identity(n).add(&CMat::from_fn(n, n, |_, _| cplx(rng, 0.3)));
    let vd = v.matmul(&CMat::diag(&mu));
    let a = Lu::factor(&v).unwrap().solve_adjoint_mat(&vd.adjoint()).adjoint();
    ContinuousSsm::new(
        a,
        (0..n).map(|_| cplx(rng, 1.0)).collect(),
        (0..n).map(|_| cplx(rng, 1.0)).collect(),
        cplx(rng, 1.0),
    )
    .unwrap()
}

fn spectral_radius(m: &CMat) -> f64 {
    let n = m.rows();
    let (_, t) = nalgebra::linalg::Schur::new(DMatrix::from_fn(n, n, |i, j| m[(i, j)])).unpack();
    (0..n).map(|i| t[(i, i)].norm()).fold(0.0, f64::max)
}

/// `C̄ Āᵏ B̄` from explicit matrix powers `Āᵏ = Āᵏ⁻¹ Ā`.
fn matpow_kernel(d: &DiscreteSsm, len: usize) -> Vec<f64> {
    let n = d.state_size();
    let b = CMat::from_rows(n, 1, d.b_bar.clone()).unwrap();
    let c = CMat::from_rows(1, n, d.c_bar.clone()).unwrap();
    let mut power = CMat::identity(n);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(c.matmul(&power).matmul(&b)[(0, 0)].re);
        power = power.matmul(&d.a_bar);
    }
    out
}

/// Layer with every parameter group moved off its structured init.
fn random_layer<T: Real>(rng: &mut ChaCha8Rng, h: usize, n: usize) -> (ParamStore<T>, S4Layer) {
    let mut store = ParamStore::<T>::new();
    let layer = S4Layer::new(&mut store, "s4", h, n, h, rng).unwrap();
    for (k, id) in layer.param_ids().iter().enumerate() {
        for v in store.get_mut(*id).data_mut() {
            let x = v.as_f64();
            *v = T::of(match k {
                0 => x + rng.gen_range(-0.5..1.0),
                1 => x + rng.gen_range(-0.5..0.5),
                2 | 3 => rng.gen_range(-0.4..0.4),
                4..=7 => x + rng.gen_range(-0.3..0.3),
                8 => rng.gen_range(1e-3f64.ln()..0.5f64.ln()),
                _ => x + rng.gen_range(-0.2..0.2),
            });
        }
    }
    (store, layer)
}

fn random_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    // magnitudes off zero keep relu and |·| differentiable at every sample
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            T::of(if rng.gen() { v } else { -v })
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn conv_step_gap<T: Real>(rng: &mut ChaCha8Rng) -> f64 {
    let h = rng.gen_range(1..=8);
    let n = [2, 4, 8, 16, 32][rng.gen_range(0..5)];
    let len = rng.gen_range(1..=128);
    let (store, layer) = random_layer::<T>(rng, h, n);
    let u: Tensor<T> = random_tensor(rng, &[h, len]);
    let conv = s4_forward_conv(&layer, &store, &u).unwrap();
    let stepper = layer.prepare(&store).unwrap();
    let mut state = stepper.zero_state();
    let ut = u.transpose().unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..len {
        let y = s4_forward_step(&stepper, &mut state, ut.row(t)).unwrap();
        for (i, v) in y.iter().enumerate() {
            worst = worst.max((v.as_f64() - conv.data()[i * len + t].as_f64()).abs());
        }
    }
    worst
}

/// Central-difference error of `⟨w, f(θ)⟩` against the analytic gradient,
/// relative with a floor.
fn rel_err(an: f64, fd: f64, floor: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(floor)
}

fn op_fd_error(make: &dyn Fn() -> Op<f64>, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) -> f64 {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let op = make();
    let y = op.forward(&refs).unwrap();
    let w: Tensor<f64> = random_tensor(rng, y.shape());
    let grads = op.backward(&refs, &y, &w).unwrap();
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        let r: Vec<&Tensor<f64>> = xs.iter().collect();
        make()
            .forward(&r)
            .unwrap()
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let mut xs = inputs.clone();
            xs[k].data_mut()[i] += h;
            let up = objective(&xs);
            xs[k].data_mut()[i] -= 2.0 * h;
            let fd = (up - objective(&xs)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[i], fd, 1e-3));
        }
    }
    worst
}

/// Worst error of the S4 kernel op's parameter gradients.
fn s4_kernel_fd_error(rng: &mut ChaCha8Rng) -> f64 {
    let (mut store, layer) = random_layer::<f64>(rng, 2, 4);
    let len = 10;
    let w: Tensor<f64> = random_tensor(rng, &[2, len]);
    let objective = |store: &ParamStore<f64>| -> f64 {
        let k = layer.kernel(&mut Eager, store, len).unwrap();
        k.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let k = layer.kernel(&mut tape, &store, len).unwrap();
    let wn = tape.constant(w.clone());
    let p = tape.mul(&k, &wn).unwrap();
    let l = tape.sum(&p).unwrap();
    let grads = tape.backward(&l).unwrap().for_params(&store);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.param(id).kind != ParamKind::S4 {
            continue;
        }
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = objective(&store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = objective(&store);
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(grads[id.index()].data()[i], (up - down) / (2.0 * h), 1e-3));
        }
    }
    worst
}

fn decoder_fd_error(variant: Variant, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let vocab = 5;
    let cfg = DecoderConfig {
        num_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        state_size: 4,
        dropout: 0.0,
        stochastic_depth_p: 0.0,
        variant,
        output_head: OutputHead::Token { vocab_size: vocab },
    };
    let mut store = ParamStore::<f64>::new();
    let dec = Decoder::new(&mut store, cfg, 3).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let name = store.param(id).name.clone();
        for v in store.get_mut(id).data_mut() {
            let noise = 0.3 * rng.gen_range(-1.0..1.0);
            *v = if name.contains(".p_") { noise } else { *v + noise };
        }
    }
    let len = 6;
    let input = DecoderInput::Tokens((0..len).map(|_| rng.gen_range(0..vocab)).collect());
    let targets: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
    let mem: Tensor<f64> = random_tensor(rng, &[4, 8]);
    let mask = [true; 4];
    let loss = |store: &ParamStore<f64>| -> f64 {
        let mut g = Eager;
        let m = g.constant(mem.clone());
        let y = dec.forward_train(&mut g, store, &input, &m, &mask, None, None).unwrap();
        g.cross_entropy(&y, targets.clone()).unwrap().item()
    };
    let mut tape = Tape::new();
    let m = tape.constant(mem.clone());
    let y = dec
        .forward_train(&mut tape, &store, &input, &m, &mask, None, None)
        .unwrap();
    let l = tape.cross_entropy(&y, targets.clone()).unwrap();
    let grads = tape.backward(&l).unwrap().for_params(&store);
    let h = 1e-5;
    let (mut worst, mut count) = (0f64, 0);
    for id in ids {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&store);
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(grads[id.index()].data()[i], (up - down) / (2.0 * h), 1e-4));
            count += 1;
        }
    }
    (worst, count)
}

/// Next-token log-probabilities are a fixed random function of the prefix.
struct PrefixToy {
    logits: std::collections::HashMap<Vec<usize>, Vec<f64>>,
}

const TOY_EOS: usize = 2;
const TOY_BOS: usize = 3;

impl PrefixToy {
    fn new(rng: &mut ChaCha8Rng, max_len: usize) -> Self {
        let mut logits = std::collections::HashMap::new();
        let mut frontier = vec![Vec::new()];
        for _ in 0..=max_len {
            let mut next = Vec::new();
            for p in frontier {
                logits.insert(p.clone(), (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect());
                for t in 0..2 {
                    let mut q: Vec<usize> = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            frontier = next;
        }
        Self { logits }
    }

    fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let l = &self.logits[prefix];
        let lse = l.iter().map(|v| v.exp()).sum::<f64>().ln();
        l.iter().map(|v| v - lse).collect()
    }

    /// Best normalized score over every sequence a search may return:
    /// EOS-terminated below `max_len`, cut off at `max_len`.
    fn exhaustive(&self, max_len: usize) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        for len in 0..=max_len {
            for bits in 0..(1usize << len) {
                let toks: Vec<usize> = (0..len).map(|i| (bits >> i) & 1).collect();
                let mut lp: f64 = (0..len).map(|i| self.log_probs(&toks[..i])[toks[i]]).sum();
                let mut n = len;
                if len < max_len {
                    lp += self.log_probs(&toks)[TOY_EOS];
                    n += 1;
                }
                if lp / n as f64 > best.1 {
                    best = (toks, lp / n as f64);
                }
            }
        }
        best
    }
}

impl StepModel for PrefixToy {
    type State = Vec<usize>;

    fn initial_state(&self) -> s4dec_core::Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&self, state: &mut Vec<usize>, token: usize) -> s4dec_core::Result<Vec<f64>> {
        if token != TOY_BOS {
            state.push(token);
        }
        Ok(self.log_probs(state))
    }
}

// ---------------------------------------------------------------- runs

/// Shared long-form run for the length and convergence trends: the desk
/// defaults over three seeds.
fn trend_config() -> RunConfig {
    RunConfig {
        seeds: vec![0, 1, 2],
        ..RunConfig::default()
    }
}

fn lookup<'a>(r: &'a s4dec::longform::LongformReport, seed: u64, v: VariantName, set: EvalSet) -> &'a Metrics {
    r.block(seed, v, set).expect("every seed, variant and set is evaluated")
}

fn bucket_error(m: &Metrics, lo: usize) -> f64 {
    m.buckets
        .iter()
        .find(|b| b.lo == lo)
        .map_or(f64::NAN, |b| b.tally.error_rate())
}

// ---------------------------------------------------------------- criteria

fn mode_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut w64, mut w32) = (0f64, 0f64);
    for _ in 0..200 {
        w64 = w64.max(conv_step_gap::<f64>(&mut rng));
        w32 = w32.max(conv_step_gap::<f32>(&mut rng));
    }
    check(
        w64 < 1e-9 && w32 < 1e-5,
        format!("200 layers each: max gap {w64:.2e} double, {w32:.2e} single"),
    )
}

fn kernel_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    let rel = |k: &[f64], o: &[f64]| {
        let scale = o.iter().fold(0f64, |m, v| m.max(v.abs()));
        // NaN must surface rather than vanish inside `max`
        k.iter()
            .zip(o)
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0f64, |m, e| if e > m || e.is_nan() { e } else { m })
    };
    for &(n, len) in &[(1, 16), (2, 64), (4, 100), (8, 200), (16, 256)] {
        for _ in 0..5 {
            let delta = 10f64.powf(rng.gen_range(-2.5..-0.5));
            let d = discretize_bilinear(&random_stable(&mut rng, n), delta).unwrap();
            worst = worst.max(rel(&materialize_kernel(&d, len), &matpow_kernel(&d, len)));
        }
        // the layer's structured kernel against the dense discretized system
        let (store, layer) = random_layer::<f64>(&mut rng, 2, n.max(2));
        let k = layer.kernel(&mut Eager, &store, len).unwrap();
        for c in 0..2 {
            let d = channel_discrete(&layer, &store, c).unwrap();
            worst = worst.max(rel(k.row(c), &matpow_kernel(&d, len)));
        }
    }
    check(
        worst <= 1e-10,
        format!("N ≤ 16, L ≤ 256: max relative error {worst:.2e}"),
    )
}

fn discretization_fixpoints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for n in [1, 4, 16] {
        let b: Vec<Complex64> = (0..n).map(|_| cplx(&mut rng, 2.0)).collect();
        let s = ContinuousSsm::new(CMat::zeros(n, n), b.clone(), b.clone(), Complex64::new(0.0, 0.0)).unwrap();
        let delta = rng.gen_range(1e-3..1.0);
        let d = discretize_bilinear(&s, delta).unwrap();
        if d.a_bar != CMat::identity(n) || d.b_bar.iter().zip(&b).any(|(x, y)| *x != y * delta) {
            return Err(format!("A = 0 with N = {n} is not mapped to (I, ΔB)"));
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=16);
        let delta = 10f64.powf(rng.gen_range(-3.0..0.5));
        let d = discretize_bilinear(&random_stable(&mut rng, n), delta).unwrap();
        worst = worst.max(spectral_radius(&d.a_bar));
    }
    check(
        worst < 1.0,
        format!("A = 0 exact; 100 stable systems, max spectral radius {worst:.6}"),
    )
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let r = &mut rng;
    let m = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor::<f64>(r, s);
    let mask: Vec<bool> = (0..15).map(|i| i % 5 <= i / 5 + 1).collect();
    let cases: Vec<(Box<dyn Fn() -> Op<f64>>, Vec<Tensor<f64>>)> = vec![
        (Box::new(|| Op::Add), vec![m(r, &[3, 4]), m(r, &[3, 4])]),
        (Box::new(|| Op::Sub), vec![m(r, &[3, 4]), m(r, &[3, 4])]),
        (Box::new(|| Op::Mul), vec![m(r, &[3, 4]), m(r, &[3, 4])]),
        (Box::new(|| Op::Scale(-1.7)), vec![m(r, &[2, 5])]),
        (Box::new(|| Op::AddRow), vec![m(r, &[3, 4]), m(r, &[4])]),
        (Box::new(|| Op::MulRow), vec![m(r, &[3, 4]), m(r, &[4])]),
        (Box::new(|| Op::MatMul), vec![m(r, &[3, 4]), m(r, &[4, 2])]),
        (Box::new(|| Op::MatMulNT), vec![m(r, &[3, 4]), m(r, &[5, 4])]),
        (Box::new(|| Op::Sigmoid), vec![m(r, &[3, 3])]),
        (Box::new(|| Op::Relu), vec![m(r, &[3, 3])]),
        (Box::new(|| Op::Softmax { mask: None }), vec![m(r, &[3, 5])]),
        (
            Box::new(move || Op::Softmax {
                mask: Some(mask.clone()),
            }),
            vec![m(r, &[3, 5])],
        ),
        (
            Box::new(|| Op::LayerNorm { eps: 1e-5 }),
            vec![m(r, &[3, 6]), m(r, &[6]), m(r, &[6])],
        ),
        (
            Box::new(|| Op::Gather {
                indices: vec![2, 0, 2, 1],
            }),
            vec![m(r, &[3, 4])],
        ),
        (Box::new(|| Op::SliceCols { start: 1, end: 4 }), vec![m(r, &[2, 5])]),
        (
            Box::new(|| Op::ConcatCols),
            vec![m(r, &[2, 3]), m(r, &[2, 1]), m(r, &[2, 2])],
        ),
        (Box::new(|| Op::ConcatRows), vec![m(r, &[1, 3]), m(r, &[2, 3])]),
        (Box::new(|| Op::Glu), vec![m(r, &[3, 6])]),
        (Box::new(|| Op::CausalConv), vec![m(r, &[3, 7]), m(r, &[5, 3])]),
        (Box::new(|| Op::CMul), vec![m(r, &[3, 4, 2]), m(r, &[3, 4, 2])]),
        (
            Box::new(|| Op::CrossEntropy { targets: vec![0, 3, 1] }),
            vec![m(r, &[3, 4])],
        ),
        (Box::new(|| Op::L1Loss), vec![m(r, &[3, 4]), m(r, &[3, 4])]),
        (Box::new(|| Op::Sum), vec![m(r, &[3, 4])]),
        (Box::new(|| Op::Mean), vec![m(r, &[3, 4])]),
    ];
    let mut op_worst: f64 = 0.0;
    let mut worst_name = String::new();
    for (make, inputs) in &cases {
        let e = op_fd_error(make.as_ref(), inputs.clone(), r);
        if e > op_worst {
            op_worst = e;
            worst_name = make().name().to_string();
        }
    }
    let s4 = s4_kernel_fd_error(r);
    if s4 > op_worst {
        op_worst = s4;
        worst_name = "s4_kernel".into();
    }
    let (e_s4, n_s4) = decoder_fd_error(Variant::S4, r);
    let (e_tr, n_tr) = decoder_fd_error(Variant::Transformer, r);
    let e2e = e_s4.max(e_tr);
    check(
        op_worst < 1e-5 && e2e < 1e-3,
        format!(
            "{} ops, worst {op_worst:.2e} ({worst_name}); 2-layer decoders over {} params, worst {e2e:.2e}",
            cases.len() + 1,
            n_s4 + n_tr
        ),
    )
}

fn learning_sanity() -> Outcome {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let data = TaskData::generate(&cfg.task).map_err(|e| e.to_string())?;
    let res = train(&cfg, 0, &data, None).map_err(|e| e.to_string())?;
    let Dataset::Discrete(valid) = &data.valid else {
        return Err("copy task validation is discrete".into());
    };
    let edges = Metrics::default_edges(cfg.task.max_len);
    let ev = evaluate_discrete(&res.model, &res.store, valid, cfg.task.vocab(), cfg.beam, &edges)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let acc = ev.metrics.total.exact_accuracy();
    check(
        acc >= 0.99 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "copy, {} epochs, {} examples: exact {:.2}% ({}/{}), {:.0}s",
            cfg.epochs,
            cfg.task.train_size,
            100.0 * acc,
            ev.metrics.total.exact,
            ev.metrics.total.sequences,
            elapsed.as_secs_f64()
        ),
    )
}

fn length_trend(report: &s4dec::longform::LongformReport, cfg: &RunConfig) -> Outcome {
    let lo = 2 * cfg.task.max_len;
    let mut wins = 0;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let mut bucket = [0.0; 2];
        let mut ratio = [0.0; 2];
        for (i, v) in [VariantName::S4, VariantName::Transformer].into_iter().enumerate() {
            let long = lookup(report, seed, v, EvalSet::Longform);
            let ind = lookup(report, seed, v, EvalSet::InDistribution);
            bucket[i] = bucket_error(long, lo);
            ratio[i] = long.error_rate() / ind.error_rate();
        }
        let win = bucket[0] < bucket[1] && ratio[0] < ratio[1];
        wins += usize::from(win);
        lines.push(format!(
            "seed {seed}: bucket s4 {:.3} vs tr {:.3}, ratio {:.2} vs {:.2}",
            bucket[0], bucket[1], ratio[0], ratio[1]
        ));
    }
    check(
        2 * wins > cfg.seeds.len(),
        format!("{wins}/{} seeds; {}", cfg.seeds.len(), lines.join("; ")),
    )
}

fn convergence_trend(report: &s4dec::longform::LongformReport, cfg: &RunConfig) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let s4 = report.final_l1(seed, VariantName::S4).ok_or("missing S4 curve")?;
        let tr = report
            .final_l1(seed, VariantName::Transformer)
            .ok_or("missing transformer curve")?;
        wins += usize::from(s4 <= tr);
        lines.push(format!("seed {seed}: {s4:.4} vs {tr:.4}"));
    }
    let params: Vec<String> = report.param_counts.iter().map(|(v, n)| format!("{v:?} {n}")).collect();
    check(
        2 * wins > cfg.seeds.len(),
        format!(
            "{wins}/{} seeds; {} (params {})",
            cfg.seeds.len(),
            lines.join("; "),
            params.join(", ")
        ),
    )
}

fn beam_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let (max_len, trials) = (4, 500);
    // two symbols plus EOS can be emitted: 3^4 covers every prefix
    let beam = 3usize.pow(max_len as u32);
    for t in 0..trials {
        let toy = PrefixToy::new(&mut rng, max_len);
        let got = beam_search(
            &toy,
            &SearchConfig {
                beam,
                max_len,
                bos: TOY_BOS,
                eos: TOY_EOS,
            },
        )
        .map_err(|e| e.to_string())?;
        let (toks, score) = toy.exhaustive(max_len);
        // sequences must match exactly; scores up to summation order
        if got.tokens != toks || (got.score() - score).abs() > 1e-12 {
            return Err(format!(
                "toy {t}: beam {:?} ({}) vs exhaustive {toks:?} ({score})",
                got.tokens,
                got.score()
            ));
        }
    }
    Ok(format!(
        "{trials} random vocab-2, max_len-{max_len} toys, beam {beam}: exact match"
    ))
}

fn averaging_identities() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.model.variant = VariantName::Transformer;
    let (model, mut store) = {
        let mut store = ParamStore::<f32>::new();
        let m = s4dec_core::model::Seq2Seq::new(&mut store, cfg.model_config(), 5).map_err(|e| e.to_string())?;
        (m, store)
    };
    let _ = model;
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-1.0f32..1.0);
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = Checkpoint::from_store(&cfg, 7, Some(0.5), &store);
    let path = dir.path().join("w.ckpt");
    w.save(&path).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut notes = Vec::new();
    for k in [2, 3, 5] {
        let avg = average_checkpoints(&vec![w.clone(); k]).map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("avg{k}.ckpt"));
        avg.save(&p).map_err(|e| e.to_string())?;
        let same = std::fs::read(&p).map_err(|e| e.to_string())? == std::fs::read(&path).map_err(|e| e.to_string())?;
        ok &= same;
        notes.push(format!("{k} copies {}", if same { "byte-equal" } else { "differ" }));
    }
    let mut neg = w.clone();
    for t in &mut neg.tensors {
        *t = t.map(|v| -v);
    }
    let zero = average_checkpoints(&[w.clone(), neg]).map_err(|e| e.to_string())?;
    let zeros = zero.tensors.iter().flat_map(|t| t.data()).all(|&v| v.to_bits() == 0);
    ok &= zeros;
    notes.push(format!("{{w, -w}} {}", if zeros { "all +0" } else { "non-zero" }));
    check(ok, format!("{} tensors: {}", w.tensors.len(), notes.join(", ")))
}

fn determinism() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::Continuous] {
        for variant in [VariantName::S4, VariantName::Transformer] {
            let mut cfg = RunConfig::default();
            cfg.model.variant = variant;
            cfg.model.dropout = 0.1;
            cfg.model.stochastic_depth_p = 0.1;
            cfg.task.kind = kind;
            cfg.task.train_size = 64;
            cfg.task.valid_size = 16;
            cfg.epochs = 2;
            let data = TaskData::generate(&cfg.task).map_err(|e| e.to_string())?;
            let mut logs = Vec::new();
            for _ in 0..2 {
                let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
                let res = train(&cfg, 11, &data, Some(dir.path())).map_err(|e| e.to_string())?;
                let log = std::fs::read(dir.path().join("log.jsonl")).map_err(|e| e.to_string())?;
                let ckpt = std::fs::read(dir.path().join("averaged.ckpt")).map_err(|e| e.to_string())?;
                let eval = match &data.valid {
                    Dataset::Discrete(v) => {
                        let edges = Metrics::default_edges(cfg.task.max_len);
                        let ev = evaluate_discrete(&res.model, &res.store, v, cfg.task.vocab(), cfg.beam, &edges)
                            .map_err(|e| e.to_string())?;
                        format!("{:?}", ev)
                    }
                    Dataset::Continuous(_) => String::new(),
                };
                logs.push((log, ckpt, eval));
            }
            let same = logs[0] == logs[1];
            ok &= same;
            if !same {
                notes.push(format!("{kind:?}/{variant:?} differs"));
            }
        }
    }
    check(
        ok,
        if ok {
            "6 task/variant pairs: logs, checkpoints and metrics bit-identical".into()
        } else {
            notes.join(", ")
        },
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    // panics become FAIL lines; the message is reported there
    std::panic::set_hook(Box::new(|_| {}));
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));

    let trend_cfg = trend_config();
    let mut trend: Option<Result<s4dec::longform::LongformReport, String>> = None;
    let report = |slot: &mut Option<Result<_, String>>| -> Result<s4dec::longform::LongformReport, String> {
        slot.get_or_insert_with(|| run_longform_experiment(&trend_cfg, None).map_err(|e| e.to_string()))
            .clone()
    };

    let (mut ran, mut failed) = (0, 0);
    let names = [
        "mode equivalence",
        "kernel correctness",
        "discretization fixpoints",
        "gradient fidelity",
        "learning sanity",
        "length-extrapolation trend",
        "convergence trend",
        "beam search optimality",
        "checkpoint averaging identities",
        "determinism",
    ];
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !wanted(id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let run = catch_unwind(AssertUnwindSafe(|| match id {
            1 => mode_equivalence(),
            2 => kernel_correctness(),
            3 => discretization_fixpoints(),
            4 => gradient_fidelity(),
            5 => learning_sanity(),
            6 => report(&mut trend).and_then(|r| length_trend(&r, &trend_cfg)),
            7 => report(&mut trend).and_then(|r| convergence_trend(&r, &trend_cfg)),
            8 => beam_optimality(),
            9 => averaging_identities(),
            _ => determinism(),
        }));
        let outcome = run.unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {ran} criteria pass", ran - failed);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        std::process::exit(1);
    }
}
