use ndiff::{finite_diff_check, sigmoid, BatchNormMode, BatchNormState, CheckOptions, Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ out ⊙ w` for a fixed pseudo-random `w`, so every output entry carries
/// a distinct cotangent.
fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.7316).sin() + 0.25).collect())?;
    let w = g.constant(w);
    let p = g.hadamard(out, w)?;
    Ok(g.sum(p))
}

fn check<F>(f: F, leaves: &[Tensor], tol: f64)
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = finite_diff_check(f, leaves, &CheckOptions::default()).unwrap();
    assert!(report.passed(tol), "{report:#?}");
}

// Three shape configurations per primitive.
const SHAPES: [(usize, usize, usize); 3] = [(2, 3, 4), (5, 4, 3), (1, 6, 2)];

#[test]
fn matmul_identity_and_hand_value() {
    let mut g = Graph::new();
    let m = g.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let i = g.constant(Tensor::eye(2));
    let p = g.matmul(i, m).unwrap();
    assert_eq!(g.value(p), g.value(m));

    let a = g.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
    assert!(g.matmul(a, a).is_err());
}

#[test]
fn matmul_gradients_match_central_differences() {
    let mut r = rng(1);
    let a = uniform(&[5, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let report = finite_diff_check(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c)
        },
        &[a, b],
        &CheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(1e-6), "{report:#?}");

    for (m, k, n) in SHAPES {
        let a = uniform(&[m, k], -1.0, 1.0, &mut r);
        let bt = uniform(&[n, k], -1.0, 1.0, &mut r);
        check(
            |g, v| {
                let c = g.matmul_bt(v[0], v[1])?;
                weighted_sum(g, c)
            },
            &[a, bt],
            TOL,
        );
    }
}

#[test]
fn hadamard_identities_and_gradients() {
    let mut r = rng(2);
    let a = uniform(&[3, 4], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let ones = g.constant(Tensor::ones([3, 4]));
    let zeros = g.constant(Tensor::zeros([3, 4]));
    let p1 = g.hadamard(av, ones).unwrap();
    let p0 = g.hadamard(av, zeros).unwrap();
    assert_eq!(g.value(p1), &a);
    assert_eq!(g.value(p0), &Tensor::zeros([3, 4]));

    let b = uniform(&[3, 4], -2.0, 2.0, &mut r);
    let report = finite_diff_check(
        |g, v| {
            let p = g.hadamard(v[0], v[1])?;
            weighted_sum(g, p)
        },
        &[a, b],
        &CheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(1e-6), "{report:#?}");

    for (m, n, _) in SHAPES {
        let a = uniform(&[m, n], -1.0, 1.0, &mut r);
        let row = uniform(&[n], -1.0, 1.0, &mut r);
        check(
            |g, v| {
                let p = g.hadamard(v[0], v[1])?;
                weighted_sum(g, p)
            },
            &[a, row],
            TOL,
        );
    }
}

#[test]
fn add_scale_and_scale_rows_gradients() {
    let mut r = rng(3);
    for (m, n, _) in SHAPES {
        let a = uniform(&[m, n], -1.0, 1.0, &mut r);
        let b = uniform(&[m, n], -1.0, 1.0, &mut r);
        let row = uniform(&[n], -1.0, 1.0, &mut r);
        let s = uniform(&[m], -1.0, 1.0, &mut r);
        check(
            |g, v| {
                let x = g.add(v[0], v[1])?;
                let y = g.add(x, v[2])?;
                let z = g.scale(y, -1.7);
                let w = g.scale_rows(z, v[3])?;
                weighted_sum(g, w)
            },
            &[a, b, row, s],
            TOL,
        );
    }
}

#[test]
fn reshape_concat_and_stack_gradients() {
    let mut r = rng(4);
    for (m, n, k) in SHAPES {
        let a = uniform(&[m, n], -1.0, 1.0, &mut r);
        let b = uniform(&[m, k], -1.0, 1.0, &mut r);
        let c = uniform(&[m, n], -1.0, 1.0, &mut r);
        check(
            |g, v| {
                let cat = g.concat_cols(&[v[0], v[1], v[0]])?;
                let flat = g.reshape(cat, [m * (2 * n + k)])?;
                let st = g.stack_rows(&[v[0], v[2]])?;
                assert_eq!(g.shape(st), &[2, m, n]);
                let a = weighted_sum(g, flat)?;
                let b = weighted_sum(g, st)?;
                let a = g.reshape(a, [1, 1])?;
                let b = g.reshape(b, [1, 1])?;
                let both = g.concat_cols(&[a, b])?;
                weighted_sum(g, both)
            },
            &[a, b, c],
            TOL,
        );
    }
}

#[test]
fn gather_and_scatter_gradients() {
    let mut r = rng(5);
    for (rows, cols, picks) in SHAPES {
        let table = uniform(&[rows, cols], -1.0, 1.0, &mut r);
        let ids: Vec<usize> = (0..picks + 3).map(|_| r.random_range(0..rows)).collect();
        let out_rows = rows + 2;
        let targets: Vec<usize> = (0..ids.len()).map(|_| r.random_range(0..out_rows)).collect();
        check(
            |g, v| {
                let gathered = g.gather_rows(v[0], ids.clone())?;
                let scattered = g.scatter_add_rows(gathered, targets.clone(), out_rows)?;
                let t = g.tanh(scattered);
                weighted_sum(g, t)
            },
            &[table],
            TOL,
        );
    }
}

#[test]
fn gather_rejects_out_of_range_ids() {
    let mut g = Graph::new();
    let t = g.constant(Tensor::zeros([3, 2]));
    assert!(g.gather_rows(t, vec![0, 3]).is_err());
}

#[test]
fn segment_softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([6], vec![7.3, 2.0, 2.0, 1.0, 0.0, 0.0]).unwrap());
    let y = g.segment_softmax(x, vec![0, 1, 1, 3, 6]).unwrap();
    let y = g.value(y).data();
    assert_eq!(y[0], 1.0);
    assert!((y[1] - 0.5).abs() < 1e-15 && (y[2] - 0.5).abs() < 1e-15);
    // Scalar oracle: e / (e + 2) and 1 / (e + 2).
    let e = std::f64::consts::E;
    assert!((y[3] - e / (e + 2.0)).abs() < 1e-12);
    assert!((y[3] - 0.5761).abs() < 1e-4);
    assert!((y[4] - 0.2119).abs() < 1e-4 && (y[5] - 0.2119).abs() < 1e-4);

    let empty = g.constant(Tensor::zeros([0]));
    let out = g.segment_softmax(empty, vec![0, 0, 0]).unwrap();
    assert!(g.value(out).is_empty());
    assert!(g.segment_softmax(x, vec![0, 4]).is_err());
}

#[test]
fn segment_softmax_is_stable_for_large_scores() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([2], vec![1000.0, 1000.0]).unwrap());
    let y = g.segment_softmax(x, vec![0, 2]).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn segment_softmax_gradients() {
    let mut r = rng(6);
    for (a, b, c) in SHAPES {
        let offsets = vec![0, a, a + b, a + b, a + b + c];
        let x = uniform(&[a + b + c], -2.0, 2.0, &mut r);
        check(
            |g, v| {
                let y = g.segment_softmax(v[0], offsets.clone())?;
                weighted_sum(g, y)
            },
            &[x],
            TOL,
        );
    }
}

#[test]
fn sddmm_and_spmm_gradients() {
    let mut r = rng(7);
    for (rows, width, extra) in SHAPES {
        let a = uniform(&[rows, width], -1.0, 1.0, &mut r);
        let b = uniform(&[rows + 1, width], -1.0, 1.0, &mut r);
        let edges = rows + extra;
        let ia: Vec<usize> = (0..edges).map(|_| r.random_range(0..rows)).collect();
        let ib: Vec<usize> = (0..edges).map(|_| r.random_range(0..rows + 1)).collect();
        let offsets = vec![0, edges / 3, edges / 3, edges];
        let weights = uniform(&[edges], -1.0, 1.0, &mut r);
        check(
            |g, v| {
                let s = g.sddmm(v[0], v[1], ia.clone(), ib.clone())?;
                let w = g.hadamard(s, v[2])?;
                let agg = g.spmm(w, v[1], ib.clone(), offsets.clone())?;
                weighted_sum(g, agg)
            },
            &[a, b, weights],
            TOL,
        );
    }
}

#[test]
fn spmm_matches_gather_scale_scatter() {
    let mut r = rng(8);
    let values = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let weights = uniform(&[5], 0.0, 1.0, &mut r);
    let cols = vec![2, 0, 3, 3, 1];
    let offsets = vec![0, 2, 2, 5];
    let rows = vec![0, 0, 2, 2, 2];
    let mut g = Graph::new();
    let v = g.constant(values);
    let w = g.constant(weights);
    let fused = g.spmm(w, v, cols.clone(), offsets).unwrap();
    let gathered = g.gather_rows(v, cols).unwrap();
    let scaled = g.scale_rows(gathered, w).unwrap();
    let composed = g.scatter_add_rows(scaled, rows, 3).unwrap();
    for (x, y) in g.value(fused).data().iter().zip(g.value(composed).data()) {
        assert!((x - y).abs() < 1e-14);
    }
    assert!(g.value(fused).row(1).iter().all(|&x| x == 0.0));
}

#[test]
fn nonlinearity_values_and_gradients() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!((sigmoid(1e3) - 1.0).abs() < 1e-12);
    assert!(sigmoid(-1e3) >= 0.0);
    let mut r = rng(9);
    for (m, n, _) in SHAPES {
        let x = uniform(&[m, n], -3.0, 3.0, &mut r);
        check(
            |g, v| {
                let a = g.leaky_relu(v[0], 0.2);
                let b = g.tanh(v[0]);
                let c = g.sigmoid(v[0]);
                let ab = g.add(a, b)?;
                let abc = g.hadamard(ab, c)?;
                weighted_sum(g, abc)
            },
            &[x],
            TOL,
        );
    }
}

#[test]
fn dropout_is_identity_in_eval_and_inverted_in_train() {
    let mut r = rng(10);
    let x = uniform(&[20, 10], 0.5, 1.0, &mut r);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let same = g.dropout(v, 0.3, false, &mut r).unwrap();
    assert_eq!(same, v);
    let d = g.dropout(v, 0.3, true, &mut r).unwrap();
    let kept = 1.0 / 0.7;
    let mut zeros = 0;
    for (o, i) in g.value(d).data().iter().zip(x.data()) {
        if *o == 0.0 {
            zeros += 1;
        } else {
            assert!((o - i * kept).abs() < 1e-12);
        }
    }
    assert!((30..=90).contains(&zeros), "{zeros} of 200 dropped");
    assert!(g.dropout(v, 1.0, true, &mut r).is_err());

    for (m, n, _) in SHAPES {
        let x = uniform(&[m, n], -1.0, 1.0, &mut r);
        check(
            |g, v| {
                let mut fixed = rng(77);
                let d = g.dropout(v[0], 0.4, true, &mut fixed)?;
                weighted_sum(g, d)
            },
            &[x],
            TOL,
        );
    }
}

#[test]
fn batch_norm_train_gradients() {
    let mut r = rng(11);
    for (b, f, _) in SHAPES.iter().map(|&(a, b, c)| (a + 2, b, c)) {
        let x = uniform(&[b, f], -2.0, 2.0, &mut r);
        let gamma = uniform(&[f], 0.5, 1.5, &mut r);
        let beta = uniform(&[f], -0.5, 0.5, &mut r);
        check(
            |g, v| {
                let mut state = BatchNormState::new(f);
                let y = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train(&mut state))?;
                weighted_sum(g, y)
            },
            &[x, gamma, beta],
            TOL,
        );
    }
}

#[test]
fn batch_norm_eval_is_affine_in_running_stats() {
    let mut r = rng(12);
    let mut state = BatchNormState::new(3);
    let x = uniform(&[8, 3], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::new([3], vec![1.0, 2.0, 0.5]).unwrap());
    let beta = g.constant(Tensor::new([3], vec![0.0, -1.0, 0.25]).unwrap());
    g.batch_norm(xv, gamma, beta, BatchNormMode::Train(&mut state)).unwrap();
    assert!(state.running_mean.iter().any(|&m| m != 0.0));

    let y1 = g.batch_norm(xv, gamma, beta, BatchNormMode::Eval(&state)).unwrap();
    let y2 = g.batch_norm(xv, gamma, beta, BatchNormMode::Eval(&state)).unwrap();
    assert_eq!(g.value(y1), g.value(y2));
    let gv = [1.0, 2.0, 0.5];
    let bv = [0.0, -1.0, 0.25];
    for i in 0..8 {
        for j in 0..3 {
            let want = gv[j] * (x.get(&[i, j]) - state.running_mean[j]) / (state.running_var[j] + 1e-5).sqrt() + bv[j];
            assert!((g.value(y1).get(&[i, j]) - want).abs() < 1e-12);
        }
    }

    // Eval-mode gradient is the affine map's.
    let s2 = state.clone();
    check(
        |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval(&s2))?;
            weighted_sum(g, y)
        },
        &[x, Tensor::ones([3]), Tensor::zeros([3])],
        TOL,
    );
}

#[test]
fn conv2d_identity_zero_and_gradients() {
    let mut r = rng(13);
    let x = uniform(&[2, 1, 4, 5], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let one = g.constant(Tensor::ones([1, 1, 1, 1]));
    let y = g.conv2d(xv, one).unwrap();
    assert_eq!(g.value(y), &x);
    let zero = g.constant(Tensor::zeros([3, 1, 2, 2]));
    let z = g.conv2d(xv, zero).unwrap();
    assert_eq!(g.shape(z), &[2, 3, 3, 4]);
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    let huge = g.constant(Tensor::zeros([1, 1, 5, 5]));
    assert!(g.conv2d(xv, huge).is_err());

    // Single 1×6×6 image with two 3×3 kernels.
    let input = uniform(&[1, 1, 6, 6], -1.0, 1.0, &mut r);
    let kernels = uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
    check(
        |g, v| {
            let c = g.conv2d(v[0], v[1])?;
            weighted_sum(g, c)
        },
        &[input, kernels],
        TOL,
    );

    for (b, c, o) in SHAPES {
        let input = uniform(&[b, c, 5, 4], -1.0, 1.0, &mut r);
        let kernels = uniform(&[o, c, 2, 3], -1.0, 1.0, &mut r);
        check(
            |g, v| {
                let y = g.conv2d(v[0], v[1])?;
                weighted_sum(g, y)
            },
            &[input, kernels],
            TOL,
        );
    }
}

#[test]
fn bce_mean_values_and_gradients() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new([1, 2], vec![0.9, 0.1]).unwrap());
    let y = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let l = g.bce_mean(p, &y).unwrap();
    let want = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    assert!((want - 0.10536).abs() < 1e-5);

    let half = g.constant(Tensor::full([3, 4], 0.5));
    let labels = Tensor::new([3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let l = g.bce_mean(half, &labels).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let exact = g.constant(labels.clone());
    let l = g.bce_mean(exact, &labels).unwrap();
    assert!(g.value(l).data()[0] <= 1e-11);

    let nan = g.constant(Tensor::new([1], vec![f64::NAN]).unwrap());
    assert!(g.bce_mean(nan, &Tensor::zeros([1])).is_err());

    let mut r = rng(14);
    for (m, n, _) in SHAPES {
        let probs = uniform(&[m, n], 0.05, 0.95, &mut r);
        let labels = Tensor::new([m, n], (0..m * n).map(|_| r.random_range(0..2) as f64).collect()).unwrap();
        check(|g, v| g.bce_mean(v[0], &labels), &[probs], TOL);
    }
}

#[test]
fn two_uses_of_a_tensor_accumulate() {
    // y = sum(x ⊙ w) + sum(3x)  ⇒  dy/dx = w + 3
    let mut g = Graph::new();
    let x = g.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let w = g.constant(Tensor::new([3], vec![0.5, 1.0, -1.0]).unwrap());
    let a = g.hadamard(x, w).unwrap();
    let a = g.sum(a);
    let b = g.scale(x, 3.0);
    let b = g.sum(b);
    let y = g.add(a, b).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[3.5, 4.0, 2.0]);
    assert!(grads.get(w).is_none());
}

#[test]
fn backward_requires_scalar_output() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros([2]));
    assert!(g.backward(x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segment_softmax_sums_to_one(
        sizes in prop::collection::vec(0usize..6, 1..8),
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let mut r = rng(seed);
        let mut offsets = vec![0];
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let n = *offsets.last().unwrap();
        let x = uniform(&[n], -scale, scale.max(0.2), &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.segment_softmax(xv, offsets.clone()).unwrap();
        let y = g.value(y).data();
        for w in offsets.windows(2) {
            if w[0] < w[1] {
                let s: f64 = y[w[0]..w[1]].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(y[w[0]..w[1]].iter().all(|&v| v > 0.0 || scale > 30.0));
            }
        }
    }

    #[test]
    fn composite_vjp_agrees_with_central_differences(
        m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let a = uniform(&[m, k], -1.0, 1.0, &mut r);
        let b = uniform(&[k, n], -1.0, 1.0, &mut r);
        let bias = uniform(&[n], -1.0, 1.0, &mut r);
        let report = finite_diff_check(
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                let c = g.add(c, v[2])?;
                let c = g.tanh(c);
                let s = g.sigmoid(c);
                weighted_sum(g, s)
            },
            &[a, b, bias],
            &CheckOptions::default(),
        ).unwrap();
        prop_assert!(report.passed(TOL), "{:?}", report);
    }
}
