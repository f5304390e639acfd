//! Backward pass of every tape primitive against central differences of
//! `sum(out * U)` for a random upstream `U`.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgforecast::nn::{
    adam_step, grad_check, AdamState, AttentionMask, Checkpoint, Mat, ParamBlock, ParamGrads, ParamStore, Tape, Var,
};

const TOL: f64 = 1e-6;

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.5);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
    .unwrap()
}

fn store_of(inputs: &[Mat]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, m) in inputs.iter().enumerate() {
        s.push(ParamBlock {
            name: format!("in{i}"),
            rows: m.rows,
            cols: m.cols,
            data: m.data.clone(),
        });
    }
    s
}

/// Largest mixed relative error between the analytic vector-Jacobian
/// product and central differences.
fn vjp_error<F>(inputs: &[Mat], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let store = store_of(inputs);
    let run = |s: &ParamStore, upstream: Option<&Mat>| -> (f64, Option<ParamGrads>, (usize, usize)) {
        let mut tape = Tape::new(s);
        let vars: Vec<Var> = s.ids().map(|id| tape.param(id)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.shape(out);
        match upstream {
            None => (0.0, None, shape),
            Some(u) => {
                let dot = tape.value(out).data.iter().zip(&u.data).map(|(a, b)| a * b).sum::<f64>();
                (dot, Some(tape.backward_with(out, u.clone()).params), shape)
            }
        }
    };
    let (r, c) = run(&store, None).2;
    let upstream = random_mat(r, c, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
    let grads = run(&store, Some(&upstream)).1.unwrap();
    let loss = |s: &ParamStore| run(s, Some(&upstream)).0;
    grad_check(loss, &store, &grads, 1e-6).max_rel_error
}

fn dims() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn linear_backward((seed, n, d) in dims(), o in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [random_mat(n, d, &mut rng), random_mat(o, d, &mut rng), random_mat(1, o, &mut rng)];
        let e = vjp_error(&ins, seed, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn elementwise_backward((seed, n, d) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [off_zero_mat(n, d, &mut rng), random_mat(n, d, &mut rng), random_mat(1, d, &mut rng)];
        let e = vjp_error(&ins, seed, |t, v| {
            let a = t.relu(v[0]);
            let b = t.sigmoid(v[1]);
            let c = t.tanh(v[0]);
            let s = t.cos(v[1]);
            let m = t.mul(a, b).unwrap();
            let m = t.sub(m, c).unwrap();
            let m = t.add(m, s).unwrap();
            let m = t.add_row(m, v[2]).unwrap();
            t.affine_scalar(m, 1.7, -0.3)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn layer_norm_backward((seed, n, d) in (any::<u64>(), 1usize..5, 2usize..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [random_mat(n, d, &mut rng), random_mat(1, d, &mut rng), random_mat(1, d, &mut rng)];
        let e = vjp_error(&ins, seed, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn masked_attention_backward((seed, n, d) in dims(), m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [random_mat(n, d, &mut rng), random_mat(m, d, &mut rng), random_mat(m, 3, &mut rng)];
        let mut mask = AttentionMask {
            rows: n,
            cols: m,
            present: (0..n).map(|i| i == 0 || rng.random_bool(0.8)).collect(),
            allowed: vec![false; n * m],
        };
        for i in 0..n {
            let keep = rng.random_range(0..m);
            for j in 0..m {
                mask.set(i, j, j == keep || rng.random_bool(0.5));
            }
        }
        let e = vjp_error(&ins, seed, |t, v| t.attention(v[0], v[1], v[2], Some(&mask)).unwrap());
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn pooling_backward((seed, n, d) in dims(), extra in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lengths = vec![n, extra];
        let ins = [random_mat(n + extra, d, &mut rng)];
        let e = vjp_error(&ins, seed, |t, v| {
            let a = t.max_pool_rows(v[0]).unwrap();
            let b = t.segment_max_pool(v[0], &lengths).unwrap();
            t.concat_rows(&[a, b]).unwrap()
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn row_plumbing_backward((seed, n, d) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [random_mat(n, d, &mut rng), random_mat(n, d, &mut rng)];
        let take: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let rows: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..n)).collect();
        let e = vjp_error(&ins, seed, |t, v| {
            let s = t.select_rows(v[0], v[1], &take).unwrap();
            let g = t.gather_rows(s, &rows).unwrap();
            let c = t.concat_cols(&[v[0], v[1]]).unwrap();
            let c = t.reshape(c, 2 * n, d).unwrap();
            t.concat_rows(&[g, c]).unwrap()
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn normalization_backward((seed, n, d) in (any::<u64>(), 1usize..5, 2usize..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [random_mat(n, d, &mut rng)];
        let e = vjp_error(&ins, seed, |t, v| {
            let a = t.l2_normalize_rows(v[0]);
            let b = t.softmax_rows(v[0]);
            t.concat_cols(&[a, b]).unwrap()
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn loss_terms_backward((seed, n, d) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [random_mat(n, d, &mut rng), random_mat(1, d + 1, &mut rng)];
        let target: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let idx = rng.random_range(0..d + 1);
        let w = rng.random_range(0.1..2.0);
        let e = vjp_error(&ins, seed, |t, v| {
            let l = t.smooth_l1_mean(v[0], &target).unwrap();
            let p = t.softmax_rows(v[1]);
            let c = t.neg_log_at(p, idx, 1e-12).unwrap();
            t.weighted_sum(&[(l, w), (c, 1.0)]).unwrap()
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact(seed in any::<u64>(), blocks in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins: Vec<Mat> = (0..blocks)
            .map(|_| {
                let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
                random_mat(r, c, &mut rng)
            })
            .collect();
        let store = store_of(&ins);
        let ck = Checkpoint::new([7; 32], "{}".into(), &store);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(&back, &ck);
        let mut restored = store_of(&ins.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect::<Vec<_>>());
        back.restore_into(&mut restored).unwrap();
        prop_assert_eq!(restored.blocks(), store.blocks());
    }

    #[test]
    fn adam_first_step_moves_by_lr(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [off_zero_mat(2, 3, &mut rng)];
        let mut store = store_of(&ins);
        let mut grads = ParamGrads::zeros_like(&store);
        let g = off_zero_mat(2, 3, &mut rng);
        grads.block_mut(store.ids().next().unwrap()).copy_from_slice(&g.data);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &grads, &mut state, 1e-3).unwrap();
        for ((new, old), gi) in store.blocks()[0].data.iter().zip(&ins[0].data).zip(&g.data) {
            // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expect = old - 1e-3 * gi / (gi.abs() + 1e-8);
            prop_assert!((new - expect).abs() < 1e-15);
        }
    }
}
