use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ser_neural::checkpoint;
use ser_neural::{Adam, Conv, ConvSpec, Dense, Padding, ParamStore, Tape, Tensor};

/// Direct nested-loop 2D convolution with TensorFlow-style SAME/VALID padding.
#[allow(clippy::too_many_arguments)]
fn reference_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: &[f64],
    stride: [usize; 2],
    dil: [usize; 2],
    same: bool,
) -> (Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let (b, h, wd, cin) = (s[0], s[1], s[2], s[3]);
    let k = w.shape();
    let (kh, kw, cout) = (k[0], k[1], k[3]);
    let span = [dil[0] * (kh - 1) + 1, dil[1] * (kw - 1) + 1];
    let ext = [h, wd];
    let mut out_dim = [0; 2];
    let mut pad = [0isize; 2];
    for a in 0..2 {
        if same {
            out_dim[a] = ext[a].div_ceil(stride[a]);
            let total = ((out_dim[a] - 1) * stride[a] + span[a]).saturating_sub(ext[a]);
            pad[a] = (total / 2) as isize;
        } else {
            out_dim[a] = (ext[a] - span[a]) / stride[a] + 1;
        }
    }
    let mut y = vec![0.0; b * out_dim[0] * out_dim[1] * cout];
    for n in 0..b {
        for oi in 0..out_dim[0] {
            for oj in 0..out_dim[1] {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ti in 0..kh {
                        for tj in 0..kw {
                            let ii = (oi * stride[0] + ti * dil[0]) as isize - pad[0];
                            let jj = (oj * stride[1] + tj * dil[1]) as isize - pad[1];
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((n * h + ii as usize) * wd + jj as usize) * cin + ci];
                                let wv = w.data()[((ti * kw + tj) * cin + ci) * cout + co];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((n * out_dim[0] + oi) * out_dim[1] + oj) * cout + co] = acc;
                }
            }
        }
    }
    (vec![b, out_dim[0], out_dim[1], cout], y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_sum(
        b in 1usize..3, h in 3usize..9, w in 3usize..9, cin in 1usize..4, cout in 1usize..4,
        kh in 1usize..4, kw in 1usize..4, sh in 1usize..3, sw in 1usize..3,
        dh in 1usize..3, dw in 1usize..3, same in any::<bool>(), seed in any::<u64>(),
    ) {
        prop_assume!(same || (h >= dh * (kh - 1) + 1 && w >= dw * (kw - 1) + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = ConvSpec::conv2d([kh, kw], [sh, sw], cin, cout)
            .dilation([dh, dw])
            .padding(if same { Padding::Same } else { Padding::Valid });
        let conv = Conv::new(&mut store, "c", spec, &mut rng);
        let bias = Tensor::randn(&[cout], &mut rng);
        store.params_mut()[1].tensor = bias.clone();
        let x = Tensor::randn(&[b, h, w, cin], &mut rng);

        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, &pv, xv);
        let (shape, want) = reference_conv2d(&x, &store.params()[0].tensor, bias.data(), [sh, sw], [dh, dw], same);
        prop_assert_eq!(tape.shape(y), &shape[..]);
        for (a, e) in tape.value(y).data().iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn same_transposed_conv_upsamples_by_stride(l in 1usize..20, k in 1usize..26, s in 1usize..5, cin in 1usize..3, cout in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, "t", ConvSpec::conv1d(k, s, cin, cout).transposed(), &mut rng);
        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::randn(&[2, l, cin], &mut rng));
        let y = conv.forward(&mut tape, &pv, x);
        prop_assert_eq!(tape.shape(y), &[2, l * s, cout][..]);
    }
}

#[test]
fn adam_fits_a_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "d", 3, 2, true, &mut rng);
    let truth = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.5]).unwrap();
    let x = Tensor::randn(&[32, 3], &mut rng);
    let target = {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(truth);
        let y = tape.matmul(a, b);
        tape.value(y).clone()
    };
    let mut opt = Adam::new(0.05);
    let mut last = f64::INFINITY;
    for _ in 0..600 {
        store.zero_grad();
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let t = tape.constant(target.clone());
        let y = dense.forward(&mut tape, &pv, xv);
        let d = tape.sub(y, t);
        let sq = tape.mul(d, d);
        let loss = tape.mean(sq);
        last = tape.value(loss).item();
        let g = tape.backward(loss);
        store.accumulate(&g, &pv);
        opt.step(&mut store);
    }
    assert!(last < 1e-6, "final loss {last}");
    assert_eq!(opt.steps(), 600);
}

#[test]
fn checkpoint_round_trip_restores_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let build = |rng: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        Dense::new(&mut store, "net/a", 4, 3, true, rng);
        Conv::new(&mut store, "net/b", ConvSpec::conv1d(5, 2, 3, 2), rng);
        store.add_buffer("net/stat", Tensor::randn(&[3], rng));
        store
    };
    let saved = build(&mut rng);
    checkpoint::save(dir.path(), &saved, serde_json::json!({"kind": "demo"}), 9, Vec::new()).unwrap();
    let mut fresh = build(&mut rng);
    assert_ne!(fresh.flat_values(), saved.flat_values());
    let manifest = checkpoint::load_into(dir.path(), &mut fresh).unwrap();
    assert_eq!(fresh.flat_values(), saved.flat_values());
    assert_eq!(fresh.buffers(), saved.buffers());
    assert_eq!(manifest.seed, 9);
    assert!(dir.path().join("net/a/kernel.tensor").exists());

    let mut wrong = ParamStore::new();
    Dense::new(&mut wrong, "net/a", 4, 3, true, &mut rng);
    assert!(checkpoint::load_into(dir.path(), &mut wrong).is_err());
}
