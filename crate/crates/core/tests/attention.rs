use lit4_core::kernels::PadMode;
use lit4_core::nn::attention::{attention, attention_with_weights, xca_with_weights, MultiHeadAttention, XcaAttention};
use lit4_core::nn::mobilevit::{fold, unfold, MobileVitBlock};
use lit4_core::nn::{map_to_tokens, Activation, Conv, ConvBn, Forward, Lpi, Mode, ParamStore, TransformerBlock};
use lit4_core::rng::CounterRng;
use lit4_core::{Tape, Tensor};

type Mat = Vec<Vec<f64>>;

fn random(shape: &[usize], rng: &mut CounterRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.next_f64() * 2.0 - 1.0)
}

fn rows(t: &Tensor<f64>, r: usize, c: usize) -> Mat {
    assert_eq!(t.len(), r * c);
    t.data().chunks(c).map(|x| x.to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn affine(x: &Mat, store: &ParamStore<f64>, prefix: &str) -> Mat {
    let w = store.get(&format!("{prefix}.weight")).unwrap();
    let b = store.get(&format!("{prefix}.bias")).unwrap();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    mm(x, &rows(w, din, dout))
        .into_iter()
        .map(|r| r.iter().zip(b.data()).map(|(v, bb)| v + bb).collect())
        .collect()
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn flat(a: &Mat) -> Vec<f64> {
    a.iter().flatten().copied().collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct `softmax(q kᵀ / sqrt(d)) v` with explicit exponentials.
fn attention_oracle(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    let scores: Mat = mm(q, &tr(k))
        .into_iter()
        .map(|r| r.into_iter().map(|s| s / d.sqrt()).collect())
        .collect();
    mm(&softmax_rows(&scores), v)
}

fn attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (o, w) = attention_with_weights(&mut tape, qv, kv, vv, None).unwrap();
    (tape.value(o).clone(), tape.value(w).clone())
}

fn xca(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, tau: f64) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let t = tape.constant(Tensor::scalar(tau));
    let (o, w) = xca_with_weights(&mut tape, qv, kv, vv, t).unwrap();
    (tape.value(o).clone(), tape.value(w).clone())
}

#[test]
fn single_token_attention_returns_value() {
    let mut rng = CounterRng::new(1);
    let (q, k, v) = (
        random(&[1, 3], &mut rng),
        random(&[1, 3], &mut rng),
        random(&[1, 3], &mut rng),
    );
    assert_eq!(attend(&q, &k, &v).0.data(), v.data());
}

#[test]
fn zero_keys_average_values() {
    let mut rng = CounterRng::new(2);
    let (q, v) = (random(&[5, 2], &mut rng), random(&[5, 2], &mut rng));
    let (o, _) = attend(&q, &Tensor::zeros(&[5, 2]), &v);
    let vm = rows(&v, 5, 2);
    let mean: Vec<f64> = (0..2).map(|j| vm.iter().map(|r| r[j]).sum::<f64>() / 5.0).collect();
    for r in rows(&o, 5, 2) {
        assert!(max_diff(&r, &mean) < 1e-15);
    }
}

#[test]
fn attention_matches_direct_formula() {
    let mut rng = CounterRng::new(3);
    for _ in 0..10 {
        let (q, k, v) = (
            random(&[4, 2], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[4, 2], &mut rng),
        );
        let want = attention_oracle(&rows(&q, 4, 2), &rows(&k, 4, 2), &rows(&v, 4, 2));
        assert!(max_diff(attend(&q, &k, &v).0.data(), &flat(&want)) < 1e-14);
    }
}

fn mha_store(dim: usize, heads: usize, seed: u64) -> (MultiHeadAttention, ParamStore<f64>) {
    let mha = MultiHeadAttention::new(dim, heads).unwrap();
    let mut store = ParamStore::new();
    mha.init(&mut store, "a", &mut CounterRng::new(seed)).unwrap();
    store.randomize(seed, 0.5);
    (mha, store)
}

fn run_mha(mha: &MultiHeadAttention, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut fw = Forward::new(store, Mode::eval());
    let xv = fw.input(x.clone());
    let y = mha.forward(&mut fw, "a", xv, None).unwrap();
    fw.tape.value(y).clone()
}

/// Projections, per-head attention on column slices, concat, output projection.
fn mha_oracle(store: &ParamStore<f64>, x: &Mat, heads: usize) -> Mat {
    let (q, k, v) = (
        affine(x, store, "a.q"),
        affine(x, store, "a.k"),
        affine(x, store, "a.v"),
    );
    let dh = q[0].len() / heads;
    let mut merged: Mat = vec![Vec::new(); x.len()];
    for h in 0..heads {
        let o = attention_oracle(&cols(&q, h * dh, dh), &cols(&k, h * dh, dh), &cols(&v, h * dh, dh));
        for (m, r) in merged.iter_mut().zip(o) {
            m.extend(r);
        }
    }
    affine(&merged, store, "a.proj")
}

#[test]
fn single_head_msa_is_projected_attention() {
    let (mha, store) = mha_store(4, 1, 4);
    let mut rng = CounterRng::new(40);
    let x = random(&[1, 5, 4], &mut rng);
    let got = run_mha(&mha, &store, &x);
    let want = mha_oracle(&store, &rows(&x, 5, 4), 1);
    assert!(max_diff(got.data(), &flat(&want)) < 1e-14);
}

#[test]
fn two_head_msa_matches_per_head_oracle() {
    let (mha, store) = mha_store(4, 2, 5);
    let mut rng = CounterRng::new(50);
    let x = random(&[1, 3, 4], &mut rng);
    let got = run_mha(&mha, &store, &x);
    let want = mha_oracle(&store, &rows(&x, 3, 4), 2);
    assert!(max_diff(got.data(), &flat(&want)) < 1e-14);
}

#[test]
fn attention_weights_are_row_stochastic() {
    let mut rng = CounterRng::new(6);
    for _ in 0..100 {
        let (t, d) = (1 + rng.below(12), 1 + rng.below(8));
        let scale = 1.0 + rng.next_f64() * 10.0;
        let q = random(&[2, t, d], &mut rng).map(|v| v * scale);
        let k = random(&[2, t, d], &mut rng).map(|v| v * scale);
        let v = random(&[2, t, d], &mut rng);
        let (_, w) = attend(&q, &k, &v);
        for row in w.data().chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn msa_is_permutation_equivariant() {
    let mut rng = CounterRng::new(7);
    for trial in 0..100 {
        let heads = 1 + rng.below(3);
        let dim = heads * (1 + rng.below(4));
        let t = 2 + rng.below(8);
        let (mha, store) = mha_store(dim, heads, 100 + trial);
        let x = random(&[1, t, dim], &mut rng);
        let mut perm: Vec<usize> = (0..t).collect();
        rng.shuffle(&mut perm);
        let permute = |m: &Tensor<f64>| {
            let r = rows(m, t, dim);
            Tensor::from_f64(vec![1, t, dim], &flat(&perm.iter().map(|&i| r[i].clone()).collect())).unwrap()
        };
        let y = run_mha(&mha, &store, &x);
        let y_perm = run_mha(&mha, &store, &permute(&x));
        assert!(max_diff(y_perm.data(), permute(&y).data()) <= 1e-5);
    }
}

#[test]
fn xca_weights_are_column_stochastic() {
    let mut rng = CounterRng::new(8);
    for _ in 0..100 {
        let (t, d) = (2 + rng.below(10), 1 + rng.below(6));
        let (q, k, v) = (
            random(&[t, d], &mut rng),
            random(&[t, d], &mut rng),
            random(&[t, d], &mut rng),
        );
        let (_, w) = xca(&q, &k, &v, 0.1 + rng.next_f64());
        let w = rows(&w, d, d);
        for j in 0..d {
            assert!((w.iter().map(|r| r[j]).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn xca_ignores_positive_query_and_key_scale() {
    let mut rng = CounterRng::new(9);
    for _ in 0..100 {
        let (t, d) = (2 + rng.below(10), 1 + rng.below(6));
        let (q, k, v) = (
            random(&[t, d], &mut rng),
            random(&[t, d], &mut rng),
            random(&[t, d], &mut rng),
        );
        let (cq, ck) = (0.05 + rng.next_f64() * 20.0, 0.05 + rng.next_f64() * 20.0);
        let base = xca(&q, &k, &v, 0.7).0;
        let scaled = xca(&q.map(|x| x * cq), &k.map(|x| x * ck), &v, 0.7).0;
        assert!(max_diff(base.data(), scaled.data()) <= 1e-6);
    }
}

#[test]
fn xca_key_scale_by_ten() {
    let mut rng = CounterRng::new(10);
    let (q, k, v) = (
        random(&[6, 4], &mut rng),
        random(&[6, 4], &mut rng),
        random(&[6, 4], &mut rng),
    );
    let a = xca(&q, &k, &v, 1.0).0;
    let b = xca(&q, &k.map(|x| 10.0 * x), &v, 1.0).0;
    assert!(max_diff(a.data(), b.data()) < 1e-14);
}

fn xca_store(dim: usize, heads: usize, seed: u64) -> (XcaAttention, ParamStore<f64>) {
    let a = XcaAttention::new(dim, heads).unwrap();
    let mut store = ParamStore::new();
    a.init(&mut store, "a", &mut CounterRng::new(seed)).unwrap();
    store.randomize(seed, 0.5);
    *store.get_mut("a.temperature").unwrap() = Tensor::full(&[heads, 1, 1], 0.8);
    (a, store)
}

fn run_xca(a: &XcaAttention, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut fw = Forward::new(store, Mode::eval());
    let xv = fw.input(x.clone());
    let y = a.forward(&mut fw, "a", xv).unwrap();
    fw.tape.value(y).clone()
}

#[test]
fn xca_with_unit_head_width_is_value_projection() {
    // d_h = 1: the 1x1 channel-attention matrix is exactly 1.
    let (a, store) = xca_store(3, 3, 11);
    let x = random(&[1, 5, 3], &mut CounterRng::new(12));
    let v = affine(&rows(&x, 5, 3), &store, "a.v");
    let want = affine(&v, &store, "a.proj");
    assert!(max_diff(run_xca(&a, &store, &x).data(), &flat(&want)) < 1e-14);
}

#[test]
fn xca_matches_dense_formula() {
    let (a, store) = xca_store(4, 1, 13);
    let x = random(&[1, 5, 4], &mut CounterRng::new(14));
    let xm = rows(&x, 5, 4);
    let norm_cols = |m: Mat| {
        let n: Vec<f64> = (0..4)
            .map(|j| m.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt())
            .collect();
        m.into_iter()
            .map(|r| r.iter().zip(&n).map(|(v, s)| v / s).collect())
            .collect::<Mat>()
    };
    let qh = norm_cols(affine(&xm, &store, "a.q"));
    let kh = norm_cols(affine(&xm, &store, "a.k"));
    let v = affine(&xm, &store, "a.v");
    let logits: Mat = mm(&tr(&kh), &qh)
        .into_iter()
        .map(|r| r.into_iter().map(|s| s / 0.8).collect())
        .collect();
    // softmax over the key-channel axis (columns sum to one)
    let weights = tr(&softmax_rows(&tr(&logits)));
    let want = affine(&mm(&v, &weights), &store, "a.proj");
    assert!(max_diff(run_xca(&a, &store, &x).data(), &flat(&want)) < 1e-13);
}

fn block_store(block: &TransformerBlock, prefixes: &[&str], seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = CounterRng::new(seed);
    for p in prefixes {
        block.init(&mut store, p, &mut rng).unwrap();
    }
    store
}

#[test]
fn zero_initialised_block_is_identity() {
    let x = random(&[2, 3, 4], &mut CounterRng::new(15));
    for block in [
        TransformerBlock::msa(4, 2, 4, Activation::Gelu).unwrap(),
        TransformerBlock::xca(4, 2, 4, Activation::Gelu).unwrap(),
    ] {
        let store = block_store(&block, &["b"], 16);
        let mut fw = Forward::new(&store, Mode::eval());
        let xv = fw.input(x.clone());
        let y = block.forward(&mut fw, "b", xv, None).unwrap();
        assert_eq!(fw.tape.value(y).data(), x.data());
    }
}

#[test]
fn two_identical_layers_equal_applying_the_block_twice() {
    let block = TransformerBlock::msa(4, 2, 2, Activation::Gelu).unwrap();
    let mut store = block_store(&block, &["l0", "l1"], 17);
    store.randomize(18, 0.4);
    let names: Vec<String> = store
        .params()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.starts_with("l0."))
        .collect();
    for n in names {
        let v = store.get(&n).unwrap().clone();
        *store.get_mut(&n.replacen("l0.", "l1.", 1)).unwrap() = v;
    }
    let x = random(&[1, 3, 4], &mut CounterRng::new(19));
    let mut fw = Forward::new(&store, Mode::eval());
    let xv = fw.input(x.clone());
    let a = block.forward(&mut fw, "l0", xv, None).unwrap();
    let stacked = block.forward(&mut fw, "l1", a, None).unwrap();
    let b = block.forward(&mut fw, "l0", xv, None).unwrap();
    let twice = block.forward(&mut fw, "l0", b, None).unwrap();
    assert_eq!(fw.tape.value(stacked).data(), fw.tape.value(twice).data());
}

fn unfold_fold(x: &Tensor<f64>, patch: (usize, usize)) -> (Tensor<f64>, Tensor<f64>) {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let u = unfold(&mut tape, xv, patch).unwrap();
    let f = fold(&mut tape, u, patch, (h, w)).unwrap();
    (tape.value(u).clone(), tape.value(f).clone())
}

#[test]
fn fold_inverts_unfold_exactly() {
    let mut rng = CounterRng::new(20);
    for _ in 0..100 {
        let (ph, pw) = (1 + rng.below(3), 1 + rng.below(3));
        let (h, w) = (ph * (1 + rng.below(4)), pw * (1 + rng.below(4)));
        let x = random(&[1 + rng.below(2), 1 + rng.below(4), h, w], &mut rng);
        let (_, back) = unfold_fold(&x, (ph, pw));
        assert_eq!(back.shape(), x.shape());
        assert!(back
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn unit_patch_unfold_is_one_sequence_of_all_pixels() {
    let x = random(&[1, 2, 3, 4], &mut CounterRng::new(21));
    let (u, _) = unfold_fold(&x, (1, 1));
    assert_eq!(u.shape(), [1, 1, 12, 2]);
}

#[test]
fn unfold_index_map_on_ramp() {
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let (u, _) = unfold_fold(&x, (2, 2));
    assert_eq!(u.shape(), [1, 4, 4, 1]);
    for p in 0..4 {
        for n in 0..4 {
            let (y, xx) = ((n / 2) * 2 + p / 2, (n % 2) * 2 + p % 2);
            assert_eq!(u.data()[p * 4 + n], (y * 4 + xx) as f64);
        }
    }
    // pixel position (0,0) of each patch: the four patch corners
    assert_eq!(&u.data()[..4], [0.0, 2.0, 8.0, 10.0]);
}

fn mvb() -> MobileVitBlock {
    MobileVitBlock {
        channels: 4,
        dim: 6,
        depth: 2,
        heads: 2,
        ffn_ratio: 2,
        patch: (2, 2),
        pad_mode: PadMode::Replicate,
    }
}

#[test]
fn mobilevit_block_keeps_shape() {
    let block = mvb();
    let mut store = ParamStore::new();
    block.init(&mut store, "m", &mut CounterRng::new(22)).unwrap();
    store.randomize(23, 0.3);
    let x = random(&[2, 4, 6, 4], &mut CounterRng::new(24));
    let mut fw = Forward::new(&store, Mode::eval());
    let xv = fw.input(x.clone());
    let y = block.forward(&mut fw, "m", xv).unwrap();
    assert_eq!(fw.tape.value(y).shape(), x.shape());
}

#[test]
fn mobilevit_block_with_identity_transformers_is_its_conv_path() {
    let block = mvb();
    let mut store = ParamStore::new();
    block.init(&mut store, "m", &mut CounterRng::new(25)).unwrap();
    // Fresh init zeroes every residual-branch output projection; perturb
    // everything else so the conv path is non-trivial.
    let zero: Vec<String> = store
        .params()
        .filter(|(n, e)| n.contains(".blocks.") && e.value.data().iter().all(|v| *v == 0.0) && n.ends_with("weight"))
        .map(|(n, _)| n.to_string())
        .collect();
    assert_eq!(zero.len(), 4, "{zero:?}");
    store.randomize(26, 0.4);
    for n in &zero {
        let z = Tensor::zeros(store.get(n).unwrap().shape());
        *store.get_mut(n).unwrap() = z;
        let b = n.replace("weight", "bias");
        let zb = Tensor::zeros(store.get(&b).unwrap().shape());
        *store.get_mut(&b).unwrap() = zb;
    }
    let x = random(&[1, 4, 4, 4], &mut CounterRng::new(27));
    let mut fw = Forward::new(&store, Mode::eval());
    let xv = fw.input(x.clone());
    let y = block.forward(&mut fw, "m", xv).unwrap();
    let got = fw.tape.value(y).clone();

    // Conv path: local conv, 1x1 in, per-pixel layer norm, 1x1 out, fusion.
    let local = ConvBn::new(
        Conv::new(4, 4, 3, 1).with_pad_mode(PadMode::Replicate),
        Activation::Silu,
    );
    let h = local.forward(&mut fw, "m.local", xv).unwrap();
    let h = Conv::new(4, 6, 1, 1).forward(&mut fw, "m.conv_in", h).unwrap();
    let tok = map_to_tokens(&mut fw.tape, h).unwrap();
    let tok = fw.layer_norm("m.norm", tok).unwrap();
    let h = lit4_core::nn::tokens_to_map(&mut fw.tape, tok, 4, 4).unwrap();
    let h = ConvBn::new(Conv::new(6, 4, 1, 1), Activation::Silu)
        .forward(&mut fw, "m.conv_out", h)
        .unwrap();
    let cat = fw.tape.concat(&[xv, h], 1).unwrap();
    let fusion = ConvBn::new(
        Conv::new(8, 4, 3, 1).with_pad_mode(PadMode::Replicate),
        Activation::Silu,
    );
    let want = fusion.forward(&mut fw, "m.fusion", cat).unwrap();
    assert!(max_diff(got.data(), fw.tape.value(want).data()) < 1e-14);
}

#[test]
fn lpi_with_zero_output_conv_is_identity() {
    let lpi = Lpi { dim: 8 };
    let mut store = ParamStore::new();
    lpi.init(&mut store, "l", &mut CounterRng::new(28)).unwrap();
    store.randomize(29, 0.5);
    let z = Tensor::zeros(store.get("l.conv2.weight").unwrap().shape());
    *store.get_mut("l.conv2.weight").unwrap() = z;
    *store.get_mut("l.conv2.bias").unwrap() = Tensor::zeros(&[8]);
    let x = random(&[1, 16, 8], &mut CounterRng::new(30));
    let mut fw = Forward::new(&store, Mode::eval());
    let xv = fw.input(x.clone());
    let y = lpi.forward(&mut fw, "l", xv, (4, 4)).unwrap();
    assert_eq!(fw.tape.value(y).shape(), x.shape());
    assert_eq!(fw.tape.value(y).data(), x.data());
}

#[test]
fn attention_ignores_joint_key_value_order() {
    let mut rng = CounterRng::new(31);
    let q = random(&[1, 3], &mut rng);
    let k = random(&[5, 3], &mut rng);
    let v = random(&[5, 3], &mut rng);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let o = attention(&mut tape, qv, kv, vv).unwrap();
    let perm = [3, 1, 4, 0, 2];
    let pk = Tensor::from_f64(
        vec![5, 3],
        &flat(&perm.iter().map(|&i| rows(&k, 5, 3)[i].clone()).collect()),
    )
    .unwrap();
    let pv = Tensor::from_f64(
        vec![5, 3],
        &flat(&perm.iter().map(|&i| rows(&v, 5, 3)[i].clone()).collect()),
    )
    .unwrap();
    let (qv2, kv2, vv2) = (tape.constant(q), tape.constant(pk), tape.constant(pv));
    let o2 = attention(&mut tape, qv2, kv2, vv2).unwrap();
    assert!(max_diff(tape.value(o).data(), tape.value(o2).data()) < 1e-15);
}
