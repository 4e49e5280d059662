use lit4_core::config::ModelConfig;
use lit4_core::fusion::{FusionActivation, FusionConfig};
use lit4_core::image::{
    image_batch, ImageArch, ImageEncoderKind, ImageInput, MobileVitArch, MobileVitUnit, VitArch, BANDS,
};
use lit4_core::model::{VqaModel, FUSION, HEAD, IMAGE, TEXT};
use lit4_core::nn::{Forward, Mode, ParamStore, LN_EPS};
use lit4_core::rng::CounterRng;
use lit4_core::synth::{generate_synthetic, SynthConfig};
use lit4_core::text::{tokenize, TextEncoder, TextEncoderConfig, TokenSequence, CLS_ID, PAD_ID};
use lit4_core::Tensor;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn text_config(layers: usize) -> TextEncoderConfig {
    TextEncoderConfig {
        vocab_size: 16,
        max_len: 8,
        layers,
        heads: 2,
        dim: 16,
        hidden_ratio: 2,
    }
}

fn text_store(enc: &TextEncoder, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    enc.init(&mut store, "t", &mut CounterRng::new(seed)).unwrap();
    store.randomize(seed + 1, 0.5);
    store
}

fn encode(enc: &TextEncoder, store: &ParamStore<f64>, seqs: &[TokenSequence]) -> Vec<f64> {
    let mut fw = Forward::new(store, Mode::eval());
    let y = enc.forward(&mut fw, "t", seqs).unwrap();
    fw.tape.value(y).data().to_vec()
}

#[test]
fn text_output_ignores_padding_tail() {
    let enc = TextEncoder::new(text_config(2)).unwrap();
    let store = text_store(&enc, 1);
    let short = TokenSequence {
        ids: vec![CLS_ID, 5, 9, 7, PAD_ID],
    };
    let long = short.padded_to(8);
    assert_eq!(long.ids[5..], [PAD_ID; 3]);
    let (a, b) = (encode(&enc, &store, &[short]), encode(&enc, &store, &[long]));
    assert!(max_diff(&a, &b) < 1e-12);
}

#[test]
fn padded_batch_rows_match_single_questions() {
    let enc = TextEncoder::new(text_config(1)).unwrap();
    let store = text_store(&enc, 2);
    let a = TokenSequence {
        ids: vec![CLS_ID, 3, 4, PAD_ID, PAD_ID, PAD_ID],
    };
    let b = TokenSequence {
        ids: vec![CLS_ID, 6, 7, 8, 9, 10],
    };
    let batch = encode(&enc, &store, &[a.clone(), b.clone()]);
    assert!(max_diff(&batch[..16], &encode(&enc, &store, &[a])) < 1e-12);
    assert!(max_diff(&batch[16..], &encode(&enc, &store, &[b])) < 1e-12);
}

#[test]
fn zero_layer_text_encoder_is_normalised_cls_embedding() {
    let enc = TextEncoder::new(text_config(0)).unwrap();
    let store = text_store(&enc, 3);
    let seq = TokenSequence {
        ids: vec![CLS_ID, 4, 5, PAD_ID],
    };
    let got = encode(&enc, &store, &[seq]);
    let tok = &store.get("t.embed.tokens").unwrap().data()[CLS_ID * 16..][..16];
    let pos = &store.get("t.embed.positions").unwrap().data()[..16];
    let x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
    let mean = x.iter().sum::<f64>() / 16.0;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    let (g, b) = (
        store.get("t.norm.weight").unwrap().data(),
        store.get("t.norm.bias").unwrap().data(),
    );
    let want: Vec<f64> = (0..16)
        .map(|i| (x[i] - mean) / (var + LN_EPS).sqrt() * g[i] + b[i])
        .collect();
    assert!(max_diff(&got, &want) < 1e-12);
}

fn image(seed: u64, size: usize) -> Tensor<f64> {
    let mut rng = CounterRng::new(seed);
    Tensor::from_fn(&[1, BANDS, size, size], |_| rng.next_f64())
}

fn run_image(arch: &ImageArch, store: &ParamStore<f64>, x: Tensor<f64>) -> Vec<f64> {
    let mut fw = Forward::new(store, Mode::eval());
    let xv = fw.input(x);
    let y = arch.forward(&mut fw, "i", xv).unwrap();
    fw.tape.value(y).data().to_vec()
}

fn image_store(arch: &ImageArch, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    arch.init(&mut store, "i", &mut CounterRng::new(seed)).unwrap();
    store.randomize(seed + 1, 0.3);
    store
}

#[test]
fn vit_on_32px_with_patch_16_has_four_patch_tokens() {
    let arch = VitArch {
        input_size: 32,
        patch: 16,
        layers: 1,
        heads: 2,
        dim: 16,
        hidden_ratio: 2,
    };
    assert_eq!(arch.tokens(), 4);
    let store = image_store(&ImageArch::Vit(arch), 4);
    assert_eq!(store.get("i.pos_embed").unwrap().shape(), [1, 5, 16]);
}

#[test]
fn vit_class_output_is_invariant_to_joint_patch_and_position_permutation() {
    let vit = VitArch {
        input_size: 32,
        patch: 16,
        layers: 2,
        heads: 2,
        dim: 16,
        hidden_ratio: 2,
    };
    let arch = ImageArch::Vit(vit);
    let mut store = image_store(&arch, 5);
    let x = image(6, 32);
    let before = run_image(&arch, &store, x.clone());

    // New patch j (row-major on the 2x2 grid) is old patch perm[j].
    let perm = [2, 0, 3, 1];
    let mut moved = x.clone();
    for c in 0..BANDS {
        for (j, &src) in perm.iter().enumerate() {
            let (ty, tx, sy, sx) = ((j / 2) * 16, (j % 2) * 16, (src / 2) * 16, (src % 2) * 16);
            for dy in 0..16 {
                for dx in 0..16 {
                    moved.data_mut()[(c * 32 + ty + dy) * 32 + tx + dx] = x.data()[(c * 32 + sy + dy) * 32 + sx + dx];
                }
            }
        }
    }
    let pos = store.get("i.pos_embed").unwrap().clone();
    let p = store.get_mut("i.pos_embed").unwrap();
    for (j, &src) in perm.iter().enumerate() {
        p.data_mut()[(1 + j) * 16..][..16].copy_from_slice(&pos.data()[(1 + src) * 16..][..16]);
    }
    let after = run_image(&arch, &store, moved);
    assert!(max_diff(&before, &after) < 1e-12);
}

#[test]
fn default_mobilevit_emits_640_features_at_any_valid_size() {
    let cfg = ModelConfig::default_for(ImageEncoderKind::MobilevitS)
        .resolve()
        .unwrap();
    assert_eq!(cfg.image.output_dim(), 640);
    let store = image_store(&cfg.image, 7);
    for s in [32, 64] {
        assert_eq!(run_image(&cfg.image, &store, image(8, s)).len(), 640);
    }
}

#[test]
fn mobilevit_feature_map_is_constant_for_constant_input() {
    let cfg = ModelConfig::load("../../configs/toy_mobilevit_s.json".as_ref())
        .unwrap()
        .resolve()
        .unwrap();
    let ImageArch::MobileVit(arch) = &cfg.image else {
        panic!("not a MobileViT config")
    };
    let store = image_store(&cfg.image, 9);
    // Large enough that the last map is 4x4, not a single pixel.
    let s = 4 * MobileVitArch::STRIDE;
    let mut fw = Forward::new(&store, Mode::eval());
    let mut m = fw.input(Tensor::full(&[1, BANDS, s, s], 0.7));
    m = arch.stem_layer().forward(&mut fw, "i.stem", m).unwrap();
    for (name, unit, _) in arch.units(s) {
        let p = format!("i.{name}");
        m = match unit {
            MobileVitUnit::Ir(u) => u.forward(&mut fw, &p, m).unwrap(),
            MobileVitUnit::Block(u) => u.forward(&mut fw, &p, m).unwrap(),
        };
    }
    let m = arch.head_layer().forward(&mut fw, "i.head", m).unwrap();
    let v = fw.tape.value(m);
    let [_, c, h, w] = v.shape()[..] else { panic!() };
    assert_eq!((h, w), (4, 4));
    for ch in 0..c {
        let plane = &v.data()[ch * h * w..][..h * w];
        assert!(plane
            .iter()
            .all(|x| (x - plane[0]).abs() <= 1e-12 * (1.0 + plane[0].abs())));
    }
}

#[test]
fn xcit_parameters_do_not_depend_on_token_count() {
    let counts: Vec<usize> = [32, 64]
        .iter()
        .map(|&s| {
            let mut cfg = ModelConfig::default_for(ImageEncoderKind::XcitNano);
            cfg.image_encoder.input_size = s;
            VqaModel::new(&cfg.resolve().unwrap())
                .unwrap()
                .init::<f32>(0)
                .unwrap()
                .num_params()
        })
        .collect();
    assert_eq!(counts[0], counts[1]);
}

fn fusion_config(d_t: usize, d_v: usize, d_f: usize, activation: FusionActivation) -> FusionConfig {
    FusionConfig {
        d_t,
        d_v,
        d_f,
        n_answers: 3,
        head_hidden: 7,
        dropout_p: 0.0,
        activation,
    }
}

fn fusion_store(cfg: &FusionConfig, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    cfg.init(&mut store, "f", "h", &mut CounterRng::new(seed)).unwrap();
    store.randomize(seed, 0.5);
    store
}

fn fuse(cfg: &FusionConfig, store: &ParamStore<f64>, t: &[f64], v: &[f64]) -> Vec<f64> {
    let mut fw = Forward::new(store, Mode::eval());
    let tv = fw.input(Tensor::from_f64(vec![1, t.len()], t).unwrap());
    let vv = fw.input(Tensor::from_f64(vec![1, v.len()], v).unwrap());
    let y = cfg.fuse(&mut fw, "f", tv, vv).unwrap();
    fw.tape.value(y).data().to_vec()
}

fn zero(store: &mut ParamStore<f64>, name: &str) {
    let z = Tensor::zeros(store.get(name).unwrap().shape());
    *store.get_mut(name).unwrap() = z;
}

#[test]
fn zero_image_feature_gives_zero_fusion() {
    let cfg = fusion_config(4, 6, 5, FusionActivation::Tanh);
    let mut store = fusion_store(&cfg, 10);
    zero(&mut store, "f.text_proj.bias");
    zero(&mut store, "f.image_proj.bias");
    assert_eq!(fuse(&cfg, &store, &[0.3, -1.0, 2.0, 0.5], &[0.0; 6]), vec![0.0; 5]);
}

#[test]
fn identity_projections_fuse_by_elementwise_product() {
    let cfg = fusion_config(3, 3, 3, FusionActivation::Identity);
    let mut store = fusion_store(&cfg, 11);
    for p in ["f.text_proj", "f.image_proj"] {
        *store.get_mut(&format!("{p}.weight")).unwrap() = Tensor::eye(3);
        zero(&mut store, &format!("{p}.bias"));
    }
    let (t, v) = ([1.5, -2.0, 0.25], [4.0, 0.5, -8.0]);
    assert_eq!(fuse(&cfg, &store, &t, &v), vec![6.0, -1.0, -2.0]);
}

fn classify(cfg: &FusionConfig, store: &ParamStore<f64>, x: &[f64]) -> Vec<f64> {
    let mut fw = Forward::new(store, Mode::eval());
    let xv = fw.input(Tensor::from_f64(vec![1, x.len()], x).unwrap());
    let y = cfg.classify(&mut fw, "h", xv).unwrap();
    fw.tape.value(y).data().to_vec()
}

#[test]
fn zero_output_weights_give_bias_logits() {
    let cfg = fusion_config(4, 6, 5, FusionActivation::Tanh);
    let mut store = fusion_store(&cfg, 12);
    zero(&mut store, "h.fc2.weight");
    let b = store.get("h.fc2.bias").unwrap().data().to_vec();
    for x in [[0.0; 5], [1.0, -2.0, 3.0, 0.5, 9.0]] {
        assert_eq!(classify(&cfg, &store, &x), b);
    }
}

#[test]
fn symmetric_two_answer_head_gives_equal_logits() {
    let mut cfg = fusion_config(4, 6, 5, FusionActivation::Tanh);
    cfg.n_answers = 2;
    let mut store = fusion_store(&cfg, 13);
    let w = store.get("h.fc2.weight").unwrap().clone();
    let col: Vec<f64> = w.data().chunks(2).map(|r| r[0]).collect();
    *store.get_mut("h.fc2.weight").unwrap() =
        Tensor::from_f64(vec![7, 2], &col.iter().flat_map(|&c| [c, c]).collect::<Vec<_>>()).unwrap();
    *store.get_mut("h.fc2.bias").unwrap() = Tensor::full(&[2], 0.25);
    let l = classify(&cfg, &store, &[0.2, -0.4, 0.6, 0.1, -0.9]);
    assert_eq!(l[0], l[1]);
}

fn toy(name: &str) -> (VqaModel, ParamStore<f64>) {
    let cfg = ModelConfig::load(format!("../../configs/{name}.json").as_ref())
        .unwrap()
        .resolve()
        .unwrap();
    let model = VqaModel::new(&cfg).unwrap();
    let mut store = model.init::<f64>(0).unwrap();
    store.randomize(1, 0.3);
    (model, store)
}

fn sample_inputs(max_len: usize) -> (TokenSequence, ImageInput) {
    let ds = generate_synthetic(2, 0, &SynthConfig::default(), 3).unwrap();
    let vocab = SynthConfig::default().vocab().unwrap();
    let s = &ds.train[1];
    (tokenize(&s.question, &vocab, max_len).unwrap(), s.image.clone())
}

#[test]
fn prediction_is_deterministic_and_ignores_padding() {
    for name in ["toy_xcit_nano", "toy_vit_tiny", "toy_mobilevit_s"] {
        let (model, store) = toy(name);
        let (seq, img) = sample_inputs(model.text.cfg.max_len);
        let a = model.predict(&store, &seq, &img).unwrap();
        let b = model.predict(&store, &seq, &img).unwrap();
        assert_eq!(a, b, "{name}");
        let trimmed = TokenSequence {
            ids: seq.ids[..seq.ids.iter().rposition(|&i| i != PAD_ID).unwrap() + 1].to_vec(),
        };
        let c = model.predict(&store, &trimmed, &img).unwrap();
        assert!(max_diff(&a.logits, &c.logits) < 1e-12, "{name}");
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn prediction_is_the_composition_of_its_stages() {
    for name in ["toy_xcit_nano", "toy_vit_tiny", "toy_mobilevit_s"] {
        let (model, store) = toy(name);
        let (seq, img) = sample_inputs(model.text.cfg.max_len);
        let whole = model.predict(&store, &seq, &img).unwrap();

        let mut fw = Forward::new(&store, Mode::eval());
        let t = model.text.forward(&mut fw, TEXT, std::slice::from_ref(&seq)).unwrap();
        let t = fw.tape.value(t).clone();
        let mut fw = Forward::new(&store, Mode::eval());
        let x = fw.input(image_batch(&[&img]).unwrap());
        let v = model.image.forward(&mut fw, IMAGE, x).unwrap();
        let v = fw.tape.value(v).clone();
        let mut fw = Forward::new(&store, Mode::eval());
        let (tv, vv) = (fw.input(t), fw.input(v));
        let f = model.fusion.fuse(&mut fw, FUSION, tv, vv).unwrap();
        let f = fw.tape.value(f).clone();
        let mut fw = Forward::new(&store, Mode::eval());
        let fv = fw.input(f);
        let logits = model.fusion.classify(&mut fw, HEAD, fv).unwrap();
        assert_eq!(fw.tape.value(logits).data(), &whole.logits[..], "{name}");
    }
}
