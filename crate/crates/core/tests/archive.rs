use lit4_core::archive::WeightArchive;
use lit4_core::config::ModelConfig;
use lit4_core::model::VqaModel;
use lit4_core::nn::ParamStore;
use lit4_core::Error;

fn toy_store(name: &str, seed: u64) -> ParamStore<f32> {
    let cfg = ModelConfig::load(format!("../../configs/{name}.json").as_ref())
        .unwrap()
        .resolve()
        .unwrap();
    let mut store = VqaModel::new(&cfg).unwrap().init::<f32>(seed).unwrap();
    store.randomize(seed + 100, 0.5);
    store
}

fn format_error(r: lit4_core::Result<WeightArchive>) -> String {
    match r {
        Err(Error::Format(m)) => m,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn round_trip_is_bit_exact() {
    for name in ["toy_xcit_nano", "toy_vit_tiny", "toy_mobilevit_s"] {
        let src = toy_store(name, 1);
        let bytes = WeightArchive::from_store(&src).to_bytes().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        std::fs::write(&path, &bytes).unwrap();

        let mut dst = toy_store(name, 2);
        WeightArchive::load(&path).unwrap().load_into(&mut dst).unwrap();
        for ((n, a), (_, b)) in src.params().zip(dst.params()) {
            let (a, b): (Vec<u32>, Vec<u32>) = (
                a.value.data().iter().map(|v| v.to_bits()).collect(),
                b.value.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(a, b, "{name} {n}");
        }
        for ((n, a), (_, b)) in src.buffers().zip(dst.buffers()) {
            assert_eq!(a, b, "{name} buffer {n}");
        }
        // saving again reproduces the same file
        assert_eq!(WeightArchive::from_store(&dst).to_bytes().unwrap(), bytes);
    }
}

#[test]
fn truncated_archives_are_rejected_at_every_length() {
    let bytes = WeightArchive::from_store(&toy_store("toy_xcit_nano", 0))
        .to_bytes()
        .unwrap();
    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        format_error(WeightArchive::from_bytes(&bytes[..cut]));
    }
}

#[test]
fn trailing_bytes_and_bad_magic_are_rejected() {
    let mut bytes = WeightArchive::from_store(&toy_store("toy_xcit_nano", 0))
        .to_bytes()
        .unwrap();
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(format_error(WeightArchive::from_bytes(&longer)).contains("trailing"));
    bytes[0] ^= 0xff;
    assert!(format_error(WeightArchive::from_bytes(&bytes)).contains("magic"));
}

#[test]
fn mismatched_shapes_name_the_tensor() {
    let archive = WeightArchive::from_store(&toy_store("toy_xcit_nano", 0));
    let mut cfg = ModelConfig::load("../../configs/toy_xcit_nano.json".as_ref()).unwrap();
    cfg.head.answers += 1;
    let mut other = VqaModel::new(&cfg.resolve().unwrap()).unwrap().init::<f32>(0).unwrap();
    match archive.load_into(&mut other) {
        Err(Error::Format(m)) => assert!(m.contains("head."), "{m}"),
        r => panic!("{r:?}"),
    }
}

#[test]
fn archives_from_another_encoder_are_rejected() {
    let archive = WeightArchive::from_store(&toy_store("toy_vit_tiny", 0));
    let mut other = toy_store("toy_xcit_nano", 0);
    assert!(matches!(archive.load_into(&mut other), Err(Error::Format(_))));
}
