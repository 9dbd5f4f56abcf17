use std::path::{Path, PathBuf};

use proptest::prelude::*;
use stf::binary::{
    decode_sequence, decode_tensor, encode_sequence, encode_tensor, load_sequence, save_sequence,
    Reader,
};
use stf::checkpoint;
use stf::config::{Ablation, RunConfig};
use stf::csvio::{read_matrix, write_matrix};
use stf::text::{
    format_layout, format_manifest, parse_layout, parse_manifest, resolve_layout, Manifest,
    ManifestEntry,
};
use stf::CliError;
use stf_core::data::SkeletonSequence;
use stf_core::init;
use stf_core::layers::TdfVariant;
use stf_core::network::{Model, ModelConfig};
use stf_core::streams::Stream;
use stf_core::topology::Layout;
use stf_core::Tensor;

fn message(e: &CliError) -> String {
    e.to_string()
}

fn random_sequence(seed: u64, c: usize, t: usize, v: usize) -> SkeletonSequence {
    SkeletonSequence::new(
        init::uniform(&mut init::rng(seed), &[c, t, v], 3.0),
        (seed % 7) as usize,
    )
    .unwrap()
}

#[test]
fn skel_header_follows_the_documented_layout() {
    let seq = random_sequence(1, 3, 2, 4);
    let bytes = encode_sequence(&seq);
    assert_eq!(&bytes[..4], b"SKEL");
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    assert_eq!(
        [word(0), word(1), word(2), word(3), word(4)],
        [1, 3, 2, 4, 1]
    );
    assert_eq!(bytes.len(), 24 + 4 * 24);
    let first = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
    assert_eq!(first.to_bits(), seq.coords.data()[0].to_bits());
}

#[test]
fn skel_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, (c, t, v)) in [(3, 300, 25), (2, 1, 18), (4, 7, 5)]
        .into_iter()
        .enumerate()
    {
        let seq = random_sequence(i as u64, c, t, v);
        let path = dir.path().join(format!("s{i}.skel"));
        save_sequence(&path, &seq).unwrap();
        let back = load_sequence(&path, Some(v)).unwrap();
        assert_eq!(back.label, seq.label);
        let bits = |s: &SkeletonSequence| {
            s.coords
                .data()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&seq));
        assert_eq!(back.coords.shape(), seq.coords.shape());
    }
}

#[test]
fn truncated_skel_names_expected_and_found_bytes() {
    let bytes = encode_sequence(&random_sequence(2, 3, 4, 5));
    let cut = &bytes[..bytes.len() - 10];
    let err = decode_sequence(Path::new("clip.skel"), cut, None).unwrap_err();
    let msg = message(&err);
    assert!(matches!(err, CliError::Format { .. }));
    assert!(
        msg.contains("clip.skel") && msg.contains("240 bytes") && msg.contains("found 230"),
        "{msg}"
    );
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn ntu_file_under_kinetics_layout_is_a_layout_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ntu.skel");
    save_sequence(&path, &random_sequence(3, 3, 4, 25)).unwrap();
    let kinetics = Layout::kinetics18();
    let err = load_sequence(&path, Some(kinetics.num_joints())).unwrap_err();
    assert!(
        message(&err).contains("layout mismatch: file has V=25"),
        "{err}"
    );
}

#[test]
fn malformed_skel_files_are_rejected_with_offsets() {
    let good = encode_sequence(&random_sequence(4, 3, 2, 2));
    let p = Path::new("x.skel");
    let mut bad_magic = good.clone();
    bad_magic[0] = b'Q';
    assert!(message(&decode_sequence(p, &bad_magic, None).unwrap_err()).contains("at byte 0"));
    let mut version = good.clone();
    version[4] = 9;
    assert!(message(&decode_sequence(p, &version, None).unwrap_err()).contains("version 9"));
    let mut nan = good.clone();
    nan[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
    let msg = message(&decode_sequence(p, &nan, None).unwrap_err());
    assert!(
        msg.contains("at byte 28") && msg.contains("non-finite"),
        "{msg}"
    );
    let mut extra = good.clone();
    extra.push(0);
    assert!(decode_sequence(p, &extra, None).is_err());
    assert!(decode_sequence(p, &good[..10], None).is_err());
}

#[test]
fn tnsr_layout_and_errors() {
    let t = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 1e300, -0.0, 3.25]).unwrap();
    let mut bytes = Vec::new();
    encode_tensor(&t, &mut bytes);
    assert_eq!(&bytes[..4], b"TNSR");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
    assert_eq!(bytes.len(), 24 + 48);
    let p = Path::new("t.tnsr");
    let err = decode_tensor(&mut Reader::new(p, &bytes[..bytes.len() - 3])).unwrap_err();
    let msg = message(&err);
    assert!(
        msg.contains("expected 48 bytes") && msg.contains("found 45"),
        "{msg}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tnsr_round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..5), seed in 0u64..1000) {
        let t: Tensor<f64> = init::uniform(&mut init::rng(seed), &shape, 1e6);
        let mut bytes = Vec::new();
        encode_tensor(&t, &mut bytes);
        let p = Path::new("t");
        let mut r = Reader::new(p, &bytes);
        let back = decode_tensor(&mut r).unwrap();
        r.finish().unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn skel_round_trip_in_memory(c in 2usize..5, t in 1usize..20, v in 1usize..30, seed in 0u64..1000) {
        let seq = random_sequence(seed, c, t, v);
        let back = decode_sequence(Path::new("m"), &encode_sequence(&seq), Some(v)).unwrap();
        prop_assert_eq!(back, seq);
    }
}

fn shipped_layout(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../layouts")
        .join(format!("{name}.layout"))
}

#[test]
fn shipped_layout_files_equal_the_builtins() {
    for builtin in [Layout::ntu25(), Layout::kinetics18(), Layout::micro5()] {
        let path = shipped_layout(&builtin.name);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(parse_layout(&path, &text).unwrap(), builtin);
        assert_eq!(resolve_layout(path.to_str().unwrap()).unwrap(), builtin);
        assert_eq!(resolve_layout(&builtin.name).unwrap(), builtin);
        assert_eq!(
            parse_layout(&path, &format_layout(&builtin)).unwrap(),
            builtin
        );
    }
}

#[test]
fn layout_parse_errors_name_the_line() {
    let p = Path::new("bad.layout");
    let cases = [
        (
            "name x\njoints 3\ncenter 0\nedge 0 1\nedge 1 5\n",
            "out of range",
        ),
        (
            "name x\njoints 3\ncenter 0\nedge 0 1\nedge 1 2\nwiggle 1\n",
            "line 6",
        ),
        (
            "name x\njoints 3\ncenter 0\nedge 0 1\nedge 1 2\ngrain 2 part 0 joints 0,1,2\n",
            "grain",
        ),
        ("name x\njoints two\n", "line 2"),
    ];
    for (text, needle) in cases {
        let err = parse_layout(p, text).unwrap_err();
        assert!(message(&err).contains(needle), "{text:?}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
    assert!(resolve_layout("no-such-layout").is_err());
}

#[test]
fn manifest_round_trip() {
    let dir = Path::new("/data/set");
    let m = Manifest {
        layout: "ntu25".into(),
        classes: vec!["wave".into(), "swing".into(), "still".into()],
        samples: vec![
            ManifestEntry {
                path: dir.join("seq/a.skel"),
                label: 0,
                split: "train".into(),
            },
            ManifestEntry {
                path: PathBuf::from("/elsewhere/b.skel"),
                label: 2,
                split: "eval".into(),
            },
        ],
    };
    let text = format_manifest(&m, dir);
    assert!(text.contains("sample seq/a.skel 0 train"));
    let back = parse_manifest(&dir.join("manifest.txt"), &text).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.split("eval").count(), 1);
    let bad = "layout ntu25\nclass a\nclass b\nsample x.skel 2 train\n";
    assert!(message(&parse_manifest(Path::new("m.txt"), bad).unwrap_err()).contains("label 2"));
}

#[test]
fn config_text_round_trip_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.set("streams", "joint,bone-motion").unwrap();
    cfg.set("fusion_weights", "0.6,0.4").unwrap();
    cfg.set("tdf", "motion").unwrap();
    cfg.set("grains", "2").unwrap();
    cfg.set("lr_decay_epochs", "10,20").unwrap();
    cfg.set("epochs", "30").unwrap();
    cfg.validate().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, format!("# comment\n{}", cfg.to_text())).unwrap();
    let back = RunConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.model.tdf, TdfVariant::Motion);
    assert_eq!(back.streams, vec![Stream::Joint, Stream::BoneMotion]);

    let mut ablated = RunConfig::default();
    ablated.ablate(Ablation::Mcf);
    ablated.ablate(Ablation::Tdf);
    ablated.ablate(Ablation::Mask);
    assert!(
        ablated.model.mcf_layers.is_empty()
            && ablated.model.tdf == TdfVariant::Off
            && !ablated.model.mask
    );

    let err = RunConfig::default()
        .set("learning_rate", "0.1")
        .unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let mut mismatched = RunConfig::default();
    mismatched.set("streams", "joint,bone").unwrap();
    assert!(mismatched.validate().is_err());
}

#[test]
fn checkpoint_round_trip_restores_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::micro5();
    let cfg = RunConfig {
        model: ModelConfig::micro(),
        ..Default::default()
    };
    let (_, mut params) = Model::build::<f32>(&cfg.model, &layout, cfg.train.seed).unwrap();
    let mut rng = init::rng(8);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let shape = params.get(id).shape().to_vec();
        *params.get_mut(id) = init::uniform(&mut rng, &shape, 1.0);
    }
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, Stream::Bone, &cfg, &layout, &params).unwrap();
    let ck = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(ck.stream, Stream::Bone);
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.layout, layout);
    for (a, b) in ck.params.entries().iter().zip(params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }

    let bytes = std::fs::read(&path).unwrap();
    assert!(checkpoint::decode::<f32>(&path, &bytes[..bytes.len() - 1]).is_err());
    let needle = b"num_classes = 4";
    let at = bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .unwrap();
    let mut edited = bytes.clone();
    edited[at + needle.len() - 1] = b'5';
    let err = checkpoint::decode::<f32>(&path, &edited)
        .err()
        .expect("shape mismatch");
    assert!(message(&err).contains("shape"), "{err}");
}

#[test]
fn csv_matrix_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let m: Tensor<f64> = init::uniform(&mut init::rng(1), &[3, 2], 10.0);
    let cols = vec!["row".to_string(), "a".into(), "b".into()];
    let rows = vec!["x".to_string(), "y".into(), "z".into()];
    write_matrix(&path, &cols, &rows, &m).unwrap();
    let (back_rows, back) = read_matrix(&path).unwrap();
    assert_eq!(back_rows, rows);
    assert!(back
        .data()
        .iter()
        .zip(m.data())
        .all(|(a, b)| (a - b).abs() < 1e-6));
}
