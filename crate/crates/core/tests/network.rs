mod support;

use proptest::prelude::*;
use stf_core::init;
use stf_core::layers::ClassifierHead;
use stf_core::network::{count_params, cross_entropy_loss, Model, ModelConfig};
use stf_core::params::{Mode, ParamStore, Session};
use stf_core::topology::Layout;
use stf_core::{Error, Tensor};

fn forward(
    model: &Model,
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    mode: Mode,
) -> (Tensor<f64>, Vec<Vec<usize>>, Vec<Tensor<f64>>) {
    let mut s = Session::new(store, mode);
    let xi = s.input(x.clone());
    let out = model.forward(&mut s, xi).unwrap();
    let shapes = out
        .blocks
        .iter()
        .map(|&b| s.tape.shape(b).to_vec())
        .collect();
    let attention = out
        .attention
        .iter()
        .flat_map(|(_, a)| a.iter().map(|&n| s.tape.value(n).clone()))
        .collect();
    (s.tape.value(out.logits).clone(), shapes, attention)
}

fn small_ntu() -> ModelConfig {
    ModelConfig {
        channels: vec![8, 8, 8, 16, 16, 16, 32, 32, 32],
        num_classes: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn default_forward_shapes_follow_stride_arithmetic() {
    let layout = Layout::ntu25();
    let (model, mut store) = Model::build::<f64>(&ModelConfig::default(), &layout, 0).unwrap();
    let x = init::uniform(&mut init::rng(1), &[2, 3, 300, 25], 1.0);
    let (logits, shapes, _) = forward(&model, &mut store, &x, Mode::Eval);
    assert_eq!(logits.shape(), &[2, 60]);
    assert!(logits.is_finite());
    let frames: Vec<usize> = shapes.iter().map(|s| s[2]).collect();
    assert_eq!(frames, vec![300, 300, 300, 150, 150, 150, 75, 75, 75]);
    let channels: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
    assert_eq!(channels, ModelConfig::default().channels);
}

#[test]
fn default_param_count_is_in_anchor_range() {
    let (_, store) = Model::build::<f32>(&ModelConfig::default(), &Layout::ntu25(), 0).unwrap();
    let n = count_params(&store);
    assert!((1_400_000..=2_000_000).contains(&n), "{n}");
    assert_eq!(n, 1_508_498);
}

#[test]
fn affine_layer_count() {
    let mut store = ParamStore::<f64>::new(0);
    ClassifierHead::new(&mut store, "fc", 4, 2);
    assert_eq!(count_params(&store), 10);
}

#[test]
fn doubling_schedule_more_than_doubles_count() {
    let layout = Layout::ntu25();
    let base = ModelConfig::default();
    let wide = ModelConfig {
        channels: base.channels.iter().map(|c| 2 * c).collect(),
        ..base.clone()
    };
    let (_, a) = Model::build::<f32>(&base, &layout, 0).unwrap();
    let (_, b) = Model::build::<f32>(&wide, &layout, 0).unwrap();
    assert!(count_params(&b) > 2 * count_params(&a));
}

#[test]
fn counts_include_masks_and_fusion_weights() {
    let layout = Layout::micro5();
    let (_, store) = Model::build::<f64>(&ModelConfig::micro(), &layout, 0).unwrap();
    let named = |pat: &str| {
        store
            .entries()
            .iter()
            .filter(|e| e.name.ends_with(pat))
            .count()
    };
    assert_eq!(named(".omega0"), 6);
    assert_eq!(named(".mask0"), 10);
    let masked = count_params(&store);
    let (_, bare) = Model::build::<f64>(
        &ModelConfig {
            mask: false,
            ..ModelConfig::micro()
        },
        &layout,
        0,
    )
    .unwrap();
    assert_eq!(masked - count_params(&bare), 10 * 3 * 25);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let layout = Layout::micro5();
    let (_, a) = Model::build::<f64>(&ModelConfig::micro(), &layout, 7).unwrap();
    let (_, b) = Model::build::<f64>(&ModelConfig::micro(), &layout, 7).unwrap();
    let (_, c) = Model::build::<f64>(&ModelConfig::micro(), &layout, 8).unwrap();
    assert_eq!(a.len(), b.len());
    for (ea, eb) in a.entries().iter().zip(b.entries()) {
        assert_eq!(ea.name, eb.name);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ea.value), bits(&eb.value));
    }
    assert!(a
        .entries()
        .iter()
        .zip(c.entries())
        .any(|(x, y)| x.value != y.value));
}

#[test]
fn invalid_configs_are_rejected() {
    let layout = Layout::micro5();
    let bad = [
        ModelConfig {
            channels: vec![8; 8],
            ..ModelConfig::micro()
        },
        ModelConfig {
            mcf_layers: vec![10],
            ..ModelConfig::micro()
        },
        ModelConfig {
            grains_used: 4,
            ..ModelConfig::micro()
        },
        ModelConfig {
            grains_used: 0,
            ..ModelConfig::micro()
        },
        ModelConfig {
            layout: "ntu25".into(),
            ..ModelConfig::micro()
        },
    ];
    for cfg in bad {
        let err = Model::build::<f64>(&cfg, &layout, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }
}

#[test]
fn ablation_parity_micro_and_ntu() {
    for seed in 0..3 {
        assert!(
            support::cases::mcf_ablation_parity(&ModelConfig::micro(), &Layout::micro5(), seed)
                < 1e-10
        );
    }
    assert!(support::cases::mcf_ablation_parity(&small_ntu(), &Layout::ntu25(), 0) < 1e-10);
}

#[test]
fn attention_rows_sum_to_one_in_every_block_and_grain() {
    for (cfg, layout) in [
        (ModelConfig::micro(), Layout::micro5()),
        (small_ntu(), Layout::ntu25()),
    ] {
        let (model, mut store) = Model::build::<f64>(&cfg, &layout, 3).unwrap();
        let x = init::uniform(&mut init::rng(4), &[2, 3, 16, layout.num_joints()], 2.0);
        let (_, _, attention) = forward(&model, &mut store, &x, Mode::Train);
        assert_eq!(attention.len(), cfg.mcf_layers.len() * cfg.grains_used);
        for a in &attention {
            let parts = a.shape()[2];
            for row in a.data().chunks(parts) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-10, "{sum}");
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}

fn ce(logits: Tensor<f64>, labels: &[usize]) -> stf_core::Result<f64> {
    let mut store = ParamStore::<f64>::new(0);
    let mut s = Session::new(&mut store, Mode::Eval);
    let l = s.input(logits);
    let loss = cross_entropy_loss(&mut s, l, labels)?;
    Ok(s.tape.value(loss).data()[0])
}

#[test]
fn cross_entropy_examples() {
    let uniform = ce(Tensor::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
    assert!((uniform - 4f64.ln()).abs() < 1e-12);
    let confident = ce(
        Tensor::from_vec(&[1, 4], vec![0.0, 800.0, 0.0, 0.0]).unwrap(),
        &[1],
    )
    .unwrap();
    assert!(confident.abs() < 1e-12);
    let mut rng = init::rng(11);
    for _ in 0..20 {
        let logits = init::uniform(&mut rng, &[5, 7], 30.0);
        let labels = [0, 6, 3, 3, 1];
        let got = ce(logits.clone(), &labels).unwrap();
        let want = support::cross_entropy(&logits, &labels);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert!(matches!(
        ce(Tensor::zeros(&[2, 4]), &[0, 4]),
        Err(Error::Data(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_shape_depends_only_on_batch(n in 1usize..4, t in 1usize..24, seed in 0u64..1000) {
        let layout = Layout::micro5();
        let (model, mut store) = Model::build::<f64>(&ModelConfig::micro(), &layout, seed).unwrap();
        let x = init::uniform(&mut init::rng(seed), &[n, 3, t, 5], 1.0);
        let (logits, shapes, _) = forward(&model, &mut store, &x, Mode::Eval);
        prop_assert_eq!(logits.shape(), &[n, 4][..]);
        let t4 = (t - 1) / 2 + 1;
        prop_assert_eq!(shapes[3][2], t4);
        prop_assert_eq!(shapes[8][2], (t4 - 1) / 2 + 1);
    }
}
