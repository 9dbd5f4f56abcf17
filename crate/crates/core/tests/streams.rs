mod support;

use proptest::prelude::*;
use stf_core::init;
use stf_core::metrics::argmax;
use stf_core::streams::{compute_bones, compute_motion, fuse_scores, Stream};
use stf_core::topology::{BonePairs, Layout};
use stf_core::{Error, Tensor};
use support::max_abs_diff;

fn random_sequence(seed: u64, c: usize, t: usize, v: usize) -> Tensor<f64> {
    init::uniform(&mut init::rng(seed), &[c, t, v], 2.0)
}

#[test]
fn coincident_joints_have_zero_bones() {
    let layout = Layout::ntu25();
    let x = Tensor::<f64>::full(&[3, 4, 25], 0.3);
    let b = compute_bones(&x, &layout.bones).unwrap();
    assert!(b.data().iter().all(|&v| v == 0.0));
}

#[test]
fn two_joint_bone_example() {
    let pairs = BonePairs::new(2, 0, &[(1, 0)]).unwrap();
    let x = Tensor::from_vec(&[3, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 3.0]).unwrap();
    let b = compute_bones(&x, &pairs).unwrap();
    assert_eq!(b.data(), &[0.0, 1.0, 0.0, 2.0, 0.0, 3.0]);
}

#[test]
fn bones_telescope_to_the_root_position() {
    for layout in [Layout::ntu25(), Layout::kinetics18(), Layout::micro5()] {
        let v = layout.num_joints();
        let (c, t) = (3, 5);
        let x = random_sequence(1, c, t, v);
        let b = compute_bones(&x, &layout.bones).unwrap();
        let root = layout.bones.root();
        for ch in 0..c {
            for f in 0..t {
                for j in 0..v {
                    let (mut k, mut sum) = (j, 0.0);
                    while let Some(next) = layout.bones.target(k) {
                        sum += b.at(&[ch, f, k]);
                        k = next;
                    }
                    let want = x.at(&[ch, f, j]) - x.at(&[ch, f, root]);
                    assert!(
                        (sum - want).abs() < 1e-12,
                        "{} joint {j}: {sum} vs {want}",
                        layout.name
                    );
                }
            }
        }
    }
}

#[test]
fn bone_pairs_out_of_range_are_data_errors() {
    assert!(matches!(
        BonePairs::new(3, 0, &[(1, 0), (2, 5)]),
        Err(Error::Data(_))
    ));
    let x = Tensor::<f64>::zeros(&[3, 2, 6]);
    assert!(matches!(
        compute_bones(&x, &Layout::micro5().bones),
        Err(Error::Data(_))
    ));
}

#[test]
fn static_sequence_has_zero_motion() {
    let x = Tensor::from_fn(&[3, 6, 4], |i| {
        let (c, v) = (i / 24, i % 4);
        (c * 4 + v) as f64
    });
    assert!(compute_motion(&x).unwrap().data().iter().all(|&m| m == 0.0));
}

#[test]
fn linear_motion_has_constant_velocity() {
    let (c, t, v) = (3, 7, 4);
    let vel: Vec<f64> = (0..c * v).map(|i| 0.25 * i as f64 - 1.0).collect();
    let x = Tensor::from_fn(&[c, t, v], |i| {
        let (ch, f, j) = (i / (t * v), (i / v) % t, i % v);
        vel[ch * v + j] * f as f64
    });
    let m = compute_motion(&x).unwrap();
    for ch in 0..c {
        for f in 0..t {
            for j in 0..v {
                let want = if f + 1 < t { vel[ch * v + j] } else { 0.0 };
                assert!((m.at(&[ch, f, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn motion_cumulative_sum_reconstructs_the_sequence() {
    let (c, t, v) = (3, 9, 25);
    let x = random_sequence(2, c, t, v);
    let m = compute_motion(&x).unwrap();
    for ch in 0..c {
        for j in 0..v {
            let mut acc = x.at(&[ch, 0, j]);
            for f in 1..t {
                acc += m.at(&[ch, f - 1, j]);
                assert!((acc - x.at(&[ch, f, j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_frame_motion_is_zero() {
    let x = random_sequence(3, 3, 1, 5);
    assert!(compute_motion(&x).unwrap().data().iter().all(|&m| m == 0.0));
}

#[test]
fn stream_names_round_trip() {
    for s in Stream::ALL {
        assert_eq!(s.name().parse::<Stream>().unwrap(), s);
    }
    assert!(matches!(
        "velocity".parse::<Stream>(),
        Err(Error::Config(_))
    ));
}

#[test]
fn bone_motion_stream_composes() {
    let layout = Layout::ntu25();
    let x = random_sequence(4, 3, 6, 25);
    let direct = Stream::BoneMotion.apply(&x, &layout.bones).unwrap();
    let composed = compute_motion(&compute_bones(&x, &layout.bones).unwrap()).unwrap();
    assert_eq!(direct, composed);
    assert_eq!(Stream::Joint.apply(&x, &layout.bones).unwrap(), x);
}

fn scores(seed: u64) -> Tensor<f64> {
    init::uniform(&mut init::rng(seed), &[6, 5], 3.0)
}

#[test]
fn fusion_examples() {
    let a = scores(1);
    assert_eq!(fuse_scores(std::slice::from_ref(&a), &[1.0]).unwrap(), a);
    let half = fuse_scores(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap();
    assert!(max_abs_diff(half.data(), a.data()) < 1e-15);
    let four = [scores(1), scores(2), scores(3), scores(4)];
    let joint_only = fuse_scores(&four, &[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(argmax(&joint_only), argmax(&four[0]));
}

#[test]
fn fusion_contract_errors() {
    assert!(matches!(
        fuse_scores(&[scores(1), scores(2)], &[1.0]),
        Err(Error::Contract(_))
    ));
    let other = Tensor::<f64>::zeros(&[6, 4]);
    assert!(matches!(
        fuse_scores(&[scores(1), other], &[1.0, 1.0]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        fuse_scores::<f64>(&[], &[]),
        Err(Error::Contract(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bones_ignore_translation(seed in 0u64..10_000, offset in prop::array::uniform3(-5.0f64..5.0)) {
        let layout = Layout::ntu25();
        let x = random_sequence(seed, 3, 4, 25);
        let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + offset[i / 100]);
        let a = compute_bones(&x, &layout.bones).unwrap();
        let b = compute_bones(&shifted, &layout.bones).unwrap();
        // exact up to the rounding of the shift itself
        prop_assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
    }

    #[test]
    fn motion_and_bones_commute(seed in 0u64..10_000, t in 1usize..12) {
        let layout = Layout::kinetics18();
        let x = random_sequence(seed, 3, t, 18);
        let mb = compute_motion(&compute_bones(&x, &layout.bones).unwrap()).unwrap();
        let bm = compute_bones(&compute_motion(&x).unwrap(), &layout.bones).unwrap();
        prop_assert!(max_abs_diff(mb.data(), bm.data()) < 1e-12);
    }

    #[test]
    fn fusion_argmax_ignores_positive_weight_scale(seed in 0u64..10_000, k in 0.01f64..100.0) {
        let s = [scores(seed), scores(seed + 1), scores(seed + 2), scores(seed + 3)];
        let w = [1.0, 0.7, 0.4, 0.9];
        let scaled: Vec<f64> = w.iter().map(|x| x * k).collect();
        prop_assert_eq!(argmax(&fuse_scores(&s, &w).unwrap()), argmax(&fuse_scores(&s, &scaled).unwrap()));
    }

    #[test]
    fn fusion_is_linear_in_the_scores(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (x, y) = (scores(seed), scores(seed + 7));
        let fused = fuse_scores(&[x.clone(), y.clone()], &[a, b]).unwrap();
        let want: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_abs_diff(fused.data(), &want) < 1e-12);
    }
}
