//! Skeleton sequences, temporal alignment and the synthetic action dataset.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::error::{ensure, Result};
use crate::init::{self, standard_normal};
use crate::params::{Mode, Session};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::topology::Layout;

/// One skeleton clip: coordinates `[C, T, V]` and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub coords: Tensor<f32>,
    pub label: usize,
}

impl SkeletonSequence {
    pub fn new(coords: Tensor<f32>, label: usize) -> Result<Self> {
        let s = coords.shape();
        ensure!(s.len() == 3, Data, "sequence must be [C,T,V], got {:?}", s);
        ensure!(
            (2..=4).contains(&s[0]),
            Data,
            "sequence channels must be 2, 3 or 4, got {}",
            s[0]
        );
        ensure!(
            coords.is_finite(),
            Data,
            "sequence contains non-finite coordinates"
        );
        Ok(Self { coords, label })
    }

    pub fn channels(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.coords.shape()[2]
    }
}

/// Where to cut when a sequence is longer than the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crop {
    Center,
    /// Start frame, clamped to the last valid offset.
    At(usize),
}

/// Crops (long) or cyclically tiles (short) a `[C, T, V]` tensor to
/// `target` frames.
pub fn align_frames<R: Real>(x: &Tensor<R>, target: usize, crop: Crop) -> Result<Tensor<R>> {
    ensure!(target >= 1, Config, "target frame count must be positive");
    let [c, t, v] = *x.shape() else {
        crate::error::bail!(Shape, "expected [C,T,V], got {:?}", x.shape());
    };
    let start = if t > target {
        match crop {
            Crop::Center => (t - target) / 2,
            Crop::At(s) => s.min(t - target),
        }
    } else {
        0
    };
    let xv = x.data();
    let mut out = Vec::with_capacity(c * target * v);
    for ch in 0..c {
        for f in 0..target {
            let src = if t > target { start + f } else { f % t };
            out.extend_from_slice(&xv[(ch * t + src) * v..(ch * t + src + 1) * v]);
        }
    }
    Tensor::from_vec(&[c, target, v], out)
}

pub fn align_temporal(
    seq: &SkeletonSequence,
    target: usize,
    crop: Crop,
) -> Result<SkeletonSequence> {
    Ok(SkeletonSequence {
        coords: align_frames(&seq.coords, target, crop)?,
        label: seq.label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub frames: usize,
    /// Per-coordinate Gaussian jitter σ. Per-sample nuisance scales with it:
    /// translation σ is `5·noise` and body scale spans `1 ± 2.5·noise`, so
    /// at zero noise samples of one class differ only in phase.
    pub noise: f64,
    /// Peak displacement of the moving joints.
    pub amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 4,
            train_per_class: 16,
            eval_per_class: 16,
            frames: 64,
            noise: 0.02,
            amplitude: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sequence: SkeletonSequence,
    pub split: Split,
}

const POSE_SEED: u64 = 0x5ee1_e70d;

/// Rest pose `[3][V]`: each joint sits one unit from its BFS parent along a
/// fixed pseudo-random direction, with the center joint at the origin.
fn rest_pose(layout: &Layout) -> Vec<[f64; 3]> {
    let v = layout.num_joints();
    let mut rng = init::rng(POSE_SEED);
    let dirs: Vec<[f64; 3]> = (0..v)
        .map(|_| {
            let d = [
                standard_normal(&mut rng),
                standard_normal(&mut rng),
                standard_normal(&mut rng),
            ];
            let n = libm::sqrt(d.iter().map(|x| x * x).sum::<f64>()).max(1e-9);
            [d[0] / n, d[1] / n, d[2] / n]
        })
        .collect();
    let mut adj = vec![Vec::new(); v];
    for &(a, b) in layout.graph.edges() {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut pos = vec![[0.0; 3]; v];
    let mut seen = vec![false; v];
    let center = layout.graph.center();
    seen[center] = true;
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        let mut next = adj[u].clone();
        next.sort_unstable();
        for w in next {
            if !seen[w] {
                seen[w] = true;
                pos[w] = [
                    pos[u][0] + dirs[w][0],
                    pos[u][1] + dirs[w][1],
                    pos[u][2] + dirs[w][2],
                ];
                queue.push_back(w);
            }
        }
    }
    pos
}

/// Class-specific displacement of joint `j` at normalized time `s ∈ [0,1)`.
/// Families cycle every four classes: limb wave, limb swing, whole-body
/// sway, static. Higher classes of the same family oscillate faster.
struct Family {
    members: Vec<bool>,
    axis: usize,
    cycles: f64,
    active: bool,
}

fn family(layout: &Layout, class: usize) -> Family {
    let v = layout.num_joints();
    let parts = layout.grains.last().expect("layout has grains");
    let p = parts.part_count();
    let speed = (class / 4 + 1) as f64;
    let part_members = |part: usize| (0..v).map(|j| parts.part_of(j) == part).collect();
    match class % 4 {
        0 => Family {
            members: part_members(1 % p),
            axis: 1,
            cycles: 4.0 * speed,
            active: true,
        },
        1 => Family {
            members: part_members(p - 1),
            axis: 2,
            cycles: 2.0 * speed,
            active: true,
        },
        2 => Family {
            members: vec![true; v],
            axis: 0,
            cycles: speed,
            active: true,
        },
        _ => Family {
            members: vec![false; v],
            axis: 0,
            cycles: 0.0,
            active: false,
        },
    }
}

fn synth_sequence(
    layout: &Layout,
    cfg: &SynthConfig,
    class: usize,
    rng: &mut init::Rng64,
) -> Result<SkeletonSequence> {
    let v = layout.num_joints();
    let t = cfg.frames;
    let pose = rest_pose(layout);
    let fam = family(layout, class);
    let phase = rng.gen::<f64>() * 2.0 * PI;
    let scale = 1.0 + 2.5 * cfg.noise * (2.0 * rng.gen::<f64>() - 1.0);
    let spread = 5.0 * cfg.noise;
    let shift = [
        spread * standard_normal(rng),
        spread * standard_normal(rng),
        spread * standard_normal(rng),
    ];
    let mut data = vec![0.0f32; 3 * t * v];
    for f in 0..t {
        let wave = if fam.active {
            cfg.amplitude * libm::sin(2.0 * PI * fam.cycles * f as f64 / t as f64 + phase)
        } else {
            0.0
        };
        for (j, base) in pose.iter().enumerate() {
            for c in 0..3 {
                let mut x = scale * base[c] + shift[c];
                if fam.members[j] && c == fam.axis {
                    x += wave;
                }
                x += cfg.noise * standard_normal(rng);
                data[(c * t + f) * v + j] = x as f32;
            }
        }
    }
    SkeletonSequence::new(Tensor::from_vec(&[3, t, v], data)?, class)
}

/// Deterministic class-separable motion families over the layout skeleton.
/// Train samples come first (class-major), then eval samples, each drawn
/// from its own ChaCha8 stream.
pub fn generate_synthetic(cfg: &SynthConfig, layout: &Layout) -> Result<Vec<SynthSample>> {
    ensure!(
        cfg.num_classes >= 2,
        Config,
        "synthetic data needs at least 2 classes"
    );
    ensure!(
        cfg.frames >= 1,
        Config,
        "synthetic data needs at least 1 frame"
    );
    let mut out = Vec::with_capacity(cfg.num_classes * (cfg.train_per_class + cfg.eval_per_class));
    for (split, per_class, stream) in [
        (Split::Train, cfg.train_per_class, 0u64),
        (Split::Eval, cfg.eval_per_class, 1),
    ] {
        let mut rng = init::rng(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream);
        for class in 0..cfg.num_classes {
            for _ in 0..per_class {
                out.push(SynthSample {
                    sequence: synth_sequence(layout, cfg, class, &mut rng)?,
                    split,
                });
            }
        }
    }
    Ok(out)
}

/// Softmax regression on flattened coordinates, fit by full-batch gradient
/// descent. Returns the fitted `(weight [K, D], bias [K])`.
pub fn fit_linear_baseline(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    steps: usize,
    lr: f64,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    ensure!(
        !features.is_empty() && features.len() == labels.len(),
        Data,
        "baseline needs matching features and labels"
    );
    let d = features[0].len();
    ensure!(
        features.iter().all(|f| f.len() == d),
        Data,
        "baseline features differ in length"
    );
    let n = features.len();
    let x = Tensor::from_vec(&[n, d], features.concat())?;
    let mut store = crate::params::ParamStore::<f64>::new(0);
    let w = store.add_constant(
        "weight",
        &[num_classes, d],
        0.0,
        crate::params::ParamKind::Trainable,
    );
    let b = store.add_constant(
        "bias",
        &[num_classes],
        0.0,
        crate::params::ParamKind::Trainable,
    );
    for _ in 0..steps {
        let mut s = Session::new(&mut store, Mode::Train);
        let xi = s.input(x.clone());
        let (wn, bn) = (s.param(w), s.param(b));
        let logits = s.tape.linear(xi, wn, Some(bn))?;
        let loss = s.tape.softmax_cross_entropy(logits, labels)?;
        s.tape.backward(loss)?;
        let grads: Vec<_> = s
            .param_grads()
            .into_iter()
            .map(|(id, g)| (id, g.clone()))
            .collect();
        drop(s);
        for (id, g) in grads {
            for (p, &gi) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gi;
            }
        }
    }
    Ok((store.get(w).clone(), store.get(b).clone()))
}

/// Scores `[N, K]` of a fitted linear baseline.
pub fn linear_scores(
    weight: &Tensor<f64>,
    bias: &Tensor<f64>,
    features: &[Vec<f64>],
) -> Result<Tensor<f64>> {
    let k = weight.shape()[0];
    let d = weight.shape()[1];
    ensure!(
        features.iter().all(|f| f.len() == d),
        Data,
        "baseline feature length differs from weight"
    );
    let mut out = Vec::with_capacity(features.len() * k);
    for f in features {
        for c in 0..k {
            let row = &weight.data()[c * d..(c + 1) * d];
            out.push(bias.data()[c] + row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Tensor::from_vec(&[features.len(), k], out)
}

/// Flattened coordinates as `f64` features.
pub fn flatten(seq: &SkeletonSequence) -> Vec<f64> {
    seq.coords.data().iter().map(|&v| v as f64).collect()
}
