//! Randomized layer cases checked against the loop oracles. Each case
//! returns its worst absolute difference so callers can assert or report.

use rand::Rng;
use stf_core::init::{self, Rng64};
use stf_core::layers::{Mcf, Scn, Tdf};
use stf_core::network::{Model, ModelConfig};
use stf_core::params::{Mode, ParamId, ParamStore, Session};
use stf_core::topology::{
    partition_adjacency, GrainMapping, Layout, PartitionedAdjacency, SkeletonGraph,
};
use stf_core::Tensor;

use super::{max_abs_diff, Mat, McfWeights, TdfWeights};

pub struct Case {
    pub label: String,
    pub diff: f64,
}

pub fn random_tensor(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    init::uniform(rng, shape, 1.0)
}

pub fn randomize(store: &mut ParamStore<f64>, id: ParamId, rng: &mut Rng64, scale: f64) {
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = init::uniform(rng, &shape, scale);
}

pub fn random_tree(rng: &mut Rng64, v: usize) -> SkeletonGraph {
    let edges = (1..v).map(|j| (j, rng.gen_range(0..j))).collect();
    SkeletonGraph::new(v, edges, rng.gen_range(0..v)).unwrap()
}

pub fn random_parts(rng: &mut Rng64, v: usize, parts: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); parts];
    for j in 0..v {
        // the first `parts` joints seed every part so none is empty
        let p = if j < parts {
            j
        } else {
            rng.gen_range(0..parts)
        };
        out[p].push(j);
    }
    out
}

pub fn random_grains(rng: &mut Rng64, v: usize, count: usize) -> Vec<GrainMapping> {
    let mut grains = vec![GrainMapping::identity(v)];
    for g in 1..count {
        let parts = rng.gen_range(1..=v);
        grains.push(GrainMapping::from_parts(g, v, &random_parts(rng, v, parts)).unwrap());
    }
    grains
}

pub fn random_permutation(rng: &mut Rng64, v: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..v).collect();
    for i in (1..v).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    perm
}

pub fn effective_adjacency(
    store: &ParamStore<f64>,
    scn: &Scn,
    adj: &PartitionedAdjacency,
) -> Vec<Mat> {
    adj.subsets()
        .iter()
        .enumerate()
        .map(|(i, g)| match scn.masks() {
            Some(m) => {
                let mask = store.get(m[i]);
                let v = g.len();
                (0..v)
                    .map(|u| (0..v).map(|w| g[u][w] + mask.data()[u * v + w]).collect())
                    .collect()
            }
            None => g.clone(),
        })
        .collect()
}

/// Random tree, widths and mask setting; compares both the raw aggregation
/// and the full BN + ReLU output.
pub fn scn_case(rng: &mut Rng64, case: u64) -> Case {
    let v = rng.gen_range(2..=7);
    let (n, c, co, t) = (
        rng.gen_range(1..=3),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
    );
    let graph = random_tree(rng, v);
    let adj = partition_adjacency(&graph).unwrap();
    let mut store = ParamStore::<f64>::new(case);
    let scn = Scn::new(&mut store, "scn", &adj, c, co, !case.is_multiple_of(3));
    if let Some(masks) = scn.masks() {
        for &m in masks {
            randomize(&mut store, m, rng, 0.5);
        }
    }
    let bn = scn.batch_norm().clone();
    randomize(&mut store, bn.gamma, rng, 1.0);
    randomize(&mut store, bn.beta, rng, 1.0);
    let x = random_tensor(rng, &[n, c, t, v]);

    let eff = effective_adjacency(&store, &scn, &adj);
    let w: Vec<_> = scn
        .weights()
        .iter()
        .map(|&p| store.get(p).clone())
        .collect();
    let agg = super::graph_aggregate(&x, &eff, &w);
    let expected = super::relu(&super::batch_norm_train(
        &agg,
        store.get(bn.gamma).data(),
        store.get(bn.beta).data(),
        1e-5,
    ));

    let mut s = Session::new(&mut store, Mode::Train);
    let xi = s.input(x);
    let got_agg = scn.aggregate(&mut s, xi).unwrap();
    let got = scn.forward(&mut s, xi).unwrap();
    let diff = max_abs_diff(s.tape.value(got_agg).data(), agg.data())
        .max(max_abs_diff(s.tape.value(got).data(), expected.data()));
    Case {
        label: format!("n={n} c={c} co={co} t={t} v={v}"),
        diff,
    }
}

/// SCN with a noisy mask on `layout`, run once on the original labels and
/// once on relabeled joints; returns the worst mismatch after undoing the
/// relabeling.
pub fn scn_relabel_trial(rng: &mut Rng64, layout: &Layout, trial: u64) -> f64 {
    let v = layout.num_joints();
    let perm = random_permutation(rng, v);
    let adj = partition_adjacency(&layout.graph).unwrap();
    let adj_p = partition_adjacency(&layout.graph.relabel(&perm).unwrap()).unwrap();
    let mut store = ParamStore::<f64>::new(trial);
    let scn = Scn::new(&mut store, "scn", &adj, 3, 4, true);
    let mut store_p = ParamStore::<f64>::new(trial);
    let scn_p = Scn::new(&mut store_p, "scn", &adj_p, 3, 4, true);
    for (&m, &mp) in scn.masks().unwrap().iter().zip(scn_p.masks().unwrap()) {
        let noise = init::uniform::<f64>(rng, &[v, v], 0.2);
        let mut mask = store.get(m).clone();
        for (a, b) in mask.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
        let mut mask_p = Tensor::zeros(&[v, v]);
        for u in 0..v {
            for w in 0..v {
                mask_p.set(&[perm[u], perm[w]], mask.at(&[u, w]));
            }
        }
        *store.get_mut(m) = mask;
        *store_p.get_mut(mp) = mask_p;
    }
    let x = random_tensor(rng, &[2, 3, 4, v]);
    let mut x_p = Tensor::zeros(x.shape());
    for (i, &val) in x.data().iter().enumerate() {
        let j = i % v;
        x_p.data_mut()[i - j + perm[j]] = val;
    }
    let run = |store: &mut ParamStore<f64>, scn: &Scn, x: Tensor<f64>| {
        let mut s = Session::new(store, Mode::Train);
        let xi = s.input(x);
        let out = scn.forward(&mut s, xi).unwrap();
        s.tape.value(out).clone()
    };
    let y = run(&mut store, &scn, x);
    let y_p = run(&mut store_p, &scn_p, x_p);
    let mut worst: f64 = 0.0;
    for (i, &val) in y.data().iter().enumerate() {
        let j = i % v;
        worst = worst.max((y_p.data()[i - j + perm[j]] - val).abs());
    }
    worst
}

pub fn mcf_weights(store: &ParamStore<f64>, mcf: &Mcf) -> McfWeights {
    let pair = |c: &stf_core::layers::Conv1x1| {
        (
            store.get(c.weight).clone(),
            c.bias.map(|b| store.get(b).clone()),
        )
    };
    McfWeights {
        reduce: pair(&mcf.reduce),
        query: pair(&mcf.embed_query),
        key: pair(&mcf.embed_key),
        value: pair(&mcf.embed_value),
        recover: store.get(mcf.recover.weight).clone(),
        omega: mcf.fusion.iter().map(|&w| store.get(w).data()[0]).collect(),
    }
}

pub fn run_mcf(
    store: &mut ParamStore<f64>,
    mcf: &Mcf,
    x: &Tensor<f64>,
) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let mut s = Session::new(store, Mode::Train);
    let xi = s.input(x.clone());
    let out = mcf.forward(&mut s, xi).unwrap();
    let att = out
        .attention
        .iter()
        .map(|&a| s.tape.value(a).clone())
        .collect();
    (s.tape.value(out.out).clone(), att)
}

/// Worst difference over the MCF output and every grain's attention map.
/// A wrongly shaped attention map counts as an infinite difference.
#[allow(clippy::too_many_arguments)]
pub fn mcf_case(
    rng: &mut Rng64,
    n: usize,
    c: usize,
    alpha: usize,
    t: usize,
    v: usize,
    grains: usize,
) -> Case {
    let label = format!("n={n} c={c} alpha={alpha} t={t} v={v} grains={grains}");
    let grains = random_grains(rng, v, grains);
    let mut store = ParamStore::<f64>::new(rng.gen());
    let mcf = Mcf::new(&mut store, "mcf", c, alpha, &grains).unwrap();
    for &w in &mcf.fusion {
        randomize(&mut store, w, rng, 1.0);
    }
    let x = random_tensor(rng, &[n, c, t, v]);
    let pooling: Vec<_> = grains.iter().map(|g| g.pooling().clone()).collect();
    let (expected, att_expected) = super::mcf(&x, &mcf_weights(&store, &mcf), &pooling);
    let (got, att) = run_mcf(&mut store, &mcf, &x);
    let mut diff = max_abs_diff(got.data(), expected.data());
    for (g, (a, e)) in att.iter().zip(&att_expected).enumerate() {
        if a.shape() != [n, v, grains[g].part_count()] {
            diff = f64::INFINITY;
            continue;
        }
        let flat: Vec<f64> = e.iter().flatten().flatten().copied().collect();
        diff = diff.max(max_abs_diff(a.data(), &flat));
    }
    Case { label, diff }
}

pub fn random_mcf_case(rng: &mut Rng64) -> Case {
    let alpha = rng.gen_range(1..=3);
    let c = alpha * rng.gen_range(1..=3);
    let (n, t, v) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(2..=6),
    );
    let grains = rng.gen_range(1..=3);
    mcf_case(rng, n, c, alpha, t, v, grains)
}

pub fn tdf_weights(store: &ParamStore<f64>, tdf: &Tdf, groups: usize) -> TdfWeights {
    TdfWeights {
        squeeze: store.get(tdf.squeeze_weight).clone(),
        bn: (
            store.get(tdf.bn.gamma).data().to_vec(),
            store.get(tdf.bn.beta).data().to_vec(),
        ),
        excite: (
            store.get(tdf.excite_weight).clone(),
            store.get(tdf.excite_bias).clone(),
        ),
        groups,
        motion: tdf.motion,
    }
}

pub fn run_tdf(
    store: &mut ParamStore<f64>,
    tdf: &Tdf,
    y: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut s = Session::new(store, Mode::Train);
    let yi = s.input(y.clone());
    let out = tdf.forward(&mut s, yi).unwrap();
    (
        s.tape.value(out.out).clone(),
        s.tape.value(out.gate).clone(),
    )
}

pub struct TdfCase {
    pub case: Case,
    pub input: Tensor<f64>,
    pub out: Tensor<f64>,
    pub gate: Tensor<f64>,
}

/// Odd cases use the motion-excitation variant.
pub fn tdf_case(rng: &mut Rng64, case: u64) -> TdfCase {
    let reduction = rng.gen_range(1..=3);
    let groups = rng.gen_range(1..=2);
    let c = reduction * groups * rng.gen_range(1..=2);
    let (n, t, v) = (
        rng.gen_range(1..=3),
        rng.gen_range(1..=6),
        rng.gen_range(1..=5),
    );
    let kernel = [1, 3, 5][rng.gen_range(0..3)];
    let motion = case % 2 == 1;
    let mut store = ParamStore::<f64>::new(case);
    let tdf = Tdf::new(&mut store, "tdf", c, reduction, groups, kernel, motion).unwrap();
    randomize(&mut store, tdf.bn.gamma, rng, 1.0);
    randomize(&mut store, tdf.bn.beta, rng, 1.0);
    let y = random_tensor(rng, &[n, c, t, v]);
    let (expected, gate_expected) = super::tdf(&y, &tdf_weights(&store, &tdf, groups), 1e-5);
    let (out, gate) = run_tdf(&mut store, &tdf, &y);
    let diff = max_abs_diff(out.data(), expected.data())
        .max(max_abs_diff(gate.data(), gate_expected.data()));
    let label =
        format!("n={n} c={c} r={reduction} g={groups} t={t} v={v} k={kernel} motion={motion}");
    TdfCase {
        case: Case { label, diff },
        input: y,
        out,
        gate,
    }
}

pub fn model_forward(
    model: &Model,
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    mode: Mode,
) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let mut s = Session::new(store, mode);
    let xi = s.input(x.clone());
    let out = model.forward(&mut s, xi).unwrap();
    let attention = out
        .attention
        .iter()
        .flat_map(|(_, a)| a.iter().map(|&n| s.tape.value(n).clone()))
        .collect();
    (s.tape.value(out.logits).clone(), attention)
}

/// Build-time removal of MCF compared with a full model whose MCF branch is
/// silenced by zero fusion weights and a zero recover conv, in both modes.
pub fn mcf_ablation_parity(cfg: &ModelConfig, layout: &Layout, seed: u64) -> f64 {
    let (full, mut full_store) = Model::build::<f64>(cfg, layout, seed).unwrap();
    let ablated_cfg = ModelConfig {
        mcf_layers: vec![],
        ..cfg.clone()
    };
    let (ablated, mut ablated_store) = Model::build::<f64>(&ablated_cfg, layout, seed).unwrap();
    for block in full.blocks.iter().filter_map(|b| b.mcf.as_ref()) {
        for &w in &block.fusion {
            full_store.get_mut(w).data_mut().fill(0.0);
        }
        full_store
            .get_mut(block.recover.weight)
            .data_mut()
            .fill(0.0);
    }
    let x = init::uniform(
        &mut init::rng(seed + 100),
        &[2, 3, 12, layout.num_joints()],
        1.0,
    );
    let mut worst = 0.0f64;
    for mode in [Mode::Train, Mode::Eval] {
        let (a, _) = model_forward(&full, &mut full_store, &x, mode);
        let (b, _) = model_forward(&ablated, &mut ablated_store, &x, mode);
        worst = worst.max(max_abs_diff(a.data(), b.data()));
    }
    worst
}

/// Largest deviation of an attention row sum from one over every block and
/// grain on a random input. Negative entries count as infinite.
pub fn attention_row_error(
    cfg: &ModelConfig,
    layout: &Layout,
    seed: u64,
    frames: usize,
) -> (usize, f64) {
    let (model, mut store) = Model::build::<f64>(cfg, layout, seed).unwrap();
    let x = init::uniform(
        &mut init::rng(seed + 1),
        &[2, 3, frames, layout.num_joints()],
        2.0,
    );
    let (_, attention) = model_forward(&model, &mut store, &x, Mode::Train);
    let mut worst = 0.0f64;
    for a in &attention {
        for row in a.data().chunks(a.shape()[2]) {
            if row.iter().any(|&p| p < 0.0) {
                return (attention.len(), f64::INFINITY);
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    (attention.len(), worst)
}
