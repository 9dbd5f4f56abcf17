//! Central finite-difference verification of the tape's vector-Jacobian rules.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{ConvSpec, Kernel, NodeId, Tape};
use crate::error::{bail, ensure, Result};
use crate::network::{Block, Model, ModelConfig};
use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::topology::Layout;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    /// Coordinates re-measured with a smaller step because the stencil
    /// straddled a non-differentiable point.
    pub retried: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            coordinates: 0,
            retried: 0,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Keeps whichever of the two reports has the larger error.
    pub fn merge(self, other: Self) -> Self {
        let coordinates = self.coordinates + other.coordinates;
        let retried = self.retried + other.retried;
        let worst = if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        };
        Self {
            coordinates,
            retried,
            ..worst
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn check_eps(eps: f64) -> Result<()> {
    ensure!(
        (1e-7..=1e-4).contains(&eps),
        Config,
        "finite-difference step {} outside [1e-7, 1e-4]",
        eps
    );
    Ok(())
}

/// Smallest step used when a stencil straddles a non-differentiable point.
pub const MIN_EPS: f64 = 1e-7;
/// Coordinates whose error exceeds this are probed for a kink.
const PROBE_ABOVE: f64 = 1e-6;
/// Two central estimates agree if they differ by less than this fraction
/// of their magnitude (plus the rounding-noise bound).
const AGREE: f64 = 1e-6;

/// Compares `analytic` against central differences of `f` at the listed
/// coordinates of `x`. `x` is restored before returning.
///
/// A coordinate with a large error is re-measured at `h/10`. For a smooth
/// objective the two central estimates agree to `O(h²)`, so the first
/// estimate stands. If they disagree beyond rounding noise, a ReLU-style
/// kink lies within `h` of the point and the step keeps shrinking (not
/// below [`MIN_EPS`]) until consecutive estimates agree. A wrong derivative
/// of a smooth function therefore survives the probe unchanged.
pub fn compare_with_finite_differences(
    x: &mut [f64],
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
    eps: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    check_eps(eps)?;
    let mut central = |x: &mut [f64], i: usize, h: f64| -> Result<(f64, f64)> {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x);
        x[i] = orig - h;
        let minus = f(x);
        x[i] = orig;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            bail!(Numeric, "objective is non-finite near coordinate {}", i);
        }
        // Worst-case rounding error of the difference quotient.
        let noise = 64.0 * f64::EPSILON * (plus.abs() + minus.abs() + 1.0) / (2.0 * h);
        Ok(((plus - minus) / (2.0 * h), noise))
    };
    let mut report = GradCheckReport::empty();
    for i in coords {
        let mut h = eps;
        let (mut numeric, _) = central(x, i, h)?;
        let mut retried = false;
        if relative_error(analytic[i], numeric) > PROBE_ABOVE {
            while h / 10.0 >= MIN_EPS * (1.0 - 1e-9) {
                let (finer, noise) = central(x, i, h / 10.0)?;
                if (finer - numeric).abs() <= AGREE * finer.abs().max(numeric.abs()) + noise {
                    break;
                }
                h /= 10.0;
                numeric = finer;
                retried = true;
            }
        }
        let err = relative_error(analytic[i], numeric);
        report.coordinates += 1;
        report.retried += usize::from(retried);
        if err > report.max_rel_error || report.coordinates == 1 {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

/// Settings shared by the tape-driven checkers.
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub eps: f64,
    pub fault: Option<Kernel>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            fault: None,
        }
    }
}

/// Checks `f` at `x`; `f` maps a leaf holding `x` to a scalar node.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    let reports = grad_check_inputs(
        |tape, ids| f(tape, ids[0]),
        core::slice::from_ref(x),
        CheckOptions { eps, fault: None },
    )?;
    Ok(reports[0])
}

/// Checks `f` with respect to every element of every input; one report per input.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: CheckOptions,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    check_eps(opts.eps)?;
    let mut tape = Tape::new();
    tape.inject_fault(opts.fault);
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    ensure!(
        tape.value(loss).numel() == 1,
        Contract,
        "checked function must be scalar-valued"
    );
    ensure!(
        tape.value(loss).is_finite(),
        Numeric,
        "checked function is non-finite at the base point"
    );
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, x)| {
            tape.grad(id)
                .map_or_else(|| alloc::vec![0.0; x.numel()], |g| g.data().to_vec())
        })
        .collect();

    let mut reports = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut x = input.data().to_vec();
        let report = compare_with_finite_differences(
            &mut x,
            &analytic[which],
            0..input.numel(),
            opts.eps,
            |xs| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, orig)| {
                        if k == which {
                            t.leaf(
                                Tensor::from_vec(orig.shape(), xs.to_vec()).expect("same extents"),
                            )
                        } else {
                            t.leaf(orig.clone())
                        }
                    })
                    .collect();
                let out = f(&mut t, &ids)?;
                Ok(t.value(out).data()[0])
            },
        )?;
        reports.push(report);
    }
    Ok(reports)
}

/// Settings for an end-to-end model gradient check.
#[derive(Debug, Clone)]
pub struct ModelCheckOptions {
    pub eps: f64,
    pub batch: usize,
    pub frames: usize,
    pub seed: u64,
    /// Checks at most this many randomly chosen coordinates per tensor.
    pub coords_per_tensor: Option<usize>,
    pub fault: Option<Kernel>,
    pub objective: Objective,
}

/// Scalar the model check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Mean cross-entropy against random labels.
    CrossEntropy,
    /// `Σ r ⊙ logits` for a fixed random probe `r ∈ [-1, 1)`. Its value is
    /// small, so finite-difference rounding noise is far lower than for
    /// cross-entropy, whose `O(1)` value bounds noise at about one ulp / eps.
    Probe,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            batch: 2,
            frames: 8,
            seed: 0,
            coords_per_tensor: None,
            fault: None,
            objective: Objective::Probe,
        }
    }
}

/// Result for one checked tensor; `name` is a parameter name or `input`.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub report: GradCheckReport,
}

fn pick_coords(rng: &mut crate::init::Rng64, numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < numel => {
            let mut all: Vec<usize> = (0..numel).collect();
            let (chosen, _) = all.partial_shuffle(rng, k);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            chosen
        }
        _ => (0..numel).collect(),
    }
}

/// Compares backprop against central differences for a scalar objective
/// of a freshly built model (training-mode batch norm) with respect to
/// every trainable parameter and the input.
pub fn grad_check_model(
    config: &ModelConfig,
    layout: &Layout,
    opts: &ModelCheckOptions,
) -> Result<Vec<TensorCheck>> {
    check_eps(opts.eps)?;
    let (model, store) = Model::build::<f64>(config, layout, opts.seed)?;
    let mut rng = crate::init::rng(opts.seed ^ 0x6772_6164);
    let x = crate::init::uniform::<f64>(
        &mut rng,
        &[
            opts.batch,
            config.in_channels,
            opts.frames,
            layout.num_joints(),
        ],
        1.0,
    );
    let labels: Vec<usize> = (0..opts.batch)
        .map(|_| rng.gen_range(0..config.num_classes))
        .collect();
    let probe = crate::init::uniform::<f64>(&mut rng, &[opts.batch, config.num_classes], 1.0);
    let objective = |s: &mut Session<'_, f64>, logits: NodeId| -> Result<NodeId> {
        match opts.objective {
            Objective::CrossEntropy => s.tape.softmax_cross_entropy(logits, &labels),
            Objective::Probe => {
                let r = s.constant(probe.clone());
                let weighted = s.tape.mul(logits, r)?;
                s.tape.sum(weighted)
            }
        }
    };

    // training-mode outputs do not read the running statistics this updates
    let loss_of = |params: &mut ParamStore<f64>, input: &Tensor<f64>| -> Result<f64> {
        let mut s = Session::new(params, Mode::Train);
        let xi = s.input(input.clone());
        let logits = model.forward(&mut s, xi)?.logits;
        let loss = objective(&mut s, logits)?;
        Ok(s.tape.value(loss).data()[0])
    };

    let mut base = store.clone();
    let mut s = Session::new(&mut base, Mode::Train);
    s.tape.inject_fault(opts.fault);
    let xi = s.tape.leaf(x.clone());
    let logits = model.forward(&mut s, xi)?.logits;
    let loss = objective(&mut s, logits)?;
    ensure!(
        s.tape.value(loss).is_finite(),
        Numeric,
        "model loss is non-finite at the base point"
    );
    s.tape.backward(loss)?;
    let input_grad = s
        .tape
        .grad(xi)
        .map_or_else(|| alloc::vec![0.0; x.numel()], |g| g.data().to_vec());
    let mut grads: Vec<(ParamId, Vec<f64>)> = Vec::new();
    for id in store.trainable_ids() {
        let g = match s.bound_node(id).and_then(|n| s.tape.grad(n)) {
            Some(g) => g.data().to_vec(),
            None => alloc::vec![0.0; store.get(id).numel()],
        };
        grads.push((id, g));
    }
    drop(s);

    let mut out = Vec::with_capacity(grads.len() + 1);
    for (id, analytic) in &grads {
        let entry = store.entry(*id);
        let coords = pick_coords(&mut rng, entry.value.numel(), opts.coords_per_tensor);
        let mut values = entry.value.data().to_vec();
        let mut probe = store.clone();
        let report =
            compare_with_finite_differences(&mut values, analytic, coords, opts.eps, |v| {
                probe.get_mut(*id).data_mut().copy_from_slice(v);
                loss_of(&mut probe, &x)
            })?;
        out.push(TensorCheck {
            name: entry.name.clone(),
            report,
        });
    }
    let coords = pick_coords(&mut rng, x.numel(), opts.coords_per_tensor);
    let mut values = x.data().to_vec();
    let mut probe = store.clone();
    let report =
        compare_with_finite_differences(&mut values, &input_grad, coords, opts.eps, |v| {
            loss_of(&mut probe, &Tensor::from_vec(x.shape(), v.to_vec())?)
        })?;
    out.push(TensorCheck {
        name: "input".into(),
        report,
    });
    Ok(out)
}

/// Result of checking one kernel's vector-Jacobian rule.
#[derive(Debug, Clone, Copy)]
pub struct KernelCheck {
    pub kernel: Kernel,
    /// Worst report over the kernel's inputs.
    pub report: GradCheckReport,
}

type KernelCase = (
    Vec<Tensor<f64>>,
    fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
);

/// Values with magnitude in `[0.2, 1.2)` so ReLU kinks stay outside the stencil.
fn away_from_zero(rng: &mut crate::init::Rng64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = 0.2 + rng.gen::<f64>();
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn kernel_case(kernel: Kernel, rng: &mut crate::init::Rng64) -> KernelCase {
    let mut u = |shape: &[usize]| crate::init::uniform::<f64>(rng, shape, 1.0);
    let x4 = [2, 3, 4, 5];
    match kernel {
        Kernel::Add => (alloc::vec![u(&x4), u(&x4)], |t, i| t.add(i[0], i[1])),
        Kernel::Sub => (alloc::vec![u(&x4), u(&x4)], |t, i| t.sub(i[0], i[1])),
        Kernel::Mul => (alloc::vec![u(&x4), u(&x4)], |t, i| t.mul(i[0], i[1])),
        Kernel::Scale => (alloc::vec![u(&x4)], |t, i| t.scale(i[0], -1.7)),
        Kernel::AddScalar => (alloc::vec![u(&x4)], |t, i| t.add_scalar(i[0], 0.3)),
        Kernel::ScaleBy => (alloc::vec![u(&x4), u(&[1])], |t, i| t.scale_by(i[0], i[1])),
        Kernel::MulBroadcast => (alloc::vec![u(&x4), u(&[2, 3, 4])], |t, i| {
            t.mul_broadcast(i[0], i[1])
        }),
        Kernel::Relu => (alloc::vec![away_from_zero(rng, &x4)], |t, i| t.relu(i[0])),
        Kernel::Sigmoid => (alloc::vec![u(&x4)], |t, i| t.sigmoid(i[0])),
        Kernel::MatMul => (alloc::vec![u(&[4, 3]), u(&[5, 4])], |t, i| {
            t.matmul(i[0], i[1], true, true)
        }),
        Kernel::BatchMatMul => (alloc::vec![u(&[2, 3, 4]), u(&[2, 4, 5])], |t, i| {
            t.batch_matmul(i[0], i[1], false, false)
        }),
        Kernel::Pointwise => (alloc::vec![u(&x4), u(&[4, 3]), u(&[4])], |t, i| {
            t.pointwise(i[0], i[1], Some(i[2]))
        }),
        Kernel::Contract => (alloc::vec![u(&x4), u(&[3, 5])], |t, i| {
            t.contract(i[0], i[1])
        }),
        Kernel::TemporalConv => (
            alloc::vec![u(&[2, 4, 7, 3]), u(&[4, 2, 3]), u(&[4])],
            |t, i| {
                t.temporal_conv(
                    i[0],
                    i[1],
                    Some(i[2]),
                    ConvSpec {
                        stride: 2,
                        groups: 2,
                    },
                )
            },
        ),
        Kernel::Softmax => (alloc::vec![u(&x4)], |t, i| t.softmax(i[0], 3)),
        Kernel::Mean => (alloc::vec![u(&x4)], |t, i| t.mean(i[0], 2)),
        Kernel::Sum => (alloc::vec![u(&x4)], |t, i| t.sum(i[0])),
        Kernel::BatchNorm => (alloc::vec![u(&x4), u(&[3]), u(&[3])], |t, i| {
            Ok(t.batch_norm(i[0], i[1], i[2], None, 1e-5)?.0)
        }),
        Kernel::Linear => (alloc::vec![u(&[3, 4]), u(&[2, 4]), u(&[2])], |t, i| {
            t.linear(i[0], i[1], Some(i[2]))
        }),
        Kernel::Permute => (alloc::vec![u(&x4)], |t, i| t.permute(i[0], &[0, 3, 1, 2])),
        Kernel::Reshape => (alloc::vec![u(&x4)], |t, i| t.reshape(i[0], &[6, 20])),
        Kernel::TemporalDiff => (alloc::vec![u(&x4)], |t, i| t.temporal_diff(i[0])),
        Kernel::SoftmaxCrossEntropy => (alloc::vec![u(&[3, 4])], |t, i| {
            t.softmax_cross_entropy(i[0], &[2, 0, 3])
        }),
    }
}

/// Checks every kernel at small random shapes under a random linear probe.
pub fn check_kernels(seed: u64, eps: f64, fault: Option<Kernel>) -> Result<Vec<KernelCheck>> {
    let mut out = Vec::with_capacity(Kernel::ALL.len());
    for (n, &kernel) in Kernel::ALL.iter().enumerate() {
        let mut rng = crate::init::rng(seed.wrapping_add(n as u64));
        let (inputs, f) = kernel_case(kernel, &mut rng);
        let probe_seed = rng.gen::<u64>();
        let reports = grad_check_inputs(
            |t, ids| {
                let y = f(t, ids)?;
                let probe =
                    crate::init::uniform::<f64>(&mut crate::init::rng(probe_seed), t.shape(y), 1.0);
                let r = t.constant(probe);
                let weighted = t.mul(y, r)?;
                t.sum(weighted)
            },
            &inputs,
            CheckOptions { eps, fault },
        )?;
        let report = reports
            .into_iter()
            .reduce(GradCheckReport::merge)
            .expect("every case has an input");
        out.push(KernelCheck { kernel, report });
    }
    Ok(out)
}

/// Checks one full STF block (SCN, MCF, TDF, TCN with stride 2 and a
/// projected residual) of the given model config on `layout`.
pub fn grad_check_block(
    config: &ModelConfig,
    layout: &Layout,
    opts: &ModelCheckOptions,
) -> Result<Vec<TensorCheck>> {
    check_eps(opts.eps)?;
    config.validate(layout)?;
    let adjacency = crate::topology::partition_adjacency(&layout.graph)?;
    let (c_in, c) = (config.channels[0], config.channels[3]);
    let mut store = ParamStore::<f64>::new(opts.seed);
    let block = Block::new(
        &mut store,
        "block",
        config,
        &adjacency,
        &layout.grains[..config.grains_used],
        c_in,
        c,
        2,
        true,
    )?;
    let mut rng = crate::init::rng(opts.seed ^ 0x626c_6f63);
    let x = crate::init::uniform::<f64>(
        &mut rng,
        &[opts.batch, c_in, opts.frames, layout.num_joints()],
        1.0,
    );
    let run = |params: &mut ParamStore<f64>,
               input: &Tensor<f64>,
               fault: Option<Kernel>,
               want_grads: bool|
     -> Result<(f64, Vec<Vec<f64>>)> {
        let mut s = Session::new(params, Mode::Train);
        s.tape.inject_fault(fault);
        let xi = s.tape.leaf(input.clone());
        let y = block.forward(&mut s, xi)?.out;
        let probe = crate::init::uniform::<f64>(
            &mut crate::init::rng(opts.seed ^ 0x7072),
            s.tape.shape(y),
            1.0,
        );
        let r = s.constant(probe);
        let weighted = s.tape.mul(y, r)?;
        let loss = s.tape.sum(weighted)?;
        let value = s.tape.value(loss).data()[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        s.tape.backward(loss)?;
        let mut grads = Vec::new();
        for id in store_ids(s.params) {
            grads.push(match s.bound_node(id).and_then(|n| s.tape.grad(n)) {
                Some(g) => g.data().to_vec(),
                None => alloc::vec![0.0; s.params.get(id).numel()],
            });
        }
        grads.push(
            s.tape
                .grad(xi)
                .map_or_else(|| alloc::vec![0.0; input.numel()], |g| g.data().to_vec()),
        );
        Ok((value, grads))
    };
    let mut base = store.clone();
    let (value, grads) = run(&mut base, &x, opts.fault, true)?;
    ensure!(
        value.is_finite(),
        Numeric,
        "block output is non-finite at the base point"
    );
    let ids = store_ids(&store);
    let mut out = Vec::with_capacity(ids.len() + 1);
    for (k, id) in ids.iter().enumerate() {
        let entry = store.entry(*id);
        let coords = pick_coords(&mut rng, entry.value.numel(), opts.coords_per_tensor);
        let mut values = entry.value.data().to_vec();
        let mut probe = store.clone();
        let report =
            compare_with_finite_differences(&mut values, &grads[k], coords, opts.eps, |v| {
                probe.get_mut(*id).data_mut().copy_from_slice(v);
                Ok(run(&mut probe, &x, None, false)?.0)
            })?;
        out.push(TensorCheck {
            name: entry.name.clone(),
            report,
        });
    }
    let coords = pick_coords(&mut rng, x.numel(), opts.coords_per_tensor);
    let mut values = x.data().to_vec();
    let mut probe = store.clone();
    let report =
        compare_with_finite_differences(&mut values, &grads[ids.len()], coords, opts.eps, |v| {
            Ok(run(
                &mut probe,
                &Tensor::from_vec(x.shape(), v.to_vec())?,
                None,
                false,
            )?
            .0)
        })?;
    out.push(TensorCheck {
        name: "input".into(),
        report,
    });
    Ok(out)
}

fn store_ids(store: &ParamStore<f64>) -> Vec<ParamId> {
    store.trainable_ids().collect()
}
