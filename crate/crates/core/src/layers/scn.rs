use alloc::vec::Vec;

use crate::autodiff::{NodeId, Tape};
use crate::error::{ensure, Result};
use crate::init::fan_in_bound;
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::real::Real;
use crate::topology::{Matrix, PartitionedAdjacency};

use super::{join, matrix_tensor, BatchNorm};

/// `Σ_i A_i · x · W_i (+ b_i)`: each adjacency contracts the joint axis, each
/// weight mixes channels. `adjacency[i]` is `[V, V]`, `weights[i]` is `[C', C]`.
pub fn graph_aggregate<R: Real>(
    tape: &mut Tape<R>,
    x: NodeId,
    adjacency: &[NodeId],
    weights: &[NodeId],
    biases: &[Option<NodeId>],
) -> Result<NodeId> {
    ensure!(
        !adjacency.is_empty() && adjacency.len() == weights.len() && weights.len() == biases.len(),
        Shape,
        "graph_aggregate needs one weight and bias slot per adjacency subset"
    );
    let mut acc: Option<NodeId> = None;
    for ((&a, &w), &b) in adjacency.iter().zip(weights).zip(biases) {
        let h = tape.contract(x, a)?;
        let h = tape.pointwise(h, w, b)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, h)?,
            None => h,
        });
    }
    Ok(acc.expect("at least one subset"))
}

/// Spatial graph convolution with per-subset learnable masks:
/// `ReLU(BN(Σ_i (G_i + M_i) x W_i))`.
#[derive(Debug, Clone)]
pub struct Scn {
    subsets: Vec<Matrix>,
    masks: Option<Vec<ParamId>>,
    weights: Vec<ParamId>,
    bn: BatchNorm,
    in_channels: usize,
    out_channels: usize,
}

impl Scn {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        adjacency: &PartitionedAdjacency,
        in_channels: usize,
        out_channels: usize,
        learnable_mask: bool,
    ) -> Self {
        let bound = fan_in_bound(in_channels);
        let k = adjacency.k();
        let masks = learnable_mask.then(|| {
            adjacency
                .initial_masks()
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    store.add(
                        &join(name, &alloc::format!("mask{i}")),
                        matrix_tensor(m),
                        ParamKind::Trainable,
                    )
                })
                .collect()
        });
        let weights = (0..k)
            .map(|i| {
                store.add_uniform(
                    &join(name, &alloc::format!("weight{i}")),
                    &[out_channels, in_channels],
                    bound,
                )
            })
            .collect();
        let bn = BatchNorm::new(store, &join(name, "bn"), out_channels);
        Self {
            subsets: adjacency.subsets().to_vec(),
            masks,
            weights,
            bn,
            in_channels,
            out_channels,
        }
    }

    pub fn masks(&self) -> Option<&[ParamId]> {
        self.masks.as_deref()
    }

    pub fn weights(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn batch_norm(&self) -> &BatchNorm {
        &self.bn
    }

    pub fn num_joints(&self) -> usize {
        self.subsets[0].len()
    }

    /// Effective adjacency nodes `G_i (+ M_i)` on the session tape.
    pub fn adjacency_nodes<R: Real>(&self, s: &mut Session<'_, R>) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.subsets.len());
        for (i, g) in self.subsets.iter().enumerate() {
            let g = s.constant(matrix_tensor(g));
            out.push(match &self.masks {
                Some(m) => {
                    let m = s.param(m[i]);
                    s.tape.add(g, m)?
                }
                None => g,
            });
        }
        Ok(out)
    }

    /// Pre-normalization aggregate `Σ_i (G_i + M_i) x W_i`. There is no bias:
    /// the batch norm that follows would cancel it.
    pub fn aggregate<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<NodeId> {
        let xs = s.tape.shape(x);
        ensure!(
            xs.len() == 4 && xs[3] == self.num_joints() && xs[1] == self.in_channels,
            Shape,
            "SCN expects [N,{},T,{}], got {:?}",
            self.in_channels,
            self.num_joints(),
            xs
        );
        let adj = self.adjacency_nodes(s)?;
        let w: Vec<NodeId> = self.weights.iter().map(|&p| s.param(p)).collect();
        graph_aggregate(&mut s.tape, x, &adj, &w, &alloc::vec![None; w.len()])
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<NodeId> {
        let h = self.aggregate(s, x)?;
        let h = self.bn.forward(s, h)?;
        s.tape.relu(h)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}
