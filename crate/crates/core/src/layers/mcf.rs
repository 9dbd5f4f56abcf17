use alloc::vec::Vec;

use crate::autodiff::NodeId;
use crate::error::{ensure, Result};
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::real::Real;
use crate::topology::{GrainMapping, Matrix};

use super::{join, matrix_tensor, Conv1x1};

/// Multi-grain contextual attention. Queries stay at joint resolution; keys
/// and values are pooled to each grain's parts. The per-grain context maps
/// are mixed with scalar weights and added back through a bias-free 1×1
/// recovery conv, so zero fusion weights make the block an exact identity.
#[derive(Debug, Clone)]
pub struct Mcf {
    pub reduce: Conv1x1,
    pub embed_query: Conv1x1,
    pub embed_key: Conv1x1,
    pub embed_value: Conv1x1,
    pub recover: Conv1x1,
    pub fusion: Vec<ParamId>,
    pooling: Vec<Matrix>,
    channels: usize,
    reduced: usize,
}

#[derive(Debug, Clone)]
pub struct McfOutput {
    pub out: NodeId,
    /// Per-grain attention, `[N, V, V̂_i]`, rows normalized over the last axis.
    pub attention: Vec<NodeId>,
}

impl Mcf {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        channels: usize,
        alpha: usize,
        grains: &[GrainMapping],
    ) -> Result<Self> {
        ensure!(
            alpha >= 1 && channels.is_multiple_of(alpha),
            Config,
            "MCF reduction {} must divide {} channels",
            alpha,
            channels
        );
        ensure!(!grains.is_empty(), Config, "MCF needs at least one grain");
        let v = grains[0].num_joints();
        ensure!(
            grains.iter().all(|g| g.num_joints() == v),
            Shape,
            "MCF grains disagree on joint count"
        );
        let reduced = channels / alpha;
        let omega = 1.0 / grains.len() as f64;
        Ok(Self {
            reduce: Conv1x1::new(store, &join(name, "reduce"), channels, reduced, true),
            embed_query: Conv1x1::new(store, &join(name, "query"), reduced, reduced, true),
            // a key bias shifts every score in a row equally, which softmax ignores
            embed_key: Conv1x1::new(store, &join(name, "key"), reduced, reduced, false),
            embed_value: Conv1x1::new(store, &join(name, "value"), reduced, reduced, true),
            recover: Conv1x1::new(store, &join(name, "recover"), reduced, channels, false),
            fusion: (0..grains.len())
                .map(|i| {
                    store.add_constant(
                        &join(name, &alloc::format!("omega{i}")),
                        &[1],
                        omega,
                        ParamKind::Trainable,
                    )
                })
                .collect(),
            pooling: grains.iter().map(|g| g.pooling().clone()).collect(),
            channels,
            reduced,
        })
    }

    pub fn num_grains(&self) -> usize {
        self.pooling.len()
    }

    pub fn num_joints(&self) -> usize {
        self.pooling[0][0].len()
    }

    pub fn reduced_channels(&self) -> usize {
        self.reduced
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<McfOutput> {
        let xs = s.tape.shape(x).to_vec();
        ensure!(
            xs.len() == 4 && xs[1] == self.channels,
            Shape,
            "MCF expects [N,{},T,V], got {:?}",
            self.channels,
            xs
        );
        ensure!(
            xs[3] == self.num_joints(),
            Shape,
            "MCF grain mappings cover {} joints, input has {}",
            self.num_joints(),
            xs[3]
        );
        let (n, t, v) = (xs[0], xs[2], xs[3]);
        let ct = self.reduced * t;
        let xr = self.reduce.forward(s, x)?;
        let q = self.embed_query.forward(s, xr)?;
        let k = self.embed_key.forward(s, xr)?;
        let val = self.embed_value.forward(s, xr)?;
        let q = s.tape.reshape(q, &[n, ct, v])?;

        let mut attention = Vec::with_capacity(self.pooling.len());
        let mut fused: Option<NodeId> = None;
        for (p, &omega) in self.pooling.iter().zip(&self.fusion) {
            let parts = p.len();
            let pool = s.constant(matrix_tensor(p));
            let kp = s.tape.contract(k, pool)?;
            let kp = s.tape.reshape(kp, &[n, ct, parts])?;
            let vp = s.tape.contract(val, pool)?;
            let vp = s.tape.reshape(vp, &[n, ct, parts])?;
            let scores = s.tape.batch_matmul(q, kp, true, false)?;
            let attn = s.tape.softmax(scores, 2)?;
            let ctx = s.tape.batch_matmul(vp, attn, false, true)?;
            let ctx = s.tape.reshape(ctx, &[n, self.reduced, t, v])?;
            let w = s.param(omega);
            let term = s.tape.scale_by(ctx, w)?;
            fused = Some(match fused {
                Some(prev) => s.tape.add(prev, term)?,
                None => term,
            });
            attention.push(attn);
        }
        let y = self
            .recover
            .forward(s, fused.expect("at least one grain"))?;
        let out = s.tape.add(x, y)?;
        Ok(McfOutput { out, attention })
    }
}
