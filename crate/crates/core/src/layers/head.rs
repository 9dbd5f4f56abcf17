use crate::autodiff::NodeId;
use crate::error::{ensure, Result};
use crate::init::fan_in_bound;
use crate::params::{ParamId, ParamStore, Session};
use crate::real::Real;

use super::join;

/// Global average pool over `(T, V)` followed by an affine map to class logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    channels: usize,
}

impl ClassifierHead {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        channels: usize,
        num_classes: usize,
    ) -> Self {
        let bound = fan_in_bound(channels);
        Self {
            weight: store.add_uniform(&join(name, "weight"), &[num_classes, channels], bound),
            bias: store.add_uniform(&join(name, "bias"), &[num_classes], bound),
            channels,
        }
    }

    /// Raw logits `[N, num_classes]`.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<NodeId> {
        let xs = s.tape.shape(x).to_vec();
        ensure!(
            xs.len() == 4 && xs[1] == self.channels,
            Shape,
            "head expects [N,{},T,V], got {:?}",
            self.channels,
            xs
        );
        let flat = s.tape.reshape(x, &[xs[0], xs[1], xs[2] * xs[3]])?;
        let pooled = s.tape.mean(flat, 2)?;
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.linear(pooled, w, Some(b))
    }
}
