use crate::autodiff::{ConvSpec, NodeId};
use crate::error::{ensure, Result};
use crate::init::fan_in_bound;
use crate::params::{ParamId, ParamStore, Session};
use crate::real::Real;

use super::{join, BatchNorm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdfVariant {
    Off,
    /// Excitation from spatially pooled features.
    Plain,
    /// Excitation from frame-to-frame differences of the pooled features.
    Motion,
}

impl TdfVariant {
    pub fn default_kernel(self) -> usize {
        match self {
            TdfVariant::Motion => 3,
            _ => 5,
        }
    }
}

/// Temporal excitation: pool joints, pass through a grouped
/// squeeze/excite pair of temporal convs and gate `y · (1 + sigmoid(ỹ))`.
#[derive(Debug, Clone)]
pub struct Tdf {
    pub squeeze_weight: ParamId,
    pub bn: BatchNorm,
    pub excite_weight: ParamId,
    pub excite_bias: ParamId,
    pub motion: bool,
    groups: usize,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct TdfOutput {
    pub out: NodeId,
    /// Gate `g`, `[N, C, T]`.
    pub gate: NodeId,
}

impl Tdf {
    /// `groups` cardinalities split both convs; the squeeze conv maps
    /// `C → C/reduction`.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        channels: usize,
        reduction: usize,
        groups: usize,
        kernel: usize,
        motion: bool,
    ) -> Result<Self> {
        ensure!(
            kernel % 2 == 1,
            Config,
            "TDF kernel must be odd, got {}",
            kernel
        );
        ensure!(
            reduction >= 1 && channels.is_multiple_of(reduction),
            Config,
            "TDF reduction {} must divide {} channels",
            reduction,
            channels
        );
        let mid = channels / reduction;
        ensure!(
            groups >= 1 && channels.is_multiple_of(groups) && mid.is_multiple_of(groups),
            Config,
            "TDF group count {} must divide {} and {}",
            groups,
            channels,
            mid
        );
        let b1 = fan_in_bound(channels / groups * kernel);
        let b2 = fan_in_bound(mid / groups * kernel);
        Ok(Self {
            squeeze_weight: store.add_uniform(
                &join(name, "squeeze.weight"),
                &[mid, channels / groups, kernel],
                b1,
            ),
            bn: BatchNorm::new(store, &join(name, "bn"), mid),
            excite_weight: store.add_uniform(
                &join(name, "excite.weight"),
                &[channels, mid / groups, kernel],
                b2,
            ),
            excite_bias: store.add_uniform(&join(name, "excite.bias"), &[channels], b2),
            motion,
            groups,
            channels,
        })
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, y: NodeId) -> Result<TdfOutput> {
        let ys = s.tape.shape(y).to_vec();
        ensure!(
            ys.len() == 4 && ys[1] == self.channels,
            Shape,
            "TDF expects [N,{},T,V], got {:?}",
            self.channels,
            ys
        );
        let spec = ConvSpec {
            stride: 1,
            groups: self.groups,
        };
        let mut pooled = s.tape.mean(y, 3)?;
        if self.motion {
            pooled = s.tape.temporal_diff(pooled)?;
        }
        let w1 = s.param(self.squeeze_weight);
        let h = s.tape.temporal_conv(pooled, w1, None, spec)?;
        let h = self.bn.forward(s, h)?;
        let h = s.tape.relu(h)?;
        let w2 = s.param(self.excite_weight);
        let b2 = s.param(self.excite_bias);
        let h = s.tape.temporal_conv(h, w2, Some(b2), spec)?;
        let gate = s.tape.sigmoid(h)?;
        let scale = s.tape.add_scalar(gate, R::one())?;
        let out = s.tape.mul_broadcast(y, scale)?;
        Ok(TdfOutput { out, gate })
    }
}
