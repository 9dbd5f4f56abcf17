use crate::autodiff::{ConvSpec, NodeId};
use crate::error::{ensure, Result};
use crate::init::fan_in_bound;
use crate::params::{ParamId, ParamStore, Session};
use crate::real::Real;

use super::{join, BatchNorm};

/// Channel-preserving temporal convolution followed by batch norm. Convs
/// feeding batch norm carry no bias.
#[derive(Debug, Clone)]
pub struct Tcn {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub spec: ConvSpec,
}

impl Tcn {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        ensure!(
            kernel % 2 == 1,
            Config,
            "TCN kernel must be odd, got {}",
            kernel
        );
        ensure!(
            groups >= 1 && channels.is_multiple_of(groups),
            Config,
            "TCN groups {} must divide {} channels",
            groups,
            channels
        );
        let fan_in = channels / groups * kernel;
        let bound = fan_in_bound(fan_in);
        Ok(Self {
            weight: store.add_uniform(
                &join(name, "weight"),
                &[channels, channels / groups, kernel],
                bound,
            ),
            bn: BatchNorm::new(store, &join(name, "bn"), channels),
            spec: ConvSpec { stride, groups },
        })
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<NodeId> {
        let w = s.param(self.weight);
        let h = s.tape.temporal_conv(x, w, None, self.spec)?;
        self.bn.forward(s, h)
    }
}

/// Strided 1×1 projection plus batch norm for block residuals that change
/// channel count or temporal length.
#[derive(Debug, Clone)]
pub struct ResidualProjection {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub stride: usize,
}

impl ResidualProjection {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let bound = fan_in_bound(c_in);
        Self {
            weight: store.add_uniform(&join(name, "weight"), &[c_out, c_in, 1], bound),
            bn: BatchNorm::new(store, &join(name, "bn"), c_out),
            stride,
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<NodeId> {
        let w = s.param(self.weight);
        let h = s.tape.temporal_conv(
            x,
            w,
            None,
            ConvSpec {
                stride: self.stride,
                groups: 1,
            },
        )?;
        self.bn.forward(s, h)
    }
}
