//! Network layers: masked partitioned graph convolution (SCN), multi-grain
//! contextual attention (MCF), temporal excitation (TDF), temporal
//! convolution (TCN), batch norm and the classifier head.

mod head;
mod mcf;
mod norm;
mod scn;
mod tcn;
mod tdf;

pub use head::ClassifierHead;
pub use mcf::{Mcf, McfOutput};
pub use norm::BatchNorm;
pub use scn::{graph_aggregate, Scn};
pub use tcn::{ResidualProjection, Tcn};
pub use tdf::{Tdf, TdfOutput, TdfVariant};

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::NodeId;
use crate::error::Result;
use crate::init::fan_in_bound;
use crate::params::{ParamId, ParamStore, Session};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::topology::Matrix;

pub(crate) fn matrix_tensor<R: Real>(m: &Matrix) -> Tensor<R> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let data: Vec<R> = m.iter().flatten().map(|&v| R::from_f64(v)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("rectangular matrix")
}

pub(crate) fn join(prefix: &str, leaf: &str) -> String {
    alloc::format!("{prefix}.{leaf}")
}

/// 1×1 convolution over channels with optional bias.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv1x1 {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Self {
        let bound = fan_in_bound(c_in);
        let weight = store.add_uniform(&join(name, "weight"), &[c_out, c_in], bound);
        let bias = bias.then(|| store.add_uniform(&join(name, "bias"), &[c_out], bound));
        Self { weight, bias }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<NodeId> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.pointwise(x, w, b)
    }
}
