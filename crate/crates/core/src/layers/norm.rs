use crate::autodiff::NodeId;
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::real::Real;

use super::join;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_constant(&join(name, "gamma"), &[channels], 1.0, ParamKind::Trainable),
            beta: store.add_constant(&join(name, "beta"), &[channels], 0.0, ParamKind::Trainable),
            running_mean: store.add_constant(
                &join(name, "running_mean"),
                &[channels],
                0.0,
                ParamKind::Buffer,
            ),
            running_var: store.add_constant(
                &join(name, "running_var"),
                &[channels],
                1.0,
                ParamKind::Buffer,
            ),
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<NodeId> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let eps = R::from_f64(BN_EPS);
        if s.training() {
            let (out, stats) = s.tape.batch_norm(x, gamma, beta, None, eps)?;
            let stats = stats.expect("training mode returns batch statistics");
            let keep = R::from_f64(BN_MOMENTUM);
            let take = R::one() - keep;
            for (id, batch) in [
                (self.running_mean, &stats.mean),
                (self.running_var, &stats.var),
            ] {
                for (r, &b) in s.params.get_mut(id).data_mut().iter_mut().zip(batch.iter()) {
                    *r = keep * *r + take * b;
                }
            }
            Ok(out)
        } else {
            let mean = s.params.get(self.running_mean).data().to_vec();
            let var = s.params.get(self.running_var).data().to_vec();
            Ok(s.tape
                .batch_norm(x, gamma, beta, Some((&mean, &var)), eps)?
                .0)
        }
    }
}
