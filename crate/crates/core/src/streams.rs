//! Bone and motion modalities and weighted score fusion.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{bail, ensure, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::topology::BonePairs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Stream {
    pub const ALL: [Stream; 4] = [
        Stream::Joint,
        Stream::Bone,
        Stream::JointMotion,
        Stream::BoneMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Joint => "joint",
            Stream::Bone => "bone",
            Stream::JointMotion => "joint-motion",
            Stream::BoneMotion => "bone-motion",
        }
    }

    /// Derives this modality from a joint sequence `[C, T, V]`.
    pub fn apply<R: Real>(self, joints: &Tensor<R>, bones: &BonePairs) -> Result<Tensor<R>> {
        match self {
            Stream::Joint => Ok(joints.clone()),
            Stream::Bone => compute_bones(joints, bones),
            Stream::JointMotion => compute_motion(joints),
            Stream::BoneMotion => compute_motion(&compute_bones(joints, bones)?),
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Stream::ALL.into_iter().find(|st| st.name() == s) {
            Some(st) => Ok(st),
            None => bail!(
                Config,
                "unknown stream '{}' (expected joint, bone, joint-motion or bone-motion)",
                s
            ),
        }
    }
}

fn check_ctv<R: Real>(x: &Tensor<R>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, t, v] => Ok((c, t, v)),
        ref s => bail!(Shape, "expected a [C,T,V] sequence, got {:?}", s),
    }
}

/// `bone[c,t,i] = x[c,t,i] − x[c,t,target(i)]`; the root's bone is zero.
pub fn compute_bones<R: Real>(x: &Tensor<R>, pairs: &BonePairs) -> Result<Tensor<R>> {
    let (c, t, v) = check_ctv(x)?;
    ensure!(
        pairs.num_joints() == v,
        Data,
        "bone pairs cover {} joints, sequence has {}",
        pairs.num_joints(),
        v
    );
    let targets: Vec<Option<usize>> = (0..v).map(|j| pairs.target(j)).collect();
    let xv = x.data();
    let mut out = Tensor::zeros(x.shape());
    for (row, dst) in xv.chunks_exact(v).zip(out.data_mut().chunks_exact_mut(v)) {
        for (j, target) in targets.iter().enumerate() {
            if let Some(p) = *target {
                dst[j] = row[j] - row[p];
            }
        }
    }
    debug_assert_eq!(xv.len(), c * t * v);
    Ok(out)
}

/// `m[c,t,v] = x[c,t+1,v] − x[c,t,v]` with the last frame zero.
pub fn compute_motion<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (c, t, v) = check_ctv(x)?;
    let xv = x.data();
    let mut out = Tensor::zeros(x.shape());
    let o = out.data_mut();
    for ch in 0..c {
        for f in 0..t.saturating_sub(1) {
            let base = (ch * t + f) * v;
            for j in 0..v {
                o[base + j] = xv[base + v + j] - xv[base + j];
            }
        }
    }
    Ok(out)
}

/// Elementwise `Σ_s w_s · score_s` over equally shaped score matrices.
pub fn fuse_scores<R: Real>(scores: &[Tensor<R>], weights: &[f64]) -> Result<Tensor<R>> {
    ensure!(
        !scores.is_empty(),
        Contract,
        "fuse_scores needs at least one stream"
    );
    ensure!(
        scores.len() == weights.len(),
        Contract,
        "{} score matrices but {} fusion weights",
        scores.len(),
        weights.len()
    );
    let shape = scores[0].shape();
    let mut out = Tensor::zeros(shape);
    for (s, &w) in scores.iter().zip(weights) {
        ensure!(
            s.shape() == shape,
            Contract,
            "score shapes differ: {:?} vs {:?}",
            s.shape(),
            shape
        );
        let w = R::from_f64(w);
        for (o, &v) in out.data_mut().iter_mut().zip(s.data()) {
            *o = *o + w * v;
        }
    }
    Ok(out)
}
