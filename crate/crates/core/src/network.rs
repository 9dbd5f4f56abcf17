//! Model assembly: a beginning block, nine STF blocks and the classifier head.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::NodeId;
use crate::error::{ensure, Result};
use crate::layers::{
    BatchNorm, ClassifierHead, Mcf, ResidualProjection, Scn, Tcn, Tdf, TdfVariant,
};
use crate::params::{ParamStore, Session};
use crate::real::Real;
use crate::topology::{partition_adjacency, GrainMapping, Layout, PartitionedAdjacency};

pub const NUM_BLOCKS: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layout: String,
    /// Output channels of blocks 1..=9. The beginning block emits `channels[0]`.
    pub channels: Vec<usize>,
    /// 1-based block indices carrying MCF.
    pub mcf_layers: Vec<usize>,
    pub grains_used: usize,
    pub tdf: TdfVariant,
    pub tdf_kernel: usize,
    pub tdf_reduction: usize,
    /// Channels per TDF cardinality; the group count is `C / tdf_group_width`.
    pub tdf_group_width: usize,
    pub mask: bool,
    pub alpha: usize,
    pub tcn_kernel: usize,
    pub tcn_groups: usize,
    /// 1-based block indices with temporal stride 2.
    pub strided_blocks: Vec<usize>,
    pub num_classes: usize,
    pub in_channels: usize,
    pub data_bn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layout: "ntu25".to_string(),
            channels: vec![64, 64, 64, 128, 128, 128, 256, 256, 256],
            mcf_layers: (4..=9).collect(),
            grains_used: 3,
            tdf: TdfVariant::Plain,
            tdf_kernel: TdfVariant::Plain.default_kernel(),
            tdf_reduction: 4,
            tdf_group_width: 4,
            mask: true,
            alpha: 4,
            tcn_kernel: 9,
            tcn_groups: 4,
            strided_blocks: vec![4, 7],
            num_classes: 60,
            in_channels: 3,
            data_bn: true,
        }
    }
}

impl ModelConfig {
    /// Small model on the five-joint layout for gradient checks and fast tests.
    pub fn micro() -> Self {
        Self {
            layout: "micro5".to_string(),
            channels: vec![8, 8, 8, 16, 16, 16, 32, 32, 32],
            tdf_kernel: 3,
            num_classes: 4,
            ..Self::default()
        }
    }

    /// Masked baseline: no MCF, no TDF.
    pub fn baseline(mut self) -> Self {
        self.mcf_layers.clear();
        self.tdf = TdfVariant::Off;
        self
    }

    pub fn validate(&self, layout: &Layout) -> Result<()> {
        ensure!(
            self.channels.len() == NUM_BLOCKS,
            Config,
            "channel schedule needs {} entries, got {}",
            NUM_BLOCKS,
            self.channels.len()
        );
        ensure!(
            self.channels.iter().all(|&c| c > 0),
            Config,
            "channel schedule entries must be positive"
        );
        for (what, set) in [
            ("mcf_layers", &self.mcf_layers),
            ("strided_blocks", &self.strided_blocks),
        ] {
            ensure!(
                set.iter().all(|&b| (1..=NUM_BLOCKS).contains(&b)),
                Config,
                "{} must be within 1..={}, got {:?}",
                what,
                NUM_BLOCKS,
                set
            );
        }
        ensure!(
            (1..=layout.grains.len()).contains(&self.grains_used),
            Config,
            "grains_used {} outside 1..={} for layout '{}'",
            self.grains_used,
            layout.grains.len(),
            layout.name
        );
        ensure!(
            self.num_classes > 0 && self.in_channels > 0,
            Config,
            "num_classes and in_channels must be positive"
        );
        ensure!(
            self.tdf_group_width > 0,
            Config,
            "tdf_group_width must be positive"
        );
        ensure!(
            layout.name == self.layout,
            Config,
            "config names layout '{}', got '{}'",
            self.layout,
            layout.name
        );
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub scn: Scn,
    pub mcf: Option<Mcf>,
    pub tdf: Option<Tdf>,
    pub tcn: Tcn,
    /// `None` means an identity residual.
    pub residual: Option<ResidualProjection>,
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub out: NodeId,
    /// Per-grain attention when the block carries MCF.
    pub attention: Option<Vec<NodeId>>,
}

impl Block {
    /// One STF block `c_in → c` named `name`; MCF is included when `with_mcf`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        config: &ModelConfig,
        adjacency: &PartitionedAdjacency,
        grains: &[GrainMapping],
        c_in: usize,
        c: usize,
        stride: usize,
        with_mcf: bool,
    ) -> Result<Self> {
        let scn = Scn::new(
            store,
            &alloc::format!("{name}.scn"),
            adjacency,
            c_in,
            c,
            config.mask,
        );
        let mcf = if with_mcf {
            Some(Mcf::new(
                store,
                &alloc::format!("{name}.mcf"),
                c,
                config.alpha,
                grains,
            )?)
        } else {
            None
        };
        let tdf = match config.tdf {
            TdfVariant::Off => None,
            v => {
                ensure!(
                    c.is_multiple_of(config.tdf_group_width),
                    Config,
                    "tdf_group_width {} must divide {} channels",
                    config.tdf_group_width,
                    c
                );
                Some(Tdf::new(
                    store,
                    &alloc::format!("{name}.tdf"),
                    c,
                    config.tdf_reduction,
                    c / config.tdf_group_width,
                    config.tdf_kernel,
                    v == TdfVariant::Motion,
                )?)
            }
        };
        let tcn = Tcn::new(
            store,
            &alloc::format!("{name}.tcn"),
            c,
            config.tcn_kernel,
            stride,
            config.tcn_groups,
        )?;
        let residual = (c != c_in || stride != 1).then(|| {
            ResidualProjection::new(store, &alloc::format!("{name}.residual"), c_in, c, stride)
        });
        Ok(Self {
            scn,
            mcf,
            tdf,
            tcn,
            residual,
        })
    }

    /// `relu(TCN(TDF(MCF(SCN(x)))) + residual(x))`.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<BlockOutput> {
        let mut y = self.scn.forward(s, x)?;
        let mut attention = None;
        if let Some(mcf) = &self.mcf {
            let out = mcf.forward(s, y)?;
            attention = Some(out.attention);
            y = out.out;
        }
        if let Some(tdf) = &self.tdf {
            y = tdf.forward(s, y)?.out;
        }
        y = self.tcn.forward(s, y)?;
        let res = match &self.residual {
            Some(p) => p.forward(s, x)?,
            None => x,
        };
        let sum = s.tape.add(y, res)?;
        Ok(BlockOutput {
            out: s.tape.relu(sum)?,
            attention,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub num_joints: usize,
    pub data_bn: Option<BatchNorm>,
    pub stem_scn: Scn,
    pub stem_tcn: Tcn,
    pub blocks: Vec<Block>,
    pub head: ClassifierHead,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: NodeId,
    /// `(block index, per-grain attention)` for each MCF block.
    pub attention: Vec<(usize, Vec<NodeId>)>,
    /// Output of the last block, `[N, C, T', V]`.
    pub features: NodeId,
    /// Output of each of the nine blocks.
    pub blocks: Vec<NodeId>,
}

impl Model {
    /// Builds the architecture and registers its parameters in a fresh store.
    pub fn build<R: Real>(
        config: &ModelConfig,
        layout: &Layout,
        seed: u64,
    ) -> Result<(Self, ParamStore<R>)> {
        let mut store = ParamStore::new(seed);
        let model = Self::build_into(config, layout, &mut store)?;
        Ok((model, store))
    }

    pub fn build_into<R: Real>(
        config: &ModelConfig,
        layout: &Layout,
        store: &mut ParamStore<R>,
    ) -> Result<Self> {
        config.validate(layout)?;
        let adjacency = partition_adjacency(&layout.graph)?;
        let grains = &layout.grains[..config.grains_used];
        let c0 = config.channels[0];
        let data_bn = config
            .data_bn
            .then(|| BatchNorm::new(store, "data_bn", config.in_channels));
        let stem_scn = Scn::new(
            store,
            "stem.scn",
            &adjacency,
            config.in_channels,
            c0,
            config.mask,
        );
        let stem_tcn = Tcn::new(
            store,
            "stem.tcn",
            c0,
            config.tcn_kernel,
            1,
            config.tcn_groups,
        )?;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut c_in = c0;
        for (i, &c) in config.channels.iter().enumerate() {
            let idx = i + 1;
            let stride = if config.strided_blocks.contains(&idx) {
                2
            } else {
                1
            };
            let name = alloc::format!("block{idx}");
            blocks.push(Block::new(
                store,
                &name,
                config,
                &adjacency,
                grains,
                c_in,
                c,
                stride,
                config.mcf_layers.contains(&idx),
            )?);
            c_in = c;
        }
        let head = ClassifierHead::new(store, "head", c_in, config.num_classes);
        Ok(Self {
            config: config.clone(),
            num_joints: layout.num_joints(),
            data_bn,
            stem_scn,
            stem_tcn,
            blocks,
            head,
        })
    }

    /// Forward pass on `x: [N, C_in, T, V]`.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: NodeId) -> Result<ForwardOutput> {
        let xs = s.tape.shape(x).to_vec();
        ensure!(
            xs.len() == 4 && xs[1] == self.config.in_channels && xs[3] == self.num_joints,
            Shape,
            "model expects [N,{},T,{}], got {:?}",
            self.config.in_channels,
            self.num_joints,
            xs
        );
        let mut h = x;
        if let Some(bn) = &self.data_bn {
            h = bn.forward(s, h)?;
        }
        h = self.stem_scn.forward(s, h)?;
        h = self.stem_tcn.forward(s, h)?;
        h = s.tape.relu(h)?;
        let mut attention = Vec::new();
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let out = block.forward(s, h)?;
            if let Some(a) = out.attention {
                attention.push((i + 1, a));
            }
            h = out.out;
            outputs.push(h);
        }
        let logits = self.head.forward(s, h)?;
        Ok(ForwardOutput {
            logits,
            attention,
            features: h,
            blocks: outputs,
        })
    }
}

/// Number of trainable scalars in a parameter store.
pub fn count_params<R: Real>(store: &ParamStore<R>) -> usize {
    store.trainable_count()
}

/// Mean cross-entropy of raw logits against integer labels.
pub fn cross_entropy_loss<R: Real>(
    s: &mut Session<'_, R>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    s.tape.softmax_cross_entropy(logits, labels)
}
