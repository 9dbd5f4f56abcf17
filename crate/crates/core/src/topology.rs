//! Skeleton graphs, spatial-configuration partitioning, joint→part grains and
//! bone trees, plus the two built-in body layouts.

use alloc::collections::VecDeque;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, ensure, Error, Result};

/// Dense row-major square matrix in double precision.
pub type Matrix = Vec<Vec<f64>>;

/// Physical topology `G(V, E)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonGraph {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    center: usize,
}

impl SkeletonGraph {
    pub fn new(num_joints: usize, edges: Vec<(usize, usize)>, center: usize) -> Result<Self> {
        ensure!(
            num_joints > 0,
            Topology,
            "a skeleton needs at least one joint"
        );
        ensure!(
            center < num_joints,
            Topology,
            "center joint {} out of range for {} joints",
            center,
            num_joints
        );
        for &(a, b) in &edges {
            ensure!(
                a < num_joints && b < num_joints,
                Topology,
                "edge ({}, {}) out of range for {} joints",
                a,
                b,
                num_joints
            );
            ensure!(a != b, Topology, "self-loop ({}, {}) in edge list", a, b);
        }
        let g = Self {
            num_joints,
            edges,
            center,
        };
        if let Some(j) = g.hop_distances().iter().position(Option::is_none) {
            bail!(
                Topology,
                "joint {} is not reachable from center joint {}",
                j,
                center
            );
        }
        Ok(g)
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn center(&self) -> usize {
        self.center
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.num_joints];
        for &(a, b) in &self.edges {
            nb[a].push(b);
            nb[b].push(a);
        }
        nb
    }

    /// BFS hop distance from the center joint; `None` when unreachable.
    pub fn hop_distances(&self) -> Vec<Option<usize>> {
        let nb = self.neighbors();
        let mut dist = vec![None; self.num_joints];
        dist[self.center] = Some(0);
        let mut queue = VecDeque::from([self.center]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &v in &nb[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Relabels joints so that old joint `j` becomes `perm[j]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_joints)?;
        let edges = self
            .edges
            .iter()
            .map(|&(a, b)| (perm[a], perm[b]))
            .collect();
        Self::new(self.num_joints, edges, perm[self.center])
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    ensure!(
        perm.len() == n,
        Shape,
        "permutation of length {} for {} joints",
        perm.len(),
        n
    );
    let mut seen = vec![false; n];
    for &p in perm {
        ensure!(p < n && !seen[p], Shape, "not a permutation: {:?}", perm);
        seen[p] = true;
    }
    Ok(())
}

/// `Â = A + I`.
pub fn build_adjacency(graph: &SkeletonGraph) -> Matrix {
    let n = graph.num_joints();
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(i, j) in graph.edges() {
        a[i][j] = 1.0;
        a[j][i] = 1.0;
    }
    a
}

/// `D_r^{-1/2} Â D_c^{-1/2}` with `D_r`, `D_c` the row and column sums; for a
/// symmetric input both equal the degree matrix. Zero-degree rows stay zero.
pub fn normalize_adjacency(a: &Matrix) -> Result<Matrix> {
    let n = a.len();
    ensure!(
        a.iter().all(|r| r.len() == n),
        Shape,
        "adjacency must be square"
    );
    ensure!(
        a.iter().flatten().all(|v| v.is_finite() && *v >= 0.0),
        Shape,
        "adjacency entries must be finite and non-negative"
    );
    let row: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..n).map(|j| a.iter().map(|r| r[j]).sum()).collect();
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let d = row[i] * col[j];
                    if d > 0.0 {
                        a[i][j] / libm::sqrt(d)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

/// Root / centripetal / centrifugal split of `Â`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedAdjacency {
    raw: Vec<Matrix>,
    subsets: Vec<Matrix>,
}

impl PartitionedAdjacency {
    pub const ROOT: usize = 0;
    pub const CENTRIPETAL: usize = 1;
    pub const CENTRIFUGAL: usize = 2;

    /// Number of subsets `K`.
    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    pub fn num_joints(&self) -> usize {
        self.subsets.first().map_or(0, Vec::len)
    }

    /// Normalized subset matrices `G_i`.
    pub fn subsets(&self) -> &[Matrix] {
        &self.subsets
    }

    /// Un-normalized 0/1 subset matrices; they sum to `Â`.
    pub fn raw_subsets(&self) -> &[Matrix] {
        &self.raw
    }

    /// Initial values of the learnable masks (equal to `G_i`).
    pub fn initial_masks(&self) -> Vec<Matrix> {
        self.subsets.clone()
    }

    /// A single-subset adjacency, mostly for tests and ablations.
    pub fn from_subsets(subsets: Vec<Matrix>) -> Result<Self> {
        ensure!(!subsets.is_empty(), Shape, "at least one subset required");
        let n = subsets[0].len();
        ensure!(
            subsets
                .iter()
                .all(|s| s.len() == n && s.iter().all(|r| r.len() == n)),
            Shape,
            "subsets must be square with equal extents"
        );
        Ok(Self {
            raw: subsets.clone(),
            subsets,
        })
    }
}

/// Splits each joint's neighbourhood by hop distance to the center:
/// `(i, j)` is centripetal from root `i` when `j` is closer to the center,
/// centrifugal when farther, and joins the root subset when equally far.
pub fn partition_adjacency(graph: &SkeletonGraph) -> Result<PartitionedAdjacency> {
    let dist: Vec<usize> = graph
        .hop_distances()
        .into_iter()
        .enumerate()
        .map(|(j, d)| d.ok_or_else(|| Error::Topology(alloc::format!("joint {} unreachable", j))))
        .collect::<Result<_>>()?;
    let a_hat = build_adjacency(graph);
    let n = graph.num_joints();
    let mut raw = vec![vec![vec![0.0; n]; n]; 3];
    for i in 0..n {
        for j in 0..n {
            if a_hat[i][j] == 0.0 {
                continue;
            }
            let k = match dist[j].cmp(&dist[i]) {
                core::cmp::Ordering::Equal => PartitionedAdjacency::ROOT,
                core::cmp::Ordering::Less => PartitionedAdjacency::CENTRIPETAL,
                core::cmp::Ordering::Greater => PartitionedAdjacency::CENTRIFUGAL,
            };
            raw[k][i][j] = 1.0;
        }
    }
    let subsets = raw.iter().map(normalize_adjacency).collect::<Result<_>>()?;
    Ok(PartitionedAdjacency { raw, subsets })
}

/// Joint→part average pooling for one grain.
#[derive(Debug, Clone, PartialEq)]
pub struct GrainMapping {
    grain_id: usize,
    /// `parts × joints`.
    pooling: Matrix,
}

impl GrainMapping {
    pub fn identity(num_joints: usize) -> Self {
        let pooling = (0..num_joints)
            .map(|i| {
                (0..num_joints)
                    .map(|j| if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            grain_id: 0,
            pooling,
        }
    }

    /// Uniform averages over the given joint groups, which must cover every
    /// joint exactly once.
    pub fn from_parts(grain_id: usize, num_joints: usize, parts: &[Vec<usize>]) -> Result<Self> {
        ensure!(!parts.is_empty(), Data, "grain {} has no parts", grain_id);
        let mut owner = vec![None; num_joints];
        for (p, joints) in parts.iter().enumerate() {
            ensure!(
                !joints.is_empty(),
                Data,
                "grain {} part {} is empty",
                grain_id,
                p
            );
            for &j in joints {
                ensure!(
                    j < num_joints,
                    Data,
                    "grain {} part {}: joint {} out of range",
                    grain_id,
                    p,
                    j
                );
                if let Some(prev) = owner[j] {
                    bail!(
                        Data,
                        "grain {}: joint {} belongs to parts {} and {}",
                        grain_id,
                        j,
                        prev,
                        p
                    );
                }
                owner[j] = Some(p);
            }
        }
        if let Some(j) = owner.iter().position(Option::is_none) {
            bail!(
                Data,
                "grain {}: joint {} is not assigned to any part",
                grain_id,
                j
            );
        }
        let mut pooling = vec![vec![0.0; num_joints]; parts.len()];
        for (p, joints) in parts.iter().enumerate() {
            let w = 1.0 / joints.len() as f64;
            for &j in joints {
                pooling[p][j] = w;
            }
        }
        Ok(Self { grain_id, pooling })
    }

    pub fn grain_id(&self) -> usize {
        self.grain_id
    }

    pub fn part_count(&self) -> usize {
        self.pooling.len()
    }

    pub fn num_joints(&self) -> usize {
        self.pooling.first().map_or(0, Vec::len)
    }

    pub fn pooling(&self) -> &Matrix {
        &self.pooling
    }

    /// Joint → part index.
    pub fn part_of(&self, joint: usize) -> usize {
        self.pooling
            .iter()
            .position(|row| row[joint] != 0.0)
            .expect("every joint has a part")
    }

    /// Mapping for joints relabeled by `perm` (old `j` → new `perm[j]`).
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_joints())?;
        let mut pooling = vec![vec![0.0; self.num_joints()]; self.part_count()];
        for (p, row) in self.pooling.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                pooling[p][perm[j]] = w;
            }
        }
        Ok(Self {
            grain_id: self.grain_id,
            pooling,
        })
    }
}

/// `(source, target)` bone pairs oriented toward the center joint; one per
/// non-center joint, forming a spanning tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BonePairs {
    num_joints: usize,
    root: usize,
    /// `target[i]` for every non-root joint.
    target: Vec<Option<usize>>,
}

impl BonePairs {
    pub fn new(num_joints: usize, root: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        ensure!(root < num_joints, Data, "bone root {} out of range", root);
        let mut target = vec![None; num_joints];
        for &(s, t) in pairs {
            ensure!(
                s < num_joints && t < num_joints,
                Data,
                "bone ({}, {}) out of range for {} joints",
                s,
                t,
                num_joints
            );
            ensure!(
                s != root,
                Data,
                "root joint {} cannot be a bone source",
                root
            );
            ensure!(
                target[s].is_none(),
                Data,
                "joint {} appears twice as a bone source",
                s
            );
            target[s] = Some(t);
        }
        for (j, t) in target.iter().enumerate() {
            ensure!(j == root || t.is_some(), Data, "joint {} has no bone", j);
        }
        // Every chain must terminate at the root.
        for start in 0..num_joints {
            let (mut j, mut steps) = (start, 0);
            while let Some(t) = target[j] {
                j = t;
                steps += 1;
                ensure!(
                    steps <= num_joints,
                    Data,
                    "bone pairs contain a cycle through joint {}",
                    start
                );
            }
            ensure!(
                j == root,
                Data,
                "bone chain from joint {} ends at {} instead of the root",
                start,
                j
            );
        }
        Ok(Self {
            num_joints,
            root,
            target,
        })
    }

    /// BFS tree of `graph` rooted at its center, each bone pointing toward the center.
    pub fn from_graph(graph: &SkeletonGraph) -> Self {
        let dist = graph.hop_distances();
        let nb = graph.neighbors();
        let target = (0..graph.num_joints())
            .map(|j| {
                if j == graph.center() {
                    return None;
                }
                let dj = dist[j].expect("connected");
                nb[j]
                    .iter()
                    .copied()
                    .filter(|&k| dist[k] == Some(dj - 1))
                    .min()
            })
            .collect();
        Self {
            num_joints: graph.num_joints(),
            root: graph.center(),
            target,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn target(&self, joint: usize) -> Option<usize> {
        self.target[joint]
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.target
            .iter()
            .enumerate()
            .filter_map(|(s, t)| t.map(|t| (s, t)))
            .collect()
    }
}

/// A complete body description: topology, grains, and bone tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub name: String,
    pub graph: SkeletonGraph,
    /// Grain 0 is always the joint identity.
    pub grains: Vec<GrainMapping>,
    pub bones: BonePairs,
}

impl Layout {
    pub fn new(
        name: &str,
        graph: SkeletonGraph,
        part_grains: &[Vec<Vec<usize>>],
        bones: Option<BonePairs>,
    ) -> Result<Self> {
        let v = graph.num_joints();
        let mut grains = vec![GrainMapping::identity(v)];
        for (i, parts) in part_grains.iter().enumerate() {
            grains.push(GrainMapping::from_parts(i + 1, v, parts)?);
        }
        let bones = match bones {
            Some(b) => {
                ensure!(
                    b.num_joints() == v,
                    Data,
                    "bone pairs cover {} joints, layout has {}",
                    b.num_joints(),
                    v
                );
                b
            }
            None => BonePairs::from_graph(&graph),
        };
        Ok(Self {
            name: name.to_string(),
            graph,
            grains,
            bones,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.graph.num_joints()
    }

    /// Built-in layouts by identifier.
    pub fn builtin(id: &str) -> Result<Self> {
        match id {
            "ntu25" => Ok(Self::ntu25()),
            "kinetics18" => Ok(Self::kinetics18()),
            "micro5" => Ok(Self::micro5()),
            other => Err(Error::Config(alloc::format!(
                "unknown layout '{}' (expected ntu25, kinetics18 or micro5)",
                other
            ))),
        }
    }

    /// Kinect v2 25-joint body (NTU RGB+D), center at the spine-shoulder joint.
    pub fn ntu25() -> Self {
        const EDGES: [(usize, usize); 24] = [
            (0, 1),
            (1, 20),
            (2, 20),
            (3, 2),
            (4, 20),
            (5, 4),
            (6, 5),
            (7, 6),
            (8, 20),
            (9, 8),
            (10, 9),
            (11, 10),
            (12, 0),
            (13, 12),
            (14, 13),
            (15, 14),
            (16, 0),
            (17, 16),
            (18, 17),
            (19, 18),
            (21, 22),
            (22, 7),
            (23, 24),
            (24, 11),
        ];
        let graph = SkeletonGraph::new(25, EDGES.to_vec(), 20).expect("valid built-in graph");
        let fine = vec![
            vec![2, 3, 20],
            vec![0, 1],
            vec![4, 5],
            vec![6, 7, 21, 22],
            vec![8, 9],
            vec![10, 11, 23, 24],
            vec![12, 13],
            vec![14, 15],
            vec![16, 17],
            vec![18, 19],
        ];
        let coarse = vec![
            vec![0, 1, 2, 3, 20],
            vec![4, 5, 6, 7, 21, 22],
            vec![8, 9, 10, 11, 23, 24],
            vec![12, 13, 14, 15],
            vec![16, 17, 18, 19],
        ];
        Self::new("ntu25", graph, &[fine, coarse], None).expect("valid built-in layout")
    }

    /// OpenPose 18-keypoint body (Kinetics skeletons), center at the neck.
    pub fn kinetics18() -> Self {
        const EDGES: [(usize, usize); 17] = [
            (4, 3),
            (3, 2),
            (7, 6),
            (6, 5),
            (13, 12),
            (12, 11),
            (10, 9),
            (9, 8),
            (11, 5),
            (8, 2),
            (5, 1),
            (2, 1),
            (0, 1),
            (15, 0),
            (14, 0),
            (17, 15),
            (16, 14),
        ];
        let graph = SkeletonGraph::new(18, EDGES.to_vec(), 1).expect("valid built-in graph");
        let coarse = vec![
            vec![0, 14, 15, 16, 17],
            vec![1, 8, 11],
            vec![5, 6, 7],
            vec![2, 3, 4],
            vec![9, 10, 12, 13],
        ];
        Self::new("kinetics18", graph, &[coarse], None).expect("valid built-in layout")
    }

    /// Five-joint toy body for fast checks: pelvis 0, torso 1 (center),
    /// two arms 2 and 3, one leg 4.
    pub fn micro5() -> Self {
        let graph = SkeletonGraph::new(5, vec![(0, 1), (1, 2), (1, 3), (0, 4)], 1)
            .expect("valid built-in graph");
        let fine = vec![vec![1], vec![2], vec![3], vec![0, 4]];
        let coarse = vec![vec![0, 1, 4], vec![2, 3]];
        Self::new("micro5", graph, &[fine, coarse], None).expect("valid built-in layout")
    }
}

/// Grain mappings of a built-in layout.
pub fn build_grain_mappings(layout_id: &str) -> Result<Vec<GrainMapping>> {
    Ok(Layout::builtin(layout_id)?.grains)
}
