//! Token orderings for the scan branches.
//!
//! Tokens of a `T×J` grid live at canonical index `t·J + j`. Each branch
//! gathers the tokens into its own sequence order before the SSM and
//! scatters the result back afterwards, so backward scans need no separate
//! code path.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Kinematic tree with mirror pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    /// `parents[j]` is the parent joint; the root is its own parent.
    pub parents: Vec<usize>,
    /// `(left, right)` joint pairs swapped by horizontal mirroring.
    pub left_right_pairs: Vec<(usize, usize)>,
}

const H36M_NAMES: [&str; 17] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

impl Skeleton {
    /// The 17-joint Human3.6M layout.
    pub fn h36m() -> Self {
        Self {
            names: H36M_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15],
            left_right_pairs: vec![(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)],
        }
    }

    /// Four limb chains of [`Skeleton::h36m`]: right leg, left leg, left arm, right arm.
    pub fn h36m_limb_chains() -> [[usize; 3]; 4] {
        [[1, 2, 3], [4, 5, 6], [11, 12, 13], [14, 15, 16]]
    }

    pub fn new(names: Vec<String>, parents: Vec<usize>, left_right_pairs: Vec<(usize, usize)>) -> Result<Self> {
        let s = Self {
            names,
            parents,
            left_right_pairs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Checks the tree is connected and rooted at joint 0, and that the
    /// mirror pairs form an involution.
    pub fn validate(&self) -> Result<()> {
        let j = self.parents.len();
        if j == 0 {
            return Err(PoseError::Structure("skeleton has no joints".into()));
        }
        if self.names.len() != j {
            return Err(PoseError::Structure(format!(
                "{} names for {j} joints",
                self.names.len()
            )));
        }
        if self.parents[0] != 0 {
            return Err(PoseError::Structure("joint 0 must be the root".into()));
        }
        for (i, &p) in self.parents.iter().enumerate().skip(1) {
            if p >= j || p == i {
                return Err(PoseError::Structure(format!("joint {i} has invalid parent {p}")));
            }
        }
        let visited = self.depth_first_from_root().len();
        if visited != j {
            return Err(PoseError::Structure(format!(
                "skeleton is disconnected: {visited} of {j} joints reachable from the root"
            )));
        }
        self.mirror_map()?;
        Ok(())
    }

    /// `mirror[j]` is the joint `j` swaps with (itself if unpaired).
    pub fn mirror_map(&self) -> Result<Vec<usize>> {
        let j = self.parents.len();
        let mut map: Vec<usize> = (0..j).collect();
        for &(l, r) in &self.left_right_pairs {
            if l >= j || r >= j || l == r {
                return Err(PoseError::Structure(format!("invalid mirror pair ({l}, {r})")));
            }
            if map[l] != l || map[r] != r {
                return Err(PoseError::Structure(format!(
                    "joint in pair ({l}, {r}) is paired twice"
                )));
            }
            map[l] = r;
            map[r] = l;
        }
        Ok(map)
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .skip(1)
            .filter(move |&(_, &p)| p == joint)
            .map(|(i, _)| i)
    }

    /// Pre-order walk from joint 0, children visited in index order.
    fn depth_first_from_root(&self) -> Vec<usize> {
        let j = self.parents.len();
        let mut seen = vec![false; j];
        let mut order = Vec::with_capacity(j);
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            if seen[node] {
                continue;
            }
            seen[node] = true;
            order.push(node);
            let kids: Vec<usize> = self.children(node).collect();
            stack.extend(kids.into_iter().rev());
        }
        order
    }

    /// Within-frame joint order of the local spatial scan: each limb chain
    /// appears contiguously.
    pub fn kinematic_order(&self) -> Result<Vec<usize>> {
        self.validate()?;
        Ok(self.depth_first_from_root())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let s: Skeleton = serde_json::from_str(&text).map_err(|e| PoseError::Parse {
            path: path.to_path_buf(),
            record: 0,
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("skeleton serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Which traversal an order encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrderLabel {
    GlobalSpatialFwd,
    GlobalSpatialBwd,
    LocalSpatialFwd,
    LocalSpatialBwd,
    TemporalFwd,
    TemporalBwd,
    /// Branch `branch` of unidirectional ablation variant `variant` (1..=4).
    UniVariant {
        variant: u8,
        branch: u8,
    },
}

impl OrderLabel {
    pub fn is_backward(self) -> bool {
        matches!(
            self,
            OrderLabel::GlobalSpatialBwd | OrderLabel::LocalSpatialBwd | OrderLabel::TemporalBwd
        )
    }

    pub fn flipped(self) -> Self {
        use OrderLabel::*;
        match self {
            GlobalSpatialFwd => GlobalSpatialBwd,
            GlobalSpatialBwd => GlobalSpatialFwd,
            LocalSpatialFwd => LocalSpatialBwd,
            LocalSpatialBwd => LocalSpatialFwd,
            TemporalFwd => TemporalBwd,
            TemporalBwd => TemporalFwd,
            other => other,
        }
    }
}

/// A permutation of the `T·J` token indices: position `i` of the branch
/// sequence holds canonical token `perm[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOrder {
    perm: Arc<[usize]>,
    inv: Arc<[usize]>,
    pub label: OrderLabel,
}

impl ScanOrder {
    pub fn from_perm(perm: Vec<usize>, label: OrderLabel) -> Result<Self> {
        let n = perm.len();
        let mut inv = vec![usize::MAX; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inv[p] != usize::MAX {
                return Err(PoseError::Structure(format!(
                    "not a permutation: entry {p} at position {i}"
                )));
            }
            inv[p] = i;
        }
        Ok(Self {
            perm: perm.into(),
            inv: inv.into(),
            label,
        })
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let n = self.perm.len();
        let mut seen = vec![false; n];
        for &p in self.perm.iter() {
            if p >= n || seen[p] {
                return false;
            }
            seen[p] = true;
        }
        self.perm.iter().enumerate().all(|(i, &p)| self.inv[p] == i)
    }
}

fn check_grid(t: usize, j: usize) -> Result<()> {
    if t == 0 || j == 0 {
        return Err(PoseError::Parameter(format!("token grid {t}×{j} is empty")));
    }
    Ok(())
}

fn frame_major(t: usize, within: &[usize], label: OrderLabel) -> Result<ScanOrder> {
    let j = within.len();
    let perm = (0..t).flat_map(|f| within.iter().map(move |&jj| f * j + jj)).collect();
    ScanOrder::from_perm(perm, label)
}

/// Frame by frame, joints `0..J` within each frame (the identity).
pub fn global_spatial_order(t: usize, j: usize) -> Result<ScanOrder> {
    check_grid(t, j)?;
    let within: Vec<usize> = (0..j).collect();
    frame_major(t, &within, OrderLabel::GlobalSpatialFwd)
}

/// Frame by frame, joints in kinematic-chain order within each frame.
pub fn local_spatial_order(t: usize, j: usize, skeleton: &Skeleton) -> Result<ScanOrder> {
    check_grid(t, j)?;
    if skeleton.joint_count() != j {
        return Err(PoseError::Config(format!(
            "skeleton has {} joints, grid has {j}",
            skeleton.joint_count()
        )));
    }
    let within = skeleton.kinematic_order()?;
    frame_major(t, &within, OrderLabel::LocalSpatialFwd)
}

/// Joint by joint, frames `0..T` for each joint: `perm[j·T + t] = t·J + j`.
pub fn temporal_order(t: usize, j: usize) -> Result<ScanOrder> {
    check_grid(t, j)?;
    let perm = (0..j).flat_map(|jj| (0..t).map(move |f| f * j + jj)).collect();
    ScanOrder::from_perm(perm, OrderLabel::TemporalFwd)
}

/// The same tokens visited end to end in the opposite direction.
pub fn reverse_order(o: &ScanOrder) -> ScanOrder {
    let perm: Vec<usize> = o.perm.iter().rev().copied().collect();
    ScanOrder::from_perm(perm, o.label.flipped()).expect("reversal of a permutation")
}

fn relabel(o: ScanOrder, variant: u8, branch: u8) -> ScanOrder {
    ScanOrder {
        label: OrderLabel::UniVariant { variant, branch },
        ..o
    }
}

/// Branches of unidirectional ablation variant `k`: one spatial and one
/// temporal scan, each in a single direction. The four variants enumerate
/// the direction pairs (→,→), (→,←), (←,→), (←,←).
pub fn unidirectional_variant(k: u8, t: usize, j: usize) -> Result<Vec<ScanOrder>> {
    let (spatial_back, temporal_back) = match k {
        1 => (false, false),
        2 => (false, true),
        3 => (true, false),
        4 => (true, true),
        other => {
            return Err(PoseError::Parameter(format!(
                "unidirectional variant must be 1..=4, got {other}"
            )))
        }
    };
    let pick = |o: ScanOrder, back: bool| if back { reverse_order(&o) } else { o };
    let spatial = pick(global_spatial_order(t, j)?, spatial_back);
    let temporal = pick(temporal_order(t, j)?, temporal_back);
    Ok(vec![relabel(spatial, k, 0), relabel(temporal, k, 1)])
}

/// Scan strategy of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchSet {
    /// Global-spatial, local-spatial and temporal scans, both directions.
    #[default]
    BidirectionalGlobalLocal,
    /// Global-spatial and temporal scans, both directions.
    Bidirectional,
    #[serde(rename = "uni_1")]
    Uni1,
    #[serde(rename = "uni_2")]
    Uni2,
    #[serde(rename = "uni_3")]
    Uni3,
    #[serde(rename = "uni_4")]
    Uni4,
}

impl BranchSet {
    pub const ALL: [BranchSet; 6] = [
        BranchSet::Uni1,
        BranchSet::Uni2,
        BranchSet::Uni3,
        BranchSet::Uni4,
        BranchSet::Bidirectional,
        BranchSet::BidirectionalGlobalLocal,
    ];

    pub fn branch_count(self) -> usize {
        match self {
            BranchSet::BidirectionalGlobalLocal => 6,
            BranchSet::Bidirectional => 4,
            _ => 2,
        }
    }

    /// Row label used in ablation tables.
    pub fn table_label(self) -> &'static str {
        match self {
            BranchSet::Uni1 => "Unidirectional Spatial-Temporal 1",
            BranchSet::Uni2 => "Unidirectional Spatial-Temporal 2",
            BranchSet::Uni3 => "Unidirectional Spatial-Temporal 3",
            BranchSet::Uni4 => "Unidirectional Spatial-Temporal 4",
            BranchSet::Bidirectional => "Bidirectional Spatial-Temporal",
            BranchSet::BidirectionalGlobalLocal => "Bidirectional Global-Local Spatial-Temporal",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            BranchSet::BidirectionalGlobalLocal => "bidirectional_global_local",
            BranchSet::Bidirectional => "bidirectional",
            BranchSet::Uni1 => "uni_1",
            BranchSet::Uni2 => "uni_2",
            BranchSet::Uni3 => "uni_3",
            BranchSet::Uni4 => "uni_4",
        }
    }

    /// Orders for every branch, in parameter order.
    pub fn orders(self, t: usize, j: usize, skeleton: &Skeleton) -> Result<Vec<ScanOrder>> {
        let bidir = |o: ScanOrder| {
            let r = reverse_order(&o);
            [o, r]
        };
        match self {
            BranchSet::BidirectionalGlobalLocal => {
                let mut v = Vec::with_capacity(6);
                v.extend(bidir(global_spatial_order(t, j)?));
                v.extend(bidir(local_spatial_order(t, j, skeleton)?));
                v.extend(bidir(temporal_order(t, j)?));
                Ok(v)
            }
            BranchSet::Bidirectional => {
                let mut v = Vec::with_capacity(4);
                v.extend(bidir(global_spatial_order(t, j)?));
                v.extend(bidir(temporal_order(t, j)?));
                Ok(v)
            }
            BranchSet::Uni1 => unidirectional_variant(1, t, j),
            BranchSet::Uni2 => unidirectional_variant(2, t, j),
            BranchSet::Uni3 => unidirectional_variant(3, t, j),
            BranchSet::Uni4 => unidirectional_variant(4, t, j),
        }
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for BranchSet {
    type Err = PoseError;

    fn from_str(s: &str) -> Result<Self> {
        BranchSet::ALL
            .into_iter()
            .find(|b| b.key() == s)
            .ok_or_else(|| PoseError::Config(format!("unknown branch set `{s}`")))
    }
}

fn check_rows<T: Scalar>(x: &Tensor<T>, o: &ScanOrder) -> Result<()> {
    if x.ndim() < 2 || x.shape()[0] != o.len() {
        return Err(PoseError::Dimension(format!(
            "tensor {:?} does not have {} leading rows",
            x.shape(),
            o.len()
        )));
    }
    Ok(())
}

fn gather<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = x.len() / x.shape()[0];
    let mut out = Vec::with_capacity(x.len());
    for &i in idx {
        out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(x.shape(), out).expect("gather keeps shape")
}

/// Reorders the leading axis of `x` into scan order.
pub fn apply_order<T: Scalar>(x: &Tensor<T>, o: &ScanOrder) -> Result<Tensor<T>> {
    check_rows(x, o)?;
    Ok(gather(x, &o.perm))
}

/// Undoes [`apply_order`].
pub fn invert_order<T: Scalar>(y: &Tensor<T>, o: &ScanOrder) -> Result<Tensor<T>> {
    check_rows(y, o)?;
    Ok(gather(y, &o.inv))
}

/// Graph version of [`apply_order`] for `x[T·J × d]`.
pub fn apply_order_var<T: Scalar>(g: &mut Graph<T>, x: Var, o: &ScanOrder) -> Result<Var> {
    if g.shape(x)[0] != o.len() {
        return Err(PoseError::Dimension(format!(
            "tensor {:?} does not have {} leading rows",
            g.shape(x),
            o.len()
        )));
    }
    g.gather_rows(x, o.perm.clone())
}

/// Graph version of [`invert_order`].
pub fn invert_order_var<T: Scalar>(g: &mut Graph<T>, y: Var, o: &ScanOrder) -> Result<Var> {
    if g.shape(y)[0] != o.len() {
        return Err(PoseError::Dimension(format!(
            "tensor {:?} does not have {} leading rows",
            g.shape(y),
            o.len()
        )));
    }
    g.gather_rows(y, o.inv.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn global_examples() {
        assert_eq!(global_spatial_order(1, 3).unwrap().perm(), &[0, 1, 2]);
        let o = global_spatial_order(2, 2).unwrap();
        assert_eq!(o.perm(), &[0, 1, 2, 3]);
        assert_eq!(o.inv(), o.perm());
    }

    #[test]
    fn temporal_examples() {
        assert_eq!(temporal_order(2, 3).unwrap().perm(), &[0, 3, 1, 4, 2, 5]);
        assert_eq!(temporal_order(1, 5).unwrap().perm(), &[0, 1, 2, 3, 4]);
        assert_eq!(temporal_order(4, 1).unwrap().perm(), &[0, 1, 2, 3]);
    }

    #[test]
    fn local_order_on_small_trees() {
        let chain = Skeleton::new(vec!["a".into(), "b".into(), "c".into()], vec![0, 0, 1], vec![]).unwrap();
        assert_eq!(local_spatial_order(1, 3, &chain).unwrap().perm(), &[0, 1, 2]);

        let star = Skeleton::new((0..4).map(|i| i.to_string()).collect(), vec![0, 0, 0, 0], vec![(1, 2)]).unwrap();
        // independent depth-first walk over the explicit adjacency
        fn dfs(adj: &[Vec<usize>], node: usize, out: &mut Vec<usize>) {
            out.push(node);
            for &c in &adj[node] {
                dfs(adj, c, out);
            }
        }
        let adj = vec![vec![1, 2, 3], vec![], vec![], vec![]];
        let mut expected = Vec::new();
        dfs(&adj, 0, &mut expected);
        assert_eq!(expected, vec![0, 1, 2, 3]);
        assert_eq!(local_spatial_order(1, 4, &star).unwrap().perm(), &expected[..]);
    }

    #[test]
    fn h36m_limb_chains_are_contiguous() {
        let s = Skeleton::h36m();
        let within = s.kinematic_order().unwrap();
        for chain in Skeleton::h36m_limb_chains() {
            let pos: Vec<usize> = chain
                .iter()
                .map(|j| within.iter().position(|w| w == j).unwrap())
                .collect();
            assert!(pos.windows(2).all(|w| w[1] == w[0] + 1), "{chain:?} at {pos:?}");
        }
        assert_eq!(within, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn disconnected_skeleton_is_rejected() {
        let r = Skeleton::new((0..4).map(|i| i.to_string()).collect(), vec![0, 0, 3, 2], vec![]);
        assert!(matches!(r, Err(PoseError::Structure(_))));
        let r = Skeleton::new(vec!["a".into(), "b".into()], vec![0, 0], vec![(0, 1), (1, 0)]);
        assert!(matches!(r, Err(PoseError::Structure(_))));
    }

    #[test]
    fn mirror_map_is_an_involution() {
        let s = Skeleton::h36m();
        let m = s.mirror_map().unwrap();
        for j in 0..17 {
            assert_eq!(m[m[j]], j);
        }
        assert_eq!(m[1], 4);
        assert_eq!(m[0], 0);
    }

    #[test]
    fn reverse_examples() {
        let o = global_spatial_order(1, 4).unwrap();
        let r = reverse_order(&o);
        assert_eq!(r.perm(), &[3, 2, 1, 0]);
        assert_eq!(r.label, OrderLabel::GlobalSpatialBwd);
        assert!(r.is_bijection());
        assert_eq!(reverse_order(&r), o);
    }

    #[test]
    fn unidirectional_variants() {
        let sets: Vec<Vec<ScanOrder>> = (1..=4).map(|k| unidirectional_variant(k, 3, 5).unwrap()).collect();
        for (i, a) in sets.iter().enumerate() {
            assert_eq!(a.len(), 2);
            assert!(a.iter().all(|o| o.is_bijection() && !o.label.is_backward()));
            for b in &sets[i + 1..] {
                let pa: Vec<&[usize]> = a.iter().map(|o| o.perm()).collect();
                let pb: Vec<&[usize]> = b.iter().map(|o| o.perm()).collect();
                assert_ne!(pa, pb);
            }
        }
        assert!(unidirectional_variant(0, 3, 5).is_err());
        assert!(unidirectional_variant(5, 3, 5).is_err());
    }

    #[test]
    fn branch_set_counts_and_parse() {
        let s = Skeleton::h36m();
        for b in BranchSet::ALL {
            assert_eq!(b.orders(4, 17, &s).unwrap().len(), b.branch_count());
            assert_eq!(b.key().parse::<BranchSet>().unwrap(), b);
        }
        assert!("diagonal".parse::<BranchSet>().is_err());
    }

    #[test]
    fn apply_invert_examples() {
        let x = Tensor::<f64>::new(&[4, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let id = global_spatial_order(2, 2).unwrap();
        assert_eq!(apply_order(&x, &id).unwrap(), x);
        let r = reverse_order(&id);
        let y = apply_order(&x, &r).unwrap();
        assert_eq!(y.data(), &[6.0, 7.0, 4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
        assert!(apply_order(&Tensor::<f64>::zeros(&[3, 2]), &id).is_err());
    }

    #[test]
    fn spatial_orders_share_frame_structure() {
        let s = Skeleton::h36m();
        let (t, j) = (5, 17);
        let g = global_spatial_order(t, j).unwrap();
        let l = local_spatial_order(t, j, &s).unwrap();
        for i in 0..t * j {
            assert_eq!(g.perm()[i] / j, l.perm()[i] / j);
        }
    }

    proptest! {
        #[test]
        fn orders_are_bijections_and_round_trip(t in 1usize..40, j in 1usize..20, seed in 0u64..1000) {
            let s = Skeleton::new(
                (0..j).map(|i| i.to_string()).collect(),
                (0..j).map(|i| if i == 0 { 0 } else { (seed as usize + i) % i }).collect(),
                vec![],
            ).unwrap();
            let mut orders = vec![
                global_spatial_order(t, j).unwrap(),
                local_spatial_order(t, j, &s).unwrap(),
                temporal_order(t, j).unwrap(),
            ];
            for k in 1..=4 {
                orders.extend(unidirectional_variant(k, t, j).unwrap());
            }
            let x = Tensor::<f64>::new(
                &[t * j, 3],
                (0..t * j * 3).map(|v| (v as f64 * 0.37 + seed as f64).sin()).collect(),
            ).unwrap();
            for o in &orders {
                prop_assert!(o.is_bijection());
                let r = reverse_order(o);
                prop_assert!(r.is_bijection());
                let n = o.len();
                for i in 0..n {
                    prop_assert_eq!(r.perm()[i], o.perm()[n - 1 - i]);
                }
                let y = apply_order(&x, o).unwrap();
                prop_assert_eq!(&invert_order(&y, o).unwrap(), &x);
                // apply(reverse(o)) is apply(o) reversed along the rows
                let yr = apply_order(&x, &r).unwrap();
                for i in 0..n {
                    prop_assert_eq!(&yr.data()[i * 3..i * 3 + 3], &y.data()[(n - 1 - i) * 3..(n - i) * 3]);
                }
            }
        }
    }
}
