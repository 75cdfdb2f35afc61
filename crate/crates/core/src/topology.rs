//! 3D-parallel rank geometry.
//!
//! Ranks are laid out TP-fastest, then PP, then DP:
//! `rank = dp * (pp_size * tp_size) + pp * tp_size + tp`. Machines host
//! consecutive blocks of `ranks_per_machine` ranks.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::TopologyError;

pub type Rank = usize;
pub type MachineId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelTopology {
    pub tp_size: usize,
    pub pp_size: usize,
    pub dp_size: usize,
    pub ranks_per_machine: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankCoord {
    pub tp: usize,
    pub pp: usize,
    pub dp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Axis {
    Tp,
    Pp,
    Dp,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Tp, Axis::Pp, Axis::Dp];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Tp => "TP",
            Axis::Pp => "PP",
            Axis::Dp => "DP",
        })
    }
}

/// One instance of a parallel group: ranks varying along `axis` with the
/// other two coordinates pinned by `anchor` (the anchor's own coordinate on
/// `axis` is ignored and normalized to zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupRef {
    pub axis: Axis,
    pub anchor: RankCoord,
}

impl GroupRef {
    pub fn of(axis: Axis, coord: RankCoord) -> Self {
        let mut anchor = coord;
        match axis {
            Axis::Tp => anchor.tp = 0,
            Axis::Pp => anchor.pp = 0,
            Axis::Dp => anchor.dp = 0,
        }
        GroupRef { axis, anchor }
    }

    pub fn contains(&self, coord: RankCoord) -> bool {
        match self.axis {
            Axis::Tp => coord.pp == self.anchor.pp && coord.dp == self.anchor.dp,
            Axis::Pp => coord.tp == self.anchor.tp && coord.dp == self.anchor.dp,
            Axis::Dp => coord.tp == self.anchor.tp && coord.pp == self.anchor.pp,
        }
    }
}

impl fmt::Display for GroupRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.anchor;
        match self.axis {
            Axis::Tp => write!(f, "TP(pp={},dp={})", a.pp, a.dp),
            Axis::Pp => write!(f, "PP(tp={},dp={})", a.tp, a.dp),
            Axis::Dp => write!(f, "DP(tp={},pp={})", a.tp, a.pp),
        }
    }
}

impl ParallelTopology {
    pub fn new(
        tp_size: usize,
        pp_size: usize,
        dp_size: usize,
        ranks_per_machine: usize,
    ) -> Result<Self, TopologyError> {
        let topo = ParallelTopology {
            tp_size,
            pp_size,
            dp_size,
            ranks_per_machine,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.tp_size == 0 || self.pp_size == 0 || self.dp_size == 0 {
            return Err(TopologyError::ZeroAxis);
        }
        if self.ranks_per_machine == 0 {
            return Err(TopologyError::ZeroRanksPerMachine);
        }
        if !self.rank_count().is_multiple_of(self.ranks_per_machine) {
            return Err(TopologyError::UnevenMachines {
                ranks: self.rank_count(),
                ranks_per_machine: self.ranks_per_machine,
            });
        }
        Ok(())
    }

    pub fn rank_count(&self) -> usize {
        self.tp_size * self.pp_size * self.dp_size
    }

    pub fn machine_count(&self) -> usize {
        self.rank_count() / self.ranks_per_machine
    }

    pub fn axis_size(&self, axis: Axis) -> usize {
        match axis {
            Axis::Tp => self.tp_size,
            Axis::Pp => self.pp_size,
            Axis::Dp => self.dp_size,
        }
    }

    fn check_rank(&self, rank: Rank) -> Result<(), TopologyError> {
        if rank >= self.rank_count() {
            return Err(TopologyError::RankOutOfRange {
                rank,
                total: self.rank_count(),
            });
        }
        Ok(())
    }

    pub fn rank_to_coord(&self, rank: Rank) -> Result<RankCoord, TopologyError> {
        self.check_rank(rank)?;
        let tp = rank % self.tp_size;
        let pp = (rank / self.tp_size) % self.pp_size;
        let dp = rank / (self.tp_size * self.pp_size);
        Ok(RankCoord { tp, pp, dp })
    }

    pub fn coord_to_rank(&self, c: RankCoord) -> Result<Rank, TopologyError> {
        if c.tp >= self.tp_size || c.pp >= self.pp_size || c.dp >= self.dp_size {
            return Err(TopologyError::CoordOutOfRange(c));
        }
        Ok(c.dp * self.pp_size * self.tp_size + c.pp * self.tp_size + c.tp)
    }

    pub fn machine_of(&self, rank: Rank) -> Result<MachineId, TopologyError> {
        self.check_rank(rank)?;
        Ok(rank / self.ranks_per_machine)
    }

    pub fn ranks_of(&self, machine: MachineId) -> std::ops::Range<Rank> {
        let start = machine * self.ranks_per_machine;
        start..start + self.ranks_per_machine
    }

    pub fn group_of(&self, axis: Axis, rank: Rank) -> Result<GroupRef, TopologyError> {
        Ok(GroupRef::of(axis, self.rank_to_coord(rank)?))
    }

    pub fn group_members(&self, g: GroupRef) -> Result<Vec<Rank>, TopologyError> {
        let a = g.anchor;
        if a.tp >= self.tp_size || a.pp >= self.pp_size || a.dp >= self.dp_size {
            return Err(TopologyError::CoordOutOfRange(a));
        }
        let members = (0..self.axis_size(g.axis))
            .map(|i| {
                let mut c = a;
                match g.axis {
                    Axis::Tp => c.tp = i,
                    Axis::Pp => c.pp = i,
                    Axis::Dp => c.dp = i,
                }
                c.dp * self.pp_size * self.tp_size + c.pp * self.tp_size + c.tp
            })
            .collect();
        Ok(members)
    }

    /// Machines hosting any member of `g`, ascending.
    pub fn group_machines(&self, g: GroupRef) -> Result<Vec<MachineId>, TopologyError> {
        let set: BTreeSet<MachineId> = self
            .group_members(g)?
            .into_iter()
            .map(|r| r / self.ranks_per_machine)
            .collect();
        Ok(set.into_iter().collect())
    }

    /// Every group instance on `axis`, in ascending anchor order.
    pub fn groups(&self, axis: Axis) -> Vec<GroupRef> {
        let mut out = Vec::new();
        for dp in 0..self.dp_size {
            for pp in 0..self.pp_size {
                for tp in 0..self.tp_size {
                    let c = RankCoord { tp, pp, dp };
                    let g = GroupRef::of(axis, c);
                    if g.anchor == c {
                        out.push(g);
                    }
                }
            }
        }
        out
    }

    /// Position of a PP group in `groups(Axis::Pp)` order.
    pub fn pp_group_index(&self, g: GroupRef) -> usize {
        g.anchor.dp * self.tp_size + g.anchor.tp
    }

    pub fn share_any_group(&self, a: Rank, b: Rank) -> Result<bool, TopologyError> {
        let ca = self.rank_to_coord(a)?;
        let cb = self.rank_to_coord(b)?;
        Ok(Axis::ALL.iter().any(|&ax| GroupRef::of(ax, ca).contains(cb)))
    }

    /// Smallest single-axis group covering all `outliers`.
    ///
    /// Among covering groups of equal size, PP wins over DP, and DP over TP.
    pub fn shared_group(&self, outliers: &BTreeSet<Rank>) -> Result<Option<GroupRef>, TopologyError> {
        let Some(&first) = outliers.iter().next() else {
            return Err(TopologyError::EmptyOutlierSet);
        };
        let c0 = self.rank_to_coord(first)?;
        let coords = outliers
            .iter()
            .map(|&r| self.rank_to_coord(r))
            .collect::<Result<Vec<_>, _>>()?;
        let preference = [Axis::Pp, Axis::Dp, Axis::Tp];
        let mut best: Option<(usize, usize, GroupRef)> = None;
        for (pref, &axis) in preference.iter().enumerate() {
            let g = GroupRef::of(axis, c0);
            if coords.iter().all(|&c| g.contains(c)) {
                let key = (self.axis_size(axis), pref);
                if best.is_none_or(|(s, p, _)| key < (s, p)) {
                    best = Some((key.0, key.1, g));
                }
            }
        }
        Ok(best.map(|(_, _, g)| g))
    }

    /// Machine-level variant of [`shared_group`](Self::shared_group): each
    /// machine is represented by its lowest rank, so a machine hosting a whole
    /// TP group counts as one member of the PP/DP grid.
    pub fn shared_group_for_machines(
        &self,
        machines: &BTreeSet<MachineId>,
    ) -> Result<Option<GroupRef>, TopologyError> {
        let reps: BTreeSet<Rank> = machines.iter().map(|&m| m * self.ranks_per_machine).collect();
        self.shared_group(&reps)
    }

    /// Checkpoint backup peer of `rank`.
    ///
    /// With `pp_size >= 2` and even `dp_size` the peer is
    /// `(tp, pp ^ 1, (dp + dp_size / 2) % dp_size)`, which shares no TP, PP or
    /// DP group with `rank`. Other shapes use the first greedy matching that
    /// respects the same constraint, then neighbouring-machine pairing.
    pub fn backup_peer(&self, rank: Rank) -> Result<Rank, TopologyError> {
        self.check_rank(rank)?;
        Ok(self.backup_plan()?.peer_of(rank))
    }

    pub fn backup_plan(&self) -> Result<BackupPlan, TopologyError> {
        if let Some(plan) = self.cross_group_rule() {
            return Ok(plan);
        }
        if let Some(plan) = self.greedy_matching() {
            return Ok(plan);
        }
        self.neighbor_matching()
    }

    fn cross_group_rule(&self) -> Option<BackupPlan> {
        if self.pp_size < 2 || !self.dp_size.is_multiple_of(2) || !self.pp_size.is_multiple_of(2) {
            return None;
        }
        let peers = (0..self.rank_count())
            .map(|r| {
                let c = self.rank_to_coord(r).expect("in range");
                let p = RankCoord {
                    tp: c.tp,
                    pp: c.pp ^ 1,
                    dp: (c.dp + self.dp_size / 2) % self.dp_size,
                };
                self.coord_to_rank(p).expect("in range")
            })
            .collect();
        Some(BackupPlan {
            peers,
            strategy: BackupStrategy::CrossGroup,
        })
    }

    fn greedy_matching(&self) -> Option<BackupPlan> {
        let n = self.rank_count();
        if !n.is_multiple_of(2) {
            return None;
        }
        let mut peers = vec![usize::MAX; n];
        for r in 0..n {
            if peers[r] != usize::MAX {
                continue;
            }
            let partner = (r + 1..n).find(|&s| {
                peers[s] == usize::MAX && !self.share_any_group(r, s).expect("in range")
            })?;
            peers[r] = partner;
            peers[partner] = r;
        }
        Some(BackupPlan {
            peers,
            strategy: BackupStrategy::GreedyMatching,
        })
    }

    fn neighbor_matching(&self) -> Result<BackupPlan, TopologyError> {
        let machines = self.machine_count();
        if machines < 2 || !machines.is_multiple_of(2) {
            return Err(TopologyError::NoBackupPeer { machines });
        }
        let rpm = self.ranks_per_machine;
        let peers = (0..self.rank_count())
            .map(|r| {
                let m = r / rpm;
                (m ^ 1) * rpm + r % rpm
            })
            .collect();
        Ok(BackupPlan {
            peers,
            strategy: BackupStrategy::NeighborMachine,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackupStrategy {
    CrossGroup,
    GreedyMatching,
    NeighborMachine,
}

/// A perfect matching of ranks to backup peers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackupPlan {
    peers: Vec<Rank>,
    pub strategy: BackupStrategy,
}

impl BackupPlan {
    pub fn peer_of(&self, rank: Rank) -> Rank {
        self.peers[rank]
    }

    pub fn peers(&self) -> &[Rank] {
        &self.peers
    }

    pub fn is_involution(&self) -> bool {
        self.peers
            .iter()
            .enumerate()
            .all(|(r, &p)| p != r && p < self.peers.len() && self.peers[p] == r)
    }

    /// Rank pairs that share a parallel group with their peer.
    pub fn violations(&self, topo: &ParallelTopology) -> Vec<(Rank, Rank)> {
        self.peers
            .iter()
            .enumerate()
            .filter(|&(r, &p)| topo.share_any_group(r, p).unwrap_or(true))
            .map(|(r, &p)| (r, p))
            .collect()
    }

    /// True when every machine's ranks back up onto exactly one other machine.
    pub fn is_machine_level(&self, topo: &ParallelTopology) -> bool {
        (0..topo.machine_count()).all(|m| {
            let targets: BTreeSet<MachineId> = topo
                .ranks_of(m)
                .map(|r| self.peers[r] / topo.ranks_per_machine)
                .collect();
            targets.len() == 1 && !targets.contains(&m)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_four() -> ParallelTopology {
        ParallelTopology::new(2, 4, 2, 2).unwrap()
    }

    // Enumeration oracle: walk the nested loops in layout order and number
    // each coordinate sequentially.
    fn enumerate_layout(t: &ParallelTopology) -> Vec<RankCoord> {
        let mut out = Vec::new();
        for dp in 0..t.dp_size {
            for pp in 0..t.pp_size {
                for tp in 0..t.tp_size {
                    out.push(RankCoord { tp, pp, dp });
                }
            }
        }
        out
    }

    #[test]
    fn rank_coordinates_follow_layout() {
        let t = two_by_four();
        let table = enumerate_layout(&t);
        assert_eq!(t.rank_to_coord(0).unwrap(), RankCoord { tp: 0, pp: 0, dp: 0 });
        assert_eq!(table[8], RankCoord { tp: 0, pp: 0, dp: 1 });
        assert_eq!(t.rank_to_coord(8).unwrap(), table[8]);
        assert_eq!(t.rank_to_coord(2).unwrap(), RankCoord { tp: 0, pp: 1, dp: 0 });
        for (r, c) in table.iter().enumerate() {
            assert_eq!(t.rank_to_coord(r).unwrap(), *c);
            assert_eq!(t.coord_to_rank(*c).unwrap(), r);
        }
    }

    #[test]
    fn out_of_range_rank_is_rejected() {
        let t = two_by_four();
        assert!(matches!(
            t.rank_to_coord(16),
            Err(TopologyError::RankOutOfRange { rank: 16, total: 16 })
        ));
    }

    #[test]
    fn invalid_topologies_are_rejected() {
        assert!(ParallelTopology::new(0, 1, 1, 1).is_err());
        assert!(ParallelTopology::new(2, 2, 2, 0).is_err());
        assert!(ParallelTopology::new(2, 3, 1, 4).is_err());
    }

    #[test]
    fn group_membership_matches_enumeration() {
        let t = two_by_four();
        let pp = t.group_of(Axis::Pp, 8).unwrap();
        assert_eq!(t.group_members(pp).unwrap(), vec![8, 10, 12, 14]);
        let tp = t.group_of(Axis::Tp, 2).unwrap();
        assert_eq!(t.group_members(tp).unwrap(), vec![2, 3]);
        let single = ParallelTopology::new(2, 2, 1, 1).unwrap();
        let dp = single.group_of(Axis::Dp, 0).unwrap();
        assert_eq!(single.group_members(dp).unwrap(), vec![0]);
    }

    #[test]
    fn shared_group_for_hung_pipeline() {
        // TP=2, PP=4, DP=4, one TP group per machine: machines 12..=15 are
        // the last pipeline replica.
        let t = ParallelTopology::new(2, 4, 4, 2).unwrap();
        let machines: BTreeSet<MachineId> = (12..16).collect();
        let g = t.shared_group_for_machines(&machines).unwrap().unwrap();
        assert_eq!(g.axis, Axis::Pp);
        assert_eq!(t.group_machines(g).unwrap(), vec![12, 13, 14, 15]);
        // All eight ranks span both TP columns, so no rank-level group covers them.
        let all: BTreeSet<Rank> = (12..16).flat_map(|m| t.ranks_of(m)).collect();
        assert!(t.shared_group(&all).unwrap().is_none());
    }

    #[test]
    fn shared_group_singleton_prefers_smallest_axis() {
        let t = two_by_four();
        let g = t.shared_group(&BTreeSet::from([7])).unwrap().unwrap();
        // TP and DP both have size 2; DP wins the tie.
        assert_eq!(g.axis, Axis::Dp);
        let t = ParallelTopology::new(2, 4, 4, 2).unwrap();
        assert_eq!(t.shared_group(&BTreeSet::from([7])).unwrap().unwrap().axis, Axis::Tp);
        let eq = ParallelTopology::new(2, 2, 2, 1).unwrap();
        let g = eq.shared_group(&BTreeSet::from([7])).unwrap().unwrap();
        assert_eq!(g.axis, Axis::Pp);
    }

    #[test]
    fn shared_group_absent_matches_brute_force() {
        let t = ParallelTopology::new(2, 2, 2, 1).unwrap();
        for mask in 1u32..(1 << 8) {
            let set: BTreeSet<Rank> = (0..8).filter(|r| mask & (1 << r) != 0).collect();
            let brute: Vec<GroupRef> = Axis::ALL
                .iter()
                .flat_map(|&ax| t.groups(ax))
                .filter(|&g| {
                    let m = t.group_members(g).unwrap();
                    set.iter().all(|r| m.contains(r))
                })
                .collect();
            match t.shared_group(&set).unwrap() {
                Some(g) => {
                    assert!(brute.contains(&g));
                    let min = brute.iter().map(|g| t.axis_size(g.axis)).min().unwrap();
                    assert_eq!(t.axis_size(g.axis), min);
                }
                None => assert!(brute.is_empty(), "{set:?}"),
            }
        }
    }

    #[test]
    fn small_job_backup_pairs() {
        let t = two_by_four();
        assert_eq!(t.backup_peer(8).unwrap(), 2);
        assert_eq!(t.backup_peer(9).unwrap(), 3);
        assert_eq!(t.backup_peer(2).unwrap(), 8);
        let plan = t.backup_plan().unwrap();
        assert_eq!(plan.strategy, BackupStrategy::CrossGroup);
        assert!(plan.is_involution());
        assert!(plan.violations(&t).is_empty());
        assert!(plan.is_machine_level(&t));
    }

    #[test]
    fn pure_dp_falls_back_to_neighbors() {
        let t = ParallelTopology::new(1, 1, 4, 1).unwrap();
        let plan = t.backup_plan().unwrap();
        assert_eq!(plan.strategy, BackupStrategy::NeighborMachine);
        assert_eq!(plan.peers(), &[1, 0, 3, 2]);
    }

    #[test]
    fn odd_dp_uses_greedy_matching() {
        let t = ParallelTopology::new(2, 2, 3, 2).unwrap();
        let plan = t.backup_plan().unwrap();
        assert_eq!(plan.strategy, BackupStrategy::GreedyMatching);
        assert!(plan.is_involution());
        assert!(plan.violations(&t).is_empty());
    }

    #[test]
    fn single_machine_has_no_peer() {
        let t = ParallelTopology::new(2, 1, 1, 2).unwrap();
        assert!(matches!(t.backup_plan(), Err(TopologyError::NoBackupPeer { machines: 1 })));
    }
}
