//! UPGMA clustering and dendrogram cuts.
//!
//! Distances are `1 - similarity`. After merging clusters `A` and `B`, the
//! distance to any other cluster `C` is the size-weighted mean
//! `(|A|·d(A,C) + |B|·d(B,C)) / (|A| + |B|)`.
//!
//! Ties between equally distant pairs are broken canonically: every cluster
//! is keyed by its smallest scanner address, and among minimal pairs the one
//! with the lexicographically least `(smaller key, larger key)` merges first.
//! The result is therefore independent of the order in which scanners were
//! supplied.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::{self, Write};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::similarity::{condensed_index, SimilarityMatrix};

/// Default similarity cutoff.
pub const DEFAULT_CUTOFF: f64 = 0.15;

/// One agglomeration step. Node ids follow the usual convention: leaves are
/// `0..n` in matrix order, the cluster created by step `k` is `n + k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    /// Node holding the smaller canonical key.
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    leaves: Vec<IpAddr>,
    merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn leaves(&self) -> &[IpAddr] {
        &self.leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Leaf labels as comment lines, then `left, right, distance, size` per
    /// merge.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (i, ip) in self.leaves.iter().enumerate() {
            writeln!(out, "#leaf\t{i}\t{ip}")?;
        }
        writeln!(out, "left\tright\tdistance\tsize")?;
        for m in &self.merges {
            writeln!(out, "{}\t{}\t{}\t{}", m.left, m.right, m.distance, m.size)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: f64,
    slot: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.slot.cmp(&other.slot))
    }
}

/// Working state. Slots are leaf ranks in address order, and a merged
/// cluster keeps the slot of its lower-ranked half, so a slot index doubles
/// as the cluster's canonical key.
struct Upgma {
    n: usize,
    dist: Vec<f64>,
    size: Vec<usize>,
    active: Vec<bool>,
    node: Vec<usize>,
    /// Best partner among active slots above this one, ties to the lowest slot.
    nn: Vec<usize>,
    /// Exact when `!stale`, otherwise a lower bound.
    mindist: Vec<f64>,
    stale: Vec<bool>,
    heap: BinaryHeap<Reverse<Candidate>>,
}

impl Upgma {
    fn d(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.dist[condensed_index(self.n, a, b)]
    }

    fn set_d(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let n = self.n;
        self.dist[condensed_index(n, a, b)] = v;
    }

    /// Exact nearest partner of `i` among active slots above it.
    fn rescan(&mut self, i: usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in i + 1..self.n {
            if self.active[j] {
                let d = self.d(i, j);
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        self.nn[i] = best.1;
        self.mindist[i] = best.0;
        self.stale[i] = false;
        if best.1 != usize::MAX {
            self.heap.push(Reverse(Candidate {
                dist: best.0,
                slot: i,
            }));
        }
    }

    /// Pops the globally least `(distance, low slot, high slot)` pair.
    fn pop_pair(&mut self) -> (usize, usize, f64) {
        loop {
            let Reverse(c) = self.heap.pop().expect("active pairs remain");
            let i = c.slot;
            if !self.active[i]
                || self.nn[i] == usize::MAX
                || c.dist.to_bits() != self.mindist[i].to_bits()
            {
                continue;
            }
            if self.stale[i] {
                self.rescan(i);
                continue;
            }
            return (i, self.nn[i], self.mindist[i]);
        }
    }

    fn merge(&mut self, a: usize, b: usize) {
        let (sa, sb) = (self.size[a] as f64, self.size[b] as f64);
        for k in 0..self.n {
            if k != a && k != b && self.active[k] {
                let v = (sa * self.d(a, k) + sb * self.d(b, k)) / (sa + sb);
                self.set_d(a, k, v);
            }
        }
        self.active[b] = false;
        self.size[a] += self.size[b];

        for k in 0..b {
            if !self.active[k] || k == a {
                continue;
            }
            if k < a {
                let new = self.d(k, a);
                if new < self.mindist[k] {
                    self.nn[k] = a;
                    self.mindist[k] = new;
                    self.stale[k] = false;
                    self.heap.push(Reverse(Candidate { dist: new, slot: k }));
                } else if self.nn[k] == a || self.nn[k] == b {
                    if !self.stale[k] && new == self.mindist[k] {
                        self.nn[k] = a;
                    } else {
                        self.stale[k] = true;
                    }
                } else if !self.stale[k] && new == self.mindist[k] && a < self.nn[k] {
                    self.nn[k] = a;
                }
            } else if self.nn[k] == b {
                // a < k < b: only lost a candidate, the stored distance stays a lower bound.
                self.stale[k] = true;
            }
        }
        self.rescan(a);
    }
}

/// Average-linkage clustering over `1 - similarity`.
///
/// Nearest-partner bookkeeping with a lazily updated priority queue: at most
/// `O(n²)` memory for the distance triangle and typically `O(n² log n)` time.
pub fn upgma(m: &SimilarityMatrix) -> Dendrogram {
    let n = m.len();
    let ids = m.ids();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| ids[i]);

    let mut dist = vec![0.0; n * n.saturating_sub(1) / 2];
    for r in 0..n {
        for s in r + 1..n {
            dist[condensed_index(n, r, s)] = 1.0 - m.get(order[r], order[s]);
        }
    }

    let mut state = Upgma {
        n,
        dist,
        size: vec![1; n],
        active: vec![true; n],
        node: order.clone(),
        nn: vec![usize::MAX; n],
        mindist: vec![f64::INFINITY; n],
        stale: vec![false; n],
        heap: BinaryHeap::with_capacity(n),
    };
    for i in 0..n {
        state.rescan(i);
    }

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut last = f64::NEG_INFINITY;
    for step in 0..n.saturating_sub(1) {
        let (a, b, d) = state.pop_pair();
        // Rounding in the weighted mean can undershoot the previous height
        // by an ulp; heights are kept non-decreasing.
        let height = d.max(last);
        last = height;
        merges.push(Merge {
            left: state.node[a],
            right: state.node[b],
            distance: height,
            size: state.size[a] + state.size[b],
        });
        state.merge(a, b);
        state.node[a] = n + step;
    }

    Dendrogram {
        leaves: ids.to_vec(),
        merges,
    }
}

/// A group of scanners produced by a cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Sorted by address.
    pub members: Vec<IpAddr>,
    /// Lowest merge similarity inside the cluster; `None` for singletons.
    pub formation_similarity: Option<f64>,
}

/// Applies every merge with distance `<= 1 - t` and returns the resulting
/// groups, ordered by their smallest member.
pub fn cut(dg: &Dendrogram, t: f64) -> Vec<Cluster> {
    let n = dg.len();
    let threshold = 1.0 - t;
    let mut parent: Vec<usize> = (0..n).collect();
    let mut worst: Vec<Option<f64>> = vec![None; n];
    // Any leaf inside a node serves as its representative.
    let mut rep: Vec<usize> = (0..n).collect();
    rep.reserve(dg.merges.len());

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    for m in &dg.merges {
        let (ra, rb) = (rep[m.left], rep[m.right]);
        rep.push(ra);
        if m.distance > threshold {
            continue;
        }
        let (x, y) = (find(&mut parent, ra), find(&mut parent, rb));
        let w = [worst[x], worst[y], Some(m.distance)]
            .into_iter()
            .flatten()
            .fold(f64::NEG_INFINITY, f64::max);
        parent[y] = x;
        worst[x] = Some(w);
    }

    let mut groups: std::collections::BTreeMap<usize, Vec<IpAddr>> = Default::default();
    for leaf in 0..n {
        let root = find(&mut parent, leaf);
        groups.entry(root).or_default().push(dg.leaves[leaf]);
    }
    let mut clusters: Vec<Cluster> = groups
        .into_iter()
        .map(|(root, mut members)| {
            members.sort_unstable();
            Cluster {
                formation_similarity: if members.len() > 1 {
                    worst[root].map(|d| 1.0 - d)
                } else {
                    None
                },
                members,
            }
        })
        .collect();
    clusters.sort_by_key(|c| c.members[0]);
    clusters
}

/// A cluster of at least two coordinated scanners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub members: Vec<IpAddr>,
    pub formation_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CampaignSplit {
    pub campaigns: Vec<Campaign>,
    pub standalone: Vec<IpAddr>,
}

impl CampaignSplit {
    pub fn distributed_scanners(&self) -> usize {
        self.campaigns.iter().map(|c| c.members.len()).sum()
    }

    /// Share of scanners that belong to some campaign; 0 without scanners.
    pub fn distributed_fraction(&self) -> f64 {
        let distributed = self.distributed_scanners();
        let total = distributed + self.standalone.len();
        if total == 0 {
            0.0
        } else {
            distributed as f64 / total as f64
        }
    }
}

/// Clusters with two or more members become campaigns, singletons are
/// standalone scanners.
pub fn extract_campaigns(clusters: Vec<Cluster>) -> CampaignSplit {
    let mut split = CampaignSplit::default();
    for c in clusters {
        match c.formation_similarity {
            Some(sim) if c.members.len() >= 2 => split.campaigns.push(Campaign {
                members: c.members,
                formation_similarity: sim,
            }),
            _ => split.standalone.extend(c.members),
        }
    }
    split.standalone.sort_unstable();
    split
}

/// Cluster count for each cutoff in `grid`, in grid order.
///
/// Merge heights are sorted, so each cut is a binary search.
pub fn sweep_threshold(dg: &Dendrogram, grid: &[f64]) -> Vec<(f64, usize)> {
    grid.iter()
        .map(|&t| {
            let applied = dg.merges.partition_point(|m| m.distance <= 1.0 - t);
            (t, dg.len() - applied)
        })
        .collect()
}
