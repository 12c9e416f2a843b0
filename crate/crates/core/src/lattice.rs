//! Torus geometry: sites, L∞ balls, block partitions, and minimal
//! lattice-animal weights over blocks.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;

/// The torus `(Z/nZ)^d`. Immutable once constructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusShape {
    d: usize,
    n: usize,
}

/// A lattice site, stored as a flat index in `[0, n^d)`.
///
/// Coordinate `0` is the fastest-varying axis: flat = c0 + c1*n + c2*n^2 + ...
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site(pub usize);

impl TorusShape {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParam("dimension must be >= 1".into()));
        }
        if n < 2 {
            return Err(Error::InvalidParam("side length must be >= 2".into()));
        }
        let mut sites: u64 = 1;
        for _ in 0..d {
            sites = sites
                .checked_mul(n as u64)
                .filter(|&s| s <= usize::MAX as u64)
                .ok_or(Error::TooLarge {
                    what: "site count n^d",
                    got: u64::MAX,
                    limit: usize::MAX as u64,
                })?;
        }
        Ok(TorusShape { d, n })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_sites(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn coords(&self, v: Site) -> Vec<usize> {
        let mut rem = v.0;
        (0..self.d)
            .map(|_| {
                let c = rem % self.n;
                rem /= self.n;
                c
            })
            .collect()
    }

    /// Site from coordinates, reduced mod n per axis.
    pub fn site(&self, coords: &[usize]) -> Site {
        assert_eq!(coords.len(), self.d);
        let mut flat = 0;
        for &c in coords.iter().rev() {
            flat = flat * self.n + (c % self.n);
        }
        Site(flat)
    }

    /// Step one lattice unit along `axis` in direction `dir` (+1 or -1).
    pub fn step(&self, v: Site, axis: usize, dir: i8) -> Site {
        let stride = self.n.pow(axis as u32);
        let c = (v.0 / stride) % self.n;
        let c2 = if dir > 0 {
            if c + 1 == self.n {
                0
            } else {
                c + 1
            }
        } else if c == 0 {
            self.n - 1
        } else {
            c - 1
        };
        Site(v.0 + stride * c2 - stride * c)
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> {
        (0..self.num_sites()).map(Site)
    }

    /// Distance on one periodic axis.
    fn axis_dist(&self, a: usize, b: usize) -> usize {
        let diff = a.abs_diff(b);
        diff.min(self.n - diff)
    }

    /// L∞ (Chebyshev) distance on the torus.
    pub fn dist_linf(&self, a: Site, b: Site) -> usize {
        let (mut ra, mut rb, mut best) = (a.0, b.0, 0usize);
        for _ in 0..self.d {
            best = best.max(self.axis_dist(ra % self.n, rb % self.n));
            ra /= self.n;
            rb /= self.n;
        }
        best
    }

    /// L1 distance on the torus.
    pub fn dist_l1(&self, a: Site, b: Site) -> usize {
        let (mut ra, mut rb, mut sum) = (a.0, b.0, 0usize);
        for _ in 0..self.d {
            sum += self.axis_dist(ra % self.n, rb % self.n);
            ra /= self.n;
            rb /= self.n;
        }
        sum
    }
}

/// A duplicate-free, sorted set of sites.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Region(Vec<Site>);

impl Region {
    pub fn new(mut sites: Vec<Site>) -> Self {
        sites.sort_unstable();
        sites.dedup();
        Region(sites)
    }

    pub fn from_site(v: Site) -> Self {
        Region(vec![v])
    }

    pub fn sites(&self) -> &[Site] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, v: Site) -> bool {
        self.0.binary_search(&v).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = Site> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset_of(&self, other: &Region) -> bool {
        self.iter().all(|v| other.contains(v))
    }

    pub fn union(&self, other: &Region) -> Region {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Region::new(v)
    }

    pub fn intersects(&self, other: &Region) -> bool {
        let (small, big) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.iter().any(|v| big.contains(v))
    }
}

impl FromIterator<Site> for Region {
    fn from_iter<T: IntoIterator<Item = Site>>(iter: T) -> Self {
        Region::new(iter.into_iter().collect())
    }
}

/// Nearest neighbors of a site. On the 2-cycle both lattice directions hit
/// the same vertex; `degenerate` marks that collapse (heat-bath sums must
/// still count that neighbor twice; see [`neighbor_multiset`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    pub region: Region,
    pub degenerate: bool,
}

/// The 2d sites at L1 distance 1, deduplicated.
pub fn neighbors(shape: &TorusShape, v: Site) -> Neighbors {
    let region = Region::new(neighbor_multiset(shape, v));
    Neighbors {
        degenerate: region.len() < 2 * shape.d(),
        region,
    }
}

/// The neighbor multiset (always `2d` entries, with repeats when n = 2),
/// as consumed by heat-bath spin sums.
pub fn neighbor_multiset(shape: &TorusShape, v: Site) -> Vec<Site> {
    let mut sites = Vec::with_capacity(2 * shape.d());
    for axis in 0..shape.d() {
        sites.push(shape.step(v, axis, 1));
        sites.push(shape.step(v, axis, -1));
    }
    sites
}

/// Precomputed adjacency (neighbor multiset per site) for hot loops.
#[derive(Clone, Debug)]
pub struct NeighborTable {
    deg: usize,
    flat: Vec<u32>,
}

impl NeighborTable {
    pub fn new(shape: &TorusShape) -> Self {
        let deg = 2 * shape.d();
        let n_sites = shape.num_sites();
        assert!(n_sites <= u32::MAX as usize, "site count exceeds u32 range");
        let mut flat = Vec::with_capacity(deg * n_sites);
        for v in shape.sites() {
            for w in neighbor_multiset(shape, v) {
                flat.push(w.0 as u32);
            }
        }
        NeighborTable { deg, flat }
    }

    #[inline]
    pub fn of(&self, v: Site) -> &[u32] {
        &self.flat[v.0 * self.deg..(v.0 + 1) * self.deg]
    }

    pub fn degree(&self) -> usize {
        self.deg
    }
}

/// `{x : min_{v in A} ||x - v||_inf <= floor(r)}` on the torus.
pub fn ball(shape: &TorusShape, a: &Region, r: f64) -> Region {
    let radius = r.max(0.0).floor() as usize;
    if radius == 0 {
        return a.clone();
    }
    let d = shape.d();
    let n = shape.n() as isize;
    let width = 2 * radius + 1;
    let mut out = Vec::new();
    let mut offs = vec![0usize; d];
    let mut coord = vec![0usize; d];
    for &v in a.sites() {
        let center = shape.coords(v);
        offs.iter_mut().for_each(|o| *o = 0);
        'odometer: loop {
            for axis in 0..d {
                let delta = offs[axis] as isize - radius as isize;
                coord[axis] = ((center[axis] as isize + delta).rem_euclid(n)) as usize;
            }
            out.push(shape.site(&coord));
            let mut axis = 0;
            loop {
                offs[axis] += 1;
                if offs[axis] < width {
                    break;
                }
                offs[axis] = 0;
                axis += 1;
                if axis == d {
                    break 'odometer;
                }
            }
        }
    }
    Region::new(out)
}

/// Flat index of a block in the block grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub usize);

/// Partition of the torus into axis-aligned blocks of side `side`.
/// `side` must divide `n` so that the blocks tile the torus exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    shape: TorusShape,
    side: usize,
}

impl BlockGrid {
    pub fn new(shape: TorusShape, side: usize) -> Result<Self> {
        if side == 0 || shape.n() % side != 0 {
            return Err(Error::InvalidParam(format!(
                "block side {side} must divide n = {}",
                shape.n()
            )));
        }
        Ok(BlockGrid { shape, side })
    }

    /// Largest admissible side `<= wanted` (>= 1 always exists).
    pub fn adjusted_side(shape: TorusShape, wanted: usize) -> usize {
        let mut side = wanted.clamp(1, shape.n());
        while shape.n() % side != 0 {
            side -= 1;
        }
        side
    }

    pub fn shape(&self) -> TorusShape {
        self.shape
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Blocks per axis.
    pub fn blocks_per_axis(&self) -> usize {
        self.shape.n() / self.side
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks_per_axis().pow(self.shape.d() as u32)
    }

    pub fn block_of(&self, v: Site) -> BlockId {
        let nb = self.blocks_per_axis();
        let mut rem = v.0;
        let mut flat = 0;
        let mut stride = 1;
        for _ in 0..self.shape.d() {
            let c = rem % self.shape.n();
            rem /= self.shape.n();
            flat += (c / self.side) * stride;
            stride *= nb;
        }
        BlockId(flat)
    }

    pub fn block_coords(&self, b: BlockId) -> Vec<usize> {
        let nb = self.blocks_per_axis();
        let mut rem = b.0;
        (0..self.shape.d())
            .map(|_| {
                let c = rem % nb;
                rem /= nb;
                c
            })
            .collect()
    }

    fn block_axis_dist(&self, a: usize, b: usize) -> usize {
        let nb = self.blocks_per_axis();
        let diff = a.abs_diff(b);
        diff.min(nb - diff)
    }

    /// L1 distance in the block torus.
    pub fn block_dist_l1(&self, a: BlockId, b: BlockId) -> usize {
        let (ca, cb) = (self.block_coords(a), self.block_coords(b));
        ca.iter()
            .zip(&cb)
            .map(|(&x, &y)| self.block_axis_dist(x, y))
            .sum()
    }

    /// Same block or L∞-adjacent blocks (diagonals count).
    pub fn blocks_adjacent(&self, a: BlockId, b: BlockId) -> bool {
        let (ca, cb) = (self.block_coords(a), self.block_coords(b));
        ca.iter()
            .zip(&cb)
            .all(|(&x, &y)| self.block_axis_dist(x, y) <= 1)
    }

    /// L1 neighbors of a block in the block torus, deduplicated.
    pub fn block_neighbors(&self, b: BlockId) -> Vec<BlockId> {
        let nb = self.blocks_per_axis();
        let coords = self.block_coords(b);
        let mut out = Vec::with_capacity(2 * self.shape.d());
        for axis in 0..self.shape.d() {
            for dir in [1isize, -1] {
                let mut c = coords.clone();
                c[axis] = ((c[axis] as isize + dir).rem_euclid(nb as isize)) as usize;
                let mut flat = 0;
                let mut stride = 1;
                for &cc in &c {
                    flat += cc * stride;
                    stride *= nb;
                }
                out.push(BlockId(flat));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Minimal set of blocks covering a region.
    pub fn cover(&self, a: &Region) -> Vec<BlockId> {
        let mut blocks: Vec<BlockId> = a.iter().map(|v| self.block_of(v)).collect();
        blocks.sort_unstable();
        blocks.dedup();
        blocks
    }
}

/// Result of a lattice-animal weight computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnimalWeight {
    pub weight: usize,
    pub exact: bool,
}

const ANIMAL_EXACT_TERMINALS: usize = 8;
const ANIMAL_EXACT_VERTICES: usize = 4096;

/// W(S): the smallest number of blocks in a connected block set containing S.
///
/// Exact (Steiner-tree DP over terminal subsets) when |S| <= 8 and the search
/// neighborhood holds at most 4096 blocks; otherwise a greedy upper bound
/// with `exact = false`.
pub fn min_animal_weight(grid: &BlockGrid, s: &[BlockId]) -> Result<AnimalWeight> {
    let mut terms: Vec<BlockId> = s.to_vec();
    terms.sort_unstable();
    terms.dedup();
    if terms.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if terms.len() == 1 {
        return Ok(AnimalWeight {
            weight: 1,
            exact: true,
        });
    }
    let upper = greedy_animal_weight(grid, &terms);
    if terms.len() > ANIMAL_EXACT_TERMINALS {
        return Ok(AnimalWeight {
            weight: upper,
            exact: false,
        });
    }
    // Any optimal animal contains terms[0] and has at most `upper` blocks,
    // so it lives inside the L1 ball of radius upper-1 around terms[0].
    let verts = l1_ball_blocks(grid, terms[0], upper.saturating_sub(1));
    if verts.len() > ANIMAL_EXACT_VERTICES {
        return Ok(AnimalWeight {
            weight: upper,
            exact: false,
        });
    }
    let weight = steiner_tree_nodes(grid, &verts, &terms);
    debug_assert!(weight <= upper);
    Ok(AnimalWeight {
        weight,
        exact: true,
    })
}

/// W2(S): minimum over covers S = S1 ∪ S2 of W(S1) + W(S2), with W(∅) = 0.
/// Exhaustive over bipartitions when |S| <= 8; otherwise falls back to the
/// trivial cover (S, ∅) and is flagged inexact.
pub fn min_animal_weight_2(grid: &BlockGrid, s: &[BlockId]) -> Result<AnimalWeight> {
    let mut terms: Vec<BlockId> = s.to_vec();
    terms.sort_unstable();
    terms.dedup();
    if terms.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let whole = min_animal_weight(grid, &terms)?;
    if terms.len() > ANIMAL_EXACT_TERMINALS {
        return Ok(AnimalWeight {
            weight: whole.weight,
            exact: false,
        });
    }
    // Monotonicity of W makes disjoint bipartitions sufficient among covers.
    let m = terms.len();
    let mut best = whole;
    for split in 1..(1usize << (m - 1)) {
        let (mut s1, mut s2) = (Vec::new(), Vec::new());
        for (i, &b) in terms.iter().enumerate() {
            if i == 0 || split & (1 << (i - 1)) == 0 {
                s1.push(b);
            } else {
                s2.push(b);
            }
        }
        if s2.is_empty() {
            continue;
        }
        let w1 = min_animal_weight(grid, &s1)?;
        let w2 = min_animal_weight(grid, &s2)?;
        let cand = AnimalWeight {
            weight: w1.weight + w2.weight,
            exact: w1.exact && w2.exact,
        };
        if cand.weight < best.weight || (cand.weight == best.weight && cand.exact && !best.exact) {
            best = cand;
        }
    }
    Ok(best)
}

fn l1_ball_blocks(grid: &BlockGrid, center: BlockId, radius: usize) -> Vec<BlockId> {
    // BFS in the block torus
    let total = grid.num_blocks();
    let mut dist = vec![usize::MAX; total];
    let mut queue = std::collections::VecDeque::new();
    dist[center.0] = 0;
    queue.push_back(center);
    let mut out = vec![center];
    while let Some(b) = queue.pop_front() {
        if dist[b.0] == radius {
            continue;
        }
        for nb in grid.block_neighbors(b) {
            if dist[nb.0] == usize::MAX {
                dist[nb.0] = dist[b.0] + 1;
                out.push(nb);
                queue.push_back(nb);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Greedy Steiner-style upper bound: attach the nearest remaining terminal
/// to the growing animal via an axis-by-axis shortest block path.
fn greedy_animal_weight(grid: &BlockGrid, terms: &[BlockId]) -> usize {
    let mut animal: Vec<BlockId> = vec![terms[0]];
    let mut remaining: Vec<BlockId> = terms[1..].to_vec();
    while !remaining.is_empty() {
        let mut best: Option<(usize, usize, BlockId)> = None;
        for (i, &t) in remaining.iter().enumerate() {
            let d = animal
                .iter()
                .map(|&a| grid.block_dist_l1(a, t))
                .min()
                .unwrap();
            if best.map_or(true, |(bd, _, bt)| d < bd || (d == bd && t < bt)) {
                best = Some((d, i, t));
            }
        }
        let (_, idx, t) = best.unwrap();
        remaining.swap_remove(idx);
        let anchor = *animal
            .iter()
            .min_by_key(|&&a| (grid.block_dist_l1(a, t), a))
            .unwrap();
        let nb = grid.blocks_per_axis() as isize;
        let mut cur = grid.block_coords(anchor);
        let goal = grid.block_coords(t);
        for axis in 0..cur.len() {
            while cur[axis] != goal[axis] {
                let fwd = (goal[axis] as isize - cur[axis] as isize).rem_euclid(nb);
                let step = if fwd <= nb - fwd { 1 } else { -1 };
                cur[axis] = ((cur[axis] as isize + step).rem_euclid(nb)) as usize;
                let mut flat = 0;
                let mut stride = 1;
                for &cc in &cur {
                    flat += cc * stride;
                    stride *= grid.blocks_per_axis();
                }
                if !animal.contains(&BlockId(flat)) {
                    animal.push(BlockId(flat));
                }
            }
        }
    }
    animal.len()
}

/// Exact minimum node count of a connected subgraph of the block torus
/// containing all terminals: Dreyfus-Wagner subset DP with unit edge weights
/// (nodes = edges + 1 on the optimal tree).
fn steiner_tree_nodes(grid: &BlockGrid, verts: &[BlockId], terms: &[BlockId]) -> usize {
    let k = terms.len();
    let nv = verts.len();
    let index_of = |b: BlockId| verts.binary_search(&b).ok();
    let full = (1usize << k) - 1;
    const INF: u32 = u32::MAX / 4;
    let mut dp = vec![vec![INF; nv]; full + 1];
    for (i, &t) in terms.iter().enumerate() {
        let vi = index_of(t).expect("terminal inside search ball");
        dp[1 << i][vi] = 0;
    }
    let adj: Vec<Vec<usize>> = verts
        .iter()
        .map(|&b| {
            grid.block_neighbors(b)
                .into_iter()
                .filter_map(index_of)
                .collect()
        })
        .collect();
    for mask in 1..=full {
        // merge sub-trees meeting at a common vertex
        let mut sub = (mask - 1) & mask;
        while sub > 0 {
            let other = mask ^ sub;
            if sub <= other {
                break; // each unordered pair once
            }
            for v in 0..nv {
                let cand = dp[sub][v].saturating_add(dp[other][v]);
                if cand < dp[mask][v] {
                    dp[mask][v] = cand;
                }
            }
            sub = (sub - 1) & mask;
        }
        // Dijkstra relaxation over unit edges
        let mut heap: BinaryHeap<std::cmp::Reverse<(u32, usize)>> = dp[mask]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c < INF)
            .map(|(v, &c)| std::cmp::Reverse((c, v)))
            .collect();
        while let Some(std::cmp::Reverse((c, v))) = heap.pop() {
            if c > dp[mask][v] {
                continue;
            }
            for &w in &adj[v] {
                if c + 1 < dp[mask][w] {
                    dp[mask][w] = c + 1;
                    heap.push(std::cmp::Reverse((c + 1, w)));
                }
            }
        }
    }
    let edges = *dp[full].iter().min().unwrap();
    edges as usize + 1
}
