//! Torus lattice, block hierarchy, polymers, connectivity, small sets and
//! coordinate patches.
//!
//! Conventions: sites are linear indices into `[0, L^N)^d` (row-major, axis 0
//! slowest). A `j`-block is identified by the linear index of its cell in the
//! block grid of side `L^{N-j}`; its canonical name is the base-L coordinate
//! vector of its minimal corner. Connectivity of sets is `dist_inf <= 1` on
//! sites (diagonal touching counts), lifted to blocks through the minimal
//! inter-block site distance.

use crate::error::{Result, RgError};
use std::collections::{BTreeSet, VecDeque};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TorusLattice {
    pub d: usize,
    pub l: u32,
    pub n_scales: u32,
    side: i64,
    volume: usize,
}

impl TorusLattice {
    pub fn new(d: usize, l: u32, n_scales: u32) -> Result<Self> {
        if d == 0 {
            return Err(RgError::InvalidLattice("dimension must be >= 1".into()));
        }
        if l < 2 {
            return Err(RgError::InvalidLattice("block side L must be >= 2".into()));
        }
        if n_scales < 1 {
            return Err(RgError::InvalidLattice("need at least one scale".into()));
        }
        let side = (l as i64).pow(n_scales);
        let volume = (side as u128).pow(d as u32);
        if volume > 1 << 26 {
            return Err(RgError::InvalidLattice(format!(
                "torus with {volume} sites is beyond desk scale"
            )));
        }
        Ok(TorusLattice {
            d,
            l,
            n_scales,
            side,
            volume: volume as usize,
        })
    }

    pub fn side(&self) -> i64 {
        self.side
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn coords(&self, site: usize) -> Vec<i64> {
        let mut c = vec![0i64; self.d];
        let mut rest = site as i64;
        for a in (0..self.d).rev() {
            c[a] = rest % self.side;
            rest /= self.side;
        }
        c
    }

    /// Linear index of the site with the given coordinates, wrapped onto the torus.
    pub fn site(&self, coords: &[i64]) -> usize {
        debug_assert_eq!(coords.len(), self.d);
        let mut idx = 0i64;
        for &c in coords {
            idx = idx * self.side + c.rem_euclid(self.side);
        }
        idx as usize
    }

    pub fn sites(&self) -> impl Iterator<Item = usize> {
        0..self.volume
    }

    /// Torus sup-distance between two sites. Digit arithmetic instead of
    /// materialised coordinate vectors; this sits in every kernel evaluation.
    pub fn dist_inf(&self, x: usize, y: usize) -> i64 {
        let mut rx = x as i64;
        let mut ry = y as i64;
        let mut m = 0;
        for _ in 0..self.d {
            let delta = (rx % self.side - ry % self.side).rem_euclid(self.side);
            m = m.max(delta.min(self.side - delta));
            rx /= self.side;
            ry /= self.side;
        }
        m
    }

    /// Shift a site by an offset vector (wrapping).
    pub fn shift(&self, site: usize, offset: &[i64]) -> usize {
        debug_assert_eq!(offset.len(), self.d);
        let mut rest = site as i64;
        let mut idx = 0i64;
        let mut mult = 1i64;
        for a in (0..self.d).rev() {
            let c = (rest % self.side + offset[a]).rem_euclid(self.side);
            idx += c * mult;
            mult *= self.side;
            rest /= self.side;
        }
        idx as usize
    }

    pub fn block_side(&self, j: u32) -> i64 {
        (self.l as i64).pow(j)
    }

    /// Number of blocks per axis at scale j.
    pub fn blocks_per_axis(&self, j: u32) -> i64 {
        (self.l as i64).pow(self.n_scales - j)
    }

    pub fn num_blocks(&self, j: u32) -> usize {
        (self.blocks_per_axis(j) as u128).pow(self.d as u32) as usize
    }

    pub fn check_scale(&self, j: u32) -> Result<()> {
        if j > self.n_scales {
            return Err(RgError::ScaleOutOfRange {
                j,
                n: self.n_scales,
            });
        }
        Ok(())
    }

    /// Block-grid coordinates of a block.
    pub fn block_grid_coords(&self, j: u32, block: usize) -> Vec<i64> {
        let nb = self.blocks_per_axis(j);
        let mut c = vec![0i64; self.d];
        let mut rest = block as i64;
        for a in (0..self.d).rev() {
            c[a] = rest % nb;
            rest /= nb;
        }
        c
    }

    fn block_from_grid(&self, j: u32, grid: &[i64]) -> usize {
        let nb = self.blocks_per_axis(j);
        let mut idx = 0i64;
        for &c in grid {
            idx = idx * nb + c.rem_euclid(nb);
        }
        idx as usize
    }

    /// Minimal-corner site coordinates of a block (its canonical identifier).
    pub fn block_corner(&self, j: u32, block: usize) -> Vec<i64> {
        let s = self.block_side(j);
        self.block_grid_coords(j, block)
            .into_iter()
            .map(|c| c * s)
            .collect()
    }

    pub fn block_of_site(&self, j: u32, site: usize) -> usize {
        let s = self.block_side(j);
        let grid: Vec<i64> = self.coords(site).into_iter().map(|c| c / s).collect();
        self.block_from_grid(j, &grid)
    }

    pub fn block_sites(&self, j: u32, block: usize) -> Vec<usize> {
        let s = self.block_side(j);
        let corner = self.block_corner(j, block);
        let mut out = Vec::with_capacity((s as usize).pow(self.d as u32));
        let mut offset = vec![0i64; self.d];
        loop {
            let coords: Vec<i64> = corner.iter().zip(&offset).map(|(c, o)| c + o).collect();
            out.push(self.site(&coords));
            let mut a = self.d;
            loop {
                if a == 0 {
                    return out;
                }
                a -= 1;
                offset[a] += 1;
                if offset[a] < s {
                    break;
                }
                offset[a] = 0;
            }
        }
    }

    /// Minimal site `dist_inf` between two blocks, possibly at different scales.
    pub fn block_dist(&self, j1: u32, b1: usize, j2: u32, b2: usize) -> i64 {
        let c1 = self.block_corner(j1, b1);
        let c2 = self.block_corner(j2, b2);
        let s1 = self.block_side(j1);
        let s2 = self.block_side(j2);
        let mut m = 0;
        for a in 0..self.d {
            let fwd = (c2[a] - c1[a]).rem_euclid(self.side) - (s1 - 1);
            let bwd = (c1[a] - c2[a]).rem_euclid(self.side) - (s2 - 1);
            m = m.max(fwd.min(bwd).max(0));
        }
        m
    }

    pub fn blocks_adjacent(&self, j: u32, b1: usize, b2: usize) -> bool {
        self.block_dist(j, b1, j, b2) <= 1
    }

    /// The scale-(j+1) block containing a scale-j block.
    pub fn parent_block(&self, j: u32, block: usize) -> usize {
        let grid = self.block_grid_coords(j, block);
        let parent: Vec<i64> = grid.into_iter().map(|c| c / self.l as i64).collect();
        self.block_from_grid(j + 1, &parent)
    }

    /// The scale-j blocks inside a scale-(j+1) block.
    pub fn child_blocks(&self, j_parent: u32, block: usize) -> Vec<usize> {
        let j = j_parent - 1;
        let grid = self.block_grid_coords(j_parent, block);
        let l = self.l as i64;
        let base: Vec<i64> = grid.into_iter().map(|c| c * l).collect();
        let mut out = Vec::with_capacity((l as usize).pow(self.d as u32));
        let mut offset = vec![0i64; self.d];
        loop {
            let g: Vec<i64> = base.iter().zip(&offset).map(|(c, o)| c + o).collect();
            out.push(self.block_from_grid(j, &g));
            let mut a = self.d;
            loop {
                if a == 0 {
                    return out;
                }
                a -= 1;
                offset[a] += 1;
                if offset[a] < l {
                    break;
                }
                offset[a] = 0;
            }
        }
    }

    /// The full partition of the torus into scale-j blocks.
    pub fn blocks(&self, j: u32) -> Result<Vec<Polymer>> {
        self.check_scale(j)?;
        Ok((0..self.num_blocks(j))
            .map(|b| Polymer::single(j, b))
            .collect())
    }
}

/// A union of j-blocks, stored canonically as a sorted block set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Polymer {
    pub scale: u32,
    pub blocks: BTreeSet<usize>,
}

impl Polymer {
    pub fn empty(scale: u32) -> Self {
        Polymer {
            scale,
            blocks: BTreeSet::new(),
        }
    }

    pub fn single(scale: u32, block: usize) -> Self {
        Polymer {
            scale,
            blocks: [block].into(),
        }
    }

    pub fn from_blocks(scale: u32, blocks: impl IntoIterator<Item = usize>) -> Self {
        Polymer {
            scale,
            blocks: blocks.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn union(&self, other: &Polymer) -> Polymer {
        debug_assert_eq!(self.scale, other.scale);
        Polymer {
            scale: self.scale,
            blocks: self.blocks.union(&other.blocks).copied().collect(),
        }
    }

    pub fn difference(&self, other: &Polymer) -> Polymer {
        debug_assert_eq!(self.scale, other.scale);
        Polymer {
            scale: self.scale,
            blocks: self.blocks.difference(&other.blocks).copied().collect(),
        }
    }

    pub fn contains_block(&self, b: usize) -> bool {
        self.blocks.contains(&b)
    }

    pub fn is_subset(&self, other: &Polymer) -> bool {
        self.blocks.is_subset(&other.blocks)
    }

    pub fn intersects(&self, other: &Polymer) -> bool {
        self.blocks.intersection(&other.blocks).next().is_some()
    }

    pub fn sites(&self, torus: &TorusLattice) -> Vec<usize> {
        let mut out = Vec::new();
        for &b in &self.blocks {
            out.extend(torus.block_sites(self.scale, b));
        }
        out.sort_unstable();
        out
    }

    /// Minimal site distance between two polymers (same or different scales).
    pub fn dist(&self, other: &Polymer, torus: &TorusLattice) -> Option<i64> {
        let mut m: Option<i64> = None;
        for &a in &self.blocks {
            for &b in &other.blocks {
                let d = torus.block_dist(self.scale, a, other.scale, b);
                m = Some(m.map_or(d, |x| x.min(d)));
            }
        }
        m
    }

    pub fn is_disconnected_from(&self, other: &Polymer, torus: &TorusLattice) -> bool {
        match self.dist(other, torus) {
            Some(d) => d > 1,
            None => true,
        }
    }

    /// Maximal dist_inf-connected pieces.
    pub fn components(&self, torus: &TorusLattice) -> Vec<Polymer> {
        let blocks: Vec<usize> = self.blocks.iter().copied().collect();
        let mut seen = vec![false; blocks.len()];
        let mut out = Vec::new();
        for start in 0..blocks.len() {
            if seen[start] {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                comp.insert(blocks[i]);
                for k in 0..blocks.len() {
                    if !seen[k] && torus.blocks_adjacent(self.scale, blocks[i], blocks[k]) {
                        seen[k] = true;
                        queue.push_back(k);
                    }
                }
            }
            out.push(Polymer {
                scale: self.scale,
                blocks: comp,
            });
        }
        out
    }

    pub fn is_connected(&self, torus: &TorusLattice) -> bool {
        self.components(torus).len() <= 1
    }

    pub fn is_small(&self, torus: &TorusLattice) -> bool {
        !self.is_empty() && self.len() <= 1 << torus.d && self.is_connected(torus)
    }

    /// Smallest (j+1)-polymer containing this polymer.
    pub fn closure(&self, torus: &TorusLattice) -> Result<Polymer> {
        if self.scale >= torus.n_scales {
            return Err(RgError::ScaleOutOfRange {
                j: self.scale + 1,
                n: torus.n_scales,
            });
        }
        Ok(Polymer {
            scale: self.scale + 1,
            blocks: self
                .blocks
                .iter()
                .map(|&b| torus.parent_block(self.scale, b))
                .collect(),
        })
    }

    /// View a polymer at scale j as the polymer of its scale-k blocks (k <= j).
    pub fn refine(&self, torus: &TorusLattice, k: u32) -> Polymer {
        assert!(k <= self.scale);
        let mut cur = self.clone();
        while cur.scale > k {
            let mut blocks = BTreeSet::new();
            for &b in &cur.blocks {
                blocks.extend(torus.child_blocks(cur.scale, b));
            }
            cur = Polymer {
                scale: cur.scale - 1,
                blocks,
            };
        }
        cur
    }

    /// Small set neighbourhood: the union of all small sets intersecting X.
    ///
    /// A block belongs to X^square iff it is within block-graph distance
    /// 2^d - 1 of X, since small sets are connected chains of at most 2^d
    /// blocks.
    pub fn small_set_neighbourhood(&self, torus: &TorusLattice) -> Polymer {
        let radius = (1usize << torus.d) - 1;
        let all = torus.num_blocks(self.scale);
        let mut dist = vec![usize::MAX; all];
        let mut queue = VecDeque::new();
        for &b in &self.blocks {
            dist[b] = 0;
            queue.push_back(b);
        }
        let mut out = self.blocks.clone();
        while let Some(b) = queue.pop_front() {
            if dist[b] == radius {
                continue;
            }
            for c in 0..all {
                if dist[c] == usize::MAX && torus.blocks_adjacent(self.scale, b, c) {
                    dist[c] = dist[b] + 1;
                    out.insert(c);
                    queue.push_back(c);
                }
            }
        }
        Polymer {
            scale: self.scale,
            blocks: out,
        }
    }
}

/// Filter used by [`enumerate_polymers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolymerFilter {
    All,
    Connected,
    Small,
}

/// All polymers built from the given region blocks, in deterministic
/// (bitmask) order. Refuses regions larger than `cap` blocks.
pub fn enumerate_polymers(
    torus: &TorusLattice,
    scale: u32,
    region: &[usize],
    filter: PolymerFilter,
    cap: usize,
) -> Result<Vec<Polymer>> {
    if region.len() > cap {
        return Err(RgError::EnumerationCap {
            count: region.len(),
            cap,
        });
    }
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << region.len()) {
        let poly = Polymer::from_blocks(
            scale,
            region
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, &b)| b),
        );
        let keep = match filter {
            PolymerFilter::All => true,
            PolymerFilter::Connected => !poly.is_empty() && poly.is_connected(torus),
            PolymerFilter::Small => poly.is_small(torus),
        };
        if keep {
            out.push(poly);
        }
    }
    Ok(out)
}

/// All connected block sets of size <= max_size containing `block`.
/// Brute-force oracle used by tests against [`Polymer::small_set_neighbourhood`].
pub fn connected_sets_containing(
    torus: &TorusLattice,
    scale: u32,
    block: usize,
    max_size: usize,
) -> Vec<BTreeSet<usize>> {
    let all = torus.num_blocks(scale);
    let mut out = Vec::new();
    // Grow connected sets one adjacent block at a time, deduplicating.
    let mut seen: BTreeSet<BTreeSet<usize>> = BTreeSet::new();
    let mut frontier: Vec<BTreeSet<usize>> = vec![[block].into()];
    seen.insert([block].into());
    out.push(frontier[0].clone());
    for _ in 1..max_size {
        let mut next = Vec::new();
        for set in &frontier {
            for c in 0..all {
                if set.contains(&c) {
                    continue;
                }
                if set
                    .iter()
                    .any(|&b| torus.blocks_adjacent(scale, b, c))
                {
                    let mut bigger = set.clone();
                    bigger.insert(c);
                    if seen.insert(bigger.clone()) {
                        out.push(bigger.clone());
                        next.push(bigger);
                    }
                }
            }
        }
        frontier = next;
    }
    out
}

/// An unwrapping of a region of the torus into integer coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub anchor: Vec<i64>,
    pub side: i64,
    /// Anchored patches centre the representative window on the anchor and
    /// may wrap; genuine patches never do.
    pub centered: bool,
}

impl Patch {
    /// Coordinates of a site relative to the patch anchor.
    pub fn coords(&self, torus: &TorusLattice, site: usize) -> Vec<i64> {
        let c = torus.coords(site);
        let half = self.side / 2;
        c.iter()
            .zip(&self.anchor)
            .map(|(&x, &a)| {
                if self.centered {
                    (x - a + half).rem_euclid(self.side) - half
                } else {
                    (x - a).rem_euclid(self.side)
                }
            })
            .collect()
    }

    pub fn shifted(&self, offset: &[i64], torus: &TorusLattice) -> Patch {
        Patch {
            anchor: self
                .anchor
                .iter()
                .zip(offset)
                .map(|(&a, &o)| (a + o).rem_euclid(torus.side()))
                .collect(),
            side: self.side,
            centered: self.centered,
        }
    }

    /// Deterministic fallback unwrapping centred at an anchor site. Exact
    /// whenever a genuine patch around the anchor exists.
    pub fn anchored(torus: &TorusLattice, anchor_site: usize) -> Patch {
        Patch {
            anchor: torus.coords(anchor_site),
            side: torus.side(),
            centered: true,
        }
    }
}

/// Isometric unwrapping of a site set, if it fits inside a hypercube of side
/// <= L^N - 1 without wrapping. Returns the offending axis otherwise.
pub fn coordinate_patch(torus: &TorusLattice, sites: &[usize]) -> Result<Patch> {
    if sites.is_empty() {
        return Ok(Patch {
            anchor: vec![0; torus.d],
            side: torus.side(),
            centered: false,
        });
    }
    let side = torus.side();
    let mut anchor = vec![0i64; torus.d];
    for a in 0..torus.d {
        let mut cs: Vec<i64> = sites.iter().map(|&s| torus.coords(s)[a]).collect();
        cs.sort_unstable();
        cs.dedup();
        // Largest circular gap between consecutive occupied coordinates.
        let mut best_gap = -1;
        let mut best_start = 0;
        for i in 0..cs.len() {
            let next = cs[(i + 1) % cs.len()];
            let gap = (next - cs[i]).rem_euclid(side);
            let gap = if gap == 0 { side } else { gap };
            if gap > best_gap {
                best_gap = gap;
                best_start = next;
            }
        }
        let extent = side - best_gap + 1;
        if extent > side - 1 {
            return Err(RgError::NoPatch { axis: a });
        }
        anchor[a] = best_start;
    }
    Ok(Patch {
        anchor,
        side,
        centered: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(d: usize, l: u32, n: u32) -> TorusLattice {
        TorusLattice::new(d, l, n).unwrap()
    }

    #[test]
    fn site_coord_roundtrip() {
        let torus = t(3, 2, 2);
        assert_eq!(torus.volume(), 64);
        for s in torus.sites() {
            assert_eq!(torus.site(&torus.coords(s)), s);
        }
    }

    #[test]
    fn digit_helpers_match_coordinate_forms() {
        // shift and dist_inf run on raw digits; pin them to the coords form
        let torus = t(3, 2, 2);
        let offs = [[0i64, 0, 0], [1, 0, -1], [5, -3, 2], [-7, 7, 63]];
        for x in torus.sites() {
            for off in &offs {
                let mut c = torus.coords(x);
                for a in 0..3 {
                    c[a] = (c[a] + off[a]).rem_euclid(torus.side());
                }
                assert_eq!(torus.shift(x, off), torus.site(&c));
            }
            for y in [0usize, 1, 9, 35, 63] {
                let (cx, cy) = (torus.coords(x), torus.coords(y));
                let want = (0..3)
                    .map(|a| {
                        let delta = (cx[a] - cy[a]).rem_euclid(torus.side());
                        delta.min(torus.side() - delta)
                    })
                    .max()
                    .unwrap();
                assert_eq!(torus.dist_inf(x, y), want);
            }
        }
    }

    #[test]
    fn block_counts_match_scales() {
        // scale-0 blocks are sites; counts follow L^{d(N-j)}
        let torus = t(3, 2, 2);
        assert_eq!(torus.blocks(0).unwrap().len(), 64);
        assert_eq!(torus.blocks(1).unwrap().len(), 8);
        assert_eq!(torus.blocks(2).unwrap().len(), 1);
        let torus = t(4, 2, 1);
        assert_eq!(torus.blocks(1).unwrap().len(), 1);
        assert!(torus.blocks(2).is_err());
    }

    #[test]
    fn blocks_partition_torus() {
        let torus = t(2, 3, 2);
        for j in 0..=2 {
            let mut seen = vec![false; torus.volume()];
            for b in torus.blocks(j).unwrap() {
                for s in b.sites(&torus) {
                    assert!(!seen[s]);
                    seen[s] = true;
                }
            }
            assert!(seen.iter().all(|&x| x));
        }
    }

    #[test]
    fn corner_touch_is_connected() {
        let torus = t(2, 2, 2);
        // blocks at grid (0,0) and (1,1) touch at a corner: dist_inf = 1
        let b00 = torus.block_of_site(1, torus.site(&[0, 0]));
        let b11 = torus.block_of_site(1, torus.site(&[2, 2]));
        let p = Polymer::from_blocks(1, [b00, b11]);
        assert_eq!(p.components(&torus).len(), 1);
    }

    #[test]
    fn gap_disconnects() {
        let torus = t(1, 3, 2);
        // sites 0 and 2 have an empty site between them: distance 2
        let p = Polymer::from_blocks(0, [0, 2]);
        assert_eq!(p.components(&torus).len(), 2);
        assert!(Polymer::empty(0).components(&torus).is_empty());
    }

    #[test]
    fn component_split_is_additive() {
        let torus = t(1, 2, 3);
        let x = Polymer::from_blocks(0, [0, 1]);
        let y = Polymer::from_blocks(0, [4, 5]);
        assert!(x.is_disconnected_from(&y, &torus));
        let mut split = x.union(&y).components(&torus);
        let mut direct = x.components(&torus);
        direct.extend(y.components(&torus));
        split.sort();
        direct.sort();
        assert_eq!(split, direct);
    }

    #[test]
    fn closure_of_block_is_parent() {
        let torus = t(2, 2, 2);
        let y = Polymer::single(0, torus.site(&[1, 1]));
        let c = y.closure(&torus).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.scale, 1);
        assert!(Polymer::empty(0).closure(&torus).unwrap().is_empty());
    }

    #[test]
    fn closure_is_minimal_cover() {
        // brute force: smallest (j+1)-polymer containing Y
        let torus = t(2, 2, 2);
        let y = Polymer::from_blocks(0, [torus.site(&[1, 1]), torus.site(&[2, 1])]);
        let c = y.closure(&torus).unwrap();
        let y_sites: BTreeSet<usize> = y.sites(&torus).into_iter().collect();
        let mut best: Option<Polymer> = None;
        for mask in 0u32..16 {
            let p = Polymer::from_blocks(1, (0..4).filter(|i| mask >> i & 1 == 1));
            let p_sites: BTreeSet<usize> = p.sites(&torus).into_iter().collect();
            if y_sites.is_subset(&p_sites) && best.as_ref().map_or(true, |b| p.len() < b.len()) {
                best = Some(p);
            }
        }
        assert_eq!(c, best.unwrap());
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn closure_monotone_under_iteration() {
        let torus = t(2, 2, 3);
        let y = Polymer::from_blocks(0, [torus.site(&[1, 1]), torus.site(&[2, 2])]);
        let c1 = y.closure(&torus).unwrap();
        let c2 = c1.closure(&torus).unwrap();
        // c2 refined to scale 0 contains c1 refined to scale 0
        let c1s: BTreeSet<usize> = c1.refine(&torus, 0).blocks;
        let c2s: BTreeSet<usize> = c2.refine(&torus, 0).blocks;
        assert!(c1s.is_subset(&c2s));
    }

    #[test]
    fn small_set_bounds() {
        let torus = t(1, 2, 3);
        // chain of 2^d = 2 blocks is small, 3 is not
        assert!(Polymer::from_blocks(0, [0, 1]).is_small(&torus));
        assert!(!Polymer::from_blocks(0, [0, 1, 2]).is_small(&torus));
        // d=4: single block small since 1 <= 16
        let torus4 = t(4, 2, 1);
        assert!(Polymer::single(0, 0).is_small(&torus4));
    }

    #[test]
    fn neighbourhood_matches_small_set_enumeration() {
        // X^square = union of all small sets meeting X, by brute force
        for (d, l, n) in [(1usize, 2u32, 3u32), (2, 3, 1)] {
            let torus = t(d, l, n);
            let b = 1;
            let x = Polymer::single(0, b);
            let hull = x.small_set_neighbourhood(&torus);
            let mut expect = BTreeSet::new();
            for set in connected_sets_containing(&torus, 0, b, 1 << d) {
                expect.extend(set);
            }
            assert_eq!(hull.blocks, expect);
            assert!(x.is_subset(&hull));
            assert_eq!(hull.scale, x.scale);
        }
    }

    #[test]
    fn patch_existence() {
        let torus = t(2, 2, 2);
        // single block: patch exists
        let block = Polymer::single(1, 0);
        let p = coordinate_patch(&torus, &block.sites(&torus)).unwrap();
        assert!(!p.centered);
        // whole torus: no patch
        let all: Vec<usize> = torus.sites().collect();
        assert!(coordinate_patch(&torus, &all).is_err());
    }

    #[test]
    fn patch_is_isometric() {
        let torus = t(2, 2, 2);
        // a wrapped pair near the seam still unwraps isometrically
        let sites = vec![torus.site(&[3, 0]), torus.site(&[0, 0]), torus.site(&[1, 0])];
        let p = coordinate_patch(&torus, &sites).unwrap();
        for &a in &sites {
            for &b in &sites {
                let ca = p.coords(&torus, a);
                let cb = p.coords(&torus, b);
                let dist = ca
                    .iter()
                    .zip(&cb)
                    .map(|(x, y)| (x - y).abs())
                    .max()
                    .unwrap();
                assert_eq!(dist, torus.dist_inf(a, b));
            }
        }
    }

    #[test]
    fn patch_rejects_wrapping_span() {
        let torus = t(1, 2, 2);
        // all four sites of the length-4 circle wrap on axis 0
        let sites: Vec<usize> = torus.sites().collect();
        match coordinate_patch(&torus, &sites) {
            Err(RgError::NoPatch { axis: 0 }) => {}
            other => panic!("expected no-patch on axis 0, got {other:?}"),
        }
    }

    #[test]
    fn enumerate_polymers_counts() {
        let torus = t(1, 3, 2);
        let region = [0usize, 1, 2];
        let all = enumerate_polymers(&torus, 0, &region, PolymerFilter::All, 16).unwrap();
        assert_eq!(all.len(), 8);
        let conn = enumerate_polymers(&torus, 0, &region, PolymerFilter::Connected, 16).unwrap();
        assert_eq!(conn.len(), 6); // {0},{1},{2},{01},{12},{012}
        let too_big: Vec<usize> = (0..17).collect();
        assert!(matches!(
            enumerate_polymers(&t(1, 2, 5), 0, &too_big, PolymerFilter::All, 16),
            Err(RgError::EnumerationCap { count: 17, cap: 16 })
        ));
    }
}
